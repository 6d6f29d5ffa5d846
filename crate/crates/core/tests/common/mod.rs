//! Oracles and property checks shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;

use homodrift_core::estimate::{
    jacobian_fd, ou_closed_form_hat, ou_closed_form_tilde, solve_estimator, BasisMode, BetaFamily, ScoreContext,
    ScoreSettings, SolverOptions,
};
use homodrift_core::filterbank::{filter_direct, filter_recurrent, FilterSpec};
use homodrift_core::harness::{load_result, run_experiment, ExperimentConfig, RunOptions};
use homodrift_core::homogenize::{cell_problem, compute_k, simpson, DEFAULT_N_QUAD};
use homodrift_core::simulate::{
    derive_seed, integrate, rng_from_seed, simulate_homogenized, simulate_homogenized_observed,
    simulate_multiscale, subsample, SimSpec,
};
use homodrift_core::spectral::{assemble, build_mesh, ou_eigen_analytic, solve_eigenpairs, EigenBasis};
use homodrift_core::{
    FastPotential, HomogenizedModel, MultiscaleModel, ObservationSet, Polynomial, SlowPotential,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// `I_0(x) = sum_k (x^2/4)^k / (k!)^2`.
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

/// Exact OU transitions `X' = e^{-a delta} X + sqrt(Sigma/a (1 - e^{-2 a delta})) xi`.
pub fn ou_exact(a: f64, sigma: f64, delta: f64, n: usize, x0: f64, seed: u64) -> ObservationSet {
    let mut rng = rng_from_seed(seed);
    let q = (-a * delta).exp();
    let s = (sigma / a * (1.0 - q * q)).sqrt();
    let mut x = Vec::with_capacity(n + 1);
    x.push(x0);
    for _ in 0..n {
        let xi: f64 = StandardNormal.sample(&mut rng);
        x.push(q * x.last().unwrap() + s * xi);
    }
    ObservationSet::scalar(x, delta).unwrap()
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// One named property outcome.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }

    pub fn assert(&self) {
        assert!(self.pass, "{}: {}", self.name, self.detail);
    }
}

/// Writes straight to the process stderr, bypassing the test harness capture.
pub fn emit(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

pub fn k_cos_sigma1() -> f64 {
    1.0 / bessel_i0(1.0).powi(2)
}

// potentials

pub fn prop_potential_derivatives() -> Check {
    let mut rng = rng_from_seed(11);
    let mut worst: f64 = 0.0;
    let h = 1e-4;
    for v in [
        SlowPotential::quadratic(),
        SlowPotential::quartic(),
        SlowPotential::sextic(),
        SlowPotential::bistable(),
        SlowPotential::double_well(),
    ] {
        for c in v.components() {
            for _ in 0..100 {
                let x: f64 = rng.random_range(-5.0..5.0);
                let d1 = (c.value(x + h) - c.value(x - h)) / (2.0 * h);
                let d2 = (c.first(x + h) - c.first(x - h)) / (2.0 * h);
                let e1 = (d1 - c.first(x)).abs() / c.first(x).abs().max(1.0);
                let e2 = (d2 - c.second(x)).abs() / c.second(x).abs().max(1.0);
                worst = worst.max(e1).max(e2);
            }
        }
    }
    Check::new("potential derivatives vs central differences", worst <= 1e-6, format!("worst rel err {worst:.2e}"))
}

pub fn prop_fast_periodicity() -> Check {
    let mut rng = rng_from_seed(12);
    let p = FastPotential::cos();
    let worst = (0..1000)
        .map(|_| {
            let y: f64 = rng.random_range(-50.0..50.0);
            (p.value(y) - p.value(y + p.period())).abs()
        })
        .fold(0.0, f64::max);
    Check::new("fast potential periodicity", worst <= 1e-12, format!("max |p(y)-p(y+L)| {worst:.1e}"))
}

// homogenize

pub fn prop_k_quadrature_monotone() -> Check {
    let p = FastPotential::cos();
    let ks: Vec<f64> = [16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192].iter().map(|&n| compute_k(&p, 1.0, n).unwrap()).collect();
    let diffs: Vec<f64> = ks.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    // once the gap sits at roundoff its ordering carries no information
    let above_floor: Vec<f64> = diffs.iter().copied().filter(|d| *d > 1e-14).collect();
    let monotone = above_floor.windows(2).all(|w| w[1] <= w[0]);
    let last = *diffs.last().unwrap();
    Check::new(
        "K quadrature convergence",
        monotone && last < 1e-12,
        format!("gaps {}, monotone above roundoff = {monotone}", sci(&diffs)),
    )
}

pub fn prop_k_identities_and_bounds() -> Check {
    let mut worst: f64 = 0.0;
    let mut bounded = true;
    for sigma in [0.3, 0.7, 1.0, 2.5] {
        for p in [FastPotential::cos(), FastPotential::cos_with_period(1.0).unwrap()] {
            let r = cell_problem(&p, sigma, DEFAULT_N_QUAD).unwrap();
            let k1 = r.k_by_integral(DEFAULT_N_QUAD, 1);
            let k2 = r.k_by_integral(DEFAULT_N_QUAD, 2);
            worst = worst.max((k1 - r.k).abs()).max((k2 - r.k).abs());
            bounded &= r.k > 0.0 && r.k <= 1.0;
        }
    }
    Check::new(
        "K integral identities and 0 < K <= 1",
        worst <= 1e-8 && bounded,
        format!("max identity gap {worst:.1e}"),
    )
}

// simulate

/// Mean endpoint error over `paths` paths with shared Brownian increments,
/// against an `h0/64` reference.
pub fn strong_order_slope() -> (f64, Vec<f64>) {
    let t = 1.0;
    let h0 = 1.0 / 16.0;
    let fine = 64;
    let n_fine = (t / h0) as usize * fine;
    let h_ref = t / n_fine as f64;
    let factors = [1usize, 2, 4, 8];
    let paths = 400;
    let mut errs = vec![0.0; factors.len()];
    let drift = |x: &[f64], b: &mut [f64]| b[0] = -x[0];
    for p in 0..paths {
        let mut rng = rng_from_seed(derive_seed(5, &[p]));
        let dw: Vec<f64> = (0..n_fine).map(|_| StandardNormal.sample(&mut rng)).collect();
        let end = |stride: usize| -> f64 {
            let h = h_ref * stride as f64;
            let mut k = 0;
            let mut out = 0.0;
            integrate(
                &[1.0],
                drift,
                1.0,
                h,
                n_fine / stride,
                |buf: &mut [f64]| {
                    buf[0] = dw[k..k + stride].iter().sum::<f64>() / (stride as f64).sqrt();
                    k += stride;
                },
                |_, x| out = x[0],
            )
            .unwrap();
            out
        };
        let reference = end(1);
        for (i, &f) in factors.iter().enumerate() {
            errs[i] += (end(fine / f) - reference).abs() / paths as f64;
        }
    }
    let hs: Vec<f64> = factors.iter().map(|&f| h0 / f as f64).collect();
    (loglog_slope(&hs, &errs), errs)
}

pub fn prop_strong_order() -> Check {
    let (slope, errs) = strong_order_slope();
    Check::new(
        "Euler strong order",
        (0.8..=1.2).contains(&slope),
        format!("slope {slope:.3} from errors {}", sci(&errs)),
    )
}

pub fn prop_seed_determinism_and_finiteness() -> Check {
    let m = MultiscaleModel::new(vec![1.0], 1.0, 0.1, SlowPotential::quadratic(), FastPotential::cos()).unwrap();
    let spec = SimSpec::new(20.0, 1e-3, 99);
    let a = simulate_multiscale(&m, &spec).unwrap();
    let b = simulate_multiscale(&m, &spec).unwrap();
    let handles: Vec<_> = (0..3).map(|_| std::thread::spawn(move || simulate_multiscale(&m_clone(), &spec).unwrap())).collect();
    let same_threaded = handles.into_iter().all(|h| h.join().unwrap() == a);
    let finite = a.values().iter().all(|v| v.is_finite());
    Check::new(
        "seed determinism and finite paths",
        a == b && same_threaded && finite,
        format!("repeat equal {}, cross-thread equal {same_threaded}, finite {finite}", a == b),
    )
}

fn m_clone() -> MultiscaleModel {
    MultiscaleModel::new(vec![1.0], 1.0, 0.1, SlowPotential::quadratic(), FastPotential::cos()).unwrap()
}

// filterbank

pub fn filter_equivalence(cases: usize, seed: u64) -> Check {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(1..=1000);
        let delta: f64 = 2.0 * (1.0 - rng.random::<f64>());
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let d = filter_direct(&x, delta);
        let r = filter_recurrent(&x, delta);
        let e = d.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(e);
    }
    Check::new("filter recurrence vs direct sum", worst <= 1e-12, format!("{cases} series, worst rel diff {worst:.1e}"))
}

pub fn prop_filter_bound() -> Check {
    let mut rng = rng_from_seed(21);
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..500);
        let delta: f64 = rng.random_range(0.01..3.0);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let bound = FilterSpec::new(delta).stationary_gain() * x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ok &= filter_recurrent(&x, delta).iter().all(|v| v.abs() <= bound * (1.0 + 1e-12));
    }
    Check::new("filter boundedness", ok, "100 random series")
}

/// Error of the discrete filter against the trapezoid continuous filter on
/// the fine grid, for shrinking `delta`.
pub fn continuous_filter_slope() -> (f64, Vec<f64>, Vec<f64>) {
    let h = 1e-4;
    let t = 10.0;
    let deltas = [0.16, 0.08, 0.04, 0.02, 0.01];
    let hm = HomogenizedModel::new(vec![1.0], 1.0, SlowPotential::quadratic()).unwrap();
    let paths = 4;
    let mut errs = vec![0.0; deltas.len()];
    for p in 0..paths {
        let traj = simulate_homogenized(&hm, &SimSpec::new(t, h, derive_seed(8, &[p])).with_x0(1.0)).unwrap();
        let xs = traj.values();
        let decay = (-h).exp();
        let mut zc = vec![0.0; xs.len()];
        for k in 1..xs.len() {
            zc[k] = decay * zc[k - 1] + 0.5 * h * (decay * xs[k - 1] + xs[k]);
        }
        for (i, &delta) in deltas.iter().enumerate() {
            let stride = (delta / h).round() as usize;
            let obs = subsample(&traj, delta).unwrap().with_filter();
            let z = obs.z().unwrap();
            let e = (0..obs.len()).map(|n| (z[n] - zc[n * stride]).powi(2)).sum::<f64>() / obs.len() as f64;
            errs[i] += e.sqrt() / paths as f64;
        }
    }
    (loglog_slope(&deltas, &errs), deltas.to_vec(), errs)
}

pub fn prop_continuous_filter() -> Check {
    let (slope, _, errs) = continuous_filter_slope();
    Check::new("discrete filter converges to continuous filter", slope >= 0.4, format!("slope {slope:.3}, errors {}", sci(&errs)))
}

// spectral

pub fn ou_fem_errors(a: f64, r: f64) -> (Vec<f64>, Vec<f64>) {
    let mesh = build_mesh(None, 0.05, r).unwrap();
    let w = assemble(&mesh, &[a], 1.0, &SlowPotential::quadratic(), 2).unwrap();
    let b = solve_eigenpairs(&w, 3).unwrap();
    let ou = ou_eigen_analytic(a, 1.0, 3).unwrap();
    let mut lam_rel = Vec::new();
    let mut fn_err = Vec::new();
    for j in 1..=3 {
        lam_rel.push((b.lambda(j) - j as f64 * a).abs() / (j as f64 * a));
        let mut exact: Vec<f64> = mesh.nodes().iter().map(|&x| ou.eval(j, x)).collect();
        let me = w.apply_mass(&exact);
        let nrm = exact.iter().zip(&me).map(|(p, q)| p * q).sum::<f64>().sqrt();
        let dot: f64 = b.theta(j).iter().zip(&me).map(|(p, q)| p * q).sum();
        let sign = dot.signum();
        exact.iter_mut().for_each(|v| *v *= sign / nrm);
        let diff: Vec<f64> = b.theta(j).iter().zip(&exact).map(|(p, q)| p - q).collect();
        let md = w.apply_mass(&diff);
        fn_err.push(diff.iter().zip(&md).map(|(p, q)| p * q).sum::<f64>().sqrt());
    }
    (lam_rel, fn_err)
}

pub fn prop_fem_vs_ou() -> Check {
    let mut lam_worst: f64 = 0.0;
    let mut fn_worst: (f64, f64, usize) = (0.0, 0.0, 0);
    for a in [0.5, 1.0, 2.0] {
        let (l, f) = ou_fem_errors(a, 6.0);
        lam_worst = lam_worst.max(l.iter().cloned().fold(0.0, f64::max));
        for (j, e) in f.iter().enumerate() {
            if *e > fn_worst.0 {
                fn_worst = (*e, a, j + 1);
            }
        }
    }
    Check::new(
        "FEM vs OU eigenpairs at R = 6",
        lam_worst <= 0.03 && fn_worst.0 <= 0.03,
        format!(
            "worst rel eigenvalue err {lam_worst:.2e}; worst eigenfunction L2 err {:.3} (a = {}, j = {})",
            fn_worst.0, fn_worst.1, fn_worst.2
        ),
    )
}

/// Ratio `|lambda(2h) - ref| / |lambda(h) - ref|` of the first eigenvalue.
pub fn refinement_ratio(slow: &SlowPotential, h: f64, r: f64, reference: Option<f64>) -> f64 {
    let lam = |h: f64| {
        let mesh = build_mesh(None, h, r).unwrap();
        let w = assemble(&mesh, &[1.0], 1.0, slow, 2).unwrap();
        solve_eigenpairs(&w, 1).unwrap().lambda(1)
    };
    let reference = reference.unwrap_or_else(|| lam(h / 8.0));
    (lam(2.0 * h) - reference).abs() / (lam(h) - reference).abs()
}

pub fn prop_mesh_refinement() -> Check {
    let ratio = refinement_ratio(&SlowPotential::quartic(), 0.05, 4.0, None);
    Check::new("mesh refinement of lambda_1 (quartic, fine-mesh reference)", ratio >= 3.0, format!("ratio {ratio:.2}"))
}

pub fn prop_basis_invariants() -> Check {
    let mut worst_norm: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    let mut signs = true;
    let mut positive = true;
    for (slow, a, sigma) in [
        (SlowPotential::quadratic(), vec![1.0], 1.0),
        (SlowPotential::quartic(), vec![1.0], 0.6),
        (SlowPotential::sextic(), vec![0.8], 0.6),
        (SlowPotential::bistable(), vec![1.2, 0.7], 0.7),
        (SlowPotential::double_well(), vec![1.0], 0.5),
    ] {
        let mesh = build_mesh(None, 0.05, 2.5).unwrap();
        let w = assemble(&mesh, &a, sigma, &slow, 2).unwrap();
        let b = solve_eigenpairs(&w, 4).unwrap();
        positive &= b.lambda(1) > 0.0 && b.lambdas().windows(2).all(|p| p[1] > p[0]);
        for j in 1..=4 {
            let th = b.theta(j);
            let n: f64 = th.iter().zip(w.apply_mass(th)).map(|(p, q)| p * q).sum();
            worst_norm = worst_norm.max((n - 1.0).abs());
            signs &= *th.last().unwrap() > 0.0;
            worst_res = worst_res.max(b.residuals()[j - 1]);
        }
    }
    Check::new(
        "spectral basis normalization, sign and residual",
        worst_norm <= 1e-10 && signs && positive && worst_res <= 1e-8,
        format!("max |theta'M theta - 1| {worst_norm:.1e}, max residual {worst_res:.1e}, signs {signs}, ordered {positive}"),
    )
}

pub fn prop_weight_rescaling() -> Check {
    let mesh = build_mesh(None, 0.05, 3.0).unwrap();
    let a = [1.2, 0.7];
    let base = SlowPotential::bistable();
    let w = assemble(&mesh, &a, 0.7, &base, 2).unwrap();
    let b0 = solve_eigenpairs(&w, 3).unwrap();
    let mut lam_err: f64 = 0.0;
    let mut vec_err: f64 = 0.0;
    // a constant added to a.V multiplies the weight by a constant
    for shift in [-30.0, 2.0, 40.0] {
        let comps: Vec<Polynomial> = base.components().iter().map(|c| c.polynomial().clone()).collect();
        let bumped = vec![comps[0].add(&Polynomial::new(vec![shift / a[0]])), comps[1].clone()];
        let v = SlowPotential::custom(bumped).unwrap();
        let b = solve_eigenpairs(&assemble(&mesh, &a, 0.7, &v, 2).unwrap(), 3).unwrap();
        for j in 1..=3 {
            lam_err = lam_err.max((b.lambda(j) - b0.lambda(j)).abs() / b0.lambda(j));
            // M-norm: nodes carrying weight e^-30 hold no information beyond roundoff
            let s = b.theta(j).iter().zip(b0.theta(j)).map(|(p, q)| p * q).sum::<f64>().signum();
            let d: Vec<f64> = b.theta(j).iter().zip(b0.theta(j)).map(|(p, q)| s * p - q).collect();
            let norm = d.iter().zip(w.apply_mass(&d)).map(|(p, q)| p * q).sum::<f64>().sqrt();
            vec_err = vec_err.max(norm);
        }
    }
    for c in [1e-6, 3.7, 1e8] {
        let b = solve_eigenpairs(&w.rescaled(c), 3).unwrap();
        for j in 1..=3 {
            lam_err = lam_err.max((b.lambda(j) - b0.lambda(j)).abs() / b0.lambda(j));
        }
    }
    Check::new(
        "weight-rescaling invariance",
        lam_err <= 1e-10 && vec_err <= 1e-10,
        format!("max rel eigenvalue change {lam_err:.1e}, max eigenvector change in M-norm {vec_err:.1e}"),
    )
}

// estimate

pub fn ou_ctx(obs: &ObservationSet, filtered: bool, j: usize, basis: BasisMode) -> ScoreContext {
    let s = ScoreSettings::new(SlowPotential::quadratic(), 1.0, BetaFamily::identity(j)).filtered(filtered).basis(basis);
    ScoreContext::new(obs, s).unwrap()
}

/// Generic solver against both closed forms on `count` synthetic samples.
pub fn closed_form_equivalence(count: usize, seed: u64) -> Check {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    let mut undefined = 0;
    let mut mismatched = 0;
    for i in 0..count {
        let a: f64 = rng.random_range(0.3..2.0);
        let delta: f64 = rng.random_range(0.1..1.0);
        let n = rng.random_range(200..2000);
        let obs = ou_exact(a, 1.0, delta, n, 0.0, derive_seed(seed, &[i as u64])).with_filter();
        for filtered in [false, true] {
            let cf = if filtered { ou_closed_form_tilde(&obs) } else { ou_closed_form_hat(&obs) };
            let r = solve_estimator(&ou_ctx(&obs, filtered, 1, BasisMode::Auto), &[1.0], &SolverOptions::default())
                .unwrap();
            match cf {
                // no admissible root exists, so the solver must not claim one
                Err(_) => {
                    undefined += 1;
                    if r.converged {
                        mismatched += 1;
                    }
                }
                Ok(cf) => {
                    if !r.converged {
                        mismatched += 1;
                    }
                    worst = worst.max((r.a_hat[0] - cf).abs());
                }
            }
        }
    }
    Check::new(
        "generic solver vs OU closed forms",
        worst <= 1e-8 && mismatched == 0,
        format!(
            "{count} samples x 2 variants, max |diff| {worst:.1e}, {undefined} without admissible root, \
             {mismatched} convergence mismatches"
        ),
    )
}

/// Per-observation score at the truth with its martingale standard error.
pub fn martingale_zero(j: usize, n: usize, seed: u64) -> (f64, f64) {
    let (a, sigma, delta) = (1.0, 1.0, 0.5);
    let obs = ou_exact(a, sigma, delta, n, 0.0, seed);
    let basis = ou_eigen_analytic(a, sigma, j).unwrap();
    let x = obs.x();
    let terms: Vec<f64> = (0..n)
        .map(|i| {
            (1..=j)
                .map(|k| x[i] * (basis.eval(k, x[i + 1]) - (-basis.lambda(k) * delta).exp() * basis.eval(k, x[i])))
                .sum::<f64>()
                / delta
        })
        .collect();
    let (m, sd) = mean_sd(&terms);
    let ctx = ou_ctx(&obs, false, j, BasisMode::Auto);
    let g = ctx.score(&[a]).unwrap()[0] / n as f64;
    assert!((g - m).abs() <= 1e-9 * m.abs().max(1.0), "score_G disagrees with the term sum");
    (g, sd / (n as f64).sqrt())
}

pub fn prop_martingale_zero() -> Check {
    let mut detail = Vec::new();
    let mut ok = true;
    for j in 1..=3 {
        let (g, se) = martingale_zero(j, 100_000, 40 + j as u64);
        ok &= g.abs() <= 3.0 * se;
        detail.push(format!("J={j}: {g:.2e} (se {se:.1e})"));
    }
    Check::new("martingale-zero score at the truth", ok, detail.join(", "))
}

pub fn bistable_sample(n: usize, seed: u64) -> ObservationSet {
    let hm = HomogenizedModel::new(vec![1.0, 1.0], 0.5, SlowPotential::bistable()).unwrap();
    simulate_homogenized_observed(&hm, &SimSpec::new(n as f64, 0.01, seed), 1.0).unwrap()
}

pub fn bistable_ctx(obs: &ObservationSet, scale: f64) -> ScoreContext {
    let beta = BetaFamily::parse("list:x^3,x", 1).unwrap().scaled(scale);
    ScoreContext::new(obs, ScoreSettings::new(SlowPotential::bistable(), 0.5, beta)).unwrap()
}

pub fn prop_beta_scaling() -> Check {
    let opts = SolverOptions::default();
    let obs = bistable_sample(500, 3);
    let base = solve_estimator(&bistable_ctx(&obs, 1.0), &[1.0, 1.0], &opts).unwrap();
    let mut worst: f64 = 0.0;
    for c in [0.25, 3.0] {
        let r = solve_estimator(&bistable_ctx(&obs, c), &[1.0, 1.0], &opts).unwrap();
        worst = worst.max(r.a_hat.iter().zip(&base.a_hat).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
    }
    let ou = ou_exact(0.8, 1.0, 0.5, 2000, 0.0, 4);
    let s = ScoreSettings::new(SlowPotential::quadratic(), 1.0, BetaFamily::identity(2));
    let r1 = solve_estimator(&ScoreContext::new(&ou, s.clone()).unwrap(), &[1.0], &opts).unwrap();
    let mut s2 = s;
    s2.beta = s2.beta.scaled(2.5);
    let r2 = solve_estimator(&ScoreContext::new(&ou, s2).unwrap(), &[1.0], &opts).unwrap();
    worst = worst.max((r1.a_hat[0] - r2.a_hat[0]).abs());
    Check::new(
        "beta-scaling invariance of the root",
        worst <= 1e-10 && base.converged && r1.converged,
        format!("max change {worst:.1e} (bistable FEM and OU J=2)"),
    )
}

pub fn prop_root_certificate() -> Check {
    let opts = SolverOptions::default();
    let mut ok = true;
    let mut count = 0;
    for seed in 0..4 {
        let obs = bistable_sample(300, 100 + seed);
        let ctx = bistable_ctx(&obs, 1.0);
        let r = solve_estimator(&ctx, &[1.0, 1.0], &opts).unwrap();
        if r.converged {
            count += 1;
            ok &= ctx.score_norm(&r.a_hat).unwrap() <= opts.tol_score;
        }
        let ou = ou_exact(1.0, 1.0, 0.5, 500, 0.0, 200 + seed).with_filter();
        for filtered in [false, true] {
            let ctx = ou_ctx(&ou, filtered, 2, BasisMode::Fem);
            let r = solve_estimator(&ctx, &[1.0], &opts).unwrap();
            if r.converged {
                count += 1;
                ok &= ctx.score_norm(&r.a_hat).unwrap() <= opts.tol_score;
            }
        }
    }
    Check::new("root certificate of converged results", ok && count > 0, format!("{count} converged results re-checked"))
}

pub fn jacobian_halving(step: f64) -> f64 {
    let obs = bistable_sample(400, 9);
    let ctx = bistable_ctx(&obs, 1.0);
    let n = obs.n_intervals() as f64;
    let j1 = jacobian_fd(&ctx, &[1.0, 1.0], step).unwrap();
    let j2 = jacobian_fd(&ctx, &[1.0, 1.0], step / 2.0).unwrap();
    let mut worst: f64 = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            worst = worst.max((j1[r][c] - j2[r][c]).abs() / n);
        }
    }
    worst / (step * step)
}

pub fn prop_jacobian_consistency() -> Check {
    let ratio = jacobian_halving(1e-3);
    Check::new(
        "Jacobian step-halving consistency (bistable, a = (1, 1))",
        ratio <= 10.0,
        format!("|FD(s) - FD(s/2)| / N = {ratio:.2} s^2"),
    )
}

/// Median absolute error of the generic estimator over `reps` replications.
pub fn consistency_medians(ns: &[usize], reps: usize) -> Vec<f64> {
    ns.iter()
        .map(|&n| {
            let errs: Vec<f64> = (0..reps)
                .map(|r| {
                    let obs = ou_exact(1.0, 1.0, 0.5, n, 0.0, derive_seed(77, &[n as u64, r as u64]));
                    let res = solve_estimator(&ou_ctx(&obs, false, 1, BasisMode::Auto), &[1.0], &SolverOptions::default())
                        .unwrap();
                    (res.a_hat[0] - 1.0).abs()
                })
                .collect();
            median(&errs)
        })
        .collect()
}

pub fn prop_consistency_trend() -> Check {
    let med = consistency_medians(&[1_000, 10_000, 100_000], 15);
    Check::new(
        "consistency trend in N",
        med.windows(2).all(|w| w[1] < w[0]),
        format!("median errors {}", sci(&med)),
    )
}

// harness

pub const SMALL_CONFIG: &str = r#"
    name = "small"
    T = 100.0
    n_rep = 6
    master_seed = 3
    [model]
    kind = "multiscale"
    alpha = [1.0]
    sigma = 1.0
    epsilon = 0.1
    [sampling]
    delta = { zeta = [0.0, 0.5] }
    n_obs = "dyadic"
    [estimation]
    estimators = ["hat", "tilde", "closed_form", "mle_hat"]
    J = [1, 2]
"#;

pub fn prop_harness_determinism() -> Check {
    let cfg = ExperimentConfig::from_toml_str(SMALL_CONFIG).unwrap();
    let one = run_experiment(&cfg, RunOptions { threads: Some(1), full_scale: false }).unwrap();
    let three = run_experiment(&cfg, RunOptions { threads: Some(3), full_scale: false }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (j1, c1) = one.write(&dir.path().join("a"), "run").unwrap();
    let (j3, c3) = three.write(&dir.path().join("b"), "run").unwrap();
    let same = std::fs::read(&j1).unwrap() == std::fs::read(&j3).unwrap()
        && std::fs::read(&c1).unwrap() == std::fs::read(&c3).unwrap();
    Check::new("harness determinism across thread counts", same, "1 vs 3 workers, JSON and CSV byte-compared")
}

pub fn prop_harness_provenance() -> Check {
    let cfg = ExperimentConfig::from_toml_str(SMALL_CONFIG).unwrap();
    let res = run_experiment(&cfg, RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (json, csv) = res.write(dir.path(), "run").unwrap();
    let hash_in_csv = std::fs::read_to_string(&csv).unwrap().contains(&cfg.hash());
    let reload_ok = load_result(&json, Some(&cfg)).is_ok();
    let mut other = cfg.clone();
    other.n_rep += 1;
    let mismatch_rejected = load_result(&json, Some(&other)).is_err();
    Check::new(
        "harness provenance and aggregate reload",
        hash_in_csv && reload_ok && mismatch_rejected,
        format!("hash in CSV {hash_in_csv}, reload {reload_ok}, mismatch rejected {mismatch_rejected}"),
    )
}

pub fn simpson_sanity() -> bool {
    (simpson(|x: f64| x.sin(), 0.0, std::f64::consts::PI, 64) - 2.0).abs() < 1e-7
}

pub fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}
