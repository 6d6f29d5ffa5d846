//! Exponential filtering of discrete observations with kernel `k(r) = e^{-r}`:
//! `Z~_0 = 0`, `Z~_n = delta * sum_{k<n} e^{-delta (n-k)} X~_k`.

/// Kernel and spacing of the filter. Only the unit-rate exponential kernel
/// is supported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub delta: f64,
    pub rate: f64,
}

impl FilterSpec {
    pub fn new(delta: f64) -> Self {
        assert!(delta > 0.0, "filter spacing must be positive");
        Self { delta, rate: 1.0 }
    }

    pub fn kernel(&self, r: f64) -> f64 {
        (-self.rate * r).exp()
    }

    /// `delta e^{-delta} / (1 - e^{-delta})`, the gain on a constant input.
    pub fn stationary_gain(&self) -> f64 {
        let q = (-self.delta).exp();
        self.delta * q / (1.0 - q)
    }
}

/// O(N^2) evaluation of the defining sum.
pub fn filter_direct(x: &[f64], delta: f64) -> Vec<f64> {
    let spec = FilterSpec::new(delta);
    (0..x.len())
        .map(|n| {
            delta
                * x[..n]
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| spec.kernel(delta * (n - k) as f64) * v)
                    .sum::<f64>()
        })
        .collect()
}

/// O(N) recurrence `Z~_{n+1} = e^{-delta} Z~_n + delta e^{-delta} X~_n`.
pub fn filter_recurrent(x: &[f64], delta: f64) -> Vec<f64> {
    let decay = (-delta).exp();
    let gain = delta * decay;
    let mut z = Vec::with_capacity(x.len());
    if x.is_empty() {
        return z;
    }
    let mut acc = 0.0;
    z.push(acc);
    for &v in &x[..x.len() - 1] {
        acc = decay * acc + gain * v;
        z.push(acc);
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_term_and_zero_input() {
        let z = filter_direct(&[2.0, 2.0, 2.0], 0.5);
        assert_eq!(z[0], 0.0);
        assert!((z[1] - 0.5 * (-0.5f64).exp() * 2.0).abs() < 1e-15);
        assert!(filter_recurrent(&[0.0; 10], 0.3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_decays_geometrically() {
        let e1 = (-1.0f64).exp();
        let want = [0.0, e1, e1 * e1];
        for z in [filter_direct(&[1.0, 0.0, 0.0], 1.0), filter_recurrent(&[1.0, 0.0, 0.0], 1.0)] {
            for (a, b) in z.iter().zip(want) {
                assert!((a - b).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn constant_input_reaches_stationary_gain() {
        let delta = 0.4;
        let c = 1.7;
        let z = filter_recurrent(&vec![c; 400], delta);
        let limit = c * FilterSpec::new(delta).stationary_gain();
        assert!((z[399] - limit).abs() < 1e-12);
    }

    #[test]
    fn empty_input() {
        assert!(filter_recurrent(&[], 1.0).is_empty());
        assert!(filter_direct(&[], 1.0).is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn recurrence_matches_direct_sum(
            x in proptest::collection::vec(-10.0f64..10.0, 1..1000),
            delta in 0.001f64..2.0,
        ) {
            let d = filter_direct(&x, delta);
            let r = filter_recurrent(&x, delta);
            let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            for (a, b) in d.iter().zip(&r) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn output_bounded_by_stationary_gain(
            x in proptest::collection::vec(-5.0f64..5.0, 1..500),
            delta in 0.01f64..3.0,
        ) {
            let bound = FilterSpec::new(delta).stationary_gain() * x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for v in filter_recurrent(&x, delta) {
                prop_assert!(v.abs() <= bound * (1.0 + 1e-12));
            }
        }
    }
}
