/// One-pass mean and variance (Welford), mergeable with Chan's update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.count += other.count;
    }

    /// Mean, or NaN without data.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance; NaN with fewer than two values.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            f64::NAN
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn single_value_has_no_variance() {
        let mut s = RunningStats::default();
        assert!(s.mean().is_nan());
        s.push(3.0);
        assert_eq!(s.mean(), 3.0);
        assert!(s.variance().is_nan());
    }

    #[test]
    fn stable_with_large_offset() {
        let mut s = RunningStats::default();
        for k in 0..1000 {
            s.push(1e9 + (k % 2) as f64);
        }
        assert!((s.variance() - 0.25 * 1000.0 / 999.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn matches_two_pass(xs in prop::collection::vec(-1e3f64..1e3, 2..200)) {
            let mut s = RunningStats::default();
            xs.iter().for_each(|&x| s.push(x));
            let (m, v) = naive(&xs);
            prop_assert!((s.mean() - m).abs() <= 1e-9 * (1.0 + m.abs()));
            prop_assert!((s.variance() - v).abs() <= 1e-8 * (1.0 + v));
        }

        #[test]
        fn merge_is_order_independent(xs in prop::collection::vec(-1e3f64..1e3, 3..200), cut in 0usize..1000, cut2 in 0usize..1000) {
            let c1 = cut % xs.len();
            let c2 = c1 + cut2 % (xs.len() - c1);
            let part = |r: &[f64]| { let mut s = RunningStats::default(); r.iter().for_each(|&x| s.push(x)); s };
            let (a, b, c) = (part(&xs[..c1]), part(&xs[c1..c2]), part(&xs[c2..]));
            let mut left = a; left.merge(&b); left.merge(&c);
            let mut bc = b; bc.merge(&c);
            let mut right = a; right.merge(&bc);
            let mut rev = c; rev.merge(&b); rev.merge(&a);
            let whole = part(&xs);
            for s in [left, right, rev] {
                prop_assert_eq!(s.count, whole.count);
                prop_assert!((s.mean() - whole.mean()).abs() <= 1e-9 * (1.0 + whole.mean().abs()));
                prop_assert!((s.variance() - whole.variance()).abs() <= 1e-8 * (1.0 + whole.variance()));
            }
        }
    }
}
