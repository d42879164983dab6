//! Nonhomogeneous Poisson arrivals by thinning, and staffing change epochs.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::model::{ModelSpec, SmoothFn};
use crate::numerics;

/// Length of the blocks over which the thinning envelope is constant.
const BLOCK: f64 = 0.25;

/// Arrival rate of the `n`-th system, `nλ(t) + √n λ_g(t)`, floored at 0.
pub fn scaled_rate(spec: &ModelSpec, n: f64, t: f64) -> f64 {
    let g = spec.lambda_g.as_ref().map_or(0.0, |f| f.value(t));
    (n * spec.lambda.value(t) + n.sqrt() * g).max(0.0)
}

fn envelope(spec: &ModelSpec, n: f64, a: f64, b: f64) -> f64 {
    let g = spec
        .lambda_g
        .as_ref()
        .map_or(0.0, |f: &SmoothFn| f.upper_bound(a, b));
    (n * spec.lambda.upper_bound(a, b) + n.sqrt() * g).max(0.0)
}

/// Lazy thinning generator; blocks of fixed length each get their own bound.
#[derive(Debug, Clone)]
pub struct Thinning<'a> {
    spec: &'a ModelSpec,
    n: f64,
    t: f64,
    block_end: f64,
    rate_max: f64,
}

impl<'a> Thinning<'a> {
    pub fn new(spec: &'a ModelSpec, n: f64) -> Self {
        Thinning {
            spec,
            n,
            t: 0.0,
            block_end: BLOCK,
            rate_max: envelope(spec, n, 0.0, BLOCK),
        }
    }

    /// Next arrival epoch, or `None` once past `limit`.
    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R, limit: f64) -> Option<f64> {
        loop {
            if self.t >= limit {
                return None;
            }
            let gap = if self.rate_max > 0.0 {
                Exp::new(self.rate_max).expect("positive rate").sample(rng)
            } else {
                f64::INFINITY
            };
            if self.t + gap >= self.block_end {
                // memoryless: restart from the block boundary with the next bound
                self.t = self.block_end;
                self.block_end += BLOCK;
                self.rate_max = envelope(self.spec, self.n, self.t, self.block_end);
                continue;
            }
            self.t += gap;
            let rate = scaled_rate(self.spec, self.n, self.t);
            debug_assert!(rate <= self.rate_max * (1.0 + 1e-12));
            if rng.gen::<f64>() * self.rate_max < rate {
                return (self.t <= limit).then_some(self.t);
            }
        }
    }
}

/// All arrival epochs in `[0, horizon]`.
pub fn gen_arrivals<R: Rng + ?Sized>(
    spec: &ModelSpec,
    n: f64,
    rng: &mut R,
    horizon: f64,
) -> Vec<f64> {
    let mut th = Thinning::new(spec, n);
    std::iter::from_fn(|| th.next(rng, horizon)).collect()
}

fn staffing_value(spec: &ModelSpec, n: f64, t: f64) -> f64 {
    let g = spec.staffing_g.as_ref().map_or(0.0, |f| f.value(t));
    n * spec.staffing.value(t) + n.sqrt() * g
}

/// `⌈n s(t) + √n s_g(t)⌉`, never negative.
pub fn staffing_level(spec: &ModelSpec, n: f64, t: f64) -> i64 {
    ((staffing_value(spec, n, t) - 1e-9).ceil() as i64).max(0)
}

/// Initial level and the epochs in `(0, end]` where the staffing level changes.
pub fn staffing_epochs(spec: &ModelSpec, n: f64, end: f64) -> (i64, Vec<(f64, i64)>) {
    let level0 = staffing_level(spec, n, 0.0);
    let mut out = Vec::new();
    if matches!(spec.staffing, SmoothFn::Constant { .. })
        && spec
            .staffing_g
            .as_ref()
            .is_none_or(|f| matches!(f, SmoothFn::Constant { .. }))
    {
        return (level0, out);
    }
    let dt = 1e-3;
    let steps = (end / dt).ceil() as usize;
    let mut level = level0;
    let mut t0 = 0.0;
    for k in 1..=steps {
        let t1 = (k as f64 * dt).min(end);
        let l1 = staffing_level(spec, n, t1);
        if l1 > level {
            for target in level + 1..=l1 {
                let tau = numerics::bisect(
                    |t| staffing_value(spec, n, t) - 1e-9 - (target - 1) as f64,
                    t0,
                    t1,
                    1e-13,
                );
                out.push((tau, target));
            }
        } else if l1 < level {
            for target in (l1..level).rev() {
                let tau = numerics::bisect(
                    |t| staffing_value(spec, n, t) - 1e-9 - target as f64,
                    t0,
                    t1,
                    1e-13,
                );
                out.push((tau, target.max(0)));
            }
        }
        level = l1;
        t0 = t1;
    }
    (level0, out)
}
