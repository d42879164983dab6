//! Finite-`n` predictions from the fluid and Gaussian solutions.
//!
//! `X_n(t)` is taken as Gaussian with mean `nX(t)` and variance `nσ²_X̂(t)`.
//! Queue length and busy servers follow by truncating that law at the
//! staffing level `⌈n s(t)⌉`.

use statrs::function::erf::erfc;

use crate::fluid::{FluidSolution, Regime};
use crate::gaussian::GaussianSolution;
use crate::model::ModelSpec;
use crate::table::{Cell, Table};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn std_normal_pdf(d: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * d * d).exp()
}

fn std_normal_cdf(d: f64) -> f64 {
    0.5 * erfc(-d / std::f64::consts::SQRT_2)
}

/// Moments of `(Y − a)⁺` and `Y ∧ a` for `Y ~ N(m, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncated {
    pub mean_excess: f64,
    pub var_excess: f64,
    pub mean_capped: f64,
    pub var_capped: f64,
}

/// `E (Y−a)⁺` and `E ((Y−a)⁺)²` for `Y ~ N(m, σ²)`, `σ > 0`.
fn excess_moments(m: f64, sd: f64, a: f64) -> (f64, f64) {
    let d = (m - a) / sd;
    let (phi, cdf) = (std_normal_pdf(d), std_normal_cdf(d));
    let first = sd * (phi + d * cdf);
    let second = sd * sd * ((1.0 + d * d) * cdf + d * phi);
    (first, (second - first * first).max(0.0))
}

pub fn truncated_moments(m: f64, var: f64, a: f64) -> Truncated {
    if !(var > 0.0) {
        return Truncated {
            mean_excess: (m - a).max(0.0),
            var_excess: 0.0,
            mean_capped: m.min(a),
            var_capped: 0.0,
        };
    }
    let sd = var.sqrt();
    let (mean_excess, var_excess) = excess_moments(m, sd, a);
    // Y ∧ a = a − (a − Y)⁺; the mirrored form keeps the variance free of cancellation
    let (_, var_capped) = excess_moments(-m, sd, -a);
    Truncated {
        mean_excess,
        var_excess,
        mean_capped: m - mean_excess,
        var_capped,
    }
}

/// `(nX(t), nσ²_X̂(t))` at grid index `k`.
pub fn gaussian_x(
    n: f64,
    fluid: &FluidSolution,
    gaussian: &GaussianSolution,
    k: usize,
) -> (f64, f64) {
    (n * fluid.point(k).x, n * gaussian.point(k).var_x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub t: f64,
    pub regime: Regime,
    pub staffing: f64,
    pub mean_x: f64,
    pub var_x: f64,
    pub mean_q: f64,
    pub var_q: f64,
    pub mean_b: f64,
    pub var_b: f64,
    pub mean_w: f64,
    pub var_w: f64,
    pub mean_v: f64,
    pub var_v: f64,
    pub abandon_rate: f64,
}

#[derive(Debug, Clone)]
pub struct PerformanceReport {
    pub n: f64,
    pub rows: Vec<ReportRow>,
}

/// Staffing of the `n`-th system, `⌈n s(t) + √n s_g(t)⌉`.
pub fn scaled_staffing(spec: &ModelSpec, n: f64, t: f64) -> f64 {
    let g = spec.staffing_g.as_ref().map_or(0.0, |f| f.value(t));
    (n * spec.staffing.value(t) + n.sqrt() * g - 1e-9).ceil()
}

/// Predictions on the common grid. With refinement terms present, the
/// `√n`-order mean corrections are added to `X_n`, `W_n` and `V_n`.
pub fn report(
    spec: &ModelSpec,
    n: f64,
    fluid: &FluidSolution,
    gaussian: &GaussianSolution,
) -> PerformanceReport {
    let rn = n.sqrt();
    let rows = (0..fluid.grid().len())
        .map(|k| {
            let f = fluid.point(k);
            let g = gaussian.point(k);
            let shift = |m: f64| if m.is_nan() { 0.0 } else { m };
            let mean_x = n * f.x + rn * shift(g.mean_x);
            let var_x = n * g.var_x;
            let a = scaled_staffing(spec, n, f.t);
            let tm = truncated_moments(mean_x, var_x, a);
            let (mean_w, var_w, mean_v, var_v) = match f.regime {
                Regime::Overloaded => (
                    f.w + shift(g.mean_w) / rn,
                    g.var_w / n,
                    f.v + shift(g.mean_v) / rn,
                    g.var_v / n,
                ),
                Regime::Underloaded => (0.0, 0.0, 0.0, 0.0),
            };
            ReportRow {
                t: f.t,
                regime: f.regime,
                staffing: a,
                mean_x,
                var_x,
                mean_q: tm.mean_excess,
                var_q: tm.var_excess,
                mean_b: tm.mean_capped,
                var_b: tm.var_capped,
                mean_w,
                var_w,
                mean_v,
                var_v,
                abandon_rate: n * f.alpha,
            }
        })
        .collect();
    PerformanceReport { n, rows }
}

impl PerformanceReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
            "t",
            "mean_X",
            "var_X",
            "mean_Q",
            "var_Q",
            "mean_B",
            "var_B",
            "mean_W",
            "var_W",
            "mean_V",
            "var_V",
            "abandon_rate",
            "staffing",
            "regime",
        ]);
        for r in &self.rows {
            t.push(vec![
                r.t.into(),
                r.mean_x.into(),
                r.var_x.into(),
                r.mean_q.into(),
                r.var_q.into(),
                r.mean_b.into(),
                r.var_b.into(),
                r.mean_w.into(),
                r.var_w.into(),
                r.mean_v.into(),
                r.var_v.into(),
                r.abandon_rate.into(),
                r.staffing.into(),
                Cell::from(r.regime.label()),
            ]);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::solve_fluid;
    use crate::gaussian::propagate;
    use crate::model::{PatienceDist, SmoothFn};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn quad_moments(m: f64, sd: f64, a: f64) -> (f64, f64, f64, f64) {
        // Gauss–Legendre over ±12σ split at the threshold
        let lo = m - 12.0 * sd;
        let hi = m + 12.0 * sd;
        let dens = |y: f64| std_normal_pdf((y - m) / sd) / sd;
        let split = a.clamp(lo, hi);
        let step = sd * 1e-3;
        let ex1 = crate::numerics::gauss_legendre(|y| (y - a) * dens(y), split, hi, step);
        let ex2 = crate::numerics::gauss_legendre(|y| (y - a).powi(2) * dens(y), split, hi, step);
        let cap1 = crate::numerics::gauss_legendre(|y| y * dens(y), lo, split, step)
            + a * crate::numerics::gauss_legendre(dens, split, hi, step);
        let cap2 = crate::numerics::gauss_legendre(|y| y * y * dens(y), lo, split, step)
            + a * a * crate::numerics::gauss_legendre(dens, split, hi, step);
        (ex1, ex2 - ex1 * ex1, cap1, cap2 - cap1 * cap1)
    }

    #[test]
    fn truncated_examples() {
        let t = truncated_moments(0.0, 1.0, 0.0);
        assert_relative_eq!(t.mean_excess, 0.398_942_280_401_432_7, epsilon = 1e-15);
        let far = truncated_moments(6.0, 1.0, 0.0);
        assert!((far.mean_excess - 6.0).abs() < 1e-8);
        assert!((far.var_excess - 1.0).abs() < 1e-7);
        let det = truncated_moments(2.0, 0.0, 1.5);
        assert_eq!(
            (
                det.mean_excess,
                det.var_excess,
                det.mean_capped,
                det.var_capped
            ),
            (0.5, 0.0, 1.5, 0.0)
        );
    }

    #[test]
    fn truncated_matches_quadrature() {
        for &(m, sd, a) in &[
            (0.0, 1.0, 0.5),
            (3.0, 2.0, -5.0),
            (10.0, 0.5, 13.9),
            (1.0, 3.0, 1.0),
        ] {
            let t = truncated_moments(m, sd * sd, a);
            let (e1, v1, c1, cv) = quad_moments(m, sd, a);
            let scale = sd * sd;
            assert!((t.mean_excess - e1).abs() < 1e-9 * sd);
            assert!((t.var_excess - v1).abs() < 1e-9 * scale);
            assert!((t.mean_capped - c1).abs() < 1e-9 * sd.max(m.abs()));
            assert!((t.var_capped - cv).abs() < 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn truncated_matches_monte_carlo() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 10_000_000usize;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let y: f64 = StandardNormal.sample(&mut rng);
            let e = (y - 0.5).max(0.0);
            s1 += e;
            s2 += e * e;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let t = truncated_moments(0.0, 1.0, 0.5);
        assert!((mean - t.mean_excess).abs() < 3.0 * (var / n as f64).sqrt());
    }

    proptest! {
        #[test]
        fn truncation_identities(m in -50.0f64..50.0, sd in 0.01f64..20.0, a in -50.0f64..50.0) {
            let t = truncated_moments(m, sd * sd, a);
            prop_assert!((t.mean_excess + t.mean_capped - m).abs() <= 1e-12 * (1.0 + m.abs()));
            prop_assert!(t.mean_excess >= 0.0);
            prop_assert!(t.mean_capped <= a + 1e-12 * (1.0 + a.abs()));
            prop_assert!(t.var_excess >= 0.0 && t.var_capped >= 0.0);
            prop_assert!(t.var_excess <= sd * sd * (1.0 + 1e-9));
        }

        #[test]
        fn excess_is_monotone_in_mean(m in -10.0f64..10.0, dm in 0.0f64..5.0, sd in 0.1f64..5.0, a in -10.0f64..10.0) {
            let lo = truncated_moments(m, sd * sd, a).mean_excess;
            let hi = truncated_moments(m + dm, sd * sd, a).mean_excess;
            prop_assert!(hi >= lo - 1e-12);
        }
    }

    #[test]
    fn report_on_benchmark() {
        let spec = ModelSpec::sinusoidal_h2(16.0);
        let fluid = solve_fluid(&spec, 1e-2).unwrap();
        let g = propagate(&spec, &fluid).unwrap();
        let one = report(&spec, 1.0, &fluid, &g);
        let (m, v) = gaussian_x(1.0, &fluid, &g, 300);
        assert_eq!((one.rows[300].mean_x, one.rows[300].var_x), (m, v));
        let r = report(&spec, 2000.0, &fluid, &g);
        for row in &r.rows {
            assert!((row.mean_q + row.mean_b - row.mean_x).abs() <= 1e-9 * row.mean_x.max(1.0));
            assert!(row.mean_q >= 0.0 && row.mean_b <= row.staffing + 1e-9);
            let gap = (row.staffing - row.mean_x) / row.var_x.sqrt();
            if gap > 8.0 {
                assert!(row.mean_q < 1e-6 && (row.mean_b - row.mean_x).abs() < 1e-6);
                assert_eq!(row.mean_w, 0.0);
            }
            if gap < -8.0 {
                assert!((row.mean_q - (row.mean_x - 2000.0)).abs() < 1e-6);
                assert_relative_eq!(row.var_q, row.var_x, max_relative = 1e-6);
            }
        }
        let text = r.table().to_csv_string();
        assert!(
            text.starts_with("t,mean_X,var_X,mean_Q,var_Q,mean_B,var_B,mean_W,var_W,mean_V,var_V")
        );
    }

    #[test]
    fn poisson_case_variance_equals_mean() {
        let mut spec = ModelSpec::sinusoidal_h2(16.0);
        spec.patience = PatienceDist::exponential(1.0);
        let fluid = solve_fluid(&spec, 1e-2).unwrap();
        let g = propagate(&spec, &fluid).unwrap();
        for k in (0..fluid.grid().len()).step_by(37) {
            let (m, v) = gaussian_x(500.0, &fluid, &g, k);
            assert!((m - v).abs() < 500.0 * 1e-4);
        }
        let _ = SmoothFn::constant(0.0);
    }
}
