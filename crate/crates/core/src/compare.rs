//! Error metrics between the approximation and simulation estimates.

use crate::approx::PerformanceReport;
use crate::error::{Error, Result};
use crate::fluid::{FluidSolution, Regime};
use crate::sim::SimEstimate;
use crate::table::{Cell, Table};

/// Tolerances and the exclusion radius around switching points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub window: f64,
    /// Sup relative error allowed for the mean of `X_n`.
    pub mean: f64,
    /// Variance ratios must lie in `[1/(1+var), 1+var]`.
    pub var: f64,
    /// Sup relative error allowed for the means of `W_n` and `V_n`.
    pub wait: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            window: 0.3,
            mean: 0.05,
            var: 0.25,
            wait: 0.07,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareRow {
    pub t: f64,
    pub regime: Regime,
    /// Inside a switch window; ignored by the metrics.
    pub excluded: bool,
    pub pred_mean_x: f64,
    pub sim_mean_x: f64,
    pub pred_var_x: f64,
    pub sim_var_x: f64,
    pub pred_mean_w: f64,
    pub sim_mean_w: f64,
    pub pred_mean_v: f64,
    pub sim_mean_v: f64,
}

impl CompareRow {
    pub fn rel_err_x(&self) -> f64 {
        rel_err(self.sim_mean_x, self.pred_mean_x)
    }

    /// `NaN` where the prediction is degenerate or the estimate is missing.
    pub fn var_ratio_x(&self) -> f64 {
        if self.pred_var_x > 1e-12 && self.sim_var_x.is_finite() {
            self.sim_var_x / self.pred_var_x
        } else {
            f64::NAN
        }
    }

    pub fn rel_err_w(&self) -> f64 {
        if self.regime == Regime::Overloaded {
            rel_err(self.sim_mean_w, self.pred_mean_w)
        } else {
            f64::NAN
        }
    }

    pub fn rel_err_v(&self) -> f64 {
        if self.regime == Regime::Overloaded && self.sim_mean_v.is_finite() {
            rel_err(self.sim_mean_v, self.pred_mean_v)
        } else {
            f64::NAN
        }
    }
}

/// `|a − b| / |b|`, with `0/0 = 0`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / b.abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub name: &'static str,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// Points that entered the metric.
    pub points: usize,
}

impl Metric {
    /// A metric with no eligible points fails.
    pub fn pass(&self) -> bool {
        self.points > 0 && self.value >= self.lower && self.value <= self.upper
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} value={} bounds=[{}, {}] points={}",
            if self.pass() { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.lower,
            self.upper,
            self.points
        )
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub tolerances: Tolerances,
    pub rows: Vec<CompareRow>,
    pub metrics: Vec<Metric>,
}

impl Comparison {
    pub fn pass(&self) -> bool {
        self.metrics.iter().all(Metric::pass)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for m in &self.metrics {
            s.push_str(&m.line());
            s.push('\n');
        }
        s.push_str(if self.pass() {
            "overall PASS\n"
        } else {
            "overall FAIL\n"
        });
        s
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
            "t",
            "regime",
            "excluded",
            "pred_mean_X",
            "sim_mean_X",
            "rel_err_X",
            "pred_var_X",
            "sim_var_X",
            "var_ratio_X",
            "pred_mean_W",
            "sim_mean_W",
            "rel_err_W",
            "pred_mean_V",
            "sim_mean_V",
            "rel_err_V",
        ]);
        for r in &self.rows {
            t.push(vec![
                r.t.into(),
                Cell::from(r.regime.label()),
                Cell::Int(r.excluded as i64),
                r.pred_mean_x.into(),
                r.sim_mean_x.into(),
                r.rel_err_x().into(),
                r.pred_var_x.into(),
                r.sim_var_x.into(),
                r.var_ratio_x().into(),
                r.pred_mean_w.into(),
                r.sim_mean_w.into(),
                r.rel_err_w().into(),
                r.pred_mean_v.into(),
                r.sim_mean_v.into(),
                r.rel_err_v().into(),
            ]);
        }
        t
    }
}

fn sup(it: impl Iterator<Item = f64>) -> (f64, usize) {
    it.filter(|v| !v.is_nan())
        .fold((0.0, 0), |(m, c), v| (if v > m { v } else { m }, c + 1))
}

/// Matches every simulation time to a prediction grid node and evaluates the metrics.
pub fn compare(
    fluid: &FluidSolution,
    report: &PerformanceReport,
    sim: &SimEstimate,
    tol: Tolerances,
) -> Result<Comparison> {
    let grid = fluid.grid();
    let step = fluid.step;
    let mut rows = Vec::with_capacity(sim.t.len());
    for (j, &t) in sim.t.iter().enumerate() {
        let k = grid
            .partition_point(|&g| g < t - 0.5 * step)
            .min(grid.len() - 1);
        if (grid[k] - t).abs() > 1e-6 * step {
            return Err(Error::InvalidArgument(format!(
                "observation time {t} is not on the prediction grid (step {step})"
            )));
        }
        let p = &report.rows[k];
        rows.push(CompareRow {
            t,
            regime: p.regime,
            excluded: fluid.distance_to_switch(t) <= tol.window,
            pred_mean_x: p.mean_x,
            sim_mean_x: sim.x[j].mean(),
            pred_var_x: p.var_x,
            sim_var_x: sim.x[j].variance(),
            pred_mean_w: p.mean_w,
            sim_mean_w: sim.w[j].mean(),
            pred_mean_v: p.mean_v,
            sim_mean_v: sim.v[j].mean(),
        });
    }
    let kept = || rows.iter().filter(|r| !r.excluded);
    let (ex, nx) = sup(kept().map(CompareRow::rel_err_x));
    let ratios: Vec<f64> = kept()
        .map(CompareRow::var_ratio_x)
        .filter(|v| !v.is_nan())
        .collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (ew, nw) = sup(kept().map(CompareRow::rel_err_w));
    let (ev, nv) = sup(kept().map(CompareRow::rel_err_v));
    let metrics = vec![
        Metric {
            name: "mean_X_sup_rel_err",
            value: ex,
            lower: 0.0,
            upper: tol.mean,
            points: nx,
        },
        Metric {
            name: "var_X_ratio_min",
            value: lo,
            lower: 1.0 / (1.0 + tol.var),
            upper: f64::INFINITY,
            points: ratios.len(),
        },
        Metric {
            name: "var_X_ratio_max",
            value: hi,
            lower: 0.0,
            upper: 1.0 + tol.var,
            points: ratios.len(),
        },
        Metric {
            name: "mean_W_sup_rel_err",
            value: ew,
            lower: 0.0,
            upper: tol.wait,
            points: nw,
        },
        Metric {
            name: "mean_V_sup_rel_err",
            value: ev,
            lower: 0.0,
            upper: tol.wait,
            points: nv,
        },
    ];
    Ok(Comparison {
        tolerances: tol,
        rows,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(regime: Regime, px: f64, sx: f64, pv: f64, sv: f64) -> CompareRow {
        CompareRow {
            t: 0.0,
            regime,
            excluded: false,
            pred_mean_x: px,
            sim_mean_x: sx,
            pred_var_x: pv,
            sim_var_x: sv,
            pred_mean_w: 0.0,
            sim_mean_w: 0.0,
            pred_mean_v: 0.0,
            sim_mean_v: f64::NAN,
        }
    }

    #[test]
    fn relative_error_conventions() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(1.1, 1.0), 0.10000000000000009);
        assert!(rel_err(1.0, 0.0).is_infinite());
    }

    #[test]
    fn row_metrics() {
        let r = row(Regime::Underloaded, 100.0, 104.0, 50.0, 60.0);
        assert!((r.rel_err_x() - 0.04).abs() < 1e-15);
        assert!((r.var_ratio_x() - 1.2).abs() < 1e-15);
        assert!(r.rel_err_w().is_nan());
        assert!(row(Regime::Overloaded, 1.0, 1.0, 0.0, 1.0)
            .var_ratio_x()
            .is_nan());
        let ol = row(Regime::Overloaded, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(ol.rel_err_w(), 0.0);
        assert!(ol.rel_err_v().is_nan());
    }

    #[test]
    fn metric_bounds() {
        let m = Metric {
            name: "x",
            value: 0.8,
            lower: 1.0 / 1.25,
            upper: 1.25,
            points: 3,
        };
        assert!(m.pass());
        assert!(!Metric {
            points: 0,
            ..m.clone()
        }
        .pass());
        assert!(!Metric {
            value: f64::NAN,
            ..m.clone()
        }
        .pass());
        assert!(m.line().starts_with("PASS x "));
    }
}
