//! Model primitives: arrival rate, staffing, service rate and patience law.
//!
//! Everything here is immutable once built. A [`ModelSpec`] is usually read
//! from a TOML file via [`ModelSpec::from_toml_str`]; see the README for the
//! schema.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numerics;

fn default_one() -> f64 {
    1.0
}

/// A real function of time with an analytic derivative.
///
/// Piecewise polynomials are written in the local variable `t - breaks[i]`;
/// the first piece also covers `t < breaks[0]` and the last piece extends
/// past the final break.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SmoothFn {
    Constant {
        value: f64,
    },
    Linear {
        intercept: f64,
        slope: f64,
    },
    /// `a + b·sin(c·t + d)`
    Sinusoid {
        a: f64,
        b: f64,
        #[serde(default = "default_one")]
        c: f64,
        #[serde(default)]
        d: f64,
    },
    Piecewise {
        breaks: Vec<f64>,
        coeffs: Vec<Vec<f64>>,
    },
}

impl SmoothFn {
    pub fn constant(value: f64) -> Self {
        SmoothFn::Constant { value }
    }

    pub fn sinusoid(a: f64, b: f64, c: f64, d: f64) -> Self {
        SmoothFn::Sinusoid { a, b, c, d }
    }

    fn piece(&self, t: f64) -> (&[f64], f64) {
        match self {
            SmoothFn::Piecewise { breaks, coeffs } => {
                let k = breaks.iter().rposition(|&b| b <= t).unwrap_or_default();
                (&coeffs[k], t - breaks[k])
            }
            _ => unreachable!(),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            SmoothFn::Constant { value } => *value,
            SmoothFn::Linear { intercept, slope } => intercept + slope * t,
            SmoothFn::Sinusoid { a, b, c, d } => a + b * (c * t + d).sin(),
            SmoothFn::Piecewise { .. } => {
                let (cs, x) = self.piece(t);
                cs.iter().rev().fold(0.0, |acc, c| acc * x + c)
            }
        }
    }

    pub fn deriv(&self, t: f64) -> f64 {
        match self {
            SmoothFn::Constant { .. } => 0.0,
            SmoothFn::Linear { slope, .. } => *slope,
            SmoothFn::Sinusoid { b, c, d, .. } => b * c * (c * t + d).cos(),
            SmoothFn::Piecewise { .. } => {
                let (cs, x) = self.piece(t);
                cs.iter()
                    .enumerate()
                    .skip(1)
                    .rev()
                    .fold(0.0, |acc, (k, c)| acc * x + k as f64 * c)
            }
        }
    }

    pub fn deriv2(&self, t: f64) -> f64 {
        match self {
            SmoothFn::Constant { .. } | SmoothFn::Linear { .. } => 0.0,
            SmoothFn::Sinusoid { b, c, d, .. } => -b * c * c * (c * t + d).sin(),
            SmoothFn::Piecewise { .. } => {
                let (cs, x) = self.piece(t);
                cs.iter()
                    .enumerate()
                    .skip(2)
                    .rev()
                    .fold(0.0, |acc, (k, c)| acc * x + (k * (k - 1)) as f64 * c)
            }
        }
    }

    /// An upper bound of the function on `[a, b]`.
    pub fn upper_bound(&self, a: f64, b: f64) -> f64 {
        match self {
            SmoothFn::Constant { value } => *value,
            SmoothFn::Linear { .. } => self.value(a).max(self.value(b)),
            SmoothFn::Sinusoid {
                a: base, b: amp, ..
            } => base + amp.abs(),
            SmoothFn::Piecewise { .. } => {
                // sampled maximum plus a first-order slack from the sampled slope
                let m = 256;
                let h = (b - a) / m as f64;
                let mut vmax = f64::NEG_INFINITY;
                let mut dmax: f64 = 0.0;
                for k in 0..=m {
                    let t = a + k as f64 * h;
                    vmax = vmax.max(self.value(t));
                    dmax = dmax.max(self.deriv(t).abs());
                }
                vmax + dmax * h + 1e-12
            }
        }
    }

    /// Breakpoints in `(a, b)` where the value or slope jumps by more than `tol`.
    pub fn rough_points(&self, a: f64, b: f64, tol: f64) -> Vec<f64> {
        match self {
            SmoothFn::Piecewise { breaks, coeffs } => breaks
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(_, &t)| t > a && t < b)
                .filter(|(k, &t)| {
                    let left = &coeffs[k - 1];
                    let x = t - breaks[k - 1];
                    let lv = left.iter().rev().fold(0.0, |acc, c| acc * x + c);
                    let ld = left
                        .iter()
                        .enumerate()
                        .skip(1)
                        .rev()
                        .fold(0.0, |acc, (j, c)| acc * x + j as f64 * c);
                    (lv - self.value(t)).abs() > tol || (ld - self.deriv(t)).abs() > tol
                })
                .map(|(_, &t)| t)
                .collect(),
            _ => Vec::new(),
        }
    }

    fn check_shape(&self, name: &str) -> Result<()> {
        if let SmoothFn::Piecewise { breaks, coeffs } = self {
            if breaks.is_empty() || breaks.len() != coeffs.len() {
                return Err(Error::Config(format!(
                    "{name}: piecewise needs one coefficient list per break"
                )));
            }
            if breaks.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(format!("{name}: breaks must increase")));
            }
            if coeffs.iter().any(|c| c.is_empty()) {
                return Err(Error::Config(format!("{name}: empty polynomial piece")));
            }
        }
        Ok(())
    }
}

/// Patience-time distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum PatienceDist {
    Exponential {
        rate: f64,
    },
    /// Two-phase hyperexponential `p·Exp(rate1) + (1-p)·Exp(rate2)`.
    H2 {
        p: f64,
        rate1: f64,
        rate2: f64,
    },
    /// Tabulated cdf, interpolated monotone-cubically; exponential tail past the table.
    Tabulated(TabulatedCdf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedCdf {
    x: Vec<f64>,
    cdf: Vec<f64>,
    slopes: Vec<f64>,
    tail_rate: f64,
}

impl TabulatedCdf {
    pub fn new(x: Vec<f64>, cdf: Vec<f64>) -> Result<Self> {
        if x.len() < 3 || x.len() != cdf.len() {
            return Err(Error::Config(
                "tabulated patience needs at least 3 matching (x, cdf) points".into(),
            ));
        }
        if x[0] != 0.0 || cdf[0] != 0.0 {
            return Err(Error::Config(
                "tabulated patience must start at F(0) = 0".into(),
            ));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) || cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "tabulated patience needs strictly increasing x and cdf".into(),
            ));
        }
        if *cdf.last().unwrap() >= 1.0 {
            return Err(Error::Config(
                "tabulated patience needs F < 1 on the table".into(),
            ));
        }
        let slopes = numerics::pchip_slopes(&x, &cdf);
        let n = x.len();
        let tail_rate = slopes[n - 1] / (1.0 - cdf[n - 1]);
        Ok(TabulatedCdf {
            x,
            cdf,
            slopes,
            tail_rate,
        })
    }

    fn last(&self) -> (f64, f64) {
        (*self.x.last().unwrap(), *self.cdf.last().unwrap())
    }

    fn cdf(&self, x: f64) -> f64 {
        let (xl, fl) = self.last();
        if x <= 0.0 {
            0.0
        } else if x <= xl {
            numerics::hermite(&self.x, &self.cdf, &self.slopes, x)
        } else {
            1.0 - (1.0 - fl) * (-self.tail_rate * (x - xl)).exp()
        }
    }

    fn pdf(&self, x: f64) -> f64 {
        let (xl, fl) = self.last();
        if x < 0.0 {
            0.0
        } else if x <= xl {
            let k = numerics::locate(&self.x, x);
            numerics::hermite_cell_slope(
                self.x[k],
                self.x[k + 1],
                self.cdf[k],
                self.cdf[k + 1],
                self.slopes[k],
                self.slopes[k + 1],
                x,
            )
        } else {
            self.tail_rate * (1.0 - fl) * (-self.tail_rate * (x - xl)).exp()
        }
    }
}

impl PatienceDist {
    pub fn exponential(rate: f64) -> Self {
        PatienceDist::Exponential { rate }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self {
            PatienceDist::Exponential { rate } => -(-rate * x).exp_m1(),
            PatienceDist::H2 { p, rate1, rate2 } => {
                -(p * (-rate1 * x).exp_m1() + (1.0 - p) * (-rate2 * x).exp_m1())
            }
            PatienceDist::Tabulated(t) => t.cdf(x),
        }
    }

    pub fn ccdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        match self {
            PatienceDist::Exponential { rate } => (-rate * x).exp(),
            PatienceDist::H2 { p, rate1, rate2 } => {
                p * (-rate1 * x).exp() + (1.0 - p) * (-rate2 * x).exp()
            }
            PatienceDist::Tabulated(t) => 1.0 - t.cdf(x),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match self {
            PatienceDist::Exponential { rate } => rate * (-rate * x).exp(),
            PatienceDist::H2 { p, rate1, rate2 } => {
                p * rate1 * (-rate1 * x).exp() + (1.0 - p) * rate2 * (-rate2 * x).exp()
            }
            PatienceDist::Tabulated(t) => t.pdf(x),
        }
    }

    /// Hazard rate `f(x)/F^c(x)`.
    pub fn hazard(&self, x: f64) -> Result<f64> {
        let sf = self.ccdf(x);
        if !(sf > 0.0) || !sf.is_finite() {
            return Err(Error::PatienceExhausted(x));
        }
        Ok(self.pdf(x) / sf)
    }

    pub fn mean(&self) -> f64 {
        match self {
            PatienceDist::Exponential { rate } => 1.0 / rate,
            PatienceDist::H2 { p, rate1, rate2 } => p / rate1 + (1.0 - p) / rate2,
            PatienceDist::Tabulated(t) => {
                let (xl, fl) = t.last();
                numerics::gauss_legendre(|x| 1.0 - t.cdf(x), 0.0, xl, 0.01)
                    + (1.0 - fl) / t.tail_rate
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            PatienceDist::Exponential { rate } => Exp::new(*rate).unwrap().sample(rng),
            PatienceDist::H2 { p, rate1, rate2 } => {
                let rate = if rng.gen::<f64>() < *p {
                    *rate1
                } else {
                    *rate2
                };
                Exp::new(rate).unwrap().sample(rng)
            }
            PatienceDist::Tabulated(t) => {
                let u: f64 = rng.gen();
                let (xl, fl) = t.last();
                if u >= fl {
                    // F^c(x) = (1-fl)·exp(-r(x-xl)) = 1-u
                    xl + ((1.0 - fl) / (1.0 - u)).ln() / t.tail_rate
                } else {
                    numerics::bisect(|x| t.cdf(x) - u, 0.0, xl, 1e-12)
                }
            }
        }
    }
}

/// Balanced-means H2 with the given mean and squared coefficient of variation.
pub fn h2_from_scv(mean: f64, scv: f64) -> Result<PatienceDist> {
    if !(scv >= 1.0) {
        return Err(Error::ScvBelowOne(scv));
    }
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "H2 mean must be positive (got {mean})"
        )));
    }
    let theta = 1.0 / mean;
    let p = 0.5 * (1.0 - ((scv - 1.0) / (scv + 1.0)).sqrt());
    Ok(PatienceDist::H2 {
        p,
        rate1: 2.0 * p * theta,
        rate2: 2.0 * (1.0 - p) * theta,
    })
}

/// Hazard of `dist` at `x ≥ 0`.
pub fn hazard(dist: &PatienceDist, x: f64) -> Result<f64> {
    if x < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "hazard needs x ≥ 0 (got {x})"
        )));
    }
    dist.hazard(x)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatienceConfig {
    Exponential {
        rate: Option<f64>,
        mean: Option<f64>,
    },
    H2 {
        p: f64,
        rate1: f64,
        rate2: f64,
    },
    H2Balanced {
        mean: f64,
        scv: f64,
    },
    Tabulated {
        x: Vec<f64>,
        cdf: Vec<f64>,
    },
}

impl PatienceConfig {
    pub fn build(&self) -> Result<PatienceDist> {
        match self {
            PatienceConfig::Exponential { rate, mean } => match (rate, mean) {
                (Some(r), None) => Ok(PatienceDist::Exponential { rate: *r }),
                (None, Some(m)) => Ok(PatienceDist::Exponential { rate: 1.0 / m }),
                _ => Err(Error::Config(
                    "exponential patience needs exactly one of rate, mean".into(),
                )),
            },
            PatienceConfig::H2 { p, rate1, rate2 } => {
                if !(0.0..=1.0).contains(p) || !(*rate1 > 0.0) || !(*rate2 > 0.0) {
                    return Err(Error::Config(
                        "h2 needs 0 ≤ p ≤ 1 and positive rates".into(),
                    ));
                }
                Ok(PatienceDist::H2 {
                    p: *p,
                    rate1: *rate1,
                    rate2: *rate2,
                })
            }
            PatienceConfig::H2Balanced { mean, scv } => h2_from_scv(*mean, *scv),
            PatienceConfig::Tabulated { x, cdf } => Ok(PatienceDist::Tabulated(TabulatedCdf::new(
                x.clone(),
                cdf.clone(),
            )?)),
        }
    }
}

/// On-disk model description.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: f64,
    pub mu: f64,
    #[serde(default = "default_one")]
    pub c_lambda: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub var_x0: f64,
    pub lambda: SmoothFn,
    pub staffing: SmoothFn,
    pub patience: PatienceConfig,
    pub lambda_g: Option<SmoothFn>,
    pub staffing_g: Option<SmoothFn>,
}

/// Full model data for the `G_t/M/s_t+GI` system.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub lambda: SmoothFn,
    pub lambda_g: Option<SmoothFn>,
    pub staffing: SmoothFn,
    pub staffing_g: Option<SmoothFn>,
    pub mu: f64,
    pub patience: PatienceDist,
    pub c_lambda: f64,
    pub horizon: f64,
    pub x0: f64,
    pub var_x0: f64,
}

impl ModelSpec {
    /// Model with Poisson arrivals, deterministic empty start and no refinement terms.
    pub fn new(
        lambda: SmoothFn,
        staffing: SmoothFn,
        mu: f64,
        patience: PatienceDist,
        horizon: f64,
    ) -> Self {
        ModelSpec {
            lambda,
            lambda_g: None,
            staffing,
            staffing_g: None,
            mu,
            patience,
            c_lambda: 1.0,
            horizon,
            x0: 0.0,
            var_x0: 0.0,
        }
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.lambda.check_shape("lambda")?;
        cfg.staffing.check_shape("staffing")?;
        if let Some(f) = &cfg.lambda_g {
            f.check_shape("lambda_g")?;
        }
        if let Some(f) = &cfg.staffing_g {
            f.check_shape("staffing_g")?;
        }
        Ok(ModelSpec {
            lambda: cfg.lambda.clone(),
            lambda_g: cfg.lambda_g.clone(),
            staffing: cfg.staffing.clone(),
            staffing_g: cfg.staffing_g.clone(),
            mu: cfg.mu,
            patience: cfg.patience.build()?,
            c_lambda: cfg.c_lambda,
            horizon: cfg.horizon,
            x0: cfg.x0,
            var_x0: cfg.var_x0,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_config(&cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Benchmark model: sinusoidal arrivals,
    /// one unit of staffing, unit service rate and H2 patience (mean 2, scv 4).
    pub fn sinusoidal_h2(horizon: f64) -> Self {
        ModelSpec::new(
            SmoothFn::sinusoid(1.0, 0.6, 1.0, 0.0),
            SmoothFn::constant(1.0),
            1.0,
            h2_from_scv(2.0, 4.0).expect("scv 4 is valid"),
            horizon,
        )
    }

    /// Rate into service when all servers are busy, `s(t)μ + ṡ(t)`.
    pub fn service_inflow(&self, t: f64) -> f64 {
        self.staffing.value(t) * self.mu + self.staffing.deriv(t)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate(self);
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidModel(report))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LambdaNotPositive { at: f64, value: f64 },
    StaffingNotPositive { at: f64, value: f64 },
    PatienceDensityNotPositive { at: f64 },
    PatienceSurvivalNotPositive { at: f64 },
    InitialAboveStaffing { x0: f64, s0: f64 },
    NegativeInitial,
    NegativeArrivalVariability(f64),
    NonPositiveServiceRate(f64),
    NonPositiveHorizon(f64),
    NegativeInitialVariance(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LambdaNotPositive { at, value } => {
                write!(f, "λ_inf > 0 fails (λ({at}) = {value})")
            }
            Violation::StaffingNotPositive { at, value } => {
                write!(f, "s_inf > 0 fails (s({at}) = {value})")
            }
            Violation::PatienceDensityNotPositive { at } => write!(f, "f(x) > 0 fails at x = {at}"),
            Violation::PatienceSurvivalNotPositive { at } => {
                write!(f, "F^c(x) > 0 fails at x = {at}")
            }
            Violation::InitialAboveStaffing { x0, s0 } => {
                write!(f, "X(0) ≤ s(0) fails ({x0} > {s0})")
            }
            Violation::NegativeInitial => write!(f, "X(0) ≥ 0 fails"),
            Violation::NegativeArrivalVariability(c) => write!(f, "c_λ ≥ 0 fails ({c})"),
            Violation::NonPositiveServiceRate(m) => write!(f, "μ > 0 fails ({m})"),
            Violation::NonPositiveHorizon(t) => write!(f, "T > 0 fails ({t})"),
            Violation::NegativeInitialVariance(v) => write!(f, "Var(X̂(0)) ≥ 0 fails ({v})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

/// Checks the standing assumptions on a grid of step `1e-3·T`.
pub fn validate(spec: &ModelSpec) -> ValidationReport {
    let mut v = Vec::new();
    let t_end = spec.horizon;
    if !(t_end > 0.0) {
        v.push(Violation::NonPositiveHorizon(t_end));
    }
    if !(spec.mu > 0.0) {
        v.push(Violation::NonPositiveServiceRate(spec.mu));
    }
    if !(spec.c_lambda >= 0.0) {
        v.push(Violation::NegativeArrivalVariability(spec.c_lambda));
    }
    if !(spec.var_x0 >= 0.0) {
        v.push(Violation::NegativeInitialVariance(spec.var_x0));
    }
    if !(spec.x0 >= 0.0) {
        v.push(Violation::NegativeInitial);
    }
    let s0 = spec.staffing.value(0.0);
    if spec.x0 > s0 {
        v.push(Violation::InitialAboveStaffing { x0: spec.x0, s0 });
    }
    if t_end > 0.0 {
        let steps = 1000;
        let dt = t_end / steps as f64;
        let mut lam_bad = None;
        let mut s_bad = None;
        let mut f_bad = None;
        let mut sf_bad = None;
        for k in 0..=steps {
            let t = k as f64 * dt;
            let lam = spec.lambda.value(t);
            if lam_bad.is_none() && !(lam > 0.0) {
                lam_bad = Some(Violation::LambdaNotPositive { at: t, value: lam });
            }
            let s = spec.staffing.value(t);
            if s_bad.is_none() && !(s > 0.0) {
                s_bad = Some(Violation::StaffingNotPositive { at: t, value: s });
            }
            if f_bad.is_none() && !(spec.patience.pdf(t) > 0.0) {
                f_bad = Some(Violation::PatienceDensityNotPositive { at: t });
            }
            if sf_bad.is_none() && !(spec.patience.ccdf(t) > 0.0) {
                sf_bad = Some(Violation::PatienceSurvivalNotPositive { at: t });
            }
        }
        v.extend([lam_bad, s_bad, f_bad, sf_bad].into_iter().flatten());
    }
    ValidationReport { violations: v }
}
