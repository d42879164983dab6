//! Deterministic fluid model over `[0, T]`.
//!
//! The horizon is split into alternating underloaded (UL) and overloaded
//! (OL) intervals. In UL intervals the content follows `Ẋ = λ − μX`,
//! integrated exactly in `μ` with Gauss–Legendre for the arrival term. In OL
//! intervals the head-of-line wait `w` solves
//! `ẇ = 1 − (s μ + ṡ) / (λ(t − w) F^c(w))` by classical RK4. Switching
//! times are refined by bisection on the step length.
//!
//! Each interval carries its own node list: the switching points at both
//! ends plus every global grid point `kΔ` strictly inside. Global grid
//! values are therefore stored, not interpolated.

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::numerics;
use crate::table::{Cell, Table};

/// Tolerance used to locate switching times (on the step length).
pub const SWITCH_TOL: f64 = 1e-12;
/// Smallest `|λ − (sμ + ṡ)|` accepted at a switching point.
pub const CRITICAL_TOL: f64 = 1e-9;
/// Smallest admissible `q̃(t, w(t))`.
pub const MIN_BOUNDARY_DENSITY: f64 = 1e-12;
/// Grid points closer than this to a switching point are merged into it.
const NODE_GAP: f64 = 1e-9;
/// Widest Gauss–Legendre panel used for queue integrals.
const QUAD_PANEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Underloaded,
    Overloaded,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Underloaded => "UL",
            Regime::Overloaded => "OL",
        }
    }
}

/// One UL or OL interval with its node values.
#[derive(Debug, Clone)]
pub struct Segment {
    pub regime: Regime,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub b: Vec<f64>,
    pub q: Vec<f64>,
    pub w: Vec<f64>,
    pub wdot: Vec<f64>,
    pub v: Vec<f64>,
    /// Rate into service `b(t,0)`; equals `λ(t)` in UL intervals.
    pub inflow: Vec<f64>,
    /// `q̃(t, w(t)) = λ(t − w) F^c(w)`.
    pub qtilde: Vec<f64>,
    /// `∂q̃/∂x` at `(t, w(t))`.
    pub qtilde_x: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Cumulative arrivals Λ, departures D, abandonment A (global time origin).
    pub arrivals: Vec<f64>,
    pub departures: Vec<f64>,
    pub abandoned: Vec<f64>,
}

impl Segment {
    fn new(regime: Regime) -> Self {
        Segment {
            regime,
            t: Vec::new(),
            x: Vec::new(),
            b: Vec::new(),
            q: Vec::new(),
            w: Vec::new(),
            wdot: Vec::new(),
            v: Vec::new(),
            inflow: Vec::new(),
            qtilde: Vec::new(),
            qtilde_x: Vec::new(),
            alpha: Vec::new(),
            arrivals: Vec::new(),
            departures: Vec::new(),
            abandoned: Vec::new(),
        }
    }

    pub fn start(&self) -> f64 {
        self.t[0]
    }

    pub fn end(&self) -> f64 {
        *self.t.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Local times `t − start`.
    pub fn local_times(&self) -> Vec<f64> {
        let t0 = self.start();
        self.t.iter().map(|t| t - t0).collect()
    }

    /// `L(t) = t − w(t)` at the nodes.
    pub fn entry_clock(&self) -> Vec<f64> {
        self.t.iter().zip(&self.w).map(|(t, w)| t - w).collect()
    }

    /// `w` at an arbitrary time inside the segment (cubic Hermite with `ẇ`).
    pub fn w_at(&self, t: f64) -> f64 {
        numerics::hermite(&self.t, &self.w, &self.wdot, t)
    }

    /// Solves `L(u) = t` for `u`; `None` past the last computed node.
    pub fn entry_inverse(&self, t: f64) -> Option<f64> {
        let ell = self.entry_clock();
        let last = *ell.last().unwrap();
        if t > last + 1e-13 || t < ell[0] - 1e-13 {
            return None;
        }
        if self.len() == 1 {
            return Some(self.t[0]);
        }
        let k = numerics::locate(&ell, t);
        let inv0 = 1.0 / (1.0 - self.wdot[k]);
        let inv1 = 1.0 / (1.0 - self.wdot[k + 1]);
        Some(numerics::hermite_cell(
            ell[k],
            ell[k + 1],
            self.t[k],
            self.t[k + 1],
            inv0,
            inv1,
            t,
        ))
    }
}

/// Values of every fluid function at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidPoint {
    pub t: f64,
    pub regime: Regime,
    pub x: f64,
    pub b: f64,
    pub q: f64,
    pub w: f64,
    pub wdot: f64,
    pub v: f64,
    pub inflow: f64,
    pub qtilde: f64,
    pub alpha: f64,
    pub arrivals: f64,
    pub departures: f64,
    pub abandoned: f64,
}

/// Position of a grid point inside the segment list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub segment: usize,
    pub node: usize,
}

#[derive(Debug, Clone)]
pub struct FluidSolution {
    pub step: f64,
    pub horizon: f64,
    pub segments: Vec<Segment>,
    /// Switching times in `(0, end]`, in order.
    pub switches: Vec<f64>,
    grid: Vec<f64>,
    grid_nodes: Vec<NodeRef>,
}

impl FluidSolution {
    /// Global grid `kΔ` on `[0, T]`.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn node(&self, k: usize) -> NodeRef {
        self.grid_nodes[k]
    }

    /// End of the computed range (past `T` when an OL interval needed lookahead for `v`).
    pub fn end(&self) -> f64 {
        self.segments.last().unwrap().end()
    }

    pub fn point(&self, k: usize) -> FluidPoint {
        let NodeRef { segment, node } = self.grid_nodes[k];
        let s = &self.segments[segment];
        FluidPoint {
            t: self.grid[k],
            regime: s.regime,
            x: s.x[node],
            b: s.b[node],
            q: s.q[node],
            w: s.w[node],
            wdot: s.wdot[node],
            v: s.v[node],
            inflow: s.inflow[node],
            qtilde: s.qtilde[node],
            alpha: s.alpha[node],
            arrivals: s.arrivals[node],
            departures: s.departures[node],
            abandoned: s.abandoned[node],
        }
    }

    pub fn points(&self) -> Vec<FluidPoint> {
        (0..self.grid.len()).map(|k| self.point(k)).collect()
    }

    /// Index of the segment containing `t` (the later one at a switching point).
    pub fn segment_at(&self, t: f64) -> Option<usize> {
        self.segments
            .iter()
            .rposition(|s| s.start() <= t + 1e-13)
            .filter(|&i| t <= self.segments[i].end() + 1e-13)
    }

    pub fn regime_at(&self, t: f64) -> Option<Regime> {
        self.segment_at(t).map(|i| self.segments[i].regime)
    }

    /// `w(t)` by Hermite interpolation; 0 in UL intervals.
    pub fn w_at(&self, t: f64) -> Option<f64> {
        let i = self.segment_at(t)?;
        Some(self.segments[i].w_at(t))
    }

    /// Distance from `t` to the nearest switching point.
    pub fn distance_to_switch(&self, t: f64) -> f64 {
        self.switches
            .iter()
            .map(|s| (s - t).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Grid export; `v` is empty where `t + v(t)` falls beyond the computed range.
    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
            "t", "regime", "X", "B", "Q", "w", "wdot", "v", "b0", "qtilde_w", "alpha", "A", "D",
        ]);
        for p in self.points() {
            t.push(vec![
                p.t.into(),
                Cell::from(p.regime.label()),
                p.x.into(),
                p.b.into(),
                p.q.into(),
                p.w.into(),
                p.wdot.into(),
                p.v.into(),
                p.inflow.into(),
                p.qtilde.into(),
                p.alpha.into(),
                p.abandoned.into(),
                p.departures.into(),
            ]);
        }
        t
    }
}

/// Content at local time `t` of a UL interval that started with content `x0`
/// at absolute time `start`: `X0 e^{−μt} + ∫_0^t e^{−μ(t−u)} λ(start+u) du`.
pub fn ul_content(spec: &ModelSpec, t: f64, x0: f64, start: f64) -> f64 {
    let mu = spec.mu;
    x0 * (-mu * t).exp()
        + numerics::gauss_legendre(
            |u| (-mu * (t - u)).exp() * spec.lambda.value(start + u),
            0.0,
            t,
            QUAD_PANEL,
        )
}

fn ul_advance(spec: &ModelSpec, t: f64, x: f64, h: f64) -> f64 {
    let mu = spec.mu;
    x * (-mu * h).exp()
        + numerics::gauss_legendre(
            |u| (-mu * (t + h - u)).exp() * spec.lambda.value(u),
            t,
            t + h,
            QUAD_PANEL,
        )
}

fn boundary_density(spec: &ModelSpec, t: f64, w: f64) -> f64 {
    spec.lambda.value(t - w) * spec.patience.ccdf(w)
}

/// Right-hand side of the head-of-line wait ODE.
pub fn w_rate(spec: &ModelSpec, t: f64, w: f64) -> Result<f64> {
    let qt = boundary_density(spec, t, w);
    if !(qt >= MIN_BOUNDARY_DENSITY) {
        return Err(Error::BoundaryDensityVanished(t));
    }
    Ok(1.0 - spec.service_inflow(t) / qt)
}

/// One RK4 step of the head-of-line wait ODE from `(t, w)` over `dt`.
pub fn step_w(spec: &ModelSpec, t: f64, w: f64, dt: f64) -> Result<f64> {
    let k1 = w_rate(spec, t, w)?;
    let k2 = w_rate(spec, t + 0.5 * dt, w + 0.5 * dt * k1)?;
    let k3 = w_rate(spec, t + 0.5 * dt, w + 0.5 * dt * k2)?;
    let k4 = w_rate(spec, t + dt, w + dt * k3)?;
    Ok(w + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Queue content density `q(t, x)` of an OL time `t` given `w(t)`.
pub fn queue_density_with(spec: &ModelSpec, t: f64, w: f64, x: f64) -> f64 {
    if x < 0.0 || x > w {
        0.0
    } else {
        spec.lambda.value(t - x) * spec.patience.ccdf(x)
    }
}

/// `q(t, x)` from a solved fluid model; zero outside OL intervals.
pub fn queue_density(sol: &FluidSolution, spec: &ModelSpec, t: f64, x: f64) -> f64 {
    match sol.segment_at(t) {
        Some(i) if sol.segments[i].regime == Regime::Overloaded => {
            let w = sol.segments[i].w_at(t);
            queue_density_with(spec, t, w, x)
        }
        _ => 0.0,
    }
}

/// Service content density `b(t, x)` during an OL interval.
///
/// `initial` is the density at the interval start; `None` means the
/// exponential age profile `s(τ) μ e^{−μx}`.
pub fn service_density(
    sol: &FluidSolution,
    spec: &ModelSpec,
    t: f64,
    x: f64,
    initial: Option<&dyn Fn(f64) -> f64>,
) -> Result<f64> {
    let i = sol
        .segment_at(t)
        .filter(|&i| sol.segments[i].regime == Regime::Overloaded)
        .ok_or_else(|| Error::InvalidArgument(format!("t = {t} is not in an OL interval")))?;
    let start = sol.segments[i].start();
    let elapsed = t - start;
    let mu = spec.mu;
    if x <= elapsed {
        Ok(spec.service_inflow(t - x) * (-mu * x).exp())
    } else {
        let y = x - elapsed;
        let b0 = match initial {
            Some(f) => f(y),
            None => spec.staffing.value(start) * mu * (-mu * y).exp(),
        };
        Ok(b0 * (-mu * elapsed).exp())
    }
}

/// Fluid abandonment rate and cumulative abandonment on the global grid.
pub fn abandonment(sol: &FluidSolution) -> (Vec<f64>, Vec<f64>) {
    sol.points().iter().map(|p| (p.alpha, p.abandoned)).unzip()
}

/// `v` on the global grid (`None` where the lookahead ran out).
pub fn solve_v(sol: &FluidSolution) -> Vec<Option<f64>> {
    sol.points()
        .iter()
        .map(|p| if p.v.is_nan() { None } else { Some(p.v) })
        .collect()
}

struct Builder<'a> {
    spec: &'a ModelSpec,
    step: f64,
    segments: Vec<Segment>,
    switches: Vec<f64>,
    current: Segment,
}

impl<'a> Builder<'a> {
    fn next_grid_after(&self, t: f64) -> f64 {
        let mut k = (t / self.step).floor() as i64 + 1;
        while (k as f64) * self.step <= t + NODE_GAP {
            k += 1;
        }
        k as f64 * self.step
    }

    fn push(&mut self, t: f64, state: f64) {
        self.current.t.push(t);
        match self.current.regime {
            Regime::Underloaded => {
                self.current.x.push(state);
                self.current.w.push(0.0);
            }
            Regime::Overloaded => {
                self.current.w.push(state);
                self.current.x.push(f64::NAN);
            }
        }
    }

    fn switch_to(&mut self, regime: Regime, t: f64, state: f64) {
        let done = std::mem::replace(&mut self.current, Segment::new(regime));
        self.segments.push(done);
        self.switches.push(t);
        self.push(t, state);
    }

    fn finish(mut self) -> (Vec<Segment>, Vec<f64>) {
        let done = std::mem::replace(&mut self.current, Segment::new(Regime::Underloaded));
        self.segments.push(done);
        (self.segments, self.switches)
    }
}

enum Stop {
    Horizon,
    /// Continue the final OL interval until `t − w(t) ≥ T`, at most to `cap`.
    Lookahead {
        cap: f64,
    },
}

/// Solves the fluid model on `[0, T]` with grid step `step`.
pub fn solve_fluid(spec: &ModelSpec, step: f64) -> Result<FluidSolution> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "grid step must be positive (got {step})"
        )));
    }
    spec.ensure_valid()?;
    let horizon = spec.horizon;
    let lam0 = spec.lambda.value(0.0);
    let s0 = spec.staffing.value(0.0);
    let start_ol = if spec.x0 >= s0 - 1e-12 {
        let excess = lam0 - spec.service_inflow(0.0);
        if excess.abs() < CRITICAL_TOL {
            return Err(Error::CriticalLoading(0.0));
        }
        excess > 0.0
    } else {
        false
    };
    let regime = if start_ol {
        Regime::Overloaded
    } else {
        Regime::Underloaded
    };
    let mut b = Builder {
        spec,
        step,
        segments: Vec::new(),
        switches: Vec::new(),
        current: Segment::new(regime),
    };
    b.push(0.0, if start_ol { 0.0 } else { spec.x0 });

    let t = advance(&mut b, 0.0, Stop::Horizon)?;
    if b.current.regime == Regime::Overloaded {
        let w_end = *b.current.w.last().unwrap();
        if t - w_end < horizon {
            advance(
                &mut b,
                t,
                Stop::Lookahead {
                    cap: horizon + horizon.max(1.0),
                },
            )?;
        }
    }
    let (mut segments, switches) = b.finish();
    for seg in &mut segments {
        fill_segment(spec, seg)?;
    }
    accumulate(spec, &mut segments);
    for seg in &mut segments {
        fill_v(seg);
    }

    let n_grid = (horizon / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n_grid).map(|k| k as f64 * step).collect();
    if *grid.last().unwrap() < horizon - 1e-9 * step {
        grid.push(horizon);
    }
    let grid_nodes = map_grid(&segments, &grid);
    Ok(FluidSolution {
        step,
        horizon,
        segments,
        switches,
        grid,
        grid_nodes,
    })
}

/// Integrates from `t` until the stop condition, opening new segments at switches.
fn advance(b: &mut Builder<'_>, mut t: f64, stop: Stop) -> Result<f64> {
    let spec = b.spec;
    let horizon = spec.horizon;
    loop {
        let limit = match stop {
            Stop::Horizon => horizon,
            Stop::Lookahead { cap } => cap,
        };
        if t >= limit - NODE_GAP {
            return Ok(t);
        }
        if let Stop::Lookahead { .. } = stop {
            let w = *b.current.w.last().unwrap();
            if b.current.regime == Regime::Underloaded || t - w >= horizon {
                return Ok(t);
            }
        }
        let target = b.next_grid_after(t).min(limit);
        let h = target - t;
        match b.current.regime {
            Regime::Underloaded => {
                let x = *b.current.x.last().unwrap();
                let x_new = ul_advance(spec, t, x, h);
                if x_new - spec.staffing.value(target) > 0.0 {
                    let hs = numerics::bisect(
                        |hh| ul_advance(spec, t, x, hh) - spec.staffing.value(t + hh),
                        0.0,
                        h,
                        SWITCH_TOL,
                    );
                    let tau = t + hs;
                    let excess = spec.lambda.value(tau) - spec.service_inflow(tau);
                    if excess < CRITICAL_TOL {
                        return Err(Error::CriticalLoading(tau));
                    }
                    let s_tau = spec.staffing.value(tau);
                    b.push(tau, s_tau);
                    b.switch_to(Regime::Overloaded, tau, 0.0);
                    t = tau;
                } else {
                    b.push(target, x_new);
                    t = target;
                }
            }
            Regime::Overloaded => {
                let w = *b.current.w.last().unwrap();
                let w_new = step_w(spec, t, w, h)?;
                if w_new < 0.0 {
                    let hs = numerics::bisect(
                        |hh| step_w(spec, t, w, hh).unwrap_or(f64::NAN),
                        0.0,
                        h,
                        SWITCH_TOL,
                    );
                    let tau = t + hs;
                    let excess = spec.lambda.value(tau) - spec.service_inflow(tau);
                    if excess > -CRITICAL_TOL {
                        return Err(Error::CriticalLoading(tau));
                    }
                    b.push(tau, 0.0);
                    if let Stop::Lookahead { .. } = stop {
                        return Ok(tau);
                    }
                    b.switch_to(Regime::Underloaded, tau, spec.staffing.value(tau));
                    t = tau;
                } else {
                    b.push(target, w_new);
                    t = target;
                }
            }
        }
    }
}

fn fill_segment(spec: &ModelSpec, seg: &mut Segment) -> Result<()> {
    let n = seg.len();
    let lam = &spec.lambda;
    let pat = &spec.patience;
    for k in 0..n {
        let t = seg.t[k];
        match seg.regime {
            Regime::Underloaded => {
                let x = seg.x[k];
                seg.b.push(x);
                seg.q.push(0.0);
                seg.wdot.push(0.0);
                seg.inflow.push(lam.value(t));
                seg.qtilde.push(lam.value(t));
                seg.qtilde_x
                    .push(-lam.deriv(t) - lam.value(t) * pat.pdf(0.0));
                seg.alpha.push(0.0);
            }
            Regime::Overloaded => {
                let w = seg.w[k];
                let s = spec.staffing.value(t);
                let inflow = spec.service_inflow(t);
                if !(inflow > 0.0) {
                    return Err(Error::InfeasibleStaffing {
                        start: seg.start(),
                        end: seg.end(),
                        at: t,
                        rate: inflow,
                    });
                }
                let q = numerics::gauss_legendre(
                    |x| lam.value(t - x) * pat.ccdf(x),
                    0.0,
                    w,
                    QUAD_PANEL,
                );
                let alpha =
                    numerics::gauss_legendre(|x| lam.value(t - x) * pat.pdf(x), 0.0, w, QUAD_PANEL);
                let qt = boundary_density(spec, t, w);
                if !(qt >= MIN_BOUNDARY_DENSITY) {
                    return Err(Error::BoundaryDensityVanished(t));
                }
                seg.x[k] = s + q;
                seg.b.push(s);
                seg.q.push(q);
                seg.wdot.push(1.0 - inflow / qt);
                seg.inflow.push(inflow);
                seg.qtilde.push(qt);
                seg.qtilde_x
                    .push(-lam.deriv(t - w) * pat.ccdf(w) - lam.value(t - w) * pat.pdf(w));
                seg.alpha.push(alpha);
            }
        }
    }
    Ok(())
}

fn accumulate(spec: &ModelSpec, segments: &mut [Segment]) {
    let (mut lam_acc, mut dep_acc, mut ab_acc) = (0.0, 0.0, 0.0);
    for seg in segments.iter_mut() {
        let n = seg.len();
        let dep_rate: Vec<f64> = match seg.regime {
            Regime::Underloaded => seg.x.iter().map(|x| spec.mu * x).collect(),
            Regime::Overloaded => seg.b.iter().map(|s| spec.mu * s).collect(),
        };
        for k in 0..n {
            if k > 0 {
                let (t0, t1) = (seg.t[k - 1], seg.t[k]);
                lam_acc += numerics::gauss_legendre(|u| spec.lambda.value(u), t0, t1, QUAD_PANEL);
                dep_acc += 0.5 * (t1 - t0) * (dep_rate[k - 1] + dep_rate[k]);
                ab_acc += 0.5 * (t1 - t0) * (seg.alpha[k - 1] + seg.alpha[k]);
            }
            seg.arrivals.push(lam_acc);
            seg.departures.push(dep_acc);
            seg.abandoned.push(ab_acc);
        }
    }
}

fn fill_v(seg: &mut Segment) {
    let n = seg.len();
    seg.v = match seg.regime {
        Regime::Underloaded => vec![0.0; n],
        Regime::Overloaded => (0..n)
            .map(|k| {
                let t = seg.t[k];
                match seg.entry_inverse(t) {
                    Some(u) => (u - t).max(0.0),
                    None => f64::NAN,
                }
            })
            .collect(),
    };
}

fn map_grid(segments: &[Segment], grid: &[f64]) -> Vec<NodeRef> {
    let mut out = Vec::with_capacity(grid.len());
    let mut si = 0;
    for &t in grid {
        while si + 1 < segments.len() && segments[si + 1].start() <= t + NODE_GAP {
            si += 1;
        }
        let seg = &segments[si];
        let k = match seg.t.binary_search_by(|p| p.total_cmp(&t)) {
            Ok(k) => k,
            Err(k) => {
                let lo = k.saturating_sub(1);
                let hi = k.min(seg.len() - 1);
                if (seg.t[lo] - t).abs() <= (seg.t[hi] - t).abs() {
                    lo
                } else {
                    hi
                }
            }
        };
        debug_assert!(
            (seg.t[k] - t).abs() <= 2.0 * NODE_GAP,
            "grid point {t} has no node"
        );
        out.push(NodeRef {
            segment: si,
            node: k,
        });
    }
    out
}
