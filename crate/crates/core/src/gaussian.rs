//! Variances of the Gaussian refinement, interval by interval.
//!
//! OL intervals use the kernel representation: `h`, `Hc = exp(∫h)`, the
//! three noise intensities `I_λ, I_s, I_a` and the abandonment survival
//! factor `F_w^c`. Every cumulative integral is taken cell by cell with
//! five-point Gauss–Legendre, using the cubic Hermite interpolant of `w`
//! inside the cell, so the only discretisation error comes from `w` itself.
//!
//! UL intervals use the closed forms for the infinite-server content.
//! `Var X̂` at the end of one interval seeds the next.

use crate::approx::truncated_moments;
use crate::error::{Error, Result};
use crate::fluid::{FluidSolution, NodeRef, Regime, Segment, MIN_BOUNDARY_DENSITY};
use crate::model::{ModelSpec, SmoothFn};
use crate::numerics;
use crate::table::Table;

const QUAD_PANEL: f64 = 0.05;
const KINK_TOL: f64 = 1e-9;

/// Kernel quantities at one `(t, w(t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalKernel {
    pub t: f64,
    pub w: f64,
    pub wdot: f64,
    pub qtilde: f64,
    pub inflow: f64,
    pub h: f64,
    /// Patience hazard at `w`.
    pub hazard: f64,
    /// `I_λ², I_s², I_a²`.
    pub i_sq: [f64; 3],
    /// `Ī_1², Ī_3²`, the arrival-clock intensities.
    pub bar_sq: [f64; 2],
}

impl LocalKernel {
    pub fn i_sq_total(&self) -> f64 {
        self.i_sq.iter().sum()
    }
}

pub fn local_kernel(spec: &ModelSpec, t: f64, w: f64) -> Result<LocalKernel> {
    let ell = t - w;
    let lam = spec.lambda.value(ell);
    let fc = spec.patience.ccdf(w);
    let qt = lam * fc;
    if !(qt >= MIN_BOUNDARY_DENSITY) {
        return Err(Error::BoundaryDensityVanished(t));
    }
    let hazard = spec.patience.hazard(w)?;
    let inflow = spec.service_inflow(t);
    let wdot = 1.0 - inflow / qt;
    let h = (1.0 - wdot) * (-spec.lambda.deriv(ell) / lam - hazard);
    let c2 = spec.c_lambda * spec.c_lambda;
    let f = spec.patience.cdf(w);
    let q2 = qt * qt;
    Ok(LocalKernel {
        t,
        w,
        wdot,
        qtilde: qt,
        inflow,
        h,
        hazard,
        i_sq: [
            c2 * fc * inflow / q2,
            spec.staffing.value(t) * spec.mu / q2,
            f * inflow / q2,
        ],
        bar_sq: [c2 * fc * fc / q2, f * fc / q2],
    })
}

/// `I²` written as one fraction.
pub fn i_sq_closed(spec: &ModelSpec, t: f64, w: f64) -> f64 {
    let b = spec.service_inflow(t);
    let sdot = spec.staffing.deriv(t);
    let fc = spec.patience.ccdf(w);
    let qt = spec.lambda.value(t - w) * fc;
    let c2 = spec.c_lambda * spec.c_lambda;
    (b - sdot + (spec.patience.cdf(w) + c2 * fc) * b) / (qt * qt)
}

#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub weight: f64,
    pub k: LocalKernel,
}

/// Kernels on the nodes of one OL interval.
#[derive(Debug, Clone)]
pub struct OlKernels {
    pub segment: usize,
    pub c_lambda: f64,
    pub nodes: Vec<LocalKernel>,
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub wdot: Vec<f64>,
    pub h: Vec<f64>,
    /// `log Hc(t) = ∫_start^t h`.
    pub log_hc: Vec<f64>,
    /// `log F_w^c(t) = −∫_start^t h_F(w)`.
    pub log_fwc: Vec<f64>,
    pub hazard: Vec<f64>,
    /// Gauss–Legendre points of each cell `[t_k, t_{k+1}]`.
    pub cells: Vec<[QuadPoint; 5]>,
    ell: Vec<f64>,
}

impl OlKernels {
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

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start() - 1e-13 && t <= self.end() + 1e-13
    }

    pub fn w_at(&self, t: f64) -> f64 {
        numerics::hermite(&self.t, &self.w, &self.wdot, t)
    }

    pub fn log_hc_at(&self, t: f64) -> f64 {
        numerics::hermite(&self.t, &self.log_hc, &self.h, t)
    }

    pub fn hc(&self, t: f64) -> f64 {
        self.log_hc_at(t).exp()
    }

    /// `H(t, u) = Hc(t) / Hc(u)`.
    pub fn big_h(&self, t: f64, u: f64) -> f64 {
        (self.log_hc_at(t) - self.log_hc_at(u)).exp()
    }

    /// `F_w^c` at absolute time `t` in the interval.
    pub fn fwc(&self, t: f64) -> f64 {
        if self.len() == 1 {
            return 1.0;
        }
        let k = numerics::locate(&self.t, t);
        numerics::hermite_cell(
            self.t[k],
            self.t[k + 1],
            self.log_fwc[k],
            self.log_fwc[k + 1],
            -self.hazard[k],
            -self.hazard[k + 1],
            t,
        )
        .exp()
    }

    pub fn local_at(&self, spec: &ModelSpec, t: f64) -> Result<LocalKernel> {
        local_kernel(spec, t, self.w_at(t))
    }

    /// Inverse of `L(u) = u − w(u)` inside the interval.
    pub fn entry_inverse(&self, t: f64) -> Option<f64> {
        let last = *self.ell.last().unwrap();
        if t > last + 1e-13 || t < self.ell[0] - 1e-13 {
            return None;
        }
        if self.len() == 1 {
            return Some(self.t[0]);
        }
        let k = numerics::locate(&self.ell, t);
        Some(numerics::hermite_cell(
            self.ell[k],
            self.ell[k + 1],
            self.t[k],
            self.t[k + 1],
            1.0 / (1.0 - self.wdot[k]),
            1.0 / (1.0 - self.wdot[k + 1]),
            t,
        ))
    }

    /// Signed intensity `I_i(u)` (`i = 0, 1, 2` for λ, s, a).
    pub fn intensity(&self, spec: &ModelSpec, i: usize, u: f64) -> Result<f64> {
        let lk = self.local_at(spec, u)?;
        let mag = lk.i_sq[i].sqrt();
        Ok(if i == 0 { mag } else { -mag })
    }

    /// `J_i(t, u) = I_i(u) H(t, u)`.
    pub fn j(&self, spec: &ModelSpec, i: usize, t: f64, u: f64) -> Result<f64> {
        Ok(self.intensity(spec, i, u)? * self.big_h(t, u))
    }

    /// `K_i(t, u)`. For `i = 0, 2` the argument `u` is an arrival epoch; for
    /// `i = 1` it is a service-clock time.
    pub fn k(&self, spec: &ModelSpec, i: usize, t: f64, u: f64) -> Result<f64> {
        let start = self.start();
        if u < start || u > t {
            return Ok(0.0);
        }
        let here = self.local_at(spec, t)?;
        if i == 1 {
            return Ok(here.qtilde * self.j(spec, 1, t, u)?);
        }
        let lam = spec.lambda.value(u);
        let ell_t = t - here.w;
        if u >= ell_t {
            let age = t - u;
            let fc = spec.patience.ccdf(age);
            return Ok(if i == 0 {
                self.c_lambda * fc * lam.sqrt()
            } else {
                -(lam * spec.patience.cdf(age) * fc).sqrt()
            });
        }
        let r = self.entry_inverse(u).unwrap_or(start);
        let at = self.local_at(spec, r)?;
        let bar = if i == 0 {
            at.bar_sq[0].sqrt()
        } else {
            -at.bar_sq[1].sqrt()
        };
        Ok(here.qtilde * lam.sqrt() * bar * self.big_h(t, r))
    }
}

/// Kernels for every interval; `None` for UL intervals.
#[derive(Debug, Clone)]
pub struct Kernels {
    pub ol: Vec<Option<OlKernels>>,
}

impl Kernels {
    pub fn iter(&self) -> impl Iterator<Item = &OlKernels> {
        self.ol.iter().flatten()
    }
}

pub fn build_kernels(spec: &ModelSpec, fluid: &FluidSolution) -> Result<Kernels> {
    if let Some(t) = spec.lambda.rough_points(0.0, fluid.end(), KINK_TOL).first() {
        return Err(Error::NotSmooth("lambda", *t));
    }
    let ol = fluid
        .segments
        .iter()
        .enumerate()
        .map(|(i, seg)| match seg.regime {
            Regime::Overloaded => build_ol(spec, seg, i).map(Some),
            Regime::Underloaded => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Kernels { ol })
}

fn build_ol(spec: &ModelSpec, seg: &Segment, index: usize) -> Result<OlKernels> {
    let n = seg.len();
    let nodes = (0..n)
        .map(|k| local_kernel(spec, seg.t[k], seg.w[k]))
        .collect::<Result<Vec<_>>>()?;
    let mut log_hc = vec![0.0; n];
    let mut log_fwc = vec![0.0; n];
    let mut cells = Vec::with_capacity(n.saturating_sub(1));
    for k in 0..n.saturating_sub(1) {
        let (t0, t1) = (seg.t[k], seg.t[k + 1]);
        let mut cell = [QuadPoint {
            weight: 0.0,
            k: nodes[k],
        }; 5];
        let (mut int_h, mut int_hf) = (0.0, 0.0);
        for (slot, (u, wt)) in cell.iter_mut().zip(numerics::gl_points(t0, t1)) {
            let w = numerics::hermite_cell(
                t0,
                t1,
                seg.w[k],
                seg.w[k + 1],
                seg.wdot[k],
                seg.wdot[k + 1],
                u,
            );
            let lk = local_kernel(spec, u, w)?;
            int_h += wt * lk.h;
            int_hf += wt * lk.hazard;
            *slot = QuadPoint { weight: wt, k: lk };
        }
        log_hc[k + 1] = log_hc[k] + int_h;
        log_fwc[k + 1] = log_fwc[k] - int_hf;
        cells.push(cell);
    }
    Ok(OlKernels {
        segment: index,
        c_lambda: spec.c_lambda,
        t: seg.t.clone(),
        w: seg.w.clone(),
        wdot: seg.wdot.clone(),
        h: nodes.iter().map(|k| k.h).collect(),
        hazard: nodes.iter().map(|k| k.hazard).collect(),
        ell: seg.entry_clock(),
        nodes,
        log_hc,
        log_fwc,
        cells,
    })
}

/// `σ²_Ŵ*` by component and in total, on the interval nodes.
#[derive(Debug, Clone)]
pub struct WStar {
    pub comp: [Vec<f64>; 3],
    pub total: Vec<f64>,
}

/// `∫_start^t H(t,u)² I_i(u)² du` through `S(t_{k+1}) = H(t_{k+1}, t_k)² S(t_k) + cell integral`.
pub fn var_w_star(kern: &OlKernels) -> WStar {
    let n = kern.len();
    let mut comp = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (k, cell) in kern.cells.iter().enumerate() {
        let (t0, t1) = (kern.t[k], kern.t[k + 1]);
        let l1 = kern.log_hc[k + 1];
        let r2 = (2.0 * (l1 - kern.log_hc[k])).exp();
        let mut acc = [0.0; 3];
        for p in cell {
            let lu =
                numerics::hermite_cell(t0, t1, kern.log_hc[k], l1, kern.h[k], kern.h[k + 1], p.k.t);
            let g = p.weight * (2.0 * (l1 - lu)).exp();
            for i in 0..3 {
                acc[i] += g * p.k.i_sq[i];
            }
        }
        for i in 0..3 {
            comp[i][k + 1] = comp[i][k] * r2 + acc[i];
        }
    }
    let total = (0..n)
        .map(|k| comp[0][k] + comp[1][k] + comp[2][k])
        .collect();
    WStar { comp, total }
}

/// Queue-resident parts of `σ²_X̂*`: `c² ∫_0^w λ(t−x) F^c(x)² dx` and `∫_0^w λ(t−x) F(x) F^c(x) dx`.
pub fn queue_variance_terms(spec: &ModelSpec, t: f64, w: f64) -> (f64, f64) {
    let c2 = spec.c_lambda * spec.c_lambda;
    let lam_part = numerics::gauss_legendre(
        |x| {
            let fc = spec.patience.ccdf(x);
            spec.lambda.value(t - x) * fc * fc
        },
        0.0,
        w,
        QUAD_PANEL,
    );
    let ab_part = numerics::gauss_legendre(
        |x| spec.lambda.value(t - x) * spec.patience.cdf(x) * spec.patience.ccdf(x),
        0.0,
        w,
        QUAD_PANEL,
    );
    (c2 * lam_part, ab_part)
}

/// `σ²_X̂*` per component on the interval nodes, direct route.
pub fn var_x_star(spec: &ModelSpec, kern: &OlKernels, ws: &WStar) -> [Vec<f64>; 3] {
    let n = kern.len();
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for k in 0..n {
        let q2 = kern.nodes[k].qtilde.powi(2);
        let (a_lam, a_ab) = queue_variance_terms(spec, kern.t[k], kern.w[k]);
        out[0][k] = a_lam + q2 * ws.comp[0][k];
        out[1][k] = q2 * ws.comp[1][k];
        out[2][k] = a_ab + q2 * ws.comp[2][k];
    }
    out
}

/// `Σ_i ∫ K_i(t,u)² du` by direct quadrature of the kernels at absolute time `t`.
pub fn var_x_star_kernel(spec: &ModelSpec, kern: &OlKernels, t: f64) -> Result<f64> {
    let (q_part, w_part) = kernel_parts(spec, kern, t)?;
    Ok(q_part + w_part)
}

/// Cross-covariance `Σ_i ∫ J_i K_i` by quadrature, with `J_λ, J_a` carried to the arrival clock.
pub fn cov_xw_quadrature(spec: &ModelSpec, kern: &OlKernels, t: f64) -> Result<f64> {
    let here = kern.local_at(spec, t)?;
    let (_, w_part) = kernel_parts(spec, kern, t)?;
    Ok(w_part / here.qtilde)
}

fn kernel_parts(spec: &ModelSpec, kern: &OlKernels, t: f64) -> Result<(f64, f64)> {
    let start = kern.start();
    let here = kern.local_at(spec, t)?;
    let ell_t = t - here.w;
    let panel = 0.01;
    let err = std::cell::RefCell::new(None);
    let guard = |r: Result<f64>| match r {
        Ok(v) => v,
        Err(e) => {
            err.borrow_mut().get_or_insert(e);
            0.0
        }
    };
    let recent = numerics::gauss_legendre(
        |u| {
            let a = guard(kern.k(spec, 0, t, u));
            let b = guard(kern.k(spec, 2, t, u));
            a * a + b * b
        },
        ell_t.max(start),
        t,
        panel,
    );
    let older = numerics::gauss_legendre(
        |u| {
            let a = guard(kern.k(spec, 0, t, u));
            let b = guard(kern.k(spec, 2, t, u));
            a * a + b * b
        },
        start,
        ell_t.max(start),
        panel,
    );
    let service = numerics::gauss_legendre(
        |u| {
            let a = guard(kern.k(spec, 1, t, u));
            a * a
        },
        start,
        t,
        panel,
    );
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    Ok((recent, older + service))
}

/// Variances and covariances over one interval, on its nodes.
#[derive(Debug, Clone)]
pub struct SegmentMoments {
    pub regime: Regime,
    /// `Var X̂` at the interval start.
    pub var0: f64,
    pub var_x: Vec<f64>,
    pub var_x_star: Vec<f64>,
    pub var_x_comp: [Vec<f64>; 3],
    pub var_w_star: Vec<f64>,
    pub var_w_comp: [Vec<f64>; 3],
    pub var_w: Vec<f64>,
    pub var_v_star: Vec<f64>,
    pub var_v: Vec<f64>,
    pub cov_xw: Vec<f64>,
    /// `F_w^c` in OL intervals; NaN in UL intervals.
    pub fwc: Vec<f64>,
}

/// `σ²_X̂ = σ²_X̂* + Var0 · F_w^c²`.
pub fn var_x_ol(var_x_star: &[f64], fwc: &[f64], var0: f64) -> Vec<f64> {
    var_x_star
        .iter()
        .zip(fwc)
        .map(|(v, f)| v + var0 * f * f)
        .collect()
}

/// Waiting-time variances `(σ²_Ŵ, σ²_V̂, σ²_V̂*)` on the nodes of an OL interval.
pub fn var_w_v(
    spec: &ModelSpec,
    kern: &OlKernels,
    seg: &Segment,
    ws: &WStar,
    var0: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = kern.len();
    let fwc: Vec<f64> = kern.log_fwc.iter().map(|l| l.exp()).collect();
    let var_w: Vec<f64> = (0..n)
        .map(|k| ws.total[k] + var0 * (fwc[k] / kern.nodes[k].qtilde).powi(2))
        .collect();
    let slopes: Vec<f64> = (0..n)
        .map(|k| 2.0 * kern.h[k] * ws.total[k] + kern.nodes[k].i_sq_total())
        .collect();
    let mut var_v_star = vec![f64::NAN; n];
    let mut var_v = vec![f64::NAN; n];
    for k in 0..n {
        let v = seg.v[k];
        if !v.is_finite() {
            continue;
        }
        let t = kern.t[k];
        let u = t + v;
        if !kern.contains(u) {
            continue;
        }
        let b = spec.service_inflow(u);
        // 1 − ẇ(t+v) = b(t+v) / (λ(t) F^c(v)) because w(t+v) = v
        let one_minus = b / (spec.lambda.value(t) * spec.patience.ccdf(v));
        let s = numerics::hermite(&kern.t, &ws.total, &slopes, u).max(0.0);
        var_v_star[k] = s / (one_minus * one_minus);
        var_v[k] = var_v_star[k] + var0 * (kern.fwc(u) / b).powi(2);
    }
    (var_w, var_v, var_v_star)
}

/// `σ²_V̂` at an arbitrary time of an OL interval, from `v = L^{-1}(t) − t`.
pub fn var_v_at(spec: &ModelSpec, kern: &OlKernels, ws: &WStar, var0: f64, t: f64) -> Option<f64> {
    let u = kern.entry_inverse(t)?;
    let v = u - t;
    let slopes: Vec<f64> = (0..kern.len())
        .map(|k| 2.0 * kern.h[k] * ws.total[k] + kern.nodes[k].i_sq_total())
        .collect();
    let b = spec.service_inflow(u);
    let one_minus = b / (spec.lambda.value(t) * spec.patience.ccdf(v));
    let s = numerics::hermite(&kern.t, &ws.total, &slopes, u);
    Some(s / (one_minus * one_minus) + var0 * (kern.fwc(u) / b).powi(2))
}

fn ol_moments(spec: &ModelSpec, kern: &OlKernels, seg: &Segment, var0: f64) -> SegmentMoments {
    let ws = var_w_star(kern);
    let comp = var_x_star(spec, kern, &ws);
    let n = kern.len();
    let var_x_star: Vec<f64> = (0..n)
        .map(|k| comp[0][k] + comp[1][k] + comp[2][k])
        .collect();
    let fwc: Vec<f64> = kern.log_fwc.iter().map(|l| l.exp()).collect();
    let var_x = var_x_ol(&var_x_star, &fwc, var0);
    let (var_w, var_v, var_v_star) = var_w_v(spec, kern, seg, &ws, var0);
    let cov_xw = (0..n).map(|k| kern.nodes[k].qtilde * ws.total[k]).collect();
    SegmentMoments {
        regime: Regime::Overloaded,
        var0,
        var_x,
        var_x_star,
        var_x_comp: comp,
        var_w_star: ws.total.clone(),
        var_w_comp: ws.comp,
        var_w,
        var_v_star,
        var_v,
        cov_xw,
        fwc,
    }
}

/// UL variances on the interval nodes for content `x0` and variance `var0` at the start.
pub fn var_ul(spec: &ModelSpec, seg: &Segment, x0: f64, var0: f64) -> SegmentMoments {
    let n = seg.len();
    let mu = spec.mu;
    let c2 = spec.c_lambda * spec.c_lambda;
    let start = seg.start();
    let mut e1 = vec![0.0; n];
    let mut e2 = vec![0.0; n];
    for k in 1..n {
        let (t0, t1) = (seg.t[k - 1], seg.t[k]);
        let (mut a1, mut a2) = (0.0, 0.0);
        for (u, wt) in numerics::gl_points(t0, t1) {
            let g = (-mu * (t1 - u)).exp();
            let lam = spec.lambda.value(u);
            a1 += wt * g * lam;
            a2 += wt * g * g * lam;
        }
        let d = (-mu * (t1 - t0)).exp();
        e1[k] = e1[k - 1] * d + a1;
        e2[k] = e2[k - 1] * d * d + a2;
    }
    let mut lam_c = vec![0.0; n];
    let mut svc_c = vec![0.0; n];
    let mut var_x_star = vec![0.0; n];
    let mut var_x = vec![0.0; n];
    for k in 0..n {
        let g = (-mu * (seg.t[k] - start)).exp();
        lam_c[k] = c2 * e2[k];
        svc_c[k] = (e1[k] - e2[k]) + x0 * (1.0 - g) * g;
        var_x_star[k] = lam_c[k] + svc_c[k];
        var_x[k] = var_x_star[k] + var0 * g * g;
    }
    SegmentMoments {
        regime: Regime::Underloaded,
        var0,
        var_x,
        var_x_star,
        var_x_comp: [lam_c, svc_c, vec![0.0; n]],
        var_w_star: vec![0.0; n],
        var_w_comp: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        var_w: vec![0.0; n],
        var_v_star: vec![0.0; n],
        var_v: vec![0.0; n],
        cov_xw: vec![0.0; n],
        fwc: vec![f64::NAN; n],
    }
}

/// Deterministic mean corrections from the `√n` terms of arrivals and staffing.
#[derive(Debug, Clone)]
pub struct SegmentMean {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    /// Mean of `X̂` at the interval start.
    pub m0: f64,
}

pub fn mean_shift_refined(
    spec: &ModelSpec,
    fluid: &FluidSolution,
    kernels: &Kernels,
) -> Result<Vec<SegmentMean>> {
    if spec.lambda_g.is_none() && spec.staffing_g.is_none() {
        return Err(Error::RefinedTermsMissing);
    }
    let zero = SmoothFn::constant(0.0);
    let lam_g = spec.lambda_g.as_ref().unwrap_or(&zero);
    let s_g = spec.staffing_g.as_ref().unwrap_or(&zero);
    let mu = spec.mu;
    let mut out = Vec::with_capacity(fluid.segments.len());
    let mut m0 = 0.0;
    for (seg, kern) in fluid.segments.iter().zip(&kernels.ol) {
        let n = seg.len();
        let mean = match kern {
            None => {
                let mut x = vec![m0; n];
                for k in 1..n {
                    let (t0, t1) = (seg.t[k - 1], seg.t[k]);
                    let a: f64 = numerics::gl_points(t0, t1)
                        .iter()
                        .map(|(u, wt)| wt * (-mu * (t1 - u)).exp() * lam_g.value(*u))
                        .sum();
                    x[k] = x[k - 1] * (-mu * (t1 - t0)).exp() + a;
                }
                SegmentMean {
                    x,
                    w: vec![0.0; n],
                    v: vec![0.0; n],
                    m0,
                }
            }
            Some(kern) => {
                let z = |lk: &LocalKernel| {
                    let ell = lk.t - lk.w;
                    (mu * s_g.value(lk.t) + s_g.deriv(lk.t)
                        - spec.patience.ccdf(lk.w) * (1.0 - lk.wdot) * lam_g.value(ell))
                        / lk.qtilde
                };
                let mut wg = vec![0.0; n];
                for (k, cell) in kern.cells.iter().enumerate() {
                    let (t0, t1) = (kern.t[k], kern.t[k + 1]);
                    let l1 = kern.log_hc[k + 1];
                    let mut acc = 0.0;
                    for p in cell {
                        let lu = numerics::hermite_cell(
                            t0,
                            t1,
                            kern.log_hc[k],
                            l1,
                            kern.h[k],
                            kern.h[k + 1],
                            p.k.t,
                        );
                        acc += p.weight * (l1 - lu).exp() * z(&p.k);
                    }
                    wg[k + 1] = wg[k] * (l1 - kern.log_hc[k]).exp() - acc;
                }
                let excess0 = m0 - s_g.value(seg.start());
                let mut x = vec![0.0; n];
                let mut w = vec![0.0; n];
                for k in 0..n {
                    let lk = &kern.nodes[k];
                    let fwc = kern.log_fwc[k].exp();
                    let q1g = numerics::gauss_legendre(
                        |a| lam_g.value(lk.t - a) * spec.patience.ccdf(a),
                        0.0,
                        lk.w,
                        QUAD_PANEL,
                    );
                    x[k] = s_g.value(lk.t) + q1g + lk.qtilde * wg[k] + excess0 * fwc;
                    w[k] = wg[k] + excess0 * fwc / lk.qtilde;
                }
                let slopes = numerics::fd_slopes(&kern.t, &w);
                let v = (0..n)
                    .map(|k| {
                        let vk = seg.v[k];
                        let u = kern.t[k] + vk;
                        if !vk.is_finite() || !kern.contains(u) {
                            return f64::NAN;
                        }
                        let one_minus = spec.service_inflow(u)
                            / (spec.lambda.value(kern.t[k]) * spec.patience.ccdf(vk));
                        numerics::hermite(&kern.t, &w, &slopes, u) / one_minus
                    })
                    .collect();
                SegmentMean { x, w, v, m0 }
            }
        };
        m0 = *mean.x.last().unwrap();
        out.push(mean);
    }
    Ok(out)
}

/// Distribution of `(Q̂, B̂, V̂)` at an interval endpoint, from `X̂ ~ N(m, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointDiagnostic {
    pub t: f64,
    pub mean_x: f64,
    pub var_x: f64,
    pub mean_q: f64,
    pub var_q: f64,
    pub mean_b: f64,
    pub var_b: f64,
    pub mean_v: f64,
    pub var_v: f64,
}

pub fn endpoint_diagnostic(
    spec: &ModelSpec,
    t: f64,
    mean_x: f64,
    var_x: f64,
) -> EndpointDiagnostic {
    let tm = truncated_moments(mean_x, var_x, 0.0);
    let b = spec.service_inflow(t);
    EndpointDiagnostic {
        t,
        mean_x,
        var_x,
        mean_q: tm.mean_excess,
        var_q: tm.var_excess,
        mean_b: tm.mean_capped,
        var_b: tm.var_capped,
        mean_v: tm.mean_excess / b,
        var_v: tm.var_excess / (b * b),
    }
}

/// Grid values of the Gaussian refinement at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPoint {
    pub t: f64,
    pub var_x: f64,
    pub var_x_star: f64,
    pub var_w: f64,
    pub var_w_star: f64,
    pub var_v: f64,
    pub var_v_star: f64,
    pub cov_xw: f64,
    pub fwc: f64,
    pub var_x_comp: [f64; 3],
    pub var_w_comp: [f64; 3],
    /// Mean corrections (NaN without refinement terms).
    pub mean_x: f64,
    pub mean_w: f64,
    pub mean_v: f64,
}

#[derive(Debug, Clone)]
pub struct GaussianSolution {
    pub kernels: Kernels,
    pub segments: Vec<SegmentMoments>,
    pub means: Option<Vec<SegmentMean>>,
    pub endpoints: Vec<EndpointDiagnostic>,
    grid: Vec<f64>,
    nodes: Vec<NodeRef>,
}

impl GaussianSolution {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn point(&self, k: usize) -> GaussianPoint {
        let NodeRef { segment, node } = self.nodes[k];
        let s = &self.segments[segment];
        let (mean_x, mean_w, mean_v) = match &self.means {
            Some(m) => {
                let m = &m[segment];
                (m.x[node], m.w[node], m.v[node])
            }
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        GaussianPoint {
            t: self.grid[k],
            var_x: s.var_x[node],
            var_x_star: s.var_x_star[node],
            var_w: s.var_w[node],
            var_w_star: s.var_w_star[node],
            var_v: s.var_v[node],
            var_v_star: s.var_v_star[node],
            cov_xw: s.cov_xw[node],
            fwc: s.fwc[node],
            var_x_comp: [
                s.var_x_comp[0][node],
                s.var_x_comp[1][node],
                s.var_x_comp[2][node],
            ],
            var_w_comp: [
                s.var_w_comp[0][node],
                s.var_w_comp[1][node],
                s.var_w_comp[2][node],
            ],
            mean_x,
            mean_w,
            mean_v,
        }
    }

    pub fn points(&self) -> Vec<GaussianPoint> {
        (0..self.grid.len()).map(|k| self.point(k)).collect()
    }

    /// `Var X̂` at the start of each interval.
    pub fn initial_variances(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.var0).collect()
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
            "t",
            "var_X",
            "var_Xstar",
            "var_W",
            "var_Wstar",
            "var_V",
            "cov_XW",
            "Fwc",
            "var_X_lambda",
            "var_X_s",
            "var_X_a",
        ]);
        for p in self.points() {
            t.push(vec![
                p.t.into(),
                p.var_x.into(),
                p.var_x_star.into(),
                p.var_w.into(),
                p.var_w_star.into(),
                p.var_v.into(),
                p.cov_xw.into(),
                p.fwc.into(),
                p.var_x_comp[0].into(),
                p.var_x_comp[1].into(),
                p.var_x_comp[2].into(),
            ]);
        }
        t
    }
}

/// Runs every interval in order, seeding each with `Var X̂` at the previous end.
pub fn propagate(spec: &ModelSpec, fluid: &FluidSolution) -> Result<GaussianSolution> {
    let kernels = build_kernels(spec, fluid)?;
    let mut segments = Vec::with_capacity(fluid.segments.len());
    let mut var0 = spec.var_x0;
    for (seg, kern) in fluid.segments.iter().zip(&kernels.ol) {
        let m = match kern {
            Some(kern) => ol_moments(spec, kern, seg, var0),
            None => var_ul(spec, seg, seg.x[0], var0),
        };
        var0 = *m.var_x.last().unwrap();
        segments.push(m);
    }
    let means = if spec.lambda_g.is_some() || spec.staffing_g.is_some() {
        Some(mean_shift_refined(spec, fluid, &kernels)?)
    } else {
        None
    };

    let mut endpoints = Vec::new();
    let horizon = fluid.horizon;
    for (i, seg) in fluid.segments.iter().enumerate() {
        if seg.start() > horizon + 1e-12 {
            break;
        }
        let m = means.as_ref().map_or(0.0, |m| m[i].x[0]);
        endpoints.push(endpoint_diagnostic(
            spec,
            seg.start(),
            m,
            segments[i].var_x[0],
        ));
    }
    let grid: Vec<f64> = fluid.grid().to_vec();
    let nodes: Vec<NodeRef> = (0..grid.len()).map(|k| fluid.node(k)).collect();
    let last = nodes[nodes.len() - 1];
    let m_end = means.as_ref().map_or(0.0, |m| m[last.segment].x[last.node]);
    endpoints.push(endpoint_diagnostic(
        spec,
        *grid.last().unwrap(),
        m_end,
        segments[last.segment].var_x[last.node],
    ));
    Ok(GaussianSolution {
        kernels,
        segments,
        means,
        endpoints,
        grid,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::solve_fluid;
    use crate::model::PatienceDist;
    use approx::assert_relative_eq;

    fn stationary_ol(horizon: f64) -> ModelSpec {
        let mut spec = ModelSpec::new(
            SmoothFn::constant(1.5),
            SmoothFn::constant(1.0),
            1.0,
            PatienceDist::exponential(0.5),
            horizon,
        );
        spec.x0 = 1.0;
        spec
    }

    fn solved(spec: &ModelSpec, step: f64) -> (FluidSolution, GaussianSolution) {
        let fluid = solve_fluid(spec, step).unwrap();
        let g = propagate(spec, &fluid).unwrap();
        (fluid, g)
    }

    #[test]
    fn stationary_kernels() {
        let spec = stationary_ol(30.0);
        let fluid = solve_fluid(&spec, 1e-2).unwrap();
        let kern = build_kernels(&spec, &fluid).unwrap();
        let k = kern.iter().next().unwrap();
        let last = k.nodes.last().unwrap();
        assert!((last.h + 0.5).abs() < 1e-6);
        assert!((last.i_sq_total() - 2.0).abs() < 1e-5);
        assert_eq!(k.big_h(3.0, 3.0), 1.0);
        // exponential patience: F_w^c = e^{−θt}
        for &t in &[0.0, 1.0, 7.3, 20.0] {
            assert_relative_eq!(k.fwc(t), (-0.5 * t).exp(), max_relative = 1e-12);
        }
    }

    #[test]
    fn kernel_invariants_on_benchmark() {
        let spec = ModelSpec::sinusoidal_h2(16.0);
        let fluid = solve_fluid(&spec, 1e-3).unwrap();
        let kernels = build_kernels(&spec, &fluid).unwrap();
        for k in kernels.iter() {
            let (a, b) = (k.start(), k.end());
            for j in 0..=10 {
                let t = a + (b - a) * j as f64 / 10.0;
                let u = a + (t - a) * 0.6;
                let r = a + (u - a) * 0.3;
                let lhs = k.big_h(t, u) * k.big_h(u, r);
                assert_relative_eq!(lhs, k.big_h(t, r), max_relative = 1e-10);
                let lk = k.local_at(&spec, t).unwrap();
                assert!((lk.i_sq_total() - i_sq_closed(&spec, t, lk.w)).abs() < 1e-10);
            }
            assert_eq!(k.fwc(a), 1.0);
            let f: Vec<f64> = k.log_fwc.iter().map(|l| l.exp()).collect();
            assert!(f.windows(2).all(|p| p[1] <= p[0]));
            assert!(f.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn fwc_matches_fine_quadrature() {
        // independent oracle: trapezoid of h_F(w) on the nodes of a 16× finer solve
        let spec = ModelSpec::sinusoidal_h2(16.0);
        let coarse = solve_fluid(&spec, 1e-3).unwrap();
        let fine = solve_fluid(&spec, 1e-3 / 16.0).unwrap();
        let kc = build_kernels(&spec, &coarse).unwrap();
        let kc = kc.iter().next().unwrap();
        let seg = fine
            .segments
            .iter()
            .find(|s| s.regime == Regime::Overloaded)
            .unwrap();
        let hz: Vec<f64> = seg
            .w
            .iter()
            .map(|w| spec.patience.hazard(*w).unwrap())
            .collect();
        let cum = numerics::cumulative_trapezoid(&seg.t, &hz);
        for k in (0..seg.len()).step_by(997) {
            let oracle = (-cum[k]).exp();
            assert!((kc.fwc(seg.t[k]) - oracle).abs() < 1e-8, "t = {}", seg.t[k]);
        }
    }

    #[test]
    fn stationary_variances() {
        let spec = stationary_ol(30.0);
        let (fluid, g) = solved(&spec, 1e-2);
        let last = g.point(g.grid().len() - 1);
        assert!((last.var_w_star - 2.0).abs() < 1e-4);
        assert!((last.var_x_star - 3.0).abs() < 1e-4);
        assert_relative_eq!(last.var_v_star, last.var_w_star, max_relative = 1e-4);
        assert_eq!(last.var_w, last.var_w_star);
        let first = g.point(0);
        assert_eq!(first.var_w_star, 0.0);
        assert_eq!(first.var_x_star, 0.0);
        assert_eq!(first.cov_xw, 0.0);
        let _ = fluid;
    }

    #[test]
    fn initial_variance_enters_through_fwc() {
        let mut spec = stationary_ol(10.0);
        spec.var_x0 = 0.7;
        let (_, g) = solved(&spec, 1e-2);
        assert_eq!(g.point(0).var_x, 0.7);
        let p = g.point(400);
        assert_relative_eq!(
            p.var_x,
            p.var_x_star + 0.7 * (-0.5 * 4.0f64).exp().powi(2),
            max_relative = 1e-12
        );
    }

    #[test]
    fn ul_poisson_property() {
        let spec = ModelSpec::new(
            SmoothFn::constant(0.5),
            SmoothFn::constant(1.0),
            1.0,
            PatienceDist::exponential(0.5),
            10.0,
        );
        let (fluid, g) = solved(&spec, 1e-2);
        for (p, f) in g.points().iter().zip(fluid.points()) {
            assert_relative_eq!(p.var_x, 0.5 * (1.0 - (-p.t).exp()), epsilon = 1e-13);
            assert_relative_eq!(p.var_x, f.x, epsilon = 1e-13);
            assert_eq!(p.var_w, 0.0);
        }
    }

    #[test]
    fn ul_matches_fine_quadrature() {
        let spec = ModelSpec::sinusoidal_h2(16.0);
        let (fluid, g) = solved(&spec, 1e-3);
        let seg = &fluid.segments[0];
        let k = seg.len() - 1;
        let t = seg.t[k];
        // trapezoid on a fine uniform grid, Richardson-extrapolated
        let f = |u: f64| spec.lambda.value(u) * (-(t - u)).exp();
        let a = numerics::trapezoid_uniform(f, 0.0, t, 1e-4);
        let b = numerics::trapezoid_uniform(f, 0.0, t, 5e-5);
        let oracle = b + (b - a) / 3.0;
        assert!((g.segments[0].var_x[k] - oracle).abs() < 1e-8);
    }

    #[test]
    fn direct_and_kernel_routes_agree() {
        let spec = ModelSpec::sinusoidal_h2(16.0);
        let (fluid, g) = solved(&spec, 1e-3);
        let i = fluid
            .segments
            .iter()
            .position(|s| s.regime == Regime::Overloaded)
            .unwrap();
        let kern = g.kernels.ol[i].as_ref().unwrap();
        let m = &g.segments[i];
        let n = kern.len();
        for k in [n / 7, n / 3, n / 2, 4 * n / 5, n - 2] {
            let t = kern.t[k];
            let direct = m.var_x_star[k];
            let via_k = var_x_star_kernel(&spec, kern, t).unwrap();
            assert!(
                ((direct - via_k) / direct).abs() < 1e-6,
                "{direct} vs {via_k}"
            );
            let cov = cov_xw_quadrature(&spec, kern, t).unwrap();
            assert!(((cov - m.cov_xw[k]) / cov).abs() < 1e-6);
        }
    }

    #[test]
    fn components_add_up_and_are_nonnegative() {
        let spec = ModelSpec::sinusoidal_h2(16.0);
        let (_, g) = solved(&spec, 1e-3);
        for p in g.points() {
            let sx: f64 = p.var_x_comp.iter().sum();
            let sw: f64 = p.var_w_comp.iter().sum();
            assert!((p.var_x_star - sx).abs() < 1e-8);
            assert!((p.var_w_star - sw).abs() < 1e-8);
            for v in [p.var_x, p.var_x_star, p.var_w, p.var_w_star] {
                assert!(v >= 0.0);
            }
            if p.var_v.is_finite() {
                assert!(p.var_v >= 0.0 && p.var_v_star >= 0.0);
            }
            assert!(p.cov_xw.abs() <= (p.var_x_star * p.var_w_star).sqrt() + 1e-12);
        }
    }

    #[test]
    fn var_x_is_continuous_across_switches() {
        let spec = ModelSpec::sinusoidal_h2(16.0);
        let (fluid, g) = solved(&spec, 1e-3);
        assert!(fluid.switches.len() >= 4);
        for i in 1..g.segments.len() {
            let prev = g.segments[i - 1].var_x.last().unwrap();
            let next = g.segments[i].var_x[0];
            assert!((prev - next).abs() < 1e-6);
        }
        // grid-level jump next to each switch is O(Δ)
        let pts = g.points();
        for w in pts.windows(2) {
            assert!((w[1].var_x - w[0].var_x).abs() < 0.01);
        }
    }

    #[test]
    fn infinite_server_reduction() {
        let mut spec = ModelSpec::sinusoidal_h2(16.0);
        spec.patience = PatienceDist::exponential(1.0);
        let (fluid, g) = solved(&spec, 1e-3);
        assert!(!fluid.switches.is_empty());
        for (p, f) in g.points().iter().zip(fluid.points()) {
            assert!(
                (p.var_x - f.x).abs() < 1e-4,
                "t = {}: {} vs {}",
                p.t,
                p.var_x,
                f.x
            );
        }
    }

    #[test]
    fn waiting_identity() {
        let spec = ModelSpec::sinusoidal_h2(16.0);
        let (fluid, g) = solved(&spec, 1e-3);
        for (i, seg) in fluid.segments.iter().enumerate() {
            let Some(kern) = &g.kernels.ol[i] else {
                continue;
            };
            let ws = var_w_star(kern);
            let var0 = g.segments[i].var0;
            for k in (1..seg.len()).step_by(101) {
                let t = seg.t[k];
                let rhs = var_v_at(&spec, kern, &ws, var0, t - seg.w[k]).unwrap();
                let lhs = g.segments[i].var_w[k];
                let scaled = (1.0 - seg.wdot[k]).powi(2) * rhs;
                assert!((lhs - scaled).abs() < 1e-6, "t = {t}: {lhs} vs {scaled}");
            }
        }
    }

    #[test]
    fn refined_means() {
        let mut spec = stationary_ol(30.0);
        spec.lambda_g = Some(SmoothFn::constant(0.0));
        spec.staffing_g = Some(SmoothFn::constant(0.0));
        let (_, g) = solved(&spec, 1e-2);
        for p in g.points() {
            assert_eq!((p.mean_x, p.mean_w), (0.0, 0.0));
        }
        spec.staffing_g = Some(SmoothFn::constant(1.0));
        let (_, g) = solved(&spec, 1e-2);
        let last = g.point(g.grid().len() - 1);
        assert!((last.mean_w + 2.0).abs() < 1e-3, "{}", last.mean_w);

        let mut ul = ModelSpec::new(
            SmoothFn::constant(0.5),
            SmoothFn::constant(1.0),
            1.0,
            PatienceDist::exponential(0.5),
            5.0,
        );
        ul.lambda_g = Some(SmoothFn::constant(1.0));
        let (_, g) = solved(&ul, 1e-2);
        for p in g.points() {
            assert_relative_eq!(p.mean_x, 1.0 - (-p.t).exp(), epsilon = 1e-12);
        }

        let plain = stationary_ol(5.0);
        let fluid = solve_fluid(&plain, 1e-2).unwrap();
        let kern = build_kernels(&plain, &fluid).unwrap();
        assert!(matches!(
            mean_shift_refined(&plain, &fluid, &kern),
            Err(Error::RefinedTermsMissing)
        ));
    }

    #[test]
    fn endpoint_values() {
        let spec = ModelSpec::sinusoidal_h2(16.0);
        let (fluid, g) = solved(&spec, 1e-3);
        assert_eq!(g.endpoints.len(), fluid.switches.len() + 2);
        for e in &g.endpoints[1..] {
            // mean-zero Gaussian: E[X̂⁺] = σ φ(0)
            let sd = e.var_x.sqrt();
            assert_relative_eq!(
                e.mean_q,
                sd / (2.0 * std::f64::consts::PI).sqrt(),
                max_relative = 1e-12
            );
            assert_relative_eq!(e.mean_q + e.mean_b, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kinked_arrivals_are_refused() {
        let mut spec = stationary_ol(5.0);
        spec.lambda = SmoothFn::Piecewise {
            breaks: vec![0.0, 2.0],
            coeffs: vec![vec![1.5], vec![1.5, 0.3]],
        };
        let fluid = solve_fluid(&spec, 1e-2).unwrap();
        assert!(matches!(
            build_kernels(&spec, &fluid),
            Err(Error::NotSmooth(..))
        ));
    }
}
