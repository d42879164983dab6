//! Small numerical kernels shared by the solvers: Gauss–Legendre panels,
//! cumulative trapezoid sums, cubic Hermite interpolation and bisection.

const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Composite 5-point Gauss–Legendre over `[a, b]`, panels no wider than `max_panel`.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, max_panel: f64) -> f64 {
    let len = b - a;
    if len == 0.0 {
        return 0.0;
    }
    let panels = ((len.abs() / max_panel).ceil() as usize).max(1);
    let h = len / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        let mut acc = 0.0;
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            acc += w * f(mid + 0.5 * h * x);
        }
        total += 0.5 * h * acc;
    }
    total
}

/// The five Gauss–Legendre nodes of `[a, b]` with their weights (already scaled).
pub fn gl_points(a: f64, b: f64) -> [(f64, f64); 5] {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut out = [(0.0, 0.0); 5];
    for (o, (x, w)) in out.iter_mut().zip(GL_NODES.iter().zip(GL_WEIGHTS.iter())) {
        *o = (mid + half * x, half * w);
    }
    out
}

/// Cumulative trapezoid of `y` over the (possibly non-uniform) nodes `x`; starts at 0.
pub fn cumulative_trapezoid(x: &[f64], y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), y.len());
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    for k in 0..x.len() {
        if k > 0 {
            acc += 0.5 * (x[k] - x[k - 1]) * (y[k] + y[k - 1]);
        }
        out.push(acc);
    }
    out
}

/// Trapezoid rule for samples of a function on uniform subdivision of `[a, b]`.
pub fn trapezoid_uniform<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, max_step: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let cells = (((b - a) / max_step).ceil() as usize).max(1);
    let h = (b - a) / cells as f64;
    let mut acc = 0.5 * (f(a) + f(b));
    for k in 1..cells {
        acc += f(a + k as f64 * h);
    }
    acc * h
}

/// Index `k` with `xs[k] <= x < xs[k + 1]`, clamped to a valid cell.
pub fn locate(xs: &[f64], x: f64) -> usize {
    debug_assert!(xs.len() >= 2);
    match xs.binary_search_by(|p| p.total_cmp(&x)) {
        Ok(k) => k.min(xs.len() - 2),
        Err(0) => 0,
        Err(k) => (k - 1).min(xs.len() - 2),
    }
}

/// Cubic Hermite interpolation from node values and node slopes.
pub fn hermite(xs: &[f64], ys: &[f64], dys: &[f64], x: f64) -> f64 {
    if xs.len() == 1 {
        return ys[0];
    }
    let k = locate(xs, x);
    hermite_cell(xs[k], xs[k + 1], ys[k], ys[k + 1], dys[k], dys[k + 1], x)
}

pub fn hermite_cell(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    if h == 0.0 {
        return y0;
    }
    let s = (x - x0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
}

/// Derivative of the Hermite cubic on one cell.
pub fn hermite_cell_slope(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    if h == 0.0 {
        return d0;
    }
    let s = (x - x0) / h;
    let s2 = s * s;
    let dh00 = (6.0 * s2 - 6.0 * s) / h;
    let dh10 = 3.0 * s2 - 4.0 * s + 1.0;
    let dh01 = (-6.0 * s2 + 6.0 * s) / h;
    let dh11 = 3.0 * s2 - 2.0 * s;
    dh00 * y0 + dh10 * d0 + dh01 * y1 + dh11 * d1
}

/// Node slopes by finite differences (three-point, second order on non-uniform grids).
pub fn fd_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    if n < 2 {
        return vec![0.0; n];
    }
    if n == 2 {
        let s = (ys[1] - ys[0]) / (xs[1] - xs[0]);
        return vec![s, s];
    }
    let mut d = vec![0.0; n];
    for k in 0..n {
        let (a, b, c) = if k == 0 {
            (0, 1, 2)
        } else if k == n - 1 {
            (n - 3, n - 2, n - 1)
        } else {
            (k - 1, k, k + 1)
        };
        // derivative of the interpolating parabola through a, b, c at xs[k]
        let (xa, xb, xc) = (xs[a], xs[b], xs[c]);
        let x = xs[k];
        let la = (2.0 * x - xb - xc) / ((xa - xb) * (xa - xc));
        let lb = (2.0 * x - xa - xc) / ((xb - xa) * (xb - xc));
        let lc = (2.0 * x - xa - xb) / ((xc - xa) * (xc - xb));
        let v = la * ys[a] + lb * ys[b] + lc * ys[c];
        d[k] = if v.is_finite() {
            v
        } else {
            (ys[b] - ys[a]) / (xb - xa)
        };
    }
    d
}

/// Fritsch–Carlson monotone slopes for strictly increasing data.
pub fn pchip_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut d = vec![0.0; n];
    if n < 2 {
        return d;
    }
    let secants: Vec<f64> = (0..n - 1)
        .map(|k| (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k]))
        .collect();
    if n == 2 {
        return vec![secants[0], secants[0]];
    }
    for k in 1..n - 1 {
        let (s0, s1) = (secants[k - 1], secants[k]);
        if s0 * s1 <= 0.0 {
            d[k] = 0.0;
        } else {
            let h0 = xs[k] - xs[k - 1];
            let h1 = xs[k + 1] - xs[k];
            let w1 = 2.0 * h1 + h0;
            let w2 = h1 + 2.0 * h0;
            d[k] = (w1 + w2) / (w1 / s0 + w2 / s1);
        }
    }
    let end_slope = |h0: f64, h1: f64, s0: f64, s1: f64| {
        let d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
        if d.signum() != s0.signum() {
            0.0
        } else if s0.signum() != s1.signum() && d.abs() > 3.0 * s0.abs() {
            3.0 * s0
        } else {
            d
        }
    };
    d[0] = end_slope(xs[1] - xs[0], xs[2] - xs[1], secants[0], secants[1]);
    d[n - 1] = end_slope(
        xs[n - 1] - xs[n - 2],
        xs[n - 2] - xs[n - 3],
        secants[n - 2],
        secants[n - 3],
    );
    d
}

/// Bisection for a sign change of `g` on `[lo, hi]`; `g(lo)` and `g(hi)` must differ in sign.
pub fn bisect<G: FnMut(f64) -> f64>(mut g: G, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let mut g_lo = g(lo);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let g_mid = g(mid);
        if g_mid == 0.0 {
            return mid;
        }
        if (g_mid > 0.0) == (g_lo > 0.0) {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
