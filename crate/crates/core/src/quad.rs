//! Numerical quadrature: composite Gauss-Legendre on fixed panels and an
//! adaptive Gauss-Kronrod (7, 15) rule.

use crate::error::{Error, Result};

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n.div_ceil(2) {
        // Chebyshev-like initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for m in 2..=n {
                let p2 = ((2 * m - 1) as f64 * x * p1 - (m - 1) as f64 * p0) / m as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[k] = -x;
        nodes[n - 1 - k] = x;
        weights[k] = w;
        weights[n - 1 - k] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// A fixed set of `(t, w)` nodes for integrating over an interval.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Order of each Gauss-Legendre panel.
pub const PANEL_ORDER: usize = 8;

impl TimeGrid {
    /// Composite Gauss-Legendre on `[a, b]` with roughly `points` nodes.
    ///
    /// Panels never straddle a breakpoint, so integrands that are
    /// piecewise smooth between breakpoints are integrated at full order.
    pub fn composite(a: f64, b: f64, points: usize, breakpoints: &[f64]) -> Self {
        let mut edges = vec![a];
        let mut inner: Vec<f64> = breakpoints.iter().copied().filter(|&x| x > a && x < b).collect();
        inner.sort_by(f64::total_cmp);
        inner.dedup();
        edges.extend(inner);
        edges.push(b);
        let segments = edges.len() - 1;
        let panels_per_segment = (points / (PANEL_ORDER * segments)).max(1);
        let (gx, gw) = gauss_legendre(PANEL_ORDER);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for seg in edges.windows(2) {
            let h = (seg[1] - seg[0]) / panels_per_segment as f64;
            for p in 0..panels_per_segment {
                let lo = seg[0] + p as f64 * h;
                let mid = lo + 0.5 * h;
                for (x, w) in gx.iter().zip(&gw) {
                    nodes.push(mid + 0.5 * h * x);
                    weights.push(0.5 * h * w);
                }
            }
        }
        Self { nodes, weights }
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&t, &w)| w * f(t)).sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss 7-point weights, attached to the odd Kronrod nodes (1, 3, 5, 7).
const G7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Gauss-Kronrod 15-point panel: `(kronrod, |kronrod - gauss|)`.
pub fn gk15<F: FnMut(f64) -> Result<f64>>(f: &mut F, a: f64, b: f64) -> Result<(f64, f64)> {
    let mut f = |t: f64| -> Result<f64> {
        let v = f(t)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("integrand is {v} at t = {t}")))
        }
    };
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut kron = GK_WEIGHTS[7] * fc;
    let mut gauss = G7_WEIGHTS[3] * fc;
    for k in 0..7 {
        let dx = h * GK_NODES[k];
        let pair = f(c - dx)? + f(c + dx)?;
        kron += GK_WEIGHTS[k] * pair;
        if k % 2 == 1 {
            gauss += G7_WEIGHTS[k / 2] * pair;
        }
    }
    Ok((kron * h, ((kron - gauss) * h).abs()))
}

/// Adaptive Gauss-Kronrod integration to relative tolerance `rel_tol`.
///
/// Intervals are bisected until each panel's error estimate falls below its
/// share of the tolerance; non-finite integrand values are errors.
pub fn adaptive<F: FnMut(f64) -> Result<f64>>(mut f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    const ABS_FLOOR: f64 = 1e-300;
    const MAX_DEPTH: u32 = 48;
    let (whole, err) = gk15(&mut f, a, b)?;
    let mut stack = vec![(a, b, whole, err, 0u32)];
    let mut total = 0.0;
    let scale = whole.abs().max(ABS_FLOOR);
    let width = b - a;
    while let Some((lo, hi, val, err, depth)) = stack.pop() {
        let budget = rel_tol * scale * ((hi - lo) / width).max(1e-3);
        if err <= budget || depth >= MAX_DEPTH || err <= 1e-15 * val.abs() {
            total += val;
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let (l, el) = gk15(&mut f, lo, mid)?;
        let (r, er) = gk15(&mut f, mid, hi)?;
        stack.push((lo, mid, l, el, depth + 1));
        stack.push((mid, hi, r, er, depth + 1));
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("integral over [{a}, {b}]")));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in 1..=12 {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-12, "n={n} deg={deg}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn composite_respects_breakpoints() {
        let step = |t: f64| if t < 0.3 { 1.0 } else { 5.0 };
        let g = TimeGrid::composite(0.0, 1.0, 64, &[0.3]);
        assert!((g.integrate(step) - (0.3 + 3.5)).abs() < 1e-12);
        let smooth = TimeGrid::composite(0.0, 2.0, 64, &[]);
        assert!((smooth.integrate(f64::exp) - (2f64.exp() - 1.0)).abs() < 1e-13);
    }

    #[test]
    fn adaptive_handles_endpoint_growth() {
        // integral of 1/(1-t) over [0, 0.999] = ln 1000
        let v = adaptive(|t| Ok(1.0 / (1.0 - t)), 0.0, 0.999, 1e-10).unwrap();
        assert!((v - 1000f64.ln()).abs() < 1e-9 * 1000f64.ln());
        let s = adaptive(|t: f64| Ok(t.sin()), 0.0, std::f64::consts::PI, 1e-12).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_reports_non_finite() {
        assert!(adaptive(|_| Ok(f64::NAN), 0.0, 1.0, 1e-8).is_err());
    }
}
