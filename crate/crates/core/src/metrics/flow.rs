//! Dense optical flow by polynomial expansion (Farnebäck), coarse to fine.

use serde::{Deserialize, Serialize};

use super::Gray;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub pyramid_scale: f64,
    /// Pyramid layers including the full-resolution one.
    pub levels: usize,
    /// Side of the box window that pools the expansion constraints.
    pub window: usize,
    pub iterations: usize,
    /// Radius of the polynomial neighbourhood.
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { pyramid_scale: 0.5, levels: 3, window: 15, iterations: 3, poly_n: 5, poly_sigma: 1.2 }
    }
}

fn scaled(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::FlowParams(format!("pyramid_scale {} outside (0,1)", self.pyramid_scale)));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::FlowParams(format!("window {} must be odd", self.window)));
        }
        if self.levels == 0 || self.iterations == 0 || self.poly_n == 0 || !(self.poly_sigma > 0.0) {
            return Err(Error::FlowParams("levels, iterations, poly_n and poly_sigma must be positive".into()));
        }
        Ok(())
    }

    /// Size of the coarsest pyramid level for `height × width` frames.
    pub fn coarsest(&self, height: usize, width: usize) -> (usize, usize) {
        let s = self.pyramid_scale.powi(self.levels as i32 - 1);
        (scaled(height, s), scaled(width, s))
    }

    /// Drops pyramid levels, then shrinks the window, until the coarsest
    /// level holds a full window.
    pub fn fitted_to(&self, height: usize, width: usize) -> FlowParams {
        let mut p = *self;
        while p.levels > 1 {
            let (h, w) = p.coarsest(height, width);
            if h.min(w) >= p.window {
                break;
            }
            p.levels -= 1;
        }
        let side = height.min(width);
        if p.window > side {
            p.window = if side % 2 == 1 { side } else { side.saturating_sub(1).max(1) };
        }
        p
    }
}

/// Per-pixel displacement `(dx, dy)` in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    fn zeros(height: usize, width: usize) -> Self {
        FlowField { height, width, data: vec![[0.0; 2]; height * width] }
    }

    pub fn at(&self, y: usize, x: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    /// Mean flow over pixels at least `margin` away from every border.
    pub fn interior_mean(&self, margin: usize) -> [f64; 2] {
        let mut acc = [0.0; 2];
        let mut n = 0;
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                let v = self.at(y, x);
                acc[0] += v[0];
                acc[1] += v[1];
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        [acc[0] / n, acc[1] / n]
    }
}

fn clamp_idx(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn separable(img: &Gray, kernel: &[f64]) -> Gray {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * img.data[y * w + clamp_idx(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * tmp[clamp_idx(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    Gray { height: h, width: w, data: out }
}

/// Bilinear sample with pixel-centre alignment and clamped borders.
fn resize_channel(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let (fy, fx) = (sh as f64 / dh as f64, sw as f64 / dw as f64);
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let sy = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = sy - y0 as f64;
        for x in 0..dw {
            let sx = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = sx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Solves a small dense system by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).expect("nonempty");
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Quadratic coefficients `[r1..r6]` of
/// `f(x+u, y+v) ≈ r1 + r2·u + r3·v + r4·u² + r5·v² + r6·u·v` at every pixel.
struct Expansion {
    height: usize,
    width: usize,
    coeffs: Vec<[f64; 6]>,
}

fn expansion_filters(n: usize, sigma: f64) -> (Vec<(isize, isize)>, Vec<[f64; 6]>) {
    let r = n as isize;
    let mut offsets = Vec::new();
    let mut weighted_basis = Vec::new();
    let mut gram = vec![vec![0.0; 6]; 6];
    for v in -r..=r {
        for u in -r..=r {
            let (uf, vf) = (u as f64, v as f64);
            let g = (-(uf * uf + vf * vf) / (2.0 * sigma * sigma)).exp();
            let phi = [1.0, uf, vf, uf * uf, vf * vf, uf * vf];
            for i in 0..6 {
                for j in 0..6 {
                    gram[i][j] += g * phi[i] * phi[j];
                }
            }
            offsets.push((u, v));
            weighted_basis.push(phi.map(|p| g * p));
        }
    }
    // filter_i(d) = (G⁻¹ · g(d)·φ(d))_i
    let mut inv_cols = Vec::with_capacity(6);
    for i in 0..6 {
        let mut e = vec![0.0; 6];
        e[i] = 1.0;
        inv_cols.push(solve(gram.clone(), e));
    }
    let filters = weighted_basis
        .iter()
        .map(|wb| {
            let mut f = [0.0; 6];
            for (i, fi) in f.iter_mut().enumerate() {
                *fi = (0..6).map(|j| inv_cols[j][i] * wb[j]).sum();
            }
            f
        })
        .collect();
    (offsets, filters)
}

fn poly_expand(img: &Gray, filters: &(Vec<(isize, isize)>, Vec<[f64; 6]>)) -> Expansion {
    let (h, w) = (img.height, img.width);
    let mut coeffs = vec![[0.0; 6]; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = &mut coeffs[y * w + x];
            for ((u, v), f) in filters.0.iter().zip(&filters.1) {
                let p = img.data[clamp_idx(y as isize + v, h) * w + clamp_idx(x as isize + u, w)];
                for i in 0..6 {
                    c[i] += f[i] * p;
                }
            }
        }
    }
    Expansion { height: h, width: w, coeffs }
}

const BORDER: usize = 5;
const BORDER_WEIGHT: [f64; BORDER] = [0.14, 0.14, 0.4472, 0.4472, 0.4472];

fn border_scale(i: usize, len: usize) -> f64 {
    let mut s = 1.0;
    if i < BORDER {
        s *= BORDER_WEIGHT[i];
    }
    if i + BORDER >= len {
        s *= BORDER_WEIGHT[len - i - 1];
    }
    s
}

/// Per-pixel normal equations `[g11, g12, g22, h1, h2]` for the current flow.
fn update_matrices(r0: &Expansion, r1: &Expansion, flow: &FlowField) -> Vec<[f64; 5]> {
    let (h, w) = (r0.height, r0.width);
    let mut m = vec![[0.0; 5]; h * w];
    for y in 0..h {
        for x in 0..w {
            let [dx, dy] = flow.at(y, x);
            let (fx, fy) = (x as f64 + dx, y as f64 + dy);
            let mut c1 = [0.0; 6];
            // the last row and column count as inside so that a zero flow
            // always compares a pixel with itself
            if fx >= 0.0 && fy >= 0.0 && fx <= (w - 1) as f64 && fy <= (h - 1) as f64 {
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                let at = |yy: usize, xx: usize| &r1.coeffs[yy * w + xx];
                for (i, ci) in c1.iter_mut().enumerate() {
                    *ci = (1.0 - ty) * ((1.0 - tx) * at(y0, x0)[i] + tx * at(y0, x1)[i])
                        + ty * ((1.0 - tx) * at(y1, x0)[i] + tx * at(y1, x1)[i]);
                }
            }
            let c0 = &r0.coeffs[y * w + x];
            let s = border_scale(x, w) * border_scale(y, h);
            let a11 = s * (c0[3] + c1[3]) * 0.5;
            let a22 = s * (c0[4] + c1[4]) * 0.5;
            let a12 = s * (c0[5] + c1[5]) * 0.25;
            let b1 = s * (c0[1] - c1[1]) * 0.5 + a11 * dx + a12 * dy;
            let b2 = s * (c0[2] - c1[2]) * 0.5 + a12 * dx + a22 * dy;
            m[y * w + x] = [
                a11 * a11 + a12 * a12,
                a12 * (a11 + a22),
                a12 * a12 + a22 * a22,
                a11 * b1 + a12 * b2,
                a12 * b1 + a22 * b2,
            ];
        }
    }
    m
}

/// Pools the normal equations over the window and solves for the flow.
fn update_flow(m: &[[f64; 5]], h: usize, w: usize, window: usize) -> FlowField {
    let r = (window / 2) as isize;
    let mut rows = vec![[0.0; 5]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 5];
            for k in -r..=r {
                let v = &m[y * w + clamp_idx(x as isize + k, w)];
                for i in 0..5 {
                    acc[i] += v[i];
                }
            }
            rows[y * w + x] = acc;
        }
    }
    let mut flow = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 5];
            for k in -r..=r {
                let v = &rows[clamp_idx(y as isize + k, h) * w + x];
                for i in 0..5 {
                    acc[i] += v[i];
                }
            }
            let [g11, g12, g22, h1, h2] = acc;
            let idet = 1.0 / (g11 * g22 - g12 * g12 + 1e-3);
            flow.data[y * w + x] = [(g22 * h1 - g12 * h2) * idet, (g11 * h2 - g12 * h1) * idet];
        }
    }
    flow
}

fn pyramid_level(img: &Gray, scale: f64) -> Gray {
    if scale == 1.0 {
        return img.clone();
    }
    let sigma = (1.0 / scale - 1.0) * 0.5;
    let size = (((sigma * 5.0).round() as usize) | 1).max(3);
    let blurred = separable(img, &gaussian_kernel(sigma, size / 2));
    let (h, w) = (scaled(img.height, scale), scaled(img.width, scale));
    Gray { height: h, width: w, data: resize_channel(&blurred.data, img.height, img.width, h, w) }
}

/// Flow from `prev` to `next`: `next(x + d) ≈ prev(x)`.
pub fn farneback_flow(prev: &Gray, next: &Gray, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if prev.height != next.height || prev.width != next.width {
        return Err(Error::Dimension(format!(
            "frames {}x{} and {}x{} differ",
            prev.height, prev.width, next.height, next.width
        )));
    }
    let (ch, cw) = params.coarsest(prev.height, prev.width);
    if ch.min(cw) < params.window {
        return Err(Error::FlowParams(format!(
            "coarsest level {ch}x{cw} is smaller than the {} window",
            params.window
        )));
    }
    // expansion constants assume an 8-bit intensity range
    let to_255 = |g: &Gray| Gray { data: g.data.iter().map(|v| v * 255.0).collect(), ..g.clone() };
    let (p255, n255) = (to_255(prev), to_255(next));
    let filters = expansion_filters(params.poly_n, params.poly_sigma);
    let mut flow: Option<FlowField> = None;
    for k in (0..params.levels).rev() {
        let scale = params.pyramid_scale.powi(k as i32);
        let (a, b) = (pyramid_level(&p255, scale), pyramid_level(&n255, scale));
        let (h, w) = (a.height, a.width);
        let mut current = match flow.take() {
            None => FlowField::zeros(h, w),
            Some(f) => {
                let up = 1.0 / params.pyramid_scale;
                let dx: Vec<f64> = f.data.iter().map(|v| v[0]).collect();
                let dy: Vec<f64> = f.data.iter().map(|v| v[1]).collect();
                let dx = resize_channel(&dx, f.height, f.width, h, w);
                let dy = resize_channel(&dy, f.height, f.width, h, w);
                FlowField { height: h, width: w, data: dx.iter().zip(&dy).map(|(x, y)| [x * up, y * up]).collect() }
            }
        };
        let (r0, r1) = (poly_expand(&a, &filters), poly_expand(&b, &filters));
        for _ in 0..params.iterations {
            let m = update_matrices(&r0, &r1, &current);
            current = update_flow(&m, h, w, params.window);
        }
        flow = Some(current);
    }
    let flow = flow.expect("at least one level");
    if flow.data.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::NonFinite("farneback_flow"));
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitting_drops_levels_before_shrinking_the_window() {
        let p = FlowParams::default();
        assert_eq!(p.fitted_to(64, 64), p);
        let q = p.fitted_to(32, 32);
        assert_eq!((q.levels, q.window), (2, 15));
        let r = p.fitted_to(12, 12);
        assert_eq!((r.levels, r.window), (1, 11));
    }

    #[test]
    fn params_are_validated() {
        assert!(FlowParams { window: 4, ..FlowParams::default() }.validate().is_err());
        assert!(FlowParams { pyramid_scale: 1.0, ..FlowParams::default() }.validate().is_err());
        let g = Gray { height: 16, width: 16, data: vec![0.0; 256] };
        assert!(matches!(farneback_flow(&g, &g, &FlowParams::default()), Err(Error::FlowParams(_))));
    }

    #[test]
    fn expansion_recovers_an_exact_quadratic() {
        let (h, w) = (21, 21);
        let f = |x: f64, y: f64| 0.3 + 0.2 * x - 0.1 * y + 0.05 * x * x + 0.02 * y * y - 0.03 * x * y;
        let img = Gray { height: h, width: w, data: (0..h * w).map(|i| f((i % w) as f64, (i / w) as f64)).collect() };
        let e = poly_expand(&img, &expansion_filters(5, 1.2));
        let (x, y) = (10.0, 10.0);
        let c = e.coeffs[10 * w + 10];
        let expect = [f(x, y), 0.2 + 0.1 * x - 0.03 * y, -0.1 + 0.04 * y - 0.03 * x, 0.05, 0.02, -0.03];
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{c:?} vs {expect:?}");
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let out = resize_channel(&vec![2.5; 35], 5, 7, 3, 4);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
