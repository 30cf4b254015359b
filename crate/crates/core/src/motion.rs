//! Dense two-frame optical flow by polynomial expansion, and motion
//! phase/magnitude statistics over a set of flow fields.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::Rgb8Image;
use crate::plane::{reflect, Plane};

/// Regulariser added to the 2x2 normal-equation determinant. Matches the
/// reference implementation, which works on 0..255 intensities.
const DET_EPS: f64 = 1e-3;
const INTENSITY_SCALE: f32 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Total pyramid levels, including full resolution.
    pub levels: usize,
    pub scale: f64,
    pub window: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            scale: 0.5,
            window: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.iterations == 0 || self.poly_n == 0 || self.window == 0 {
            return Err(Error::Parameter("levels, iterations, poly_n and window must be positive".into()));
        }
        if !(self.scale > 0.0 && self.scale < 1.0) {
            return Err(Error::Parameter(format!("pyramid scale must be in (0, 1), got {}", self.scale)));
        }
        if !(self.poly_sigma > 0.0) {
            return Err(Error::Parameter("poly_sigma must be positive".into()));
        }
        Ok(())
    }

    fn level_size(&self, width: usize, height: usize, k: usize) -> (usize, usize) {
        let s = self.scale.powi(k as i32);
        (
            (width as f64 * s).round() as usize,
            (height as f64 * s).round() as usize,
        )
    }

    /// Drops pyramid levels until the coarsest one is large enough for the
    /// polynomial expansion on `width x height` frames.
    pub fn fitted_to(&self, width: usize, height: usize) -> FlowConfig {
        let min_side = 2 * self.poly_n + 1;
        let mut cfg = *self;
        while cfg.levels > 1 {
            let (w, h) = cfg.level_size(width, height, cfg.levels - 1);
            if w >= min_side && h >= min_side {
                break;
            }
            cfg.levels -= 1;
        }
        cfg
    }
}

/// Per-pixel displacement from the first frame to the second, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&u, &v)| (u as f64).hypot(v as f64))
    }

    /// Planar little-endian dump: all `u` values then all `v` values.
    pub fn to_planar_bytes(&self) -> Vec<u8> {
        self.u
            .iter()
            .chain(&self.v)
            .flat_map(|x| x.to_le_bytes())
            .collect()
    }

    fn crop_to(&self, x0: usize, y0: usize, w: usize, h: usize) -> (Vec<f32>, Vec<f32>) {
        let mut u = Vec::with_capacity(w * h);
        let mut v = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let s = y * self.width + x0;
            u.extend_from_slice(&self.u[s..s + w]);
            v.extend_from_slice(&self.v[s..s + w]);
        }
        (u, v)
    }

    /// Median of each component over the region `margin` pixels from the border.
    pub fn interior_median(&self, margin: usize) -> (f32, f32) {
        let w = self.width.saturating_sub(2 * margin).max(1);
        let h = self.height.saturating_sub(2 * margin).max(1);
        let m = margin.min(self.width - 1).min(self.height - 1);
        let (mut u, mut v) = self.crop_to(m, m, w.min(self.width - m), h.min(self.height - m));
        (median(&mut u), median(&mut v))
    }
}

pub fn median(values: &mut [f32]) -> f32 {
    if values.is_empty() {
        return f32::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Rec. 709 luma of an 8-bit frame, in `[0, 1]`.
pub fn to_gray(img: &Rgb8Image) -> Plane {
    img.luma()
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation with reflect borders.
fn separable(src: &[f32], w: usize, h: usize, kx: &[f64], ky: &[f64]) -> Vec<f32> {
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let mut tmp = vec![0f32; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let line = &src[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, k) in kx.iter().enumerate() {
                acc += k * line[reflect(x as isize + i as isize - rx, w)] as f64;
            }
            *out = acc as f32;
        }
    });
    let mut dst = vec![0f32; w * h];
    dst.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, k) in ky.iter().enumerate() {
                acc += k * tmp[reflect(y as isize + i as isize - ry, h) * w + x] as f64;
            }
            *out = acc as f32;
        }
    });
    dst
}

fn gaussian_blur(src: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    // kernel size rule of the reference implementation: round(5 sigma), odd
    let radius = ((sigma * 5.0).round() as usize | 1) / 2;
    if radius == 0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma, radius);
    separable(src, w, h, &k, &k)
}

fn box_blur(src: &[f32], w: usize, h: usize, size: usize) -> Vec<f32> {
    let k = vec![1.0 / size as f64; size | 1];
    separable(src, w, h, &k, &k)
}

/// Bilinear sample with clamped coordinates.
#[inline]
fn sample(src: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize with pixel-centre alignment.
fn resize(src: &[f32], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f32> {
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let mut out = vec![0f32; nw * nh];
    out.par_chunks_mut(nw).enumerate().for_each(|(y, row)| {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for (x, o) in row.iter_mut().enumerate() {
            *o = sample(src, w, h, (x as f64 + 0.5) * sx - 0.5, fy);
        }
    });
    out
}

/// Quadratic fit `f(x) ~ x^T A x + b^T x + c` around every pixel.
struct PolyExpansion {
    /// a11 (xx), a22 (yy), a12 (xy, full off-diagonal), b1 (x), b2 (y)
    a11: Vec<f32>,
    a22: Vec<f32>,
    a12: Vec<f32>,
    b1: Vec<f32>,
    b2: Vec<f32>,
}

fn invert6(m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut a = m;
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let p = (col..6)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, p);
        inv.swap(col, p);
        let d = a[col][col];
        for j in 0..6 {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for r in 0..6 {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for j in 0..6 {
                        a[r][j] -= f * a[col][j];
                        inv[r][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    inv
}

fn poly_expand(img: &[f32], w: usize, h: usize, n: usize, sigma: f64) -> PolyExpansion {
    let g = gaussian_kernel(sigma, n);
    let xs: Vec<f64> = (-(n as isize)..=n as isize).map(|i| i as f64).collect();
    let gx: Vec<f64> = g.iter().zip(&xs).map(|(g, x)| g * x).collect();
    let gxx: Vec<f64> = g.iter().zip(&xs).map(|(g, x)| g * x * x).collect();

    // weighted moments for basis {1, x, y, x^2, y^2, xy}
    let pows = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)];
    let kernel = |p: usize| match p {
        0 => &g,
        1 => &gx,
        _ => &gxx,
    };
    let moments: Vec<Vec<f32>> = pows
        .iter()
        .map(|&(px, py)| separable(img, w, h, kernel(px), kernel(py)))
        .collect();

    let m1 = |p: usize| -> f64 { g.iter().zip(&xs).map(|(g, x)| g * x.powi(p as i32)).sum() };
    let mut gram = [[0.0; 6]; 6];
    for (i, &(ax, ay)) in pows.iter().enumerate() {
        for (j, &(bx, by)) in pows.iter().enumerate() {
            gram[i][j] = m1(ax + bx) * m1(ay + by);
        }
    }
    let ig = invert6(gram);

    let len = w * h;
    let mut out = PolyExpansion {
        a11: vec![0.0; len],
        a22: vec![0.0; len],
        a12: vec![0.0; len],
        b1: vec![0.0; len],
        b2: vec![0.0; len],
    };
    let coef = |k: usize, i: usize| -> f32 {
        (0..6).map(|j| ig[k][j] * moments[j][i] as f64).sum::<f64>() as f32
    };
    for i in 0..len {
        out.b1[i] = coef(1, i);
        out.b2[i] = coef(2, i);
        out.a11[i] = coef(3, i);
        out.a22[i] = coef(4, i);
        out.a12[i] = coef(5, i);
    }
    out
}

/// One displacement update given the current estimate (in place).
fn update_flow(
    p0: &PolyExpansion,
    p1: &PolyExpansion,
    w: usize,
    h: usize,
    window: usize,
    u: &mut [f32],
    v: &mut [f32],
) {
    let len = w * h;
    let mut g11 = vec![0f32; len];
    let mut g12 = vec![0f32; len];
    let mut g22 = vec![0f32; len];
    let mut h1 = vec![0f32; len];
    let mut h2 = vec![0f32; len];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (du, dv) = (u[i] as f64, v[i] as f64);
            let (sx, sy) = (x as f64 + du, y as f64 + dv);
            let s = |f: &[f32]| sample(f, w, h, sx, sy) as f64;
            let a11 = 0.5 * (p0.a11[i] as f64 + s(&p1.a11));
            let a22 = 0.5 * (p0.a22[i] as f64 + s(&p1.a22));
            // symmetric off-diagonal of A is half the xy coefficient
            let a12 = 0.25 * (p0.a12[i] as f64 + s(&p1.a12));
            let db1 = -0.5 * (s(&p1.b1) - p0.b1[i] as f64) + a11 * du + a12 * dv;
            let db2 = -0.5 * (s(&p1.b2) - p0.b2[i] as f64) + a12 * du + a22 * dv;
            g11[i] = (a11 * a11 + a12 * a12) as f32;
            g12[i] = (a12 * (a11 + a22)) as f32;
            g22[i] = (a12 * a12 + a22 * a22) as f32;
            h1[i] = (a11 * db1 + a12 * db2) as f32;
            h2[i] = (a12 * db1 + a22 * db2) as f32;
        }
    }
    let [g11, g12, g22, h1, h2] = [g11, g12, g22, h1, h2].map(|f| box_blur(&f, w, h, window));
    for i in 0..len {
        let (a, b, c) = (g11[i] as f64, g12[i] as f64, g22[i] as f64);
        let idet = 1.0 / (a * c - b * b + DET_EPS);
        u[i] = ((c * h1[i] as f64 - b * h2[i] as f64) * idet) as f32;
        v[i] = ((a * h2[i] as f64 - b * h1[i] as f64) * idet) as f32;
    }
}

/// Coarse-to-fine dense flow between two grayscale frames of equal size.
pub fn dense_flow(f0: &Plane, f1: &Plane, cfg: &FlowConfig) -> Result<FlowField> {
    cfg.validate()?;
    f0.ensure_same_shape(f1)?;
    let min_side = 2 * cfg.poly_n + 1;
    let (cw, ch) = cfg.level_size(f0.width, f0.height, cfg.levels - 1);
    if cw < min_side || ch < min_side {
        return Err(Error::Shape(format!(
            "{}x{} frames are too small for {} pyramid levels (coarsest {cw}x{ch}, need {min_side})",
            f0.width, f0.height, cfg.levels
        )));
    }
    let prep = |p: &Plane| -> Vec<f32> { p.data.iter().map(|v| v * INTENSITY_SCALE).collect() };
    let (i0, i1) = (prep(f0), prep(f1));
    let (w, h) = (f0.width, f0.height);

    let mut flow: Option<(usize, usize, Vec<f32>, Vec<f32>)> = None;
    for k in (0..cfg.levels).rev() {
        let (lw, lh) = cfg.level_size(w, h, k);
        let (l0, l1) = if k == 0 {
            (i0.clone(), i1.clone())
        } else {
            let sigma = (1.0 / cfg.scale.powi(k as i32) - 1.0) * 0.5;
            (
                resize(&gaussian_blur(&i0, w, h, sigma), w, h, lw, lh),
                resize(&gaussian_blur(&i1, w, h, sigma), w, h, lw, lh),
            )
        };
        let (mut u, mut v) = match flow.take() {
            None => (vec![0f32; lw * lh], vec![0f32; lw * lh]),
            Some((pw, ph, pu, pv)) => {
                let up = (1.0 / cfg.scale) as f32;
                (
                    resize(&pu, pw, ph, lw, lh).into_iter().map(|x| x * up).collect(),
                    resize(&pv, pw, ph, lw, lh).into_iter().map(|x| x * up).collect(),
                )
            }
        };
        let p0 = poly_expand(&l0, lw, lh, cfg.poly_n, cfg.poly_sigma);
        let p1 = poly_expand(&l1, lw, lh, cfg.poly_n, cfg.poly_sigma);
        for _ in 0..cfg.iterations {
            update_flow(&p0, &p1, lw, lh, cfg.window, &mut u, &mut v);
        }
        flow = Some((lw, lh, u, v));
    }
    let (_, _, u, v) = flow.expect("at least one level");
    if u.iter().chain(&v).any(|x| !x.is_finite()) {
        return Err(Error::DegenerateImage("flow produced non-finite values".into()));
    }
    Ok(FlowField { width: w, height: h, u, v })
}

/// Flow between each pair of consecutive frames, computed in parallel.
pub fn sequence_flow(frames: &[Plane], cfg: &FlowConfig) -> Result<Vec<FlowField>> {
    if frames.len() < 2 {
        return Err(Error::Parameter("need at least two frames for flow".into()));
    }
    frames
        .par_windows(2)
        .map(|p| dense_flow(&p[0], &p[1], cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramConfig {
    pub magnitude_bins: usize,
    pub magnitude_max: f64,
    pub phase_bins: usize,
    /// Pixels moving less than this many pixels have no phase.
    pub phase_threshold: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            magnitude_bins: 64,
            magnitude_max: 32.0,
            phase_bins: 72,
            phase_threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionHistogram {
    pub config: HistogramConfig,
    /// `magnitude_bins` regular bins followed by one overflow bin.
    pub magnitude: Vec<u64>,
    pub phase: Vec<u64>,
}

impl MotionHistogram {
    pub fn new(config: HistogramConfig) -> Self {
        Self {
            magnitude: vec![0; config.magnitude_bins + 1],
            phase: vec![0; config.phase_bins],
            config,
        }
    }

    pub fn magnitude_bin(&self, m: f64) -> usize {
        let c = &self.config;
        if m >= c.magnitude_max {
            return c.magnitude_bins;
        }
        ((m.max(0.0) / c.magnitude_max * c.magnitude_bins as f64) as usize).min(c.magnitude_bins - 1)
    }

    pub fn phase_bin(&self, phi: f64) -> usize {
        let n = self.config.phase_bins;
        // tolerance keeps exact bin edges such as pi/2 from rounding down
        let t = (phi + PI) / TAU * n as f64 + 1e-9;
        (t.floor().max(0.0) as usize).min(n - 1)
    }

    pub fn add_flow(&mut self, f: &FlowField) {
        for (&u, &v) in f.u.iter().zip(&f.v) {
            let m = (u as f64).hypot(v as f64);
            let b = self.magnitude_bin(m);
            self.magnitude[b] += 1;
            if m >= self.config.phase_threshold {
                let b = self.phase_bin((v as f64).atan2(u as f64));
                self.phase[b] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &MotionHistogram) -> Result<()> {
        if self.config != other.config {
            return Err(Error::BinningMismatch);
        }
        for (a, b) in self.magnitude.iter_mut().zip(&other.magnitude) {
            *a += b;
        }
        for (a, b) in self.phase.iter_mut().zip(&other.phase) {
            *a += b;
        }
        Ok(())
    }

    pub fn magnitude_total(&self) -> u64 {
        self.magnitude.iter().sum()
    }

    pub fn phase_total(&self) -> u64 {
        self.phase.iter().sum()
    }

    /// Tab-separated table with the binning in `#` header lines.
    pub fn to_table(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "# magnitude: {} bins over [0, {}) px plus overflow\n# phase: {} bins over [-pi, pi], magnitude >= {} px\n",
            c.magnitude_bins, c.magnitude_max, c.phase_bins, c.phase_threshold
        );
        s.push_str("kind\tlo\thi\tcount\n");
        let mw = c.magnitude_max / c.magnitude_bins as f64;
        for (i, n) in self.magnitude.iter().enumerate() {
            let (lo, hi) = if i == c.magnitude_bins {
                (c.magnitude_max, f64::INFINITY)
            } else {
                (i as f64 * mw, (i + 1) as f64 * mw)
            };
            s.push_str(&format!("magnitude\t{lo:.4}\t{hi:.4}\t{n}\n"));
        }
        let pw = TAU / c.phase_bins as f64;
        for (i, n) in self.phase.iter().enumerate() {
            let lo = -PI + i as f64 * pw;
            s.push_str(&format!("phase\t{lo:.4}\t{:.4}\t{n}\n", lo + pw));
        }
        s
    }
}

pub fn motion_histograms(flows: &[FlowField], cfg: HistogramConfig) -> MotionHistogram {
    flows
        .par_iter()
        .map(|f| {
            let mut h = MotionHistogram::new(cfg);
            h.add_flow(f);
            h
        })
        .reduce(
            || MotionHistogram::new(cfg),
            |mut a, b| {
                a.merge(&b).expect("same configuration");
                a
            },
        )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_levels_shrink_for_small_frames() {
        let cfg = FlowConfig::default();
        assert_eq!(cfg.fitted_to(256, 256).levels, cfg.levels);
        assert_eq!(cfg.fitted_to(64, 64).levels, 3);
        assert_eq!(cfg.fitted_to(8, 8).levels, 1);
    }

    #[test]
    fn zero_flow_histogram() {
        let h = motion_histograms(&[FlowField::zeros(8, 8)], HistogramConfig::default());
        assert_eq!(h.magnitude[0], 64);
        assert_eq!(h.magnitude_total(), 64);
        assert_eq!(h.phase_total(), 0);
    }

    #[test]
    fn uniform_flow_histogram() {
        let h = motion_histograms(&[FlowField::uniform(4, 4, 3.0, 0.0)], HistogramConfig::default());
        assert_eq!(h.magnitude[6], 16);
        assert_eq!(h.phase[36], 16);
        assert_eq!(h.phase_total(), 16);
    }

    #[test]
    fn split_phase() {
        let flows = [FlowField::uniform(4, 4, 1.0, 0.0), FlowField::uniform(4, 4, 0.0, 1.0)];
        let h = motion_histograms(&flows, HistogramConfig::default());
        assert_eq!(h.phase[36], 16);
        assert_eq!(h.phase[54], 16);
    }

    #[test]
    fn overflow_and_extremes() {
        let h = MotionHistogram::new(HistogramConfig::default());
        assert_eq!(h.magnitude_bin(100.0), 64);
        assert_eq!(h.magnitude_bin(31.999), 63);
        assert_eq!(h.phase_bin(PI), 71);
        assert_eq!(h.phase_bin(-PI), 0);
    }

    #[test]
    fn tiny_frames_are_rejected() {
        let p = Plane::filled(32, 32, 0.5);
        assert!(matches!(dense_flow(&p, &p, &FlowConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn six_by_six_inverse() {
        let mut m = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                m[i][j] = if i == j { 4.0 } else { 1.0 / (1.0 + (i + j) as f64) };
            }
        }
        let inv = invert6(m);
        for i in 0..6 {
            for j in 0..6 {
                let s: f64 = (0..6).map(|k| m[i][k] * inv[k][j]).sum();
                assert!((s - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expansion_recovers_quadratic() {
        let (w, h) = (32, 32);
        let img: Vec<f32> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f32, (i / w) as f32);
                0.1 * x * x + 0.05 * y * y + 0.02 * x * y + 0.3 * x - 0.2 * y + 1.0
            })
            .collect();
        let p = poly_expand(&img, w, h, 5, 1.1);
        let i = 16 * w + 16;
        assert!((p.a11[i] - 0.1).abs() < 1e-3, "{}", p.a11[i]);
        assert!((p.a22[i] - 0.05).abs() < 1e-3);
        assert!((p.a12[i] - 0.02).abs() < 1e-3);
        // linear term is the gradient at the centre pixel
        assert!((p.b1[i] - (0.2 * 16.0 + 0.02 * 16.0 + 0.3)).abs() < 1e-2);
        assert!((p.b2[i] - (0.1 * 16.0 + 0.02 * 16.0 - 0.2)).abs() < 1e-2);
    }
}
