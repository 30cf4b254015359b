//! Fidelity and realism measures: PSNR, SSIM, SNR, temporal averaging and
//! histogram KL divergence.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::plane::Plane;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Floor applied to empty bins of the reference histogram.
pub const KL_EPSILON: f64 = 1e-10;
pub const RESIDUAL_BINS: usize = 256;

fn check_pair(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} samples vs {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty input".into()));
    }
    Ok(())
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(peak > 0.0) {
        return Err(Error::Parameter(format!("peak must be positive, got {peak}")));
    }
    let e = mse(a, b);
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Signal power over residual power, in dB. Zero residual gives `f64::INFINITY`.
pub fn snr(signal: &[f32], noisy: &[f32]) -> Result<f64> {
    check_pair(signal, noisy)?;
    let power = signal.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / signal.len() as f64;
    let e = mse(noisy, signal);
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (power / e).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of a row-major f64 image.
fn filter_valid(src: &[f64], width: usize, height: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = width - n + 1;
    let oh = height - n + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let line = &src[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5, K1 = 0.01,
/// K2 = 0.03, dynamic range 1).
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let k = gaussian_window();
    let (w, h) = (a.width, a.height);
    let fa: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = fa.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = fb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&fa, w, h, &k);
    let mu_b = filter_valid(&fb, w, h, &k);
    let e_aa = filter_valid(&aa, w, h, &k);
    let e_bb = filter_valid(&bb, w, h, &k);
    let e_ab = filter_valid(&ab, w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / mu_a.len() as f64)
}

/// SSIM of interleaved 8-bit RGB images, averaged over the three channels.
pub fn ssim_rgb8(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64> {
    check_pair_u8(a, b, width, height)?;
    let mut total = 0.0;
    for c in 0..3 {
        let pa = channel_plane(a, width, height, c);
        let pb = channel_plane(b, width, height, c);
        total += ssim(&pa, &pb)?;
    }
    Ok(total / 3.0)
}

fn check_pair_u8(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<()> {
    if a.len() != width * height * 3 || b.len() != a.len() {
        return Err(Error::Shape("RGB buffers do not match the stated size".into()));
    }
    Ok(())
}

pub(crate) fn channel_plane(rgb: &[u8], width: usize, height: usize, c: usize) -> Plane {
    Plane {
        width,
        height,
        data: rgb.chunks_exact(3).map(|p| p[c] as f32 / 255.0).collect(),
    }
}

/// Per-pixel mean of the first `n` frames.
pub fn temporal_average(frames: &[Plane], n: usize) -> Result<Plane> {
    if n == 0 {
        return Err(Error::Parameter("cannot average zero frames".into()));
    }
    if n > frames.len() {
        return Err(Error::Parameter(format!(
            "asked for {n} frames, only {} available",
            frames.len()
        )));
    }
    let first = &frames[0];
    let mut acc = vec![0.0f64; first.len()];
    for f in &frames[..n] {
        first.ensure_same_shape(f)?;
        for (a, &v) in acc.iter_mut().zip(&f.data) {
            *a += v as f64;
        }
    }
    let data = acc.into_iter().map(|s| (s / n as f64) as f32).collect();
    Plane::new(first.width, first.height, data)
}

/// Fixed-range histogram; values outside the range land in the end bins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<f64>,
    pub total: f64,
}

impl Histogram {
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Parameter(format!(
                "histogram needs bins > 0 and hi > lo (got {bins} bins over [{lo}, {hi}])"
            )));
        }
        let step = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| lo + step * i as f64).collect();
        edges[bins] = hi;
        Ok(Self {
            edges,
            counts: vec![0.0; bins],
            total: 0.0,
        })
    }

    /// Residual histogram over `[-1, 1]` with the default bin count.
    pub fn residual() -> Self {
        Self::uniform(-1.0, 1.0, RESIDUAL_BINS).expect("static binning is valid")
    }

    /// Histogram with the same binning as `template` and the given masses.
    pub fn from_masses(template: &Histogram, masses: &[f64]) -> Result<Self> {
        if masses.len() != template.bins() || masses.iter().any(|m| *m < 0.0) {
            return Err(Error::BinningMismatch);
        }
        Ok(Self {
            edges: template.edges.clone(),
            counts: masses.to_vec(),
            total: masses.iter().sum(),
        })
    }

    pub fn empty_like(&self) -> Self {
        Self {
            edges: self.edges.clone(),
            counts: vec![0.0; self.bins()],
            total: 0.0,
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_range(&self, b: usize) -> (f64, f64) {
        (self.edges[b], self.edges[b + 1])
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let lo = self.edges[0];
        let hi = self.edges[self.bins()];
        let t = (v - lo) / (hi - lo) * self.bins() as f64;
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(self.bins() - 1)
        }
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin_of(v);
        self.counts[b] += 1.0;
        self.total += 1.0;
    }

    pub fn add_all(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.add(v);
        }
    }

    pub fn normalized(&self) -> Vec<f64> {
        if self.total <= 0.0 {
            return vec![0.0; self.bins()];
        }
        self.counts.iter().map(|c| c / self.total).collect()
    }
}

/// `sum p ln(p / q)` in nats over normalised histograms; empty bins of `q`
/// are floored at [`KL_EPSILON`] and bins with `p = 0` contribute nothing.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::BinningMismatch);
    }
    let (pn, qn) = (p.normalized(), q.normalized());
    Ok(pn
        .iter()
        .zip(&qn)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_EPSILON)).ln())
        .sum())
}

/// How residual distributions are compared across a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// One histogram of all residual values per stream.
    #[default]
    Pooled,
    /// One histogram per pixel across frames, KL averaged over pixels.
    PerPixel,
}

pub fn residual_histogram<'a>(residuals: impl IntoIterator<Item = &'a Plane>, template: &Histogram) -> Histogram {
    let mut h = template.empty_like();
    for r in residuals {
        h.add_all(r.data.iter().map(|&v| v as f64));
    }
    h
}

/// KL divergence between two residual streams (e.g. synthetic vs captured).
pub fn residual_kl(p: &[Plane], q: &[Plane], mode: KlMode, template: &Histogram) -> Result<f64> {
    if p.is_empty() || p.len() != q.len() {
        return Err(Error::Shape(format!(
            "residual streams of {} and {} frames",
            p.len(),
            q.len()
        )));
    }
    for f in p.iter().chain(q) {
        p[0].ensure_same_shape(f)?;
    }
    match mode {
        KlMode::Pooled => kl_divergence(
            &residual_histogram(p, template),
            &residual_histogram(q, template),
        ),
        KlMode::PerPixel => {
            let mut sum = 0.0;
            let (mut hp, mut hq) = (template.empty_like(), template.empty_like());
            for i in 0..p[0].len() {
                hp.counts.iter_mut().for_each(|c| *c = 0.0);
                hq.counts.iter_mut().for_each(|c| *c = 0.0);
                hp.total = 0.0;
                hq.total = 0.0;
                for (a, b) in p.iter().zip(q) {
                    hp.add(a.data[i] as f64);
                    hq.add(b.data[i] as f64);
                }
                sum += kl_divergence(&hp, &hq)?;
            }
            Ok(sum / p[0].len() as f64)
        }
    }
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn ser_opt_db<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => ser_db(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "ser_db")]
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub frames: usize,
    /// Mean over finite per-frame PSNR values; `None` when all were infinite.
    #[serde(serialize_with = "ser_opt_db")]
    pub psnr: Option<f64>,
    pub ssim: f64,
    #[serde(serialize_with = "ser_opt_db")]
    pub snr: Option<f64>,
    pub psnr_infinite_frames: usize,
    pub snr_infinite_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    pub summary: MetricSummary,
}

/// Mean of the finite values and the number of infinite values skipped.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            skipped += 1;
        }
    }
    ((n > 0).then(|| sum / n as f64), skipped)
}

impl MetricReport {
    pub fn from_frames(per_frame: Vec<FrameMetrics>) -> Self {
        let (psnr, psnr_inf) = finite_mean(per_frame.iter().map(|f| f.psnr));
        let (snr, snr_inf) = finite_mean(per_frame.iter().map(|f| f.snr));
        if psnr_inf > 0 {
            log::warn!("{psnr_inf} frame(s) with infinite PSNR excluded from the clip mean");
        }
        let ssim = if per_frame.is_empty() {
            0.0
        } else {
            per_frame.iter().map(|f| f.ssim).sum::<f64>() / per_frame.len() as f64
        };
        Self {
            summary: MetricSummary {
                frames: per_frame.len(),
                psnr,
                ssim,
                snr,
                psnr_infinite_frames: psnr_inf,
                snr_infinite_frames: snr_inf,
            },
            per_frame,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn psnr_of_identical_is_infinite() {
        let a = vec![0.3f32; 64];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_constant_offset() {
        let a = vec![0.2f64; 100];
        let b: Vec<f32> = a.iter().map(|v| (v + 0.1) as f32).collect();
        let a: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn psnr_rejects_bad_input() {
        assert!(psnr(&[0.0; 3], &[0.0; 4], 1.0).is_err());
        assert!(psnr(&[0.0; 3], &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let a: Vec<f32> = (0..400).map(|i| (i % 20) as f32 / 20.0).collect();
        let mut last = f64::INFINITY;
        for amp in [0.001f32, 0.01, 0.05, 0.1, 0.2] {
            let b: Vec<f32> = a
                .iter()
                .enumerate()
                .map(|(i, v)| v + if i % 2 == 0 { amp } else { -amp })
                .collect();
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn snr_closed_form() {
        let s = vec![0.5f32; 50];
        assert_eq!(snr(&s, &s).unwrap(), f64::INFINITY);
        let n: Vec<f32> = s.iter().map(|v| v + 0.005).collect();
        let v = snr(&s, &n).unwrap();
        assert!((v - 40.0).abs() < 1e-3, "{v}");
        let n2: Vec<f32> = s.iter().map(|v| v + 0.01).collect();
        let v2 = snr(&s, &n2).unwrap();
        assert!((v - v2 - 20.0 * 2f64.log10()).abs() < 1e-3);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = Plane::from_fn(32, 24, |x, y| ((x * 13 + y * 29) % 17) as f32 / 16.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        let a = Plane::filled(16, 16, 0.25);
        let b = Plane::filled(16, 16, 0.75);
        let expected = (2.0 * 0.25 * 0.75 + 1e-4) / (0.25f64.powi(2) + 0.75f64.powi(2) + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-6);
        assert!((expected - 0.60006).abs() < 1e-5);
    }

    #[test]
    fn ssim_needs_window_sized_input() {
        let a = Plane::filled(10, 30, 0.1);
        assert!(matches!(ssim(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn temporal_average_cases() {
        let f = Plane::from_fn(5, 5, |x, y| (x + y) as f32 / 10.0);
        assert_eq!(temporal_average(std::slice::from_ref(&f), 1).unwrap(), f);
        let frames = vec![Plane::filled(3, 3, 0.6); 7];
        let avg = temporal_average(&frames, 7).unwrap();
        assert!(avg.data.iter().all(|&v| (v - 0.6).abs() < 1e-7));
        assert!(temporal_average(&frames, 0).is_err());
        assert!(temporal_average(&frames, 8).is_err());
    }

    #[test]
    fn kl_two_bin_closed_form() {
        let t = Histogram::uniform(0.0, 1.0, 2).unwrap();
        let p = Histogram::from_masses(&t, &[0.5, 0.5]).unwrap();
        let q = Histogram::from_masses(&t, &[0.25, 0.75]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.14384).abs() < 1e-5);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_binning_mismatch() {
        let a = Histogram::uniform(0.0, 1.0, 4).unwrap();
        let b = Histogram::uniform(0.0, 1.0, 5).unwrap();
        assert!(matches!(kl_divergence(&a, &b), Err(Error::BinningMismatch)));
    }

    #[test]
    fn report_excludes_infinite_psnr() {
        let r = MetricReport::from_frames(vec![
            FrameMetrics { frame: 0, psnr: 30.0, ssim: 0.9, snr: 20.0 },
            FrameMetrics { frame: 1, psnr: f64::INFINITY, ssim: 1.0, snr: f64::INFINITY },
            FrameMetrics { frame: 2, psnr: 40.0, ssim: 0.8, snr: 30.0 },
        ]);
        assert_eq!(r.summary.psnr, Some(35.0));
        assert_eq!(r.summary.psnr_infinite_frames, 1);
        assert!((r.summary.ssim - 0.9).abs() < 1e-12);
        let json = serde_json::to_string(&r.per_frame[1]).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""));
    }

    #[test]
    fn per_pixel_kl_of_identical_streams_is_zero() {
        let frames: Vec<Plane> = (0..6)
            .map(|i| Plane::from_fn(4, 4, |x, y| ((x + y + i) % 5) as f32 * 0.01))
            .collect();
        let t = Histogram::residual();
        assert_eq!(residual_kl(&frames, &frames, KlMode::PerPixel, &t).unwrap(), 0.0);
        assert_eq!(residual_kl(&frames, &frames, KlMode::Pooled, &t).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(p in proptest::collection::vec(0.0f64..10.0, 8),
                              q in proptest::collection::vec(0.01f64..10.0, 8)) {
            prop_assume!(p.iter().sum::<f64>() > 0.0);
            let t = Histogram::uniform(0.0, 1.0, 8).unwrap();
            let hp = Histogram::from_masses(&t, &p).unwrap();
            let hq = Histogram::from_masses(&t, &q).unwrap();
            prop_assert!(kl_divergence(&hp, &hq).unwrap() >= -1e-12);
        }

        #[test]
        fn ssim_is_bounded(seed in any::<u64>()) {
            let mut s = seed | 1;
            let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; (s >> 40) as f32 / (1u64 << 24) as f32 };
            let a = Plane::from_fn(16, 16, |_, _| next());
            let b = Plane::from_fn(16, 16, |_, _| next());
            let v = ssim(&a, &b).unwrap();
            prop_assert!(v.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn temporal_average_commutes_with_offset(c in -0.5f32..0.5, seed in any::<u32>()) {
            let frames: Vec<Plane> = (0..4u32)
                .map(|i| Plane::from_fn(6, 6, |x, y| ((x as u32 * 7 + y as u32 * 3 + i * 11 + seed) % 13) as f32 / 13.0))
                .collect();
            let shifted: Vec<Plane> = frames.iter()
                .map(|f| Plane { data: f.data.iter().map(|v| v + c).collect(), ..f.clone() })
                .collect();
            let a = temporal_average(&frames, 4).unwrap();
            let b = temporal_average(&shifted, 4).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x + c - y).abs() < 1e-5);
            }
        }
    }
}
