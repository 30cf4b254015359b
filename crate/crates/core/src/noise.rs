//! Poisson-Gaussian sensor noise: per-ISO parameter tables, seeded sampling,
//! mean-variance calibration and the analytic residual distribution.
//!
//! A clean normalised signal `y` becomes
//! `x = s² · Poisson(y / s²) + Normal(0, r²)`, clamped to `[0, 1]`, where
//! `s = sigma_s` and `r = sigma_r`. This has mean `y` and variance
//! `s² y + r²` away from the clamp boundaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::metrics::Histogram;
use crate::plane::Plane;
use crate::raw::{Cfa, Channel};

/// Poisson rates below this are sampled by exact inversion, above by a
/// normal approximation.
pub const POISSON_INVERSION_LIMIT: f64 = 64.0;

const DEFAULT_TABLE: &str = include_str!("../data/calibration_default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub iso: f64,
    /// Read-noise standard deviation per channel, indexed by [`Channel::index`].
    pub sigma_r: [f64; 3],
    /// Shot-noise scale per channel; `sigma_s²` multiplies the signal in the variance.
    pub sigma_s: [f64; 3],
}

impl NoiseParams {
    pub fn uniform(iso: f64, sigma_s: f64, sigma_r: f64) -> Self {
        Self {
            iso,
            sigma_r: [sigma_r; 3],
            sigma_s: [sigma_s; 3],
        }
    }

    pub fn zero(iso: f64) -> Self {
        Self::uniform(iso, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            let (s, r) = (self.sigma_s[c], self.sigma_r[c]);
            if !(s.is_finite() && r.is_finite()) || s < 0.0 || r < 0.0 {
                return Err(Error::Parameter(format!(
                    "noise sigmas must be finite and non-negative (sigma_s={s}, sigma_r={r})"
                )));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_r.iter().chain(&self.sigma_s).all(|&v| v == 0.0)
    }

    /// Variance of the unclamped noisy signal at level `y`.
    pub fn variance(&self, channel: Channel, y: f64) -> f64 {
        let c = channel.index();
        self.sigma_s[c].powi(2) * y + self.sigma_r[c].powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum PerChannel {
    Shared(f64),
    Split([f64; 3]),
}

impl PerChannel {
    fn expand(&self) -> [f64; 3] {
        match *self {
            PerChannel::Shared(v) => [v; 3],
            PerChannel::Split(v) => v,
        }
    }

    fn compact(v: [f64; 3]) -> Self {
        if v[0] == v[1] && v[1] == v[2] {
            PerChannel::Shared(v[0])
        } else {
            PerChannel::Split(v)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableEntry {
    iso: f64,
    sigma_s: PerChannel,
    sigma_r: PerChannel,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableDoc {
    entry: Vec<TableEntry>,
}

/// Noise parameters keyed by strictly increasing ISO.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    entries: Vec<NoiseParams>,
}

impl CalibrationTable {
    pub fn new(entries: Vec<NoiseParams>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("calibration table is empty".into()));
        }
        for e in &entries {
            e.validate()?;
        }
        if entries.windows(2).any(|w| w[0].iso >= w[1].iso) {
            return Err(Error::Config(
                "calibration ISO keys must be strictly increasing".into(),
            ));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[NoiseParams] {
        &self.entries
    }

    pub fn iso_range(&self) -> (f64, f64) {
        (self.entries[0].iso, self.entries[self.entries.len() - 1].iso)
    }

    /// Table shipped with the toolkit.
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_TABLE).expect("built-in calibration table is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: TableDoc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::new(
            doc.entry
                .into_iter()
                .map(|e| NoiseParams {
                    iso: e.iso,
                    sigma_r: e.sigma_r.expand(),
                    sigma_s: e.sigma_s.expand(),
                })
                .collect(),
        )
    }

    pub fn to_toml(&self) -> Result<String> {
        let doc = TableDoc {
            entry: self
                .entries
                .iter()
                .map(|p| TableEntry {
                    iso: p.iso,
                    sigma_s: PerChannel::compact(p.sigma_s),
                    sigma_r: PerChannel::compact(p.sigma_r),
                })
                .collect(),
        };
        toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))
    }

    /// Inserts or replaces the entry at `params.iso`.
    pub fn upsert(&mut self, params: NoiseParams) -> Result<()> {
        params.validate()?;
        match self
            .entries
            .binary_search_by(|e| e.iso.total_cmp(&params.iso))
        {
            Ok(i) => self.entries[i] = params,
            Err(i) => self.entries.insert(i, params),
        }
        Ok(())
    }
}

/// Looks up the parameters for `iso`. Between keys the squared sigmas are
/// interpolated linearly in ISO; outside the table the nearest end is used.
pub fn params_for_iso(table: &CalibrationTable, iso: f64) -> Result<NoiseParams> {
    let entries = &table.entries;
    let Some(first) = entries.first() else {
        return Err(Error::Config("calibration table is empty".into()));
    };
    let last = &entries[entries.len() - 1];
    if iso <= first.iso {
        return Ok(first.clone());
    }
    if iso >= last.iso {
        return Ok(last.clone());
    }
    let hi = entries.partition_point(|e| e.iso < iso);
    if entries[hi].iso == iso {
        return Ok(entries[hi].clone());
    }
    let (a, b) = (&entries[hi - 1], &entries[hi]);
    let t = (iso - a.iso) / (b.iso - a.iso);
    let lerp_sq = |x: f64, y: f64| ((1.0 - t) * x * x + t * y * y).sqrt();
    Ok(NoiseParams {
        iso,
        sigma_r: std::array::from_fn(|c| lerp_sq(a.sigma_r[c], b.sigma_r[c])),
        sigma_s: std::array::from_fn(|c| lerp_sq(a.sigma_s[c], b.sigma_s[c])),
    })
}

/// Counter-style seed derivation: identical specs give identical streams,
/// distinct (clip, frame, channel) triples give independent ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SeedSpec {
    pub global: u64,
    pub clip: u64,
    pub frame: u64,
    pub channel: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedSpec {
    pub fn new(global: u64) -> Self {
        Self {
            global,
            ..Self::default()
        }
    }

    pub fn with_clip(self, clip: u64) -> Self {
        Self { clip, ..self }
    }

    pub fn with_frame(self, frame: u64) -> Self {
        Self { frame, ..self }
    }

    pub fn with_channel(self, channel: Channel) -> Self {
        Self {
            channel: channel.index() as u64,
            ..self
        }
    }

    pub fn derive(&self) -> u64 {
        [self.clip, self.frame, self.channel]
            .iter()
            .fold(splitmix64(self.global), |acc, &v| splitmix64(acc ^ splitmix64(v)))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive())
    }
}

/// Draws from `Poisson(rate)`; inversion below [`POISSON_INVERSION_LIMIT`],
/// `Normal(rate, rate)` truncated at zero above it.
pub fn sample_poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    if rate >= POISSON_INVERSION_LIMIT {
        let z: f64 = rng.sample(StandardNormal);
        return (rate + rate.sqrt() * z).max(0.0);
    }
    let u: f64 = rng.gen();
    let mut p = (-rate).exp();
    let mut cdf = p;
    let mut k = 0u32;
    // the cap guards against cdf saturating below u through rounding
    while u > cdf && k < 1024 {
        k += 1;
        p *= rate / k as f64;
        cdf += p;
    }
    k as f64
}

#[inline]
fn noisy_sample<R: Rng + ?Sized>(y: f64, shot_scale: f64, read_std: f64, rng: &mut R) -> f32 {
    let shot = if shot_scale > 0.0 {
        shot_scale * sample_poisson(y / shot_scale, rng)
    } else {
        y
    };
    let z: f64 = rng.sample(StandardNormal);
    (shot + read_std * z).clamp(0.0, 1.0) as f32
}

fn check_signal(y: &Plane) -> Result<()> {
    if let Some(v) = y.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!(
            "clean signal must lie in [0, 1], found {v}"
        )));
    }
    Ok(())
}

/// Applies the noise model to a single-channel plane.
pub fn sample_noisy(
    y: &Plane,
    params: &NoiseParams,
    channel: Channel,
    seed: SeedSpec,
) -> Result<Plane> {
    params.validate()?;
    check_signal(y)?;
    let c = channel.index();
    let shot_scale = params.sigma_s[c] * params.sigma_s[c];
    let read_std = params.sigma_r[c];
    let mut rng = seed.with_channel(channel).rng();
    let data = y
        .data
        .iter()
        .map(|&v| noisy_sample(v as f64, shot_scale, read_std, &mut rng))
        .collect();
    Plane::new(y.width, y.height, data)
}

/// Applies the noise model to a CFA mosaic, using each site's channel
/// parameters and one random stream per channel.
pub fn sample_noisy_mosaic(
    mosaic: &Plane,
    cfa: Cfa,
    params: &NoiseParams,
    seed: SeedSpec,
) -> Result<Plane> {
    params.validate()?;
    check_signal(mosaic)?;
    let mut rngs = Channel::ALL.map(|c| seed.with_channel(c).rng());
    let mut out = Vec::with_capacity(mosaic.len());
    for y in 0..mosaic.height {
        for x in 0..mosaic.width {
            let c = cfa.channel_at(x, y).index();
            let shot_scale = params.sigma_s[c] * params.sigma_s[c];
            out.push(noisy_sample(
                mosaic.get(x, y) as f64,
                shot_scale,
                params.sigma_r[c],
                &mut rngs[c],
            ));
        }
    }
    Plane::new(mosaic.width, mosaic.height, out)
}

/// Element-wise `x - y`.
pub fn noise_residual(x: &Plane, y: &Plane) -> Result<Plane> {
    x.ensure_same_shape(y)?;
    Ok(Plane {
        width: x.width,
        height: x.height,
        data: x.data.iter().zip(&y.data).map(|(a, b)| a - b).collect(),
    })
}

/// Per-pixel temporal mean and unbiased variance of a flat-field capture.
#[derive(Debug, Clone)]
pub struct FlatStack {
    pub mean: Plane,
    pub variance: Plane,
}

impl FlatStack {
    pub fn from_frames(frames: &[Plane]) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Calibration(
                "a flat-field stack needs at least two frames".into(),
            ));
        }
        let first = &frames[0];
        for f in frames {
            first.ensure_same_shape(f)?;
        }
        let n = frames.len() as f64;
        let mut mean = vec![0.0f32; first.len()];
        let mut variance = vec![0.0f32; first.len()];
        for i in 0..first.len() {
            let m = frames.iter().map(|f| f.data[i] as f64).sum::<f64>() / n;
            let v = frames
                .iter()
                .map(|f| (f.data[i] as f64 - m).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            mean[i] = m as f32;
            variance[i] = v as f32;
        }
        Ok(Self {
            mean: Plane::new(first.width, first.height, mean)?,
            variance: Plane::new(first.width, first.height, variance)?,
        })
    }

    /// Mean level and mean variance over the sites of one channel.
    pub fn channel_point(&self, cfa: Cfa, channel: Channel) -> Option<(f64, f64)> {
        let (mut sm, mut sv, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.mean.height {
            for x in 0..self.mean.width {
                if cfa.channel_at(x, y) == channel {
                    sm += self.mean.get(x, y) as f64;
                    sv += self.variance.get(x, y) as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sm / n as f64, sv / n as f64))
    }
}

/// Ordinary least squares for `variance = slope * mean + intercept`.
/// Returns `(sigma_s², sigma_r²)` with both floored at zero.
pub fn fit_mean_variance(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(Error::Calibration(
            "at least two mean levels are required".into(),
        ));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let scale = points.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(1e-12);
    if sxx <= (1e-9 * scale).powi(2) * n {
        return Err(Error::Calibration(
            "regression is rank deficient: mean levels are not distinct".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    Ok((slope.max(0.0), intercept.max(0.0)))
}

/// Fits per-channel noise parameters from flat-field stacks taken at
/// different exposure levels.
pub fn estimate_params(iso: f64, stacks: &[FlatStack], cfa: Cfa) -> Result<NoiseParams> {
    let mut params = NoiseParams::zero(iso);
    for ch in Channel::ALL {
        let points: Vec<(f64, f64)> = stacks
            .iter()
            .filter_map(|s| s.channel_point(cfa, ch))
            .collect();
        let (shot_sq, read_sq) = fit_mean_variance(&points)
            .map_err(|e| Error::Calibration(format!("channel {ch:?}: {e}")))?;
        params.sigma_s[ch.index()] = shot_sq.sqrt();
        params.sigma_r[ch.index()] = read_sq.sqrt();
    }
    Ok(params)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Exact probability mass of the clamped residual `x - y` per bin of `hist`,
/// for a flat clean level `y`.
pub fn model_residual_histogram(
    y: f64,
    params: &NoiseParams,
    channel: Channel,
    hist: &Histogram,
) -> Result<Vec<f64>> {
    params.validate()?;
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::Domain(format!("clean level {y} outside [0, 1]")));
    }
    let c = channel.index();
    let shot_scale = params.sigma_s[c].powi(2);
    let read = params.sigma_r[c];
    let mut mass = vec![0.0; hist.bins()];
    let (lo, hi) = (-y, 1.0 - y);

    // (residual centre, weight) for each shot-noise outcome
    let mut centres: Vec<(f64, f64)> = Vec::new();
    if shot_scale == 0.0 {
        centres.push((0.0, 1.0));
    } else {
        let rate = y / shot_scale;
        if rate == 0.0 {
            centres.push((-y, 1.0));
        } else {
            let spread = 12.0 * rate.sqrt() + 12.0;
            let k0 = (rate - spread).floor().max(0.0) as u64;
            let k1 = (rate + spread).ceil() as u64;
            for k in k0..=k1 {
                let kf = k as f64;
                let lp = kf * rate.ln() - rate - ln_gamma(kf + 1.0);
                centres.push((shot_scale * kf - y, lp.exp()));
            }
        }
    }

    let add_point = |r: f64, w: f64, mass: &mut [f64]| {
        mass[hist.bin_of(r)] += w;
    };
    for (mu, w) in centres {
        if w < 1e-300 {
            continue;
        }
        if read == 0.0 {
            add_point(mu.clamp(lo, hi), w, &mut mass);
            continue;
        }
        let cdf = |r: f64| normal_cdf((r - mu) / read);
        add_point(lo, w * cdf(lo), &mut mass);
        add_point(hi, w * (1.0 - cdf(hi)), &mut mass);
        for (b, m) in mass.iter_mut().enumerate() {
            let (a, e) = hist.bin_range(b);
            let (a, e) = (a.max(lo), e.min(hi));
            if e > a {
                *m += w * (cdf(e) - cdf(a));
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        mass.iter_mut().for_each(|m| *m /= total);
    }
    Ok(mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::kl_divergence;

    fn moments(p: &Plane) -> (f64, f64) {
        let n = p.len() as f64;
        let m = p.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let v = p.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn zero_signal_without_read_noise_stays_zero() {
        let y = Plane::filled(64, 64, 0.0);
        let x = sample_noisy(&y, &NoiseParams::uniform(100.0, 0.3, 0.0), Channel::G, SeedSpec::new(1))
            .unwrap();
        assert!(x.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_sigmas_are_identity() {
        let y = Plane::from_fn(17, 9, |x, y| ((x * 31 + y * 7) % 97) as f32 / 96.0);
        let x = sample_noisy(&y, &NoiseParams::zero(100.0), Channel::R, SeedSpec::new(9)).unwrap();
        assert_eq!(x, y);
        let m = sample_noisy_mosaic(&y, Cfa::Gbrg, &NoiseParams::zero(1.0), SeedSpec::new(3)).unwrap();
        assert_eq!(m, y);
    }

    #[test]
    fn moments_match_model() {
        let y = Plane::filled(1000, 1000, 0.25);
        let p = NoiseParams::uniform(1.0, 0.1, 0.02);
        let x = sample_noisy(&y, &p, Channel::G, SeedSpec::new(42)).unwrap();
        let (m, v) = moments(&x);
        assert!((m - 0.25).abs() / 0.25 < 0.005, "mean {m}");
        assert!((v - 0.0029).abs() / 0.0029 < 0.02, "var {v}");
    }

    #[test]
    fn moments_hold_on_gaussian_branch() {
        // rate = 0.5 / 0.001 = 500, above the inversion limit
        let y = Plane::filled(1000, 400, 0.5);
        let p = NoiseParams::uniform(1.0, 0.001f64.sqrt(), 0.005);
        let x = sample_noisy(&y, &p, Channel::B, SeedSpec::new(5)).unwrap();
        let (m, v) = moments(&x);
        let expected = 0.001 * 0.5 + 0.005f64.powi(2);
        assert!((m - 0.5).abs() < 3.0 * (expected / x.len() as f64).sqrt() + 1e-6);
        assert!((v - expected).abs() / expected < 0.02, "var {v}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let y = Plane::filled(32, 32, 0.4);
        let p = NoiseParams::uniform(1.0, 0.05, 0.01);
        let s = SeedSpec::new(7).with_clip(3).with_frame(2);
        let a = sample_noisy(&y, &p, Channel::G, s).unwrap();
        let b = sample_noisy(&y, &p, Channel::G, s).unwrap();
        assert_eq!(a, b);
        let c = sample_noisy(&y, &p, Channel::G, s.with_frame(3)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let y = Plane::filled(2, 2, 1.5);
        assert!(matches!(
            sample_noisy(&y, &NoiseParams::zero(1.0), Channel::G, SeedSpec::new(0)),
            Err(Error::Domain(_))
        ));
        let y = Plane::filled(2, 2, 0.5);
        assert!(matches!(
            sample_noisy(&y, &NoiseParams::uniform(1.0, -0.1, 0.0), Channel::G, SeedSpec::new(0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn poisson_small_rate_moments() {
        let mut rng = SeedSpec::new(11).rng();
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_poisson(3.5, &mut rng)).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / n as f64;
        assert!((m - 3.5).abs() < 0.03);
        assert!((v - 3.5).abs() < 0.07);
        assert!(draws.iter().all(|d| d.fract() == 0.0));
    }

    fn table() -> CalibrationTable {
        CalibrationTable::new(vec![
            NoiseParams::uniform(100.0, 0.01, 0.001),
            NoiseParams::uniform(400.0, 0.03, 0.005),
            NoiseParams {
                iso: 1600.0,
                sigma_r: [0.01, 0.02, 0.03],
                sigma_s: [0.05, 0.06, 0.07],
            },
        ])
        .unwrap()
    }

    #[test]
    fn exact_iso_returns_stored_entry() {
        assert_eq!(params_for_iso(&table(), 400.0).unwrap(), table().entries()[1]);
    }

    #[test]
    fn midway_iso_averages_squared_sigmas() {
        let p = params_for_iso(&table(), 250.0).unwrap();
        let expect_s = ((0.01f64.powi(2) + 0.03f64.powi(2)) / 2.0).sqrt();
        let expect_r = ((0.001f64.powi(2) + 0.005f64.powi(2)) / 2.0).sqrt();
        for c in 0..3 {
            assert!((p.sigma_s[c] - expect_s).abs() < 1e-12);
            assert!((p.sigma_r[c] - expect_r).abs() < 1e-12);
        }
        assert_eq!(p.iso, 250.0);
    }

    #[test]
    fn out_of_range_iso_clamps() {
        assert_eq!(params_for_iso(&table(), 25600.0).unwrap(), table().entries()[2]);
        assert_eq!(params_for_iso(&table(), 50.0).unwrap(), table().entries()[0]);
    }

    #[test]
    fn table_invariants_enforced() {
        assert!(matches!(CalibrationTable::new(vec![]), Err(Error::Config(_))));
        assert!(CalibrationTable::new(vec![
            NoiseParams::zero(200.0),
            NoiseParams::zero(200.0)
        ])
        .is_err());
    }

    #[test]
    fn table_toml_roundtrip_with_shorthand() {
        let t = table();
        let text = t.to_toml().unwrap();
        assert!(text.contains("sigma_s = 0.01\n"));
        assert!(text.contains("[0.05, 0.06, 0.07]"));
        assert_eq!(CalibrationTable::from_toml(&text).unwrap(), t);
        let builtin = CalibrationTable::builtin();
        assert!(builtin.entries().iter().any(|e| e.iso == 20000.0));
    }

    #[test]
    fn exact_line_is_recovered() {
        let pts: Vec<(f64, f64)> = [0.1, 0.3, 0.5, 0.7]
            .iter()
            .map(|&m| (m, 0.002 * m + 0.0001))
            .collect();
        let (s2, r2) = fit_mean_variance(&pts).unwrap();
        assert!((s2 - 0.002).abs() < 1e-15);
        assert!((r2 - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn constant_variance_means_no_shot_noise() {
        let pts = [(0.1, 4e-4), (0.4, 4e-4), (0.8, 4e-4)];
        let (s2, r2) = fit_mean_variance(&pts).unwrap();
        assert_eq!(s2, 0.0);
        assert!((r2 - 4e-4).abs() < 1e-15);
    }

    #[test]
    fn single_level_is_rank_deficient() {
        assert!(matches!(
            fit_mean_variance(&[(0.3, 0.001), (0.3, 0.0012)]),
            Err(Error::Calibration(_))
        ));
        assert!(fit_mean_variance(&[(0.3, 0.001)]).is_err());
    }

    #[test]
    fn regenerate_and_fit_roundtrip() {
        let truth = NoiseParams::uniform(800.0, 0.004f64.sqrt(), 0.01);
        let mut stacks = Vec::new();
        for (li, level) in [0.05f32, 0.1, 0.2, 0.35, 0.5].into_iter().enumerate() {
            let clean = Plane::filled(128, 128, level);
            let frames: Vec<Plane> = (0..32)
                .map(|f| {
                    let seed = SeedSpec::new(77).with_clip(li as u64).with_frame(f);
                    sample_noisy_mosaic(&clean, Cfa::Gbrg, &truth, seed).unwrap()
                })
                .collect();
            stacks.push(FlatStack::from_frames(&frames).unwrap());
        }
        let est = estimate_params(800.0, &stacks, Cfa::Gbrg).unwrap();
        for c in 0..3 {
            let s2 = est.sigma_s[c].powi(2);
            assert!((s2 - 0.004).abs() / 0.004 < 0.05, "sigma_s² {s2}");
            assert!((est.sigma_r[c] - 0.01).abs() / 0.01 < 0.05, "sigma_r {}", est.sigma_r[c]);
        }
    }

    #[test]
    fn residual_of_equal_planes_is_zero() {
        let y = Plane::filled(4, 4, 0.3);
        assert!(noise_residual(&y, &y).unwrap().data.iter().all(|&v| v == 0.0));
        let x = Plane::filled(4, 4, 0.4);
        assert!(noise_residual(&x, &y)
            .unwrap()
            .data
            .iter()
            .all(|&v| (v - 0.1).abs() < 1e-6));
        assert!(noise_residual(&x, &Plane::filled(2, 8, 0.0)).is_err());
    }

    #[test]
    fn gaussian_residual_matches_analytic_histogram() {
        let y = Plane::filled(512, 512, 0.5);
        let p = NoiseParams::uniform(1.0, 0.0, 0.02);
        let x = sample_noisy(&y, &p, Channel::G, SeedSpec::new(8)).unwrap();
        let r = noise_residual(&x, &y).unwrap();
        let mut h = Histogram::uniform(-1.0, 1.0, 256).unwrap();
        h.add_all(r.data.iter().map(|&v| v as f64));
        let model = model_residual_histogram(0.5, &p, Channel::G, &h).unwrap();
        let q = Histogram::from_masses(&h, &model).unwrap();
        let kl = kl_divergence(&h, &q).unwrap();
        assert!(kl < 0.05, "kl {kl}");
        assert!((model.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
