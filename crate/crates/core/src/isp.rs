//! Camera ISP: white balance, correlated colour temperature, dual-illuminant
//! colour correction, ProPhoto tone mapping and sRGB encoding.
//!
//! Stage order used by [`render`]:
//! normalise -> (noise) -> white balance -> demosaic -> CCT/CCM -> XYZ ->
//! ProPhoto -> tone map -> linear sRGB -> gamma -> 8-bit quantisation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise::{sample_noisy_mosaic, NoiseParams, SeedSpec};
use crate::plane::Plane;
use crate::raw::{demosaic_bilinear, normalize, BayerFrame, Cfa, ColorSpace, RgbImage};

pub const STAGE_ORDER: [&str; 11] = [
    "normalize",
    "noise",
    "white_balance",
    "demosaic",
    "cct_ccm",
    "camera_to_xyz",
    "xyz_to_prophoto",
    "tonemap",
    "prophoto_to_srgb_linear",
    "gamma",
    "quantize",
];

pub const D50_WHITE: [f64; 3] = [0.96422, 1.0, 0.82521];
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

pub const CCT_MIN: f64 = 1667.0;
pub const CCT_MAX: f64 = 25000.0;

const DEFAULT_CONFIG: &str = include_str!("../data/isp_default.toml");

/// 3x3 colour transform acting on column vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColorMatrix(pub [[f64; 3]; 3]);

impl ColorMatrix {
    pub const IDENTITY: ColorMatrix = ColorMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn diag(d: [f64; 3]) -> Self {
        ColorMatrix([[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]])
    }

    pub fn mul(&self, rhs: &ColorMatrix) -> ColorMatrix {
        let (a, b) = (&self.0, &rhs.0);
        ColorMatrix(std::array::from_fn(|i| {
            std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum())
        }))
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
    }

    #[inline]
    pub fn apply_f32(&self, v: [f32; 3]) -> [f32; 3] {
        let r = self.apply([v[0] as f64, v[1] as f64, v[2] as f64]);
        [r[0] as f32, r[1] as f32, r[2] as f32]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn inverse(&self) -> Result<ColorMatrix> {
        let d = self.det();
        if !(d.abs() > 1e-6) {
            return Err(Error::Config(format!("matrix is singular (det = {d:e})")));
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        Ok(ColorMatrix([
            [cof(1, 2, 1, 2) / d, -cof(0, 2, 1, 2) / d, cof(0, 1, 1, 2) / d],
            [-cof(1, 2, 0, 2) / d, cof(0, 2, 0, 2) / d, -cof(0, 1, 0, 2) / d],
            [cof(1, 2, 0, 1) / d, -cof(0, 2, 0, 1) / d, cof(0, 1, 0, 1) / d],
        ]))
    }

    /// `w * self + (1 - w) * other`, element-wise.
    pub fn blend(&self, other: &ColorMatrix, w: f64) -> ColorMatrix {
        ColorMatrix(std::array::from_fn(|i| {
            std::array::from_fn(|j| w * self.0[i][j] + (1.0 - w) * other.0[i][j])
        }))
    }
}

/// CIE XYZ (D50) to ProPhoto (ROMM) RGB.
pub const XYZ_TO_PROPHOTO: ColorMatrix = ColorMatrix([
    [1.3459433, -0.2556075, -0.0511118],
    [-0.5445989, 1.5081673, 0.0205351],
    [0.0000000, 0.0000000, 1.2118128],
]);

pub const PROPHOTO_TO_XYZ: ColorMatrix = ColorMatrix([
    [0.7976749, 0.1351917, 0.0313534],
    [0.2880402, 0.7118741, 0.0000857],
    [0.0000000, 0.0000000, 0.8252100],
]);

/// CIE XYZ (D65) to linear sRGB.
pub const XYZ_TO_SRGB: ColorMatrix = ColorMatrix([
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
]);

pub const SRGB_TO_XYZ: ColorMatrix = ColorMatrix([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
]);

/// Bradford cone response matrix.
pub const BRADFORD: ColorMatrix = ColorMatrix([
    [0.8951000, 0.2664000, -0.1614000],
    [-0.7502000, 1.7135000, 0.0367000],
    [0.0389000, -0.0685000, 1.0296000],
]);

/// Bradford chromatic adaptation from `src` white to `dst` white (XYZ).
pub fn bradford_adaptation(src: [f64; 3], dst: [f64; 3]) -> Result<ColorMatrix> {
    let s = BRADFORD.apply(src);
    let d = BRADFORD.apply(dst);
    if s.iter().any(|v| v.abs() < 1e-12) {
        return Err(Error::Domain("source white has a zero cone response".into()));
    }
    let scale = ColorMatrix::diag([d[0] / s[0], d[1] / s[1], d[2] / s[2]]);
    Ok(BRADFORD.inverse()?.mul(&scale).mul(&BRADFORD))
}

/// Linear ProPhoto (D50) to linear sRGB (D65), Bradford-adapted.
pub fn prophoto_to_srgb_matrix() -> ColorMatrix {
    let adapt = bradford_adaptation(D50_WHITE, D65_WHITE).expect("D50 is a valid white");
    XYZ_TO_SRGB.mul(&adapt).mul(&PROPHOTO_TO_XYZ)
}

pub fn srgb_to_prophoto_matrix() -> ColorMatrix {
    prophoto_to_srgb_matrix()
        .inverse()
        .expect("ProPhoto to sRGB is invertible")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminantMatrix {
    /// Calibration illuminant temperature in kelvin.
    pub temperature: f64,
    /// Camera RGB to XYZ.
    pub matrix: ColorMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WbMode {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WhiteBalance {
    Mode(WbMode),
    Gains([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tonemap {
    AcesFit,
    Reinhard,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub color_temp_module: bool,
    pub tonemap: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            color_temp_module: true,
            tonemap: true,
        }
    }
}

/// Stage names accepted by [`IspConfig::disable_stage`].
pub const TOGGLEABLE_STAGES: [&str; 2] = ["color-temp", "tonemap"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IspConfig {
    pub white_balance: WhiteBalance,
    pub tonemap: Tonemap,
    /// Clamp negative values to zero before tone mapping instead of failing.
    #[serde(default = "default_true")]
    pub clamp_negative: bool,
    #[serde(default)]
    pub stages: Stages,
    pub ccm_low: IlluminantMatrix,
    pub ccm_high: IlluminantMatrix,
}

fn default_true() -> bool {
    true
}

impl Default for IspConfig {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("built-in ISP configuration is valid")
    }
}

impl IspConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: IspConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialisation.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ccm_low.temperature > 0.0 && self.ccm_low.temperature < self.ccm_high.temperature) {
            return Err(Error::Config(format!(
                "CCM temperatures must satisfy 0 < low < high (got {} and {})",
                self.ccm_low.temperature, self.ccm_high.temperature
            )));
        }
        for m in [&self.ccm_low.matrix, &self.ccm_high.matrix] {
            if !m.is_finite() {
                return Err(Error::Config("colour matrix has non-finite entries".into()));
            }
        }
        if let WhiteBalance::Gains(g) = &self.white_balance {
            if g.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!("white-balance gains must be positive, got {g:?}")));
            }
        }
        Ok(())
    }

    pub fn disable_stage(&mut self, name: &str) -> Result<()> {
        match name {
            "color-temp" | "color_temp_module" | "cct" => self.stages.color_temp_module = false,
            "tonemap" => self.stages.tonemap = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown stage '{other}', expected one of {TOGGLEABLE_STAGES:?}"
                )))
            }
        }
        Ok(())
    }
}

/// Correlated colour temperature in kelvin.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cct(f64);

impl Cct {
    /// Clamps into the validity range of the approximation.
    pub fn new(kelvin: f64) -> Self {
        Cct(kelvin.clamp(CCT_MIN, CCT_MAX))
    }

    pub fn kelvin(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WhiteBalanceEstimate {
    pub gains: [f64; 3],
    /// Per-channel means of the input.
    pub neutral: [f64; 3],
}

fn gray_world(sums: [f64; 3], counts: [usize; 3]) -> Result<WhiteBalanceEstimate> {
    let neutral: [f64; 3] = std::array::from_fn(|c| sums[c] / counts[c].max(1) as f64);
    if neutral.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::DegenerateImage(format!(
            "channel means must be positive for gray-world balance, got {neutral:?}"
        )));
    }
    Ok(WhiteBalanceEstimate {
        gains: std::array::from_fn(|c| neutral[1] / neutral[c]),
        neutral,
    })
}

/// Gray-world white balance: `gain_c = mean(G) / mean(c)`.
pub fn auto_white_balance(img: &RgbImage) -> Result<WhiteBalanceEstimate> {
    img.expect_space(ColorSpace::CameraRgb)?;
    let mut sums = [0.0f64; 3];
    for p in &img.pixels {
        for c in 0..3 {
            sums[c] += p[c] as f64;
        }
    }
    gray_world(sums, [img.pixels.len(); 3])
}

/// Gray-world white balance computed from the native sites of a mosaic.
pub fn auto_white_balance_mosaic(mosaic: &Plane, cfa: Cfa) -> Result<WhiteBalanceEstimate> {
    cfa.ensure_supported()?;
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for y in 0..mosaic.height {
        for x in 0..mosaic.width {
            let c = cfa.channel_at(x, y).index();
            sums[c] += mosaic.get(x, y) as f64;
            counts[c] += 1;
        }
    }
    gray_world(sums, counts)
}

pub fn apply_white_balance_mosaic(mosaic: &Plane, cfa: Cfa, gains: [f64; 3]) -> Plane {
    Plane::from_fn(mosaic.width, mosaic.height, |x, y| {
        (mosaic.get(x, y) as f64 * gains[cfa.channel_at(x, y).index()]) as f32
    })
}

pub fn apply_white_balance(img: &RgbImage, gains: [f64; 3]) -> Result<RgbImage> {
    img.expect_space(ColorSpace::CameraRgb)?;
    Ok(map_pixels(img, ColorSpace::CameraRgb, |p| {
        std::array::from_fn(|c| (p[c] as f64 * gains[c]) as f32)
    }))
}

pub fn xy_chromaticity(xyz: [f64; 3]) -> Result<(f64, f64)> {
    let s = xyz[0] + xyz[1] + xyz[2];
    if !(xyz[1] > 0.0) || !(s > 0.0) {
        return Err(Error::Domain(format!(
            "neutral must have positive luminance, got {xyz:?}"
        )));
    }
    Ok((xyz[0] / s, xyz[1] / s))
}

/// McCamy's cubic approximation of CCT from xy chromaticity, clamped to
/// `[CCT_MIN, CCT_MAX]`.
pub fn cct_from_xy(x: f64, y: f64) -> Result<Cct> {
    // The approximation is fitted around the Planckian locus; its epicentre
    // (0.3320, 0.1858) must lie below the chromaticity.
    if !(x.is_finite() && y.is_finite()) || x <= 0.0 || y <= 0.1858 || x + y >= 1.0 {
        return Err(Error::OutOfGamut { x, y });
    }
    let n = (x - 0.3320) / (0.1858 - y);
    let cct = ((449.0 * n + 3525.0) * n + 6823.3) * n + 5520.33;
    if !cct.is_finite() || cct <= 0.0 {
        return Err(Error::OutOfGamut { x, y });
    }
    Ok(Cct::new(cct))
}

pub fn estimate_cct(neutral_xyz: [f64; 3]) -> Result<Cct> {
    let (x, y) = xy_chromaticity(neutral_xyz)?;
    cct_from_xy(x, y)
}

fn mired_weight(cfg: &IspConfig, cct: Cct) -> f64 {
    let inv = 1.0 / cct.kelvin();
    let lo = 1.0 / cfg.ccm_low.temperature;
    let hi = 1.0 / cfg.ccm_high.temperature;
    ((inv - hi) / (lo - hi)).clamp(0.0, 1.0)
}

/// Blends the two calibration matrices linearly in reciprocal temperature.
pub fn interpolate_ccm(cfg: &IspConfig, cct: Cct) -> ColorMatrix {
    let w = mired_weight(cfg, cct);
    cfg.ccm_low.matrix.blend(&cfg.ccm_high.matrix, w)
}

/// Temperature halfway between the calibration illuminants in mired.
pub fn mired_midpoint(cfg: &IspConfig) -> Cct {
    let inv = 0.5 * (1.0 / cfg.ccm_low.temperature + 1.0 / cfg.ccm_high.temperature);
    Cct(1.0 / inv)
}

fn map_pixels(img: &RgbImage, space: ColorSpace, f: impl Fn([f32; 3]) -> [f32; 3]) -> RgbImage {
    RgbImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| f(p)).collect(),
        space,
    }
}

fn convert(img: &RgbImage, from: ColorSpace, to: ColorSpace, m: &ColorMatrix) -> Result<RgbImage> {
    img.expect_space(from)?;
    Ok(map_pixels(img, to, |p| m.apply_f32(p)))
}

pub fn camera_to_xyz(img: &RgbImage, ccm: &ColorMatrix) -> Result<RgbImage> {
    convert(img, ColorSpace::CameraRgb, ColorSpace::Xyz, ccm)
}

pub fn xyz_to_prophoto(img: &RgbImage) -> Result<RgbImage> {
    convert(img, ColorSpace::Xyz, ColorSpace::ProPhoto, &XYZ_TO_PROPHOTO)
}

pub fn prophoto_to_xyz(img: &RgbImage) -> Result<RgbImage> {
    convert(img, ColorSpace::ProPhoto, ColorSpace::Xyz, &PROPHOTO_TO_XYZ)
}

/// Accepts linear or tone-mapped ProPhoto input.
pub fn prophoto_to_srgb_linear(img: &RgbImage) -> Result<RgbImage> {
    let from = match img.space {
        ColorSpace::ProPhotoTonemapped => ColorSpace::ProPhotoTonemapped,
        _ => ColorSpace::ProPhoto,
    };
    convert(img, from, ColorSpace::SrgbLinear, &prophoto_to_srgb_matrix())
}

pub fn srgb_linear_to_prophoto(img: &RgbImage) -> Result<RgbImage> {
    convert(img, ColorSpace::SrgbLinear, ColorSpace::ProPhoto, &srgb_to_prophoto_matrix())
}

/// Rational fit of the ACES filmic curve.
#[inline]
pub fn aces_fit(x: f64) -> f64 {
    ((x * (2.51 * x + 0.03)) / (x * (2.43 * x + 0.59) + 0.14)).clamp(0.0, 1.0)
}

#[inline]
pub fn reinhard(x: f64) -> f64 {
    (x / (1.0 + x)).clamp(0.0, 1.0)
}

pub fn tonemap_value(x: f64, curve: Tonemap) -> f64 {
    match curve {
        Tonemap::AcesFit => aces_fit(x),
        Tonemap::Reinhard => reinhard(x),
        Tonemap::None => x.clamp(0.0, 1.0),
    }
}

/// Per-channel tone curve on linear ProPhoto values.
pub fn tonemap(img: &RgbImage, curve: Tonemap, clamp_negative: bool) -> Result<RgbImage> {
    img.expect_space(ColorSpace::ProPhoto)?;
    if !clamp_negative {
        if let Some(v) = img.pixels.iter().flatten().find(|v| **v < 0.0) {
            return Err(Error::Domain(format!("negative ProPhoto value {v} before tone mapping")));
        }
    }
    Ok(map_pixels(img, ColorSpace::ProPhotoTonemapped, |p| {
        p.map(|v| tonemap_value((v as f64).max(0.0), curve) as f32)
    }))
}

/// sRGB opto-electronic transfer function.
#[inline]
pub fn srgb_encode(x: f64) -> f64 {
    if x <= 0.0031308 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_gamma_encode(img: &RgbImage) -> Result<RgbImage> {
    img.expect_space(ColorSpace::SrgbLinear)?;
    Ok(map_pixels(img, ColorSpace::SrgbEncoded, |p| {
        p.map(|v| srgb_encode((v as f64).clamp(0.0, 1.0)) as f32)
    }))
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Rgb8Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Rgb8Image { width: w, height: h, data })
    }

    /// Rec. 709 luma in `[0, 1]`.
    pub fn luma(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self
                .data
                .chunks_exact(3)
                .map(|p| (0.2126 * p[0] as f32 + 0.7152 * p[1] as f32 + 0.0722 * p[2] as f32) / 255.0)
                .collect(),
        }
    }

    pub fn channel(&self, c: usize) -> Plane {
        crate::metrics::channel_plane(&self.data, self.width, self.height, c)
    }
}

/// Scales to 8 bits, rounding half away from zero.
pub fn quantize(img: &RgbImage) -> Result<Rgb8Image> {
    img.expect_space(ColorSpace::SrgbEncoded)?;
    let data = img
        .pixels
        .iter()
        .flatten()
        .map(|&v| ((v as f64).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(Rgb8Image {
        width: img.width,
        height: img.height,
        data,
    })
}

/// Colour decisions derived from a clean frame and reused for every render
/// of that frame, so clean and noisy renders share one transform.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColorState {
    pub gains: [f64; 3],
    pub neutral: [f64; 3],
    /// `None` when the colour-temperature stage is disabled.
    pub cct: Option<f64>,
    /// Interpolated camera-to-XYZ matrix.
    pub ccm: ColorMatrix,
    /// Matrix applied to white-balanced camera RGB: maps the neutral to D50.
    pub camera_to_xyz: ColorMatrix,
}

const CCT_ITERATIONS: usize = 4;

pub fn estimate_color_state(mosaic: &Plane, cfa: Cfa, cfg: &IspConfig) -> Result<ColorState> {
    cfg.validate()?;
    let wb = match &cfg.white_balance {
        WhiteBalance::Mode(WbMode::Auto) => auto_white_balance_mosaic(mosaic, cfa)?,
        WhiteBalance::Gains(g) => WhiteBalanceEstimate {
            gains: *g,
            neutral: std::array::from_fn(|c| g[1] / g[c]),
        },
    };
    let mut ccm = interpolate_ccm(cfg, mired_midpoint(cfg));
    let mut cct = None;
    if cfg.stages.color_temp_module {
        // the matrix depends on the temperature it is used to estimate
        for _ in 0..CCT_ITERATIONS {
            let t = estimate_cct(ccm.apply(wb.neutral))?;
            ccm = interpolate_ccm(cfg, t);
            cct = Some(t.kelvin());
        }
    }
    let neutral_xyz = ccm.apply(wb.neutral);
    let adapt = bradford_adaptation(neutral_xyz, D50_WHITE)?;
    let unbalance = ColorMatrix::diag(wb.gains.map(|g| 1.0 / g));
    let m = adapt.mul(&ccm).mul(&unbalance);
    let y = m.apply([1.0; 3])[1];
    if !(y > 0.0) {
        return Err(Error::DegenerateImage("neutral maps to non-positive luminance".into()));
    }
    let camera_to_xyz = ColorMatrix(m.0.map(|row| row.map(|v| v / y)));
    Ok(ColorState {
        gains: wb.gains,
        neutral: wb.neutral,
        cct,
        ccm,
        camera_to_xyz,
    })
}

/// Renders a normalised mosaic to encoded sRGB floats with a fixed colour state.
pub fn render_mosaic_float(mosaic: &Plane, cfa: Cfa, state: &ColorState, cfg: &IspConfig) -> Result<RgbImage> {
    let balanced = apply_white_balance_mosaic(mosaic, cfa, state.gains);
    let cam = demosaic_bilinear(&balanced, cfa)?;
    let xyz = camera_to_xyz(&cam, &state.camera_to_xyz)?;
    let pro = xyz_to_prophoto(&xyz)?;
    let curve = if cfg.stages.tonemap { cfg.tonemap } else { Tonemap::None };
    let mapped = tonemap(&pro, curve, cfg.clamp_negative)?;
    let lin = prophoto_to_srgb_linear(&mapped)?;
    srgb_gamma_encode(&lin)
}

pub fn render_mosaic(mosaic: &Plane, cfa: Cfa, state: &ColorState, cfg: &IspConfig) -> Result<Rgb8Image> {
    quantize(&render_mosaic_float(mosaic, cfa, state, cfg)?)
}

/// Full pipeline from a RAW frame to 8-bit sRGB, optionally injecting noise.
/// Colour decisions come from the clean frame.
pub fn render(
    raw: &BayerFrame,
    noise: Option<&NoiseParams>,
    cfg: &IspConfig,
    seed: SeedSpec,
) -> Result<Rgb8Image> {
    let clean = normalize(raw)?;
    let state = estimate_color_state(&clean, raw.cfa, cfg)?;
    let mosaic = match noise {
        Some(p) => sample_noisy_mosaic(&clean, raw.cfa, p, seed)?,
        None => clean,
    };
    render_mosaic(&mosaic, raw.cfa, &state, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn gray_world_gains() {
        let img = RgbImage::filled(4, 4, [0.2, 0.4, 0.1], ColorSpace::CameraRgb);
        let wb = auto_white_balance(&img).unwrap();
        assert!(close(wb.gains[0], 2.0, 1e-6) && close(wb.gains[1], 1.0, 1e-12) && close(wb.gains[2], 4.0, 1e-6));
        let balanced = apply_white_balance(&img, wb.gains).unwrap();
        let m = auto_white_balance(&balanced).unwrap().neutral;
        assert!(close(m[0], m[1], 1e-6) && close(m[2], m[1], 1e-6));
        let gray = RgbImage::filled(3, 3, [0.3; 3], ColorSpace::CameraRgb);
        assert_eq!(auto_white_balance(&gray).unwrap().gains, [1.0; 3]);
    }

    #[test]
    fn gray_world_rejects_empty_channel() {
        let img = RgbImage::filled(2, 2, [0.0, 0.5, 0.5], ColorSpace::CameraRgb);
        assert!(matches!(auto_white_balance(&img), Err(Error::DegenerateImage(_))));
        let xyz = RgbImage::filled(2, 2, [0.5; 3], ColorSpace::Xyz);
        assert!(matches!(auto_white_balance(&xyz), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn mosaic_gray_world_matches_rgb_means() {
        let m = Plane::from_fn(8, 8, |x, y| match Cfa::Gbrg.channel_at(x, y) {
            crate::raw::Channel::R => 0.2,
            crate::raw::Channel::G => 0.4,
            crate::raw::Channel::B => 0.1,
        });
        let wb = auto_white_balance_mosaic(&m, Cfa::Gbrg).unwrap();
        assert!(close(wb.gains[0], 2.0, 1e-6) && close(wb.gains[2], 4.0, 1e-6));
    }

    #[test]
    fn mccamy_reference_illuminants() {
        let d65 = cct_from_xy(0.3127, 0.3290).unwrap().kelvin();
        assert!(close(d65, 6504.0, 50.0), "{d65}");
        let a = cct_from_xy(0.4476, 0.4074).unwrap().kelvin();
        assert!(close(a, 2856.0, 60.0), "{a}");
        assert_eq!(cct_from_xy(0.3127, 0.3290).unwrap(), cct_from_xy(0.3127, 0.3290).unwrap());
    }

    #[test]
    fn cct_domain_errors() {
        assert!(matches!(cct_from_xy(0.2, 0.1), Err(Error::OutOfGamut { .. })));
        assert!(estimate_cct([0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn cct_is_clamped_to_validity_range() {
        // far blue chromaticity produces a very high raw estimate
        let t = cct_from_xy(0.24, 0.24).unwrap().kelvin();
        assert!(t <= CCT_MAX);
    }

    #[test]
    fn ccm_interpolation_endpoints_and_midpoint() {
        let cfg = IspConfig::default();
        assert_eq!(interpolate_ccm(&cfg, Cct::new(2856.0)), cfg.ccm_low.matrix);
        assert_eq!(interpolate_ccm(&cfg, Cct::new(6504.0)), cfg.ccm_high.matrix);
        let mid = Cct::new(1.0 / ((1.0 / 2856.0 + 1.0 / 6504.0) / 2.0));
        let m = interpolate_ccm(&cfg, mid);
        for i in 0..3 {
            for j in 0..3 {
                let avg = 0.5 * (cfg.ccm_low.matrix.0[i][j] + cfg.ccm_high.matrix.0[i][j]);
                assert!(close(m.0[i][j], avg, 1e-12));
            }
        }
        assert!(close(mired_midpoint(&cfg).kelvin(), mid.kelvin(), 1e-9));
    }

    #[test]
    fn ccm_interpolation_is_convex() {
        let cfg = IspConfig::default();
        for t in (1700..25000).step_by(250) {
            let m = interpolate_ccm(&cfg, Cct::new(t as f64));
            for i in 0..3 {
                for j in 0..3 {
                    let (a, b) = (cfg.ccm_low.matrix.0[i][j], cfg.ccm_high.matrix.0[i][j]);
                    assert!(m.0[i][j] >= a.min(b) - 1e-12 && m.0[i][j] <= a.max(b) + 1e-12);
                }
            }
        }
    }

    fn assert_identity(m: &ColorMatrix, tol: f64) {
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!(close(m.0[i][j], e, tol), "{m:?}");
            }
        }
    }

    #[test]
    fn matrix_pairs_compose_to_identity() {
        assert_identity(&XYZ_TO_PROPHOTO.mul(&PROPHOTO_TO_XYZ), 1e-5);
        assert_identity(&PROPHOTO_TO_XYZ.mul(&XYZ_TO_PROPHOTO), 1e-5);
        assert_identity(&XYZ_TO_SRGB.mul(&SRGB_TO_XYZ), 1e-5);
        assert_identity(&prophoto_to_srgb_matrix().mul(&srgb_to_prophoto_matrix()), 1e-5);
        let cfg = IspConfig::default();
        let m = cfg.ccm_low.matrix;
        assert_identity(&m.mul(&m.inverse().unwrap()), 1e-9);
    }

    #[test]
    fn d50_white_is_prophoto_unity() {
        let p = XYZ_TO_PROPHOTO.apply(D50_WHITE);
        for v in p {
            assert!(close(v, 1.0, 1e-3), "{p:?}");
        }
        let s = prophoto_to_srgb_matrix().apply([1.0; 3]);
        for v in s {
            assert!(close(v, 1.0, 1e-3), "{s:?}");
        }
    }

    #[test]
    fn black_stays_black() {
        let img = RgbImage::filled(2, 2, [0.0; 3], ColorSpace::CameraRgb);
        let cfg = IspConfig::default();
        let xyz = camera_to_xyz(&img, &cfg.ccm_low.matrix).unwrap();
        let pro = xyz_to_prophoto(&xyz).unwrap();
        let lin = prophoto_to_srgb_linear(&pro).unwrap();
        assert!(lin.pixels.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_space_is_rejected() {
        let img = RgbImage::filled(2, 2, [0.1; 3], ColorSpace::CameraRgb);
        assert!(matches!(xyz_to_prophoto(&img), Err(Error::SpaceMismatch { .. })));
        assert!(matches!(srgb_gamma_encode(&img), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn aces_values() {
        assert_eq!(aces_fit(0.0), 0.0);
        assert!(close(aces_fit(1.0), 2.54 / 3.16, 1e-12));
        assert!(close(aces_fit(1.0), 0.80380, 1e-4));
        let mut last = 0.0;
        for i in 0..10_000 {
            let v = aces_fit(i as f64 * 1e-3);
            assert!(v >= last && (0.0..=1.0).contains(&v));
            last = v;
        }
        assert!(close(reinhard(1.0), 0.5, 1e-12));
    }

    #[test]
    fn negative_tonemap_input() {
        let img = RgbImage::filled(1, 1, [-0.1, 0.2, 0.3], ColorSpace::ProPhoto);
        assert!(matches!(tonemap(&img, Tonemap::AcesFit, false), Err(Error::Domain(_))));
        let t = tonemap(&img, Tonemap::AcesFit, true).unwrap();
        assert_eq!(t.pixels[0][0], 0.0);
    }

    #[test]
    fn srgb_transfer() {
        assert_eq!(srgb_encode(0.0), 0.0);
        assert!(close(srgb_encode(1.0), 1.0, 1e-12));
        let lin = 12.92 * 0.0031308;
        let pow = 1.055 * 0.0031308f64.powf(1.0 / 2.4) - 0.055;
        assert!(close(lin, 0.04045, 1e-5) && close(pow, lin, 1e-6));
        assert!(close(srgb_encode(0.18), 1.055 * 0.18f64.powf(1.0 / 2.4) - 0.055, 1e-15));
        assert!(close(srgb_encode(0.18), 0.4613, 1e-4));
    }

    #[test]
    fn quantize_rounds_half_away() {
        let img = RgbImage::new(
            2,
            1,
            vec![[0.5 / 255.0, 1.5 / 255.0, 1.0], [0.0, 0.49 / 255.0, 2.0]],
            ColorSpace::SrgbEncoded,
        )
        .unwrap();
        assert_eq!(quantize(&img).unwrap().data, vec![1, 2, 255, 0, 0, 255]);
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = IspConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(IspConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.digest().unwrap(), IspConfig::from_toml(&text).unwrap().digest().unwrap());
        let mut bad = cfg.clone();
        bad.ccm_low.temperature = 7000.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.white_balance = WhiteBalance::Gains([1.0, 0.0, 1.0]);
        assert!(bad.validate().is_err());
        let mut c = cfg;
        assert!(c.disable_stage("bogus").is_err());
        c.disable_stage("tonemap").unwrap();
        assert!(!c.stages.tonemap);
    }

    #[test]
    fn neutral_maps_to_d50() {
        let m = Plane::from_fn(16, 16, |x, y| match Cfa::Gbrg.channel_at(x, y) {
            crate::raw::Channel::R => 0.15,
            crate::raw::Channel::G => 0.3,
            crate::raw::Channel::B => 0.2,
        });
        let cfg = IspConfig::default();
        let s = estimate_color_state(&m, Cfa::Gbrg, &cfg).unwrap();
        let w = s.camera_to_xyz.apply([1.0; 3]);
        for c in 0..3 {
            assert!(close(w[c], D50_WHITE[c], 1e-9), "{w:?}");
        }
        assert!(s.cct.is_some());
    }
}
