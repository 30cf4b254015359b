//! Noisy/clean clip pair generation, patch extraction, clip selection and
//! train/test splitting, plus the on-disk dataset layout.
//!
//! Layout under a dataset root:
//!
//! ```text
//! <root>/<clip_id>/clean_raw/NNNNNN.raw (+ .meta)
//! <root>/<clip_id>/noisy_raw/NNNNNN.raw (+ .meta)
//! <root>/<clip_id>/clean_srgb/NNNNNN.png
//! <root>/<clip_id>/noisy_srgb/NNNNNN.png
//! <root>/<clip_id>/manifest
//! <root>/split
//! ```

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::isp::{estimate_color_state, render_mosaic, IspConfig, Rgb8Image};
use crate::noise::{params_for_iso, sample_noisy_mosaic, CalibrationTable, NoiseParams, SeedSpec};
use crate::raw::{normalize, pack_gbrg, BayerFrame, PackedRaw};

pub const CLEAN_RAW_DIR: &str = "clean_raw";
pub const NOISY_RAW_DIR: &str = "noisy_raw";
pub const CLEAN_SRGB_DIR: &str = "clean_srgb";
pub const NOISY_SRGB_DIR: &str = "noisy_srgb";
pub const MANIFEST_FILE: &str = "manifest";
pub const SPLIT_FILE: &str = "split";
pub const PATCHES_FILE: &str = "patches";

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_CLIP_LEN: usize = 25;
pub const DEFAULT_TRAIN_RATIO: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoisePreset {
    Heavy,
    Medium,
    Light,
}

impl NoisePreset {
    pub const ALL: [NoisePreset; 3] = [NoisePreset::Heavy, NoisePreset::Medium, NoisePreset::Light];

    pub fn iso(self) -> f64 {
        match self {
            NoisePreset::Heavy => 20000.0,
            NoisePreset::Medium => 8000.0,
            NoisePreset::Light => 2500.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NoisePreset::Heavy => "heavy",
            NoisePreset::Medium => "medium",
            NoisePreset::Light => "light",
        }
    }
}

impl fmt::Display for NoisePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for NoisePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "heavy" => Ok(NoisePreset::Heavy),
            "medium" => Ok(NoisePreset::Medium),
            "light" => Ok(NoisePreset::Light),
            _ => Err(Error::Parameter(format!(
                "unknown preset '{s}', expected heavy, medium or light"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    Preset(NoisePreset),
    Iso(f64),
}

impl NoiseLevel {
    pub fn iso(self) -> f64 {
        match self {
            NoiseLevel::Preset(p) => p.iso(),
            NoiseLevel::Iso(iso) => iso,
        }
    }

    /// Component of the per-clip seed; distinct levels get distinct noise.
    pub fn seed_label(self) -> String {
        match self {
            NoiseLevel::Preset(p) => p.label().to_string(),
            NoiseLevel::Iso(iso) => format!("iso{iso}"),
        }
    }
}

/// Everything needed to regenerate a clip's noisy streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub clip_id: String,
    pub iso: f64,
    pub noise: NoiseParams,
    pub isp_digest: String,
    /// Global seed of the clip's noise streams.
    #[serde(with = "io::u64_text")]
    pub seed: u64,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<NoisePreset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPair {
    pub clean_raw: Vec<BayerFrame>,
    pub noisy_raw: Vec<BayerFrame>,
    pub clean_srgb: Vec<Rgb8Image>,
    pub noisy_srgb: Vec<Rgb8Image>,
    pub manifest: ClipManifest,
}

impl ClipPair {
    pub fn len(&self) -> usize {
        self.clean_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_raw.is_empty()
    }
}

/// Per-clip seed from the global seed, clip id and noise level.
pub fn clip_seed(global: u64, clip_id: &str, level: NoiseLevel) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(clip_id.as_bytes());
    h.update([0]);
    h.update(level.seed_label().as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn check_clip(clean: &[BayerFrame]) -> Result<()> {
    let first = clean
        .first()
        .ok_or_else(|| Error::Parameter("clip has no frames".into()))?;
    for f in clean {
        if (f.width, f.height, f.cfa) != (first.width, first.height, first.cfa) {
            return Err(Error::Shape(format!(
                "clip frames differ in geometry: {}x{} {} vs {}x{} {}",
                first.width, first.height, first.cfa, f.width, f.height, f.cfa
            )));
        }
        f.cfa.ensure_supported()?;
    }
    Ok(())
}

/// Noisy RAW frames for a clip, bit-exact for a given manifest.
pub fn synthesize_noisy_raw(clean: &[BayerFrame], manifest: &ClipManifest) -> Result<Vec<BayerFrame>> {
    check_clip(clean)?;
    manifest.noise.validate()?;
    let iso = manifest.iso.round() as u32;
    if manifest.noise.is_zero() {
        return Ok(clean.iter().map(|f| BayerFrame { iso, ..f.clone() }).collect());
    }
    let seed = SeedSpec::new(manifest.seed);
    clean
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let y = normalize(f)?;
            let x = sample_noisy_mosaic(&y, f.cfa, &manifest.noise, seed.with_frame(i as u64))?;
            BayerFrame::from_normalized(&x, f.cfa, f.black_level, f.white_level, iso)
        })
        .collect()
}

/// Renders clean and noisy RAW through the same ISP; colour decisions for
/// each frame come from its clean version.
pub fn render_pair(
    clean: &[BayerFrame],
    noisy: &[BayerFrame],
    isp: &IspConfig,
) -> Result<(Vec<Rgb8Image>, Vec<Rgb8Image>)> {
    if clean.len() != noisy.len() {
        return Err(Error::Shape("clean and noisy streams differ in length".into()));
    }
    let rendered: Result<Vec<(Rgb8Image, Rgb8Image)>> = clean
        .par_iter()
        .zip(noisy.par_iter())
        .map(|(c, n)| {
            let yc = normalize(c)?;
            let yn = normalize(n)?;
            let state = estimate_color_state(&yc, c.cfa, isp)?;
            Ok((render_mosaic(&yc, c.cfa, &state, isp)?, render_mosaic(&yn, n.cfa, &state, isp)?))
        })
        .collect();
    Ok(rendered?.into_iter().unzip())
}

pub fn build_pair(
    clip_id: &str,
    clean: &[BayerFrame],
    level: NoiseLevel,
    isp: &IspConfig,
    table: &CalibrationTable,
    seed: u64,
) -> Result<ClipPair> {
    let iso = level.iso();
    let (lo, hi) = table.iso_range();
    if iso < lo || iso > hi {
        warn!("ISO {iso} outside calibrated range [{lo}, {hi}], clamping");
    }
    let noise = params_for_iso(table, iso)?;
    build_pair_with_params(clip_id, clean, level, noise, isp, seed)
}

/// As [`build_pair`] with explicit noise parameters.
pub fn build_pair_with_params(
    clip_id: &str,
    clean: &[BayerFrame],
    level: NoiseLevel,
    noise: NoiseParams,
    isp: &IspConfig,
    seed: u64,
) -> Result<ClipPair> {
    let manifest = ClipManifest {
        clip_id: clip_id.to_string(),
        iso: noise.iso,
        noise,
        isp_digest: isp.digest()?,
        seed: clip_seed(seed, clip_id, level),
        frames: clean.len(),
        preset: match level {
            NoiseLevel::Preset(p) => Some(p),
            NoiseLevel::Iso(_) => None,
        },
    };
    regenerate(clean, &manifest, isp)
}

/// Rebuilds a pair from its manifest; fails if the ISP configuration differs.
pub fn regenerate(clean: &[BayerFrame], manifest: &ClipManifest, isp: &IspConfig) -> Result<ClipPair> {
    let digest = isp.digest()?;
    if digest != manifest.isp_digest {
        return Err(Error::Config(format!(
            "ISP configuration digest {digest} does not match manifest {}",
            manifest.isp_digest
        )));
    }
    if clean.len() != manifest.frames {
        return Err(Error::Shape(format!(
            "manifest expects {} frames, clip has {}",
            manifest.frames,
            clean.len()
        )));
    }
    let noisy_raw = synthesize_noisy_raw(clean, manifest)?;
    let (clean_srgb, noisy_srgb) = render_pair(clean, &noisy_raw, isp)?;
    Ok(ClipPair {
        clean_raw: clean.to_vec(),
        noisy_raw,
        clean_srgb,
        noisy_srgb,
        manifest: manifest.clone(),
    })
}

/// The eight rotations/flips of a square grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    /// `code & 3` quarter turns counter-clockwise, then a horizontal flip if `code & 4`.
    pub fn new(code: u8) -> Result<Self> {
        if code < 8 {
            Ok(Dihedral(code))
        } else {
            Err(Error::Parameter(format!("transform code must be < 8, got {code}")))
        }
    }

    pub fn code(self) -> u8 {
        self.0
    }

    /// Source coordinate for output pixel `(x, y)` of an `n`x`n` square.
    #[inline]
    fn source(self, x: usize, y: usize, n: usize) -> (usize, usize) {
        let x = if self.0 & 4 != 0 { n - 1 - x } else { x };
        match self.0 & 3 {
            0 => (x, y),
            1 => (n - 1 - y, x),
            2 => (n - 1 - x, n - 1 - y),
            _ => (y, n - 1 - x),
        }
    }

    pub fn apply<T: Copy>(self, data: &[T], n: usize, channels: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(data.len());
        for y in 0..n {
            for x in 0..n {
                let (sx, sy) = self.source(x, y, n);
                let s = (sy * n + sx) * channels;
                out.extend_from_slice(&data[s..s + channels]);
            }
        }
        out
    }
}

/// Patch position: origin in packed (half-resolution) coordinates, shared
/// by every frame of the clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub index: usize,
    pub x: usize,
    pub y: usize,
    /// Side length in mosaic / sRGB pixels.
    pub size: usize,
    pub transform: Dihedral,
}

impl PatchSpec {
    pub fn mosaic_origin(&self) -> (usize, usize) {
        (2 * self.x, 2 * self.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub spec: PatchSpec,
    pub clean_raw: Vec<PackedRaw>,
    pub noisy_raw: Vec<PackedRaw>,
    pub clean_srgb: Vec<Rgb8Image>,
    pub noisy_srgb: Vec<Rgb8Image>,
}

pub fn sample_patch_specs(
    width: usize,
    height: usize,
    size: usize,
    count: usize,
    seed: u64,
    augment: bool,
) -> Result<Vec<PatchSpec>> {
    if size == 0 || !size.is_multiple_of(2) {
        return Err(Error::Parameter(format!("patch size must be even and positive, got {size}")));
    }
    if size > width || size > height {
        return Err(Error::Shape(format!(
            "patch size {size} exceeds frame {width}x{height}"
        )));
    }
    let (pw, ph, ps) = (width / 2, height / 2, size / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|index| {
            let x = rng.gen_range(0..=pw - ps);
            let y = rng.gen_range(0..=ph - ps);
            let transform = if augment {
                Dihedral(rng.gen_range(0..8))
            } else {
                Dihedral::IDENTITY
            };
            PatchSpec { index, x, y, size, transform }
        })
        .collect())
}

fn cut_packed(frame: &BayerFrame, spec: &PatchSpec) -> Result<PackedRaw> {
    let n = spec.size / 2;
    let p = pack_gbrg(&normalize(frame)?, frame.cfa)?.crop(spec.x, spec.y, n, n)?;
    Ok(PackedRaw {
        width: n,
        height: n,
        planes: p.planes.map(|pl| spec.transform.apply(&pl, n, 1)),
    })
}

fn cut_srgb(img: &Rgb8Image, spec: &PatchSpec) -> Result<Rgb8Image> {
    let (x, y) = spec.mosaic_origin();
    let c = img.crop(x, y, spec.size, spec.size)?;
    Ok(Rgb8Image {
        data: spec.transform.apply(&c.data, spec.size, 3),
        ..c
    })
}

/// Random aligned patches over all frames of a pair.
pub fn extract_patches(pair: &ClipPair, size: usize, count: usize, seed: u64, augment: bool) -> Result<Vec<Patch>> {
    let first = pair
        .clean_raw
        .first()
        .ok_or_else(|| Error::Parameter("clip has no frames".into()))?;
    let specs = sample_patch_specs(first.width, first.height, size, count, seed, augment)?;
    specs
        .par_iter()
        .map(|spec| {
            let raw = |frames: &[BayerFrame]| frames.iter().map(|f| cut_packed(f, spec)).collect::<Result<Vec<_>>>();
            let srgb = |frames: &[Rgb8Image]| frames.iter().map(|f| cut_srgb(f, spec)).collect::<Result<Vec<_>>>();
            Ok(Patch {
                spec: *spec,
                clean_raw: raw(&pair.clean_raw)?,
                noisy_raw: raw(&pair.noisy_raw)?,
                clean_srgb: srgb(&pair.clean_srgb)?,
                noisy_srgb: srgb(&pair.noisy_srgb)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub ratio: f64,
    #[serde(with = "io::u64_text")]
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn split_dataset(clip_ids: &[String], ratio: f64, seed: u64) -> Result<SplitManifest> {
    if clip_ids.is_empty() {
        return Err(Error::Parameter("cannot split an empty clip list".into()));
    }
    if clip_ids.len() < 2 {
        return Err(Error::Parameter("need at least two clips to split".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Parameter(format!("train ratio must be in [0, 1], got {ratio}")));
    }
    let mut ids = clip_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != clip_ids.len() {
        return Err(Error::Parameter("clip ids must be unique".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * ids.len() as f64).round() as usize;
    let test = ids.split_off(n_train);
    Ok(SplitManifest {
        ratio,
        seed,
        train: ids,
        test,
    })
}

/// Non-overlapping windows of `clip_len` frames, placed uniformly at random.
pub fn select_training_clips(
    video_len: usize,
    clips_per_video: usize,
    clip_len: usize,
    seed: u64,
) -> Result<Vec<Range<usize>>> {
    if clip_len == 0 || clips_per_video == 0 {
        return Err(Error::Parameter("clip length and clip count must be positive".into()));
    }
    if video_len < clip_len {
        return Err(Error::Parameter(format!(
            "video has {video_len} frames, shorter than one {clip_len}-frame clip"
        )));
    }
    let fit = video_len / clip_len;
    let k = if clips_per_video > fit {
        warn!("video of {video_len} frames fits only {fit} disjoint clips of {clip_len}, requested {clips_per_video}");
        fit
    } else {
        clips_per_video
    };
    let slack = video_len - k * clip_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaps: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=slack)).collect();
    gaps.sort_unstable();
    Ok(gaps
        .into_iter()
        .enumerate()
        .map(|(j, g)| {
            let start = g + j * clip_len;
            start..start + clip_len
        })
        .collect())
}

pub fn write_clip_pair(root: &Path, pair: &ClipPair) -> Result<()> {
    let dir = root.join(&pair.manifest.clip_id);
    io::write_raw_clip(&dir.join(CLEAN_RAW_DIR), &pair.clean_raw)?;
    io::write_raw_clip(&dir.join(NOISY_RAW_DIR), &pair.noisy_raw)?;
    for (sub, frames) in [(CLEAN_SRGB_DIR, &pair.clean_srgb), (NOISY_SRGB_DIR, &pair.noisy_srgb)] {
        frames.par_iter().enumerate().try_for_each(|(i, img)| {
            io::write_png(&dir.join(sub).join(format!("{}.png", io::frame_name(i))), img)
        })?;
    }
    io::write_atomic(&dir.join(MANIFEST_FILE), io::to_toml(&pair.manifest)?.as_bytes())
}

pub fn read_clip_manifest(clip_dir: &Path) -> Result<ClipManifest> {
    io::read_toml(&clip_dir.join(MANIFEST_FILE))
}

pub fn write_split(root: &Path, split: &SplitManifest) -> Result<()> {
    io::write_atomic(&root.join(SPLIT_FILE), io::to_toml(split)?.as_bytes())
}

pub fn read_split(root: &Path) -> Result<SplitManifest> {
    io::read_toml(&root.join(SPLIT_FILE))
}

/// One JSON object per line.
pub fn write_patch_index(clip_dir: &Path, specs: &[PatchSpec]) -> Result<()> {
    let mut text = String::new();
    for s in specs {
        text.push_str(&serde_json::to_string(s).map_err(|e| Error::Config(e.to_string()))?);
        text.push('\n');
    }
    io::write_atomic(&clip_dir.join(PATCHES_FILE), text.as_bytes())
}
