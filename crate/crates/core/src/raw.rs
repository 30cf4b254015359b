//! Bayer RAW frames: normalisation, GBRG packing and bilinear demosaicing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::{reflect, Plane};

/// Colour channel of a sensor site or an RGB plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }
}

/// 2x2 colour filter array tile, named in reading order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Cfa {
    #[default]
    Gbrg,
    Rggb,
    Grbg,
    Bggr,
}

impl Cfa {
    /// Channel sensed at mosaic coordinate `(x, y)`.
    #[inline]
    pub fn channel_at(self, x: usize, y: usize) -> Channel {
        let tile = match self {
            Cfa::Gbrg => [Channel::G, Channel::B, Channel::R, Channel::G],
            Cfa::Rggb => [Channel::R, Channel::G, Channel::G, Channel::B],
            Cfa::Grbg => [Channel::G, Channel::R, Channel::B, Channel::G],
            Cfa::Bggr => [Channel::B, Channel::G, Channel::G, Channel::R],
        };
        tile[(y & 1) * 2 + (x & 1)]
    }

    pub fn ensure_supported(self) -> Result<()> {
        match self {
            Cfa::Gbrg => Ok(()),
            other => Err(Error::UnsupportedPattern(other.to_string())),
        }
    }
}

impl fmt::Display for Cfa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cfa::Gbrg => "GBRG",
            Cfa::Rggb => "RGGB",
            Cfa::Grbg => "GRBG",
            Cfa::Bggr => "BGGR",
        })
    }
}

impl FromStr for Cfa {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GBRG" => Ok(Cfa::Gbrg),
            "RGGB" => Ok(Cfa::Rggb),
            "GRBG" => Ok(Cfa::Grbg),
            "BGGR" => Ok(Cfa::Bggr),
            _ => Err(Error::UnsupportedPattern(s.to_string())),
        }
    }
}

/// Single-channel CFA mosaic with its sensor levels.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerFrame {
    pub width: usize,
    pub height: usize,
    pub cfa: Cfa,
    pub samples: Vec<u16>,
    pub black_level: u16,
    pub white_level: u16,
    pub iso: u32,
}

impl BayerFrame {
    pub fn new(
        width: usize,
        height: usize,
        cfa: Cfa,
        samples: Vec<u16>,
        black_level: u16,
        white_level: u16,
        iso: u32,
    ) -> Result<Self> {
        if !width.is_multiple_of(2) || !height.is_multiple_of(2) || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "Bayer frame must have even non-zero dimensions, got {width}x{height}"
            )));
        }
        if samples.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} frame needs {} samples, got {}",
                width * height,
                samples.len()
            )));
        }
        if black_level >= white_level {
            return Err(Error::Config(format!(
                "black level {black_level} must be below white level {white_level}"
            )));
        }
        Ok(Self {
            width,
            height,
            cfa,
            samples,
            black_level,
            white_level,
            iso,
        })
    }

    /// Builds a frame from a normalised mosaic by inverting [`normalize`],
    /// rounding to the nearest sensor count.
    pub fn from_normalized(
        mosaic: &Plane,
        cfa: Cfa,
        black_level: u16,
        white_level: u16,
        iso: u32,
    ) -> Result<Self> {
        if black_level >= white_level {
            return Err(Error::Config(format!(
                "black level {black_level} must be below white level {white_level}"
            )));
        }
        let range = (white_level - black_level) as f32;
        let samples = mosaic
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * range + black_level as f32).round() as u16)
            .collect();
        Self::new(
            mosaic.width,
            mosaic.height,
            cfa,
            samples,
            black_level,
            white_level,
            iso,
        )
    }
}

/// Maps raw counts to `[0, 1]` using the frame's black and white levels.
pub fn normalize(frame: &BayerFrame) -> Result<Plane> {
    if frame.black_level >= frame.white_level {
        return Err(Error::Config(format!(
            "black level {} must be below white level {}",
            frame.black_level, frame.white_level
        )));
    }
    let black = frame.black_level as f32;
    let range = (frame.white_level - frame.black_level) as f32;
    let data = frame
        .samples
        .iter()
        .map(|&s| ((s as f32 - black) / range).clamp(0.0, 1.0))
        .collect();
    Plane::new(frame.width, frame.height, data)
}

/// Half-resolution four-plane image; plane order follows the GBRG tile:
/// `0 = G(top-left)`, `1 = B(top-right)`, `2 = R(bottom-left)`, `3 = G(bottom-right)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedRaw {
    pub width: usize,
    pub height: usize,
    pub planes: [Vec<f32>; 4],
}

impl PackedRaw {
    pub fn get(&self, plane: usize, x: usize, y: usize) -> f32 {
        self.planes[plane][y * self.width + x]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<PackedRaw> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds packed {}x{}",
                self.width, self.height
            )));
        }
        let planes = std::array::from_fn(|p| {
            let mut out = Vec::with_capacity(w * h);
            for y in y0..y0 + h {
                let row = y * self.width;
                out.extend_from_slice(&self.planes[p][row + x0..row + x0 + w]);
            }
            out
        });
        Ok(PackedRaw {
            width: w,
            height: h,
            planes,
        })
    }
}

pub fn pack_gbrg(mosaic: &Plane, cfa: Cfa) -> Result<PackedRaw> {
    cfa.ensure_supported()?;
    if !mosaic.width.is_multiple_of(2) || !mosaic.height.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "packing needs even dimensions, got {}x{}",
            mosaic.width, mosaic.height
        )));
    }
    let (w, h) = (mosaic.width / 2, mosaic.height / 2);
    let mut planes: [Vec<f32>; 4] = std::array::from_fn(|_| Vec::with_capacity(w * h));
    for y in 0..h {
        for x in 0..w {
            let (mx, my) = (2 * x, 2 * y);
            planes[0].push(mosaic.get(mx, my));
            planes[1].push(mosaic.get(mx + 1, my));
            planes[2].push(mosaic.get(mx, my + 1));
            planes[3].push(mosaic.get(mx + 1, my + 1));
        }
    }
    Ok(PackedRaw {
        width: w,
        height: h,
        planes,
    })
}

pub fn unpack_gbrg(packed: &PackedRaw) -> Result<Plane> {
    let n = packed.width * packed.height;
    if packed.planes.iter().any(|p| p.len() != n) {
        return Err(Error::Shape(format!(
            "packed planes must each hold {n} samples"
        )));
    }
    let mut out = Plane::filled(packed.width * 2, packed.height * 2, 0.0);
    for y in 0..packed.height {
        for x in 0..packed.width {
            let i = y * packed.width + x;
            out.set(2 * x, 2 * y, packed.planes[0][i]);
            out.set(2 * x + 1, 2 * y, packed.planes[1][i]);
            out.set(2 * x, 2 * y + 1, packed.planes[2][i]);
            out.set(2 * x + 1, 2 * y + 1, packed.planes[3][i]);
        }
    }
    Ok(out)
}

/// Colour space carried by an [`RgbImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    CameraRgb,
    Xyz,
    ProPhoto,
    ProPhotoTonemapped,
    SrgbLinear,
    SrgbEncoded,
}

impl ColorSpace {
    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::CameraRgb => "cameraRGB",
            ColorSpace::Xyz => "XYZ",
            ColorSpace::ProPhoto => "ProPhoto",
            ColorSpace::ProPhotoTonemapped => "ProPhoto (tonemapped)",
            ColorSpace::SrgbLinear => "sRGB-linear",
            ColorSpace::SrgbEncoded => "sRGB-encoded",
        }
    }
}

/// Three-channel float image, pixels stored interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
    pub space: ColorSpace,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f32; 3]>, space: ColorSpace) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            space,
        })
    }

    pub fn filled(width: usize, height: usize, value: [f32; 3], space: ColorSpace) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
            space,
        }
    }

    pub fn channel(&self, c: Channel) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|p| p[c.index()]).collect(),
        }
    }

    pub(crate) fn expect_space(&self, expected: ColorSpace) -> Result<()> {
        if self.space == expected {
            Ok(())
        } else {
            Err(Error::SpaceMismatch {
                expected: expected.name(),
                found: self.space.name(),
            })
        }
    }
}

/// Bilinear demosaic: each missing channel is the mean of the same-channel
/// sites in the 3x3 neighbourhood, with the mosaic reflect-padded by one pixel.
/// Native samples pass through unchanged.
pub fn demosaic_bilinear(mosaic: &Plane, cfa: Cfa) -> Result<RgbImage> {
    cfa.ensure_supported()?;
    if mosaic.width < 2 || mosaic.height < 2 || !mosaic.width.is_multiple_of(2) || !mosaic.height.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "demosaic needs even dimensions of at least 2, got {}x{}",
            mosaic.width, mosaic.height
        )));
    }
    let (w, h) = (mosaic.width, mosaic.height);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let native = cfa.channel_at(x, y);
            let mut sum = [0.0f32; 3];
            let mut count = [0u32; 3];
            for dy in -1isize..=1 {
                let sy = reflect(y as isize + dy, h);
                for dx in -1isize..=1 {
                    let sx = reflect(x as isize + dx, w);
                    // Reflection by one keeps CFA parity, so the channel of the
                    // padded site is the channel of the virtual position.
                    let c = cfa.channel_at(sx, sy).index();
                    sum[c] += mosaic.get(sx, sy);
                    count[c] += 1;
                }
            }
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = if c == native.index() {
                    mosaic.get(x, y)
                } else {
                    sum[c] / count[c] as f32
                };
            }
            pixels.push(px);
        }
    }
    RgbImage::new(w, h, pixels, ColorSpace::CameraRgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(samples: Vec<u16>, w: usize, h: usize) -> BayerFrame {
        BayerFrame::new(w, h, Cfa::Gbrg, samples, 256, 4095, 100).unwrap()
    }

    #[test]
    fn normalize_maps_levels_to_unit_range() {
        let f = frame(vec![256, 4095, 2175, 0], 2, 2);
        let n = normalize(&f).unwrap();
        assert_eq!(n.data[0], 0.0);
        assert_eq!(n.data[1], 1.0);
        assert!((n.data[2] as f64 - 1919.0 / 3839.0).abs() < 1e-6);
        assert!((n.data[2] - 0.49987).abs() < 1e-5);
        // below black clamps
        assert_eq!(n.data[3], 0.0);
    }

    #[test]
    fn degenerate_levels_are_rejected() {
        assert!(matches!(
            BayerFrame::new(2, 2, Cfa::Gbrg, vec![0; 4], 100, 100, 100),
            Err(Error::Config(_))
        ));
        let mut f = frame(vec![0; 4], 2, 2);
        f.black_level = 5000;
        assert!(matches!(normalize(&f), Err(Error::Config(_))));
    }

    #[test]
    fn odd_dimensions_are_rejected() {
        assert!(BayerFrame::new(3, 2, Cfa::Gbrg, vec![0; 6], 0, 10, 1).is_err());
        let p = Plane::filled(3, 2, 0.5);
        assert!(matches!(pack_gbrg(&p, Cfa::Gbrg), Err(Error::Shape(_))));
    }

    #[test]
    fn non_gbrg_patterns_are_rejected() {
        let p = Plane::filled(4, 4, 0.5);
        assert!(matches!(
            pack_gbrg(&p, Cfa::Rggb),
            Err(Error::UnsupportedPattern(_))
        ));
        assert!(matches!(
            demosaic_bilinear(&p, Cfa::Bggr),
            Err(Error::UnsupportedPattern(_))
        ));
    }

    #[test]
    fn pack_single_cell_plane_order() {
        let p = Plane::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let packed = pack_gbrg(&p, Cfa::Gbrg).unwrap();
        assert_eq!((packed.width, packed.height), (1, 1));
        let px: Vec<f32> = (0..4).map(|i| packed.get(i, 0, 0)).collect();
        assert_eq!(px, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(Cfa::Gbrg.channel_at(0, 0), Channel::G);
        assert_eq!(Cfa::Gbrg.channel_at(1, 0), Channel::B);
        assert_eq!(Cfa::Gbrg.channel_at(0, 1), Channel::R);
        assert_eq!(Cfa::Gbrg.channel_at(1, 1), Channel::G);
    }

    #[test]
    fn full_hd_packs_to_half_resolution() {
        let p = Plane::filled(1920, 1080, 0.0);
        let packed = pack_gbrg(&p, Cfa::Gbrg).unwrap();
        assert_eq!((packed.width, packed.height), (960, 540));
        let back = unpack_gbrg(&packed).unwrap();
        assert_eq!((back.width, back.height), (1920, 1080));
    }

    #[test]
    fn constant_planes_unpack_to_constant_mosaic() {
        let packed = PackedRaw {
            width: 3,
            height: 2,
            planes: std::array::from_fn(|_| vec![0.7; 6]),
        };
        let m = unpack_gbrg(&packed).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn demosaic_constant_mosaic_is_constant() {
        let m = Plane::filled(6, 4, 0.42);
        let rgb = demosaic_bilinear(&m, Cfa::Gbrg).unwrap();
        assert!(rgb.pixels.iter().all(|p| *p == [0.42, 0.42, 0.42]));
    }

    #[test]
    fn demosaic_passes_native_samples_through() {
        let m = Plane::from_fn(8, 8, |x, y| ((x * 7 + y * 13) % 11) as f32 / 11.0);
        let rgb = demosaic_bilinear(&m, Cfa::Gbrg).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let c = Cfa::Gbrg.channel_at(x, y).index();
                assert_eq!(rgb.pixels[y * 8 + x][c], m.get(x, y));
            }
        }
    }

    /// Reference: for an affine signal s(x) = a x + b, every interior missing
    /// sample averages positions symmetric about x, so it equals s(x).
    #[test]
    fn demosaic_reproduces_horizontal_ramp_in_interior() {
        let ramp = |x: usize| 0.05 + 0.1 * x as f32;
        let m = Plane::from_fn(8, 8, |x, _| ramp(x));
        let rgb = demosaic_bilinear(&m, Cfa::Gbrg).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                for c in 0..3 {
                    let v = rgb.pixels[y * 8 + x][c];
                    assert!((v - ramp(x)).abs() < 1e-6, "({x},{y}) c{c}: {v}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let (w, h) = (2 * w, 2 * h);
            let mut s = seed;
            let p = Plane::from_fn(w, h, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 40) as f32 / (1u64 << 24) as f32
            });
            let packed = pack_gbrg(&p, Cfa::Gbrg).unwrap();
            prop_assert_eq!(unpack_gbrg(&packed).unwrap(), p.clone());
            prop_assert_eq!(pack_gbrg(&unpack_gbrg(&packed).unwrap(), Cfa::Gbrg).unwrap(), packed);
        }

        #[test]
        fn normalize_is_monotone(a in any::<u16>(), b in any::<u16>()) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let f = BayerFrame::new(2, 2, Cfa::Gbrg, vec![lo, hi, 0, 0], 64, 16383, 100).unwrap();
            let n = normalize(&f).unwrap();
            prop_assert!(n.data[0] <= n.data[1]);
        }
    }
}
