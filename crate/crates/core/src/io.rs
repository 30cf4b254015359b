//! On-disk formats: RAW frames with sidecar manifests, clip directories,
//! 8-bit PNG frames and atomic writes.
//!
//! A RAW frame is stored as `NNNNNN.raw` (little-endian `u16`, row-major)
//! next to `NNNNNN.meta`, a TOML document holding `width`, `height`, `cfa`,
//! `black_level`, `white_level` and `iso`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::Rgb8Image;
use crate::raw::{BayerFrame, Cfa};

pub const RAW_EXT: &str = "raw";
pub const META_EXT: &str = "meta";
/// Version of the RAW frame + sidecar layout.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub width: usize,
    pub height: usize,
    pub cfa: Cfa,
    pub black_level: u16,
    pub white_level: u16,
    pub iso: u32,
}

impl From<&BayerFrame> for FrameMeta {
    fn from(f: &BayerFrame) -> Self {
        FrameMeta {
            width: f.width,
            height: f.height,
            cfa: f.cfa,
            black_level: f.black_level,
            white_level: f.white_level,
            iso: f.iso,
        }
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

/// Serde adapter writing a `u64` as a decimal string, since TOML integers
/// are signed 64-bit. Plain integers are still accepted on input.
pub mod u64_text {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Text(String),
        Int(i64),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Text(t) => t.parse().map_err(de::Error::custom),
            Repr::Int(i) => u64::try_from(i).map_err(de::Error::custom),
        }
    }
}

pub fn frame_name(index: usize) -> String {
    format!("{index:06}")
}

/// Path of the sidecar manifest belonging to a `.raw` file.
pub fn meta_path(raw_path: &Path) -> PathBuf {
    raw_path.with_extension(META_EXT)
}

pub fn write_raw_frame(raw_path: &Path, frame: &BayerFrame) -> Result<()> {
    let mut bytes = Vec::with_capacity(frame.samples.len() * 2);
    for s in &frame.samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    write_atomic(raw_path, &bytes)?;
    write_atomic(
        &meta_path(raw_path),
        to_toml(&FrameMeta::from(frame))?.as_bytes(),
    )
}

pub fn read_raw_frame(raw_path: &Path) -> Result<BayerFrame> {
    let meta: FrameMeta = read_toml(&meta_path(raw_path))?;
    let bytes = fs::read(raw_path).map_err(|e| Error::io(raw_path, e))?;
    if bytes.len() != meta.width * meta.height * 2 {
        return Err(Error::format(
            raw_path,
            format!(
                "expected {} bytes for {}x{}, found {}",
                meta.width * meta.height * 2,
                meta.width,
                meta.height,
                bytes.len()
            ),
        ));
    }
    let samples = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    BayerFrame::new(
        meta.width,
        meta.height,
        meta.cfa,
        samples,
        meta.black_level,
        meta.white_level,
        meta.iso,
    )
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Sub-directories of `dir`, sorted by name.
pub fn list_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_raw_clip(dir: &Path) -> Result<Vec<BayerFrame>> {
    let files = list_with_extension(dir, RAW_EXT)?;
    if files.is_empty() {
        return Err(Error::format(dir, "clip directory holds no .raw frames"));
    }
    files.iter().map(|p| read_raw_frame(p)).collect()
}

pub fn write_raw_clip(dir: &Path, frames: &[BayerFrame]) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        write_raw_frame(&dir.join(format!("{}.{RAW_EXT}", frame_name(i))), f)?;
    }
    Ok(())
}

pub fn encode_png(img: &Rgb8Image) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf).write_image(
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

pub fn write_png(path: &Path, img: &Rgb8Image) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

pub fn read_png(path: &Path) -> Result<Rgb8Image> {
    let img = image::open(path)?.to_rgb8();
    Ok(Rgb8Image {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

pub fn read_png_clip(dir: &Path) -> Result<Vec<Rgb8Image>> {
    let files = list_with_extension(dir, "png")?;
    if files.is_empty() {
        return Err(Error::format(dir, "directory holds no .png frames"));
    }
    files.iter().map(|p| read_png(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_u64_survives_toml() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct S {
            #[serde(with = "u64_text")]
            seed: u64,
        }
        let v = S { seed: u64::MAX };
        let text = to_toml(&v).unwrap();
        assert_eq!(toml::from_str::<S>(&text).unwrap(), v);
        assert_eq!(toml::from_str::<S>("seed = 42").unwrap().seed, 42);
        assert!(toml::from_str::<S>("seed = -1").is_err());
    }

    #[test]
    fn raw_frame_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let f = BayerFrame::new(4, 2, Cfa::Gbrg, (0..8).map(|v| v * 500).collect(), 64, 16383, 800)
            .unwrap();
        let path = dir.path().join("000000.raw");
        write_raw_frame(&path, &f).unwrap();
        assert!(meta_path(&path).exists());
        assert_eq!(read_raw_frame(&path).unwrap(), f);
        let meta = read_text(&meta_path(&path)).unwrap();
        assert!(meta.contains("cfa = \"GBRG\""));
    }

    #[test]
    fn truncated_raw_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = BayerFrame::new(2, 2, Cfa::Gbrg, vec![1; 4], 0, 100, 100).unwrap();
        let path = dir.path().join("a.raw");
        write_raw_frame(&path, &f).unwrap();
        fs::write(&path, [0u8; 6]).unwrap();
        assert!(matches!(read_raw_frame(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Rgb8Image {
            width: 3,
            height: 2,
            data: (0..18).map(|v| v as u8 * 10).collect(),
        };
        let p = dir.path().join("x.png");
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }
}
