//! Named parameter tensors, their layout for a configuration, and the
//! manifest + flat binary file format.
//!
//! The manifest is plain text: a header line `rvdt-weights 1 <count>` then
//! one `name<TAB>d0xd1x..<TAB>byte_offset` line per tensor. The blob next to
//! it (same path, `.bin` extension) holds every tensor as little-endian `f32`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "rvdt-weights";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Weight { fan_in: usize },
    Bias { fan_in: usize },
    Gamma,
    Beta,
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    kind: Kind,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Specs(Vec<TensorSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: Kind) {
        self.0.push(TensorSpec { name, shape, kind });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        let fan_in = cin * k * k;
        self.push(format!("{name}.w"), vec![cout, cin, k, k], Kind::Weight { fan_in });
        if bias {
            self.push(format!("{name}.b"), vec![cout], Kind::Bias { fan_in });
        }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) {
        self.push(format!("{name}.w"), vec![cout, cin], Kind::Weight { fan_in: cin });
        self.push(format!("{name}.b"), vec![cout], Kind::Bias { fan_in: cin });
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.g"), vec![c], Kind::Gamma);
        self.push(format!("{name}.b"), vec![c], Kind::Beta);
    }

    fn attention(&mut self, name: &str, c: usize, heads: usize, table: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), c, c);
        }
        self.push(format!("{name}.rel_bias"), vec![table, heads], Kind::Table);
    }

    fn mlp(&mut self, name: &str, cfg: &ModelConfig) {
        let (c, hid) = (cfg.channels, cfg.hidden());
        self.norm(&format!("{name}.ln"), c);
        self.linear(&format!("{name}.m1"), c, hid);
        if cfg.csa_mlp {
            self.conv(&format!("{name}.sa"), 2, 1, 7, true);
            self.linear(&format!("{name}.ca1"), hid, hid / 4);
            self.linear(&format!("{name}.ca2"), hid / 4, hid);
            self.conv(&format!("{name}.conv"), 2 * hid, hid, 3, true);
            let fan_in = 9;
            self.push(format!("{name}.sca.w"), vec![hid, 1, 3, 3], Kind::Weight { fan_in });
            self.push(format!("{name}.sca.b"), vec![hid], Kind::Bias { fan_in });
        }
        self.linear(&format!("{name}.m2"), hid, c);
    }
}

pub fn table_2d(window: usize) -> usize {
    (2 * window - 1).pow(2)
}

pub fn table_3d(t: usize, window: usize) -> usize {
    (2 * t - 1) * table_2d(window)
}

pub fn spatial_prefix(k: usize) -> String {
    format!("spatial.{k}")
}

pub fn transmission_prefix(dir: Direction, s: usize) -> String {
    format!("temporal.{}.t{s}", dir.tag())
}

pub fn merging_prefix(dir: Direction) -> String {
    format!("temporal.{}.merge", dir.tag())
}

/// Every tensor implied by `cfg`, in file order.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let mut s = Specs(Vec::new());
    let (u, c, h) = (cfg.unet_channels, cfg.channels, cfg.heads);
    s.conv("enc.in0", cfg.input_channels(), u, 3, true);
    s.conv("enc.in1", u, u, 3, true);
    s.conv("enc.down0", u, 2 * u, 3, true);
    s.conv("enc.down1", 2 * u, 2 * u, 3, true);
    s.conv("enc.up", 2 * u, u, 3, true);
    s.conv("enc.skip", 2 * u, u, 3, true);
    s.conv("enc.ds0", u, c / 2, 3, true);
    s.conv("enc.ds1", c / 2, c, 3, true);
    for k in 0..cfg.spatial_blocks {
        let p = spatial_prefix(k);
        s.norm(&format!("{p}.ln"), c);
        s.attention(&format!("{p}.attn"), c, h, table_2d(cfg.window));
        s.mlp(&format!("{p}.mlp"), cfg);
    }
    for dir in [Direction::Forward, Direction::Backward] {
        for t in 0..cfg.layers - 1 {
            let p = transmission_prefix(dir, t);
            s.norm(&format!("{p}.ln"), c);
            s.attention(&format!("{p}.attn"), c, h, table_3d(cfg.temporal_window, cfg.window));
            s.mlp(&format!("{p}.mlp"), cfg);
        }
        let p = merging_prefix(dir);
        s.norm(&format!("{p}.ln_q"), c);
        s.norm(&format!("{p}.ln_kv"), c);
        s.attention(&format!("{p}.attn"), c, h, table_2d(cfg.window));
        s.mlp(&format!("{p}.mlp"), cfg);
    }
    s.conv("dec.fuse_fwd", c, 2 * c, 3, false);
    s.conv("dec.fuse_bwd", c, 2 * c, 3, false);
    s.push("dec.fuse.b".into(), vec![2 * c], Kind::Bias { fan_in: 2 * c * 9 });
    s.conv("dec.up", c / 2, c, 3, true);
    s.conv("dec.out", c / 4, cfg.out_channels, 3, true);
    s.0
}

/// Exact number of scalar parameters for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    tensor_specs(cfg).iter().map(TensorSpec::numel).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    names: Vec<String>,
    tensors: HashMap<String, Tensor>,
}

impl WeightSet {
    fn from_specs(specs: &[TensorSpec], mut fill: impl FnMut(&TensorSpec) -> Vec<f32>) -> Self {
        let mut tensors = HashMap::with_capacity(specs.len());
        for s in specs {
            tensors.insert(
                s.name.clone(),
                Tensor {
                    shape: s.shape.clone(),
                    data: fill(s),
                },
            );
        }
        Self {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        }
    }

    /// Every tensor zero, including layer-norm scales.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::from_specs(&tensor_specs(cfg), |s| vec![0.0; s.numel()])
    }

    /// Uniform in `+-1/sqrt(fan_in)` for kernels and biases, unit layer-norm
    /// scales, zero offsets and `+-0.02` position-bias tables.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_specs(&tensor_specs(cfg), |s| {
            let n = s.numel();
            match s.kind {
                Kind::Weight { fan_in } | Kind::Bias { fan_in } => {
                    let a = 1.0 / (fan_in as f32).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Kind::Gamma => vec![1.0; n],
                Kind::Beta => vec![0.0; n],
                Kind::Table => (0..n).map(|_| rng.gen_range(-0.02..0.02)).collect(),
            }
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor '{name}'")))
    }

    pub fn data(&self, name: &str) -> Result<&[f32]> {
        Ok(&self.get(name)?.data)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Applies `f` to every tensor whose name starts with `prefix`.
    pub fn map_prefix(&mut self, prefix: &str, mut f: impl FnMut(&str, &mut Tensor)) {
        for name in &self.names {
            if name.starts_with(prefix) {
                f(name, self.tensors.get_mut(name).expect("names and tensors agree"));
            }
        }
    }

    /// Checks names and shapes against the layout for `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = tensor_specs(cfg);
        if specs.len() != self.names.len() {
            return Err(Error::Weights(format!(
                "configuration needs {} tensors, weight set has {}",
                specs.len(),
                self.names.len()
            )));
        }
        for s in &specs {
            let t = self.get(&s.name)?;
            if t.shape != s.shape {
                return Err(Error::Weights(format!(
                    "tensor '{}' has shape {:?}, configuration needs {:?}",
                    s.name, t.shape, s.shape
                )));
            }
        }
        Ok(())
    }

    /// Makes the backward direction an exact copy of the forward one.
    pub fn tie_directions(&mut self) {
        let fwd = format!("temporal.{}.", Direction::Forward.tag());
        let bwd = format!("temporal.{}.", Direction::Backward.tag());
        let mut pairs: Vec<(String, String)> = self
            .names
            .iter()
            .filter(|n| n.starts_with(&fwd))
            .map(|n| (n.clone(), n.replacen(&fwd, &bwd, 1)))
            .collect();
        pairs.push(("dec.fuse_fwd.w".into(), "dec.fuse_bwd.w".into()));
        for (src, dst) in pairs {
            if let (Some(t), true) = (self.tensors.get(&src).cloned(), self.tensors.contains_key(&dst)) {
                self.tensors.insert(dst, t);
            }
        }
    }

    pub fn manifest_text(&self) -> String {
        let mut s = format!("{MAGIC} {FORMAT_VERSION} {}\n", self.element_count());
        let mut offset = 0usize;
        for name in &self.names {
            let t = &self.tensors[name];
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("{name}\t{}\t{offset}\n", dims.join("x")));
            offset += t.numel() * 4;
        }
        s
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.element_count() * 4);
        for name in &self.names {
            for v in &self.tensors[name].data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes `<path>` (manifest) and `<path>.bin` (blob), each atomically.
    pub fn save(&self, manifest: &Path) -> Result<()> {
        write_atomic(manifest, self.manifest_text().as_bytes())?;
        write_atomic(&blob_path(manifest), &self.blob())
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let blob_file = blob_path(manifest);
        let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
        Self::parse(&text, &blob).map_err(|m| Error::format(manifest, m))
    }

    fn parse(text: &str, blob: &[u8]) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty manifest")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(format!("missing '{MAGIC}' header"));
        }
        let version: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or("bad version")?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let total: usize = parts.next().and_then(|v| v.parse().ok()).ok_or("bad element count")?;
        if blob.len() != total * 4 {
            return Err(format!("blob holds {} bytes, manifest declares {total} floats", blob.len()));
        }
        let mut names = Vec::new();
        let mut tensors = HashMap::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let [name, shape, offset] = f[..] else {
                return Err(format!("line {}: expected name, shape and offset", i + 2));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| format!("line {}: bad shape '{shape}'", i + 2)))
                .collect::<std::result::Result<_, _>>()?;
            let offset: usize = offset.parse().map_err(|_| format!("line {}: bad offset", i + 2))?;
            let n: usize = shape.iter().product();
            let bytes = blob
                .get(offset..offset + n * 4)
                .ok_or_else(|| format!("tensor '{name}' runs past the blob"))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if tensors.insert(name.to_string(), Tensor { shape, data }).is_some() {
                return Err(format!("duplicate tensor '{name}'"));
            }
            names.push(name.to_string());
        }
        Ok(Self { names, tensors })
    }
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut p = manifest.as_os_str().to_owned();
    p.push(".bin");
    PathBuf::from(p)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
