//! Full forward pass: encoder, spatial blocks, bi-directional temporal
//! recurrence and decoder.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{merging_layer, spatial_block, transmission_layer, LayerContext};
use crate::tensor::{concat_channels, conv2d, crop, leaky_relu, pixel_shuffle, reflect_pad, round_up, upsample_nearest2, Tensor};
use crate::weights::{merging_prefix, spatial_prefix, transmission_prefix, Direction, WeightSet};

/// Noise level supplied to a non-blind model.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseInput {
    /// One level broadcast over every pixel of every frame.
    Scalar(f32),
    /// One `1 x H x W` map per frame.
    Maps(Vec<Tensor>),
}

pub struct Rvdt {
    ctx: LayerContext,
    weights: WeightSet,
}

impl Rvdt {
    pub fn new(cfg: &ModelConfig, weights: WeightSet) -> Result<Self> {
        let ctx = LayerContext::new(cfg)?;
        weights.validate(cfg)?;
        Ok(Self { ctx, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.ctx.cfg
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    fn conv(&self, name: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
        let w = self.weights.get(&format!("{name}.w"))?;
        let b = self.weights.get(&format!("{name}.b"))?;
        conv2d(x, w, Some(b), stride)
    }

    fn conv_act(&self, name: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
        let mut y = self.conv(name, x, stride)?;
        y.data.iter_mut().for_each(|v| *v = leaky_relu(*v));
        Ok(y)
    }

    /// Frame (already including any noise channel) to `C x H/4 x W/4`
    /// features, after reflect-padding `H` and `W` up to multiples of 4.
    pub fn encode(&self, frame: &Tensor) -> Result<Tensor> {
        let (c, h, w) = frame.chw()?;
        let want = self.config().input_channels();
        if c != want {
            return Err(Error::Shape(format!("encoder expects {want} input channels, got {c}")));
        }
        let x = reflect_pad(frame, round_up(h, 4), round_up(w, 4))?;
        let e = self.conv_act("enc.in0", &x, 1)?;
        let e = self.conv_act("enc.in1", &e, 1)?;
        let d = self.conv_act("enc.down0", &e, 2)?;
        let d = self.conv_act("enc.down1", &d, 1)?;
        let u = self.conv_act("enc.up", &upsample_nearest2(&d)?, 1)?;
        let s = self.conv_act("enc.skip", &concat_channels(&u, &e)?, 1)?;
        let s = self.conv_act("enc.ds0", &s, 2)?;
        self.conv("enc.ds1", &s, 2)
    }

    pub fn spatial(&self, f: &Tensor) -> Result<Tensor> {
        let mut x = f.clone();
        for k in 0..self.config().spatial_blocks {
            x = spatial_block(&self.ctx, &self.weights, &spatial_prefix(k), &x)?;
        }
        Ok(x)
    }

    /// One recurrence step: transmission layers then the merging layer.
    pub fn temporal_step(&self, dir: Direction, cur: &Tensor, prev: &Tensor) -> Result<Tensor> {
        let (mut a, mut b) = (cur.clone(), prev.clone());
        for s in 0..self.config().layers - 1 {
            (a, b) = transmission_layer(&self.ctx, &self.weights, &transmission_prefix(dir, s), &a, &b)?;
        }
        merging_layer(&self.ctx, &self.weights, &merging_prefix(dir), &a, &b)
    }

    /// Propagates through the clip in `dir` order starting from a zero state;
    /// the result is indexed by frame.
    pub fn temporal_pass(&self, feats: &[Tensor], dir: Direction) -> Result<Vec<Tensor>> {
        let first = feats.first().ok_or_else(|| Error::Shape("empty clip".into()))?;
        let order: Vec<usize> = match dir {
            Direction::Forward => (0..feats.len()).collect(),
            Direction::Backward => (0..feats.len()).rev().collect(),
        };
        let mut out = vec![None; feats.len()];
        let mut state = Tensor::zeros(first.shape.clone());
        for i in order {
            state = self.temporal_step(dir, &feats[i], &state)?;
            out[i] = Some(state.clone());
        }
        Ok(out.into_iter().map(|t| t.expect("every frame visited")).collect())
    }

    /// Features of both directions to a `out_channels x 4h x 4w` frame.
    pub fn decode(&self, fwd: &Tensor, bwd: &Tensor) -> Result<Tensor> {
        if fwd.shape != bwd.shape {
            return Err(Error::Shape(format!("decoder inputs differ: {:?} vs {:?}", fwd.shape, bwd.shape)));
        }
        let a = conv2d(fwd, self.weights.get("dec.fuse_fwd.w")?, None, 1)?;
        let b = conv2d(bwd, self.weights.get("dec.fuse_bwd.w")?, None, 1)?;
        let bias = self.weights.data("dec.fuse.b")?;
        let hw = a.data.len() / bias.len();
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .enumerate()
            .map(|(i, (x, y))| leaky_relu((x + y) + bias[i / hw]))
            .collect();
        let x = pixel_shuffle(&Tensor { shape: a.shape.clone(), data }, 2)?;
        let x = self.conv_act("dec.up", &x, 1)?;
        let x = pixel_shuffle(&x, 2)?;
        self.conv("dec.out", &x, 1)
    }

    fn with_noise(&self, frames: &[Tensor], noise: Option<&NoiseInput>) -> Result<Vec<Tensor>> {
        match (self.config().blind, noise) {
            (true, None) => Ok(frames.to_vec()),
            (true, Some(_)) => Err(Error::Config("blind model takes no noise level".into())),
            (false, None) => Err(Error::Config("non-blind model needs a noise level".into())),
            (false, Some(n)) => frames
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let (_, h, w) = f.chw()?;
                    let map = match n {
                        NoiseInput::Scalar(s) => Tensor::filled(vec![1, h, w], *s),
                        NoiseInput::Maps(maps) => {
                            let m = maps
                                .get(i)
                                .ok_or_else(|| Error::Shape(format!("no noise map for frame {i}")))?;
                            m.ensure_shape(&[1, h, w])?;
                            m.clone()
                        }
                    };
                    concat_channels(f, &map)
                })
                .collect(),
        }
    }

    /// Denoises a clip of `in_channels x H x W` frames.
    pub fn denoise_clip(&self, frames: &[Tensor], noise: Option<&NoiseInput>) -> Result<Vec<Tensor>> {
        let first = frames.first().ok_or_else(|| Error::Shape("empty clip".into()))?;
        let (c, h, w) = first.chw()?;
        if c != self.config().in_channels {
            return Err(Error::Shape(format!(
                "model expects {} channels, frame has {c}",
                self.config().in_channels
            )));
        }
        if frames.iter().any(|f| f.shape != first.shape) {
            return Err(Error::Shape("clip frames differ in shape".into()));
        }
        let inputs = self.with_noise(frames, noise)?;
        let feats: Vec<Tensor> = inputs
            .iter()
            .map(|f| self.spatial(&self.encode(f)?))
            .collect::<Result<_>>()?;
        let (fwd, bwd) = rayon::join(
            || self.temporal_pass(&feats, Direction::Forward),
            || self.temporal_pass(&feats, Direction::Backward),
        );
        let (fwd, bwd) = (fwd?, bwd?);
        fwd.iter()
            .zip(&bwd)
            .map(|(a, b)| crop(&self.decode(a, b)?, h, w))
            .collect()
    }
}
