//! Transformer layers: spatial blocks, temporal transmission and merging
//! layers, and the channel-spatial attention feed-forward.

use rayon::prelude::*;

use crate::attention::{relative_index, window_attention, AttentionParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{conv2d_raw, crop, depthwise_conv2d, gelu, layer_norm, linear, reflect_pad, round_up, sigmoid, Tensor};
use crate::window::{partition_2d, partition_3d, reverse_2d, reverse_3d};
use crate::weights::WeightSet;

/// Configuration plus precomputed position-bias indices.
pub struct LayerContext {
    pub cfg: ModelConfig,
    idx_2d: Vec<usize>,
    idx_3d: Vec<usize>,
}

impl LayerContext {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            idx_2d: relative_index(1, cfg.window),
            idx_3d: relative_index(cfg.temporal_window, cfg.window),
        })
    }
}

struct Norm<'a> {
    g: &'a [f32],
    b: &'a [f32],
}

impl<'a> Norm<'a> {
    fn load(w: &'a WeightSet, name: &str) -> Result<Self> {
        Ok(Self {
            g: w.data(&format!("{name}.g"))?,
            b: w.data(&format!("{name}.b"))?,
        })
    }

    fn apply(&self, x: &[f32], c: usize) -> Vec<f32> {
        layer_norm(x, c, self.g, self.b)
    }
}

struct Csa<'a> {
    sa: (&'a [f32], &'a [f32]),
    ca1: (&'a [f32], &'a [f32]),
    ca2: (&'a [f32], &'a [f32]),
    conv: (&'a [f32], &'a [f32]),
    sca: (&'a [f32], &'a [f32]),
}

/// Parameters of one feed-forward sub-block.
pub struct MlpParams<'a> {
    ln: Norm<'a>,
    m1: (&'a [f32], &'a [f32]),
    m2: (&'a [f32], &'a [f32]),
    csa: Option<Csa<'a>>,
    c: usize,
    hidden: usize,
}

impl<'a> MlpParams<'a> {
    pub fn from_weights(w: &'a WeightSet, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let lin = |p: &str| -> Result<(&'a [f32], &'a [f32])> {
            Ok((w.data(&format!("{prefix}.{p}.w"))?, w.data(&format!("{prefix}.{p}.b"))?))
        };
        let csa = if cfg.csa_mlp {
            Some(Csa {
                sa: lin("sa")?,
                ca1: lin("ca1")?,
                ca2: lin("ca2")?,
                conv: lin("conv")?,
                sca: lin("sca")?,
            })
        } else {
            None
        };
        Ok(Self {
            ln: Norm::load(w, &format!("{prefix}.ln"))?,
            m1: lin("m1")?,
            m2: lin("m2")?,
            csa,
            c: cfg.channels,
            hidden: cfg.hidden(),
        })
    }
}

/// The three sigmoid gate maps of one `C x h x w` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMaps {
    /// `1 x h x w`
    pub sa: Tensor,
    /// `C x 1 x 1`
    pub ca: Tensor,
    /// `C x h x w`
    pub sca: Tensor,
}

fn sa_map(csa: &Csa<'_>, z: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut pooled = vec![0f32; 2 * hw];
    for i in 0..hw {
        let (mut s, mut m) = (0.0f32, f32::NEG_INFINITY);
        for ch in 0..c {
            let v = z[ch * hw + i];
            s += v;
            m = m.max(v);
        }
        pooled[i] = s / c as f32;
        pooled[hw + i] = m;
    }
    let (logits, _, _) = conv2d_raw(&pooled, 2, h, w, csa.sa.0, 1, 7, 1, Some(csa.sa.1));
    logits.into_iter().map(sigmoid).collect()
}

fn ca_map(csa: &Csa<'_>, z: &[f32], c: usize, hw: usize) -> Vec<f32> {
    let avg: Vec<f32> = z.chunks_exact(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect();
    let r = c / 4;
    let mid: Vec<f32> = linear(&avg, 1, c, csa.ca1.0, csa.ca1.1, r).into_iter().map(|v| v.max(0.0)).collect();
    linear(&mid, 1, r, csa.ca2.0, csa.ca2.1, c).into_iter().map(sigmoid).collect()
}

/// Local branch on one `C x h x w` map `z`: returns
/// `SCA(Conv([SA(z), CA(z)]) + z) + z` and the gate maps.
fn csa_branch(csa: &Csa<'_>, z: &[f32], c: usize, h: usize, w: usize) -> (Vec<f32>, GateMaps) {
    let hw = h * w;
    let s = sa_map(csa, z, c, h, w);
    let g = ca_map(csa, z, c, hw);
    let mut cat = Vec::with_capacity(2 * c * hw);
    for ch in 0..c {
        cat.extend((0..hw).map(|i| z[ch * hw + i] * s[i]));
    }
    for ch in 0..c {
        cat.extend(z[ch * hw..(ch + 1) * hw].iter().map(|v| v * g[ch]));
    }
    let (mut u, _, _) = conv2d_raw(&cat, 2 * c, h, w, csa.conv.0, c, 3, 1, Some(csa.conv.1));
    u.iter_mut().zip(z).for_each(|(a, b)| *a += b);
    let gate: Vec<f32> = depthwise_conv2d(&u, c, h, w, csa.sca.0, 3, csa.sca.1).into_iter().map(sigmoid).collect();
    let out = u.iter().zip(&gate).zip(z).map(|((u, g), z)| u * g + z).collect();
    let maps = GateMaps {
        sa: Tensor { shape: vec![1, h, w], data: s },
        ca: Tensor { shape: vec![c, 1, 1], data: g },
        sca: Tensor { shape: vec![c, h, w], data: gate },
    };
    (out, maps)
}

/// Gate maps for a `C x h x w` map already in the hidden space.
pub fn gate_maps(p: &MlpParams<'_>, map: &Tensor) -> Result<GateMaps> {
    let (c, h, w) = map.chw()?;
    let csa = p
        .csa
        .as_ref()
        .ok_or_else(|| Error::Config("plain MLP has no attention gates".into()))?;
    if c != p.hidden {
        return Err(Error::Shape(format!("map has {c} channels, MLP hidden width is {}", p.hidden)));
    }
    Ok(csa_branch(csa, &map.data, c, h, w).1)
}

/// Feed-forward update for the tokens of one window (residual not added).
/// `geom = (t, a, b)` lays the `t*a*b` tokens out as `t` maps of `a x b`.
pub fn feed_forward(p: &MlpParams<'_>, z: &[f32], geom: (usize, usize, usize)) -> Result<Vec<f32>> {
    let (t, a, b) = geom;
    let (c, hid) = (p.c, p.hidden);
    let n = t * a * b;
    if z.len() != n * c {
        return Err(Error::Shape(format!("{} values do not form {n} tokens of {c}", z.len())));
    }
    let zn = p.ln.apply(z, c);
    let zbar: Vec<f32> = linear(&zn, n, c, p.m1.0, p.m1.1, hid).into_iter().map(gelu).collect();
    let mid = match &p.csa {
        None => zbar,
        Some(csa) => {
            let hw = a * b;
            let mut out = vec![0f32; n * hid];
            for ft in 0..t {
                // tokens -> channel-first map for this frame of the window
                let mut map = vec![0f32; hid * hw];
                for i in 0..hw {
                    for ch in 0..hid {
                        map[ch * hw + i] = zbar[(ft * hw + i) * hid + ch];
                    }
                }
                let (res, _) = csa_branch(csa, &map, hid, a, b);
                for i in 0..hw {
                    for ch in 0..hid {
                        out[(ft * hw + i) * hid + ch] = res[ch * hw + i];
                    }
                }
            }
            out
        }
    };
    Ok(linear(&mid, n, hid, p.m2.0, p.m2.1, c))
}

fn add_into(a: &mut [f32], b: &[f32]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn padded(x: &Tensor, win: usize) -> Result<(Tensor, usize, usize)> {
    let (_, h, w) = x.chw()?;
    Ok((reflect_pad(x, round_up(h, win), round_up(w, win))?, h, w))
}

fn window_tokens(t: &Tensor, i: usize) -> &[f32] {
    let per = t.shape[1] * t.shape[2];
    &t.data[i * per..(i + 1) * per]
}

/// Windowed self-attention + feed-forward block, shape-preserving.
pub fn spatial_block(ctx: &LayerContext, w: &WeightSet, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let cfg = &ctx.cfg;
    let (c, win) = (cfg.channels, cfg.window);
    let (xp, h0, w0) = padded(x, win)?;
    let (_, h, wd) = xp.chw()?;
    let tokens = partition_2d(&xp, win)?;
    let ln = Norm::load(w, &format!("{prefix}.ln"))?;
    let attn = AttentionParams::from_weights(w, &format!("{prefix}.attn"), cfg.heads)?;
    let mlp = MlpParams::from_weights(w, &format!("{prefix}.mlp"), cfg)?;
    let n = win * win;
    let out: Vec<Vec<f32>> = (0..tokens.shape[0])
        .into_par_iter()
        .map(|i| {
            let mut z = window_tokens(&tokens, i).to_vec();
            let zn = ln.apply(&z, c);
            add_into(&mut z, &window_attention(&zn, &zn, n, n, c, &attn, &ctx.idx_2d, None)?);
            let ff = feed_forward(&mlp, &z, (1, win, win))?;
            add_into(&mut z, &ff);
            Ok(z)
        })
        .collect::<Result<_>>()?;
    let tokens = Tensor {
        shape: tokens.shape.clone(),
        data: out.concat(),
    };
    crop(&reverse_2d(&tokens, c, h, wd, win)?, h0, w0)
}

fn stack_pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c, h, w) = a.chw()?;
    b.ensure_shape(&a.shape)?;
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Ok(Tensor {
        shape: vec![2, c, h, w],
        data,
    })
}

fn transmission_impl(
    ctx: &LayerContext,
    w: &WeightSet,
    prefix: &str,
    cur: &Tensor,
    prop: &Tensor,
    capture: bool,
) -> Result<((Tensor, Tensor), Vec<Vec<f32>>)> {
    if cur.shape != prop.shape {
        return Err(Error::Shape(format!(
            "transmission pair differs: {:?} vs {:?}",
            cur.shape, prop.shape
        )));
    }
    let cfg = &ctx.cfg;
    let (c, win, tw) = (cfg.channels, cfg.window, cfg.temporal_window);
    let (cp, h0, w0) = padded(cur, win)?;
    let (pp, _, _) = padded(prop, win)?;
    let (_, h, wd) = cp.chw()?;
    let tokens = partition_3d(&stack_pair(&cp, &pp)?, (tw, win, win))?;
    let ln = Norm::load(w, &format!("{prefix}.ln"))?;
    let attn = AttentionParams::from_weights(w, &format!("{prefix}.attn"), cfg.heads)?;
    let mlp = MlpParams::from_weights(w, &format!("{prefix}.mlp"), cfg)?;
    let n = tw * win * win;
    let results: Vec<(Vec<f32>, Vec<Vec<f32>>)> = (0..tokens.shape[0])
        .into_par_iter()
        .map(|i| {
            let mut z = window_tokens(&tokens, i).to_vec();
            let zn = ln.apply(&z, c);
            let mut probs = Vec::new();
            let keep = capture && i == 0;
            let a = window_attention(&zn, &zn, n, n, c, &attn, &ctx.idx_3d, keep.then_some(&mut probs))?;
            add_into(&mut z, &a);
            let ff = feed_forward(&mlp, &z, (tw, win, win))?;
            add_into(&mut z, &ff);
            Ok((z, probs))
        })
        .collect::<Result<_>>()?;
    let probs = results.first().map(|r| r.1.clone()).unwrap_or_default();
    let tokens = Tensor {
        shape: tokens.shape.clone(),
        data: results.into_iter().flat_map(|r| r.0).collect(),
    };
    let both = reverse_3d(&tokens, tw, c, h, wd, (tw, win, win))?;
    let half = both.data.len() / 2;
    let split = |d: &[f32]| -> Result<Tensor> {
        crop(&Tensor { shape: vec![c, h, wd], data: d.to_vec() }, h0, w0)
    };
    Ok(((split(&both.data[..half])?, split(&both.data[half..])?), probs))
}

/// Joint attention over the (current, propagated) pair; returns both updated.
pub fn transmission_layer(
    ctx: &LayerContext,
    w: &WeightSet,
    prefix: &str,
    cur: &Tensor,
    prop: &Tensor,
) -> Result<(Tensor, Tensor)> {
    Ok(transmission_impl(ctx, w, prefix, cur, prop, false)?.0)
}

/// Per-head attention matrices of the first window of a transmission layer.
pub fn transmission_attention(
    ctx: &LayerContext,
    w: &WeightSet,
    prefix: &str,
    cur: &Tensor,
    prop: &Tensor,
) -> Result<Vec<Vec<f32>>> {
    Ok(transmission_impl(ctx, w, prefix, cur, prop, true)?.1)
}

/// Cross-attention from the current feature (queries) to the propagated
/// one (keys and values), residual on the current feature.
pub fn merging_layer(ctx: &LayerContext, w: &WeightSet, prefix: &str, cur: &Tensor, prop: &Tensor) -> Result<Tensor> {
    if cur.shape != prop.shape {
        return Err(Error::Shape(format!(
            "merging pair differs: {:?} vs {:?}",
            cur.shape, prop.shape
        )));
    }
    let cfg = &ctx.cfg;
    let (c, win) = (cfg.channels, cfg.window);
    let (cp, h0, w0) = padded(cur, win)?;
    let (pp, _, _) = padded(prop, win)?;
    let (_, h, wd) = cp.chw()?;
    let m = partition_2d(&cp, win)?;
    let nt = partition_2d(&pp, win)?;
    let ln_q = Norm::load(w, &format!("{prefix}.ln_q"))?;
    let ln_kv = Norm::load(w, &format!("{prefix}.ln_kv"))?;
    let attn = AttentionParams::from_weights(w, &format!("{prefix}.attn"), cfg.heads)?;
    let mlp = MlpParams::from_weights(w, &format!("{prefix}.mlp"), cfg)?;
    let n = win * win;
    let out: Vec<Vec<f32>> = (0..m.shape[0])
        .into_par_iter()
        .map(|i| {
            let mut z = window_tokens(&m, i).to_vec();
            let q = ln_q.apply(&z, c);
            let kv = ln_kv.apply(window_tokens(&nt, i), c);
            add_into(&mut z, &window_attention(&q, &kv, n, n, c, &attn, &ctx.idx_2d, None)?);
            let ff = feed_forward(&mlp, &z, (1, win, win))?;
            add_into(&mut z, &ff);
            Ok(z)
        })
        .collect::<Result<_>>()?;
    let tokens = Tensor {
        shape: m.shape.clone(),
        data: out.concat(),
    };
    crop(&reverse_2d(&tokens, c, h, wd, win)?, h0, w0)
}
