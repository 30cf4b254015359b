//! Structural invariant suite run by `rvdt check`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attention::attention_probs;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::layers::{gate_maps, merging_layer, spatial_block, transmission_attention, transmission_layer, LayerContext, MlpParams};
use crate::model::Rvdt;
use crate::tensor::{layer_norm, pixel_shuffle, Tensor};
use crate::weights::{merging_prefix, param_count, spatial_prefix, transmission_prefix, Direction, WeightSet};
use crate::window::{partition_2d, partition_3d, reverse_2d, reverse_3d};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor {
        shape,
        data: (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
    }
}

/// A reduced configuration that keeps the checks fast.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        channels: 16,
        heads: 2,
        window: 4,
        spatial_blocks: 1,
        layers: 2,
        unet_channels: 8,
        ..ModelConfig::default()
    }
}

/// Random weights with the residual-path output projections zeroed.
pub fn residual_only_weights(cfg: &ModelConfig, seed: u64) -> WeightSet {
    let mut w = WeightSet::init(cfg, seed);
    let zero: Vec<String> = w
        .names()
        .iter()
        .filter(|n| n.contains(".attn.o.") || n.contains(".mlp.m2."))
        .cloned()
        .collect();
    for n in zero {
        w.get_mut(&n).expect("listed").data.fill(0.0);
    }
    w
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    if a.shape != b.shape {
        return f32::INFINITY;
    }
    a.data.iter().zip(&b.data).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn check_window_inverse() -> Result<(bool, String)> {
    let x3 = random_tensor(vec![2, 16, 8, 12], 1);
    let p3 = partition_3d(&x3, (2, 4, 4))?;
    let ok3 = reverse_3d(&p3, 2, 16, 8, 12, (2, 4, 4))? == x3 && p3.shape == vec![6, 32, 16];
    let x2 = random_tensor(vec![5, 12, 8], 2);
    let p2 = partition_2d(&x2, 4)?;
    let r2 = reverse_2d(&p2, 5, 12, 8, 4)?;
    let ok2 = r2 == x2 && partition_2d(&r2, 4)? == p2;
    Ok((ok2 && ok3, format!("2d exact: {ok2}, 3d exact: {ok3}")))
}

pub fn check_softmax_rows() -> Result<(bool, String)> {
    let cfg = small_config();
    let ctx = LayerContext::new(&cfg)?;
    let w = WeightSet::init(&cfg, 3);
    let a = random_tensor(vec![cfg.channels, 8, 8], 4);
    let b = random_tensor(vec![cfg.channels, 8, 8], 5);
    let mut probs = transmission_attention(&ctx, &w, &transmission_prefix(Direction::Forward, 0), &a, &b)?;
    let q = random_tensor(vec![9, 8], 6);
    let k = random_tensor(vec![13, 8], 7);
    probs.push(attention_probs(&q.data.iter().map(|v| v * 4.0).collect::<Vec<_>>(), &k.data, 9, 13, 8, None));
    let mut worst = 0.0f64;
    for p in &probs {
        let n = (p.len() as f64).sqrt().round() as usize;
        let cols = if n * n == p.len() { n } else { 13 };
        for row in p.chunks(cols) {
            worst = worst.max((row.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs());
        }
    }
    Ok((worst <= 1e-6, format!("max |row sum - 1| = {worst:.2e}")))
}

pub fn check_residual_identity() -> Result<(bool, String)> {
    let cfg = small_config();
    let ctx = LayerContext::new(&cfg)?;
    let w = residual_only_weights(&cfg, 8);
    let a = random_tensor(vec![cfg.channels, 8, 12], 9);
    let b = random_tensor(vec![cfg.channels, 8, 12], 10);
    let s = max_diff(&spatial_block(&ctx, &w, &spatial_prefix(0), &a)?, &a);
    let (ta, tb) = transmission_layer(&ctx, &w, &transmission_prefix(Direction::Forward, 0), &a, &b)?;
    let t = max_diff(&ta, &a).max(max_diff(&tb, &b));
    let m = max_diff(&merging_layer(&ctx, &w, &merging_prefix(Direction::Backward), &a, &b)?, &a);
    let zero = Rvdt::new(&cfg, WeightSet::zeros(&cfg))?;
    let clip = vec![random_tensor(vec![3, 16, 16], 11), random_tensor(vec![3, 16, 16], 12)];
    let z = zero
        .denoise_clip(&clip, None)?
        .iter()
        .fold(0.0f32, |acc, t| acc.max(t.max_abs()));
    let ok = s == 0.0 && t == 0.0 && m == 0.0 && z == 0.0;
    Ok((ok, format!("spatial {s:e}, transmission {t:e}, merging {m:e}, zero-model output {z:e}")))
}

pub fn check_layer_norm() -> Result<(bool, String)> {
    let c = 48;
    let x = random_tensor(vec![64, c], 13);
    let scaled: Vec<f32> = x.data.iter().map(|v| v * 7.0 + 3.0).collect();
    let y = layer_norm(&scaled, c, &vec![1.0; c], &vec![0.0; c]);
    let (mut dm, mut dv) = (0.0f64, 0.0f64);
    for row in y.chunks(c) {
        let m = row.iter().map(|v| *v as f64).sum::<f64>() / c as f64;
        let v = row.iter().map(|x| (*x as f64 - m).powi(2)).sum::<f64>() / c as f64;
        dm = dm.max(m.abs());
        dv = dv.max((v - 1.0).abs());
    }
    // the variance target is shifted by the epsilon inside the square root
    let eps_shift = 1e-5 / 49.0;
    Ok((dm <= 1e-4 && dv <= 1e-4 + eps_shift, format!("max |mean| {dm:.2e}, max |var - 1| {dv:.2e}")))
}

pub fn check_finite_forward(cfg: &ModelConfig, frames: usize, size: usize) -> Result<(bool, String)> {
    let model = Rvdt::new(cfg, WeightSet::init(cfg, 14))?;
    let clip: Vec<Tensor> = (0..frames)
        .map(|i| random_tensor(vec![cfg.in_channels, size, size], 100 + i as u64))
        .collect();
    let out = model.denoise_clip(&clip, None)?;
    let shape_ok = out.len() == frames && out.iter().all(|t| t.shape == vec![cfg.out_channels, size, size]);
    let finite = out.iter().all(Tensor::is_finite);
    let peak = out.iter().fold(0.0f32, |m, t| m.max(t.max_abs()));
    Ok((shape_ok && finite, format!("T={frames} {size}x{size}: finite {finite}, shape {shape_ok}, max |y| {peak:.3}")))
}

fn tied_model(cfg: &ModelConfig, seed: u64) -> Result<Rvdt> {
    let mut w = WeightSet::init(cfg, seed);
    w.tie_directions();
    Rvdt::new(cfg, w)
}

pub fn check_time_reversal(cfg: &ModelConfig, frames: usize, size: usize) -> Result<(bool, String)> {
    let model = tied_model(cfg, 15)?;
    let clip: Vec<Tensor> = (0..frames)
        .map(|i| random_tensor(vec![cfg.in_channels, size, size], 200 + i as u64))
        .collect();
    let out = model.denoise_clip(&clip, None)?;
    let rev: Vec<Tensor> = clip.iter().rev().cloned().collect();
    let mut out_rev = model.denoise_clip(&rev, None)?;
    out_rev.reverse();
    let exact = out == out_rev;
    Ok((exact, format!("reversed clip reproduces reversed output bit-exactly: {exact}")))
}

pub fn check_gate_shapes() -> Result<(bool, String)> {
    // hidden width 48 so the maps are checked at C = 48
    let cfg = ModelConfig {
        channels: 24,
        heads: 4,
        mlp_ratio: 2,
        ..small_config()
    };
    let w = WeightSet::init(&cfg, 16);
    let p = MlpParams::from_weights(&w, &format!("{}.mlp", spatial_prefix(0)), &cfg)?;
    let g = gate_maps(&p, &random_tensor(vec![48, 8, 8], 17))?;
    let ok = g.sa.shape == vec![1, 8, 8] && g.ca.shape == vec![48, 1, 1] && g.sca.shape == vec![48, 8, 8];
    Ok((ok, format!("SA {:?}, CA {:?}, SCA {:?}", g.sa.shape, g.ca.shape, g.sca.shape)))
}

pub fn check_cross_frame_attention() -> Result<(bool, String)> {
    let cfg = small_config();
    let ctx = LayerContext::new(&cfg)?;
    let w = WeightSet::init(&cfg, 18);
    let a = random_tensor(vec![cfg.channels, 4, 4], 19);
    let b = random_tensor(vec![cfg.channels, 4, 4], 20);
    let probs = transmission_attention(&ctx, &w, &transmission_prefix(Direction::Forward, 0), &a, &b)?;
    let n = 2 * cfg.window * cfg.window;
    let half = n / 2;
    let mut cross = 0.0f64;
    for p in &probs {
        for i in 0..n {
            for j in 0..n {
                if (i < half) != (j < half) {
                    cross += p[i * n + j] as f64;
                }
            }
        }
    }
    let frac = cross / (probs.len() * n) as f64;
    Ok((frac > 0.0, format!("mean cross-frame attention mass {frac:.3}")))
}

pub fn check_pixel_shuffle() -> Result<(bool, String)> {
    let (c, r, h, w) = (3, 2, 4, 5);
    let x = Tensor::new(vec![c * r * r, h, w], (0..c * r * r * h * w).map(|v| v as f32).collect())?;
    let y = pixel_shuffle(&x, r)?;
    let mut ok = y.shape == vec![c, h * r, w * r];
    for ch in 0..c {
        for oy in 0..h * r {
            for ox in 0..w * r {
                let src = ((ch * r * r + (oy % r) * r + ox % r) * h + oy / r) * w + ox / r;
                ok &= y.data[(ch * h * r + oy) * w * r + ox] == src as f32;
            }
        }
    }
    Ok((ok, format!("{:?} -> {:?}", x.shape, y.shape)))
}

pub fn check_causality() -> Result<(bool, String)> {
    let cfg = small_config();
    let model = Rvdt::new(&cfg, WeightSet::init(&cfg, 21))?;
    let feats: Vec<Tensor> = (0..4).map(|i| random_tensor(vec![cfg.channels, 4, 4], 300 + i)).collect();
    let mut changed = feats.clone();
    changed[3] = random_tensor(vec![cfg.channels, 4, 4], 999);
    let f0 = model.temporal_pass(&feats, Direction::Forward)?;
    let f1 = model.temporal_pass(&changed, Direction::Forward)?;
    let b0 = model.temporal_pass(&feats, Direction::Backward)?;
    let b1 = model.temporal_pass(&changed, Direction::Backward)?;
    let fwd_same = f0[0] == f1[0];
    let bwd_diff = max_diff(&b0[0], &b1[0]) > 0.0;
    Ok((fwd_same && bwd_diff, format!("first forward unchanged: {fwd_same}, first backward changed: {bwd_diff}")))
}

pub fn check_param_budget(dir: &std::path::Path) -> Result<(bool, String)> {
    let cfg = ModelConfig::default();
    let n = param_count(&cfg);
    let w = WeightSet::init(&cfg, 22);
    let path = dir.join("rvdt-check.weights");
    w.save(&path)?;
    let bytes = std::fs::metadata(crate::weights::blob_path(&path))
        .map_err(|e| crate::Error::Io { path: path.clone(), source: e })?
        .len() as usize;
    let within = (n as f64 / 2.487e6 - 1.0).abs() <= 0.1;
    Ok((within && bytes == 4 * n, format!("param_count {n}, saved floats {}, budget 2.487M +-10%", bytes / 4)))
}

/// Runs every check; the full-size forward uses the default configuration.
pub fn run_all(scratch: &std::path::Path) -> Vec<CheckOutcome> {
    let default = ModelConfig::default();
    vec![
        outcome("window_partition_inverse", check_window_inverse()),
        outcome("softmax_rows_sum_to_one", check_softmax_rows()),
        outcome("zero_weight_residual_identity", check_residual_identity()),
        outcome("layer_norm_moments", check_layer_norm()),
        outcome("finite_forward_t5_64", check_finite_forward(&default, 5, 64)),
        outcome("time_reversal_tied_weights", check_time_reversal(&default, 3, 32)),
        outcome("gate_map_shapes", check_gate_shapes()),
        outcome("cross_frame_attention", check_cross_frame_attention()),
        outcome("pixel_shuffle_index", check_pixel_shuffle()),
        outcome("direction_causality", check_causality()),
        outcome("param_budget", check_param_budget(scratch)),
    ]
}
