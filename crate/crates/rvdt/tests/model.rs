use vidnoise_rvdt::checks::{self, random_tensor, residual_only_weights, small_config};
use vidnoise_rvdt::layers::{feed_forward, merging_layer, spatial_block, transmission_layer, LayerContext, MlpParams};
use vidnoise_rvdt::tensor::{gelu, layer_norm, linear};
use vidnoise_rvdt::weights::{blob_path, merging_prefix, spatial_prefix, transmission_prefix, Direction};
use vidnoise_rvdt::{param_count, ModelConfig, NoiseInput, Rvdt, Tensor, WeightSet};

fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape, b.shape);
    a.data.iter().zip(&b.data).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn encoder_output_is_quarter_resolution() {
    let cfg = ModelConfig::default();
    let model = Rvdt::new(&cfg, WeightSet::init(&cfg, 1)).unwrap();
    let f = model.encode(&random_tensor(vec![3, 64, 64], 2)).unwrap();
    assert_eq!(f.shape, vec![48, 16, 16]);
    // 66 pads to 68
    let g = model.encode(&random_tensor(vec![3, 66, 66], 3)).unwrap();
    assert_eq!(g.shape, vec![48, 17, 17]);
}

#[test]
fn odd_sized_clip_is_cropped_back() {
    let cfg = small_config();
    let model = Rvdt::new(&cfg, WeightSet::init(&cfg, 4)).unwrap();
    let clip = vec![random_tensor(vec![3, 66, 66], 5), random_tensor(vec![3, 66, 66], 6)];
    let out = model.denoise_clip(&clip, None).unwrap();
    assert!(out.iter().all(|t| t.shape == vec![3, 66, 66] && t.is_finite()));
}

#[test]
fn zero_weights_zero_encoder_and_decoder() {
    let cfg = small_config();
    let model = Rvdt::new(&cfg, WeightSet::zeros(&cfg)).unwrap();
    assert_eq!(model.encode(&random_tensor(vec![3, 32, 32], 7)).unwrap().max_abs(), 0.0);
    let a = random_tensor(vec![cfg.channels, 8, 8], 8);
    let y = model.decode(&a, &a).unwrap();
    assert_eq!(y.shape, vec![3, 32, 32]);
    assert_eq!(y.max_abs(), 0.0);
}

#[test]
fn zero_weights_temporal_pass_is_identity() {
    let cfg = small_config();
    let model = Rvdt::new(&cfg, WeightSet::zeros(&cfg)).unwrap();
    let feats: Vec<Tensor> = (0..3).map(|i| random_tensor(vec![cfg.channels, 6, 6], 10 + i)).collect();
    for dir in [Direction::Forward, Direction::Backward] {
        assert_eq!(model.temporal_pass(&feats, dir).unwrap(), feats);
    }
    // a single frame steps once against the zero boundary
    let one = model.temporal_pass(&feats[..1], Direction::Backward).unwrap();
    assert_eq!(one.len(), 1);
}

#[test]
fn zeroed_projections_leave_residuals() {
    let cfg = small_config();
    let ctx = LayerContext::new(&cfg).unwrap();
    let w = residual_only_weights(&cfg, 11);
    let a = random_tensor(vec![cfg.channels, 10, 6], 12);
    let b = random_tensor(vec![cfg.channels, 10, 6], 13);
    assert_eq!(spatial_block(&ctx, &w, &spatial_prefix(0), &a).unwrap(), a);
    let (ta, tb) = transmission_layer(&ctx, &w, &transmission_prefix(Direction::Backward, 0), &a, &b).unwrap();
    assert_eq!((ta, tb), (a.clone(), b.clone()));
    assert_eq!(merging_layer(&ctx, &w, &merging_prefix(Direction::Forward), &a, &b).unwrap(), a);
}

#[test]
fn blocks_preserve_shape_with_random_weights() {
    let cfg = small_config();
    let ctx = LayerContext::new(&cfg).unwrap();
    let w = WeightSet::init(&cfg, 14);
    let a = random_tensor(vec![cfg.channels, 7, 9], 15);
    let b = random_tensor(vec![cfg.channels, 7, 9], 16);
    let s = spatial_block(&ctx, &w, &spatial_prefix(0), &a).unwrap();
    assert_eq!(s.shape, a.shape);
    assert!(s.is_finite() && max_diff(&s, &a) > 0.0);
    let (ta, tb) = transmission_layer(&ctx, &w, &transmission_prefix(Direction::Forward, 0), &a, &b).unwrap();
    assert_eq!((ta.shape.clone(), tb.shape.clone()), (a.shape.clone(), b.shape.clone()));
    assert!(merging_layer(&ctx, &w, &merging_prefix(Direction::Forward), &a, &b).is_ok());
    assert!(merging_layer(&ctx, &w, &merging_prefix(Direction::Forward), &a, &random_tensor(vec![cfg.channels, 8, 9], 1)).is_err());
}

#[test]
fn merging_with_current_source_is_self_attention() {
    let cfg = small_config();
    let ctx = LayerContext::new(&cfg).unwrap();
    let mut w = WeightSet::init(&cfg, 17);
    let merge = merging_prefix(Direction::Forward);
    let q = w.get(&format!("{merge}.ln_q.g")).unwrap().clone();
    let qb = w.get(&format!("{merge}.ln_q.b")).unwrap().clone();
    *w.get_mut(&format!("{merge}.ln_kv.g")).unwrap() = q.clone();
    *w.get_mut(&format!("{merge}.ln_kv.b")).unwrap() = qb.clone();
    let names: Vec<String> = w.names().to_vec();
    for n in names.iter().filter(|n| n.starts_with(&format!("{merge}.attn")) || n.starts_with(&format!("{merge}.mlp"))) {
        let dst = n.replacen(&merge, &spatial_prefix(0), 1);
        *w.get_mut(&dst).unwrap() = w.get(n).unwrap().clone();
    }
    *w.get_mut(&format!("{}.ln.g", spatial_prefix(0))).unwrap() = q;
    *w.get_mut(&format!("{}.ln.b", spatial_prefix(0))).unwrap() = qb;
    let x = random_tensor(vec![cfg.channels, 4, 4], 18);
    let m = merging_layer(&ctx, &w, &merge, &x, &x).unwrap();
    let s = spatial_block(&ctx, &w, &spatial_prefix(0), &x).unwrap();
    assert_eq!(m, s);
}

#[test]
fn closed_gates_reduce_to_plain_mlp() {
    let cfg = small_config();
    let mut w = WeightSet::init(&cfg, 19);
    let p = format!("{}.mlp", spatial_prefix(0));
    for g in ["sa", "ca2", "sca"] {
        w.get_mut(&format!("{p}.{g}.b")).unwrap().data.fill(-1e4);
    }
    let (c, hid, n) = (cfg.channels, cfg.hidden(), 16);
    let z = random_tensor(vec![n, c], 20);
    let params = MlpParams::from_weights(&w, &p, &cfg).unwrap();
    let got = feed_forward(&params, &z.data, (1, 4, 4)).unwrap();
    let zn = layer_norm(&z.data, c, w.data(&format!("{p}.ln.g")).unwrap(), w.data(&format!("{p}.ln.b")).unwrap());
    let m1: Vec<f32> = linear(&zn, n, c, w.data(&format!("{p}.m1.w")).unwrap(), w.data(&format!("{p}.m1.b")).unwrap(), hid)
        .into_iter()
        .map(gelu)
        .collect();
    let want = linear(&m1, n, hid, w.data(&format!("{p}.m2.w")).unwrap(), w.data(&format!("{p}.m2.b")).unwrap(), c);
    let err = got.iter().zip(&want).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    assert!(err < 1e-5, "max error {err}");
}

#[test]
fn zeroed_mlp_matrices_give_no_update() {
    let cfg = small_config();
    let mut w = WeightSet::init(&cfg, 21);
    let p = format!("{}.mlp", spatial_prefix(0));
    for m in ["m1.w", "m1.b", "m2.w", "m2.b", "conv.w", "conv.b"] {
        w.get_mut(&format!("{p}.{m}")).unwrap().data.fill(0.0);
    }
    let params = MlpParams::from_weights(&w, &p, &cfg).unwrap();
    let z = random_tensor(vec![16, cfg.channels], 22);
    assert!(feed_forward(&params, &z.data, (1, 4, 4)).unwrap().iter().all(|v| *v == 0.0));
    assert!(feed_forward(&params, &z.data, (1, 4, 3)).is_err());
}

#[test]
fn direction_causality() {
    let (passed, detail) = checks::check_causality().unwrap();
    assert!(passed, "{detail}");
}

#[test]
fn cross_frame_attention_mass_positive() {
    let (passed, detail) = checks::check_cross_frame_attention().unwrap();
    assert!(passed, "{detail}");
}

#[test]
fn time_reversal_is_bit_exact() {
    let (passed, detail) = checks::check_time_reversal(&small_config(), 4, 24).unwrap();
    assert!(passed, "{detail}");
}

#[test]
fn static_clip_is_symmetric() {
    let cfg = small_config();
    let mut w = WeightSet::init(&cfg, 23);
    w.tie_directions();
    let model = Rvdt::new(&cfg, w).unwrap();
    let frame = random_tensor(vec![3, 16, 16], 24);
    let t = 5;
    let out = model.denoise_clip(&vec![frame; t], None).unwrap();
    for i in 0..t {
        assert_eq!(out[i], out[t - 1 - i], "frame {i}");
    }
    // forward and backward depths differ, so neighbours are not equal
    assert_ne!(out[0], out[1]);
}

#[test]
fn deterministic_forward() {
    let cfg = small_config();
    let model = Rvdt::new(&cfg, WeightSet::init(&cfg, 25)).unwrap();
    let clip: Vec<Tensor> = (0..3).map(|i| random_tensor(vec![3, 16, 16], 30 + i)).collect();
    assert_eq!(model.denoise_clip(&clip, None).unwrap(), model.denoise_clip(&clip, None).unwrap());
}

#[test]
fn param_count_matches_saved_bytes() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.weights");
    WeightSet::init(&cfg, 26).save(&path).unwrap();
    let bytes = std::fs::metadata(blob_path(&path)).unwrap().len() as usize;
    assert_eq!(bytes, 4 * param_count(&cfg));
    let back = WeightSet::load(&path).unwrap();
    assert_eq!(back.element_count(), param_count(&cfg));
}

#[test]
fn non_blind_takes_scalar_or_maps() {
    let cfg = ModelConfig { blind: false, ..small_config() };
    let model = Rvdt::new(&cfg, WeightSet::init(&cfg, 27)).unwrap();
    let clip: Vec<Tensor> = (0..2).map(|i| random_tensor(vec![3, 16, 16], 40 + i)).collect();
    let a = model.denoise_clip(&clip, Some(&NoiseInput::Scalar(0.1))).unwrap();
    let maps = vec![Tensor::filled(vec![1, 16, 16], 0.1); 2];
    let b = model.denoise_clip(&clip, Some(&NoiseInput::Maps(maps))).unwrap();
    assert_eq!(a, b);
    let c = model.denoise_clip(&clip, Some(&NoiseInput::Scalar(0.5))).unwrap();
    assert_ne!(a, c);
    assert!(model.denoise_clip(&clip, None).is_err());
    assert!(model.denoise_clip(&clip, Some(&NoiseInput::Maps(vec![]))).is_err());
}

#[test]
fn blind_model_rejects_noise_level() {
    let cfg = small_config();
    let model = Rvdt::new(&cfg, WeightSet::init(&cfg, 28)).unwrap();
    let clip = vec![random_tensor(vec![3, 16, 16], 50)];
    assert!(model.denoise_clip(&clip, Some(&NoiseInput::Scalar(0.1))).is_err());
    assert!(model.denoise_clip(&[random_tensor(vec![4, 16, 16], 51)], None).is_err());
    assert!(model.denoise_clip(&[], None).is_err());
}

#[test]
fn full_structural_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    for o in checks::run_all(dir.path()) {
        assert!(o.passed, "{}: {}", o.name, o.detail);
    }
}
