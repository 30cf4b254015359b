use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::warn;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use vidnoise_core::dataset::{self, ClipPair, NoiseLevel};
use vidnoise_core::io;
use vidnoise_core::isp::{render, IspConfig, Rgb8Image};
use vidnoise_core::metrics::{psnr, residual_histogram, snr, ssim_rgb8, FrameMetrics, Histogram, MetricReport};
use vidnoise_core::motion::{motion_histograms, sequence_flow, to_gray, FlowConfig, HistogramConfig};
use vidnoise_core::noise::{estimate_params, params_for_iso, sample_noisy_mosaic, CalibrationTable, FlatStack, NoiseParams, SeedSpec};
use vidnoise_core::raw::{normalize, pack_gbrg, BayerFrame, Cfa};
use vidnoise_core::Plane;
use vidnoise_rvdt::{checks, ModelConfig, NoiseInput, Rvdt, Tensor, WeightSet};

use crate::args::*;

pub const ISP_FILE: &str = "isp.toml";
pub const TABLE_FILE: &str = "calibration.toml";
pub const MODEL_FILE: &str = "model.toml";

pub struct Ctx<'a> {
    pub seed: u64,
    pub dry_run: bool,
    pub config_dir: Option<&'a Path>,
}

impl Ctx<'_> {
    /// Explicit path, else the file in the config directory if it exists.
    fn resolve(&self, explicit: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
        explicit
            .clone()
            .or_else(|| self.config_dir.map(|d| d.join(name)).filter(|p| p.is_file()))
    }

    fn isp(&self, explicit: &Option<PathBuf>) -> Result<IspConfig> {
        let cfg = match self.resolve(explicit, ISP_FILE) {
            Some(p) => IspConfig::from_toml(&io::read_text(&p)?).with_context(|| format!("ISP config {}", p.display()))?,
            None => IspConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn table(&self, explicit: &Option<PathBuf>) -> Result<CalibrationTable> {
        match self.resolve(explicit, TABLE_FILE) {
            Some(p) => CalibrationTable::from_toml(&io::read_text(&p)?).with_context(|| format!("calibration table {}", p.display())),
            None => Ok(CalibrationTable::builtin()),
        }
    }

    fn model(&self, explicit: &Option<PathBuf>) -> Result<ModelConfig> {
        let cfg = match self.resolve(explicit, MODEL_FILE) {
            Some(p) => ModelConfig::from_toml(&io::read_text(&p)?).with_context(|| format!("model config {}", p.display()))?,
            None => ModelConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Prints one JSON record on stdout.
pub fn report<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn noise_for(table: &CalibrationTable, level: NoiseLevel) -> Result<NoiseParams> {
    let iso = level.iso();
    let (lo, hi) = table.iso_range();
    if iso < lo || iso > hi {
        warn!("ISO {iso} outside calibrated range [{lo}, {hi}], clamping");
    }
    Ok(params_for_iso(table, iso)?)
}

pub fn calibrate(ctx: &Ctx, a: &CalibrateArgs) -> Result<()> {
    let mut table = ctx.table(&a.table)?;
    let dirs = io::list_subdirs(&a.flats)?;
    ensure!(dirs.len() >= 2, "{} needs at least two flat-field stacks, found {}", a.flats.display(), dirs.len());
    let mut cfa = None;
    let stacks = dirs
        .iter()
        .map(|d| {
            let frames = io::read_raw_clip(d)?;
            let c = frames[0].cfa;
            if *cfa.get_or_insert(c) != c {
                bail!("stacks mix CFA patterns");
            }
            let planes = frames.iter().map(normalize).collect::<Result<Vec<Plane>, _>>()?;
            Ok(FlatStack::from_frames(&planes)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = estimate_params(a.iso, &stacks, cfa.expect("at least two stacks"))?;
    report(&json!({ "iso": a.iso, "stacks": stacks.len(), "params": params }))?;
    if let (Some(out), false) = (&a.out, ctx.dry_run) {
        table.upsert(params)?;
        io::write_atomic(out, table.to_toml()?.as_bytes())?;
    }
    Ok(())
}

fn flat_clip(level: f32, (w, h): (usize, usize), n: usize) -> Result<Vec<BayerFrame>> {
    ensure!((0.0..=1.0).contains(&level), "flat level {level} outside [0, 1]");
    let plane = Plane::filled(w, h, level);
    let f = BayerFrame::from_normalized(&plane, Cfa::Gbrg, 0, u16::MAX, 0)?;
    Ok(vec![f; n])
}

pub fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let table = ctx.table(&a.table)?;
    let params = noise_for(&table, a.level.level())?;
    let clean = match (&a.input, a.flat) {
        (Some(dir), _) => io::read_raw_clip(dir)?,
        (None, Some(level)) => flat_clip(level, a.size, a.frames)?,
        (None, None) => unreachable!("clap requires --in or --flat"),
    };
    let iso = params.iso.round() as u32;
    let seed = SeedSpec::new(ctx.seed);
    let noisy = clean
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let x = sample_noisy_mosaic(&normalize(f)?, f.cfa, &params, seed.with_frame(i as u64))?;
            BayerFrame::from_normalized(&x, f.cfa, f.black_level, f.white_level, iso)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if !ctx.dry_run {
        io::write_raw_clip(&a.out, &noisy)?;
    }
    report(&json!({ "frames": noisy.len(), "iso": params.iso, "params": params, "out": a.out }))
}

fn read_raw_input(path: &Path) -> Result<Vec<BayerFrame>> {
    if path.is_file() {
        Ok(vec![io::read_raw_frame(path)?])
    } else {
        Ok(io::read_raw_clip(path)?)
    }
}

fn planar(img: &Rgb8Image) -> Vec<u8> {
    (0..3).flat_map(|c| img.data.iter().skip(c).step_by(3).copied()).collect()
}

pub fn render_cmd(ctx: &Ctx, a: &RenderArgs) -> Result<()> {
    let mut isp = ctx.isp(&a.isp)?;
    for s in &a.disable_stage {
        isp.disable_stage(s)?;
    }
    let noise = match (a.level.level(), a.no_noise) {
        (Some(level), false) => Some(noise_for(&ctx.table(&a.table)?, level)?),
        _ => None,
    };
    let frames = read_raw_input(&a.input)?;
    let seed = SeedSpec::new(ctx.seed);
    let images = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| render(f, noise.as_ref(), &isp, seed.with_frame(i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    if !ctx.dry_run {
        images.par_iter().enumerate().try_for_each(|(i, img)| match a.format {
            FrameFormat::Png => io::write_png(&a.out.join(format!("{}.png", io::frame_name(i))), img),
            FrameFormat::Planar => io::write_atomic(&a.out.join(format!("{}.rgb", io::frame_name(i))), &planar(img)),
        })?;
    }
    report(&json!({
        "frames": images.len(),
        "noise": noise,
        "isp_digest": isp.digest()?,
        "out": a.out,
    }))
}

/// Cuts a video into clips, or keeps it whole.
fn video_clips(ctx: &Ctx, a: &DatasetArgs, name: &str, frames: Vec<BayerFrame>, level: NoiseLevel) -> Result<Vec<(String, Vec<BayerFrame>)>> {
    let Some(k) = a.clips_per_video else {
        return Ok(vec![(name.to_string(), frames)]);
    };
    let seed = dataset::clip_seed(ctx.seed, &format!("{name}/windows"), level);
    let windows = dataset::select_training_clips(frames.len(), k, a.clip_len(), seed)?;
    Ok(windows
        .into_iter()
        .map(|r| (format!("{name}_{}", io::frame_name(r.start)), frames[r].to_vec()))
        .collect())
}

pub fn dataset_cmd(ctx: &Ctx, a: &DatasetArgs) -> Result<()> {
    let isp = ctx.isp(&a.isp)?;
    let table = ctx.table(&a.table)?;
    let level = a.level.level();
    let noise = noise_for(&table, level)?;
    let videos = io::list_subdirs(&a.input)?;
    ensure!(!videos.is_empty(), "{} holds no clip directories", a.input.display());
    let mut ids = Vec::new();
    for dir in &videos {
        let name = dir.file_name().and_then(|n| n.to_str()).context("clip directory name is not UTF-8")?;
        let frames = io::read_raw_clip(dir)?;
        for (id, clip) in video_clips(ctx, a, name, frames, level)? {
            let pair: ClipPair = dataset::build_pair_with_params(&id, &clip, level, noise.clone(), &isp, ctx.seed)?;
            let specs = if a.patches > 0 {
                let f = &pair.clean_raw[0];
                let seed = dataset::clip_seed(ctx.seed, &format!("{id}/patches"), level);
                dataset::sample_patch_specs(f.width, f.height, a.patch_size, a.patches, seed, !a.no_augment)?
            } else {
                Vec::new()
            };
            if !ctx.dry_run {
                dataset::write_clip_pair(&a.out, &pair)?;
                if !specs.is_empty() {
                    dataset::write_patch_index(&a.out.join(&id), &specs)?;
                }
            }
            report(&json!({
                "clip": id,
                "frames": pair.len(),
                "iso": pair.manifest.iso,
                "seed": pair.manifest.seed,
                "patches": specs.len(),
            }))?;
            ids.push(id);
        }
    }
    let split = if ids.len() >= 2 {
        let s = dataset::split_dataset(&ids, a.ratio, ctx.seed)?;
        if !ctx.dry_run {
            dataset::write_split(&a.out, &s)?;
        }
        Some((s.train.len(), s.test.len()))
    } else {
        warn!("a single clip cannot be split; no split file written");
        None
    };
    report(&json!({
        "clips": ids.len(),
        "iso": noise.iso,
        "isp_digest": isp.digest()?,
        "train": split.map(|s| s.0),
        "test": split.map(|s| s.1),
    }))
}

fn read_frames(path: &Path) -> Result<Vec<Rgb8Image>> {
    if path.is_dir() {
        Ok(io::read_png_clip(path)?)
    } else {
        Ok(vec![io::read_png(path).with_context(|| format!("reading {}", path.display()))?])
    }
}

fn unit(img: &Rgb8Image) -> Vec<f32> {
    img.data.iter().map(|&v| v as f32 / 255.0).collect()
}

pub fn metrics_cmd(_ctx: &Ctx, a: &MetricsArgs) -> Result<()> {
    let fa = read_frames(&a.a)?;
    let fb = read_frames(&a.b)?;
    ensure!(fa.len() == fb.len(), "frame counts differ: {} vs {}", fa.len(), fb.len());
    let per_frame = fa
        .par_iter()
        .zip(fb.par_iter())
        .enumerate()
        .map(|(i, (x, y))| {
            ensure!(
                (x.width, x.height) == (y.width, y.height),
                "frame {i}: {}x{} vs {}x{}",
                x.width,
                x.height,
                y.width,
                y.height
            );
            let (ux, uy) = (unit(x), unit(y));
            Ok(FrameMetrics {
                frame: i,
                psnr: psnr(&ux, &uy, 1.0)?,
                ssim: ssim_rgb8(&x.data, &y.data, x.width, x.height)?,
                snr: snr(&ux, &uy)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rep = MetricReport::from_frames(per_frame);
    for f in &rep.per_frame {
        report(f)?;
    }
    report(&json!({ "summary": rep.summary }))?;
    if let (Some(path), false) = (&a.hist, _ctx.dry_run) {
        let residuals = fa
            .iter()
            .zip(&fb)
            .map(|(x, y)| {
                let (lx, ly) = (x.luma(), y.luma());
                Plane::new(lx.width, lx.height, lx.data.iter().zip(&ly.data).map(|(p, q)| p - q).collect())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let h = residual_histogram(residuals.iter(), &Histogram::residual());
        let mut text = String::from("lo\thi\tmass\n");
        for (b, m) in h.normalized().iter().enumerate() {
            let (lo, hi) = h.bin_range(b);
            text.push_str(&format!("{lo:.6}\t{hi:.6}\t{m:.8}\n"));
        }
        io::write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

pub fn flow_cmd(ctx: &Ctx, a: &FlowArgs) -> Result<()> {
    let frames = io::read_png_clip(&a.input)?;
    ensure!(frames.len() >= 2, "flow needs at least two frames");
    let gray: Vec<Plane> = frames.iter().map(to_gray).collect();
    let cfg = FlowConfig::default().fitted_to(gray[0].width, gray[0].height);
    if cfg.levels < FlowConfig::default().levels {
        warn!("frames are small; using {} pyramid levels", cfg.levels);
    }
    let flows = sequence_flow(&gray, &cfg)?;
    let hist = motion_histograms(&flows, HistogramConfig::default());
    let table = hist.to_table();
    if ctx.dry_run {
        return Ok(());
    }
    if let Some(path) = &a.dump {
        let bytes: Vec<u8> = flows.iter().flat_map(|f| f.to_planar_bytes()).collect();
        io::write_atomic(path, &bytes)?;
    }
    match &a.out {
        Some(path) => io::write_atomic(path, table.as_bytes())?,
        None => print!("{table}"),
    }
    Ok(())
}

fn clip_tensors(cfg: &ModelConfig, dir: &Path) -> Result<(Vec<Tensor>, usize, usize)> {
    match cfg.in_channels {
        3 => {
            let imgs = io::read_png_clip(dir)?;
            let (w, h) = (imgs[0].width, imgs[0].height);
            let t = imgs
                .iter()
                .map(|img| {
                    let data = planar(img).into_iter().map(|v| v as f32 / 255.0).collect();
                    Ok(Tensor::new(vec![3, img.height, img.width], data)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((t, w, h))
        }
        4 => {
            let frames = io::read_raw_clip(dir)?;
            let t = frames
                .iter()
                .map(|f| {
                    let p = pack_gbrg(&normalize(f)?, f.cfa)?;
                    let data = p.planes.concat();
                    Ok(Tensor::new(vec![4, p.height, p.width], data)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let (w, h) = (t[0].shape[2], t[0].shape[1]);
            Ok((t, w, h))
        }
        c => bail!("no clip reader for {c}-channel models"),
    }
}

fn to_rgb8(t: &Tensor) -> Result<Rgb8Image> {
    let (c, h, w) = t.chw()?;
    ensure!(c == 3, "model produces {c} channels, expected 3");
    let hw = h * w;
    let data = (0..hw)
        .flat_map(|i| (0..3).map(move |ch| (ch, i)))
        .map(|(ch, i)| (t.data[ch * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(Rgb8Image { width: w, height: h, data })
}

pub fn rvdt_cmd(ctx: &Ctx, cmd: &RvdtCommand) -> Result<bool> {
    match cmd {
        RvdtCommand::Params(m) => {
            let cfg = ctx.model(&m.config)?;
            report(&json!({ "params": vidnoise_rvdt::param_count(&cfg), "config": cfg }))?;
        }
        RvdtCommand::Check => {
            let scratch = tempfile::tempdir()?;
            let outcomes = checks::run_all(scratch.path());
            for o in &outcomes {
                report(o)?;
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
        RvdtCommand::Init(a) => {
            let cfg = ctx.model(&a.model.config)?;
            let w = WeightSet::init(&cfg, ctx.seed);
            if !ctx.dry_run {
                w.save(&a.out)?;
            }
            report(&json!({ "params": w.element_count(), "out": a.out }))?;
        }
        RvdtCommand::Run(a) => {
            let cfg = ctx.model(&a.model.config)?;
            let weights = WeightSet::load(&a.weights)?;
            let model = Rvdt::new(&cfg, weights)?;
            let (clip, w, h) = clip_tensors(&cfg, &a.clip)?;
            let noise = a.noise_level.map(NoiseInput::Scalar);
            let out = model.denoise_clip(&clip, noise.as_ref())?;
            if !ctx.dry_run {
                out.par_iter().enumerate().try_for_each(|(i, t)| -> Result<()> {
                    io::write_png(&a.out.join(format!("{}.png", io::frame_name(i))), &to_rgb8(t)?)?;
                    Ok(())
                })?;
            }
            report(&json!({ "frames": out.len(), "width": w, "height": h, "out": a.out }))?;
        }
    }
    Ok(true)
}
