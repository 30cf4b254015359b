use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidnoise_core::metrics::{kl_divergence, psnr, ssim, temporal_average, Histogram};
use vidnoise_core::motion::{dense_flow, FlowConfig};
use vidnoise_core::noise::{sample_noisy, NoiseParams, SeedSpec};
use vidnoise_core::raw::Channel;
use vidnoise_core::Plane;

/// Direct 2D-window SSIM, no separability.
fn ssim_reference(a: &Plane, b: &Plane) -> f64 {
    let (n, sigma) = (11usize, 1.5f64);
    let r = (n / 2) as f64;
    let mut w = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let (dx, dy) = (i as f64 - r, j as f64 - r);
            w[j * n + i] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=a.height - n {
        for x0 in 0..=a.width - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..n {
                for i in 0..n {
                    let k = w[j * n + i];
                    let va = a.get(x0 + i, y0 + j) as f64;
                    let vb = b.get(x0 + i, y0 + j) as f64;
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn random_plane(w: usize, h: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Plane::from_fn(w, h, |_, _| rng.gen::<f32>())
}

#[test]
fn ssim_matches_brute_force() {
    let a = Plane::filled(16, 16, 0.25);
    let b = Plane::filled(16, 16, 0.75);
    let r = ssim_reference(&a, &b);
    assert!((ssim(&a, &b).unwrap() - r).abs() < 1e-4);
    assert!((r - 0.60006).abs() < 1e-4);

    let x = random_plane(16, 16, 1);
    let y = random_plane(16, 16, 2);
    assert!((ssim(&x, &y).unwrap() - ssim_reference(&x, &y)).abs() < 1e-4);
}

#[test]
fn ssim_of_inverted_fluctuation_is_negative() {
    let mut a = random_plane(16, 16, 3);
    let m = a.mean() as f32;
    a.data.iter_mut().for_each(|v| *v += 0.5 - m);
    let b = Plane::new(16, 16, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    let s = ssim(&a, &b).unwrap();
    assert!(s < 0.0);
    assert!((s - ssim_reference(&a, &b)).abs() < 1e-4);
}

#[test]
fn psnr_and_kl_closed_forms() {
    let a = vec![0.3f32; 64];
    let b = vec![0.4f32; 64];
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
    let p = Histogram::from_masses(&Histogram::uniform(0.0, 1.0, 2).unwrap(), &[0.5, 0.5]).unwrap();
    let q = Histogram::from_masses(&Histogram::uniform(0.0, 1.0, 2).unwrap(), &[0.25, 0.75]).unwrap();
    let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((kl_divergence(&p, &q).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 0.14384).abs() < 1e-5);
}

fn std_dev(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn temporal_average_reduces_noise_by_sqrt_n() {
    let clean = Plane::filled(128, 128, 0.4);
    let params = NoiseParams::uniform(1600.0, 0.03, 0.01);
    let frames: Vec<Plane> = (0..50)
        .map(|t| sample_noisy(&clean, &params, Channel::G, SeedSpec::new(11).with_frame(t)).unwrap())
        .collect();
    let single = std_dev(frames[0].data.iter().zip(&clean.data).map(|(a, b)| (a - b) as f64));
    let avg = temporal_average(&frames, 50).unwrap();
    let averaged = std_dev(avg.data.iter().zip(&clean.data).map(|(a, b)| (a - b) as f64));
    let ratio = single / averaged;
    assert!((ratio / 50f64.sqrt() - 1.0).abs() < 0.05, "ratio {ratio}");
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let p = 2 * (n - 1);
    let m = i.rem_euclid(p);
    (if m < n { m } else { p - m }) as usize
}

/// Smooth multi-frequency texture.
fn texture(w: usize, h: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f32, f32, f32, f32)> = (0..12)
        .map(|_| {
            let period = rng.gen_range(12.0..48.0f32);
            let angle = rng.gen_range(0.0..std::f32::consts::PI);
            let k = std::f32::consts::TAU / period;
            (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..std::f32::consts::TAU), rng.gen_range(0.02..0.06))
        })
        .collect();
    Plane::from_fn(w, h, |x, y| {
        0.5 + waves
            .iter()
            .map(|(kx, ky, ph, a)| a * (kx * x as f32 + ky * y as f32 + ph).sin())
            .sum::<f32>()
    })
}

fn shifted(p: &Plane, dx: isize, dy: isize) -> Plane {
    Plane::from_fn(p.width, p.height, |x, y| {
        p.get(reflect(x as isize - dx, p.width), reflect(y as isize - dy, p.height))
    })
}

fn check_translation(dx: isize, dy: isize) {
    let f0 = texture(256, 256, 5);
    let f1 = shifted(&f0, dx, dy);
    let flow = dense_flow(&f0, &f1, &FlowConfig::default()).unwrap();
    let (mu, mv) = flow.interior_median(32);
    assert!((mu - dx as f32).abs() < 0.5 && (mv - dy as f32).abs() < 0.5, "({dx},{dy}) -> ({mu},{mv})");
}

#[test]
fn flow_identical_frames_is_still() {
    let f0 = texture(128, 128, 6);
    let flow = dense_flow(&f0, &f0, &FlowConfig::default()).unwrap();
    let mut mags: Vec<f32> = flow.magnitudes().map(|m| m as f32).collect();
    assert!(vidnoise_core::motion::median(&mut mags) < 0.05);
}

#[test]
fn flow_recovers_horizontal_shift() {
    check_translation(3, 0);
}

#[test]
fn flow_recovers_vertical_shift() {
    check_translation(0, -2);
}

#[test]
fn flow_recovers_diagonal_shift() {
    check_translation(5, 4);
}

#[test]
fn flow_recovers_large_shift() {
    check_translation(-8, 6);
}
