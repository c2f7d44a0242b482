//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use fusion_vad::tensor::{ParamStore, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors. Central differences of an O(1)
/// loss at h=1e-5 carry ~1e-11 of rounding noise, so gradients that are
/// exactly zero (e.g. attention key biases) need a floor well above it.
pub const FD_FLOOR: f64 = 1e-6;

/// `|g - ĝ| / max(FD_FLOOR, |g| + |ĝ|)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FD_FLOOR)
}

/// Worst relative error between `analytic` and central differences of `loss`
/// over every scalar in `store`. Returns (error, parameter name, index).
pub fn max_fd_error(
    store: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> (f64, String, usize) {
    let mut worst = (0.0, String::new(), 0);
    let mut probe = store.clone();
    for (pi, (name, t)) in store.iter().enumerate() {
        for k in 0..t.numel() {
            let orig = t.data()[k];
            probe.get_mut(name).unwrap().data_mut()[k] = orig + FD_STEP;
            let up = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[k] = orig - FD_STEP;
            let down = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_error(analytic[pi].data()[k], numeric);
            if err > worst.0 {
                worst = (err, name.to_string(), k);
            }
        }
    }
    worst
}

pub fn lcg_tensor(seed: &mut u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*seed >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Brute-force MFCC reference: direct DFT, its own filterbank and DCT.
/// Parameters are the library defaults (16 kHz, 25 ms Hamming, 20 ms hop,
/// 512-point DFT, 40 mels, 13 coefficients, floor 1e-10, pre-emphasis 0.97).
pub fn mfcc_reference(samples: &[f32]) -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    let (sr, win, hop, nfft, nmel, ncep) = (16_000.0, 400usize, 320usize, 512usize, 40usize, 13usize);
    let x: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    let mut y = vec![0.0; x.len()];
    for n in 0..x.len() {
        y[n] = if n == 0 { x[0] } else { x[n] - 0.97 * x[n - 1] };
    }
    let len = y.len() as i64;
    let mirror = |mut i: i64| -> usize {
        // bounce off both ends until inside
        loop {
            if i < 0 {
                i = -i;
            } else if i >= len {
                i = 2 * (len - 1) - i;
            } else {
                return i as usize;
            }
        }
    };
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let imel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(sr / 2.0);
    let pts: Vec<f64> = (0..nmel + 2).map(|i| imel(top * i as f64 / (nmel as f64 + 1.0))).collect();
    let nbin = nfft / 2 + 1;
    let mut fb = vec![vec![0.0; nbin]; nmel];
    for j in 0..nmel {
        for k in 0..nbin {
            let f = k as f64 * sr / nfft as f64;
            let w = if f > pts[j] && f <= pts[j + 1] {
                (f - pts[j]) / (pts[j + 1] - pts[j])
            } else if f > pts[j + 1] && f < pts[j + 2] {
                (pts[j + 2] - f) / (pts[j + 2] - pts[j + 1])
            } else {
                0.0
            };
            fb[j][k] = w;
        }
    }
    let frames = samples.len() / hop;
    (0..frames)
        .map(|t| {
            let start = (t * hop + hop / 2) as i64 - (win / 2) as i64;
            let frame: Vec<f64> = (0..win)
                .map(|n| y[mirror(start + n as i64)] * (0.54 - 0.46 * (2.0 * PI * n as f64 / (win as f64 - 1.0)).cos()))
                .collect();
            let power: Vec<f64> = (0..nbin)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (n, v) in frame.iter().enumerate() {
                        let ang = -2.0 * PI * (k * n) as f64 / nfft as f64;
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    re * re + im * im
                })
                .collect();
            let logmel: Vec<f64> =
                fb.iter().map(|row| row.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>().max(1e-10).ln()).collect();
            (0..ncep)
                .map(|k| {
                    let norm = if k == 0 { (1.0 / nmel as f64).sqrt() } else { (2.0 / nmel as f64).sqrt() };
                    norm * logmel
                        .iter()
                        .enumerate()
                        .map(|(n, v)| v * (PI * k as f64 * (2 * n + 1) as f64 / (2 * nmel) as f64).cos())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Deterministic test clip: a few random tones plus noise.
pub fn random_clip(seed: u64) -> Vec<f32> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    let n = 5_000 + (next() * 20_000.0) as usize;
    let tones: Vec<(f64, f64)> = (0..3).map(|_| (80.0 + next() * 7000.0, next() * 0.3)).collect();
    let noise = next() * 0.2;
    (0..n)
        .map(|i| {
            let t = i as f64 / 16_000.0;
            let v: f64 = tones.iter().map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin()).sum();
            (v + noise * (next() * 2.0 - 1.0)) as f32
        })
        .collect()
}

pub fn max_abs_diff_rows(a: &fusion_vad::dsp::FeatureMatrix, b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.frames(), b.len());
    (0..a.frames())
        .flat_map(|t| a.row(t).iter().zip(&b[t]).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

pub const WEIGHT_SCALE: f64 = 0.6;

/// Tiny model dims used by the full-graph gradient check.
pub fn tiny_config(mode: fusion_vad::model::FusionMode) -> fusion_vad::model::FusionConfig {
    fusion_vad::model::FusionConfig { d_model: 8, lstm_hidden: 8, ..fusion_vad::model::FusionConfig::new(mode, 5, 7) }
}

/// Central-difference check of the whole network in f64 at T=6.
pub fn full_graph_fd_error(mode: fusion_vad::model::FusionMode, seed: u64) -> (f64, String, usize) {
    use fusion_vad::model::{build_model, forward_graph, loss_and_grads};
    use fusion_vad::tensor::Graph;
    let cfg = tiny_config(mode);
    // Redraw every tensor at unit-ish scale: the default init leaves some
    // LSTM gradients near 1e-9, below what h=1e-5 differences can resolve.
    let init = build_model::<f64>(&cfg, seed).unwrap();
    let mut s = seed.wrapping_add(99);
    let mut store = fusion_vad::tensor::ParamStore::new();
    for (name, t) in init.iter() {
        store.insert(name, lcg_tensor(&mut s, t.shape(), WEIGHT_SCALE)).unwrap();
    }
    let mfcc = lcg_tensor(&mut s, &[6, 5], 1.5);
    let ptm = lcg_tensor(&mut s, &[6, 7], 1.5);
    let labels = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0];
    let (_, grads) = loss_and_grads(&store, &cfg, Some(&mfcc), Some(&ptm), &labels).unwrap();
    max_fd_error(&store, &grads.params, |st| {
        let mut g = Graph::with_params(st);
        let n = forward_graph(&mut g, &cfg, Some(&mfcc), Some(&ptm)).unwrap();
        let l = g.bce(n.probs, &labels).unwrap();
        g.value(l).data()[0]
    })
}

/// A reference alternating speech and silence over a 60 s file, and a
/// hypothesis derived from it by jittering boundaries, dropping segments
/// and adding false alarms. Boundaries are real-valued.
pub fn random_timeline_pair(seed: u64) -> (fusion_vad::data::Timeline, fusion_vad::data::Timeline, f64) {
    use fusion_vad::data::Timeline;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dur: f64 = 60.0;
    let mut reference = Vec::new();
    let mut t = rng.gen_range(0.0..3.0);
    while t < dur {
        let end = (t + rng.gen_range(0.3..6.0)).min(dur);
        reference.push((t, end));
        t = end + rng.gen_range(0.2..5.0);
    }
    let mut hyp = Vec::new();
    for &(s, e) in &reference {
        if rng.gen_bool(0.15) {
            continue;
        }
        let s2 = (s + rng.gen_range(-0.5..0.5)).max(0.0);
        let e2 = (e + rng.gen_range(-0.5..0.5)).min(dur);
        if s2 < e2 {
            hyp.push((s2, e2));
        }
    }
    for _ in 0..rng.gen_range(0..5) {
        let s = rng.gen_range(0.0..dur - 1.0);
        hyp.push((s, s + rng.gen_range(0.05..1.0)));
    }
    (Timeline::new(reference).unwrap(), Timeline::new(hyp).unwrap(), dur)
}

/// FA and miss seconds by sampling 1 ms cells at their midpoints.
pub fn grid_oracle(r: &fusion_vad::data::Timeline, h: &fusion_vad::data::Timeline, dur: f64) -> (f64, f64, f64) {
    let n = (dur * 1000.0).round() as usize;
    let (mut speech, mut fa, mut miss) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let c = (i as f64 + 0.5) / 1000.0;
        let (a, b) = (r.contains(c), h.contains(c));
        speech += a as usize;
        fa += (b && !a) as usize;
        miss += (a && !b) as usize;
    }
    (speech as f64 / 1000.0, fa as f64 / 1000.0, miss as f64 / 1000.0)
}

/// Independent count: enumerate every weight matrix and bias vector.
pub fn enumerate_count(cfg: &fusion_vad::model::FusionConfig) -> usize {
    let mut shapes: Vec<(usize, usize)> = Vec::new(); // (rows, cols); bias = (1, n)
    let dense = |shapes: &mut Vec<(usize, usize)>, i, o| {
        shapes.push((i, o));
        shapes.push((1, o));
    };
    let dm = cfg.d_model;
    let h = cfg.lstm_hidden;
    for (used, d) in [
        (cfg.mode != fusion_vad::model::FusionMode::NonePtm, cfg.d_mfcc),
        (cfg.mode != fusion_vad::model::FusionMode::NoneMfcc, cfg.d_ptm),
    ] {
        if used {
            dense(&mut shapes, d, dm);
            dense(&mut shapes, dm, dm);
        }
    }
    match cfg.mode {
        fusion_vad::model::FusionMode::Concat => dense(&mut shapes, 2 * dm, dm),
        fusion_vad::model::FusionMode::Add => {}
        fusion_vad::model::FusionMode::Xattn => {
            for _ in 0..4 {
                dense(&mut shapes, dm, dm);
            }
            shapes.push((2, dm));
        }
        _ => dense(&mut shapes, dm, dm),
    }
    let mut din = dm;
    for _ in 0..cfg.lstm_layers {
        for _ in 0..2 {
            shapes.push((din, 4 * h));
            shapes.push((h, 4 * h));
            shapes.push((1, 4 * h));
        }
        din = 2 * h;
    }
    dense(&mut shapes, 2 * h, dm);
    dense(&mut shapes, dm, dm);
    dense(&mut shapes, dm, 1);
    shapes.iter().map(|(r, c)| r * c).sum()
}
