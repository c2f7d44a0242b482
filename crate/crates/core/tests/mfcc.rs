mod common;

use common::{max_abs_diff_rows, mfcc_reference, random_clip};
use fusion_vad::dsp::MfccExtractor;
use fusion_vad::dsp::{extract_mfcc, AudioBuffer, MfccConfig};
use fusion_vad::exec::Exec;

fn clip(samples: Vec<f32>) -> AudioBuffer {
    AudioBuffer::new(samples, 16_000).unwrap()
}

#[test]
fn sine_matches_direct_dft_reference() {
    let s: Vec<f32> =
        (0..16_000).map(|i| (0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin()) as f32).collect();
    let m = extract_mfcc(&clip(s.clone()), &MfccConfig::default()).unwrap();
    assert_eq!(m.frames(), 50);
    assert!(max_abs_diff_rows(&m, &mfcc_reference(&s)) < 1e-4);
}

#[test]
fn extraction_is_deterministic_across_exec_modes() {
    let audio = clip(random_clip(7));
    let ex = MfccExtractor::new(MfccConfig::default()).unwrap();
    let a = ex.extract_with(&audio, Exec::Parallel).unwrap();
    let b = ex.extract_with(&audio, Exec::Sequential).unwrap();
    let c = ex.extract_with(&audio, Exec::Parallel).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a, c);
}

#[test]
fn amplitude_scaling_only_moves_c0() {
    let base = random_clip(11);
    let cfg = MfccConfig::default();
    let m1 = extract_mfcc(&clip(base.clone()), &cfg).unwrap();
    for k in [0.25f32, 3.0] {
        let m2 = extract_mfcc(&clip(base.iter().map(|v| v * k).collect()), &cfg).unwrap();
        let shift = m2.row(0)[0] - m1.row(0)[0];
        for t in 0..m1.frames() {
            assert!((m2.row(t)[0] - m1.row(t)[0] - shift).abs() < 1e-6);
            for c in 1..13 {
                assert!((m2.row(t)[c] - m1.row(t)[c]).abs() < 1e-6, "frame {t} coeff {c}");
            }
        }
        // log-power shift: sqrt(40) · 2 ln k
        assert!((shift - 40f64.sqrt() * 2.0 * (k as f64).ln()).abs() < 1e-6);
    }
}
