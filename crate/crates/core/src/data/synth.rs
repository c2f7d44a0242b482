//! Synthetic two-stream benchmark with complementary failure modes.
//!
//! Stream A ("MFCC-like") responds to energy: it has the same mean on speech
//! and on injected non-speech noise bursts. Stream B ("PTM-like") responds
//! only to speech, but loses its speech response on contiguous dropout runs
//! at the edges of speech segments. A model on A alone is pushed toward
//! false alarms, one on B alone toward misses. Frames are drawn i.i.d. from
//! unit-variance Gaussians with the class means below.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Split, Timeline, Utterance};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const SYNTH_HOP_MS: f64 = 20.0;
/// Stream A mean on speech, dropout and burst frames (0 elsewhere).
pub const A_ACTIVE_MEAN: f64 = 1.5;
/// Stream B mean on speech frames outside dropouts (0 elsewhere).
pub const B_SPEECH_MEAN: f64 = 1.0;
/// Speech segment and burst durations are uniform in this range (seconds).
pub const SEGMENT_RANGE_S: (f64, f64) = (0.6, 3.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_files: usize,
    pub file_s: f64,
    /// Target fraction of speech frames.
    pub speech_density: f64,
    /// Noise bursts per minute of audio.
    pub noise_burst_rate: f64,
    /// Mean fraction of each speech segment lost in stream B.
    pub ptm_dropout: f64,
    pub d_mfcc_like: usize,
    pub d_ptm_like: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_files: 20,
            file_s: 60.0,
            speech_density: 0.5,
            noise_burst_rate: 4.0,
            ptm_dropout: 0.15,
            d_mfcc_like: 13,
            d_ptm_like: 32,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.speech_density > 0.0 && self.speech_density < 1.0) {
            return bad(format!("speech_density must be in (0, 1), got {}", self.speech_density));
        }
        if !(self.ptm_dropout >= 0.0 && self.ptm_dropout < 0.5) {
            return bad(format!("ptm_dropout must be in [0, 0.5), got {}", self.ptm_dropout));
        }
        if !(self.noise_burst_rate >= 0.0 && self.noise_burst_rate.is_finite()) {
            return bad(format!("noise_burst_rate must be nonnegative, got {}", self.noise_burst_rate));
        }
        if self.n_files == 0 || self.d_mfcc_like == 0 || self.d_ptm_like == 0 {
            return bad("n_files and stream dims must be at least 1".into());
        }
        if !(self.file_s * 1000.0 / SYNTH_HOP_MS >= 1.0) {
            return bad(format!("file_s {} is shorter than one frame", self.file_s));
        }
        Ok(())
    }

    /// First 60% of files train, next 20% dev, the rest test.
    pub fn split_of(&self, index: usize) -> Split {
        let n_train = (self.n_files as f64 * 0.6).round() as usize;
        let n_dev = (self.n_files as f64 * 0.2).round() as usize;
        if index < n_train {
            Split::Train
        } else if index < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

/// A generated file plus the hidden structure behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFile {
    pub utterance: Utterance,
    pub bursts: Timeline,
    pub dropouts: Timeline,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Silence,
    Speech,
    Dropout,
    Burst,
}

fn frames_of(s: f64) -> usize {
    (s * 1000.0 / SYNTH_HOP_MS).round() as usize
}

fn runs(kinds: &[Kind], want: &[Kind]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < kinds.len() {
        if want.contains(&kinds[t]) {
            let s = t;
            while t < kinds.len() && want.contains(&kinds[t]) {
                t += 1;
            }
            out.push((s, t));
        } else {
            t += 1;
        }
    }
    out
}

fn to_timeline(runs: &[(usize, usize)]) -> Timeline {
    let sec = |f: usize| f as f64 * SYNTH_HOP_MS / 1000.0;
    Timeline::new(runs.iter().map(|&(s, e)| (sec(s), sec(e)))).expect("runs are nonempty")
}

fn layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Kind> {
    let total = frames_of(spec.file_s).max(1);
    let mut kinds = vec![Kind::Silence; total];
    let (lo, hi) = SEGMENT_RANGE_S;
    let mean_gap = (lo + hi) / 2.0 * (1.0 - spec.speech_density) / spec.speech_density;
    let mut t = 0;
    loop {
        t += frames_of(rng.gen_range(0.5 * mean_gap..=1.5 * mean_gap)).max(1);
        let len = frames_of(rng.gen_range(lo..=hi));
        if t + len > total {
            break;
        }
        let drop = (rng.gen_range(0.0..=2.0 * spec.ptm_dropout) * len as f64).round() as usize;
        let at_start = rng.gen_bool(0.5);
        for (i, k) in kinds[t..t + len].iter_mut().enumerate() {
            let dropped = if at_start { i < drop } else { i >= len - drop };
            *k = if dropped { Kind::Dropout } else { Kind::Speech };
        }
        t += len;
    }

    // bursts sit inside silent gaps with at least MARGIN frames of silence around them
    const MARGIN: usize = 3;
    let n_bursts = (spec.noise_burst_rate * spec.file_s / 60.0).round() as usize;
    for _ in 0..n_bursts {
        let want = frames_of(rng.gen_range(lo..=hi));
        let gaps: Vec<(usize, usize)> =
            runs(&kinds, &[Kind::Silence]).into_iter().filter(|&(s, e)| e - s > 2 * MARGIN + 5).collect();
        if gaps.is_empty() {
            break;
        }
        let (s, e) = gaps[rng.gen_range(0..gaps.len())];
        let room = e - s - 2 * MARGIN;
        let len = want.min(room);
        let start = s + MARGIN + rng.gen_range(0..=room - len);
        kinds[start..start + len].iter_mut().for_each(|k| *k = Kind::Burst);
    }
    kinds
}

fn generate_file(spec: &SynthSpec, index: usize) -> Result<SynthFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let kinds = layout(spec, &mut rng);
    let (da, db) = (spec.d_mfcc_like, spec.d_ptm_like);
    let mut a = Vec::with_capacity(kinds.len() * da);
    let mut b = Vec::with_capacity(kinds.len() * db);
    for &k in &kinds {
        let ma = if k == Kind::Silence { 0.0 } else { A_ACTIVE_MEAN };
        let mb = if k == Kind::Speech { B_SPEECH_MEAN } else { 0.0 };
        a.extend((0..da).map(|_| ma + Distribution::<f64>::sample(&StandardNormal, &mut rng)));
        b.extend((0..db).map(|_| mb + Distribution::<f64>::sample(&StandardNormal, &mut rng)));
    }
    let t = kinds.len();
    let mfcc = FeatureMatrix::new(t, da, a, SYNTH_HOP_MS, "synth:a")?;
    let ptm = FeatureMatrix::new(t, db, b, SYNTH_HOP_MS, "synth:b")?;
    let reference = to_timeline(&runs(&kinds, &[Kind::Speech, Kind::Dropout]));
    let utterance = Utterance::new(format!("synth{index:04}"), spec.split_of(index), Some(mfcc), Some(ptm), reference)?;
    Ok(SynthFile {
        utterance,
        bursts: to_timeline(&runs(&kinds, &[Kind::Burst])),
        dropouts: to_timeline(&runs(&kinds, &[Kind::Dropout])),
    })
}

/// Deterministic in `spec` (each file draws from its own ChaCha stream).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SynthFile>> {
    generate_synthetic_with(spec, Exec::default())
}

pub fn generate_synthetic_with(spec: &SynthSpec, exec: Exec) -> Result<Vec<SynthFile>> {
    spec.validate()?;
    exec.map_range(spec.n_files, |i| generate_file(spec, i)).into_iter().collect()
}
