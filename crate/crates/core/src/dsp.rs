//! Audio input and MFCC extraction on the shared 20 ms frame grid.
//!
//! Frames are centred: frame `t` covers the window centred on
//! `(t + 0.5) * hop`, with reflective padding at both ends, so the frame
//! count depends only on duration and hop (`T = floor(duration / hop)`).

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{Real, Tensor};

/// The only sample rate accepted by the extractor.
pub const SAMPLE_RATE_HZ: u32 = 16_000;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono RIFF WAV, 16-bit integer (scaled by 1/32768) or 32-bit float.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fmt_err = |msg: String| Error::Format { path: path.to_path_buf(), msg };
        let mut reader = hound::WavReader::open(path).map_err(|e| fmt_err(e.to_string()))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(fmt_err(format!("{} channels, expected mono", spec.channels)));
        }
        let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| fmt_err(e.to_string()))?,
            (hound::SampleFormat::Float, 32) => {
                reader.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(|e| fmt_err(e.to_string()))?
            }
            (f, b) => return Err(fmt_err(format!("unsupported sample format {f:?}/{b} bits"))),
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit PCM (values clipped to [-1, 1)).
    pub fn write_wav_i16(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub log_floor: f64,
    pub preemphasis: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: SAMPLE_RATE_HZ,
            window_ms: 25.0,
            hop_ms: 20.0,
            fft_size: 512,
            n_mels: 40,
            n_coeffs: 13,
            log_floor: 1e-10,
            preemphasis: 0.97,
        }
    }
}

fn ms_to_samples(ms: f64, sr: u32, what: &str) -> Result<usize> {
    let n = ms * sr as f64 / 1000.0;
    if n < 1.0 || (n - n.round()).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("{what} of {ms} ms is not a whole number of samples")));
    }
    Ok(n.round() as usize)
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sample_rate_hz != SAMPLE_RATE_HZ {
            return bad(format!("sample rate {} Hz unsupported (16000 only)", self.sample_rate_hz));
        }
        if !(self.hop_ms > 0.0) || self.window_ms < self.hop_ms {
            return bad(format!("window {} ms / hop {} ms", self.window_ms, self.hop_ms));
        }
        let win = self.window_samples()?;
        self.hop_samples()?;
        if self.fft_size < win {
            return bad(format!("fft size {} shorter than window of {win} samples", self.fft_size));
        }
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return bad(format!("{} coefficients from {} mel bands", self.n_coeffs, self.n_mels));
        }
        if !(self.log_floor > 0.0) {
            return bad("log floor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad(format!("pre-emphasis {} outside [0, 1)", self.preemphasis));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> Result<usize> {
        ms_to_samples(self.window_ms, self.sample_rate_hz, "window")
    }

    pub fn hop_samples(&self) -> Result<usize> {
        ms_to_samples(self.hop_ms, self.sample_rate_hz, "hop")
    }
}

/// T×D frame-synchronous features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    frames: usize,
    dim: usize,
    hop_ms: f64,
    source_tag: String,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>, hop_ms: f64, source_tag: impl Into<String>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::InvalidInput(format!("feature matrix {frames}x{dim} is empty")));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "{frames}x{dim} features need {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        if !(hop_ms > 0.0) {
            return Err(Error::InvalidInput(format!("hop {hop_ms} ms")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self { data, frames, dim, hop_ms, source_tag: source_tag.into() })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hop_ms(&self) -> f64 {
        self.hop_ms
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn duration_s(&self) -> f64 {
        self.frames as f64 * self.hop_ms / 1000.0
    }

    /// Frames `start..end` as a new matrix.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::InvalidInput(format!("frame range {start}..{end} of {}", self.frames)));
        }
        Ok(Self {
            data: self.data[start * self.dim..end * self.dim].to_vec(),
            frames: end - start,
            dim: self.dim,
            hop_ms: self.hop_ms,
            source_tag: self.source_tag.clone(),
        })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::matrix(self.frames, self.dim, self.data.iter().map(|&v| T::of(v)).collect())
            .expect("dimensions checked at construction")
    }
}

/// mel(f) = 2595 · log10(1 + f / 700)
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over `[0, sample_rate / 2]`, `n_mels × (fft_size/2 + 1)`.
pub fn mel_filterbank(cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let n_bins = cfg.fft_size / 2 + 1;
    let nyquist = cfg.sample_rate_hz as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> =
        (0..cfg.n_mels + 2).map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64)).collect();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    let mut bank = Vec::with_capacity(cfg.n_mels);
    for j in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
        let row: Vec<f64> = (0..n_bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0)
            })
            .collect();
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mel filter {j} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; too many mel bands for fft size {}",
                cfg.fft_size
            )));
        }
        bank.push(row);
    }
    Ok(bank)
}

/// Precomputed state for repeated extraction with one config.
pub struct MfccExtractor {
    cfg: MfccConfig,
    filterbank: Vec<Vec<f64>>,
    window: Vec<f64>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
    hop: usize,
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let filterbank = mel_filterbank(&cfg)?;
        let win = cfg.window_samples()?;
        let hop = cfg.hop_samples()?;
        let window = (0..win).map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1) as f64).cos()).collect();
        let m = cfg.n_mels as f64;
        // orthonormal DCT-II rows
        let dct = (0..cfg.n_coeffs)
            .map(|k| {
                let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                (0..cfg.n_mels).map(|n| scale * (PI * k as f64 * (n as f64 + 0.5) / m).cos()).collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self { cfg, filterbank, window, dct, fft, hop })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn extract(&self, audio: &AudioBuffer) -> Result<FeatureMatrix> {
        self.extract_with(audio, Exec::default())
    }

    pub fn extract_with(&self, audio: &AudioBuffer, exec: Exec) -> Result<FeatureMatrix> {
        if audio.samples.is_empty() {
            return Err(Error::InvalidInput("empty audio".into()));
        }
        if audio.sample_rate != self.cfg.sample_rate_hz {
            return Err(Error::SampleRateMismatch { audio: audio.sample_rate, expected: self.cfg.sample_rate_hz });
        }
        let frames = audio.samples.len() / self.hop;
        if frames == 0 {
            return Err(Error::InvalidInput(format!(
                "{} samples is shorter than one {} ms hop",
                audio.samples.len(),
                self.cfg.hop_ms
            )));
        }
        let signal = preemphasize(&audio.samples, self.cfg.preemphasis);
        let rows = exec.map_range(frames, |t| self.frame(&signal, t));
        FeatureMatrix::new(frames, self.cfg.n_coeffs, rows.concat(), self.cfg.hop_ms, "mfcc")
    }

    fn frame(&self, signal: &[f64], t: usize) -> Vec<f64> {
        let win = self.window.len();
        let center = (t * self.hop + self.hop / 2) as isize;
        let start = center - (win / 2) as isize;
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for (n, (slot, w)) in buf.iter_mut().zip(&self.window).enumerate() {
            slot.re = signal[reflect(start + n as isize, signal.len())] * w;
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.cfg.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let log_mel: Vec<f64> = self
            .filterbank
            .iter()
            .map(|f| f.iter().zip(&power).map(|(w, p)| w * p).sum::<f64>().max(self.cfg.log_floor).ln())
            .collect();
        // DCT rows k ≥ 1 sum to zero, so shifting the input by its first value
        // changes nothing except making flat spectra give exact zeros.
        let base = log_mel[0];
        self.dct
            .iter()
            .enumerate()
            .map(|(k, row)| {
                if k == 0 {
                    row.iter().zip(&log_mel).map(|(c, v)| c * v).sum()
                } else {
                    row.iter().zip(&log_mel).map(|(c, v)| c * (v - base)).sum()
                }
            })
            .collect()
    }
}

fn preemphasize(x: &[f32], coeff: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for (i, &s) in x.iter().enumerate() {
        let s = s as f64;
        out.push(if i == 0 { s } else { s - coeff * prev });
        prev = s;
    }
    out
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// One-shot MFCC extraction.
pub fn extract_mfcc(audio: &AudioBuffer, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    if audio.samples.is_empty() {
        return Err(Error::InvalidInput("empty audio".into()));
    }
    if audio.sample_rate != cfg.sample_rate_hz {
        return Err(Error::SampleRateMismatch { audio: audio.sample_rate, expected: cfg.sample_rate_hz });
    }
    MfccExtractor::new(cfg.clone())?.extract(audio)
}
