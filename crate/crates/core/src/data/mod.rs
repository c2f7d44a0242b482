//! Feature files, RTTM references, frame labels, chunking, dataset manifests
//! and the synthetic two-stream benchmark.

mod features;
mod manifest;
mod rttm;
pub mod synth;
mod timeline;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use features::{
    align_streams, decode_features, encode_features, read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION,
    MAX_FRAME_SKEW,
};
pub use manifest::{load_dataset, read_manifest, write_manifest, ManifestEntry};
pub use rttm::{parse_rttm, serialize_rttm};
pub use synth::{generate_synthetic, SynthFile, SynthSpec};
pub use timeline::{labels_from_timeline, Segment, Timeline};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split {s:?}"))),
        }
    }
}

/// One file: aligned feature streams plus its reference and frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub file_id: String,
    pub split: Split,
    pub mfcc: Option<FeatureMatrix>,
    pub ptm: Option<FeatureMatrix>,
    pub reference: Timeline,
    pub labels: Vec<u8>,
}

impl Utterance {
    /// Aligns the streams (see [`align_streams`]) and labels every frame.
    pub fn new(
        file_id: impl Into<String>,
        split: Split,
        mfcc: Option<FeatureMatrix>,
        ptm: Option<FeatureMatrix>,
        reference: Timeline,
    ) -> Result<Self> {
        let file_id = file_id.into();
        let (mfcc, ptm) = match (mfcc, ptm) {
            (Some(a), Some(b)) => {
                let (a, b) = align_streams(a, b).map_err(|e| Error::FrameGridMismatch(format!("{file_id}: {e}")))?;
                (Some(a), Some(b))
            }
            (None, None) => return Err(Error::InvalidInput(format!("{file_id}: no feature streams"))),
            other => other,
        };
        let grid = mfcc.as_ref().or(ptm.as_ref()).expect("one stream present");
        let labels = labels_from_timeline(&reference, grid.frames(), grid.hop_ms());
        Ok(Self { file_id, split, mfcc, ptm, reference, labels })
    }

    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn hop_ms(&self) -> f64 {
        self.grid().hop_ms()
    }

    pub fn duration_s(&self) -> f64 {
        self.grid().duration_s()
    }

    fn grid(&self) -> &FeatureMatrix {
        self.mfcc.as_ref().or(self.ptm.as_ref()).expect("one stream present")
    }
}

/// A fixed-length training or evaluation window.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub mfcc: Option<FeatureMatrix>,
    pub ptm: Option<FeatureMatrix>,
    pub labels: Vec<u8>,
    pub file_id: String,
    pub start_s: f64,
}

impl Chunk {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }
}

pub enum ChunkMode<'r, R: Rng> {
    /// floor(duration / chunk_s) windows at uniformly random frame offsets.
    Train(&'r mut R),
    /// Non-overlapping tiling from 0; the last chunk may be shorter.
    Eval,
}

pub fn chunk_frames(chunk_s: f64, hop_ms: f64) -> Result<usize> {
    let n = chunk_s * 1000.0 / hop_ms;
    if !(n >= 1.0) || !n.is_finite() {
        return Err(Error::InvalidConfig(format!("chunk of {chunk_s} s is shorter than one {hop_ms} ms frame")));
    }
    Ok(n.round() as usize)
}

pub fn make_chunks<R: Rng>(utt: &Utterance, chunk_s: f64, mode: ChunkMode<'_, R>) -> Result<Vec<Chunk>> {
    let cf = chunk_frames(chunk_s, utt.hop_ms())?;
    let t = utt.frames();
    let ranges: Vec<(usize, usize)> = match mode {
        ChunkMode::Eval => (0..t).step_by(cf).map(|s| (s, (s + cf).min(t))).collect(),
        ChunkMode::Train(rng) => {
            let n = t / cf;
            (0..n)
                .map(|_| {
                    let s = rng.gen_range(0..=t - cf);
                    (s, s + cf)
                })
                .collect()
        }
    };
    ranges
        .into_iter()
        .map(|(s, e)| {
            let cut = |m: &Option<FeatureMatrix>| m.as_ref().map(|m| m.slice_frames(s, e)).transpose();
            Ok(Chunk {
                mfcc: cut(&utt.mfcc)?,
                ptm: cut(&utt.ptm)?,
                labels: utt.labels[s..e].to_vec(),
                file_id: utt.file_id.clone(),
                start_s: s as f64 * utt.hop_ms() / 1000.0,
            })
        })
        .collect()
}
