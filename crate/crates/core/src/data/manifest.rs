//! JSON-lines dataset manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse_rttm, read_features, Split, Timeline, Utterance};
use crate::dsp::{AudioBuffer, MfccExtractor};
use crate::error::{Error, Result};

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mfcc_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptm_path: Option<String>,
    pub rttm_key: String,
    pub split: Split,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every entry (optionally only one split). MFCCs are extracted from
/// `wav` when no `mfcc_path` is given. The reference RTTM defaults to
/// `reference.rttm` beside the manifest; files absent from it have no speech.
pub fn load_dataset(manifest: &Path, rttm: Option<&Path>, split: Option<Split>) -> Result<Vec<Utterance>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let rttm_path = rttm.map(Path::to_path_buf).unwrap_or_else(|| base.join("reference.rttm"));
    let text =
        fs::read_to_string(&rttm_path).map_err(|e| Error::Format { path: rttm_path.clone(), msg: e.to_string() })?;
    let refs: BTreeMap<String, Timeline> = parse_rttm(&text)?;
    let mut extractor = None;
    let mut out = Vec::new();
    for e in read_manifest(manifest)? {
        if split.is_some_and(|s| s != e.split) {
            continue;
        }
        let mfcc = match (&e.mfcc_path, &e.wav) {
            (Some(p), _) => Some(read_features(&resolve(base, p))?),
            (None, Some(w)) => {
                let ex = match &mut extractor {
                    Some(ex) => ex,
                    None => extractor.insert(MfccExtractor::new(Default::default())?),
                };
                let path = resolve(base, w);
                let audio = AudioBuffer::read_wav(&path)?;
                Some(ex.extract(&audio)?)
            }
            (None, None) => None,
        };
        let ptm = e.ptm_path.as_deref().map(|p| read_features(&resolve(base, p))).transpose()?;
        let reference = refs.get(&e.rttm_key).cloned().unwrap_or_else(|| {
            log::warn!("{}: no reference segments under key {:?}", e.file_id, e.rttm_key);
            Timeline::empty()
        });
        out.push(Utterance::new(e.file_id, e.split, mfcc, ptm, reference)?);
    }
    Ok(out)
}
