//! `.fvad` feature files.
//!
//! Layout, all little-endian: `"FVAD"`, version `u32` (1), hop_ms `f32`,
//! T `u32`, D `u32`, tag length `u32`, tag bytes (UTF-8), then T·D `f32`
//! values row-major.

use std::fs;
use std::path::Path;

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FVAD";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let tag = m.source_tag().as_bytes();
    let mut out = Vec::with_capacity(24 + tag.len() + 4 * m.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.hop_ms() as f32).to_le_bytes());
    out.extend_from_slice(&(m.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    out.extend_from_slice(tag);
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated while reading {what}"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<FeatureMatrix, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != FEATURE_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let hop = r.f32("hop_ms")?;
    if !(hop > 0.0 && hop.is_finite()) {
        return Err(format!("hop_ms must be positive, got {hop}"));
    }
    let frames = r.u32("T")? as usize;
    let dim = r.u32("D")? as usize;
    let tag_len = r.u32("tag length")? as usize;
    let tag = std::str::from_utf8(r.take(tag_len, "tag")?).map_err(|_| "tag is not UTF-8".to_string())?.to_string();
    let n = frames.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or("T·D overflows")?;
    let payload = r.take(n, "payload")?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    FeatureMatrix::new(frames, dim, data, hop as f64, tag).map_err(|e| e.to_string())
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    decode_inner(bytes).map_err(|msg| Error::InvalidInput(format!("feature file: {msg}")))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
    decode_inner(&bytes).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    fs::write(path, encode_features(m))?;
    Ok(())
}

/// Maximum frame-count difference tolerated between two streams.
pub const MAX_FRAME_SKEW: usize = 2;

/// Brings two streams onto one grid, truncating the longer by at most
/// [`MAX_FRAME_SKEW`] frames.
pub fn align_streams(a: FeatureMatrix, b: FeatureMatrix) -> Result<(FeatureMatrix, FeatureMatrix)> {
    if a.hop_ms() != b.hop_ms() {
        return Err(Error::FrameGridMismatch(format!("hop {} ms vs {} ms", a.hop_ms(), b.hop_ms())));
    }
    let t = a.frames().min(b.frames());
    let skew = a.frames().max(b.frames()) - t;
    if skew > MAX_FRAME_SKEW {
        return Err(Error::FrameGridMismatch(format!(
            "streams differ by {skew} frames ({} has {}, {} has {})",
            a.source_tag(),
            a.frames(),
            b.source_tag(),
            b.frames()
        )));
    }
    let cut = |m: FeatureMatrix| if m.frames() > t { m.slice_frames(0, t) } else { Ok(m) };
    Ok((cut(a)?, cut(b)?))
}
