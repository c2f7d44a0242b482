//! Posterior binarization, FAR/MR/DER scoring and timeline export.
//!
//! FAR and MR are both divided by reference speech duration, so DER is
//! exactly their sum.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::Timeline;
use crate::error::{Error, Result};
use crate::model::FrameScores;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinarizeConfig {
    pub onset: f64,
    pub offset: f64,
    pub min_on_s: f64,
    pub min_off_s: f64,
}

impl Default for BinarizeConfig {
    fn default() -> Self {
        Self { onset: 0.5, offset: 0.5, min_on_s: 0.0, min_off_s: 0.0 }
    }
}

impl BinarizeConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.onset) || !unit(self.offset) || self.offset > self.onset {
            return Err(Error::InvalidConfig(format!(
                "need 0 < offset <= onset < 1, got onset {} offset {}",
                self.onset, self.offset
            )));
        }
        if !(self.min_on_s >= 0.0) || !(self.min_off_s >= 0.0) {
            return Err(Error::InvalidConfig("minimum durations must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Hysteresis thresholding, then gap filling, then short-segment removal.
pub fn binarize(scores: &FrameScores, bc: &BinarizeConfig) -> Timeline {
    let sec = |t: usize| t as f64 * scores.hop_ms / 1000.0;
    let mut segs = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &p) in scores.p.iter().enumerate() {
        match open {
            None if p >= bc.onset => open = Some(t),
            Some(s) if p < bc.offset => {
                segs.push((sec(s), sec(t)));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        segs.push((sec(s), sec(scores.p.len())));
    }
    let tl = Timeline::new(segs).expect("frame intervals are nonempty");
    tl.fill_gaps(bc.min_off_s).remove_short(bc.min_on_s)
}

/// Durations for one file. Rates are percentages of reference speech.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileScore {
    pub file_id: String,
    pub duration_s: f64,
    pub speech_s: f64,
    pub nonspeech_s: f64,
    pub fa_s: f64,
    pub miss_s: f64,
    /// `None` when the file has no reference speech.
    pub far: Option<f64>,
    pub mr: Option<f64>,
    pub der: Option<f64>,
}

/// Scores one file; `ref` and `hyp` are clipped to `[0, file_dur_s)`.
pub fn score_file(file_id: &str, reference: &Timeline, hyp: &Timeline, file_dur_s: f64) -> FileScore {
    let r = reference.clip(0.0, file_dur_s);
    let h = hyp.clip(0.0, file_dur_s);
    let speech_s = r.duration();
    let fa_s = h.difference(&r).duration();
    let miss_s = r.difference(&h).duration();
    let (far, mr, der) = if speech_s > 0.0 {
        let (far, mr) = (100.0 * fa_s / speech_s, 100.0 * miss_s / speech_s);
        (Some(far), Some(mr), Some(far + mr))
    } else {
        (None, None, None)
    };
    FileScore {
        file_id: file_id.to_string(),
        duration_s: file_dur_s,
        speech_s,
        nonspeech_s: (file_dur_s - speech_s).max(0.0),
        fa_s,
        miss_s,
        far,
        mr,
        der,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub der: f64,
    pub far: f64,
    pub mr: f64,
    pub total_speech_s: f64,
    pub total_nonspeech_s: f64,
    pub fa_s: f64,
    pub miss_s: f64,
    pub per_file: Vec<FileScore>,
}

/// Single-file report. Fails with `UndefinedMetric` if `ref` is empty.
pub fn score(reference: &Timeline, hyp: &Timeline, file_dur_s: f64) -> Result<DetectionReport> {
    aggregate(vec![score_file("file", reference, hyp, file_dur_s)])
}

/// Per-file scores summed in input order. Files without reference speech
/// are reported but left out of the totals.
pub fn aggregate(per_file: Vec<FileScore>) -> Result<DetectionReport> {
    let (mut speech, mut nonspeech, mut fa, mut miss) = (0.0, 0.0, 0.0, 0.0);
    for f in &per_file {
        if f.der.is_none() {
            log::warn!("{}: no reference speech, excluded from totals", f.file_id);
            continue;
        }
        speech += f.speech_s;
        nonspeech += f.nonspeech_s;
        fa += f.fa_s;
        miss += f.miss_s;
    }
    if speech == 0.0 {
        return Err(Error::UndefinedMetric("no reference speech in any file".into()));
    }
    let (far, mr) = (100.0 * fa / speech, 100.0 * miss / speech);
    Ok(DetectionReport {
        der: far + mr,
        far,
        mr,
        total_speech_s: speech,
        total_nonspeech_s: nonspeech,
        fa_s: fa,
        miss_s: miss,
        per_file,
    })
}

impl DetectionReport {
    /// Aligned DER/FAR/MR table, percentages to two decimals.
    pub fn to_table(&self) -> String {
        let width = self.per_file.iter().map(|f| f.file_id.len()).chain([7]).max().unwrap_or(7);
        let mut out = String::new();
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", "file", "DER", "FAR", "MR").unwrap();
        for f in &self.per_file {
            writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", f.file_id, pct(f.der), pct(f.far), pct(f.mr)).unwrap();
        }
        writeln!(out, "{:<width$}  {:>8.2}  {:>8.2}  {:>8.2}", "overall", self.der, self.far, self.mr).unwrap();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub name: String,
    pub color: String,
    pub segments: Timeline,
}

/// Lane chart document: SVG plus the JSON sidecar it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct TimelinePlot {
    pub lanes: Vec<Lane>,
    pub duration_s: f64,
    pub svg: String,
}

impl TimelinePlot {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "duration_s": self.duration_s, "lanes": self.lanes })
    }
}

const REFERENCE_COLOR: &str = "#e6b800";
const HYP_COLORS: [&str; 6] = ["#2e9e44", "#d62728", "#8e44ad", "#1f77b4", "#ff7f0e", "#555555"];

/// Reference lane first, then one lane per hypothesis in input order.
pub fn export_timelines(reference: &Timeline, hyps: &[(String, Timeline)], duration_s: f64) -> TimelinePlot {
    let mut lanes = vec![Lane { name: "reference".into(), color: REFERENCE_COLOR.into(), segments: reference.clone() }];
    for (i, (name, tl)) in hyps.iter().enumerate() {
        lanes.push(Lane { name: name.clone(), color: HYP_COLORS[i % HYP_COLORS.len()].into(), segments: tl.clone() });
    }
    let svg = render_svg(&lanes, duration_s);
    TimelinePlot { lanes, duration_s, svg }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn render_svg(lanes: &[Lane], duration_s: f64) -> String {
    let (label_w, plot_w, lane_h, pad) = (140.0, 1000.0, 28.0, 6.0);
    let height = lanes.len() as f64 * lane_h + 30.0;
    let x = |t: f64| label_w + plot_w * (t / duration_s.max(1e-9)).clamp(0.0, 1.0);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        label_w + plot_w + 10.0
    )
    .unwrap();
    for (i, lane) in lanes.iter().enumerate() {
        let y = i as f64 * lane_h;
        writeln!(s, r#"<text x="4" y="{}">{}</text>"#, y + lane_h / 2.0 + 4.0, escape(&lane.name)).unwrap();
        writeln!(
            s,
            r##"<rect x="{label_w}" y="{}" width="{plot_w}" height="{}" fill="#f4f4f4"/>"##,
            y + pad,
            lane_h - 2.0 * pad
        )
        .unwrap();
        for seg in lane.segments.segments() {
            writeln!(
                s,
                r#"<rect x="{:.3}" y="{}" width="{:.3}" height="{}" fill="{}"/>"#,
                x(seg.start),
                y + pad,
                (x(seg.end) - x(seg.start)).max(0.5),
                lane_h - 2.0 * pad,
                lane.color
            )
            .unwrap();
        }
    }
    let axis_y = lanes.len() as f64 * lane_h + 16.0;
    writeln!(s, r#"<text x="{label_w}" y="{axis_y}">0 s</text>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="{axis_y}" text-anchor="end">{duration_s:.2} s</text>"#, label_w + plot_w).unwrap();
    s.push_str("</svg>\n");
    s
}
