//! RTTM reading and writing. Speaker identity is discarded: every `SPEAKER`
//! record contributes to its file's speech timeline.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::timeline::Timeline;
use crate::error::{Error, Result};

pub fn parse_rttm(text: &str) -> Result<BTreeMap<String, Timeline>> {
    let mut raw: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"SPEAKER") {
            continue;
        }
        if fields.len() < 5 {
            return Err(Error::Parse { line: line_no, msg: "SPEAKER record needs at least 5 fields".into() });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse { line: line_no, msg: format!("bad {what} {s:?}") })
        };
        let start = num(fields[3], "start")?;
        let dur = num(fields[4], "duration")?;
        if dur <= 0.0 {
            return Err(Error::Parse { line: line_no, msg: format!("non-positive duration {dur}") });
        }
        if start < 0.0 {
            return Err(Error::Parse { line: line_no, msg: format!("negative start {start}") });
        }
        raw.entry(fields[1].to_string()).or_default().push((start, start + dur));
    }
    raw.into_iter().map(|(k, v)| Ok((k, Timeline::new(v)?))).collect()
}

/// One `SPEAKER <file> 1 <start> <dur> <NA> <NA> speech <NA> <NA>` line per segment.
pub fn serialize_rttm(timelines: &BTreeMap<String, Timeline>) -> String {
    let mut out = String::new();
    for (file, tl) in timelines {
        for s in tl.segments() {
            writeln!(out, "SPEAKER {file} 1 {} {} <NA> <NA> speech <NA> <NA>", s.start, s.end - s.start)
                .expect("writing to a String");
        }
    }
    out
}
