//! Sorted, disjoint half-open speech intervals and their set algebra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Canonical form: every segment has `start < end`, segments are sorted and
/// pairwise separated by a positive gap.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timeline {
    segments: Vec<Segment>,
}

impl Timeline {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sorts and merges overlapping or touching intervals.
    pub fn new(intervals: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut segs = Vec::new();
        for (start, end) in intervals {
            if !start.is_finite() || !end.is_finite() || start >= end {
                return Err(Error::InvalidInput(format!("bad segment [{start}, {end})")));
            }
            segs.push(Segment { start, end });
        }
        Ok(Self::normalize(segs))
    }

    fn normalize(mut segs: Vec<Segment>) -> Self {
        segs.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        let mut out: Vec<Segment> = Vec::with_capacity(segs.len());
        for s in segs {
            match out.last_mut() {
                Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
                _ => out.push(s),
            }
        }
        Self { segments: out }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(Segment::duration).sum()
    }

    pub fn contains(&self, t: f64) -> bool {
        let i = self.segments.partition_point(|s| s.end <= t);
        self.segments.get(i).is_some_and(|s| s.start <= t)
    }

    pub fn union(&self, other: &Timeline) -> Timeline {
        Self::normalize(self.segments.iter().chain(&other.segments).copied().collect())
    }

    pub fn intersection(&self, other: &Timeline) -> Timeline {
        let (a, b) = (&self.segments, &other.segments);
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < a.len() && j < b.len() {
            let start = a[i].start.max(b[j].start);
            let end = a[i].end.min(b[j].end);
            if start < end {
                out.push(Segment { start, end });
            }
            if a[i].end < b[j].end {
                i += 1;
            } else {
                j += 1;
            }
        }
        Timeline { segments: out }
    }

    /// `self \ other`
    pub fn difference(&self, other: &Timeline) -> Timeline {
        let b = &other.segments;
        let mut out = Vec::new();
        let mut j = 0;
        for s in &self.segments {
            let mut cur = s.start;
            while j < b.len() && b[j].end <= cur {
                j += 1;
            }
            let mut k = j;
            while k < b.len() && b[k].start < s.end {
                if b[k].start > cur {
                    out.push(Segment { start: cur, end: b[k].start });
                }
                cur = cur.max(b[k].end);
                k += 1;
            }
            if cur < s.end {
                out.push(Segment { start: cur, end: s.end });
            }
        }
        Timeline { segments: out }
    }

    /// Restricts to `[lo, hi)`.
    pub fn clip(&self, lo: f64, hi: f64) -> Timeline {
        if lo >= hi {
            return Timeline::empty();
        }
        self.intersection(&Timeline { segments: vec![Segment { start: lo, end: hi }] })
    }

    /// Drops segments shorter than `min_s`.
    pub fn remove_short(&self, min_s: f64) -> Timeline {
        Timeline { segments: self.segments.iter().filter(|s| s.duration() >= min_s).copied().collect() }
    }

    /// Merges neighbours separated by gaps shorter than `min_gap_s`.
    pub fn fill_gaps(&self, min_gap_s: f64) -> Timeline {
        let mut out: Vec<Segment> = Vec::with_capacity(self.segments.len());
        for &s in &self.segments {
            match out.last_mut() {
                Some(last) if s.start - last.end < min_gap_s => last.end = s.end,
                _ => out.push(s),
            }
        }
        Timeline { segments: out }
    }
}

/// Frame `t` is 1 iff its centre `(t + 0.5)·hop` lies inside a segment.
pub fn labels_from_timeline(tl: &Timeline, frames: usize, hop_ms: f64) -> Vec<u8> {
    let mut labels = vec![0u8; frames];
    let mut k = 0;
    let segs = tl.segments();
    for (t, l) in labels.iter_mut().enumerate() {
        let c = (t as f64 + 0.5) * hop_ms / 1000.0;
        while k < segs.len() && segs[k].end <= c {
            k += 1;
        }
        if k < segs.len() && segs[k].start <= c {
            *l = 1;
        }
    }
    labels
}
