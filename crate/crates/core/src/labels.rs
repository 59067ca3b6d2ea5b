//! Segment-level pseudo labels and relevance decisions.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames with a class at or above this are relevant.
pub const RELEVANCE_THRESHOLD: u8 = 2;
/// Segment length in seconds.
pub const SEGMENT_SECONDS: usize = 2;
pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabel {
    pub segment_index: usize,
    /// Half-open `[start, end)` frame interval.
    pub span: [usize; 2],
    pub mean: f64,
}

impl SegmentLabel {
    pub fn frames(&self) -> Range<usize> {
        self.span[0]..self.span[1]
    }
}

/// Spans of consecutive `2 * fps`-frame windows covering `0..len`; the last
/// one may be shorter.
pub fn segment_spans(len: usize, fps: u32) -> Vec<Range<usize>> {
    let width = SEGMENT_SECONDS * fps.max(1) as usize;
    (0..len).step_by(width).map(|start| start..(start + width).min(len)).collect()
}

/// Segment index of every frame in `0..len`.
pub fn frame_to_segment(len: usize, fps: u32) -> Vec<usize> {
    let width = SEGMENT_SECONDS * fps.max(1) as usize;
    (0..len).map(|i| i / width).collect()
}

/// Mean frame score of every two-second window.
pub fn gen_segment_pseudo_labels(scores: &[u8], fps: u32) -> Result<Vec<SegmentLabel>> {
    if scores.is_empty() {
        return Err(Error::Empty("score vector"));
    }
    if fps == 0 {
        return Err(Error::InvalidArgument("fps must be positive".into()));
    }
    Ok(segment_spans(scores.len(), fps)
        .into_iter()
        .enumerate()
        .map(|(segment_index, span)| {
            let window = &scores[span.clone()];
            let mean = window.iter().map(|&s| s as f64).sum::<f64>() / window.len() as f64;
            SegmentLabel { segment_index, span: [span.start, span.end], mean }
        })
        .collect())
}

/// Round-half-up of a mean score onto the class scheme.
pub fn segment_to_class(mean_score: f64) -> Result<u8> {
    if !mean_score.is_finite() || !(0.0..=(NUM_CLASSES - 1) as f64).contains(&mean_score) {
        return Err(Error::OutOfRange(format!("segment mean {mean_score} outside [0, 3]")));
    }
    Ok((mean_score + 0.5).floor() as u8)
}

pub fn score_to_relevance(score: u8) -> bool {
    score >= RELEVANCE_THRESHOLD
}

/// `{"video_id": [{"segment_index", "span", "mean"}, ...]}`.
pub type PseudoLabelExport = BTreeMap<String, Vec<SegmentLabel>>;
