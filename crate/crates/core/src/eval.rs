//! Summary selection and evaluation metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DatasetName, ScoreVector, Split};
use crate::labels::RELEVANCE_THRESHOLD;

/// Default budget as a fraction of the unpadded length.
pub const DEFAULT_BUDGET_FRACTION: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct SummarySelection {
    pub video_id: String,
    pub selected_frames: Vec<usize>,
    pub budget: usize,
    pub original_len: usize,
}

/// `ceil(fraction · original_len)`, at least one frame.
pub fn summary_budget(original_len: usize, fraction: f64) -> usize {
    ((fraction * original_len as f64).ceil() as usize).max(1)
}

/// Up to `k` frames with score ≥ 2 among the first `original_len`, ranked
/// by score then earlier index, reported in ascending order.
pub fn generate_summary(video_id: &str, predicted: &[u8], original_len: usize, k: usize) -> Result<SummarySelection> {
    if k == 0 {
        return Err(Error::InvalidArgument("summary budget must be at least 1".into()));
    }
    if original_len > predicted.len() {
        return Err(Error::OutOfRange(format!(
            "original length {original_len} exceeds {} scores",
            predicted.len()
        )));
    }
    let mut ranked: Vec<usize> = (0..original_len).filter(|&i| predicted[i] >= RELEVANCE_THRESHOLD).collect();
    ranked.sort_by(|&a, &b| predicted[b].cmp(&predicted[a]).then(a.cmp(&b)));
    ranked.truncate(k);
    ranked.sort_unstable();
    Ok(SummarySelection { video_id: video_id.to_string(), selected_frames: ranked, budget: k, original_len })
}

/// Fraction of positions with an exact class match.
pub fn frame_accuracy(predicted: &[u8], gold: &[u8]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::LengthMismatch(format!("{} predictions vs {} gold labels", predicted.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::Empty("score vector"));
    }
    let hits = predicted.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// `(1 + β²) p r / (β² p + r)`, zero when the denominator is zero.
pub fn f_beta_pair(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / den
    }
}

/// Mean F_β over `(precision, recall)` pairs.
pub fn f_beta(pairs: &[(f64, f64)], beta: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("precision/recall pairs"));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    for &(p, r) in pairs {
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&r) {
            return Err(Error::OutOfRange(format!("precision {p} / recall {r} outside [0, 1]")));
        }
    }
    Ok(pairs.iter().map(|&(p, r)| f_beta_pair(p, r, beta)).sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Temporal-overlap precision, recall and F1 of two selections.
pub fn temporal_f1(selected: &SummarySelection, gold: &SummarySelection) -> Result<Prf> {
    if selected.video_id != gold.video_id {
        return Err(Error::InvalidArgument(format!("comparing `{}` with `{}`", selected.video_id, gold.video_id)));
    }
    let len = selected.original_len.min(gold.original_len);
    for s in [selected, gold] {
        if let Some(&bad) = s.selected_frames.iter().find(|&&i| i >= len) {
            return Err(Error::OutOfRange(format!("frame {bad} outside length {len} of `{}`", s.video_id)));
        }
    }
    let gold_set: std::collections::BTreeSet<usize> = gold.selected_frames.iter().copied().collect();
    let overlap = selected.selected_frames.iter().filter(|i| gold_set.contains(i)).count() as f64;
    let ratio = |n: usize| if n == 0 { 0.0 } else { overlap / n as f64 };
    let precision = ratio(selected.selected_frames.len());
    let recall = ratio(gold.selected_frames.len());
    Ok(Prf { precision, recall, f1: f_beta_pair(precision, recall, 1.0) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum MultiGold {
    Max,
    Mean,
}

impl MultiGold {
    pub fn for_dataset(name: DatasetName) -> Self {
        match name {
            DatasetName::Summe => MultiGold::Max,
            _ => MultiGold::Mean,
        }
    }
}

/// Scores against several gold selections: the best F1 or the mean of each
/// component.
pub fn temporal_f1_multi(selected: &SummarySelection, golds: &[SummarySelection], agg: MultiGold) -> Result<Prf> {
    if golds.is_empty() {
        return Err(Error::Empty("gold summaries"));
    }
    let scores = golds.iter().map(|g| temporal_f1(selected, g)).collect::<Result<Vec<_>>>()?;
    Ok(match agg {
        MultiGold::Max => scores.into_iter().fold(Prf { precision: 0.0, recall: 0.0, f1: -1.0 }, |best, s| {
            if s.f1 > best.f1 {
                s
            } else {
                best
            }
        }),
        MultiGold::Mean => {
            let n = scores.len() as f64;
            Prf {
                precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
                recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
                f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
            }
        }
    })
}

/// Predictions and references for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    pub video_id: String,
    /// Per-frame predicted classes; may be padded past `original_len`.
    pub predicted: ScoreVector,
    /// Majority-vote gold; may be padded.
    pub gold: ScoreVector,
    /// Per-annotator classes over the unpadded length; empty means the
    /// majority vote is the only reference.
    pub annotator_scores: Vec<ScoreVector>,
    pub original_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct VideoEval {
    pub video_id: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub selected_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvalReport {
    pub dataset: DatasetName,
    pub split: Split,
    pub num_videos: usize,
    /// Mean per-video frame accuracy over unpadded frames.
    pub accuracy: f64,
    pub beta: f64,
    /// Mean F_β over per-video temporal (precision, recall) pairs.
    pub f_beta: f64,
    pub temporal_p: f64,
    pub temporal_r: f64,
    pub temporal_f1: f64,
    pub per_video: Vec<VideoEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_budget_fraction")]
    pub budget_fraction: f64,
    /// Multi-gold rule; the dataset convention when absent.
    #[serde(default)]
    pub multi_gold: Option<MultiGold>,
}

fn default_beta() -> f64 {
    1.0
}

fn default_budget_fraction() -> f64 {
    DEFAULT_BUDGET_FRACTION
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beta: default_beta(), budget_fraction: DEFAULT_BUDGET_FRACTION, multi_gold: None }
    }
}

pub fn evaluate_video(v: &VideoPrediction, cfg: &EvalConfig, agg: MultiGold) -> Result<VideoEval> {
    let n = v.original_len;
    if n == 0 || v.predicted.len() < n || v.gold.len() < n {
        return Err(Error::Video {
            video_id: v.video_id.clone(),
            message: format!("{} predictions / {} gold for {n} frames", v.predicted.len(), v.gold.len()),
        });
    }
    let accuracy = frame_accuracy(&v.predicted[..n], &v.gold[..n])?;
    let k = summary_budget(n, cfg.budget_fraction);
    let selected = generate_summary(&v.video_id, &v.predicted, n, k)?;
    let golds = if v.annotator_scores.len() > 1 {
        v.annotator_scores
            .iter()
            .map(|a| generate_summary(&v.video_id, a, n, k))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![generate_summary(&v.video_id, &v.gold, n, k)?]
    };
    let prf = temporal_f1_multi(&selected, &golds, agg)?;
    Ok(VideoEval {
        video_id: v.video_id.clone(),
        accuracy,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        selected_frames: selected.selected_frames,
    })
}

pub fn evaluate(dataset: DatasetName, split: Split, videos: &[VideoPrediction], cfg: &EvalConfig) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` has no videos")));
    }
    let agg = cfg.multi_gold.unwrap_or_else(|| MultiGold::for_dataset(dataset));
    let per_video = videos.iter().map(|v| evaluate_video(v, cfg, agg)).collect::<Result<Vec<_>>>()?;
    let n = per_video.len() as f64;
    let mean = |f: fn(&VideoEval) -> f64| per_video.iter().map(f).sum::<f64>() / n;
    let pairs: Vec<(f64, f64)> = per_video.iter().map(|v| (v.precision, v.recall)).collect();
    Ok(EvalReport {
        dataset,
        split,
        num_videos: per_video.len(),
        accuracy: mean(|v| v.accuracy),
        beta: cfg.beta,
        f_beta: f_beta(&pairs, cfg.beta)?,
        temporal_p: mean(|v| v.precision),
        temporal_r: mean(|v| v.recall),
        temporal_f1: mean(|v| v.f1),
        per_video,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("video_id,accuracy,precision,recall,f1\n");
        for v in &self.per_video {
            out.push_str(&format!("{},{},{},{},{}\n", v.video_id, v.accuracy, v.precision, v.recall, v.f1));
        }
        out.push_str(&format!(
            "ALL,{},{},{},{}\n",
            self.accuracy, self.temporal_p, self.temporal_r, self.temporal_f1
        ));
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json("eval report", e))?;
        let jp = dir.join(format!("{stem}.json"));
        fs::write(&jp, json + "\n").map_err(|e| Error::io(&jp, e))?;
        let cp = dir.join(format!("{stem}.csv"));
        fs::write(&cp, self.to_csv()).map_err(|e| Error::io(&cp, e))
    }
}

/// JSON schema of [`EvalReport`].
pub fn report_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(EvalReport)).expect("schema serializes")
}

/// `{"video_id": [indices]}`.
pub fn selections_json(selections: &[SummarySelection]) -> serde_json::Value {
    let map: BTreeMap<&str, &Vec<usize>> =
        selections.iter().map(|s| (s.video_id.as_str(), &s.selected_frames)).collect();
    serde_json::to_value(map).expect("selection map serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sel(frames: &[usize], len: usize) -> SummarySelection {
        SummarySelection { video_id: "v".into(), selected_frames: frames.to_vec(), budget: 1, original_len: len }
    }

    #[test]
    fn summary_examples() {
        assert_eq!(generate_summary("v", &[3, 1, 2, 0, 2], 5, 2).unwrap().selected_frames, vec![0, 2]);
        assert!(generate_summary("v", &[1, 0, 1], 3, 2).unwrap().selected_frames.is_empty());
        assert_eq!(generate_summary("v", &[2, 3, 0, 2], 4, 10).unwrap().selected_frames, vec![0, 1, 3]);
        assert_eq!(generate_summary("v", &[2, 3, 3, 3], 2, 10).unwrap().selected_frames, vec![0, 1]);
        assert!(generate_summary("v", &[2], 1, 0).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(frame_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(frame_accuracy(&[1, 1, 1, 2], &[1, 1, 1, 1]).unwrap(), 0.75);
        assert_eq!(frame_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(frame_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn f_beta_examples() {
        assert_eq!(f_beta(&[(1.0, 1.0)], 1.0).unwrap(), 1.0);
        assert!((f_beta(&[(0.5, 1.0)], 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f_beta(&[(1.0, 1.0), (0.0, 0.0)], 1.0).unwrap(), 0.5);
        assert!(f_beta(&[], 1.0).is_err());
        assert!(f_beta(&[(1.2, 0.0)], 1.0).is_err());
    }

    #[test]
    fn temporal_examples() {
        let a: Vec<usize> = (1..=10).collect();
        let b: Vec<usize> = (6..=15).collect();
        let r = temporal_f1(&sel(&a, 20), &sel(&a, 20)).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = temporal_f1(&sel(&a, 20), &sel(&b, 20)).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        let r = temporal_f1(&sel(&[0, 1], 20), &sel(&[2, 3], 20)).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert!(temporal_f1(&sel(&[25], 20), &sel(&[1], 20)).is_err());
    }

    #[test]
    fn multi_gold_rules() {
        let s = sel(&[0, 1], 10);
        let golds = [sel(&[0, 1], 10), sel(&[5, 6], 10)];
        assert_eq!(temporal_f1_multi(&s, &golds, MultiGold::Max).unwrap().f1, 1.0);
        assert_eq!(temporal_f1_multi(&s, &golds, MultiGold::Mean).unwrap().f1, 0.5);
    }

    #[test]
    fn budget_rounds_up() {
        assert_eq!(summary_budget(32, 0.15), 5);
        assert_eq!(summary_budget(1, 0.15), 1);
        assert_eq!(summary_budget(20, 0.15), 3);
    }

    #[test]
    fn gold_as_prediction_is_perfect() {
        let gold = vec![3, 0, 2, 2, 1, 3, 0, 0, 2, 1, 9];
        let v = VideoPrediction {
            video_id: "v".into(),
            predicted: gold.clone(),
            gold: gold.clone(),
            annotator_scores: vec![],
            original_len: 10,
        };
        let r = evaluate(DatasetName::Synthetic, Split::Test, &[v], &EvalConfig::default()).unwrap();
        assert_eq!((r.accuracy, r.temporal_f1, r.f_beta), (1.0, 1.0, 1.0));
        assert!(evaluate(DatasetName::Synthetic, Split::Test, &[], &EvalConfig::default()).is_err());
    }
}
