//! Training-ready samples: features, encoded queries, labels and optional
//! interventions for every manifest entry.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::extract::{FeatureCache, VideoFeatures};
use crate::ingest::{load_record, repeat_cyclic, DatasetConfig, DatasetManifest, ManifestEntry, ScoreVector, Split};
use crate::intervene::{perturb_frames, InterventionConfig, InterventionRecord};
use crate::labels::{frame_to_segment, gen_segment_pseudo_labels, segment_spans, segment_to_class, PseudoLabelExport};
use crate::qencode::{bow_encode, build_vocab, Vocab};

/// Perturbed inputs of a `t = 1` record, or the clean inputs with `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervened {
    pub t: u8,
    pub frame_mask: Vec<bool>,
    pub frames: Array2<f64>,
    pub clips: Array2<f64>,
    pub query_ids: Vec<usize>,
}

impl Intervened {
    /// Per-frame flags: the mask for `t = 1`, all zero otherwise.
    pub fn frame_flags(&self) -> Vec<u8> {
        self.frame_mask.iter().map(|&m| u8::from(self.t == 1 && m)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video_id: String,
    pub split: Split,
    pub original_len: usize,
    /// Per-frame 2D features, padded to `max_frames` rows.
    pub frames: Array2<f64>,
    /// Per-frame copy of the enclosing segment's 3D feature, padded.
    pub clips: Array2<f64>,
    /// Per-segment 2D features (mean over the span) and 3D features.
    pub segments_2d: Array2<f64>,
    pub segments_3d: Array2<f64>,
    pub segment_classes: Vec<usize>,
    pub query: String,
    pub query_ids: Vec<usize>,
    pub bow: Array1<f64>,
    /// Majority-vote classes padded to `max_frames`.
    pub gold: ScoreVector,
    pub annotator_scores: Vec<ScoreVector>,
    pub intervention: Option<Intervened>,
}

impl Sample {
    pub fn gold_classes(&self) -> Vec<usize> {
        self.gold.iter().map(|&c| c as usize).collect()
    }
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub config: DatasetConfig,
    pub vocab: Vocab,
    pub samples: Vec<Sample>,
    pub pseudo_labels: PseudoLabelExport,
}

impl PreparedDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn sample(&self, video_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.video_id == video_id)
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        self.samples.first().map_or((0, 0), |s| (s.frames.ncols(), s.clips.ncols()))
    }
}

/// Identifier the stub extractor hashes for an entry: the frame directory
/// name, so entries sharing frames share features.
pub fn video_key(entry: &ManifestEntry) -> String {
    entry
        .frames_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.video_id.clone())
}

/// Vocabulary over train-split queries.
pub fn train_vocab(manifest: &DatasetManifest) -> Result<Vocab> {
    let queries: Vec<&str> =
        manifest.entries.iter().filter(|e| e.split == Split::Train).map(|e| e.query.as_str()).collect();
    if queries.is_empty() {
        return Err(Error::Empty("train split"));
    }
    build_vocab(&queries)
}

fn to_f64(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

fn per_frame_clips(segments: &Array2<f64>, original_len: usize, fps: u32, max_frames: usize) -> Result<Array2<f64>> {
    let seg_of = frame_to_segment(original_len, fps);
    let rows = repeat_cyclic(&seg_of, max_frames)?;
    Ok(to_f64(segments, &rows))
}

fn segment_means(frames: &Array2<f64>, original_len: usize, fps: u32) -> Array2<f64> {
    let spans = segment_spans(original_len, fps);
    let mut out = Array2::zeros((spans.len(), frames.ncols()));
    for (k, span) in spans.into_iter().enumerate() {
        let mean = frames.slice(ndarray::s![span, ..]).mean_axis(Axis(0)).expect("non-empty span");
        out.row_mut(k).assign(&mean);
    }
    out
}

fn encode(vocab: &Vocab, tokens: &[String]) -> Vec<usize> {
    vocab.encode_ids(tokens)
}

/// Loads frames, extracts or reads cached features and assembles samples.
pub fn prepare_dataset(
    manifest: &DatasetManifest,
    cfg: &DatasetConfig,
    cache: &FeatureCache,
    interventions: Option<(&[InterventionRecord], &InterventionConfig)>,
) -> Result<PreparedDataset> {
    let vocab = train_vocab(manifest)?;
    let by_id: BTreeMap<&str, &InterventionRecord> =
        interventions.map(|(r, _)| r.iter().map(|r| (r.video_id.as_str(), r)).collect()).unwrap_or_default();
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut pseudo = PseudoLabelExport::new();
    for entry in &manifest.entries {
        let record = load_record(entry, cfg)?;
        let n = record.original_len;
        let original = record.frames.slice(ndarray::s![..n, .., .., ..]).to_owned();
        let key = video_key(entry);
        let feats = cache.load_or_extract(&cfg.extractor, &key, &key, &original, cfg.fps)?;
        let frame_rows = repeat_cyclic(&(0..n).collect::<Vec<_>>(), cfg.max_frames)?;
        let frames = to_f64(&feats.frames, &frame_rows);
        let clips = per_frame_clips(&feats.segments, n, cfg.fps, cfg.max_frames)?;
        let labels = gen_segment_pseudo_labels(&record.gold_scores[..n], cfg.fps)?;
        let segment_classes = labels.iter().map(|l| segment_to_class(l.mean).map(usize::from)).collect::<Result<_>>()?;
        pseudo.insert(entry.video_id.clone(), labels);
        let query_ids = encode(&vocab, &record.query_tokens);

        let intervention = match (by_id.get(entry.video_id.as_str()), interventions) {
            (Some(r), Some((_, icfg))) => Some(intervened(r, &record.frames, &frames, &clips, &vocab, cfg, cache, icfg)?),
            (None, Some(_)) => {
                return Err(Error::Video {
                    video_id: entry.video_id.clone(),
                    message: "no intervention record".into(),
                })
            }
            _ => None,
        };
        samples.push(Sample {
            video_id: entry.video_id.clone(),
            split: entry.split,
            original_len: n,
            segments_2d: segment_means(&feats.frames, n, cfg.fps),
            segments_3d: feats.segments,
            segment_classes,
            frames,
            clips,
            bow: bow_encode(&entry.query, &vocab),
            query: entry.query.clone(),
            query_ids,
            gold: record.gold_scores,
            annotator_scores: record.annotator_scores,
            intervention,
        });
    }
    Ok(PreparedDataset { config: cfg.clone(), vocab, samples, pseudo_labels: pseudo })
}

#[allow(clippy::too_many_arguments)]
fn intervened(
    r: &InterventionRecord,
    padded_frames: &crate::ingest::FrameStack,
    frames: &Array2<f64>,
    clips: &Array2<f64>,
    vocab: &Vocab,
    cfg: &DatasetConfig,
    cache: &FeatureCache,
    icfg: &InterventionConfig,
) -> Result<Intervened> {
    let query_ids = encode(vocab, &r.perturbed_query);
    if r.t == 0 {
        return Ok(Intervened {
            t: 0,
            frame_mask: r.frame_mask.clone(),
            frames: frames.clone(),
            clips: clips.clone(),
            query_ids,
        });
    }
    if r.frame_mask.len() != frames.nrows() {
        return Err(Error::Video {
            video_id: r.video_id.clone(),
            message: format!("{} mask entries for {} frames", r.frame_mask.len(), frames.nrows()),
        });
    }
    let perturbed = perturb_frames(r, padded_frames, icfg)?;
    let key = r.perturbed_key();
    let VideoFeatures { frames: pf, segments: ps } =
        cache.load_or_extract(&cfg.extractor, &key, &key, &perturbed, cfg.fps)?;
    let pclips = per_frame_clips(&ps, perturbed.len_of(Axis(0)), cfg.fps, frames.nrows())?;
    let mut out_frames = frames.clone();
    let mut out_clips = clips.clone();
    for (i, &m) in r.frame_mask.iter().enumerate() {
        if m {
            out_frames.row_mut(i).assign(&pf.row(i));
            out_clips.row_mut(i).assign(&pclips.row(i));
        }
    }
    Ok(Intervened { t: 1, frame_mask: r.frame_mask.clone(), frames: out_frames, clips: out_clips, query_ids })
}

/// Loads the manifest and config at the given paths.
pub fn load_inputs(manifest: &Path, dataset_config: &Path) -> Result<(DatasetManifest, DatasetConfig)> {
    let cfg = DatasetConfig::load(dataset_config)?;
    let m = DatasetManifest::load(manifest, &cfg)?;
    Ok((m, cfg))
}
