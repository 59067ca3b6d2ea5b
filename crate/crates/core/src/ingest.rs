//! Dataset manifests, frame preprocessing and gold-label aggregation.
//!
//! A manifest is JSON-lines, one `(video, query)` entry per line:
//!
//! ```text
//! {"video_id":"v1","frames_dir":"frames/v1","query":"red car","annotations":[[2,3,1],[2,2,0]],"split":"train"}
//! ```
//!
//! Frames are pre-extracted PNG files named `frame_%05d.png`. Videos are
//! padded to the dataset-wide `max_frames` by cyclic repetition from the
//! first frame, and every channel is standardized with fixed constants.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array3, Array4, Axis};
use schemars::JsonSchema;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::extract::FeatureExtractorSpec;
use crate::qencode::tokenize;

/// Per-channel RGB mean used for every dataset.
pub const CHANNEL_MEAN: [f64; 3] = [0.4280, 0.4106, 0.3589];
/// Per-channel RGB standard deviation used for every dataset.
pub const CHANNEL_STD: [f64; 3] = [0.2737, 0.2631, 0.2601];

/// Padded frame counts of the named benchmarks.
pub const QUERYVS_MAX_FRAMES: usize = 199;
pub const SUMME_MAX_FRAMES: usize = 388;
pub const TVSUM_MAX_FRAMES: usize = 647;
/// Longest query (in words) in QueryVS.
pub const QUERYVS_MAX_QUERY_WORDS: usize = 8;

/// Per-frame integer class in `0..=3`.
pub type ScoreVector = Vec<u8>;
/// `(frames, channels, height, width)`.
pub type FrameStack = Array4<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
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
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Queryvs,
    Tvsum,
    Summe,
    Synthetic,
}

impl DatasetName {
    /// Required padded length, `None` when free.
    pub fn required_max_frames(self) -> Option<usize> {
        match self {
            DatasetName::Queryvs => Some(QUERYVS_MAX_FRAMES),
            DatasetName::Summe => Some(SUMME_MAX_FRAMES),
            DatasetName::Tvsum => Some(TVSUM_MAX_FRAMES),
            DatasetName::Synthetic => None,
        }
    }

    pub fn label_scheme(self) -> LabelScheme {
        match self {
            DatasetName::Queryvs | DatasetName::Synthetic => LabelScheme::Relevance,
            DatasetName::Tvsum => LabelScheme::TvsumImportance,
            DatasetName::Summe => LabelScheme::SummeImportance,
        }
    }

    /// `(train, val, test)` video counts used for the full benchmarks.
    pub fn benchmark_split_counts(self) -> Option<[usize; 3]> {
        match self {
            DatasetName::Queryvs => Some([114, 38, 38]),
            DatasetName::Tvsum => Some([40, 5, 5]),
            DatasetName::Summe => Some([19, 3, 3]),
            DatasetName::Synthetic => None,
        }
    }
}

/// How raw annotation values map onto the four classification targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelScheme {
    /// Integer relevance already in `0..=3`.
    Relevance,
    /// Importance in `1..=5`, rebinned by `round((s - 1) * 3 / 4)`.
    TvsumImportance,
    /// Importance in `[0, 1]`, rebinned by `round(3 s)`.
    SummeImportance,
}

impl LabelScheme {
    pub fn to_class(self, raw: f64) -> Result<u8> {
        let bad = || Error::OutOfRange(format!("annotation {raw} is invalid for {self:?}"));
        if !raw.is_finite() {
            return Err(bad());
        }
        let class = match self {
            LabelScheme::Relevance => {
                if raw.fract() != 0.0 || !(0.0..=3.0).contains(&raw) {
                    return Err(bad());
                }
                raw
            }
            LabelScheme::TvsumImportance => {
                if !(1.0..=5.0).contains(&raw) {
                    return Err(bad());
                }
                ((raw - 1.0) * 3.0 / 4.0).round()
            }
            LabelScheme::SummeImportance => {
                if !(0.0..=1.0).contains(&raw) {
                    return Err(bad());
                }
                (3.0 * raw).round()
            }
        };
        Ok(class as u8)
    }
}

/// The four crowd-sourced relevance answers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationLabel {
    VeryGood,
    Good,
    NotGood,
    Bad,
}

impl FromStr for AnnotationLabel {
    type Err = Error;

    /// Accepts `"Very Good"`, `"VeryGood"`, `"very_good"` and similar.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "verygood" => Ok(AnnotationLabel::VeryGood),
            "good" => Ok(AnnotationLabel::Good),
            "notgood" => Ok(AnnotationLabel::NotGood),
            "bad" => Ok(AnnotationLabel::Bad),
            _ => Err(Error::Parse(format!("unknown annotation label `{s}`"))),
        }
    }
}

pub fn map_annotation(label: AnnotationLabel) -> u8 {
    match label {
        AnnotationLabel::VeryGood => 3,
        AnnotationLabel::Good => 2,
        AnnotationLabel::NotGood => 1,
        AnnotationLabel::Bad => 0,
    }
}

/// Per-frame modal score across annotators; ties go to the higher score.
pub fn aggregate_majority(annotations: &[ScoreVector]) -> Result<ScoreVector> {
    let first = annotations.first().ok_or(Error::Empty("annotator list"))?;
    let len = first.len();
    if let Some(bad) = annotations.iter().find(|a| a.len() != len) {
        return Err(Error::LengthMismatch(format!(
            "annotator vectors of length {len} and {}",
            bad.len()
        )));
    }
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let mut counts = [0usize; 4];
        for a in annotations {
            let score = a[i];
            if score > 3 {
                return Err(Error::OutOfRange(format!("score {score} at frame {i}")));
            }
            counts[score as usize] += 1;
        }
        let best = (0..4u8).max_by_key(|&c| (counts[c as usize], c)).expect("four classes");
        out.push(best);
    }
    Ok(out)
}

/// Cyclic extension: `out[i] = items[i mod n]`.
pub fn repeat_cyclic<T: Clone>(items: &[T], target: usize) -> Result<Vec<T>> {
    let n = items.len();
    if n == 0 {
        return Err(Error::EmptyVideo);
    }
    if n > target {
        return Err(Error::OverLength { len: n, target });
    }
    Ok((0..target).map(|i| items[i % n].clone()).collect())
}

/// Pads a frame stack to `target` frames by repeating from the first frame.
pub fn repeat_frames(frames: &FrameStack, target: usize) -> Result<FrameStack> {
    let n = frames.len_of(Axis(0));
    let idx = repeat_cyclic(&(0..n).collect::<Vec<_>>(), target)?;
    Ok(frames.select(Axis(0), &idx))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: CHANNEL_MEAN, std: CHANNEL_STD }
    }
}

/// `(value - mean[c]) / std[c]` for a `(3, H, W)` frame with values in `[0, 1]`.
pub fn normalize_frame(frame: &Array3<f32>, norm: &Normalization) -> Result<Array3<f32>> {
    if frame.len_of(Axis(0)) != 3 {
        return Err(Error::Shape(format!(
            "expected 3 channels, got {}",
            frame.len_of(Axis(0))
        )));
    }
    let mut out = frame.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, sd) = (norm.mean[c], norm.std[c]);
        plane.mapv_inplace(|v| ((v as f64 - m) / sd) as f32);
    }
    Ok(out)
}

/// Annotation value that serializes integers without a fractional part so
/// manifests re-serialize byte-identically.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawScore(pub f64);

impl Serialize for RawScore {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.fract() == 0.0 && self.0.abs() < 9.0e15 {
            s.serialize_i64(self.0 as i64)
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for RawScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(RawScore)
    }
}

/// One manifest line. Field order is the canonical serialization order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    pub frames_dir: PathBuf,
    pub query: String,
    pub annotations: Vec<Vec<RawScore>>,
    pub split: Split,
}

impl ManifestEntry {
    pub fn query_tokens(&self) -> Vec<String> {
        tokenize(&self.query)
    }

    /// Annotation vectors mapped to classes, one per annotator.
    pub fn annotator_scores(&self, scheme: LabelScheme) -> Result<Vec<ScoreVector>> {
        self.annotations
            .iter()
            .map(|a| a.iter().map(|r| scheme.to_class(r.0)).collect())
            .collect()
    }

    pub fn annotated_len(&self) -> usize {
        self.annotations.first().map_or(0, Vec::len)
    }
}

/// Dataset-level configuration stored next to a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub dataset_name: DatasetName,
    pub max_frames: usize,
    /// `[height, width]` of the frames fed to an extractor.
    #[serde(default = "default_resolution")]
    pub resolution: [u32; 2],
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_fps")]
    pub fps: u32,
    #[serde(default)]
    pub extractor: FeatureExtractorSpec,
    /// `(train, val, test)` fractions to validate the manifest against.
    #[serde(default)]
    pub split_ratios: Option<[f64; 3]>,
}

fn default_resolution() -> [u32; 2] {
    [224, 224]
}

fn default_fps() -> u32 {
    1
}

/// Resolution used by the original BoW-fusion experiments.
pub const LEGACY_RESOLUTION: [u32; 2] = [128, 128];

impl DatasetConfig {
    pub fn new(dataset_name: DatasetName, max_frames: usize) -> Self {
        Self {
            dataset_name,
            max_frames,
            resolution: default_resolution(),
            normalization: Normalization::default(),
            fps: 1,
            extractor: FeatureExtractorSpec::default(),
            split_ratios: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        if let Some(required) = self.dataset_name.required_max_frames() {
            if self.max_frames != required {
                return Err(Error::Config(format!(
                    "{:?} uses max_frames = {required}, got {}",
                    self.dataset_name, self.max_frames
                )));
            }
        }
        if self.fps == 0 {
            return Err(Error::Config("fps must be positive".into()));
        }
        if self.resolution.iter().any(|&r| r == 0) {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        if let Some(r) = self.split_ratios {
            if r.iter().any(|&x| x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("split_ratios must be non-negative and sum to 1".into()));
            }
        }
        self.extractor.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Expected `(train, val, test)` counts for `n` videos: floor of each share,
/// remainder handed to train.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let val = (n as f64 * ratios[1]).floor() as usize;
    let test = (n as f64 * ratios[2]).floor() as usize;
    [n - val - test, val, test]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub dataset_name: DatasetName,
    pub max_frames: usize,
    pub entries: Vec<ManifestEntry>,
}

fn valid_video_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl DatasetManifest {
    /// Parses and validates JSON-lines text. `origin` names the source in
    /// error messages; relative `frames_dir` paths resolve against `base`.
    pub fn parse(text: &str, origin: &str, base: Option<&Path>, cfg: &DatasetConfig) -> Result<Self> {
        let scheme = cfg.dataset_name.label_scheme();
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Manifest { path: origin.to_string(), line: lineno, message };
            let mut entry: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let id = entry.video_id.clone();
            if !valid_video_id(&id) {
                return Err(err(format!("video_id `{id}` must be non-empty [A-Za-z0-9_.-]")));
            }
            if entries.iter().any(|e| e.video_id == id) {
                return Err(err(format!("duplicate video_id `{id}`")));
            }
            if entry.annotations.is_empty() {
                return Err(err(format!("video `{id}`: no annotations")));
            }
            let len = entry.annotated_len();
            if entry.annotations.iter().any(|a| a.len() != len) {
                return Err(err(format!("video `{id}`: annotator vectors have different lengths")));
            }
            if len == 0 {
                return Err(err(format!("video `{id}`: empty annotation vectors")));
            }
            if len > cfg.max_frames {
                return Err(err(format!("video `{id}`: {len} frames exceed max_frames {}", cfg.max_frames)));
            }
            entry.annotator_scores(scheme).map_err(|e| err(format!("video `{id}`: {e}")))?;
            if cfg.dataset_name == DatasetName::Queryvs && entry.query_tokens().len() > QUERYVS_MAX_QUERY_WORDS {
                return Err(err(format!("video `{id}`: query longer than {QUERYVS_MAX_QUERY_WORDS} words")));
            }
            if let (Some(base), true) = (base, entry.frames_dir.is_relative()) {
                entry.frames_dir = base.join(&entry.frames_dir);
            }
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(Error::Manifest { path: origin.to_string(), line: 0, message: "manifest has no entries".into() });
        }
        let manifest = Self { dataset_name: cfg.dataset_name, max_frames: cfg.max_frames, entries };
        if let Some(ratios) = cfg.split_ratios {
            let expected = split_counts(manifest.entries.len(), ratios);
            let found = manifest.split_sizes();
            if expected != found {
                return Err(Error::Config(format!("split sizes {found:?} do not match ratios (expected {expected:?})")));
            }
        }
        Ok(manifest)
    }

    pub fn load(path: &Path, cfg: &DatasetConfig) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), path.parent(), cfg)
    }

    /// Canonical JSON-lines text (one entry per line, trailing newline).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for e in &self.entries {
            sizes[e.split as usize] += 1;
        }
        sizes
    }

    pub fn entry(&self, video_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.video_id == video_id)
    }
}

/// Indices of `frame_%05d.png` files in `dir`, sorted and contiguous.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: Vec<(u32, PathBuf)> = Vec::new();
    for ent in rd {
        let ent = ent.map_err(|e| Error::io(dir, e))?;
        let name = ent.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(digits) = name.strip_prefix("frame_").and_then(|r| r.strip_suffix(".png")) else {
            continue;
        };
        if digits.len() == 5 && digits.bytes().all(|b| b.is_ascii_digit()) {
            found.push((digits.parse().expect("five digits"), ent.path()));
        }
    }
    found.sort();
    for w in found.windows(2) {
        if w[1].0 != w[0].0 + 1 {
            return Err(Error::Shape(format!("{}: frame numbering gap after {}", dir.display(), w[0].0)));
        }
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Loads, resizes and normalizes every frame in `dir`.
pub fn load_frames(dir: &Path, cfg: &DatasetConfig) -> Result<FrameStack> {
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyVideo);
    }
    let [h, w] = cfg.resolution;
    let mut stack = Array4::<f32>::zeros((files.len(), 3, h as usize, w as usize));
    for (i, path) in files.iter().enumerate() {
        let img = image::open(path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
        let mut rgb = img.to_rgb8();
        if rgb.dimensions() != (w, h) {
            rgb = image::imageops::resize(&rgb, w, h, image::imageops::FilterType::Triangle);
        }
        let raw = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        stack.slice_mut(s![i, .., .., ..]).assign(&normalize_frame(&raw, &cfg.normalization)?);
    }
    Ok(stack)
}

/// A training-ready video: padded frames plus aggregated gold scores.
#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub video_id: String,
    pub frames: FrameStack,
    pub original_len: usize,
    pub query_tokens: Vec<String>,
    /// Majority-vote scores, padded to `max_frames` like the frames.
    pub gold_scores: ScoreVector,
    /// Per-annotator classes over the original (unpadded) frames.
    pub annotator_scores: Vec<ScoreVector>,
    pub split: Split,
}

/// Builds a record from an entry whose frames are already loaded.
pub fn build_record(entry: &ManifestEntry, frames: FrameStack, cfg: &DatasetConfig) -> Result<VideoRecord> {
    let video_err = |message: String| Error::Video { video_id: entry.video_id.clone(), message };
    let original_len = frames.len_of(Axis(0));
    if original_len != entry.annotated_len() {
        return Err(video_err(format!(
            "{original_len} frames on disk but {} annotated",
            entry.annotated_len()
        )));
    }
    let annotator_scores = entry.annotator_scores(cfg.dataset_name.label_scheme())?;
    let gold = aggregate_majority(&annotator_scores)?;
    Ok(VideoRecord {
        video_id: entry.video_id.clone(),
        frames: repeat_frames(&frames, cfg.max_frames)?,
        original_len,
        query_tokens: entry.query_tokens(),
        gold_scores: repeat_cyclic(&gold, cfg.max_frames)?,
        annotator_scores,
        split: entry.split,
    })
}

pub fn load_record(entry: &ManifestEntry, cfg: &DatasetConfig) -> Result<VideoRecord> {
    let frames = load_frames(&entry.frames_dir, cfg)
        .map_err(|e| Error::Video { video_id: entry.video_id.clone(), message: e.to_string() })?;
    build_record(entry, frames, cfg)
}
