//! Frame (2D) and segment (3D) visual features behind a pluggable
//! interface. The stub backend hashes identifiers, never pixels, so the
//! whole pipeline is reproducible bit for bit.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::error::{Error, Result};
use crate::ingest::FrameStack;
use crate::labels::segment_spans;
use crate::rng::keyed_rng;

/// Environment variable naming the feature cache root.
pub const CACHE_DIR_ENV: &str = "QVSUM_CACHE_DIR";

const FEATURE_MAGIC: &[u8; 8] = b"QVSFEAT\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Stub,
    Pretrained2d,
    Pretrained3d,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FeatureExtractorSpec {
    pub kind: ExtractorKind,
    #[serde(default = "default_out_dim")]
    pub out_dim: usize,
    /// Frames per 3D clip; only used by the 3D backend.
    #[serde(default)]
    pub clip_len: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_out_dim() -> usize {
    512
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        Self { kind: ExtractorKind::Stub, out_dim: default_out_dim(), clip_len: None, seed: 0 }
    }
}

impl FeatureExtractorSpec {
    pub fn stub(out_dim: usize, seed: u64) -> Self {
        Self { kind: ExtractorKind::Stub, out_dim, clip_len: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 {
            return Err(Error::Config("extractor out_dim must be positive".into()));
        }
        if self.clip_len == Some(0) {
            return Err(Error::Config("extractor clip_len must be positive".into()));
        }
        Ok(())
    }

    /// Short stable identifier for cache keys.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A source of per-frame and per-segment feature rows.
pub trait FeatureExtractor {
    fn out_dim(&self) -> usize;

    /// One row per frame.
    fn frame_features(&self, video_key: &str, frames: &FrameStack) -> Result<Array2<f64>>;

    /// One row per `2·fps`-frame segment, the last one possibly partial.
    fn segment_features(&self, video_key: &str, frames: &FrameStack, fps: u32) -> Result<Array2<f64>>;
}

/// Deterministic identifier-hash backend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StubExtractor {
    pub out_dim: usize,
    pub seed: u64,
}

impl StubExtractor {
    /// Unit-norm Gaussian direction keyed by `key`.
    pub fn row(&self, key: &str) -> Vec<f64> {
        let mut rng = keyed_rng(self.seed, key);
        let mut v: Vec<f64> = (0..self.out_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    fn rows(&self, keys: impl Iterator<Item = String>) -> Array2<f64> {
        let rows: Vec<Vec<f64>> = keys.map(|k| self.row(&k)).collect();
        let n = rows.len();
        Array2::from_shape_vec((n, self.out_dim), rows.concat()).expect("rows have out_dim entries")
    }
}

impl FeatureExtractor for StubExtractor {
    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn frame_features(&self, video_key: &str, frames: &FrameStack) -> Result<Array2<f64>> {
        let n = frames.shape()[0];
        if n == 0 {
            return Err(Error::EmptyVideo);
        }
        Ok(self.rows((0..n).map(|i| format!("{video_key}/frame/{i}"))))
    }

    fn segment_features(&self, video_key: &str, frames: &FrameStack, fps: u32) -> Result<Array2<f64>> {
        let n = frames.shape()[0];
        if n == 0 {
            return Err(Error::EmptyVideo);
        }
        let spans = segment_spans(n, fps);
        Ok(self.rows(spans.into_iter().map(|s| format!("{video_key}/segment/{}-{}", s.start, s.end))))
    }
}

/// Backend for a spec; pretrained kinds are not bundled.
pub fn extractor_for(spec: &FeatureExtractorSpec) -> Result<Box<dyn FeatureExtractor>> {
    spec.validate()?;
    match spec.kind {
        ExtractorKind::Stub => Ok(Box::new(StubExtractor { out_dim: spec.out_dim, seed: spec.seed })),
        kind => Err(Error::Capability(format!(
            "{kind:?} extractor backend is not available in this build; use kind \"stub\""
        ))),
    }
}

pub fn extract_frame_features(video_key: &str, frames: &FrameStack, spec: &FeatureExtractorSpec) -> Result<Array2<f64>> {
    extractor_for(spec)?.frame_features(video_key, frames)
}

pub fn extract_segment_features(
    video_key: &str,
    frames: &FrameStack,
    fps: u32,
    spec: &FeatureExtractorSpec,
) -> Result<Array2<f64>> {
    extractor_for(spec)?.segment_features(video_key, frames, fps)
}

/// Frame and segment features of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub frames: Array2<f64>,
    pub segments: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    video_id: String,
    fingerprint: String,
    dtype: String,
    shape: [usize; 2],
}

/// On-disk feature store at `<root>/<fingerprint>/<video_id>.{frames,segments}.bin`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureCache {
    pub root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Root from `QVSUM_CACHE_DIR`, else `fallback`.
    pub fn from_env(fallback: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::new(dir),
            _ => Self::new(fallback),
        }
    }

    pub fn path(&self, spec: &FeatureExtractorSpec, video_id: &str, what: &str) -> PathBuf {
        self.root.join(spec.fingerprint()).join(format!("{video_id}.{what}.bin"))
    }

    fn store(&self, path: &Path, spec: &FeatureExtractorSpec, video_id: &str, m: &Array2<f64>) -> Result<()> {
        let header = FeatureHeader {
            video_id: video_id.to_string(),
            fingerprint: spec.fingerprint(),
            dtype: "f64".into(),
            shape: [m.nrows(), m.ncols()],
        };
        let values: Vec<f64> = m.iter().copied().collect();
        container::write(path, FEATURE_MAGIC, &header, &container::f64_bytes(&values))
    }

    fn fetch(&self, path: &Path, spec: &FeatureExtractorSpec, video_id: &str) -> Result<Option<Array2<f64>>> {
        if !path.exists() {
            return Ok(None);
        }
        let (header, payload): (FeatureHeader, _) = container::read(path, FEATURE_MAGIC)?;
        if header.video_id != video_id || header.fingerprint != spec.fingerprint() || header.dtype != "f64" {
            return Ok(None);
        }
        let values = container::bytes_f64(&payload)?;
        Array2::from_shape_vec((header.shape[0], header.shape[1]), values)
            .map(Some)
            .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))
    }

    /// Cached features, computing and storing them on a miss.
    pub fn load_or_extract(
        &self,
        spec: &FeatureExtractorSpec,
        video_id: &str,
        video_key: &str,
        frames: &FrameStack,
        fps: u32,
    ) -> Result<VideoFeatures> {
        let fpath = self.path(spec, video_id, "frames");
        let spath = self.path(spec, video_id, "segments");
        if let (Some(f), Some(s)) = (self.fetch(&fpath, spec, video_id)?, self.fetch(&spath, spec, video_id)?) {
            return Ok(VideoFeatures { frames: f, segments: s });
        }
        let ex = extractor_for(spec)?;
        let f = ex.frame_features(video_key, frames)?;
        let s = ex.segment_features(video_key, frames, fps)?;
        self.store(&fpath, spec, video_id, &f)?;
        self.store(&spath, spec, video_id, &s)?;
        Ok(VideoFeatures { frames: f, segments: s })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::gen_segment_pseudo_labels;
    use ndarray::Array4;

    fn frames(n: usize) -> FrameStack {
        Array4::zeros((n, 3, 2, 2))
    }

    #[test]
    fn stub_rows_are_deterministic_unit_vectors() {
        let spec = FeatureExtractorSpec::stub(16, 7);
        let a = extract_frame_features("v1", &frames(199), &spec).unwrap();
        let b = extract_frame_features("v1", &frames(5), &spec).unwrap();
        assert_eq!(a.dim(), (199, 16));
        assert_eq!(a.row(3), b.row(3));
        for row in a.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let c = extract_frame_features("v2", &frames(5), &spec).unwrap();
        assert_ne!(b, c);
    }

    #[test]
    fn stub_ignores_pixels() {
        let spec = FeatureExtractorSpec::stub(8, 0);
        let a = extract_frame_features("v", &frames(3), &spec).unwrap();
        let b = extract_frame_features("v", &Array4::from_elem((3, 3, 2, 2), 0.7), &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn segment_counts() {
        let spec = FeatureExtractorSpec::stub(8, 0);
        assert_eq!(extract_segment_features("v", &frames(4), 1, &spec).unwrap().nrows(), 2);
        assert_eq!(extract_segment_features("v", &frames(1), 1, &spec).unwrap().nrows(), 1);
        for n in 1..20 {
            let segs = extract_segment_features("v", &frames(n), 1, &spec).unwrap();
            let labels = gen_segment_pseudo_labels(&vec![1; n], 1).unwrap();
            assert_eq!(segs.nrows(), labels.len());
        }
        let again = extract_segment_features("v", &frames(4), 1, &spec).unwrap();
        assert_eq!(again, extract_segment_features("v", &frames(4), 1, &spec).unwrap());
    }

    #[test]
    fn pretrained_kinds_report_capability() {
        let spec = FeatureExtractorSpec { kind: ExtractorKind::Pretrained2d, ..Default::default() };
        assert!(matches!(extract_frame_features("v", &frames(2), &spec), Err(Error::Capability(_))));
    }

    #[test]
    fn cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let spec = FeatureExtractorSpec::stub(4, 1);
        let first = cache.load_or_extract(&spec, "vid", "vid", &frames(5), 1).unwrap();
        assert!(cache.path(&spec, "vid", "frames").exists());
        let second = cache.load_or_extract(&spec, "vid", "vid", &frames(5), 1).unwrap();
        assert_eq!(first, second);
        assert_ne!(spec.fingerprint(), FeatureExtractorSpec::stub(4, 2).fingerprint());
    }
}
