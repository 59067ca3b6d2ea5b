//! A small synthetic corpus whose labels depend on the query: every frame
//! shows one of four concepts, every query names two of them, and a frame's
//! relevance is 3 for the first named concept, 2 for the second, 1 for the
//! concept opposite the first and 0 otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::extract::FeatureExtractorSpec;
use crate::ingest::{DatasetConfig, DatasetManifest, DatasetName, ManifestEntry, RawScore, Split};
use crate::rng::keyed_rng;

pub const CONCEPTS: [&str; 4] = ["beach", "dog", "city", "food"];

const COLORS: [[u8; 3]; 4] = [[230, 200, 120], [140, 90, 40], [90, 90, 110], [200, 60, 50]];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub videos: usize,
    pub frames: usize,
    pub queries_per_video: usize,
    /// Frames sharing one concept.
    pub run_len: usize,
    pub resolution: u32,
    pub feature_dim: usize,
    /// Trailing videos moved out of train, alternating val and test.
    pub held_out: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { videos: 6, frames: 32, queries_per_video: 2, run_len: 4, resolution: 16, feature_dim: 256, held_out: 0, seed: 0 }
    }
}

/// Paths of a corpus written to disk.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub dataset_config: PathBuf,
}

/// Concept index of every frame of video `v`.
pub fn concepts(spec: &SyntheticSpec, v: usize) -> Vec<usize> {
    let mut rng = keyed_rng(spec.seed, &format!("synthetic/{v}"));
    let mut out = Vec::with_capacity(spec.frames);
    let mut prev = usize::MAX;
    while out.len() < spec.frames {
        let mut c = rng.random_range(0..CONCEPTS.len());
        if c == prev {
            c = (c + 1) % CONCEPTS.len();
        }
        prev = c;
        out.extend(std::iter::repeat_n(c, spec.run_len.max(1)));
    }
    out.truncate(spec.frames);
    out
}

/// The two concepts named by query `j` of video `v`.
pub fn query_concepts(v: usize, j: usize) -> (usize, usize) {
    let a = (v + 2 * j) % CONCEPTS.len();
    (a, (a + 1) % CONCEPTS.len())
}

pub fn query_text(v: usize, j: usize) -> String {
    let (a, b) = query_concepts(v, j);
    format!("{} {}", CONCEPTS[a], CONCEPTS[b])
}

pub fn relevance(concept: usize, query: (usize, usize)) -> u8 {
    let (a, b) = query;
    match concept {
        c if c == a => 3,
        c if c == b => 2,
        c if c == (a + 2) % CONCEPTS.len() => 1,
        _ => 0,
    }
}

fn split_of(spec: &SyntheticSpec, v: usize) -> Split {
    let first_held = spec.videos.saturating_sub(spec.held_out);
    match v.checked_sub(first_held) {
        None => Split::Train,
        Some(i) if i % 2 == 0 => Split::Val,
        Some(_) => Split::Test,
    }
}

pub fn video_dir_name(v: usize) -> String {
    format!("vid{v}")
}

pub fn entry_id(v: usize, j: usize) -> String {
    format!("vid{v}_q{j}")
}

pub fn dataset_config(spec: &SyntheticSpec) -> DatasetConfig {
    let mut cfg = DatasetConfig::new(DatasetName::Synthetic, spec.frames);
    cfg.resolution = [spec.resolution, spec.resolution];
    cfg.extractor = FeatureExtractorSpec::stub(spec.feature_dim, spec.seed);
    cfg
}

/// Manifest entries with `frames_dir` relative to the corpus root.
pub fn manifest_entries(spec: &SyntheticSpec) -> Vec<ManifestEntry> {
    let mut entries = Vec::with_capacity(spec.videos * spec.queries_per_video);
    for v in 0..spec.videos {
        let cs = concepts(spec, v);
        for j in 0..spec.queries_per_video {
            let q = query_concepts(v, j);
            let scores = cs.iter().map(|&c| RawScore(f64::from(relevance(c, q)))).collect();
            entries.push(ManifestEntry {
                video_id: entry_id(v, j),
                frames_dir: Path::new("frames").join(video_dir_name(v)),
                query: query_text(v, j),
                annotations: vec![scores],
                split: split_of(spec, v),
            });
        }
    }
    entries
}

fn write_frames(dir: &Path, spec: &SyntheticSpec, cs: &[usize]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, &c) in cs.iter().enumerate() {
        let path = dir.join(format!("frame_{i:05}.png"));
        let mut img = RgbImage::from_pixel(spec.resolution, spec.resolution, Rgb(COLORS[c]));
        // A moving bar keeps consecutive frames distinct.
        let x = (i as u32) % spec.resolution;
        for y in 0..spec.resolution {
            img.put_pixel(x, y, Rgb([255, 255, 255]));
        }
        img.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
    }
    Ok(())
}

/// Writes frames, `manifest.jsonl` and `dataset.json` under `root`.
pub fn write_corpus(root: &Path, spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.videos == 0 || spec.frames == 0 || spec.queries_per_video == 0 || spec.resolution == 0 {
        return Err(Error::InvalidArgument("synthetic corpus sizes must be positive".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for v in 0..spec.videos {
        write_frames(&root.join("frames").join(video_dir_name(v)), spec, &concepts(spec, v))?;
    }
    let cfg = dataset_config(spec);
    let manifest = DatasetManifest { dataset_name: cfg.dataset_name, max_frames: cfg.max_frames, entries: manifest_entries(spec) };
    let manifest_path = root.join("manifest.jsonl");
    fs::write(&manifest_path, manifest.to_jsonl()).map_err(|e| Error::io(&manifest_path, e))?;
    let cfg_path = root.join("dataset.json");
    let text = serde_json::to_string_pretty(&cfg).map_err(|e| Error::json("dataset config", e))?;
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(SyntheticCorpus { root: root.to_path_buf(), manifest: manifest_path, dataset_config: cfg_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queries_of_one_video_disagree_on_labels() {
        let spec = SyntheticSpec::default();
        let entries = manifest_entries(&spec);
        assert_eq!(entries.len(), 12);
        assert_ne!(entries[0].annotations, entries[1].annotations);
        assert_eq!(entries[0].frames_dir, entries[1].frames_dir);
    }

    #[test]
    fn relevance_covers_all_classes() {
        let q = query_concepts(1, 0);
        let mut got: Vec<u8> = (0..4).map(|c| relevance(c, q)).collect();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn corpus_round_trips_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { videos: 3, frames: 8, held_out: 2, ..SyntheticSpec::default() };
        let c = write_corpus(dir.path(), &spec).unwrap();
        let (m, cfg) = crate::dataset::load_inputs(&c.manifest, &c.dataset_config).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(m.split_sizes(), [2, 2, 2]);
        let rec = crate::ingest::load_record(&m.entries[0], &cfg).unwrap();
        assert_eq!(rec.original_len, 8);
    }
}
