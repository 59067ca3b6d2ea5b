//! Synthetic visual and textual interventions with binary labels.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::seq::index::sample;
use rand::Rng as _;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::ingest::{DatasetManifest, FrameStack, Split};
use crate::rng::{keyed_rng, keyed_seed};

const FRAME_MAGIC: &[u8; 8] = b"QVSFRAME";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum VisualKind {
    SaltPepper,
    Blur,
    None,
}

impl VisualKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VisualKind::SaltPepper => "salt_pepper",
            VisualKind::Blur => "blur",
            VisualKind::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InterventionConfig {
    #[serde(default = "default_pair_fraction")]
    pub pair_fraction: f64,
    #[serde(default = "default_frame_fraction")]
    pub frame_fraction: f64,
    #[serde(default = "default_words_dropped")]
    pub words_dropped: usize,
    #[serde(default = "default_density")]
    pub salt_pepper_density: f64,
    #[serde(default = "default_kernel")]
    pub blur_kernel: usize,
}

fn default_pair_fraction() -> f64 {
    0.5
}
fn default_frame_fraction() -> f64 {
    0.3
}
fn default_words_dropped() -> usize {
    2
}
fn default_density() -> f64 {
    0.05
}
fn default_kernel() -> usize {
    5
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            pair_fraction: default_pair_fraction(),
            frame_fraction: default_frame_fraction(),
            words_dropped: default_words_dropped(),
            salt_pepper_density: default_density(),
            blur_kernel: default_kernel(),
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pair_fraction", self.pair_fraction),
            ("frame_fraction", self.frame_fraction),
            ("salt_pepper_density", self.salt_pepper_density),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::Config(format!("blur_kernel must be odd, got {}", self.blur_kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InterventionRecord {
    pub video_id: String,
    pub t: u8,
    pub frame_mask: Vec<bool>,
    pub visual_kind: VisualKind,
    pub perturbed_query: Vec<String>,
    pub rng_seed: u64,
}

impl InterventionRecord {
    pub fn flagged(&self) -> usize {
        self.frame_mask.iter().filter(|&&b| b).count()
    }

    /// Key under which the stub extractor draws perturbed-frame features.
    pub fn perturbed_key(&self) -> String {
        format!("{}#{}", self.video_id, self.visual_kind.as_str())
    }
}

/// `floor(fraction · n)` ids per split, sampled without replacement.
pub fn select_intervention_pairs_with(manifest: &DatasetManifest, seed: u64, fraction: f64) -> Result<BTreeSet<String>> {
    if manifest.entries.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    let mut chosen = BTreeSet::new();
    for split in Split::ALL {
        let ids: Vec<&str> =
            manifest.entries.iter().filter(|e| e.split == split).map(|e| e.video_id.as_str()).collect();
        let k = (fraction * ids.len() as f64).floor() as usize;
        let mut rng = keyed_rng(seed, &format!("select/{split}"));
        for i in sample(&mut rng, ids.len(), k) {
            chosen.insert(ids[i].to_string());
        }
    }
    Ok(chosen)
}

/// Half of each split.
pub fn select_intervention_pairs(manifest: &DatasetManifest, seed: u64) -> Result<BTreeSet<String>> {
    select_intervention_pairs_with(manifest, seed, default_pair_fraction())
}

fn channel_extrema(frame: &Array3<f32>) -> Vec<(f32, f32)> {
    frame
        .axis_iter(Axis(0))
        .map(|ch| ch.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
        .collect()
}

/// Sets a seeded fraction of pixels (all channels) to the channel minimum or
/// maximum with equal probability. Returns the frame and the number of
/// pixels hit.
pub fn apply_salt_pepper_counted(frame: &Array3<f32>, density: f64, seed: u64) -> Result<(Array3<f32>, usize)> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::OutOfRange(format!("salt-and-pepper density {density} not in [0, 1]")));
    }
    let mut out = frame.clone();
    let ext = channel_extrema(frame);
    let (_, h, w) = frame.dim();
    let mut rng = crate::rng::rng(seed);
    let mut hits = 0;
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(density) {
                hits += 1;
                let salt = rng.random_bool(0.5);
                for (c, &(lo, hi)) in ext.iter().enumerate() {
                    out[[c, y, x]] = if salt { hi } else { lo };
                }
            }
        }
    }
    Ok((out, hits))
}

pub fn apply_salt_pepper(frame: &Array3<f32>, density: f64, seed: u64) -> Result<Array3<f32>> {
    apply_salt_pepper_counted(frame, density, seed).map(|(f, _)| f)
}

/// Reflect index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Box filter with reflect padding, applied per channel.
pub fn apply_blur(frame: &Array3<f32>, kernel_size: usize) -> Result<Array3<f32>> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(Error::InvalidArgument(format!("blur kernel must be odd and positive, got {kernel_size}")));
    }
    if kernel_size == 1 {
        return Ok(frame.clone());
    }
    let r = (kernel_size / 2) as isize;
    let (c, h, w) = frame.dim();
    let norm = (kernel_size * kernel_size) as f64;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in -r..=r {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        acc += frame[[ch, yy, reflect(x as isize + dx, w)]] as f64;
                    }
                }
                out[[ch, y, x]] = (acc / norm) as f32;
            }
        }
    }
    Ok(out)
}

/// Removes `k` seeded positions, keeping survivors in order.
pub fn drop_words<S: Clone>(tokens: &[S], k: usize, seed: u64) -> Result<Vec<S>> {
    if k == 0 {
        return Ok(tokens.to_vec());
    }
    if k >= tokens.len() {
        return Err(Error::OutOfRange(format!("cannot drop {k} of {} words", tokens.len())));
    }
    let mut rng = crate::rng::rng(seed);
    let gone: BTreeSet<usize> = sample(&mut rng, tokens.len(), k).into_iter().collect();
    Ok(tokens.iter().enumerate().filter(|(i, _)| !gone.contains(i)).map(|(_, t)| t.clone()).collect())
}

/// Number of frames flagged in a `t = 1` record.
pub fn flagged_count(max_frames: usize, fraction: f64) -> usize {
    ((fraction * max_frames as f64).round() as usize).min(max_frames)
}

/// One record per manifest entry, in manifest order.
pub fn build_intervention_dataset(
    manifest: &DatasetManifest,
    seed: u64,
    cfg: &InterventionConfig,
) -> Result<Vec<InterventionRecord>> {
    cfg.validate()?;
    let selected = select_intervention_pairs_with(manifest, seed, cfg.pair_fraction)?;
    let n = manifest.max_frames;
    manifest
        .entries
        .iter()
        .map(|e| {
            let tokens = e.query_tokens();
            let mut rng = keyed_rng(seed, &e.video_id);
            let untouched = InterventionRecord {
                video_id: e.video_id.clone(),
                t: 0,
                frame_mask: vec![false; n],
                visual_kind: VisualKind::None,
                perturbed_query: tokens.clone(),
                rng_seed: keyed_seed(seed, &e.video_id),
            };
            if !selected.contains(&e.video_id) || !rng.random_bool(0.5) {
                return Ok(untouched);
            }
            let mut frame_mask = vec![false; n];
            for i in sample(&mut rng, n, flagged_count(n, cfg.frame_fraction)) {
                frame_mask[i] = true;
            }
            let visual_kind = if rng.random_bool(0.5) { VisualKind::SaltPepper } else { VisualKind::Blur };
            let k = cfg.words_dropped.min(tokens.len().saturating_sub(1));
            let perturbed_query = drop_words(&tokens, k, rng.random())?;
            Ok(InterventionRecord {
                video_id: e.video_id.clone(),
                t: 1,
                frame_mask,
                visual_kind,
                perturbed_query,
                rng_seed: rng.random(),
            })
        })
        .collect()
}

/// Applies the record's visual disturbance to its flagged frames.
pub fn perturb_frames(record: &InterventionRecord, frames: &FrameStack, cfg: &InterventionConfig) -> Result<FrameStack> {
    let mut out = frames.clone();
    if record.t == 0 {
        return Ok(out);
    }
    for (i, mut slot) in out.axis_iter_mut(Axis(0)).enumerate() {
        if !record.frame_mask.get(i).copied().unwrap_or(false) {
            continue;
        }
        let frame = slot.to_owned();
        let new = match record.visual_kind {
            VisualKind::SaltPepper => {
                apply_salt_pepper(&frame, cfg.salt_pepper_density, keyed_seed(record.rng_seed, &format!("frame{i}")))?
            }
            VisualKind::Blur => apply_blur(&frame, cfg.blur_kernel)?,
            VisualKind::None => frame,
        };
        slot.assign(&new);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[InterventionRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::json(r.video_id.clone(), e))?);
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<InterventionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct FrameHeader {
    video_id: String,
    shape: [usize; 4],
}

pub fn sidecar_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.frames.bin"))
}

/// Stores perturbed frames as little-endian `f32`.
pub fn write_sidecar(dir: &Path, video_id: &str, frames: &FrameStack) -> Result<PathBuf> {
    let path = sidecar_path(dir, video_id);
    let d = frames.dim();
    let header = FrameHeader { video_id: video_id.to_string(), shape: [d.0, d.1, d.2, d.3] };
    let values: Vec<f32> = frames.iter().copied().collect();
    container::write(&path, FRAME_MAGIC, &header, &container::f32_bytes(&values))?;
    Ok(path)
}

pub fn read_sidecar(path: &Path) -> Result<FrameStack> {
    let (h, payload): (FrameHeader, _) = container::read(path, FRAME_MAGIC)?;
    let values = container::bytes_f32(&payload)?;
    FrameStack::from_shape_vec((h.shape[0], h.shape[1], h.shape[2], h.shape[3]), values)
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn salt_pepper_limits() {
        let f = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| (c + y * 3 + x) as f32 * 0.1);
        assert_eq!(apply_salt_pepper(&f, 0.0, 1).unwrap(), f);
        let all = apply_salt_pepper(&f, 1.0, 1).unwrap();
        let ext = channel_extrema(&f);
        for ((c, _, _), v) in all.indexed_iter() {
            assert!(*v == ext[c].0 || *v == ext[c].1);
        }
        assert!(apply_salt_pepper(&f, 1.5, 1).is_err());
        assert_eq!(apply_salt_pepper(&f, 0.3, 9).unwrap(), apply_salt_pepper(&f, 0.3, 9).unwrap());
    }

    #[test]
    fn blur_examples() {
        let f = Array3::from_shape_fn((1, 5, 5), |(_, y, x)| (y * 5 + x) as f32);
        assert_eq!(apply_blur(&f, 1).unwrap(), f);
        assert!(apply_blur(&f, 4).is_err());
        let c = Array3::from_elem((2, 4, 6), 0.25f32);
        assert_eq!(apply_blur(&c, 5).unwrap(), c);
        let mut imp = Array3::zeros((1, 7, 7));
        imp[[0, 3, 3]] = 9.0f32;
        let b = apply_blur(&imp, 3).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                let expect = if (2..=4).contains(&y) && (2..=4).contains(&x) { 1.0 } else { 0.0 };
                assert!((b[[0, y, x]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reflect_padding() {
        assert_eq!((0..7).map(|i| reflect(i - 2, 4)).collect::<Vec<_>>(), vec![2, 1, 0, 1, 2, 3, 2]);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn drop_words_examples() {
        let q: Vec<String> = "a b c d e f g h".split(' ').map(String::from).collect();
        assert_eq!(drop_words(&q, 0, 3).unwrap(), q);
        let d = drop_words(&q, 2, 3).unwrap();
        assert_eq!(d.len(), 6);
        let mut it = q.iter();
        assert!(d.iter().all(|w| it.any(|x| x == w)));
        assert_eq!(drop_words(&q, 7, 3).unwrap().len(), 1);
        assert!(drop_words(&q, 8, 3).is_err());
    }

    #[test]
    fn flagged_count_rounds_to_nearest() {
        assert_eq!(flagged_count(199, 0.3), 60);
        assert_eq!(flagged_count(388, 0.3), 116);
        assert_eq!(flagged_count(1, 0.3), 0);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = Array4::from_shape_fn((2, 3, 2, 2), |(a, b, c, d)| (a + b + c + d) as f32 - 1.5);
        let p = write_sidecar(dir.path(), "v", &frames).unwrap();
        assert_eq!(read_sidecar(&p).unwrap(), frames);
    }
}
