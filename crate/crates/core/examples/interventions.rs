//! Builds the intervention corpus for the synthetic manifest and writes
//! salt-and-pepper and blurred versions of one frame as PNGs.

use qvsum::dataset::load_inputs;
use qvsum::ingest::{load_record, Normalization};
use qvsum::intervene::{apply_blur, apply_salt_pepper, build_intervention_dataset, InterventionConfig};
use qvsum::synthetic::{write_corpus, SyntheticSpec};

/// Undoes the loader's channel normalization and writes an RGB PNG.
fn save(frame: &ndarray::Array3<f32>, norm: &Normalization, path: &std::path::Path) {
    let (_, h, w) = frame.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let raw = |c: usize| f64::from(frame[[c, y as usize, x as usize]]) * norm.std[c] + norm.mean[c];
        let px = |c| (raw(c).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).expect("write png");
}

fn main() -> qvsum::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SyntheticSpec { resolution: 64, ..SyntheticSpec::default() };
    let corpus = write_corpus(dir.path(), &spec)?;
    let (manifest, cfg) = load_inputs(&corpus.manifest, &corpus.dataset_config)?;

    let icfg = InterventionConfig::default();
    let records = build_intervention_dataset(&manifest, 0, &icfg)?;
    for r in &records {
        println!("{:<8} t={} kind={:<11} flagged={:>2} query={:?}", r.video_id, r.t, r.visual_kind.as_str(), r.flagged(), r.perturbed_query);
    }

    let rec = load_record(&manifest.entries[0], &cfg)?;
    let frame = rec.frames.index_axis(ndarray::Axis(0), 0).to_owned();
    save(&frame, &cfg.normalization, &out.join("frame_clean.png"));
    save(&apply_salt_pepper(&frame, icfg.salt_pepper_density, 7)?, &cfg.normalization, &out.join("frame_salt_pepper.png"));
    save(&apply_blur(&frame, icfg.blur_kernel)?, &cfg.normalization, &out.join("frame_blur.png"));
    println!("wrote frame_clean.png, frame_salt_pepper.png, frame_blur.png to {}", out.display());
    Ok(())
}
