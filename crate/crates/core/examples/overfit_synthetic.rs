//! Trains the bag-of-words variant on the synthetic corpus until it
//! memorizes the training frames, then summarizes one video under both of
//! its queries.

use qvsum::dataset::{load_inputs, prepare_dataset};
use qvsum::eval::generate_summary;
use qvsum::extract::FeatureCache;
use qvsum::ingest::Split;
use qvsum::model::{train, Model, ModelConfig, ModelShape, Variant};
use qvsum::synthetic::{write_corpus, SyntheticSpec};

fn main() -> qvsum::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let corpus = write_corpus(dir.path(), &SyntheticSpec::default())?;
    let (manifest, cfg) = load_inputs(&corpus.manifest, &corpus.dataset_config)?;
    let cache = FeatureCache::new(dir.path().join("cache"));
    let data = prepare_dataset(&manifest, &cfg, &cache, None)?;

    let mut mc = ModelConfig::new(Variant::Queryvs);
    mc.epochs = Some(std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200));
    mc.learning_rate = Some(std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(1e-2));
    let (frame_dim, clip_dim) = data.feature_dims();
    let shape = ModelShape { vocab_size: data.vocab.size(), frame_dim, clip_dim };
    let mut model = Model::new(mc, shape)?;
    let start = std::time::Instant::now();
    let out = train(&mut model, &data)?;
    for m in out.history.iter().filter(|m| m.split == Split::Train && m.epoch % 20 == 0) {
        println!("epoch {:>3}  loss {:.4}  accuracy {:.4}", m.epoch, m.loss, m.accuracy);
    }
    println!("trained in {:.1?}", start.elapsed());

    for id in ["vid0_q0", "vid0_q1"] {
        let s = data.sample(id).expect("sample");
        let (_, pred) = model.predict(s)?;
        let sel = generate_summary(id, &pred, s.original_len, 5)?;
        println!("{id} \"{}\": {:?}", s.query, sel.selected_frames);
    }
    Ok(())
}
