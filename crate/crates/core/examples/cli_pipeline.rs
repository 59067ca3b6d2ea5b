//! The whole command-line pipeline in one process: prepare the synthetic
//! corpus, train a small model, evaluate it and summarize a video.

use qvsum::cli::main_with;
use qvsum::synthetic::{write_corpus, SyntheticSpec};

fn qvsum(args: &[&str]) {
    println!("$ qvsum {}", args.join(" "));
    let code = main_with(std::iter::once("qvsum").chain(args.iter().copied()));
    assert_eq!(code, 0, "qvsum {} failed", args[0]);
}

fn main() -> qvsum::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let corpus = write_corpus(&root.join("corpus"), &SyntheticSpec { held_out: 2, ..SyntheticSpec::default() })?;
    let dataset = std::fs::read_to_string(&corpus.dataset_config).expect("dataset config");
    let run = format!(
        r#"{{"seed": 1, "manifest": "corpus/manifest.jsonl", "dataset": {dataset},
            "model": {{"variant": "queryvs", "fusion_mode": "mul", "epochs": 30, "learning_rate": 0.01}},
            "out_dir": "run"}}"#
    );
    let config = root.join("run.json");
    std::fs::write(&config, run).expect("write config");
    let s = |p: std::path::PathBuf| p.display().to_string();

    qvsum(&["prepare", "--manifest", &s(corpus.manifest.clone()), "--dataset-config", &s(corpus.dataset_config.clone()), "--out", &s(root.join("prepared"))]);
    qvsum(&["train", "--config", &s(config)]);
    let ck = s(root.join("run").join("checkpoint.bin"));
    qvsum(&["eval", "--checkpoint", &ck, "--split", "val"]);
    qvsum(&["summarize", "--checkpoint", &ck, "--video-id", "vid0_q0", "--query", "beach dog", "--k", "5"]);
    Ok(())
}
