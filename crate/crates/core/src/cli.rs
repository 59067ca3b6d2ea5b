//! The `qvsum` command-line tool. Anything that affects results lives in a
//! JSON run configuration; flags only pick paths and commands.
//!
//! Exit status: 0 on success, 2 for input or validation errors, 3 for
//! numeric failures during training.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_inputs, prepare_dataset, video_key, PreparedDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, generate_summary, selections_json, summary_budget, EvalConfig, VideoPrediction};
use crate::extract::FeatureCache;
use crate::ingest::{DatasetConfig, DatasetManifest, Split};
use crate::intervene::{build_intervention_dataset, perturb_frames, write_records, write_sidecar, InterventionConfig};
use crate::model::{
    load_checkpoint, predict_sample, save_checkpoint, train, Checkpoint, Inputs, Model, ModelConfig, ModelShape,
    RngState, Variant,
};
use crate::qencode::{bow_encode, tokenize};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PREPARE_REPORT_FILE: &str = "prepare_report.json";
pub const INTERVENTIONS_FILE: &str = "interventions.jsonl";

/// Everything a training or evaluation run depends on. Relative paths
/// resolve against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// The only source of randomness for interventions, initialization,
    /// shuffling and latent sampling.
    pub seed: u64,
    pub manifest: PathBuf,
    pub dataset: DatasetConfig,
    /// Model settings. Its `seed` is filled from the top-level seed and
    /// must not be set here.
    pub model: ModelConfig,
    #[serde(default)]
    pub intervention: InterventionConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Run directory for the snapshot, metrics and checkpoint.
    pub out_dir: PathBuf,
    /// Feature cache root when `QVSUM_CACHE_DIR` is unset; defaults to
    /// `<out_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses, rejects unknown keys, resolves paths and validates.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        if raw.pointer("/model/seed").is_some() {
            return Err(Error::Config(format!("{origin}: `model.seed` is not allowed; set the top-level `seed`")));
        }
        let mut cfg: RunConfig = serde_json::from_value(raw).map_err(|e| Error::json(origin, e))?;
        cfg.model.seed = cfg.seed;
        for p in [&mut cfg.manifest, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(c) = cfg.cache_dir.as_mut().filter(|c| c.is_relative()) {
            *c = base.join(&*c);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.intervention.validate()?;
        if self.model.seed != self.seed {
            return Err(Error::Config("model seed differs from the run seed".into()));
        }
        if !(self.eval.beta > 0.0 && self.eval.budget_fraction > 0.0 && self.eval.budget_fraction <= 1.0) {
            return Err(Error::Config("eval needs beta > 0 and budget_fraction in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn cache(&self) -> FeatureCache {
        FeatureCache::from_env(self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache")))
    }

    /// Manifest plus prepared samples; conditional runs also get their
    /// intervention corpus, rebuilt from the seed.
    pub fn load_data(&self) -> Result<PreparedDataset> {
        let manifest = DatasetManifest::load(&self.manifest, &self.dataset)?;
        let cache = self.cache();
        if self.model.variant == Variant::Conditional {
            let records = build_intervention_dataset(&manifest, self.seed, &self.intervention)?;
            prepare_dataset(&manifest, &self.dataset, &cache, Some((&records, &self.intervention)))
        } else {
            prepare_dataset(&manifest, &self.dataset, &cache, None)
        }
    }
}

/// JSON schema of the run configuration file.
pub fn run_config_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
}

#[derive(Debug, Parser)]
#[command(name = "qvsum", version, about = "Query-conditioned video summarization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest, extract features and export pseudo labels.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dataset_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the intervention corpus and perturbed frame sidecars.
    Intervene {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Split,
        /// Report directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the gold labels instead of the model's predictions.
        #[arg(long)]
        gold_as_prediction: bool,
    },
    /// Summarize one prepared video for a free-text query.
    Summarize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video_id: String,
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: usize,
    },
    /// Print the JSON schema of the run configuration.
    Schema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub dataset: crate::ingest::DatasetName,
    /// Manifest entries, i.e. video-query pairs.
    pub entries: usize,
    /// Distinct frame directories.
    pub videos: usize,
    pub splits: SplitCounts,
    pub vocab_size: usize,
    pub input_hash: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn input_hash(manifest: &DatasetManifest, cfg: &DatasetConfig) -> String {
    let mut h = Sha256::new();
    h.update(manifest.to_jsonl());
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cmd_prepare(manifest: &Path, dataset_config: &Path, out: &Path, w: &mut dyn Write) -> Result<PrepareReport> {
    let (m, cfg) = load_inputs(manifest, dataset_config)?;
    let hash = input_hash(&m, &cfg);
    let report_path = out.join(PREPARE_REPORT_FILE);
    if let Ok(text) = fs::read_to_string(&report_path) {
        if let Ok(prev) = serde_json::from_str::<PrepareReport>(&text) {
            if prev.input_hash == hash && out.join("pseudo_labels.json").exists() {
                let _ = writeln!(w, "up to date: {} entries, {} videos", prev.entries, prev.videos);
                return Ok(prev);
            }
        }
    }
    create_dir(out)?;
    let cache = FeatureCache::from_env(out.join("cache"));
    let data = prepare_dataset(&m, &cfg, &cache, None)?;
    let [train, val, test] = m.split_sizes();
    let videos: BTreeSet<String> = m.entries.iter().map(video_key).collect();
    let report = PrepareReport {
        dataset: cfg.dataset_name,
        entries: m.entries.len(),
        videos: videos.len(),
        splits: SplitCounts { train, val, test },
        vocab_size: data.vocab.size(),
        input_hash: hash,
    };
    write_json(&out.join("pseudo_labels.json"), &data.pseudo_labels)?;
    write_json(&out.join("vocab.json"), &data.vocab)?;
    write_json(&report_path, &report)?;
    let _ = writeln!(
        w,
        "prepared {} entries over {} videos (train {train}, val {val}, test {test}); features in {}",
        report.entries,
        report.videos,
        cache.root.display()
    );
    Ok(report)
}

/// Writes `interventions.jsonl` and perturbed frame sidecars under the run
/// directory.
pub fn cmd_intervene(config: &Path, w: &mut dyn Write) -> Result<PathBuf> {
    let run = RunConfig::load(config)?;
    let manifest = DatasetManifest::load(&run.manifest, &run.dataset)?;
    let records = build_intervention_dataset(&manifest, run.seed, &run.intervention)?;
    create_dir(&run.out_dir)?;
    let path = run.out_dir.join(INTERVENTIONS_FILE);
    write_records(&path, &records)?;
    let sidecars = run.out_dir.join("perturbed");
    let mut written = 0;
    for r in records.iter().filter(|r| r.t == 1) {
        let entry = manifest.entry(&r.video_id).expect("records follow the manifest");
        let rec = crate::ingest::load_record(entry, &run.dataset)?;
        write_sidecar(&sidecars, &r.video_id, &perturb_frames(r, &rec.frames, &run.intervention)?)?;
        written += 1;
    }
    let _ = writeln!(w, "{} records ({written} intervened) written to {}", records.len(), path.display());
    Ok(path)
}

pub fn cmd_train(config: &Path, w: &mut dyn Write) -> Result<PathBuf> {
    let run = RunConfig::load(config)?;
    create_dir(&run.out_dir)?;
    write_json(&run.out_dir.join(RUN_CONFIG_FILE), &run)?;
    let data = run.load_data()?;
    let (frame_dim, clip_dim) = data.feature_dims();
    let shape = ModelShape { vocab_size: data.vocab.size(), frame_dim, clip_dim };
    let mut model = Model::new(run.model.clone(), shape)?;
    let outcome = train(&mut model, &data)?;
    let metrics = run.out_dir.join(METRICS_FILE);
    fs::write(&metrics, outcome.metrics_csv()).map_err(|e| Error::io(&metrics, e))?;
    let ck_path = run.out_dir.join(CHECKPOINT_FILE);
    let ck = Checkpoint {
        model,
        vocab: data.vocab.clone(),
        rng: RngState { seed: run.seed, epochs_completed: run.model.epochs() },
        extra: serde_json::json!({ "run_config": run, "best_epoch": outcome.best_epoch }),
    };
    save_checkpoint(&ck_path, &ck)?;
    let split = if data.split(Split::Val).next().is_some() { Split::Val } else { Split::Train };
    if let Some(m) = outcome.history.iter().rev().find(|m| m.split == split) {
        let _ = writeln!(
            w,
            "final {split}: loss {:.6} accuracy {:.4} f1 {:.4} (best epoch {})",
            m.loss, m.accuracy, m.f1, outcome.best_epoch
        );
    }
    let _ = writeln!(w, "checkpoint written to {}", ck_path.display());
    Ok(ck_path)
}

/// Loads a checkpoint and the run configuration stored in it.
pub fn open_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ck = load_checkpoint(path)?;
    let run: RunConfig = serde_json::from_value(ck.extra["run_config"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: no run configuration: {e}", path.display())))?;
    Ok((ck, run))
}

pub fn cmd_eval(
    checkpoint: &Path,
    split: Split,
    out: Option<&Path>,
    gold_as_prediction: bool,
    w: &mut dyn Write,
) -> Result<crate::eval::EvalReport> {
    let (ck, run) = open_checkpoint(checkpoint)?;
    let data = run.load_data()?;
    let samples: Vec<_> = data.split(split).collect();
    if samples.is_empty() {
        return Err(Error::Config(format!("split `{split}` has no videos")));
    }
    let videos = samples
        .iter()
        .map(|s| {
            if gold_as_prediction {
                Ok(VideoPrediction {
                    video_id: s.video_id.clone(),
                    predicted: s.gold.clone(),
                    gold: s.gold.clone(),
                    annotator_scores: s.annotator_scores.clone(),
                    original_len: s.original_len,
                })
            } else {
                predict_sample(&ck.model, s)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(data.config.dataset_name, split, &videos, &run.eval)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    create_dir(&dir)?;
    report.write(&dir, &format!("eval_{split}"))?;
    let selections = videos
        .iter()
        .map(|v| {
            generate_summary(&v.video_id, &v.predicted, v.original_len, summary_budget(v.original_len, run.eval.budget_fraction))
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join(format!("selections_{split}.json")), &selections_json(&selections))?;
    let _ = writeln!(
        w,
        "{split}: accuracy {:.4}  F{} {:.4}  temporal F1 {:.4}",
        report.accuracy, report.beta, report.f_beta, report.temporal_f1
    );
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryOutput {
    pub video_id: String,
    pub query: String,
    pub k: usize,
    pub selected_frames: Vec<usize>,
    pub original_len: usize,
    /// Predicted class of every frame of the original video.
    pub scores: Vec<u8>,
}

pub fn cmd_summarize(checkpoint: &Path, video_id: &str, query: &str, k: usize, w: &mut dyn Write) -> Result<SummaryOutput> {
    let (ck, run) = open_checkpoint(checkpoint)?;
    let manifest = DatasetManifest::load(&run.manifest, &run.dataset)?;
    let Some(entry) = manifest.entry(video_id) else {
        return Err(Error::Video { video_id: video_id.to_string(), message: "not in the manifest".into() });
    };
    let single = DatasetManifest { entries: vec![entry.clone()], ..manifest.clone() };
    let mut data = prepare_dataset(&single, &run.dataset, &run.cache(), None)?;
    let s = data.samples.pop().expect("one entry");
    let query_ids = ck.vocab.encode_ids(&tokenize(query));
    let bow = bow_encode(query, &ck.vocab);
    let inputs = Inputs { frames: &s.frames, clips: &s.clips, query_ids: &query_ids, bow: &bow };
    let (_, predicted) = ck.model.predict_inputs(&inputs)?;
    let sel = generate_summary(video_id, &predicted, s.original_len, k)?;
    let out = SummaryOutput {
        video_id: video_id.to_string(),
        query: query.to_string(),
        k,
        selected_frames: sel.selected_frames,
        original_len: s.original_len,
        scores: predicted[..s.original_len].to_vec(),
    };
    let text = serde_json::to_string(&out).map_err(|e| Error::json("summary", e))?;
    let _ = writeln!(w, "{text}");
    Ok(out)
}

/// Runs one parsed command, reporting errors on `err`. Returns the exit
/// status.
pub fn run(cli: Cli, w: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Prepare { manifest, dataset_config, out } => cmd_prepare(&manifest, &dataset_config, &out, w).map(drop),
        Command::Intervene { config } => cmd_intervene(&config, w).map(drop),
        Command::Train { config } => cmd_train(&config, w).map(drop),
        Command::Eval { checkpoint, split, out, gold_as_prediction } => {
            cmd_eval(&checkpoint, split, out.as_deref(), gold_as_prediction, w).map(drop)
        }
        Command::Summarize { checkpoint, video_id, query, k } => {
            cmd_summarize(&checkpoint, &video_id, &query, k, w).map(drop)
        }
        Command::Schema => {
            let _ = writeln!(w, "{}", serde_json::to_string_pretty(&run_config_schema()).expect("schema serializes"));
            Ok(())
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Parses `args` (program name first) and runs. Usage errors exit with 2.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, &mut std::io::stdout(), &mut std::io::stderr()),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}
