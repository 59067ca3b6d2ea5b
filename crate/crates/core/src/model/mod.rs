//! The four model variants, their losses, and the training loops.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, RngState};
pub use config::{ModelConfig, SelectionMetric, Variant};
pub use train::{
    evaluate_split, finetune_from, predict_sample, pretrain_segments, train, train_with, EpochMetrics, Phase,
    SplitMetrics, TrainOutcome,
};

use ndarray::{Array1, Array2};
use qvsum_autograd::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::conditional::{conditional_objective, ConditionalBatch, ConditionalConfig, ConditionalHeads};
use crate::dataset::{Intervened, Sample};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse_simple, fused_width, interactive_attention, mutual_attention, visual_attention, ChannelMix, ConditionalModule,
    ConditionalModuleConfig,
};
use crate::nn::{init_normal, HadamardGate, Linear};
use crate::qencode::{embed, sinusoidal_positions, EncoderConfig, QueryEncoder};
use crate::rng::rng;

/// Prefix of parameters shared between segment pre-training and frame
/// fine-tuning.
pub const TRUNK_PREFIX: &str = "trunk.";

/// `−logits[class] + log Σ_j exp(logits[j])`.
pub fn cross_entropy(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(Error::OutOfRange(format!("class {class} with {} logits", logits.len())));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[class])
}

/// Row-wise argmax; the lowest class wins ties.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<u8> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

/// Data-dependent sizes fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub frame_dim: usize,
    pub clip_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    Queryvs {
        proj: Linear,
        head: Linear,
    },
    Gpt2mvs {
        encoder: QueryEncoder,
        frame_proj: Linear,
        gate: HadamardGate,
        mix: ChannelMix,
        head: Linear,
    },
    Conditional {
        token_table: String,
        positions: String,
        module: ConditionalModule,
        heads: ConditionalHeads,
    },
    PseudoPretrain {
        encoder: QueryEncoder,
        proj_2d: Linear,
        proj_3d: Linear,
        gate_2d: HadamardGate,
        gate_3d: HadamardGate,
        mix: ChannelMix,
        frame_head: Linear,
        segment_head: Linear,
    },
}

/// Visual and textual inputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Inputs<'a> {
    pub frames: &'a Array2<f64>,
    pub clips: &'a Array2<f64>,
    pub query_ids: &'a [usize],
    pub bow: &'a Array1<f64>,
}

impl<'a> Inputs<'a> {
    pub fn clean(s: &'a Sample) -> Self {
        Self { frames: &s.frames, clips: &s.clips, query_ids: &s.query_ids, bow: &s.bow }
    }

    pub fn intervened(s: &'a Sample, iv: &'a Intervened) -> Self {
        Self { frames: &iv.frames, clips: &iv.clips, query_ids: &iv.query_ids, bow: &s.bow }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub store: ParamStore,
    pub arch: Arch,
}

impl Model {
    /// Fresh parameters drawn from the config seed.
    pub fn new(config: ModelConfig, shape: ModelShape) -> Result<Self> {
        config.validate()?;
        if shape.frame_dim == 0 || shape.clip_dim == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut r = rng(config.seed);
        let c = &config;
        let vocab = shape.vocab_size.max(1);
        let classes = c.num_classes;
        let encoder_cfg = |out: Option<usize>| EncoderConfig {
            vocab_size: vocab,
            embed_dim: c.embed_dim,
            hidden_dim: c.dim,
            ffn_dim: c.ffn_dim,
            blocks: c.encoder_blocks,
            max_len: c.max_query_len,
            layer_norm_eps: c.layer_norm_eps,
            d_k: None,
            output_dim: out,
        };
        let arch = match c.variant {
            Variant::Queryvs => {
                let q_width = if c.fusion_mode == crate::fusion::FuseMode::Concat { c.dim } else { shape.frame_dim };
                let proj = Linear::new(&mut store, &mut r, "bow_proj", vocab, q_width, true)?;
                let width = fused_width(c.fusion_mode, q_width, shape.frame_dim);
                let head = Linear::new(&mut store, &mut r, "head", width, classes, true)?;
                Arch::Queryvs { proj, head }
            }
            Variant::Gpt2mvs => {
                let encoder = QueryEncoder::new(&mut store, &mut r, "encoder", encoder_cfg(None))?;
                let frame_proj = Linear::new(&mut store, &mut r, "frame_proj", shape.frame_dim, c.dim, true)?;
                let gate = HadamardGate::new(&mut store, &mut r, "visual_attention", c.dim)?;
                let mix = ChannelMix::new(&mut store, &mut r, "interactive_attention", c.dim, c.dim)?;
                let head = Linear::new(&mut store, &mut r, "head", c.dim, classes, true)?;
                Arch::Gpt2mvs { encoder, frame_proj, gate, mix, head }
            }
            Variant::Conditional => {
                let token_table = "tokens.embedding".to_string();
                store.insert(token_table.clone(), init_normal(&mut r, vocab, c.embed_dim, 0.1))?;
                let positions = "tokens.positions".to_string();
                store.insert(positions.clone(), sinusoidal_positions(c.max_query_len, c.embed_dim) * 0.1)?;
                let module = ConditionalModule::new(
                    &mut store,
                    &mut r,
                    "conditional_attention",
                    &ConditionalModuleConfig {
                        token_dim: c.embed_dim,
                        dim: c.dim,
                        ffn_dim: c.ffn_dim,
                        visual_dim: shape.clip_dim,
                        out_dim: c.dim,
                        kappa: c.kappa,
                        layer_norm_eps: c.layer_norm_eps,
                    },
                )?;
                let heads = ConditionalHeads::new(
                    &mut store,
                    &mut r,
                    "heads",
                    ConditionalConfig {
                        x_dim: c.dim,
                        z_dim: c.z_dim,
                        hidden: c.dim,
                        num_classes: classes,
                        helper_weight: c.helper_weight,
                    },
                )?;
                Arch::Conditional { token_table, positions, module, heads }
            }
            Variant::PseudoPretrain => {
                let t = TRUNK_PREFIX;
                let encoder = QueryEncoder::new(&mut store, &mut r, &format!("{t}encoder"), encoder_cfg(None))?;
                let proj_2d = Linear::new(&mut store, &mut r, &format!("{t}proj_2d"), shape.frame_dim, c.dim, true)?;
                let proj_3d = Linear::new(&mut store, &mut r, &format!("{t}proj_3d"), shape.clip_dim, c.dim, true)?;
                let gate_2d = HadamardGate::new(&mut store, &mut r, &format!("{t}visual_attention_2d"), c.dim)?;
                let gate_3d = HadamardGate::new(&mut store, &mut r, &format!("{t}visual_attention_3d"), c.dim)?;
                let mix = ChannelMix::new(&mut store, &mut r, &format!("{t}mutual_attention"), c.dim, c.dim)?;
                let frame_head = Linear::new(&mut store, &mut r, "frame_head", c.dim, classes, true)?;
                let segment_head = Linear::new(&mut store, &mut r, "segment_head", c.dim, classes, true)?;
                Arch::PseudoPretrain { encoder, proj_2d, proj_3d, gate_2d, gate_3d, mix, frame_head, segment_head }
            }
        };
        Ok(Self { config, shape, store, arch })
    }

    fn truncated<'a>(&self, ids: &'a [usize]) -> &'a [usize] {
        &ids[..ids.len().min(self.config.max_query_len)]
    }

    fn check_inputs(&self, x: &Inputs<'_>) -> Result<()> {
        if x.frames.ncols() != self.shape.frame_dim || x.clips.ncols() != self.shape.clip_dim {
            return Err(Error::Shape(format!(
                "features {}x{} / {}x{} do not match model widths {} / {}",
                x.frames.nrows(),
                x.frames.ncols(),
                x.clips.nrows(),
                x.clips.ncols(),
                self.shape.frame_dim,
                self.shape.clip_dim
            )));
        }
        if x.frames.nrows() != x.clips.nrows() {
            return Err(Error::Shape("frame and clip rows differ".into()));
        }
        Ok(())
    }

    fn bow_row(&self, bow: &Array1<f64>) -> Array2<f64> {
        let width = self.shape.vocab_size.max(1);
        let mut row = Array2::zeros((1, width));
        for (i, &v) in bow.iter().enumerate().take(width) {
            row[[0, i]] = v;
        }
        row
    }

    /// Textual summary for the encoder-based variants.
    fn text_summary(&self, g: &mut Graph<'_>, encoder: &QueryEncoder, ids: &[usize]) -> Result<Var> {
        encoder.encode_query(g, self.truncated(ids))
    }

    /// `X_mul` rows for the conditional variant.
    pub fn conditional_features(&self, g: &mut Graph<'_>, x: &Inputs<'_>) -> Result<Var> {
        let Arch::Conditional { token_table, positions, module, .. } = &self.arch else {
            return Err(Error::Config("not a conditional model".into()));
        };
        let ids = self.truncated(x.query_ids);
        let clips = g.input(x.clips.clone());
        let z_ta = if ids.is_empty() {
            g.input(Array2::zeros((1, self.config.dim)))
        } else {
            let tokens = embed(g, token_table, positions, ids, self.shape.vocab_size.max(1), self.config.max_query_len)?;
            module.text_branch(g, tokens)?
        };
        module.combine(g, z_ta, clips)
    }

    /// Per-frame class logits (`frames × 4`).
    pub fn frame_logits(&self, g: &mut Graph<'_>, x: &Inputs<'_>) -> Result<Var> {
        self.check_inputs(x)?;
        match &self.arch {
            Arch::Queryvs { proj, head } => {
                let bow = g.input(self.bow_row(x.bow));
                let q = proj.forward(g, bow);
                let v = g.input(x.frames.clone());
                let fused = fuse_simple(g, q, v, self.config.fusion_mode)?;
                Ok(head.forward(g, fused))
            }
            Arch::Gpt2mvs { encoder, frame_proj, gate, mix, head } => {
                let z_ta = self.text_summary(g, encoder, x.query_ids)?;
                let v = g.input(x.frames.clone());
                let v = frame_proj.forward(g, v);
                let z_va = visual_attention(g, v, gate);
                let z_ia = interactive_attention(g, z_ta, z_va, mix)?;
                Ok(head.forward(g, z_ia))
            }
            Arch::Conditional { heads, .. } => {
                let xm = self.conditional_features(g, x)?;
                Ok(heads.g_y0.forward(g, xm))
            }
            Arch::PseudoPretrain { encoder, frame_head, .. } => {
                let z_ta = self.text_summary(g, encoder, x.query_ids)?;
                let z_ma = self.mutual(g, z_ta, x.frames, x.clips)?;
                Ok(frame_head.forward(g, z_ma))
            }
        }
    }

    fn mutual(&self, g: &mut Graph<'_>, z_ta: Var, f2d: &Array2<f64>, f3d: &Array2<f64>) -> Result<Var> {
        let Arch::PseudoPretrain { proj_2d, proj_3d, gate_2d, gate_3d, mix, .. } = &self.arch else {
            return Err(Error::Config("not a pseudo_pretrain model".into()));
        };
        let a = g.input(f2d.clone());
        let a = proj_2d.forward(g, a);
        let z_as = visual_attention(g, a, gate_2d);
        let b = g.input(f3d.clone());
        let b = proj_3d.forward(g, b);
        let z_ast = visual_attention(g, b, gate_3d);
        mutual_attention(g, z_ta, z_as, z_ast, mix)
    }

    /// Per-segment logits of the pre-training head.
    pub fn segment_logits(&self, g: &mut Graph<'_>, s: &Sample) -> Result<Var> {
        let Arch::PseudoPretrain { encoder, segment_head, .. } = &self.arch else {
            return Err(Error::Config("segment pre-training needs the pseudo_pretrain variant".into()));
        };
        let z_ta = self.text_summary(g, encoder, &s.query_ids)?;
        let z_ma = self.mutual(g, z_ta, &s.segments_2d, &s.segments_3d)?;
        Ok(segment_head.forward(g, z_ma))
    }

    /// Mean segment cross-entropy against the pseudo labels.
    pub fn segment_loss(&self, g: &mut Graph<'_>, s: &Sample) -> Result<Var> {
        if s.segment_classes.is_empty() || s.segment_classes.len() != s.segments_2d.nrows() {
            return Err(Error::Video { video_id: s.video_id.clone(), message: "missing segment pseudo labels".into() });
        }
        let logits = self.segment_logits(g, s)?;
        Ok(g.cross_entropy(logits, &s.segment_classes))
    }

    /// Training loss of one sample. The conditional variant returns the
    /// negated objective per frame, using `seed` for its latent sample.
    pub fn loss(&self, g: &mut Graph<'_>, s: &Sample, seed: u64) -> Result<Var> {
        match &self.arch {
            Arch::Conditional { heads, .. } => {
                let (inputs, flags) = match &s.intervention {
                    Some(iv) => (Inputs::intervened(s, iv), iv.frame_flags()),
                    None => (Inputs::clean(s), vec![0; s.frames.nrows()]),
                };
                self.check_inputs(&inputs)?;
                let xm = self.conditional_features(g, &inputs)?;
                let y = s.gold_classes();
                let batch = ConditionalBatch { x: xm, t: &flags, y: &y };
                let terms = conditional_objective(g, &batch, heads, seed)?;
                Ok(g.scale(terms.total, -1.0 / y.len() as f64))
            }
            _ => {
                let logits = self.frame_logits(g, &Inputs::clean(s))?;
                Ok(g.cross_entropy(logits, &s.gold_classes()))
            }
        }
    }

    /// Deterministic per-frame prediction on clean inputs.
    pub fn predict(&self, s: &Sample) -> Result<(Array2<f64>, Vec<u8>)> {
        self.predict_inputs(&Inputs::clean(s))
    }

    pub fn predict_inputs(&self, x: &Inputs<'_>) -> Result<(Array2<f64>, Vec<u8>)> {
        let mut g = Graph::with_params(&self.store);
        let l = self.frame_logits(&mut g, x)?;
        let logits = g.value(l).clone();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let classes = argmax_rows(&logits);
        Ok((logits, classes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        let v = cross_entropy(&[10.0, 0.0, 0.0, 0.0], 0).unwrap();
        let oracle = (1.0 + 3.0 * (-10f64).exp()).ln();
        assert!((v - oracle).abs() < 1e-15 && (v - 1.36e-4).abs() < 1e-6);
        let shifted = cross_entropy(&[17.0, 7.0, 7.0, 7.0], 0).unwrap();
        assert!((v - shifted).abs() < 1e-9);
        assert!(cross_entropy(&[0.0; 4], 4).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_class_on_ties() {
        let l = ndarray::array![[1.0, 1.0, 0.0, 1.0], [0.0, 2.0, 3.0, 3.0]];
        assert_eq!(argmax_rows(&l), vec![0, 2]);
        assert_eq!(argmax_rows(&(l * 5.0)), vec![0, 2]);
    }
}
