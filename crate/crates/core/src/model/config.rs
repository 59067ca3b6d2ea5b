use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FuseMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Queryvs,
    Gpt2mvs,
    Conditional,
    PseudoPretrain,
}

impl Variant {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Variant::Queryvs | Variant::Gpt2mvs => 1e-4,
            Variant::Conditional => 1e-6,
            Variant::PseudoPretrain => 1e-7,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Variant::Queryvs => 25,
            Variant::Gpt2mvs => 10,
            Variant::Conditional => 60,
            Variant::PseudoPretrain => 100,
        }
    }

    /// Model selection uses frame accuracy for the classifier variants and
    /// temporal F1 for the others.
    pub fn selection_metric(self) -> SelectionMetric {
        match self {
            Variant::Queryvs | Variant::Gpt2mvs => SelectionMetric::Accuracy,
            Variant::Conditional | Variant::PseudoPretrain => SelectionMetric::F1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Accuracy,
    F1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "default_fusion")]
    pub fusion_mode: FuseMode,
    /// Top-κ width of the conditional attention; `ceil(n/2)` when absent.
    #[serde(default)]
    pub kappa: Option<usize>,
    /// Width of fused and attentive features.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_ffn")]
    pub ffn_dim: usize,
    #[serde(default = "default_blocks")]
    pub encoder_blocks: usize,
    #[serde(default = "default_max_len")]
    pub max_query_len: usize,
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
    #[serde(default = "default_helper_weight")]
    pub helper_weight: f64,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Segment-level pre-training before frame fine-tuning.
    #[serde(default = "default_true")]
    pub pretrain: bool,
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    #[serde(default)]
    pub pretrain_learning_rate: Option<f64>,
}

fn default_fusion() -> FuseMode {
    FuseMode::Mul
}
fn default_dim() -> usize {
    64
}
fn default_ffn() -> usize {
    128
}
fn default_blocks() -> usize {
    2
}
fn default_max_len() -> usize {
    16
}
fn default_z_dim() -> usize {
    16
}
fn default_helper_weight() -> f64 {
    1.0
}
fn default_ln_eps() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_classes() -> usize {
    4
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            fusion_mode: default_fusion(),
            kappa: None,
            dim: default_dim(),
            embed_dim: default_dim(),
            ffn_dim: default_ffn(),
            encoder_blocks: default_blocks(),
            max_query_len: default_max_len(),
            z_dim: default_z_dim(),
            helper_weight: default_helper_weight(),
            layer_norm_eps: default_ln_eps(),
            learning_rate: None,
            epochs: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: 0,
            num_classes: default_classes(),
            pretrain: true,
            pretrain_epochs: None,
            pretrain_learning_rate: None,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| self.variant.default_learning_rate())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.variant.default_epochs())
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or_else(|| self.epochs())
    }

    pub fn pretrain_learning_rate(&self) -> f64 {
        self.pretrain_learning_rate.unwrap_or_else(|| self.learning_rate())
    }

    pub fn validate(&self) -> Result<()> {
        let lr_ok = |v: f64| v >= 0.0 && v.is_finite();
        if !lr_ok(self.learning_rate()) || !lr_ok(self.pretrain_learning_rate()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.epochs() == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.num_classes != 4 {
            return Err(Error::Config(format!("num_classes is fixed at 4, got {}", self.num_classes)));
        }
        if [self.dim, self.embed_dim, self.ffn_dim, self.encoder_blocks, self.max_query_len, self.z_dim].contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.kappa == Some(0) {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_defaults() {
        let q = ModelConfig::new(Variant::Queryvs);
        assert_eq!((q.learning_rate(), q.beta1, q.beta2, q.adam_eps), (1e-4, 0.9, 0.999, 1e-8));
        let g = ModelConfig::new(Variant::Gpt2mvs);
        assert_eq!((g.learning_rate(), g.epochs()), (1e-4, 10));
        let c = ModelConfig::new(Variant::Conditional);
        assert_eq!((c.learning_rate(), c.epochs()), (1e-6, 60));
        let p = ModelConfig::new(Variant::PseudoPretrain);
        assert_eq!((p.learning_rate(), p.epochs()), (1e-7, 100));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"variant":"queryvs","bogus":1}"#).is_err());
        let mut c = ModelConfig::new(Variant::Queryvs);
        c.epochs = Some(0);
        assert!(c.validate().is_err());
        c.epochs = Some(1);
        c.learning_rate = Some(-1.0);
        assert!(c.validate().is_err());
        c.learning_rate = Some(0.0);
        assert!(c.validate().is_ok());
    }
}
