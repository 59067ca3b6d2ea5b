//! Query encoders: a bag-of-words controller and a contextual encoder built
//! from masked self-attention decoder blocks with a Hadamard textual
//! attention on top.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2};
use qvsum_autograd::{Graph, ParamStore, Var};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::{init_normal, HadamardGate, LayerNorm, Linear};
use crate::rng::Rng;

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Dense token ids in first-occurrence order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn push(&mut self, token: &str) {
        if !self.ids.contains_key(token) {
            self.ids.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    /// Ids of in-vocabulary tokens; unknown tokens are dropped.
    pub fn encode_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().filter_map(|t| self.id(&t.as_ref().to_lowercase())).collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, usize> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, usize>::deserialize(d)?;
        let mut tokens = vec![None; map.len()];
        for (tok, id) in map {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| serde::de::Error::custom(format!("vocab id {id} is not dense")))?;
            if slot.replace(tok).is_some() {
                return Err(serde::de::Error::custom(format!("vocab id {id} used twice")));
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense ids")).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { tokens, ids })
    }
}

/// Vocabulary over the training queries.
pub fn build_vocab<S: AsRef<str>>(train_queries: &[S]) -> Result<Vocab> {
    if train_queries.is_empty() {
        return Err(Error::Empty("query corpus"));
    }
    let mut vocab = Vocab::default();
    for q in train_queries {
        for tok in tokenize(q.as_ref()) {
            vocab.push(&tok);
        }
    }
    Ok(vocab)
}

/// Occurrence counts of in-vocabulary tokens.
pub fn bow_encode(query: &str, vocab: &Vocab) -> Array1<f64> {
    let mut out = Array1::zeros(vocab.size());
    for id in vocab.encode_ids(&tokenize(query)) {
        out[id] += 1.0;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub layer_norm_eps: f64,
    /// Attention scaling; `hidden_dim` when absent.
    pub d_k: Option<f64>,
    /// Optional linear projection of the contextual rows to a word dimension.
    pub output_dim: Option<usize>,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            ffn_dim: 256,
            blocks: 2,
            max_len: 16,
            layer_norm_eps: 1e-5,
            d_k: None,
            output_dim: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.output_dim.unwrap_or(self.hidden_dim)
    }
}

/// Sinusoidal table used to initialize the learned positions.
pub fn sinusoidal_positions(max_len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, dim), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Token plus positional embedding from the named tables.
pub fn embed(
    g: &mut Graph<'_>,
    table: &str,
    positions: &str,
    ids: &[usize],
    vocab_size: usize,
    max_len: usize,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    if ids.len() > max_len {
        return Err(Error::OutOfRange(format!("{} tokens exceed max_len {max_len}", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
        return Err(Error::OutOfRange(format!("token id {bad} >= vocabulary size {vocab_size}")));
    }
    let table = g.param(table);
    let tokens = g.gather_rows(table, ids);
    let positions = g.param(positions);
    let pos = g.slice_rows(positions, 0, ids.len());
    Ok(g.add(tokens, pos))
}

/// One masked self-attention block followed by layer norm and a GELU FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub d_k: f64,
}

impl DecoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        ffn: usize,
        eps: f64,
        d_k: Option<f64>,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), in_dim, hidden, true)?,
            key: Linear::new(store, rng, &format!("{name}.key"), in_dim, hidden, true)?,
            value: Linear::new(store, rng, &format!("{name}.value"), in_dim, hidden, true)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden, eps)?,
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn_in"), hidden, ffn, true)?,
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn_out"), ffn, hidden, true)?,
            d_k: d_k.unwrap_or(hidden as f64),
        })
    }
}

/// Causal mask: row `i` may attend to columns `j <= i`.
pub fn causal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| j <= i)
}

fn ensure_finite(g: &Graph<'_>, x: Var, what: &str) -> Result<()> {
    if g.value(x).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite input to {what}")))
    }
}

/// Attention weights and output of the masked self-attention of `block`.
pub fn masked_self_attention_with_weights(g: &mut Graph<'_>, x: Var, block: &DecoderBlock) -> Result<(Var, Var)> {
    ensure_finite(g, x, "masked self-attention")?;
    let q = block.query.forward(g, x);
    let k = block.key.forward(g, x);
    let v = block.value.forward(g, x);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / block.d_k.sqrt());
    let n = g.shape(x).0;
    let weights = g.masked_softmax(scores, &causal_mask(n));
    let z = g.matmul(weights, v);
    Ok((z, weights))
}

pub fn masked_self_attention(g: &mut Graph<'_>, x: Var, block: &DecoderBlock) -> Result<Var> {
    masked_self_attention_with_weights(g, x, block).map(|(z, _)| z)
}

/// `FFN(LayerNorm(MaskAtten(x)))`.
pub fn decoder_block(g: &mut Graph<'_>, x: Var, block: &DecoderBlock) -> Result<Var> {
    let z = masked_self_attention(g, x, block)?;
    let z = block.norm.forward(g, z);
    let h = block.ffn_in.forward(g, z);
    let h = g.gelu(h);
    Ok(block.ffn_out.forward(g, h))
}

/// Mean over the first `valid_rows` rows of the gated features.
pub fn text_attention(g: &mut Graph<'_>, features: Var, gate: &HadamardGate, valid_rows: usize) -> Result<Var> {
    let n = g.shape(features).0;
    if valid_rows == 0 || valid_rows > n {
        return Err(Error::InvalidArgument(format!("{valid_rows} valid rows of {n}")));
    }
    let gated = gate.forward(g, features);
    let kept = if valid_rows == n { gated } else { g.slice_rows(gated, 0, valid_rows) };
    Ok(g.mean_rows(kept))
}

/// Token and positional embedding, decoder stack and textual attention.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEncoder {
    pub config: EncoderConfig,
    pub token_embedding: String,
    pub positions: String,
    pub blocks: Vec<DecoderBlock>,
    pub projection: Option<Linear>,
    pub attention: HadamardGate,
}

impl QueryEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, config: EncoderConfig) -> Result<Self> {
        if config.vocab_size == 0 || config.blocks == 0 || config.max_len == 0 {
            return Err(Error::Config("encoder needs a vocabulary, at least one block and max_len > 0".into()));
        }
        let token_embedding = format!("{name}.token_embedding");
        store.insert(token_embedding.clone(), init_normal(rng, config.vocab_size, config.embed_dim, 0.1))?;
        let positions = format!("{name}.positions");
        store.insert(positions.clone(), sinusoidal_positions(config.max_len, config.embed_dim) * 0.1)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let in_dim = if b == 0 { config.embed_dim } else { config.hidden_dim };
            blocks.push(DecoderBlock::new(
                store,
                rng,
                &format!("{name}.block{b}"),
                in_dim,
                config.hidden_dim,
                config.ffn_dim,
                config.layer_norm_eps,
                config.d_k,
            )?);
        }
        let projection = match config.output_dim {
            Some(d) => Some(Linear::new(store, rng, &format!("{name}.projection"), config.hidden_dim, d, true)?),
            None => None,
        };
        let attention = HadamardGate::new(store, rng, &format!("{name}.text_attention"), config.out_dim())?;
        Ok(Self { config, token_embedding, positions, blocks, projection, attention })
    }

    /// `x_n = W_e onehot(k_n) + P[n]`, one row per token.
    pub fn embed_tokens(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        embed(g, &self.token_embedding, &self.positions, ids, self.config.vocab_size, self.config.max_len)
    }

    /// Per-token contextual rows `F` (`N × out_dim`).
    pub fn contextual(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let mut x = self.embed_tokens(g, ids)?;
        for block in &self.blocks {
            x = decoder_block(g, x, block)?;
        }
        Ok(match &self.projection {
            Some(p) => p.forward(g, x),
            None => x,
        })
    }

    /// Attentive query summary `Z_ta` (`1 × out_dim`). Rows at or after
    /// `valid_len` are padding and excluded from pooling; an empty query
    /// encodes to zeros.
    pub fn encode(&self, g: &mut Graph<'_>, ids: &[usize], valid_len: usize) -> Result<Var> {
        if ids.is_empty() || valid_len == 0 {
            return Ok(g.input(Array2::zeros((1, self.config.out_dim()))));
        }
        let f = self.contextual(g, ids)?;
        text_attention(g, f, &self.attention, valid_len.min(ids.len()))
    }

    /// Truncates to `max_len` tokens.
    pub fn encode_query(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let ids = &ids[..ids.len().min(self.config.max_len)];
        self.encode(g, ids, ids.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use qvsum_autograd::gradcheck::{check_params, project_to_scalar, DEFAULT_STEP};

    fn small_encoder(store: &mut ParamStore) -> QueryEncoder {
        let mut cfg = EncoderConfig::new(5);
        cfg.embed_dim = 6;
        cfg.hidden_dim = 6;
        cfg.ffn_dim = 8;
        cfg.max_len = 6;
        QueryEncoder::new(store, &mut rng(3), "enc", cfg).unwrap()
    }

    #[test]
    fn vocab_first_occurrence_order() {
        let v = build_vocab(&["a b", "b c"]).unwrap();
        assert_eq!((v.id("a"), v.id("b"), v.id("c"), v.size()), (Some(0), Some(1), Some(2), 3));
        assert_eq!(build_vocab(&["x"]).unwrap().size(), 1);
        assert_eq!(build_vocab(&["a a a"]).unwrap().tokens(), &["a".to_string()]);
        assert!(build_vocab::<&str>(&[]).is_err());
        assert_eq!(build_vocab(&["Red CAR"]).unwrap().tokens(), &["red".to_string(), "car".to_string()]);
    }

    #[test]
    fn vocab_json_is_token_to_id() {
        let v = build_vocab(&["b a"]).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"a":1,"b":0}"#);
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>(r#"{"a":2}"#).is_err());
    }

    #[test]
    fn bow_counts() {
        let v = build_vocab(&["a b c"]).unwrap();
        assert_eq!(bow_encode("a c c", &v).to_vec(), vec![1.0, 0.0, 2.0]);
        assert_eq!(bow_encode("", &v).to_vec(), vec![0.0; 3]);
        assert_eq!(bow_encode("z z", &v).to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn embedding_decomposes_additively() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let mut zero_we = store.clone();
        zero_we.get_mut(&enc.token_embedding).unwrap().fill(0.0);
        let mut g = Graph::with_params(&zero_we);
        let x = enc.embed_tokens(&mut g, &[1, 3]).unwrap();
        let p = zero_we.get(&enc.positions).unwrap();
        assert_eq!(g.value(x).row(1), p.row(1));

        let mut zero_p = store.clone();
        zero_p.get_mut(&enc.positions).unwrap().fill(0.0);
        let mut g = Graph::with_params(&zero_p);
        let x = enc.embed_tokens(&mut g, &[4]).unwrap();
        assert_eq!(g.value(x).row(0), zero_p.get(&enc.token_embedding).unwrap().row(4));

        let mut g = Graph::with_params(&store);
        let x = enc.embed_tokens(&mut g, &[2, 2]).unwrap();
        let diff = &g.value(x).row(0) - &g.value(x).row(1);
        let p = store.get(&enc.positions).unwrap();
        let pdiff = &p.row(0) - &p.row(1);
        assert!(diff.iter().zip(pdiff.iter()).all(|(a, b)| (a - b).abs() < 1e-15));

        assert!(enc.embed_tokens(&mut g, &[5]).is_err());
        assert!(enc.embed_tokens(&mut g, &[0; 7]).is_err());
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let block = &enc.blocks[0];
        let mut g = Graph::with_params(&store);
        let x = enc.embed_tokens(&mut g, &[2]).unwrap();
        let z = masked_self_attention(&mut g, x, block).unwrap();
        let v = block.value.forward(&mut g, x);
        assert!((g.value(z) - g.value(v)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn first_row_attends_only_to_itself() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let mut g = Graph::with_params(&store);
        let x = enc.embed_tokens(&mut g, &[0, 1, 2, 3]).unwrap();
        let (_, w) = masked_self_attention_with_weights(&mut g, x, &enc.blocks[0]).unwrap();
        let w = g.value(w);
        assert_eq!(w[[0, 0]], 1.0);
        assert!(w.row(0).iter().skip(1).all(|&v| v == 0.0));
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12 && row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let mut g = Graph::with_params(&store);
        let x = g.input(Array2::from_elem((2, 6), f64::NAN));
        assert!(matches!(masked_self_attention(&mut g, x, &enc.blocks[0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_second_ffn_layer_gives_constant_rows() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let block = &enc.blocks[0];
        store.get_mut(&block.ffn_out.weight).unwrap().fill(0.0);
        store.get_mut(block.ffn_out.bias.as_ref().unwrap()).unwrap().fill(0.25);
        let mut g = Graph::with_params(&store);
        let x = enc.embed_tokens(&mut g, &[0, 1, 4]).unwrap();
        let f = decoder_block(&mut g, x, block).unwrap();
        assert!(g.value(f).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn layer_norm_standardizes_attention_rows() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let mut g = Graph::with_params(&store);
        let x = enc.embed_tokens(&mut g, &[0, 1, 4]).unwrap();
        let z = masked_self_attention(&mut g, x, &enc.blocks[0]).unwrap();
        let n = g.layer_norm(z, 0.0);
        for row in g.value(n).rows() {
            let m = row.sum() / row.len() as f64;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn text_attention_gate_limits() {
        let mut store = ParamStore::new();
        let gate = HadamardGate::new(&mut store, &mut rng(1), "ta", 3).unwrap();
        let f = ndarray::array![[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]];
        for (bias, expect_mean) in [(50.0, true), (-50.0, false)] {
            let mut s = store.clone();
            s.get_mut(&gate.gate.weight).unwrap().fill(0.0);
            s.get_mut(gate.gate.bias.as_ref().unwrap()).unwrap().fill(bias);
            let mut g = Graph::with_params(&s);
            let fv = g.input(f.clone());
            let z = text_attention(&mut g, fv, &gate, 2).unwrap();
            let z = g.value(z);
            for j in 0..3 {
                let target = if expect_mean { (f[[0, j]] + f[[1, j]]) / 2.0 } else { 0.0 };
                assert!((z[[0, j]] - target).abs() < 1e-9);
            }
        }
        let mut g = Graph::with_params(&store);
        let fv = g.input(f.slice(ndarray::s![0..1, ..]).to_owned());
        let z = text_attention(&mut g, fv, &gate, 1).unwrap();
        let gated = gate.forward(&mut g, fv);
        assert_eq!(g.value(z), g.value(gated));
    }

    #[test]
    fn padding_after_query_does_not_change_summary() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let mut g = Graph::with_params(&store);
        let a = enc.encode(&mut g, &[1, 2, 3], 3).unwrap();
        let b = enc.encode(&mut g, &[1, 2, 3, 0, 0], 3).unwrap();
        let diff = (g.value(a) - g.value(b)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        store.insert("x", init_normal(&mut rng(9), 4, 6, 1.0)).unwrap();
        let names = ["x", "enc.block0.query.weight", "enc.block0.value.bias", "enc.block0.ffn_in.weight"];
        let errs = check_params(
            |g| {
                let x = g.param("x");
                let f = decoder_block(g, x, &enc.blocks[0]).unwrap();
                project_to_scalar(g, f)
            },
            &store,
            Some(&names),
            DEFAULT_STEP,
        );
        assert!(errs.values().all(|&e| e < 1e-5), "{errs:?}");
    }
}
