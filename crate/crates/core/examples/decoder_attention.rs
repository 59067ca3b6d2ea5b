//! Runs the masked self-attention of one decoder block over a short token
//! sequence and prints the attention weights. Row `i` only ever looks at
//! tokens `0..=i`.

use qvsum::qencode::{build_vocab, masked_self_attention_with_weights, tokenize, EncoderConfig, QueryEncoder};
use qvsum::rng::rng;
use qvsum_autograd::{Graph, ParamStore};

fn main() -> qvsum::Result<()> {
    let vocab = build_vocab(&["a dog runs along the beach"])?;
    let mut cfg = EncoderConfig::new(vocab.size());
    cfg.embed_dim = 16;
    cfg.hidden_dim = 16;
    cfg.ffn_dim = 32;
    cfg.blocks = 1;
    let mut store = ParamStore::new();
    let enc = QueryEncoder::new(&mut store, &mut rng(0), "query", cfg)?;

    let ids = vocab.encode_ids(&tokenize("dog runs along the beach"));
    let mut g = Graph::with_params(&store);
    let x = enc.embed_tokens(&mut g, &ids)?;
    let (_, weights) = masked_self_attention_with_weights(&mut g, x, &enc.blocks[0])?;
    println!("attention weights (rows sum to 1, upper triangle is zero):");
    for row in g.value(weights).outer_iter() {
        let cells: Vec<String> = row.iter().map(|w| format!("{w:.3}")).collect();
        println!("  {}", cells.join(" "));
    }

    let summary = enc.encode(&mut g, &ids, ids.len())?;
    println!("pooled query vector: {:?}", g.shape(summary));
    Ok(())
}
