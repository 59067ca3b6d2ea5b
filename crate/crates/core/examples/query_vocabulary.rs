//! Builds a vocabulary from training queries and encodes a few queries as
//! bag-of-words count vectors. Unknown words are dropped.

use qvsum::qencode::{bow_encode, build_vocab, tokenize};

fn main() -> qvsum::Result<()> {
    let train = ["Dog on the beach", "city food at night", "a dog eating food"];
    let vocab = build_vocab(&train)?;
    println!("vocabulary ({} words): {:?}", vocab.size(), vocab.tokens());

    for q in ["dog food dog", "beach at night", "unicorn"] {
        let ids = vocab.encode_ids(&tokenize(q));
        println!("{q:>16}  ids {ids:?}  bow {}", bow_encode(q, &vocab));
    }
    Ok(())
}
