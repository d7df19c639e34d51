//! Shared fixtures for the criterion benches.

use dto_core::corpus::{Split, BOS, EOS, SEP};
use dto_core::{init_model, ModelConfig, ModelParams, TokenSequence};

/// The default 2-layer/128-d model over a vocabulary of `vocab` tokens.
pub fn toy_model(vocab: usize) -> ModelParams {
    let config = ModelConfig {
        vocab_size: vocab,
        ..Default::default()
    };
    init_model(&config).expect("valid config")
}

/// `n` question-answer sequences of `len` tokens drawn from ids 8.. with a
/// fixed stride, so runs are comparable.
pub fn sequences(n: usize, len: usize, vocab: usize) -> Vec<TokenSequence> {
    assert!(len >= 5 && vocab > 8);
    (0..n)
        .map(|i| {
            let body = len - 3;
            let q = body / 2;
            let mut ids = vec![BOS];
            for j in 0..body {
                if j == q {
                    ids.push(SEP);
                }
                ids.push(8 + ((i * 31 + j * 7) % (vocab - 8)) as u32);
            }
            ids.push(EOS);
            TokenSequence::new(i as u64, Split::Forget, ids).expect("valid layout")
        })
        .collect()
}
