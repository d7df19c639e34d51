//! Decoder-only transformer over packed batches.
//!
//! A batch of sequences is laid out as one `[N, d]` matrix; attention is
//! restricted to each sequence's own rows. Row `i` of a sequence's output
//! predicts the token at position `i + 1`.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::corpus::{EOS, SEP};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Sequences per forward pass when scoring or decoding without gradients.
const SCORE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            context: 128,
            d_model: 128,
            layers: 2,
            heads: 4,
            d_ff: 512,
            init_scale: 0.02,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 9 {
            return Err(Error::Config(format!(
                "vocab_size must cover the 8 special tokens plus text, got {}",
                self.vocab_size
            )));
        }
        if self.context < 2 || self.d_model == 0 || self.layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("bad init_scale {}", self.init_scale)));
        }
        Ok(())
    }

    /// Parameter names and shapes in initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, c, d, f) = (self.vocab_size, self.context, self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![c, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.bias".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, v]),
            ("head.b".to_string(), vec![v]),
        ]);
        out
    }
}

/// All transformer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S = f64> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<S>>,
}

/// Weights ~ N(0, init_scale²), biases 0, norm gains 1.
pub fn init_model<S: Scalar>(config: &ModelConfig) -> Result<ModelParams<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<S> = if name.ends_with(".gain") {
            vec![S::one(); n]
        } else if is_bias(&name) {
            vec![S::zero(); n]
        } else {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    S::of(z * config.init_scale)
                })
                .collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

/// Graph handle for one packed forward pass.
pub struct Forward {
    /// `[N, V]` log-probabilities; row `i` of a segment predicts position `i + 1`.
    pub log_probs: NodeId,
    pub segments: Vec<Range<usize>>,
}

impl Forward {
    /// Row predicting `position` (≥ 1) of sequence `seq`.
    pub fn row(&self, seq: usize, position: usize) -> usize {
        self.segments[seq].start + position - 1
    }

    pub fn rows(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Assembles parameters from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Shape(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Records a forward pass over `seqs` (each fed in full) on `g`.
    ///
    /// Every parameter is registered on the tape, so gradients from `g`
    /// always carry the full parameter key set.
    pub fn forward<'g>(&'g self, g: &mut Graph<'g, S>, seqs: &[&[u32]]) -> Result<Forward> {
        forward_tensors(g, &self.config, &self.tensors, seqs)
    }

    /// Full next-token log-distributions, one `[len, V]` tensor per sequence;
    /// row `i` is the distribution for position `i + 1`.
    pub fn log_distributions(&self, seqs: &[&[u32]]) -> Result<Vec<Tensor<S>>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, seqs)?;
        g.check_finite()?;
        let lp = g.value(fwd.log_probs);
        let v = self.config.vocab_size;
        fwd.segments
            .iter()
            .map(|seg| {
                Tensor::new(
                    vec![seg.len(), v],
                    lp.data()[seg.start * v..seg.end * v].to_vec(),
                )
            })
            .collect()
    }

    /// `log p(x_t | x_<t)` for `t = 1..len`; entry `t − 1` is position `t`.
    pub fn token_log_probs(&self, seq: &[u32]) -> Result<Vec<f64>> {
        Ok(self.score_batch(&[seq])?.pop().unwrap_or_default())
    }

    fn score_chunk(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, seqs)?;
        g.check_finite()?;
        let lp = g.value(fwd.log_probs);
        let v = self.config.vocab_size;
        Ok(seqs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (1..s.len())
                    .map(|t| lp.data()[fwd.row(i, t) * v + s[t] as usize].as_f64())
                    .collect()
            })
            .collect())
    }

    /// Next-token log-distribution after each prefix.
    fn next_token_logits(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<S>>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, prefixes)?;
        g.check_finite()?;
        let lp = g.value(fwd.log_probs);
        Ok(fwd
            .segments
            .iter()
            .map(|seg| lp.row(seg.end - 1).to_vec())
            .collect())
    }

    /// Greedy continuation of a prompt ending in `⟨sep⟩`. Ties go to the
    /// lowest token id; `⟨eos⟩` ends decoding and is not returned.
    pub fn greedy_decode(&self, prefix: &[u32], max_len: usize) -> Result<Vec<u32>> {
        Ok(self
            .greedy_decode_batch(&[prefix], max_len)?
            .pop()
            .unwrap_or_default())
    }

    /// [`greedy_decode`](Self::greedy_decode) for many prompts; output order
    /// follows input order.
    pub fn greedy_decode_batch(
        &self,
        prefixes: &[&[u32]],
        max_len: usize,
    ) -> Result<Vec<Vec<u32>>> {
        for p in prefixes {
            if p.last() != Some(&SEP) {
                return Err(Error::Contract(
                    "decode prompt must end with the separator".into(),
                ));
            }
        }
        let chunks: Vec<&[&[u32]]> = prefixes.chunks(SCORE_CHUNK).collect();
        let decoded: Result<Vec<Vec<Vec<u32>>>> = chunks
            .par_iter()
            .map(|chunk| self.decode_chunk(chunk, max_len))
            .collect();
        Ok(decoded?.into_iter().flatten().collect())
    }

    fn decode_chunk(&self, prefixes: &[&[u32]], max_len: usize) -> Result<Vec<Vec<u32>>> {
        let mut seqs: Vec<Vec<u32>> = prefixes.iter().map(|p| p.to_vec()).collect();
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); prefixes.len()];
        let mut active: Vec<usize> = (0..prefixes.len()).collect();
        for _ in 0..max_len {
            active.retain(|&i| seqs[i].len() < self.config.context);
            if active.is_empty() {
                break;
            }
            let batch: Vec<&[u32]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
            let dists = self.next_token_logits(&batch)?;
            let mut still = Vec::with_capacity(active.len());
            for (&i, dist) in active.iter().zip(&dists) {
                let next = argmax(dist);
                if next == EOS {
                    continue;
                }
                seqs[i].push(next);
                out[i].push(next);
                still.push(i);
            }
            active = still;
        }
        Ok(out)
    }
}

/// Forward pass over a named tensor map laid out as by
/// [`ModelConfig::parameter_shapes`].
///
/// Every parameter is registered on the tape, so gradients from `g`
/// always carry the full parameter key set.
pub fn forward_tensors<'g, S: Scalar>(
    g: &mut Graph<'g, S>,
    config: &ModelConfig,
    tensors: &'g BTreeMap<String, Tensor<S>>,
    seqs: &[&[u32]],
) -> Result<Forward> {
    check_sequences(config, seqs)?;
    let nodes: BTreeMap<&str, NodeId> = tensors
        .iter()
        .map(|(name, t)| (name.as_str(), g.param(name.clone(), t)))
        .collect();
    let p = |name: &str| -> NodeId { nodes[name] };

    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        let start = ids.len();
        ids.extend(s.iter().map(|&t| t as usize));
        positions.extend(0..s.len());
        segments.push(start..ids.len());
    }
    let eps = S::of(LN_EPS);

    let tok = g.embed(p("tok_emb"), &ids)?;
    let pos = g.embed(p("pos_emb"), &positions)?;
    let mut x = g.add(tok, pos)?;
    for l in 0..config.layers {
        let n = |s: &str| p(&format!("layer{l}.{s}"));
        let h = g.layer_norm(x, n("ln1.gain"), n("ln1.bias"), eps)?;
        let q = linear(g, h, n("attn.wq"), n("attn.bq"))?;
        let k = linear(g, h, n("attn.wk"), n("attn.bk"))?;
        let v = linear(g, h, n("attn.wv"), n("attn.bv"))?;
        let a = g.causal_attention(q, k, v, config.heads, &segments)?;
        let o = linear(g, a, n("attn.wo"), n("attn.bo"))?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x, n("ln2.gain"), n("ln2.bias"), eps)?;
        let f = linear(g, h, n("ffn.w1"), n("ffn.b1"))?;
        let f = g.gelu(f)?;
        let f = linear(g, f, n("ffn.w2"), n("ffn.b2"))?;
        x = g.add(x, f)?;
    }
    let h = g.layer_norm(x, p("ln_f.gain"), p("ln_f.bias"), eps)?;
    let logits = linear(g, h, p("head.w"), p("head.b"))?;
    let log_probs = g.log_softmax_rows(logits)?;
    Ok(Forward {
        log_probs,
        segments,
    })
}

fn check_sequences(config: &ModelConfig, seqs: &[&[u32]]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Empty(
            "forward pass needs at least one sequence".into(),
        ));
    }
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Empty("empty sequence".into()));
        }
        if s.len() > config.context {
            return Err(Error::Length {
                len: s.len(),
                context: config.context,
            });
        }
        if let Some(&bad) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                config.vocab_size
            )));
        }
    }
    Ok(())
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.')
        .next()
        .is_some_and(|leaf| leaf.starts_with('b'))
        && name.contains('.')
}

fn linear<S: Scalar>(g: &mut Graph<'_, S>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Index of the largest value; the first one wins ties.
fn argmax<S: Scalar>(row: &[S]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Anything that can score token sequences under teacher forcing.
pub trait SequenceScorer: Sync {
    /// For each sequence, `log p(x_t | x_<t)` for `t = 1..len` (entry `t − 1`).
    fn score_batch(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>>;

    /// Greedy continuations of prompts ending in `⟨sep⟩`.
    fn decode_batch(&self, _prompts: &[&[u32]], _max_len: usize) -> Result<Vec<Vec<u32>>> {
        Err(Error::Unavailable(
            "this scorer cannot generate text".into(),
        ))
    }
}

impl<S: Scalar> SequenceScorer for ModelParams<S> {
    fn score_batch(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: Vec<&[&[u32]]> = seqs.chunks(SCORE_CHUNK).collect();
        let scored: Result<Vec<Vec<Vec<f64>>>> =
            chunks.par_iter().map(|c| self.score_chunk(c)).collect();
        Ok(scored?.into_iter().flatten().collect())
    }

    fn decode_batch(&self, prompts: &[&[u32]], max_len: usize) -> Result<Vec<Vec<u32>>> {
        self.greedy_decode_batch(prompts, max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            context: 16,
            d_model: 8,
            layers: 2,
            heads: 2,
            d_ff: 12,
            init_scale: 0.3,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = tiny(12);
        let a: ModelParams = init_model(&cfg).unwrap();
        let b: ModelParams = init_model(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get("layer1.attn.wq").unwrap().shape(), &[8, 8]);
        assert!(a
            .get("layer0.ln1.gain")
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 1.0));
        assert!(a
            .get("layer0.ffn.b1")
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
        assert!(a.get("head.b").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(a.get("head.w").unwrap().data().iter().any(|&x| x != 0.0));
        assert_eq!(ModelConfig::default().head_dim(), 32);
    }

    #[test]
    fn zero_init_scale_zeroes_projections() {
        let cfg = ModelConfig {
            init_scale: 0.0,
            ..tiny(12)
        };
        let p: ModelParams = init_model(&cfg).unwrap();
        for (name, t) in p.tensors() {
            if !name.ends_with(".gain") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let cfg = ModelConfig {
            heads: 3,
            ..tiny(12)
        };
        assert!(matches!(init_model::<f64>(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_logits_give_log_one_over_v() {
        let mut p: ModelParams = init_model(&tiny(12)).unwrap();
        p.tensors_mut()
            .get_mut("head.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let lp = p.token_log_probs(&[1, 9, 3, 10, 2]).unwrap();
        assert_eq!(lp.len(), 4);
        for v in lp {
            assert!((v - (1.0f64 / 12.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn causality() {
        let p: ModelParams = init_model(&tiny(12)).unwrap();
        let a = p.token_log_probs(&[1, 8, 9, 3, 10, 2]).unwrap();
        let b = p.token_log_probs(&[1, 8, 9, 3, 11, 11]).unwrap();
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[4], b[4]);
        let short = p.token_log_probs(&[1, 8, 9, 3]).unwrap();
        assert_eq!(a[..3], short[..]);
    }

    #[test]
    fn packed_batch_matches_single() {
        let p: ModelParams = init_model(&tiny(12)).unwrap();
        let s1: &[u32] = &[1, 8, 9, 3, 10, 2];
        let s2: &[u32] = &[1, 11, 3, 2];
        let batch = p.score_batch(&[s1, s2]).unwrap();
        assert_eq!(batch[0], p.token_log_probs(s1).unwrap());
        assert_eq!(batch[1], p.token_log_probs(s2).unwrap());
    }

    #[test]
    fn distributions_normalize() {
        let p: ModelParams = init_model(&tiny(12)).unwrap();
        let d = p.log_distributions(&[&[1, 8, 3, 9, 2]]).unwrap();
        for r in 0..5 {
            let s: f64 = d[0].row(r).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn overlong_and_out_of_vocab_rejected() {
        let p: ModelParams = init_model(&tiny(12)).unwrap();
        let long = vec![8u32; 17];
        assert!(matches!(
            p.token_log_probs(&long),
            Err(Error::Length {
                len: 17,
                context: 16
            })
        ));
        assert!(p.token_log_probs(&[1, 12]).is_err());
    }

    #[test]
    fn decode_follows_a_fixed_token() {
        let mut p: ModelParams = init_model(&tiny(12)).unwrap();
        p.tensors_mut()
            .get_mut("head.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let b = p.tensors_mut().get_mut("head.b").unwrap();
        b.data_mut()[9] = 50.0;
        assert_eq!(p.greedy_decode(&[1, 8, 3], 5).unwrap(), vec![9; 5]);
    }

    #[test]
    fn decode_ties_pick_lowest_id() {
        let mut p: ModelParams = init_model(&tiny(12)).unwrap();
        p.tensors_mut()
            .get_mut("head.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        // all logits equal, token 0 wins and decoding runs to max_len
        assert_eq!(p.greedy_decode(&[1, 8, 3], 3).unwrap(), vec![0, 0, 0]);
        assert!(p.greedy_decode(&[1, 8], 3).is_err());
    }

    #[test]
    fn decode_stops_at_eos_and_context() {
        let mut p: ModelParams = init_model(&tiny(12)).unwrap();
        p.tensors_mut()
            .get_mut("head.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        p.tensors_mut().get_mut("head.b").unwrap().data_mut()[EOS as usize] = 50.0;
        assert!(p.greedy_decode(&[1, 8, 3], 5).unwrap().is_empty());
        let mut q: ModelParams = init_model(&tiny(12)).unwrap();
        q.tensors_mut()
            .get_mut("head.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        q.tensors_mut().get_mut("head.b").unwrap().data_mut()[9] = 50.0;
        let prompt = [1, 8, 8, 8, 8, 8, 8, 8, 8, 8, 8, 8, 8, 8, 3];
        assert_eq!(q.greedy_decode(&prompt, 10).unwrap().len(), 1);
    }
}
