//! Localizing the prefix tokens that trigger a memorized suffix.
//!
//! A sequence is split at a pivot `q`; each prefix position `r` is replaced by
//! a perturbation token and the drop in teacher-forced suffix log-likelihood
//! is its delta score. The top-k% of eligible positions become targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, PERTURBATION_POOL};
use crate::error::{Error, Result};
use crate::model::SequenceScorer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Eligibility {
    /// Every non-structural prefix position.
    #[default]
    AllPrefix,
    /// Only prefix positions inside the answer span.
    AnswerSpanOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaConfig {
    pub k: f64,
    pub suffix_ratio: f64,
    pub eligibility: Eligibility,
    pub seed: u64,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        Self {
            k: 0.2,
            suffix_ratio: 0.25,
            eligibility: Eligibility::AllPrefix,
            seed: 7,
        }
    }
}

impl DeltaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::Config(format!(
                "k must lie in (0, 1], got {}",
                self.k
            )));
        }
        if !(self.suffix_ratio > 0.0 && self.suffix_ratio < 1.0) {
            return Err(Error::Config(format!(
                "suffix_ratio must lie in (0, 1), got {}",
                self.suffix_ratio
            )));
        }
        Ok(())
    }
}

/// Delta scores and target selection for one sequence.
///
/// Positions index the token sequence (0 is `⟨bos⟩`). `scores[r - 1]` and
/// `perturb_ids[r - 1]` belong to prefix position `r` for `r = 1..=pivot`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaAnnotation {
    pub id: u64,
    pub pivot: usize,
    pub scores: Vec<f64>,
    pub targets: Vec<usize>,
    pub perturb_ids: Vec<u32>,
}

impl DeltaAnnotation {
    /// Every predicted position of `seq` that is not a target.
    pub fn non_targets(&self, seq: &TokenSequence) -> Vec<usize> {
        (1..seq.len())
            .filter(|p| self.targets.binary_search(p).is_err())
            .collect()
    }

    pub fn is_target(&self, position: usize) -> bool {
        self.targets.binary_search(&position).is_ok()
    }
}

/// `q = clamp(⌊T(1 − s)⌋, 1, T − 1)` for a sequence with `T` predicted tokens.
pub fn pivot(t: usize, suffix_ratio: f64) -> Result<usize> {
    if t < 2 {
        return Err(Error::Contract(format!(
            "cannot split a sequence of length {t}"
        )));
    }
    if !(suffix_ratio > 0.0 && suffix_ratio < 1.0) {
        return Err(Error::Config(format!(
            "suffix_ratio must lie in (0, 1), got {suffix_ratio}"
        )));
    }
    let q = (t as f64 * (1.0 - suffix_ratio)).floor() as usize;
    Ok(q.clamp(1, t - 1))
}

/// Perturbation token for position `r` of sample `sample_id`, never equal to
/// `original`.
pub fn perturbation_token(seed: u64, sample_id: u64, r: usize, original: u32) -> u32 {
    let key = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(sample_id.wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add((r as u64).wrapping_mul(0x1656_67B1_9E37_79F9));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let pool: Vec<u32> = PERTURBATION_POOL
        .iter()
        .copied()
        .filter(|&t| t != original)
        .collect();
    pool[rng.random_range(0..pool.len())]
}

/// Delta scores with a caller-chosen replacement for each prefix position.
///
/// Returns `(scores, replacements)` indexed by `r − 1`.
pub fn delta_scores_with<M, F>(
    model: &M,
    seq: &TokenSequence,
    q: usize,
    replace: F,
) -> Result<(Vec<f64>, Vec<u32>)>
where
    M: SequenceScorer + ?Sized,
    F: Fn(usize, u32) -> u32,
{
    let ids = seq.ids();
    if q == 0 || q >= ids.len() - 1 {
        return Err(Error::Contract(format!(
            "pivot {q} outside 1..{} for sequence {}",
            ids.len() - 1,
            seq.sample_id
        )));
    }
    let mut variants = Vec::with_capacity(q + 1);
    variants.push(ids.to_vec());
    let mut replacements = Vec::with_capacity(q);
    for r in 1..=q {
        let token = replace(r, ids[r]);
        replacements.push(token);
        let mut v = ids.to_vec();
        v[r] = token;
        variants.push(v);
    }
    let refs: Vec<&[u32]> = variants.iter().map(Vec::as_slice).collect();
    let scored = model.score_batch(&refs)?;
    let suffix = |lp: &[f64]| -> f64 { lp[q..].iter().sum() };
    let base = suffix(&scored[0]);
    let scores: Vec<f64> = scored[1..].iter().map(|lp| base - suffix(lp)).collect();
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!(
            "delta score at position {} of sequence {}",
            bad + 1,
            seq.sample_id
        )));
    }
    Ok((scores, replacements))
}

/// `Δ_r = Σ_{t>q} log p(x_t | x_<t) − Σ_{t>q} log p(x_t | x̃_<t)` for every
/// prefix position `r`, where `x̃` swaps position `r` for a seeded pool token.
pub fn delta_scores<M: SequenceScorer + ?Sized>(
    model: &M,
    seq: &TokenSequence,
    q: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<u32>)> {
    delta_scores_with(model, seq, q, |r, original| {
        perturbation_token(seed, seq.sample_id, r, original)
    })
}

/// Target candidates: prefix positions that are not structural tokens.
pub fn candidates(seq: &TokenSequence, q: usize, eligibility: Eligibility) -> Vec<usize> {
    let first = match eligibility {
        Eligibility::AllPrefix => 1,
        Eligibility::AnswerSpanOnly => seq.answer_span().start,
    };
    (first..=q).filter(|&r| !seq.is_structural(r)).collect()
}

/// `max(1, round(k·n))` highest-scoring candidates, ties to the earlier
/// position. `candidates` pairs a position with its score; the result is
/// sorted by position.
pub fn select_targets(candidates: &[(usize, f64)], k: f64) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Empty("no eligible target positions".into()));
    }
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Config(format!("k must lie in (0, 1], got {k}")));
    }
    let n = ((k * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut targets: Vec<usize> = ranked[..n].iter().map(|c| c.0).collect();
    targets.sort_unstable();
    Ok(targets)
}

/// Scores and selects targets for one sequence.
pub fn annotate<M: SequenceScorer + ?Sized>(
    model: &M,
    seq: &TokenSequence,
    config: &DeltaConfig,
) -> Result<DeltaAnnotation> {
    let q = pivot(seq.predicted_len(), config.suffix_ratio)?;
    let (scores, perturb_ids) = delta_scores(model, seq, q, config.seed)?;
    let cands: Vec<(usize, f64)> = candidates(seq, q, config.eligibility)
        .into_iter()
        .map(|r| (r, scores[r - 1]))
        .collect();
    let targets = select_targets(&cands, config.k).map_err(|e| match e {
        Error::Empty(_) => Error::Empty(format!(
            "sequence {} has no eligible target positions before pivot {q}",
            seq.sample_id
        )),
        other => other,
    })?;
    Ok(DeltaAnnotation {
        id: seq.sample_id,
        pivot: q,
        scores,
        targets,
        perturb_ids,
    })
}

/// One annotation per sequence, in input order.
pub fn annotate_forget_set<M: SequenceScorer + ?Sized>(
    model: &M,
    seqs: &[TokenSequence],
    config: &DeltaConfig,
) -> Result<Vec<DeltaAnnotation>> {
    config.validate()?;
    seqs.par_iter()
        .map(|s| annotate(model, s, config))
        .collect()
}

pub fn annotations_to_jsonl(annotations: &[DeltaAnnotation]) -> Result<String> {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&serde_json::to_string(a)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn annotations_from_jsonl(text: &str) -> Result<Vec<DeltaAnnotation>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
