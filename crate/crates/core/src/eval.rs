//! Evaluation metrics: Rouge-L, normalized answer probability, truth ratio,
//! the two-sample Kolmogorov–Smirnov forget quality and model utility.

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_pair, encode_sample, QASample, Split, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::model::SequenceScorer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> RougeScore {
    let l = lcs_len(reference, hypothesis) as f64;
    let ratio = |n: usize| if n == 0 { 0.0 } else { l / n as f64 };
    let precision = ratio(hypothesis.len());
    let recall = ratio(reference.len());
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore {
        precision,
        recall,
        f1,
    }
}

/// Geometric-mean probability of the answer span from per-position
/// log-probabilities (`log_probs[t − 1]` is position `t`).
pub fn normalized_prob_from(seq: &TokenSequence, log_probs: &[f64]) -> f64 {
    let span = seq.answer_span();
    let n = span.len() as f64;
    let total: f64 = span.map(|t| log_probs[t - 1]).sum();
    (total / n).exp()
}

pub fn normalized_answer_prob<M: SequenceScorer + ?Sized>(
    model: &M,
    seq: &TokenSequence,
) -> Result<f64> {
    let lp = model.score_batch(&[seq.ids()])?;
    Ok(normalized_prob_from(seq, &lp[0]))
}

/// Correct-answer probability over the mean distractor probability.
pub fn truth_ratio(correct: f64, distractors: &[f64]) -> Result<f64> {
    if distractors.is_empty() {
        return Err(Error::Empty(
            "truth ratio needs at least one distractor".into(),
        ));
    }
    let mean = distractors.iter().sum::<f64>() / distractors.len() as f64;
    Ok(correct / mean)
}

/// `min(r, 1/r)`, folding ratios into (0, 1].
pub fn bounded_ratio(r: f64) -> f64 {
    r.min(1.0 / r)
}

/// How the truth ratio enters model utility.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityRatio {
    /// `max(0, 1 − 1/r)`: grows as the correct answer dominates.
    #[default]
    OneMinusInverse,
    /// `min(r, 1/r)`, the same transform as the KS input.
    Bounded,
}

impl UtilityRatio {
    pub fn apply(self, r: f64) -> f64 {
        match self {
            UtilityRatio::OneMinusInverse => (1.0 - 1.0 / r).max(0.0),
            UtilityRatio::Bounded => bounded_ratio(r),
        }
    }
}

/// A question with its correct answer and distractors, encoded.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub seq: TokenSequence,
    pub distractors: Vec<TokenSequence>,
}

impl EvalItem {
    pub fn from_sample(qa: &QASample, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            seq: encode_sample(qa, vocab)?,
            distractors: qa
                .distractors
                .iter()
                .map(|d| encode_pair(&qa.question, d, vocab, qa.id, qa.split))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRatioSample {
    pub id: u64,
    pub correct: f64,
    pub distractors: Vec<f64>,
    pub ratio: f64,
}

/// Truth ratios of `items`, in input order.
pub fn truth_ratios<M: SequenceScorer + ?Sized>(
    model: &M,
    items: &[EvalItem],
) -> Result<Vec<TruthRatioSample>> {
    let mut seqs: Vec<&TokenSequence> = Vec::new();
    for item in items {
        if item.distractors.is_empty() {
            return Err(Error::Empty(format!(
                "sample {} has no distractors",
                item.seq.sample_id
            )));
        }
        seqs.push(&item.seq);
        seqs.extend(&item.distractors);
    }
    let ids: Vec<&[u32]> = seqs.iter().map(|s| s.ids()).collect();
    let scored = model.score_batch(&ids)?;
    let mut out = Vec::with_capacity(items.len());
    let mut cursor = 0;
    for item in items {
        let correct = normalized_prob_from(&item.seq, &scored[cursor]);
        cursor += 1;
        let distractors: Vec<f64> = item
            .distractors
            .iter()
            .map(|d| {
                let p = normalized_prob_from(d, &scored[cursor]);
                cursor += 1;
                p
            })
            .collect();
        out.push(TruthRatioSample {
            id: item.seq.sample_id,
            correct,
            ratio: truth_ratio(correct, &distractors)?,
            distractors,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("KS test needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::NonFinite("KS sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q((ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d),
    })
}

/// `Q(λ) = 2 Σ_{j≥1} (−1)^{j−1} exp(−2 j² λ²)`, clamped to [0, 1].
///
/// Below λ = 1.18 the alternating series cancels badly, so the equivalent
/// form `1 − (√(2π)/λ) Σ_{j≥1} exp(−(2j−1)² π² / (8λ²))` is summed instead.
/// Both are truncated once a term drops below 1e-10.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut sum = 0.0;
        for j in 1..=1000u64 {
            let odd = (2 * j - 1) as f64;
            let term = (c * odd * odd).exp();
            sum += term;
            if term < 1e-10 {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum
    } else {
        let a = -2.0 * lambda * lambda;
        let mut sum = 0.0;
        let mut sign = 1.0;
        for j in 1..=1000u64 {
            let term = (a * (j * j) as f64).exp();
            sum += sign * term;
            if term < 1e-10 {
                break;
            }
            sign = -sign;
        }
        2.0 * sum
    };
    q.clamp(0.0, 1.0)
}

/// KS test between the bounded forget-set truth ratios of the unlearned and
/// retrained models.
pub fn forget_quality<M: SequenceScorer + ?Sized>(
    unlearned: &M,
    retrained: Option<&dyn SequenceScorer>,
    forget: &[EvalItem],
) -> Result<KsResult> {
    let retrained = retrained.ok_or_else(|| {
        Error::Unavailable("forget quality needs a retrained reference model".into())
    })?;
    let a: Vec<f64> = truth_ratios(unlearned, forget)?
        .iter()
        .map(|s| bounded_ratio(s.ratio))
        .collect();
    let b: Vec<f64> = truth_ratios(retrained, forget)?
        .iter()
        .map(|s| bounded_ratio(s.ratio))
        .collect();
    ks_two_sample(&a, &b)
}

/// Mean greedy-decode Rouge-L F1 of each item, in input order.
pub fn decode_rouge<M: SequenceScorer + ?Sized>(
    model: &M,
    items: &[EvalItem],
    max_len: usize,
) -> Result<Vec<f64>> {
    let prompts: Vec<&[u32]> = items.iter().map(|i| i.seq.question_prefix()).collect();
    let decoded = model.decode_batch(&prompts, max_len)?;
    Ok(items
        .iter()
        .zip(&decoded)
        .map(|(item, hyp)| rouge_l(item.seq.answer_tokens(), hyp).f1)
        .collect())
}

pub fn forget_rouge<M: SequenceScorer + ?Sized>(
    model: &M,
    forget: &[EvalItem],
    max_len: usize,
) -> Result<f64> {
    if forget.is_empty() {
        return Err(Error::Empty("forget set is empty".into()));
    }
    Ok(mean(&decode_rouge(model, forget, max_len)?))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Harmonic mean; 0 when any value is 0.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub rouge: f64,
    pub norm_prob: f64,
    pub truth_ratio: f64,
}

impl SplitMetrics {
    fn components(&self) -> [f64; 3] {
        [self.rouge, self.norm_prob, self.truth_ratio]
    }
}

pub fn split_metrics<M: SequenceScorer + ?Sized>(
    model: &M,
    items: &[EvalItem],
    config: &EvalConfig,
) -> Result<SplitMetrics> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation split is empty".into()));
    }
    let ratios = truth_ratios(model, items)?;
    Ok(SplitMetrics {
        rouge: mean(&decode_rouge(model, items, config.max_decode)?),
        norm_prob: mean(&ratios.iter().map(|r| r.correct).collect::<Vec<_>>()),
        truth_ratio: mean(
            &ratios
                .iter()
                .map(|r| config.utility_ratio.apply(r.ratio))
                .collect::<Vec<_>>(),
        ),
    })
}

/// Harmonic mean of Rouge-L, normalized probability and truth ratio on the
/// retain and general splits.
pub fn model_utility<M: SequenceScorer + ?Sized>(
    model: &M,
    retain: &[EvalItem],
    general: &[EvalItem],
    config: &EvalConfig,
) -> Result<f64> {
    let r = split_metrics(model, retain, config)?;
    let g = split_metrics(model, general, config)?;
    Ok(utility_from(&r, &g))
}

fn utility_from(retain: &SplitMetrics, general: &SplitMetrics) -> f64 {
    let mut c = retain.components().to_vec();
    c.extend(general.components());
    harmonic_mean(&c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Retain questions used for utility, chosen at an even stride.
    pub max_retain: usize,
    pub max_general: usize,
    pub max_decode: usize,
    pub utility_ratio: UtilityRatio,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_retain: 100,
            max_general: 100,
            max_decode: 24,
            utility_ratio: UtilityRatio::OneMinusInverse,
        }
    }
}

/// Encoded evaluation splits.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalData {
    pub forget: Vec<EvalItem>,
    pub retain: Vec<EvalItem>,
    pub general: Vec<EvalItem>,
}

fn stride_select<T: Clone>(items: Vec<T>, max: usize) -> Vec<T> {
    if max == 0 || items.len() <= max {
        return items;
    }
    let n = items.len();
    (0..max).map(|i| items[i * n / max].clone()).collect()
}

impl EvalData {
    pub fn from_samples(samples: &[QASample], vocab: &Vocab, config: &EvalConfig) -> Result<Self> {
        let encode = |split: Split| -> Result<Vec<EvalItem>> {
            samples
                .iter()
                .filter(|s| s.split == split)
                .map(|s| EvalItem::from_sample(s, vocab))
                .collect()
        };
        Ok(Self {
            forget: encode(Split::Forget)?,
            retain: stride_select(encode(Split::Retain)?, config.max_retain),
            general: stride_select(encode(Split::General)?, config.max_general),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub forget_quality: Option<f64>,
    pub ks_statistic: Option<f64>,
    pub model_utility: f64,
    pub forget_rouge: f64,
    pub retain: SplitMetrics,
    pub general: SplitMetrics,
    pub forget_truth_ratios: Vec<f64>,
    pub retrained_truth_ratios: Option<Vec<f64>>,
}

/// Headline numbers of an [`EvalReport`], one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalHeadline {
    pub forget_quality: Option<f64>,
    pub ks_statistic: Option<f64>,
    pub model_utility: f64,
    pub forget_rouge: f64,
    pub retain_rouge: f64,
    pub retain_norm_prob: f64,
    pub retain_truth_ratio: f64,
    pub general_rouge: f64,
    pub general_norm_prob: f64,
    pub general_truth_ratio: f64,
}

impl EvalReport {
    pub fn headline(&self) -> EvalHeadline {
        EvalHeadline {
            forget_quality: self.forget_quality,
            ks_statistic: self.ks_statistic,
            model_utility: self.model_utility,
            forget_rouge: self.forget_rouge,
            retain_rouge: self.retain.rouge,
            retain_norm_prob: self.retain.norm_prob,
            retain_truth_ratio: self.retain.truth_ratio,
            general_rouge: self.general.rouge,
            general_norm_prob: self.general.norm_prob,
            general_truth_ratio: self.general.truth_ratio,
        }
    }
}

/// Full metric suite. Forget quality is left empty without a retrained model.
pub fn evaluate<M: SequenceScorer + ?Sized>(
    model: &M,
    retrained: Option<&dyn SequenceScorer>,
    data: &EvalData,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let forget_ratios = truth_ratios(model, &data.forget)?;
    let forget_truth_ratios: Vec<f64> = forget_ratios
        .iter()
        .map(|s| bounded_ratio(s.ratio))
        .collect();
    let retrained_truth_ratios = match retrained {
        Some(rt) => Some(
            truth_ratios(rt, &data.forget)?
                .iter()
                .map(|s| bounded_ratio(s.ratio))
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let ks = match &retrained_truth_ratios {
        Some(b) => Some(ks_two_sample(&forget_truth_ratios, b)?),
        None => None,
    };
    let retain = split_metrics(model, &data.retain, config)?;
    let general = split_metrics(model, &data.general, config)?;
    Ok(EvalReport {
        forget_quality: ks.map(|k| k.p_value),
        ks_statistic: ks.map(|k| k.statistic),
        model_utility: utility_from(&retain, &general),
        forget_rouge: forget_rouge(model, &data.forget, config.max_decode)?,
        retain,
        general,
        forget_truth_ratios,
        retrained_truth_ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        let a = ["a", "b", "c", "d"];
        assert_eq!(rouge_l(&a, &a).f1, 1.0);
        assert_eq!(rouge_l(&a, &["x", "y"]).f1, 0.0);
        let r = rouge_l(&a, &["a", "c", "d"]);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.75);
        assert!((r.f1 - 6.0 / 7.0).abs() < 1e-15);
        let empty: [&str; 0] = [];
        assert_eq!(rouge_l(&a, &empty).f1, 0.0);
        assert_eq!(rouge_l(&empty, &empty).f1, 0.0);
    }

    #[test]
    fn truth_ratio_examples() {
        assert!((truth_ratio(0.5, &[0.1, 0.2]).unwrap() - 10.0 / 3.0).abs() < 1e-12);
        assert_eq!(truth_ratio(0.3, &[0.3, 0.3]).unwrap(), 1.0);
        assert_eq!(bounded_ratio(4.0), 0.25);
        assert_eq!(bounded_ratio(0.25), 0.25);
        assert!(truth_ratio(0.5, &[]).is_err());
        assert_eq!(UtilityRatio::OneMinusInverse.apply(4.0), 0.75);
        assert_eq!(UtilityRatio::OneMinusInverse.apply(0.5), 0.0);
    }

    #[test]
    fn ks_examples() {
        let r = ks_two_sample(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        let r = ks_two_sample(&[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 0.05);
        let r = ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.5]).unwrap();
        assert_eq!(r.statistic, 0.5);
        assert!(ks_two_sample(&[], &[1.0]).is_err());
    }

    #[test]
    fn ks_p_value_reference() {
        // λ = 1.0 gives the classical Q(1) = 0.26999967...
        assert!((kolmogorov_q(1.0) - 0.269_999_671_677_202_6).abs() < 1e-9);
        assert_eq!(kolmogorov_q(0.0), 1.0);
        assert!(kolmogorov_q(1e-3) > 0.999_999);
        // both branches agree at the switch point
        let a = -2.0f64 * 1.18 * 1.18;
        let direct: f64 = 2.0
            * (1..50)
                .map(|j: i32| (-1f64).powi(j - 1) * (a * (j * j) as f64).exp())
                .sum::<f64>();
        assert!((kolmogorov_q(1.18 - 1e-12) - direct).abs() < 1e-12);
        assert!((kolmogorov_q(0.5) - 0.963_945_243_664_875_1).abs() < 1e-12);
        let mut prev = 1.0;
        for i in 1..400 {
            let q = kolmogorov_q(i as f64 * 0.01);
            assert!(q <= prev);
            prev = q;
        }
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_mean(&[0.3; 6]) - 0.3).abs() < 1e-15);
        assert_eq!(harmonic_mean(&[0.0, 1.0, 1.0]), 0.0);
        let h = harmonic_mean(&[0.5, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!((h - 6.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn normalized_prob_examples() {
        use crate::corpus::{BOS, EOS, SEP};
        let seq = TokenSequence::new(0, Split::Retain, vec![BOS, 9, SEP, 10, 11, EOS]).unwrap();
        let lp = [-9.0, -9.0, 0.1f64.ln(), 0.2f64.ln(), 0.4f64.ln()];
        assert!((normalized_prob_from(&seq, &lp) - 0.2).abs() < 1e-12);
        let seq = TokenSequence::new(0, Split::Retain, vec![BOS, 9, SEP, 10, EOS]).unwrap();
        assert!(
            (normalized_prob_from(&seq, &[-1.0, -1.0, 0.5f64.ln(), 0.5f64.ln()]) - 0.5).abs()
                < 1e-12
        );
    }

    #[test]
    fn stride_selection_is_even() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(stride_select(v.clone(), 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(stride_select(v.clone(), 20), v);
    }
}
