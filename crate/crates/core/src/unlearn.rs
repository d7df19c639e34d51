//! Direct token optimization: ascent on target tokens, KL retention on the
//! rest, with optional gradient orthogonalization.
//!
//! Sign convention: `g_u` is the gradient of the target tokens' negative
//! log-likelihood, so the ascent sub-step moves along `+g_u` and lowers the
//! probability of the targets. `g_r` is the gradient of the KL loss and the
//! retention sub-step moves along `−g_r`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::TokenSequence;
use crate::delta::{annotate_forget_set, DeltaAnnotation, DeltaConfig, Eligibility};
use crate::error::{Error, Result};
use crate::eval::{evaluate, forget_rouge, EvalConfig, EvalData, EvalItem, EvalReport};
use crate::grad::GradientVector;
use crate::model::{ModelParams, SequenceScorer};
use crate::optim::{sgd_step, Adam, Direction};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternation {
    /// Ascent then retention within every batch.
    #[default]
    PerBatch,
    /// A full ascent pass over the epoch, then a full retention pass.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub k: f64,
    pub suffix_ratio: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub use_kl: bool,
    pub use_ortho: bool,
    pub clip: f64,
    pub seed: u64,
    pub eligibility: Eligibility,
    pub alternation: Alternation,
    pub rescore_every_epoch: bool,
    pub raw_sgd: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            k: 0.2,
            suffix_ratio: 0.25,
            lr: 1e-4,
            batch_size: 8,
            epochs: 10,
            use_kl: true,
            use_ortho: true,
            clip: 1.0,
            seed: 7,
            eligibility: Eligibility::AllPrefix,
            alternation: Alternation::PerBatch,
            rescore_every_epoch: false,
            raw_sgd: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        self.delta_config().validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn delta_config(&self) -> DeltaConfig {
        DeltaConfig {
            k: self.k,
            suffix_ratio: self.suffix_ratio,
            eligibility: self.eligibility,
            seed: self.seed,
        }
    }
}

/// `g_a − (⟨g_a, g_b⟩ / ⟨g_b, g_b⟩) g_b`, or `g_a` when `g_b` is zero.
pub fn orthogonalize<S: Scalar>(
    g_a: &GradientVector<S>,
    g_b: &GradientVector<S>,
) -> Result<GradientVector<S>> {
    let ab = g_a.dot(g_b)?;
    let bb = g_b.norm_sq();
    let mut out = g_a.clone();
    if bb > 0.0 {
        out.axpy(S::of(-ab / bb), g_b)?;
    }
    Ok(out)
}

/// Numerical check of one applied projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionAudit {
    pub epoch: usize,
    pub batch: usize,
    /// `|⟨g_u', g_r⟩| / (‖g_u'‖‖g_r‖)`, 0 when either norm is 0.
    pub orthogonality: f64,
    /// `|‖g_u‖² − ‖g_u'‖² − (⟨g_u, g_r⟩/‖g_r‖)²| / ‖g_u‖²`.
    pub pythagoras: f64,
    pub cosine: f64,
}

fn audit_projection<S: Scalar>(
    g_u: &GradientVector<S>,
    g_r: &GradientVector<S>,
    projected: &GradientVector<S>,
    epoch: usize,
    batch: usize,
) -> Result<ProjectionAudit> {
    let (nu, nr, np) = (g_u.norm(), g_r.norm(), projected.norm());
    let ur = g_u.dot(g_r)?;
    let orthogonality = if np > 0.0 && nr > 0.0 {
        projected.dot(g_r)?.abs() / (np * nr)
    } else {
        0.0
    };
    let parallel = if nr > 0.0 { ur / nr } else { 0.0 };
    let pythagoras = if nu > 0.0 {
        (nu * nu - np * np - parallel * parallel).abs() / (nu * nu)
    } else {
        0.0
    };
    Ok(ProjectionAudit {
        epoch,
        batch,
        orthogonality,
        pythagoras,
        cosine: cosine(ur, nu, nr),
    })
}

fn cosine(dot: f64, na: f64, nb: f64) -> f64 {
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

/// Loss weights selecting the target tokens of each sequence, `[rows, V]`.
pub fn target_weights<S: Scalar>(
    batch: &[&TokenSequence],
    annotations: &[&DeltaAnnotation],
    segments: &[std::ops::Range<usize>],
    vocab_size: usize,
    weight: S,
) -> Result<Tensor<S>> {
    let rows = segments.last().map_or(0, |s| s.end);
    let mut w = vec![S::zero(); rows * vocab_size];
    for ((seq, ann), seg) in batch.iter().zip(annotations).zip(segments) {
        for &t in &ann.targets {
            let row = seg.start + t - 1;
            w[row * vocab_size + seq.ids()[t] as usize] = weight;
        }
    }
    Tensor::new(vec![rows, vocab_size], w)
}

fn check_pairing(batch: &[&TokenSequence], annotations: &[&DeltaAnnotation]) -> Result<()> {
    if batch.len() != annotations.len() {
        return Err(Error::Contract("every sequence needs an annotation".into()));
    }
    for (s, a) in batch.iter().zip(annotations) {
        if s.sample_id != a.id {
            return Err(Error::Contract(format!(
                "annotation {} paired with sequence {}",
                a.id, s.sample_id
            )));
        }
        if a.targets.is_empty() {
            return Err(Error::Empty(format!(
                "sequence {} has no target tokens",
                a.id
            )));
        }
        if a.targets.iter().any(|&t| t == 0 || t >= s.len()) {
            return Err(Error::Contract(format!("target outside sequence {}", a.id)));
        }
    }
    Ok(())
}

/// `Σ_batch Σ_{t ∈ targets} log p(x_t | x_<t)` and its gradient.
pub fn unlearn_loss_and_grad<S: Scalar>(
    params: &ModelParams<S>,
    batch: &[&TokenSequence],
    annotations: &[&DeltaAnnotation],
) -> Result<(f64, GradientVector<S>)> {
    check_pairing(batch, annotations)?;
    let ids: Vec<&[u32]> = batch.iter().map(|s| s.ids()).collect();
    let mut g = Graph::new();
    let fwd = params.forward(&mut g, &ids)?;
    let w = target_weights(
        batch,
        annotations,
        &fwd.segments,
        params.config().vocab_size,
        S::one(),
    )?;
    let loss = g.weighted_sum(fwd.log_probs, w)?;
    let value = g.value(loss).item()?.as_f64();
    Ok((value, g.backward(loss)?))
}

/// `Σ_batch Σ_{t ∈ non-targets} KL(f_θo(x_<t) ‖ f_θu(x_<t))` and its gradient.
///
/// `reference[i]` holds the original model's `[len, V]` log-distributions for
/// `batch[i]`.
pub fn kl_retain_loss_and_grad<S: Scalar>(
    params: &ModelParams<S>,
    reference: &[&Tensor<S>],
    batch: &[&TokenSequence],
    annotations: &[&DeltaAnnotation],
) -> Result<(f64, GradientVector<S>)> {
    check_pairing(batch, annotations)?;
    let v = params.config().vocab_size;
    let ids: Vec<&[u32]> = batch.iter().map(|s| s.ids()).collect();
    let mut g = Graph::new();
    let fwd = params.forward(&mut g, &ids)?;
    let rows = fwd.rows();
    let mut log_p = vec![S::zero(); rows * v];
    let mut weights = vec![S::zero(); rows];
    for (i, (seq, ann)) in batch.iter().zip(annotations).enumerate() {
        let r = reference[i];
        if r.shape() != [seq.len(), v] {
            return Err(Error::Shape(format!(
                "reference distributions for sequence {} have shape {:?}",
                seq.sample_id,
                r.shape()
            )));
        }
        let seg = &fwd.segments[i];
        log_p[seg.start * v..seg.end * v].copy_from_slice(r.data());
        for t in ann.non_targets(seq) {
            weights[fwd.row(i, t)] = S::one();
        }
    }
    let loss = g.kl_rows(fwd.log_probs, Tensor::new(vec![rows, v], log_p)?, weights)?;
    let value = g.value(loss).item()?.as_f64();
    Ok((value, g.backward(loss)?))
}

/// One row of the unlearning trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    /// Mean target-token NLL seen during the epoch (at θ_o for epoch 0).
    pub unlearn_loss: f64,
    /// Mean per-position KL seen during the epoch.
    pub kl_loss: f64,
    /// Mean cosine between `g_u` and `g_r` before projection.
    pub grad_cosine: Option<f64>,
    pub forget_rouge: f64,
    pub forget_quality: Option<f64>,
    pub model_utility: Option<f64>,
}

/// Evaluation performed after every epoch.
pub struct EpochEval<'e> {
    pub data: &'e EvalData,
    pub retrained: Option<&'e dyn SequenceScorer>,
    pub config: EvalConfig,
}

/// Mutable state of a run. The original model is only ever borrowed.
pub struct UnlearnState<'o, S: Scalar = f64> {
    pub params: ModelParams<S>,
    original: &'o ModelParams<S>,
    ascent: Adam<S>,
    retain: Adam<S>,
    pub annotations: Vec<DeltaAnnotation>,
    reference: Vec<Tensor<S>>,
    pub epoch: usize,
    pub audits: Vec<ProjectionAudit>,
    rng: ChaCha8Rng,
}

#[derive(Default)]
struct EpochStats {
    target_nll: f64,
    targets: usize,
    kl: f64,
    kl_positions: usize,
    cosine_sum: f64,
    cosines: usize,
}

impl<'o, S: Scalar> UnlearnState<'o, S> {
    /// Annotates `forget` on the original model and caches its distributions.
    pub fn new(
        original: &'o ModelParams<S>,
        forget: &[TokenSequence],
        config: &UnlearnConfig,
    ) -> Result<Self> {
        config.validate()?;
        if forget.is_empty() {
            return Err(Error::Empty("forget set is empty".into()));
        }
        let annotations = annotate_forget_set(original, forget, &config.delta_config())?;
        let mut reference = Vec::with_capacity(forget.len());
        for chunk in forget.chunks(32) {
            let ids: Vec<&[u32]> = chunk.iter().map(TokenSequence::ids).collect();
            reference.extend(original.log_distributions(&ids)?);
        }
        Ok(Self {
            params: original.clone(),
            original,
            ascent: Adam::new(config.lr, config.beta1, config.beta2, config.eps)?,
            retain: Adam::new(config.lr, config.beta1, config.beta2, config.eps)?,
            annotations,
            reference,
            epoch: 0,
            audits: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn original(&self) -> &ModelParams<S> {
        self.original
    }

    fn apply(
        &mut self,
        grad: &mut GradientVector<S>,
        config: &UnlearnConfig,
        direction: Direction,
        ascent: bool,
    ) -> Result<()> {
        grad.clip_norm(config.clip);
        if config.raw_sgd {
            sgd_step(self.params.tensors_mut(), grad, config.lr, direction)?;
        } else if ascent {
            self.ascent
                .step(self.params.tensors_mut(), grad, direction)?;
        } else {
            self.retain
                .step(self.params.tensors_mut(), grad, direction)?;
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters during unlearning epoch {}",
                self.epoch
            )));
        }
        Ok(())
    }

    fn batch_refs<'b>(
        &'b self,
        forget: &'b [TokenSequence],
        idx: &[usize],
    ) -> (
        Vec<&'b TokenSequence>,
        Vec<&'b DeltaAnnotation>,
        Vec<&'b Tensor<S>>,
    ) {
        (
            idx.iter().map(|&i| &forget[i]).collect(),
            idx.iter().map(|&i| &self.annotations[i]).collect(),
            idx.iter().map(|&i| &self.reference[i]).collect(),
        )
    }

    /// Ascent sub-step on one batch, projecting against the KL gradient at
    /// the same parameters when configured.
    fn ascent_step(
        &mut self,
        forget: &[TokenSequence],
        idx: &[usize],
        config: &UnlearnConfig,
        batch_no: usize,
        stats: &mut EpochStats,
    ) -> Result<()> {
        let (batch, anns, refs) = self.batch_refs(forget, idx);
        let (log_lik, mut g_u) = unlearn_loss_and_grad(&self.params, &batch, &anns)?;
        // gradient of the targets' NLL
        g_u.scale(-S::one());
        stats.target_nll -= log_lik;
        stats.targets += anns.iter().map(|a| a.targets.len()).sum::<usize>();
        if config.use_kl {
            let (_, g_r) = kl_retain_loss_and_grad(&self.params, &refs, &batch, &anns)?;
            let dot = g_u.dot(&g_r)?;
            stats.cosine_sum += cosine(dot, g_u.norm(), g_r.norm());
            stats.cosines += 1;
            if config.use_ortho {
                let projected = orthogonalize(&g_u, &g_r)?;
                let audit = audit_projection(&g_u, &g_r, &projected, self.epoch, batch_no)?;
                self.audits.push(audit);
                g_u = projected;
            }
        }
        self.apply(&mut g_u, config, Direction::Ascend, true)
    }

    fn retain_step(
        &mut self,
        forget: &[TokenSequence],
        idx: &[usize],
        config: &UnlearnConfig,
        stats: &mut EpochStats,
    ) -> Result<()> {
        let (batch, anns, refs) = self.batch_refs(forget, idx);
        let (kl, mut g_r) = kl_retain_loss_and_grad(&self.params, &refs, &batch, &anns)?;
        stats.kl += kl;
        stats.kl_positions += batch
            .iter()
            .zip(&anns)
            .map(|(s, a)| s.predicted_len() - a.targets.len())
            .sum::<usize>();
        self.apply(&mut g_r, config, Direction::Descend, false)
    }

    /// One pass over the forget set in seeded shuffled batches.
    pub fn epoch(
        &mut self,
        forget: &[TokenSequence],
        config: &UnlearnConfig,
    ) -> Result<TrajectoryRow> {
        if forget.len() != self.annotations.len() {
            return Err(Error::Contract(
                "forget set changed during unlearning".into(),
            ));
        }
        self.epoch += 1;
        if config.rescore_every_epoch && self.epoch > 1 {
            self.annotations = annotate_forget_set(&self.params, forget, &config.delta_config())?;
        }
        let mut order: Vec<usize> = (0..forget.len()).collect();
        order.shuffle(&mut self.rng);
        let batches: Vec<Vec<usize>> = order
            .chunks(config.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        let mut stats = EpochStats::default();
        match config.alternation {
            Alternation::PerBatch => {
                for (b, idx) in batches.iter().enumerate() {
                    self.ascent_step(forget, idx, config, b, &mut stats)?;
                    if config.use_kl {
                        self.retain_step(forget, idx, config, &mut stats)?;
                    }
                }
            }
            Alternation::PerEpoch => {
                for (b, idx) in batches.iter().enumerate() {
                    self.ascent_step(forget, idx, config, b, &mut stats)?;
                }
                if config.use_kl {
                    for idx in &batches {
                        self.retain_step(forget, idx, config, &mut stats)?;
                    }
                }
            }
        }
        Ok(TrajectoryRow {
            epoch: self.epoch,
            unlearn_loss: stats.target_nll / stats.targets.max(1) as f64,
            kl_loss: stats.kl / stats.kl_positions.max(1) as f64,
            grad_cosine: (stats.cosines > 0).then(|| stats.cosine_sum / stats.cosines as f64),
            forget_rouge: f64::NAN,
            forget_quality: None,
            model_utility: None,
        })
    }

    /// Mean target-token NLL of the current parameters.
    pub fn target_nll(&self, forget: &[TokenSequence]) -> Result<f64> {
        let ids: Vec<&[u32]> = forget.iter().map(TokenSequence::ids).collect();
        let scores = self.params.score_batch(&ids)?;
        let (mut total, mut n) = (0.0, 0usize);
        for (lp, a) in scores.iter().zip(&self.annotations) {
            for &t in &a.targets {
                total -= lp[t - 1];
                n += 1;
            }
        }
        Ok(total / n.max(1) as f64)
    }
}

pub struct UnlearnOutcome<S: Scalar = f64> {
    pub params: ModelParams<S>,
    pub annotations: Vec<DeltaAnnotation>,
    pub trajectory: Vec<TrajectoryRow>,
    pub audits: Vec<ProjectionAudit>,
    /// Per-epoch evaluation reports (epoch 0 first) when evaluation was requested.
    pub reports: Vec<EvalReport>,
}

/// Annotates the forget set on `original`, runs `config.epochs` epochs and
/// records a trajectory row per epoch, epoch 0 being the original model.
pub fn run_unlearning<S: Scalar>(
    original: &ModelParams<S>,
    forget: &[TokenSequence],
    config: &UnlearnConfig,
    eval: Option<&EpochEval<'_>>,
    max_decode: usize,
) -> Result<UnlearnOutcome<S>> {
    let mut state = UnlearnState::new(original, forget, config)?;
    let forget_items: Vec<EvalItem> = forget
        .iter()
        .map(|s| EvalItem {
            seq: s.clone(),
            distractors: Vec::new(),
        })
        .collect();
    let mut reports = Vec::new();
    let mut measure = |state: &UnlearnState<'_, S>, row: &mut TrajectoryRow| -> Result<()> {
        match eval {
            Some(e) => {
                let report = evaluate(&state.params, e.retrained, e.data, &e.config)?;
                row.forget_rouge = report.forget_rouge;
                row.forget_quality = report.forget_quality;
                row.model_utility = Some(report.model_utility);
                reports.push(report);
            }
            None => row.forget_rouge = forget_rouge(&state.params, &forget_items, max_decode)?,
        }
        Ok(())
    };
    let mut first = TrajectoryRow {
        epoch: 0,
        unlearn_loss: state.target_nll(forget)?,
        kl_loss: 0.0,
        grad_cosine: None,
        forget_rouge: f64::NAN,
        forget_quality: None,
        model_utility: None,
    };
    measure(&state, &mut first)?;
    let mut trajectory = vec![first];
    for _ in 0..config.epochs {
        let mut row = state.epoch(forget, config)?;
        measure(&state, &mut row)?;
        trajectory.push(row);
    }
    Ok(UnlearnOutcome {
        params: state.params,
        annotations: state.annotations,
        trajectory,
        audits: state.audits,
        reports,
    })
}
