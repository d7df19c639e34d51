//! Token-level unlearning laboratory.
//!
//! The crate trains a small decoder-only transformer on a synthetic
//! question-answer corpus about fictitious authors, locates the prefix tokens
//! that trigger memorized answers, removes a forget split with alternating
//! ascent/KL updates, and measures the result against a model retrained
//! without that split.
//!
//! Module map:
//! - [`tensor`], [`autodiff`], [`grad`]: dense tensors and reverse-mode AD
//! - [`corpus`]: tokenizer and synthetic corpus generator
//! - [`model`], [`optim`], [`train`]: the language model and its fine-tuning
//! - [`delta`]: delta scores and target-token selection
//! - [`unlearn`]: the unlearning loop
//! - [`eval`]: Rouge-L, truth ratio, KS forget quality, model utility

pub mod autodiff;
pub mod corpus;
pub mod delta;
pub mod error;
pub mod eval;
pub mod grad;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod unlearn;

pub use autodiff::{grad_check, Graph, NodeId};
pub use corpus::{
    build_vocab, encode_pair, encode_sample, generate_corpus, tokenize, AuthorProfile, Corpus,
    CorpusConfig, QASample, Split, TokenSequence, Vocab,
};
pub use delta::{
    annotate_forget_set, annotations_from_jsonl, annotations_to_jsonl, delta_scores, pivot,
    select_targets, DeltaAnnotation, DeltaConfig, Eligibility,
};
pub use error::{Error, Result};
pub use eval::{
    evaluate, forget_quality, forget_rouge, ks_two_sample, model_utility, normalized_answer_prob,
    rouge_l, truth_ratio, EvalConfig, EvalData, EvalHeadline, EvalItem, EvalReport, KsResult,
    RougeScore, SplitMetrics, TruthRatioSample, UtilityRatio,
};
pub use grad::GradientVector;
pub use model::{forward_tensors, init_model, ModelConfig, ModelParams, SequenceScorer};
pub use optim::{Adam, Direction};
pub use tensor::{DType, Scalar, Tensor};
pub use train::{train, TrainConfig, TrainOutcome};
pub use unlearn::{
    orthogonalize, run_unlearning, Alternation, EpochEval, ProjectionAudit, TrajectoryRow,
    UnlearnConfig, UnlearnOutcome, UnlearnState,
};
