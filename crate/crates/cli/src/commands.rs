//! Subcommands of the `dto` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dto_core::delta::{annotations_to_jsonl, candidates};
use dto_core::eval::EvalData;
use dto_core::unlearn::EpochEval;
use dto_core::{
    annotate_forget_set, encode_sample, evaluate, generate_corpus, init_model, run_unlearning,
    train, Corpus, DeltaAnnotation, Eligibility, ModelParams, Split, TokenSequence, Vocab,
};

use crate::checkpoint::{load_for_vocab, save_checkpoint, vocab_hash, CheckpointMeta, Stage};
use crate::config::RunConfig;
use crate::report::{
    discover_runs, sweep_report, trajectory_csv, write_csv, ANNOTATIONS_FILE, AUDIT_FILE,
    CONFIG_FILE, TRAJECTORY_FILE,
};

#[derive(Debug, Parser)]
#[command(name = "dto", version, about = "Token-level unlearning pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic author corpus.
    GenCorpus(GenCorpusArgs),
    /// Fine-tune a model on the corpus (or on retain + general only).
    Train(TrainArgs),
    /// Unlearn the forget split from a fine-tuned checkpoint.
    Unlearn(UnlearnArgs),
    /// Compute delta scores and target tokens for the forget split.
    Delta(DeltaArgs),
    /// Evaluate a checkpoint against the retrained reference.
    Eval(EvalArgs),
    /// Aggregate unlearning runs into a sweep table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub authors: Option<usize>,
    #[arg(long)]
    pub qa_per_author: Option<usize>,
    #[arg(long)]
    pub general: Option<usize>,
    #[arg(long)]
    pub forget_frac: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on retain + general only, producing the retrained reference.
    #[arg(long)]
    pub exclude_forget: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct UnlearnArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub suffix_ratio: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop the KL retention step.
    #[arg(long)]
    pub no_kl: bool,
    /// Skip gradient orthogonalization.
    #[arg(long)]
    pub no_ortho: bool,
    /// Only answer-span tokens may become targets.
    #[arg(long)]
    pub answer_only: bool,
    #[arg(long)]
    pub retrained: Option<PathBuf>,
    /// Output checkpoint; run artifacts go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DeltaArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub suffix_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub answer_only: bool,
    /// Annotation JSON lines.
    #[arg(long)]
    pub out: PathBuf,
    /// Token/score table; printed to stdout when omitted.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub retrained: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Full JSON report; the one-row CSV goes next to it with a .csv extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 pipeline failure, 2 usage error.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_threads();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Sizes the global rayon pool from `DTO_THREADS` (default 1). Results do not
/// depend on the thread count; this only bounds CPU use.
fn init_threads() {
    let n = std::env::var("DTO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train_cmd(a),
        Command::Unlearn(a) => unlearn_cmd(a),
        Command::Delta(a) => delta_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut rc = RunConfig::load_or_default(a.config.as_deref())?;
    let c = &mut rc.corpus;
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.authors {
        c.n_authors = v;
    }
    if let Some(v) = a.qa_per_author {
        c.qa_per_author = v;
    }
    if let Some(v) = a.general {
        c.n_general = v;
    }
    if let Some(v) = a.forget_frac {
        c.forget_fraction = v;
    }
    rc.validate()?;
    let corpus = generate_corpus(&rc.corpus)?;
    let vocab = corpus.save(&a.out)?;
    eprintln!(
        "wrote {} samples ({} forget), {} tokens in vocabulary, to {}",
        corpus.samples.len(),
        corpus.split(Split::Forget).count(),
        vocab.len(),
        a.out.display()
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<(Corpus, Vocab, Vec<TokenSequence>)> {
    let (corpus, vocab) =
        Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))?;
    let seqs = corpus
        .samples
        .iter()
        .map(|s| encode_sample(s, &vocab))
        .collect::<dto_core::Result<Vec<_>>>()?;
    Ok((corpus, vocab, seqs))
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<(ModelParams, CheckpointMeta)> {
    load_for_vocab(path, vocab).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut rc = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        rc.train.epochs = v;
    }
    if let Some(v) = a.lr {
        rc.train.lr = v;
    }
    if let Some(v) = a.seed {
        rc.train.seed = v;
    }
    rc.validate()?;
    let (corpus, vocab, seqs) = load_corpus(&a.corpus)?;
    let data: Vec<TokenSequence> = seqs
        .into_iter()
        .filter(|s| !(a.exclude_forget && s.split == Split::Forget))
        .collect();
    let model = rc.model_for(vocab.len())?;
    let mut params: ModelParams = init_model(&model)?;
    let outcome = train(&mut params, &data, &rc.train)?;
    eprintln!(
        "trained on {} sequences for {} epochs: loss {:.4} -> {:.4}",
        data.len(),
        rc.train.epochs,
        outcome.epoch_losses[0],
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    let meta = CheckpointMeta {
        model,
        vocab_sha256: vocab_hash(&vocab),
        corpus_seed: corpus.config.seed,
        stage: if a.exclude_forget {
            Stage::Retrained
        } else {
            Stage::Finetuned
        },
    };
    ensure_parent(&a.out)?;
    save_checkpoint(&params, &meta, &a.out)?;
    Ok(())
}

fn forget_split(seqs: &[TokenSequence]) -> Result<Vec<TokenSequence>> {
    let forget: Vec<TokenSequence> = seqs
        .iter()
        .filter(|s| s.split == Split::Forget)
        .cloned()
        .collect();
    if forget.is_empty() {
        bail!("corpus has no forget samples");
    }
    Ok(forget)
}

fn unlearn_cmd(a: UnlearnArgs) -> Result<()> {
    let mut rc = RunConfig::load_or_default(a.config.as_deref())?;
    let u = &mut rc.unlearn;
    if let Some(v) = a.k {
        u.k = v;
    }
    if let Some(v) = a.suffix_ratio {
        u.suffix_ratio = v;
    }
    if let Some(v) = a.epochs {
        u.epochs = v;
    }
    if let Some(v) = a.lr {
        u.lr = v;
    }
    if let Some(v) = a.seed {
        u.seed = v;
    }
    if a.no_kl {
        u.use_kl = false;
    }
    if a.no_ortho {
        u.use_ortho = false;
    }
    if a.answer_only {
        u.eligibility = Eligibility::AnswerSpanOnly;
    }
    let (corpus, vocab, seqs) = load_corpus(&a.corpus)?;
    rc.corpus = corpus.config.clone();
    rc.validate()?;
    let (original, meta) = load_model(&a.ckpt, &vocab)?;
    rc.model = meta.model.clone();
    let retrained = match &a.retrained {
        Some(p) => Some(load_model(p, &vocab)?.0),
        None => None,
    };
    let forget = forget_split(&seqs)?;
    let data = EvalData::from_samples(&corpus.samples, &vocab, &rc.eval)?;
    let epoch_eval = EpochEval {
        data: &data,
        retrained: retrained.as_ref().map(|r| r as &dyn dto_core::SequenceScorer),
        config: rc.eval.clone(),
    };
    let outcome = run_unlearning(
        &original,
        &forget,
        &rc.unlearn,
        Some(&epoch_eval),
        rc.eval.max_decode,
    )?;

    ensure_parent(&a.out)?;
    let run_dir = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let out_meta = CheckpointMeta {
        stage: Stage::Unlearned,
        ..meta
    };
    save_checkpoint(&outcome.params, &out_meta, &a.out)?;
    fs::write(run_dir.join(TRAJECTORY_FILE), trajectory_csv(&outcome.trajectory)?)?;
    fs::write(run_dir.join(CONFIG_FILE), rc.to_json()?)?;
    fs::write(
        run_dir.join(ANNOTATIONS_FILE),
        annotations_to_jsonl(&outcome.annotations)?,
    )?;
    write_csv(&run_dir.join(AUDIT_FILE), &outcome.audits)?;
    if let Some(last) = outcome.trajectory.last() {
        eprintln!(
            "epoch {}: forget rouge {:.4}, forget quality {}, utility {}",
            last.epoch,
            last.forget_rouge,
            fmt_opt(last.forget_quality),
            fmt_opt(last.model_utility)
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn delta_cmd(a: DeltaArgs) -> Result<()> {
    let mut rc = RunConfig::load_or_default(a.config.as_deref())?;
    let u = &mut rc.unlearn;
    if let Some(v) = a.k {
        u.k = v;
    }
    if let Some(v) = a.suffix_ratio {
        u.suffix_ratio = v;
    }
    if let Some(v) = a.seed {
        u.seed = v;
    }
    if a.answer_only {
        u.eligibility = Eligibility::AnswerSpanOnly;
    }
    rc.validate()?;
    let (_, vocab, seqs) = load_corpus(&a.corpus)?;
    let (model, _) = load_model(&a.ckpt, &vocab)?;
    let forget = forget_split(&seqs)?;
    let dc = rc.unlearn.delta_config();
    let anns = annotate_forget_set(&model, &forget, &dc)?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, annotations_to_jsonl(&anns)?)?;
    let table = score_table(&forget, &anns, &vocab, dc.eligibility);
    match &a.table {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, table)?;
        }
        None => print!("{table}"),
    }
    Ok(())
}

/// Human-readable per-token delta scores, targets marked with `*`.
pub fn score_table(
    seqs: &[TokenSequence],
    anns: &[DeltaAnnotation],
    vocab: &Vocab,
    eligibility: Eligibility,
) -> String {
    let mut out = String::new();
    for (seq, ann) in seqs.iter().zip(anns) {
        let eligible = candidates(seq, ann.pivot, eligibility);
        let _ = writeln!(out, "sample {} (pivot {})", ann.id, ann.pivot);
        for r in 1..=ann.pivot {
            let token = vocab.token(seq.ids()[r]).unwrap_or("<unk>");
            let mark = if ann.is_target(r) { "*" } else { " " };
            let score = if eligible.contains(&r) {
                format!("{:10.4}", ann.scores[r - 1])
            } else {
                format!("{:>10}", "-")
            };
            let _ = writeln!(out, "  {mark} {r:3} {token:<16} {score}");
        }
    }
    out
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let rc = RunConfig::load_or_default(a.config.as_deref())?;
    let (corpus, vocab, _) = load_corpus(&a.corpus)?;
    let (model, _) = load_model(&a.ckpt, &vocab)?;
    let retrained = match &a.retrained {
        Some(p) => load_model(p, &vocab)?.0,
        None => bail!(dto_core::Error::Unavailable(
            "forget quality needs a retrained checkpoint (--retrained)".into()
        )),
    };
    let data = EvalData::from_samples(&corpus.samples, &vocab, &rc.eval)?;
    let report = evaluate(&model, Some(&retrained), &data, &rc.eval)?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    write_csv(&a.out.with_extension("csv"), &[report.headline()])?;
    eprintln!(
        "forget quality {}, utility {:.4}, forget rouge {:.4}",
        fmt_opt(report.forget_quality),
        report.model_utility,
        report.forget_rouge
    );
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let dirs = discover_runs(&a.runs)?;
    let (rows, warnings) = sweep_report(&dirs)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    ensure_parent(&a.out)?;
    write_csv(&a.out, &rows)?;
    Ok(())
}
