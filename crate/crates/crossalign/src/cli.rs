//! Command-line surface: corpus generation, scoring, evaluation,
//! re-ranking, toy training, and gradient verification as reproducible
//! runs.
//!
//! Reports are machine-readable `name=value` lines (floats in shortest
//! round-trip form, so reruns diff byte-identically); `--pretty` adds
//! human tables. Exit codes: 0 success, 1 failed verification, 2 input
//! error.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::AttentionConfig;
use crate::corpus::{load_corpus, save_corpus, synthetic, Corpus, MatchLabels};
use crate::losses::gradcheck::{check_total_loss_gradients, GradCheckConfig};
use crate::losses::train::{train_toy, TrainConfig};
use crate::losses::LossWeights;
use crate::retrieval::{
    gallery_similarity, rerank, score_corpus, topk_eval, Direction, SimilarityMatrix, TopKReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "crossalign",
    version,
    about = "Cross-modal alignment and retrieval over multi-scale embedding corpora"
)]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Also print human-readable tables.
    #[arg(long, global = true)]
    pub pretty: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic embedding corpus with planted identities.
    GenSynthetic(GenSyntheticArgs),
    /// Score text queries against the image gallery and export the matrix.
    Score(ScoreArgs),
    /// Rank the gallery per query and report top-k accuracy.
    Eval(EvalArgs),
    /// Refine query-gallery scores with gallery-gallery structure.
    Rerank(RerankArgs),
    /// Plain gradient-descent training with a held-out evaluation trace.
    TrainToy(TrainToyArgs),
    /// Verify total-loss gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    #[arg(long, default_value_t = 20)]
    pub identities: usize,
    /// Images per identity.
    #[arg(long, default_value_t = 4)]
    pub imgs: usize,
    /// Texts per identity.
    #[arg(long, default_value_t = 4)]
    pub txts: usize,
    #[arg(long, default_value_t = 768)]
    pub dim: usize,
    /// Per-coordinate noise level.
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    /// Maximum phrases per text.
    #[arg(long, default_value_t = 10)]
    pub m_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    /// Inverse temperature, image→text attention.
    #[arg(long, default_value_t = 20.0)]
    pub lambda1: f64,
    /// Inverse temperature, text→image attention.
    #[arg(long = "lambda1-prime", default_value_t = 20.0)]
    pub lambda1_prime: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub eps_norm: f64,
}

impl AttentionArgs {
    fn config(&self) -> AttentionConfig {
        AttentionConfig {
            lambda1: self.lambda1,
            lambda1_prime: self.lambda1_prime,
            eps_norm: self.eps_norm,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Fusion weight: 1 = image→text only, 0 = text→image only.
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[command(flatten)]
    pub attention: AttentionArgs,
    /// Output path for the score table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[command(flatten)]
    pub attention: AttentionArgs,
    /// Evaluate a previously exported score table instead of re-scoring.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    pub ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[command(flatten)]
    pub attention: AttentionArgs,
    /// Neighborhood size.
    #[arg(long, default_value_t = 5)]
    pub j: usize,
    /// Gallery-context fusion weight.
    #[arg(long, default_value_t = 0.3)]
    pub w: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    pub ks: Vec<usize>,
    /// Optional output path for the refined score table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Images and texts held out per identity for evaluation.
    #[arg(long, default_value_t = 1)]
    pub heldout: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight of the classification loss.
    #[arg(long, default_value_t = 4.0)]
    pub mu: f64,
    /// Weight of the cross-scale matching loss.
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps_kl: f64,
    /// Logit scale inside the projection softmaxes.
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    #[command(flatten)]
    pub attention: AttentionArgs,
    /// Fusion weight for the held-out evaluation.
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    pub ks: Vec<usize>,
    /// Optional per-epoch trace table (TSV).
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Optional trained-parameter dump (JSON).
    #[arg(long)]
    pub params_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of seeded toy batches.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Pairs per batch.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 6)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub m_max: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Error plus the exit code it maps to.
#[derive(Debug)]
struct CliError {
    message: String,
    exit_code: i32,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn input_error(e: impl std::fmt::Display) -> CliError {
    CliError {
        message: e.to_string(),
        exit_code: EXIT_INPUT_ERROR,
    }
}

type CliResult = Result<i32, CliError>;

/// Dispatch a parsed invocation; returns the process exit code.
pub fn run(config: RunConfig) -> i32 {
    let pretty = config.pretty;
    let result = match config.command {
        Command::GenSynthetic(args) => cmd_gen_synthetic(args),
        Command::Score(args) => cmd_score(args),
        Command::Eval(args) => cmd_eval(args, pretty),
        Command::Rerank(args) => cmd_rerank(args, pretty),
        Command::TrainToy(args) => cmd_train_toy(args, pretty),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code
        }
    }
}

/// Parse the process arguments and run.
pub fn main_entry() -> i32 {
    run(RunConfig::parse())
}

fn metric(name: &str, value: f64) {
    // Debug formatting keeps a trailing .0 on integral floats and is
    // shortest-round-trip otherwise.
    println!("{name}={value:?}");
}

fn load(path: &Path) -> Result<Corpus, CliError> {
    load_corpus(path).map_err(input_error)
}

fn corpus_labels(corpus: &Corpus) -> MatchLabels {
    MatchLabels::from_identities(
        &corpus.images.iter().map(|i| i.identity).collect::<Vec<_>>(),
        &corpus.texts.iter().map(|t| t.identity).collect::<Vec<_>>(),
    )
}

fn print_topk(prefix: &str, report: &TopKReport) {
    for (k, acc) in report.ks.iter().zip(&report.accuracy) {
        metric(&format!("{prefix}top{k}"), *acc);
    }
    println!("{prefix}evaluated={}", report.evaluated);
    println!("{prefix}excluded={}", report.excluded);
}

fn cmd_gen_synthetic(args: GenSyntheticArgs) -> CliResult {
    let corpus = synthetic::generate(&synthetic::SyntheticConfig {
        n_identities: args.identities,
        imgs_per_id: args.imgs,
        txts_per_id: args.txts,
        dim: args.dim,
        sigma: args.sigma,
        m_max: args.m_max,
        seed: args.seed,
    })
    .map_err(input_error)?;
    save_corpus(&args.out, &corpus).map_err(input_error)?;
    println!("images={}", corpus.images.len());
    println!("texts={}", corpus.texts.len());
    println!("dim={}", corpus.manifest.dim);
    println!("out={}", args.out.display());
    Ok(EXIT_OK)
}

fn cmd_score(args: ScoreArgs) -> CliResult {
    let corpus = load(&args.corpus)?;
    let scores = score_corpus(&corpus.texts, &corpus.images, &args.attention.config(), args.beta)
        .map_err(input_error)?;
    let mut out = BufWriter::new(File::create(&args.out).map_err(input_error)?);
    scores.write_tsv(&mut out).map_err(input_error)?;
    println!("queries={}", scores.n_queries());
    println!("gallery={}", scores.n_gallery());
    println!("direction={}", scores.direction);
    println!("out={}", args.out.display());
    Ok(EXIT_OK)
}

/// Labels aligned with a score table's row/column id order.
fn labels_for_matrix(corpus: &Corpus, scores: &SimilarityMatrix) -> Result<MatchLabels, CliError> {
    let image_identity = |id: &str| {
        corpus
            .images
            .iter()
            .find(|i| i.id == id)
            .map(|i| i.identity)
            .ok_or_else(|| input_error(format!("gallery id {id} not in corpus")))
    };
    let text_identity = |id: &str| {
        corpus
            .texts
            .iter()
            .find(|t| t.id == id)
            .map(|t| t.identity)
            .ok_or_else(|| input_error(format!("query id {id} not in corpus")))
    };
    let img_ids: Vec<u32> = scores
        .gallery_ids
        .iter()
        .map(|id| image_identity(id))
        .collect::<Result<_, _>>()?;
    let txt_ids: Vec<u32> = scores
        .query_ids
        .iter()
        .map(|id| text_identity(id))
        .collect::<Result<_, _>>()?;
    Ok(MatchLabels::from_identities(&img_ids, &txt_ids))
}

fn cmd_eval(args: EvalArgs, pretty: bool) -> CliResult {
    let corpus = load(&args.corpus)?;
    let scores = match &args.scores {
        Some(path) => {
            let mut reader = BufReader::new(File::open(path).map_err(input_error)?);
            SimilarityMatrix::read_tsv(&mut reader, Direction::Fused).map_err(input_error)?
        }
        None => score_corpus(&corpus.texts, &corpus.images, &args.attention.config(), args.beta)
            .map_err(input_error)?,
    };
    let labels = labels_for_matrix(&corpus, &scores)?;
    let report = topk_eval(&scores, &labels, &args.ks).map_err(input_error)?;
    print_topk("", &report);
    if pretty {
        println!();
        println!("{:>6} {:>10}", "k", "accuracy");
        for (k, acc) in report.ks.iter().zip(&report.accuracy) {
            println!("{k:>6} {acc:>10.4}");
        }
    }
    Ok(EXIT_OK)
}

fn cmd_rerank(args: RerankArgs, pretty: bool) -> CliResult {
    let corpus = load(&args.corpus)?;
    let qg = score_corpus(&corpus.texts, &corpus.images, &args.attention.config(), args.beta)
        .map_err(input_error)?;
    let gg = gallery_similarity(&corpus.images).map_err(input_error)?;
    let refined = rerank(&qg, &gg, args.j, args.w).map_err(input_error)?;
    let labels = corpus_labels(&corpus);
    let base = topk_eval(&qg, &labels, &args.ks).map_err(input_error)?;
    let after = topk_eval(&refined, &labels, &args.ks).map_err(input_error)?;
    print_topk("", &base);
    print_topk("rerank_", &after);
    if let Some(path) = &args.out {
        let mut out = BufWriter::new(File::create(path).map_err(input_error)?);
        refined.write_tsv(&mut out).map_err(input_error)?;
        println!("out={}", path.display());
    }
    if pretty {
        println!();
        println!("{:>6} {:>10} {:>10}", "k", "base", "reranked");
        for i in 0..base.ks.len() {
            println!(
                "{:>6} {:>10.4} {:>10.4}",
                base.ks[i], base.accuracy[i], after.accuracy[i]
            );
        }
    }
    Ok(EXIT_OK)
}

fn cmd_train_toy(args: TrainToyArgs, pretty: bool) -> CliResult {
    let corpus = load(&args.corpus)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch,
        heldout_per_id: args.heldout,
        seed: args.seed,
        weights: LossWeights {
            mu: args.mu,
            gamma: args.gamma,
            eps_kl: args.eps_kl,
            lambda2: args.lambda2,
        },
        attention: args.attention.config(),
        beta: args.beta,
        ks: args.ks.clone(),
    };
    let outcome = match train_toy(&corpus, &cfg) {
        Ok(outcome) => outcome,
        Err(e @ crate::losses::LossError::NonFinite(_)) => {
            eprintln!("error: {e}");
            return Ok(EXIT_CHECK_FAILED);
        }
        Err(e) => return Err(input_error(e)),
    };
    let last = outcome.trace.last().expect("at least one epoch");
    println!("epochs={}", outcome.trace.len());
    metric("final_loss", last.mean_loss.total);
    metric("final_cmpm", last.mean_loss.cmpm);
    metric("final_cmpc", last.mean_loss.cmpc);
    metric("final_cross_scale", last.mean_loss.cross_scale);
    print_topk("final_", &last.heldout);

    if let Some(path) = &args.trace_out {
        use std::io::Write as _;
        let mut out = BufWriter::new(File::create(path).map_err(input_error)?);
        let header: Vec<String> = cfg.ks.iter().map(|k| format!("top{k}")).collect();
        writeln!(out, "epoch\ttotal\tcmpm\tcmpc\tcross_scale\t{}", header.join("\t"))
            .map_err(input_error)?;
        for e in &outcome.trace {
            let accs: Vec<String> = e.heldout.accuracy.iter().map(|a| format!("{a:?}")).collect();
            writeln!(
                out,
                "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{}",
                e.epoch,
                e.mean_loss.total,
                e.mean_loss.cmpm,
                e.mean_loss.cmpc,
                e.mean_loss.cross_scale,
                accs.join("\t")
            )
            .map_err(input_error)?;
        }
        println!("trace_out={}", path.display());
    }
    if let Some(path) = &args.params_out {
        let file = File::create(path).map_err(input_error)?;
        serde_json::to_writer(BufWriter::new(file), &outcome.params).map_err(input_error)?;
        println!("params_out={}", path.display());
    }
    if pretty {
        println!();
        println!("{:>6} {:>12} {:>8}", "epoch", "loss", "top1");
        for e in &outcome.trace {
            println!(
                "{:>6} {:>12.4} {:>8.3}",
                e.epoch,
                e.mean_loss.total,
                e.heldout.accuracy.first().copied().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    let cfg = GradCheckConfig {
        seeds: args.seeds,
        batch: args.batch,
        dim: args.dim,
        m_max: args.m_max,
        h: args.h,
        tolerance: args.tolerance,
        ..Default::default()
    };
    let report = check_total_loss_gradients(&cfg).map_err(input_error)?;
    metric("max_rel_err", report.max_rel_err);
    println!("checks={}", report.checks);
    metric("tolerance", report.tolerance);
    println!("pass={}", report.passed);
    Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}
