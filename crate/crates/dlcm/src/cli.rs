//! Command-line pipeline: initial ranking, re-ranker training, evaluation,
//! negative-pair analysis, hyperparameter sweeps, and synthetic corpora.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
//! Every flag can also be set through an environment variable with the
//! `DLCM_` prefix, e.g. `DLCM_SEED=7`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autograd::GradError;
use crate::checkpoint::{self, CheckpointError};
use crate::data::{
    self, harmonize_features, normalize_per_query, DataError, LetorData, QueryGroup, ScoreMap,
};
use crate::losses::{LossKind, DEFAULT_SIGMA_S};
use crate::manifest::write_manifest;
use crate::metrics::{self, EvalReport, MetricsError, RankingPair};
use crate::models::{linear_train, LinearRanker, LinearTrainConfig, ModelError, ModelKind, ModelParams};
use crate::sub_seed;
use crate::trainer::{
    self, evaluate_checkpoint, initial_rankings, train, TrainConfig, TrainError,
};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GradError> for CliError {
    fn from(e: GradError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Graph(g) => CliError::Numeric(g.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteScores { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Graph(g) => CliError::Numeric(g.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dlcm",
    version,
    about = "Listwise-context re-ranking toolkit for LETOR-style data"
)]
struct Cli {
    /// Cap on worker threads for batch-parallel training and evaluation.
    #[arg(long, global = true, env = "DLCM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the built-in linear pairwise ranker and write initial scores.
    Initial(InitialArgs),
    /// Train a re-ranker on top of initial scores.
    Train(TrainArgs),
    /// Evaluate a checkpoint and optionally test significance vs a baseline.
    Eval(EvalArgs),
    /// Negative-pair analysis between two rankings.
    Analyze(AnalyzeArgs),
    /// Train/evaluate across a hyperparameter range.
    Sweep(SweepArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct InitialArgs {
    #[arg(long, env = "DLCM_TRAIN")]
    train: PathBuf,
    #[arg(long, env = "DLCM_VALID")]
    valid: PathBuf,
    #[arg(long, env = "DLCM_TEST")]
    test: PathBuf,
    #[arg(long, env = "DLCM_OUT")]
    out: PathBuf,
    #[arg(long, default_value_t = 17, env = "DLCM_SEED")]
    seed: u64,
    #[arg(long, default_value_t = 20, env = "DLCM_EPOCHS")]
    epochs: usize,
    #[arg(long, default_value_t = 0.05, env = "DLCM_LR")]
    lr: f32,
    #[arg(long, default_value_t = 1.0, env = "DLCM_MARGIN")]
    margin: f32,
    #[arg(long, default_value_t = 64, env = "DLCM_PAIRS_PER_QUERY")]
    pairs_per_query: usize,
    /// Skip per-query min-max feature normalization.
    #[arg(long, env = "DLCM_NO_NORMALIZE")]
    no_normalize: bool,
    #[arg(
        long,
        value_delimiter = ',',
        value_parser = parse_cutoff,
        default_value = "1,3,5,10",
        env = "DLCM_CUTOFFS"
    )]
    cutoffs: Vec<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "DLCM_TRAIN")]
    train: PathBuf,
    #[arg(long, env = "DLCM_VALID")]
    valid: PathBuf,
    /// `builtin` or a directory holding `<stem>.scores.tsv` files.
    #[arg(long, default_value = "builtin", env = "DLCM_SCORES")]
    scores: String,
    #[arg(long, env = "DLCM_MODEL", value_parser = parse_model)]
    model: ModelKind,
    #[arg(long, env = "DLCM_LOSS")]
    loss: String,
    #[arg(long, env = "DLCM_N")]
    n: Option<usize>,
    /// Input abstraction width (DLCM only).
    #[arg(long, env = "DLCM_BETA")]
    beta: Option<usize>,
    /// Hidden units of the local scoring function (DLCM only).
    #[arg(long, env = "DLCM_K")]
    k: Option<usize>,
    /// Comma-separated hidden widths (DNN/LIDNN only), each in [64, 1024].
    #[arg(long, env = "DLCM_HIDDEN")]
    hidden: Option<String>,
    #[arg(long, env = "DLCM_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 1.0, env = "DLCM_LR0")]
    lr0: f32,
    #[arg(long, default_value_t = 0.8, env = "DLCM_DECAY")]
    decay: f32,
    #[arg(long, default_value_t = 5.0, env = "DLCM_CLIP_NORM")]
    clip_norm: f32,
    #[arg(long, default_value_t = 10_000, env = "DLCM_MAX_ITERS")]
    max_iters: usize,
    /// SoftRank smoothing deviation (SoftRank only).
    #[arg(long, env = "DLCM_SIGMA_S")]
    sigma_s: Option<f32>,
    /// Use softmax score attention instead of the rectified exponential
    /// (AttRank only).
    #[arg(long, env = "DLCM_ATTN_SOFTMAX")]
    attn_softmax: bool,
    #[arg(long, default_value_t = 17, env = "DLCM_SEED")]
    seed: u64,
    /// Desk-scale profile: batch size 16 and n = 10 unless set explicitly.
    #[arg(long, env = "DLCM_DESK")]
    desk: bool,
    /// Stop after this many epochs without validation improvement.
    #[arg(long, env = "DLCM_PATIENCE")]
    patience: Option<usize>,
    #[arg(long, env = "DLCM_NO_NORMALIZE")]
    no_normalize: bool,
    #[arg(long, env = "DLCM_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "DLCM_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "DLCM_DATA")]
    data: PathBuf,
    /// A score TSV file, or a directory holding `<stem>.scores.tsv`.
    #[arg(long, env = "DLCM_SCORES")]
    scores: PathBuf,
    #[arg(long, env = "DLCM_OUT")]
    out: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        value_parser = parse_cutoff,
        default_value = "1,3,5,10",
        env = "DLCM_CUTOFFS"
    )]
    cutoffs: Vec<usize>,
    /// Per-query report TSV of a baseline run, for significance testing.
    #[arg(long, env = "DLCM_BASELINE_REPORT")]
    baseline_report: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000, env = "DLCM_PERMUTATIONS")]
    permutations: usize,
    #[arg(long, default_value_t = 17, env = "DLCM_SEED")]
    seed: u64,
    /// Override the re-ranking window stored in the checkpoint.
    #[arg(long, env = "DLCM_N")]
    n: Option<usize>,
    #[arg(long, env = "DLCM_NO_NORMALIZE")]
    no_normalize: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, env = "DLCM_DATA")]
    data: PathBuf,
    /// `ranking.tsv` of the baseline run.
    #[arg(long, env = "DLCM_BASELINE_RANKING")]
    baseline_ranking: PathBuf,
    /// `ranking.tsv` of the model run.
    #[arg(long, env = "DLCM_MODEL_RANKING")]
    model_ranking: PathBuf,
    #[arg(long, env = "DLCM_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Which hyperparameter to sweep: n, beta, or k.
    #[arg(long, env = "DLCM_PARAM")]
    param: String,
    /// Comma-separated values, e.g. `10,20,30`.
    #[arg(long, env = "DLCM_VALUES")]
    values: Option<String>,
    /// Inclusive range `start..stop:step`, e.g. `10..60:10`.
    #[arg(long, env = "DLCM_RANGE")]
    range: Option<String>,
    #[arg(long, env = "DLCM_TRAIN")]
    train: PathBuf,
    #[arg(long, env = "DLCM_VALID")]
    valid: PathBuf,
    #[arg(long, env = "DLCM_TEST")]
    test: PathBuf,
    #[arg(long, default_value = "builtin", env = "DLCM_SCORES")]
    scores: String,
    #[arg(long, env = "DLCM_MODEL", value_parser = parse_model)]
    model: ModelKind,
    #[arg(long, env = "DLCM_LOSS")]
    loss: String,
    #[arg(long, env = "DLCM_N")]
    n: Option<usize>,
    #[arg(long, env = "DLCM_BETA")]
    beta: Option<usize>,
    #[arg(long, env = "DLCM_K")]
    k: Option<usize>,
    #[arg(long, env = "DLCM_HIDDEN")]
    hidden: Option<String>,
    #[arg(long, env = "DLCM_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 1.0, env = "DLCM_LR0")]
    lr0: f32,
    #[arg(long, default_value_t = 0.8, env = "DLCM_DECAY")]
    decay: f32,
    #[arg(long, default_value_t = 5.0, env = "DLCM_CLIP_NORM")]
    clip_norm: f32,
    #[arg(long, default_value_t = 10_000, env = "DLCM_MAX_ITERS")]
    max_iters: usize,
    #[arg(long, env = "DLCM_SIGMA_S")]
    sigma_s: Option<f32>,
    #[arg(long, env = "DLCM_ATTN_SOFTMAX")]
    attn_softmax: bool,
    #[arg(long, default_value_t = 17, env = "DLCM_SEED")]
    seed: u64,
    #[arg(long, env = "DLCM_DESK")]
    desk: bool,
    #[arg(long, env = "DLCM_PATIENCE")]
    patience: Option<usize>,
    #[arg(long, env = "DLCM_NO_NORMALIZE")]
    no_normalize: bool,
    #[arg(
        long,
        value_delimiter = ',',
        value_parser = parse_cutoff,
        default_value = "1,3,5,10",
        env = "DLCM_CUTOFFS"
    )]
    cutoffs: Vec<usize>,
    #[arg(long, env = "DLCM_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// `relative-max` (listwise context required) or `global-linear`.
    #[arg(long, env = "DLCM_KIND")]
    kind: String,
    #[arg(long, env = "DLCM_OUT")]
    out: PathBuf,
    #[arg(long, default_value_t = 2000, env = "DLCM_QUERIES")]
    queries: usize,
    #[arg(long, default_value_t = 20, env = "DLCM_DOCS")]
    docs: usize,
    #[arg(long, default_value_t = 10, env = "DLCM_FEATURES")]
    features: usize,
    #[arg(long, default_value_t = 17, env = "DLCM_SEED")]
    seed: u64,
    #[arg(long, default_value_t = 0.6, env = "DLCM_TRAIN_FRAC")]
    train_frac: f64,
    #[arg(long, default_value_t = 0.15, env = "DLCM_VALID_FRAC")]
    valid_frac: f64,
}

fn parse_cutoff(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(k) if k >= 1 => Ok(k),
        _ => Err(format!("`{s}` is not a cutoff >= 1")),
    }
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model `{s}`"))
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap exits 0 for --help/--version and 2 for usage errors.
            e.exit();
        }
    };
    if let Some(t) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global();
    }
    let result = match cli.command {
        Command::Initial(a) => cmd_initial(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".to_string())
}

fn load_letor_normalized(path: &Path, normalize: bool) -> Result<LetorData, CliError> {
    let mut data = data::parse_letor(path)?;
    if data.groups.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no query groups parsed",
            path.display()
        )));
    }
    if data.clamped_labels > 0 {
        eprintln!(
            "warning: {}: clamped {} out-of-range labels into [0, 4]",
            path.display(),
            data.clamped_labels
        );
    }
    if normalize {
        data.groups = data.groups.iter().map(normalize_per_query).collect();
    }
    Ok(data)
}

/// Parse several splits, harmonize feature widths, then normalize.
fn load_splits(paths: &[&Path], normalize: bool) -> Result<Vec<LetorData>, CliError> {
    let mut sets = paths
        .iter()
        .map(|p| load_letor_normalized(p, false))
        .collect::<Result<Vec<_>, _>>()?;
    {
        let mut refs: Vec<&mut LetorData> = sets.iter_mut().collect();
        harmonize_features(&mut refs);
    }
    if normalize {
        for set in &mut sets {
            set.groups = set.groups.iter().map(normalize_per_query).collect();
        }
    }
    Ok(sets)
}

fn score_with_linear(ranker: &LinearRanker, groups: &[QueryGroup]) -> ScoreMap {
    groups
        .iter()
        .map(|g| (g.query_id.clone(), ranker.score_group(g)))
        .collect()
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_report_files(
    out: &Path,
    stem: &str,
    label: &str,
    report: &EvalReport,
    extra_note: Option<&str>,
) -> Result<(), CliError> {
    let mut tsv = Vec::new();
    report
        .write_tsv(&mut tsv)
        .map_err(|e| CliError::Data(e.to_string()))?;
    write_text(
        &out.join(format!("report.{stem}.tsv")),
        std::str::from_utf8(&tsv).expect("utf8"),
    )?;
    let mut table = report.aggregate_table(label);
    if let Some(note) = extra_note {
        table.push_str(note);
        table.push('\n');
    }
    write_text(&out.join(format!("report.{stem}.txt")), &table)?;
    Ok(())
}

fn write_ranking_file(
    path: &Path,
    groups: &[QueryGroup],
    rankings: &[Vec<usize>],
) -> Result<(), CliError> {
    let mut out = String::from("qid\trank\tdoc_index\n");
    for (g, ranking) in groups.iter().zip(rankings) {
        for (rank, &doc) in ranking.iter().enumerate() {
            out.push_str(&format!("{}\t{rank}\t{doc}\n", g.query_id));
        }
    }
    write_text(path, &out)
}

fn read_ranking_file(
    path: &Path,
    groups: &[QueryGroup],
) -> Result<Vec<Vec<usize>>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut per_qid: HashMap<&str, Vec<(usize, usize)>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CliError::Data(format!(
                "{}: line {}: expected qid\\trank\\tdoc_index",
                path.display(),
                i + 1
            )));
        }
        let rank: usize = fields[1].parse().map_err(|_| {
            CliError::Data(format!("{}: line {}: bad rank", path.display(), i + 1))
        })?;
        let doc: usize = fields[2].parse().map_err(|_| {
            CliError::Data(format!("{}: line {}: bad doc index", path.display(), i + 1))
        })?;
        per_qid.entry(fields[0]).or_default().push((rank, doc));
    }
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let mut rows = per_qid
            .remove(g.query_id.as_str())
            .ok_or_else(|| {
                CliError::Data(format!(
                    "{}: no ranking for qid {}",
                    path.display(),
                    g.query_id
                ))
            })?;
        rows.sort_by_key(|&(rank, _)| rank);
        let ranking: Vec<usize> = rows.iter().map(|&(_, d)| d).collect();
        if ranking.len() != g.num_docs() {
            return Err(CliError::Data(format!(
                "{}: qid {} has {} ranked docs, expected {}",
                path.display(),
                g.query_id,
                ranking.len(),
                g.num_docs()
            )));
        }
        out.push(ranking);
    }
    Ok(out)
}

fn cmd_initial(a: InitialArgs) -> Result<(), CliError> {
    create_out_dir(&a.out)?;
    let normalize = !a.no_normalize;
    let sets = load_splits(&[&a.train, &a.valid, &a.test], normalize)?;
    let cfg = LinearTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        margin: a.margin,
        pairs_per_query: a.pairs_per_query,
        seed: sub_seed(a.seed, "linear-initial"),
    };
    let ranker = linear_train(&sets[0].groups, &cfg).map_err(CliError::from)?;

    for (set, path) in sets.iter().zip([&a.train, &a.valid, &a.test]) {
        let stem = stem_of(path);
        let scores = score_with_linear(&ranker, &set.groups);
        data::write_scores(&a.out.join(format!("{stem}.scores.tsv")), &set.groups, &scores)?;
        let rankings = initial_rankings(&set.groups, &scores)?;
        let report = EvalReport::from_rankings(&set.groups, &rankings, &a.cutoffs)?;
        write_report_files(&a.out, &stem, "initial-linear", &report, None)?;
        write_ranking_file(
            &a.out.join(format!("ranking.{stem}.tsv")),
            &set.groups,
            &rankings,
        )?;
        println!("{}", report.aggregate_table(&format!("initial[{stem}]")));
    }
    checkpoint::save(&a.out.join("linear.ckpt"), &ModelParams::Linear(ranker))?;
    write_manifest(
        &a.out,
        "initial",
        a.seed,
        &[
            ("epochs".into(), a.epochs.to_string()),
            ("lr".into(), a.lr.to_string()),
            ("margin".into(), a.margin.to_string()),
            ("normalize".into(), normalize.to_string()),
        ],
        &[&a.train, &a.valid, &a.test],
    )?;
    Ok(())
}

fn parse_loss(
    loss: &str,
    sigma_s: Option<f32>,
    attn_softmax: bool,
) -> Result<LossKind, CliError> {
    let kind = match loss {
        "listmle" => LossKind::ListMle,
        "softrank" => LossKind::SoftRank {
            sigma_s: sigma_s.unwrap_or(DEFAULT_SIGMA_S),
        },
        "attrank" => LossKind::AttRank {
            softmax_scores: attn_softmax,
        },
        other => return Err(CliError::Usage(format!("unknown loss `{other}`"))),
    };
    if sigma_s.is_some() && loss != "softrank" {
        return Err(CliError::Usage(
            "--sigma-s only applies to --loss softrank".into(),
        ));
    }
    if attn_softmax && loss != "attrank" {
        return Err(CliError::Usage(
            "--attn-softmax only applies to --loss attrank".into(),
        ));
    }
    Ok(kind)
}

fn parse_hidden(hidden: &Option<String>) -> Result<Option<Vec<usize>>, CliError> {
    match hidden {
        None => Ok(None),
        Some(s) => {
            let widths: Result<Vec<usize>, _> =
                s.split(',').map(|t| t.trim().parse::<usize>()).collect();
            let widths = widths
                .map_err(|_| CliError::Usage(format!("--hidden `{s}` is not a width list")))?;
            if widths.is_empty() || widths.len() > 2 {
                return Err(CliError::Usage(
                    "--hidden takes one or two layer widths".into(),
                ));
            }
            if widths.iter().any(|&w| !(64..=1024).contains(&w)) {
                return Err(CliError::Usage(
                    "hidden widths must lie in [64, 1024]".into(),
                ));
            }
            Ok(Some(widths))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn build_train_config(
    model: ModelKind,
    loss: LossKind,
    n: Option<usize>,
    beta: Option<usize>,
    k: Option<usize>,
    hidden: &Option<String>,
    batch_size: Option<usize>,
    lr0: f32,
    decay: f32,
    clip_norm: f32,
    max_iters: usize,
    seed: u64,
    desk: bool,
    patience: Option<usize>,
) -> Result<TrainConfig, CliError> {
    if model == ModelKind::Linear {
        return Err(CliError::Usage(
            "--model linear is trained by `initial`, not `train`".into(),
        ));
    }
    if model != ModelKind::Dlcm && (beta.is_some() || k.is_some()) {
        return Err(CliError::Usage(format!(
            "--beta/--k only apply to --model dlcm, not {}",
            model.name()
        )));
    }
    let hidden_widths = parse_hidden(hidden)?;
    if model == ModelKind::Dlcm && hidden_widths.is_some() {
        return Err(CliError::Usage(
            "--hidden only applies to --model dnn or lidnn".into(),
        ));
    }
    let mut cfg = TrainConfig::new(model, loss);
    if desk {
        cfg = cfg.desk();
    }
    cfg.n = n.unwrap_or(cfg.n);
    cfg.beta = beta.unwrap_or(0);
    cfg.k = k.unwrap_or(3);
    cfg.hidden = hidden_widths.unwrap_or_else(|| vec![64]);
    cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
    cfg.lr0 = lr0;
    cfg.decay = decay;
    cfg.clip_norm = clip_norm;
    cfg.max_iters = max_iters;
    cfg.seed = seed;
    cfg.patience = patience;
    cfg.validate()?;
    Ok(cfg)
}

/// Resolve `--scores` for one data file: `builtin` trains the linear ranker
/// on the provided training groups, a directory resolves `<stem>.scores.tsv`
/// and a plain path is used directly.
fn resolve_scores(
    spec: &str,
    data_path: &Path,
    groups: &[QueryGroup],
    builtin: Option<&LinearRanker>,
) -> Result<ScoreMap, CliError> {
    if spec == "builtin" {
        let ranker = builtin.ok_or_else(|| {
            CliError::Usage("builtin scores need training data in this command".into())
        })?;
        return Ok(score_with_linear(ranker, groups));
    }
    let base = PathBuf::from(spec);
    let path = if base.is_dir() {
        base.join(format!("{}.scores.tsv", stem_of(data_path)))
    } else {
        base
    };
    Ok(data::load_external_scores(&path, groups)?)
}

fn builtin_ranker_if_needed(
    spec: &str,
    train_groups: &[QueryGroup],
    seed: u64,
) -> Result<Option<LinearRanker>, CliError> {
    if spec == "builtin" {
        let cfg = LinearTrainConfig {
            seed: sub_seed(seed, "linear-initial"),
            ..Default::default()
        };
        Ok(Some(linear_train(train_groups, &cfg)?))
    } else {
        Ok(None)
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    create_out_dir(&a.out)?;
    let loss = parse_loss(&a.loss, a.sigma_s, a.attn_softmax)?;
    let cfg = build_train_config(
        a.model,
        loss,
        a.n,
        a.beta,
        a.k,
        &a.hidden,
        a.batch_size,
        a.lr0,
        a.decay,
        a.clip_norm,
        a.max_iters,
        a.seed,
        a.desk,
        a.patience,
    )?;
    let normalize = !a.no_normalize;
    let sets = load_splits(&[&a.train, &a.valid], normalize)?;
    let ranker = builtin_ranker_if_needed(&a.scores, &sets[0].groups, a.seed)?;
    let mut scores = resolve_scores(&a.scores, &a.train, &sets[0].groups, ranker.as_ref())?;
    scores.extend(resolve_scores(&a.scores, &a.valid, &sets[1].groups, ranker.as_ref())?);

    let output = train(&cfg, &sets[0].groups, &sets[1].groups, &scores)?;
    checkpoint::save(&a.out.join("checkpoint.ckpt"), &output.params)?;
    trainer::write_history_file(&a.out.join("history.tsv"), &output.history)?;
    write_manifest(
        &a.out,
        "train",
        a.seed,
        &[
            ("model".into(), a.model.name().into()),
            ("loss".into(), cfg.loss.name().into()),
            ("n".into(), cfg.n.to_string()),
            ("beta".into(), cfg.beta.to_string()),
            ("k".into(), cfg.k.to_string()),
            ("batch_size".into(), cfg.batch_size.to_string()),
            ("lr0".into(), cfg.lr0.to_string()),
            ("decay".into(), cfg.decay.to_string()),
            ("clip_norm".into(), cfg.clip_norm.to_string()),
            ("max_iters".into(), cfg.max_iters.to_string()),
            ("normalize".into(), normalize.to_string()),
            ("scores".into(), a.scores.clone()),
        ],
        &[&a.train, &a.valid],
    )?;
    println!(
        "trained {} with {}: best validation ndcg@10 = {:.4} over {} epochs",
        a.model.name(),
        cfg.loss.name(),
        output.best_val_ndcg10,
        output.history.len()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    create_out_dir(&a.out)?;
    let normalize = !a.no_normalize;
    let data = load_letor_normalized(&a.data, normalize)?;
    let params = checkpoint::load(&a.checkpoint)?;
    let spec = a.scores.display().to_string();
    let scores = resolve_scores(&spec, &a.data, &data.groups, None)?;
    let (mut report, rankings) =
        evaluate_checkpoint(&params, &data.groups, &scores, &a.cutoffs, a.n)?;

    let note = if let Some(baseline_path) = &a.baseline_report {
        let baseline = read_report_tsv(baseline_path, &a.cutoffs)?;
        report
            .attach_significance(&baseline, a.permutations, sub_seed(a.seed, "fisher"))
            .map_err(CliError::from)?;
        Some(format!(
            "# * marks p <= 0.01 under the Fisher randomization test \
             ({} permutations) vs {}",
            a.permutations,
            baseline_path.display()
        ))
    } else {
        None
    };

    let stem = stem_of(&a.data);
    write_report_files(&a.out, &stem, params.kind().name(), &report, note.as_deref())?;
    write_ranking_file(&a.out.join("ranking.tsv"), &data.groups, &rankings)?;
    write_manifest(
        &a.out,
        "eval",
        a.seed,
        &[
            ("checkpoint".into(), a.checkpoint.display().to_string()),
            ("cutoffs".into(), format!("{:?}", a.cutoffs)),
            ("normalize".into(), normalize.to_string()),
        ],
        &[&a.data, &a.checkpoint],
    )?;
    print!("{}", report.aggregate_table(params.kind().name()));
    if let Some(sig) = &report.significance {
        for (i, &k) in report.cutoffs.iter().enumerate() {
            println!(
                "p@{k}: ndcg {:.6}, err {:.6}",
                sig[i].0, sig[i].1
            );
        }
    }
    Ok(())
}

/// Read back a per-query report TSV written by [`EvalReport::write_tsv`].
fn read_report_tsv(path: &Path, expect_cutoffs: &[usize]) -> Result<EvalReport, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Data(format!("{}: empty report", path.display())))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let mut cutoffs = Vec::new();
    for c in cols.iter().skip(1) {
        if let Some(k) = c.strip_prefix("ndcg@") {
            cutoffs.push(k.parse::<usize>().map_err(|_| {
                CliError::Data(format!("{}: bad header column {c}", path.display()))
            })?);
        }
    }
    if cutoffs != expect_cutoffs {
        return Err(CliError::Data(format!(
            "{}: baseline cutoffs {:?} do not match requested {:?}",
            path.display(),
            cutoffs,
            expect_cutoffs
        )));
    }
    let mut per_query = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 1 + 2 * cutoffs.len() {
            return Err(CliError::Data(format!(
                "{}: line {}: expected {} fields",
                path.display(),
                i + 2,
                1 + 2 * cutoffs.len()
            )));
        }
        let parse = |s: &str| -> Result<f64, CliError> {
            s.parse()
                .map_err(|_| CliError::Data(format!("{}: bad value `{s}`", path.display())))
        };
        let ndcg: Vec<f64> = fields[1..1 + cutoffs.len()]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<_, _>>()?;
        let err: Vec<f64> = fields[1 + cutoffs.len()..]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<_, _>>()?;
        per_query.push(metrics::QueryMetrics {
            qid: fields[0].to_string(),
            ndcg,
            err,
        });
    }
    if per_query.is_empty() {
        return Err(CliError::Data(format!(
            "{}: report has no queries",
            path.display()
        )));
    }
    let nq = per_query.len() as f64;
    let mean = |pick: &dyn Fn(&metrics::QueryMetrics) -> &Vec<f64>| -> Vec<f64> {
        (0..cutoffs.len())
            .map(|i| per_query.iter().map(|q| pick(q)[i]).sum::<f64>() / nq)
            .collect()
    };
    let mean_ndcg = mean(&|q| &q.ndcg);
    let mean_err = mean(&|q| &q.err);
    Ok(EvalReport {
        cutoffs,
        mean_ndcg,
        mean_err,
        per_query,
        significance: None,
    })
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    create_out_dir(&a.out)?;
    let data = load_letor_normalized(&a.data, false)?;
    let baseline = read_ranking_file(&a.baseline_ranking, &data.groups)?;
    let model = read_ranking_file(&a.model_ranking, &data.groups)?;
    let pairs: Vec<RankingPair> = data
        .groups
        .iter()
        .zip(baseline.iter().zip(&model))
        .map(|(g, (b, m))| RankingPair {
            baseline: b,
            model: m,
            labels: &g.labels,
        })
        .collect();

    let footnote = "# averaged per document within each query, then across queries";
    let by_label = metrics::negpair_analysis(&pairs)?;
    let mut out = String::from("label\tqueries\tmean_negpair_reduction\tmean_baseline_negpair\n");
    for row in &by_label {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\n",
            row.label, row.queries, row.mean_reduction, row.mean_baseline_np
        ));
    }
    out.push_str(footnote);
    out.push('\n');
    write_text(&a.out.join("negpair_by_label.tsv"), &out)?;

    let buckets = metrics::bucket_by_perfect_count(&pairs)?;
    let mut out = String::from(
        "perfect_docs\tqueries\tmean_negpair_reduction\tmean_baseline_negpair\tproportion\n",
    );
    for b in &buckets {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\n",
            b.perfect_docs, b.queries, b.mean_reduction, b.mean_baseline_np, b.proportion
        ));
    }
    out.push_str(footnote);
    out.push('\n');
    write_text(&a.out.join("negpair_by_perfect.tsv"), &out)?;

    write_manifest(
        &a.out,
        "analyze",
        0,
        &[],
        &[&a.data, &a.baseline_ranking, &a.model_ranking],
    )?;
    println!("negpair tables written to {}", a.out.display());
    Ok(())
}

fn parse_sweep_values(a: &SweepArgs) -> Result<Vec<usize>, CliError> {
    match (&a.values, &a.range) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "--values and --range are mutually exclusive".into(),
        )),
        (Some(v), None) => {
            let parsed: Result<Vec<usize>, _> =
                v.split(',').map(|t| t.trim().parse::<usize>()).collect();
            parsed
                .map_err(|_| CliError::Usage(format!("--values `{v}` is not an integer list")))
                .and_then(|vals| {
                    if vals.is_empty() {
                        Err(CliError::Usage("--values must be non-empty".into()))
                    } else {
                        Ok(vals)
                    }
                })
        }
        (None, Some(r)) => {
            let (span, step) = r
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("--range `{r}` needs start..stop:step")))?;
            let (start, stop) = span
                .split_once("..")
                .ok_or_else(|| CliError::Usage(format!("--range `{r}` needs start..stop:step")))?;
            let (start, stop, step): (usize, usize, usize) = (
                start
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad range start in `{r}`")))?,
                stop.parse()
                    .map_err(|_| CliError::Usage(format!("bad range stop in `{r}`")))?,
                step.parse()
                    .map_err(|_| CliError::Usage(format!("bad range step in `{r}`")))?,
            );
            if step == 0 || stop < start {
                return Err(CliError::Usage(format!("degenerate range `{r}`")));
            }
            Ok((start..=stop).step_by(step).collect())
        }
        (None, None) => Err(CliError::Usage(
            "sweep needs --values or --range".into(),
        )),
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    create_out_dir(&a.out)?;
    if !matches!(a.param.as_str(), "n" | "beta" | "k") {
        return Err(CliError::Usage(format!(
            "--param must be n, beta, or k, got `{}`",
            a.param
        )));
    }
    if a.param != "n" && a.model != ModelKind::Dlcm {
        return Err(CliError::Usage(format!(
            "--param {} only applies to --model dlcm",
            a.param
        )));
    }
    let values = parse_sweep_values(&a)?;
    let loss = parse_loss(&a.loss, a.sigma_s, a.attn_softmax)?;
    let normalize = !a.no_normalize;
    let sets = load_splits(&[&a.train, &a.valid, &a.test], normalize)?;
    let ranker = builtin_ranker_if_needed(&a.scores, &sets[0].groups, a.seed)?;
    let mut scores = resolve_scores(&a.scores, &a.train, &sets[0].groups, ranker.as_ref())?;
    scores.extend(resolve_scores(&a.scores, &a.valid, &sets[1].groups, ranker.as_ref())?);
    scores.extend(resolve_scores(&a.scores, &a.test, &sets[2].groups, ranker.as_ref())?);

    let mut table = String::from(&format!("{}", &a.param));
    for &k in &a.cutoffs {
        table.push_str(&format!("\tndcg@{k}\terr@{k}"));
    }
    table.push('\n');

    for &value in &values {
        let (n, beta, k) = match a.param.as_str() {
            "n" => (Some(value), a.beta, a.k),
            "beta" => (a.n, Some(value), a.k),
            _ => (a.n, a.beta, Some(value)),
        };
        let cfg = build_train_config(
            a.model,
            loss,
            n,
            beta,
            k,
            &a.hidden,
            a.batch_size,
            a.lr0,
            a.decay,
            a.clip_norm,
            a.max_iters,
            a.seed,
            a.desk,
            a.patience,
        )?;
        let output = train(&cfg, &sets[0].groups, &sets[1].groups, &scores)?;
        let (report, _) =
            evaluate_checkpoint(&output.params, &sets[2].groups, &scores, &a.cutoffs, None)?;
        table.push_str(&value.to_string());
        for i in 0..a.cutoffs.len() {
            table.push_str(&format!(
                "\t{:.4}\t{:.4}",
                report.mean_ndcg[i], report.mean_err[i]
            ));
        }
        table.push('\n');
    }
    write_text(&a.out.join("sweep.tsv"), &table)?;
    write_manifest(
        &a.out,
        "sweep",
        a.seed,
        &[
            ("param".into(), a.param.clone()),
            ("values".into(), format!("{values:?}")),
            ("model".into(), a.model.name().into()),
            ("loss".into(), loss.name().into()),
        ],
        &[&a.train, &a.valid, &a.test],
    )?;
    print!("{table}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    create_out_dir(&a.out)?;
    let cfg = crate::synth::SynthConfig {
        queries: a.queries,
        docs_per_query: a.docs,
        features: a.features,
        seed: a.seed,
    };
    let groups = match a.kind.as_str() {
        "relative-max" => crate::synth::relative_band_corpus(&cfg),
        "global-linear" => crate::synth::global_linear_corpus(&cfg),
        other => {
            return Err(CliError::Usage(format!(
                "--kind must be relative-max or global-linear, got `{other}`"
            )))
        }
    };
    let (tr, va, te) = crate::synth::split(groups, a.train_frac, a.valid_frac);
    data::write_letor_file(&a.out.join("train.txt"), &tr)?;
    data::write_letor_file(&a.out.join("valid.txt"), &va)?;
    data::write_letor_file(&a.out.join("test.txt"), &te)?;
    write_manifest(
        &a.out,
        "synth",
        a.seed,
        &[
            ("kind".into(), a.kind.clone()),
            ("queries".into(), a.queries.to_string()),
            ("docs".into(), a.docs.to_string()),
            ("features".into(), a.features.to_string()),
        ],
        &[],
    )?;
    println!(
        "wrote {} train / {} valid / {} test queries to {}",
        tr.len(),
        va.len(),
        te.len(),
        a.out.display()
    );
    Ok(())
}
