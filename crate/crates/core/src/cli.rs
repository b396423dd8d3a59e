//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input or configuration
//! error. Every subcommand accepts `--config FILE`, a flat `key = value`
//! document whose keys are long flag names; flags given on the command line
//! take precedence over it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelMode, DEFAULT_EPSILON_REG};
use crate::map_greedy::DEFAULT_RANK_TOL;
use crate::oracle::{self, OracleConfig};
use crate::pool_io::{load_manifest, load_pool, normalize_pool, save_manifest, CandidatePool, Method, PoolFormat};
use crate::retrieval::{assemble_prompt, build_index, whitespace_tokens};
use crate::scoring::{self, fit_ngram, score_pool, transform_scores, Direction, ScoreMode, ScoreVector};
use crate::select::{select, SelectParams};
use crate::sweep::{self, DEFAULT_LAMBDAS};
use crate::template::Template;

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_INPUT: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "lmdpp", version, about = "Uncertainty-aware DPP selection of examples to annotate")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every candidate by reciprocal perplexity.
    Score(ScoreArgs),
    /// Select an annotation subset.
    Select(SelectArgs),
    /// Build ordered demonstration prompts for test queries.
    Retrieve(RetrieveArgs),
    /// Run the selection for several lambda values and report statistics.
    Sweep(SweepArgs),
    /// Compare incremental greedy MAP against brute-force determinants.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// Candidate pool (JSONL).
    #[arg(long)]
    pub pool: PathBuf,
    /// Binary embedding sidecar for the pool.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Flat key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerKind {
    Ngram,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormalizeArg {
    Raw,
    Minmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    LmDpp,
    VanillaDpp,
    #[value(alias = "perplexity-topk", alias = "perplexity_topk")]
    Perplexity,
    Random,
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Auto,
    Dense,
    Lazy,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    #[arg(long, value_enum, default_value = "ngram")]
    pub scorer: ScorerKind,
    #[arg(long, default_value_t = 3)]
    pub ngram_order: usize,
    /// Add-alpha smoothing for the n-gram scorer.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Text corpus (one document per line) to fit the n-gram scorer on;
    /// defaults to the pool's own rendered inputs.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "plain")]
    pub template: String,
    #[arg(long, value_enum, default_value = "minmax")]
    pub normalize: NormalizeArg,
    #[arg(long, value_enum, default_value = "low")]
    pub direction: DirectionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectionArgs {
    /// Scores file written by `score`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON_REG)]
    pub epsilon_reg: f64,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    pub rank_tol: f64,
    /// Applied to scores taken from the pool records.
    #[arg(long, value_enum, default_value = "minmax")]
    pub normalize: NormalizeArg,
    #[arg(long, value_enum, default_value = "low")]
    pub direction: DirectionArg,
    #[arg(long, value_enum, default_value = "auto")]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = crate::baselines::DEFAULT_KMEANS_ITERS)]
    pub kmeans_iters: usize,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[arg(long, value_enum, default_value = "lm-dpp")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Selection manifest.
    #[arg(long)]
    pub index: PathBuf,
    #[command(flatten)]
    pub pool: PoolArgs,
    #[arg(long)]
    pub queries: PathBuf,
    /// Binary embedding sidecar for the queries.
    #[arg(long)]
    pub query_embeddings: Option<PathBuf>,
    /// Demonstrations retrieved before packing; defaults to all annotated items.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 2048)]
    pub max_tokens: usize,
    #[arg(long, default_value = "plain")]
    pub template: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDAS)]
    pub lambdas: Vec<f64>,
    /// Leave the wall-time column empty.
    #[arg(long)]
    pub no_timing: bool,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the first counterexample on failure.
    #[arg(long)]
    pub counterexample_out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// One line of a scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    /// Reciprocal perplexity.
    pub score_r: f64,
    /// Value used for selection after normalisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl From<NormalizeArg> for ScoreMode {
    fn from(v: NormalizeArg) -> Self {
        match v {
            NormalizeArg::Raw => ScoreMode::Raw,
            NormalizeArg::Minmax => ScoreMode::Minmax,
        }
    }
}

impl From<DirectionArg> for Direction {
    fn from(v: DirectionArg) -> Self {
        match v {
            DirectionArg::Low => Direction::LowUncertainty,
            DirectionArg::High => Direction::HighUncertainty,
        }
    }
}

impl From<MethodArg> for Method {
    fn from(v: MethodArg) -> Self {
        match v {
            MethodArg::LmDpp => Method::LmDpp,
            MethodArg::VanillaDpp => Method::VanillaDpp,
            MethodArg::Perplexity => Method::PerplexityTopk,
            MethodArg::Random => Method::Random,
            MethodArg::Kmeans => Method::Kmeans,
        }
    }
}

impl From<KernelArg> for KernelMode {
    fn from(v: KernelArg) -> Self {
        match v {
            KernelArg::Auto => KernelMode::Auto,
            KernelArg::Dense => KernelMode::Dense,
            KernelArg::Lazy => KernelMode::Lazy,
        }
    }
}

/// Splices `--config` entries into `args` ahead of the user's own flags, so
/// that later (command-line) occurrences override them.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(
            args.get(pos + 1)
                .ok_or_else(|| Error::InvalidParam("--config needs a path".into()))?,
        ),
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::InvalidParam(format!("{}: {e}", path.display())))?;

    let mut injected = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => injected.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => injected.extend([flag, s]),
            toml::Value::Integer(i) => injected.extend([flag, i.to_string()]),
            toml::Value::Float(f) => injected.extend([flag, f.to_string()]),
            toml::Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|v| match v {
                        toml::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                injected.extend([flag, joined.join(",")]);
            }
            other => {
                return Err(Error::InvalidParam(format!(
                    "config key {key:?}: unsupported value {other}"
                )))
            }
        }
    }
    // args[0] is the program, args[1] the subcommand.
    let split = 2.min(args.len());
    let mut out = args[..split].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[split..]);
    Ok(out)
}

fn pool_format(embeddings: &Option<PathBuf>) -> PoolFormat {
    match embeddings {
        Some(p) => PoolFormat::JsonlWithSidecar(p.clone()),
        None => PoolFormat::Jsonl,
    }
}

fn load(args: &PoolArgs) -> Result<CandidatePool> {
    let pool = load_pool(&args.pool, &pool_format(&args.embeddings))?;
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(pool)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::InvalidRecord {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn cmd_score(args: &ScoreArgs) -> Result<Vec<ScoreRecord>> {
    let pool = load(&args.pool)?;
    let template = Template::parse(&args.template)?;
    let raw = match args.scorer {
        ScorerKind::File => scoring::scores_from_pool(&pool)?,
        ScorerKind::Ngram => {
            let corpus: Vec<String> = match &args.corpus {
                Some(p) => std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p, e))?
                    .lines()
                    .filter(|l| !l.is_empty())
                    .map(str::to_owned)
                    .collect(),
                None => pool.items().iter().map(|i| template.render_input(i)).collect(),
            };
            let model = fit_ngram(&corpus, args.ngram_order, args.alpha)?;
            score_pool(&pool, &model, &template)?
        }
    };
    let shaped = transform_scores(&raw, args.normalize.into(), args.direction.into());
    let records: Vec<ScoreRecord> = pool
        .items()
        .iter()
        .zip(raw.values.iter().zip(&shaped.values))
        .map(|(item, (&r, &s))| ScoreRecord {
            id: item.id.clone(),
            score_r: r,
            score: Some(s),
        })
        .collect();
    write_jsonl(&args.out, &records)?;
    Ok(records)
}

/// Selection scores aligned to pool order: from the scores file when given,
/// otherwise from the pool records. `Ok(None)` when no scores exist at all.
pub fn resolve_scores(pool: &CandidatePool, args: &SelectionArgs) -> Result<Option<ScoreVector>> {
    let mode: ScoreMode = args.normalize.into();
    let direction: Direction = args.direction.into();
    if let Some(path) = &args.scores {
        let records = read_scores(path)?;
        let by_id: std::collections::HashMap<&str, &ScoreRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut raw = Vec::with_capacity(pool.len());
        let mut shaped = Vec::with_capacity(pool.len());
        for item in pool.items() {
            let rec = by_id
                .get(item.id.as_str())
                .ok_or(Error::MissingScores("every pool item"))?;
            if !(rec.score_r.is_finite() && rec.score_r > 0.0) {
                return Err(Error::InvalidScore {
                    id: rec.id.clone(),
                    value: rec.score_r,
                });
            }
            raw.push(rec.score_r);
            shaped.push(rec.score);
        }
        if shaped.iter().all(Option::is_some) {
            return Ok(Some(ScoreVector {
                values: shaped.into_iter().flatten().collect(),
                mode,
                direction,
            }));
        }
        return Ok(Some(transform_scores(&ScoreVector::raw(raw), mode, direction)));
    }
    let has_any = pool
        .items()
        .iter()
        .any(|i| i.score_r.is_some() || i.token_logprobs.is_some());
    if !has_any {
        return Ok(None);
    }
    let raw = scoring::scores_from_pool(pool)?;
    Ok(Some(transform_scores(&raw, mode, direction)))
}

fn selection_params(args: &SelectionArgs, method: Method, lambda: f64) -> SelectParams {
    SelectParams {
        method,
        budget: args.budget,
        lambda,
        seed: args.seed,
        epsilon_reg: args.epsilon_reg,
        rank_tol: args.rank_tol,
        kernel_mode: args.kernel.into(),
        kmeans_iters: args.kmeans_iters,
    }
}

fn prepare(pool: CandidatePool, needs_embeddings: bool) -> Result<CandidatePool> {
    if needs_embeddings {
        normalize_pool(pool)
    } else {
        Ok(pool)
    }
}

pub fn cmd_select(args: &SelectArgs) -> Result<crate::select::SelectionOutcome> {
    let method: Method = args.method.into();
    let pool = prepare(load(&args.pool)?, method != Method::Random)?;
    let scores = if method == Method::Random || method == Method::Kmeans {
        None
    } else {
        resolve_scores(&pool, &args.selection)?
    };
    let params = selection_params(&args.selection, method, args.lambda);
    let out = select(&pool, scores.as_ref(), &params)?;
    save_manifest(&out.manifest, &args.out)?;
    let m = &out.manifest;
    println!(
        "method={} M={} lambda={} logdet={} wall_ms={:.3}",
        m.method,
        m.selected_ids.len(),
        m.lambda,
        m.cumulative_logdet.map_or("-".into(), |v| format!("{v:.6}")),
        out.wall_time.as_secs_f64() * 1e3
    );
    Ok(out)
}

/// Returns the number of prompts written, or a verification failure if any
/// assembly violates the ascending-similarity order.
pub fn cmd_retrieve(args: &RetrieveArgs) -> Result<std::result::Result<usize, String>> {
    let manifest = load_manifest(&args.index)?;
    let pool = normalize_pool(load(&args.pool)?)?;
    let queries = load_pool(&args.queries, &pool_format(&args.query_embeddings))?;
    if let Some(q) = queries.items().iter().find(|q| q.embedding.is_none()) {
        return Err(Error::MissingEmbedding(q.id.clone()));
    }
    let queries = normalize_pool(queries)?;
    let template = Template::parse(&args.template)?;
    let index = build_index(&pool, &manifest)?;
    let k = args.k.unwrap_or(index.len()).max(1);

    let mut records = Vec::with_capacity(queries.len());
    for q in queries.items() {
        let p = assemble_prompt(&index, q, k, &template, args.max_tokens, &whitespace_tokens)?;
        if !p.is_ascending() {
            return Ok(Err(format!("prompt for {:?} is not in ascending similarity", q.id)));
        }
        records.push(p.to_record());
    }
    write_jsonl(&args.out, &records)?;
    Ok(Ok(records.len()))
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<sweep::SweepRow>> {
    let pool = normalize_pool(load(&args.pool)?)?;
    let scores = resolve_scores(&pool, &args.selection)?.ok_or(Error::MissingScores("sweep"))?;
    let base = selection_params(&args.selection, Method::LmDpp, 0.0);
    let rows = sweep::run_sweep(&pool, &scores, &args.lambdas, &base)?;
    match &args.out {
        Some(p) => sweep::write_csv(&rows, create(p)?, !args.no_timing)?,
        None => sweep::write_csv(&rows, std::io::stdout().lock(), !args.no_timing)?,
    }
    Ok(rows)
}

pub fn cmd_oracle_check(args: &OracleArgs) -> Result<oracle::OracleReport> {
    let cfg = OracleConfig {
        n: args.n,
        m: args.m,
        trials: args.trials,
        seed: args.seed,
    };
    if cfg.trials == 0 {
        eprintln!("warning: zero trials requested; nothing was checked");
    }
    let report = oracle::run_oracle_check(cfg, oracle::default_greedy)?;
    println!(
        "trials={} mismatches={} max_gain_deviation={:e} result={}",
        report.trials,
        report.mismatches,
        report.max_gain_deviation,
        if report.passed() { "pass" } else { "fail" }
    );
    if let Some(cx) = &report.first_counterexample {
        let json = serde_json::to_string_pretty(cx).expect("counterexample serializes");
        match &args.counterexample_out {
            Some(p) => std::fs::write(p, json).map_err(|e| Error::io(p, e))?,
            None => eprintln!("{json}"),
        }
    }
    Ok(report)
}

fn threads_from_env() -> Option<usize> {
    std::env::var("DPP_THREADS").ok()?.trim().parse().ok()
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run(args: Vec<String>) -> ExitCode {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    crate::par::init_threads(threads_from_env());

    let outcome = match &cli.command {
        Command::Score(a) => cmd_score(a).map(|_| true),
        Command::Select(a) => cmd_select(a).map(|_| true),
        Command::Retrieve(a) => cmd_retrieve(a).map(|r| match r {
            Ok(_) => true,
            Err(msg) => {
                eprintln!("verification failed: {msg}");
                false
            }
        }),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::OracleCheck(a) => cmd_oracle_check(a).map(|r| r.passed()),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERIFY),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_values_are_spliced_before_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "budget = 8\nlambda = 0.6\nno_timing = true\nlambdas = [0.0, 0.5]\n").unwrap();
        let args: Vec<String> = ["lmdpp", "sweep", "--config", cfg.to_str().unwrap(), "--budget", "4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let out = expand_config(args).unwrap();
        let b = out.iter().position(|a| a == "--budget").unwrap();
        assert_eq!(out[b + 1], "8");
        assert_eq!(out.last().unwrap(), "4");
        assert!(out.contains(&"--no-timing".to_string()));
        assert!(out.contains(&"0,0.5".to_string()) || out.contains(&"0.0,0.5".to_string()));
    }

    #[test]
    fn later_flags_win() {
        let cli = Cli::try_parse_from([
            "lmdpp", "select", "--pool", "p", "--budget", "8", "--out", "m", "--budget", "4",
        ])
        .unwrap();
        match cli.command {
            Command::Select(a) => assert_eq!(a.selection.budget, 4),
            _ => unreachable!(),
        }
    }

    #[test]
    fn method_aliases() {
        for name in ["perplexity", "perplexity_topk"] {
            let cli = Cli::try_parse_from(["lmdpp", "select", "--pool", "p", "--out", "m", "--method", name]).unwrap();
            match cli.command {
                Command::Select(a) => assert_eq!(Method::from(a.method), Method::PerplexityTopk),
                _ => unreachable!(),
            }
        }
    }
}
