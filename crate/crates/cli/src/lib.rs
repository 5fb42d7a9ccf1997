//! Command-line front end. [`run`] parses arguments, loads the run config
//! and dispatches to one pipeline stage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rdrec::config::RunConfig;
use rdrec::corpus::synthetic::{generate, SyntheticConfig};
use rdrec::corpus::{compute_stats, load_reviews, load_splits, save_splits, write_records, LoadOptions, ReviewSet};
use rdrec::distiller::{distill, read_quads, write_quads, BackendKind, ResponseCache};
use rdrec::evaluator::{compare, MetricReport, TTestResult, TrialSet};
use rdrec::model::{load_checkpoint, Seq2Seq};
use rdrec::pipeline::{
    read_json, read_rankings, run_trial, write_json, write_rankings, EvalTask, Manifest, PipelineError, Prepared,
    UserRanking,
};
use rdrec::textcodec::Vocab;
use rdrec::trainer::CHECKPOINT_FILE;

#[derive(Debug, Parser)]
#[command(name = "rdrec", version, about = "Rationale-distilling text-to-text recommender")]
pub struct Cli {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key by dotted path, e.g. trainer.lr=0.002. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the bundled synthetic corpus and a matching config.
    Synth(SynthArgs),
    /// Dataset statistics table.
    Stats(StatsArgs),
    /// Rewrite reviews into preference/attribute quadruplets.
    Distill(DistillArgs),
    /// Build splits and the vocabulary.
    Prepare(PrepareArgs),
    /// Train and keep the best checkpoint.
    Train(TrainArgs),
    /// Ranked lists for every test user.
    Recommend(RecommendArgs),
    /// Score ranked lists, or retrain over several seeds and compare.
    Evaluate(EvaluateArgs),
    /// Explanation and rationale text for one user/item pair.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub output: PathBuf,
    #[arg(long, value_name = "N")]
    pub users: Option<usize>,
    /// Corpus seed (not the training seed).
    #[arg(long, value_name = "N")]
    pub corpus_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Skip malformed lines instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Mock,
    Http,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    #[arg(long, value_name = "N")]
    pub concurrency: Option<usize>,
    /// Response cache directory.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Reviews file.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub quads: Option<PathBuf>,
    /// Splits directory.
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub task: EvalTask,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Splits directory.
    #[arg(long, value_name = "DIR")]
    pub input: Option<PathBuf>,
    /// Keep this many items per list.
    #[arg(long, value_name = "N")]
    pub k: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub task: EvalTask,
    /// Ranked lists to score (default: the reports directory's ranked.<task>.jsonl).
    #[arg(long, value_name = "FILE", conflicts_with = "trials")]
    pub rankings: Option<PathBuf>,
    /// Train and evaluate with seeds seed..seed+N-1.
    #[arg(long, value_name = "N")]
    pub trials: Option<usize>,
    /// Earlier evaluate report to test against.
    #[arg(long, value_name = "FILE")]
    pub baseline: Option<PathBuf>,
    /// Paired instead of Welch t-test.
    #[arg(long)]
    pub paired: bool,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub user: String,
    #[arg(long)]
    pub item: String,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
}

/// Output of `evaluate`; also the `--baseline` input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    pub trials: TrialSet,
    pub reports: Vec<MetricReport>,
    /// Metric name to (mean, sample std).
    pub summary: BTreeMap<String, (f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<BTreeMap<String, TTestResult>>,
}

pub const SYNTH_REVIEWS: &str = "reviews.jsonl";
pub const SYNTH_CONFIG: &str = "config.json";

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on operational failure, 2 on a usage
/// or config error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &cli.overrides)?,
        None => RunConfig::from_json("{}", &cli.overrides)?,
    };
    log::info!("effective config:\n{}", cfg.echo());
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth(a) => synth(&cfg, a),
        Command::Stats(a) => stats(&cfg, a),
        Command::Distill(a) => {
            set(&mut cfg.paths.reviews, a.input);
            set(&mut cfg.paths.quads, a.output);
            if let Some(b) = a.backend {
                cfg.backend.kind = match b {
                    BackendArg::Mock => BackendKind::Mock,
                    BackendArg::Http => BackendKind::Http,
                };
            }
            if a.endpoint.is_some() {
                cfg.backend.endpoint = a.endpoint;
            }
            set(&mut cfg.backend.max_concurrency, a.concurrency);
            if a.cache.is_some() {
                cfg.backend.cache_dir = a.cache;
            }
            cfg.validate()?;
            distill_cmd(&cfg)
        }
        Command::Prepare(a) => {
            set(&mut cfg.paths.reviews, a.input);
            set(&mut cfg.paths.quads, a.quads);
            set(&mut cfg.paths.splits, a.output);
            set(&mut cfg.paths.vocab, a.vocab);
            prepare(&cfg)
        }
        Command::Train(a) => {
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.paths.checkpoints, a.output);
            train_cmd(&cfg)
        }
        Command::Recommend(a) => {
            set(&mut cfg.paths.splits, a.input);
            recommend(&cfg, a.task, a.checkpoint, a.k, a.output)
        }
        Command::Evaluate(a) => {
            set(&mut cfg.seed, a.seed);
            if a.paired {
                cfg.eval.paired = true;
            }
            evaluate_cmd(&cfg, a)
        }
        Command::Explain(a) => explain(&cfg, a),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn write_manifest(m: &Manifest, cfg: &RunConfig) -> Result<(), PipelineError> {
    let path = m.write(&cfg.paths.reports)?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn synth(cfg: &RunConfig, a: SynthArgs) -> Result<(), PipelineError> {
    let mut sc = SyntheticConfig::default();
    set(&mut sc.n_users, a.users);
    set(&mut sc.seed, a.corpus_seed);
    let records = generate(&sc);
    std::fs::create_dir_all(&a.output).map_err(PipelineError::io(&a.output))?;
    let reviews = a.output.join(SYNTH_REVIEWS);
    write_records(&reviews, &records)?;

    let mut out = RunConfig::synthetic();
    out.paths.reviews = reviews;
    out.paths.quads = a.output.join("quads.jsonl");
    out.paths.splits = a.output.join("splits");
    out.paths.vocab = a.output.join("vocab.txt");
    out.paths.checkpoints = a.output.join("checkpoints");
    out.paths.reports = a.output.join("reports");
    let cfg_path = a.output.join(SYNTH_CONFIG);
    write_json(&cfg_path, &out)?;
    println!(
        "wrote {} interactions to {} and config to {}",
        records.len(),
        out.paths.reviews.display(),
        cfg_path.display()
    );
    let mut m = Manifest::new("synth", cfg, sc.seed);
    m.add_input(&out.paths.reviews)?;
    write_manifest(&m, &out)
}

fn stats(cfg: &RunConfig, a: StatsArgs) -> Result<(), PipelineError> {
    let opts = LoadOptions {
        lenient: a.lenient || cfg.data.lenient,
    };
    let (rs, _) = load_reviews(&a.input, &opts)?;
    print!("{}", compute_stats(&rs)?.table());
    let mut m = Manifest::new("stats", cfg, cfg.seed);
    m.add_input(&a.input)?;
    write_manifest(&m, cfg)
}

fn load_reviews_cfg(cfg: &RunConfig) -> Result<ReviewSet, PipelineError> {
    let opts = LoadOptions {
        lenient: cfg.data.lenient,
    };
    Ok(load_reviews(&cfg.paths.reviews, &opts)?.0)
}

fn distill_cmd(cfg: &RunConfig) -> Result<(), PipelineError> {
    let rs = load_reviews_cfg(cfg)?;
    let backend = cfg.backend.connect()?;
    let cache = match &cfg.backend.cache_dir {
        Some(dir) => Some(ResponseCache::open(dir).map_err(PipelineError::io(dir))?),
        None => None,
    };
    let out = distill(&rs, backend.as_ref(), cache.as_ref(), cfg.backend.max_concurrency);
    write_quads(&cfg.paths.quads, &out.quads)?;
    let s = &out.summary;
    println!(
        "{} interactions: {} quadruplets, {} skipped, {} failed ({} fallback parses, {} short reviews)",
        s.total, s.ok, s.skipped, s.failed, s.fallback, s.short_review
    );
    let mut m = Manifest::new("distill", cfg, cfg.seed);
    m.add_input(&cfg.paths.reviews)?;
    write_manifest(&m, cfg)?;
    if s.mostly_failed() {
        return Err(PipelineError::Format {
            path: cfg.paths.quads.clone(),
            message: format!("{} of {} backend requests failed", s.failed, s.backend_calls + s.cache_hits),
        });
    }
    Ok(())
}

fn prepare(cfg: &RunConfig) -> Result<(), PipelineError> {
    let rs = load_reviews_cfg(cfg)?;
    let quads = read_quads(&cfg.paths.quads)?;
    let p = Prepared::build(rs, quads, cfg)?;
    save_splits(&cfg.paths.splits, &p.reviews, &p.splits)?;
    if let Some(dir) = cfg.paths.vocab.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    p.vocab.save(&cfg.paths.vocab)?;
    println!(
        "{} users kept, {} excluded; vocabulary of {} tokens",
        p.splits.seq.users.len(),
        p.splits.seq.excluded.len(),
        p.vocab.len()
    );
    let mut m = Manifest::new("prepare", cfg, cfg.data.split_seed);
    m.add_input(&cfg.paths.reviews)?;
    m.add_input(&cfg.paths.quads)?;
    write_manifest(&m, cfg)
}

fn load_prepared(cfg: &RunConfig, with_quads: bool) -> Result<Prepared, PipelineError> {
    let (rs, splits) = load_splits(&cfg.paths.splits)?;
    let quads = if with_quads { read_quads(&cfg.paths.quads)? } else { Vec::new() };
    let vocab = Vocab::load(&cfg.paths.vocab)?;
    Ok(Prepared::new(rs, splits, quads, vocab))
}

fn prepared_inputs(m: &mut Manifest, cfg: &RunConfig) -> Result<(), PipelineError> {
    m.add_input(&cfg.paths.splits)?;
    m.add_input(&cfg.paths.vocab)
}

fn train_cmd(cfg: &RunConfig) -> Result<(), PipelineError> {
    let p = load_prepared(cfg, true)?;
    let out = p.train(cfg, cfg.seed, &cfg.paths.checkpoints)?;
    println!(
        "best epoch {} of {} (validation loss {:.4}); checkpoint {}",
        out.best_epoch,
        out.epochs_run,
        out.best_val_loss,
        out.checkpoint.display()
    );
    let mut m = Manifest::new("train", cfg, cfg.seed);
    prepared_inputs(&mut m, cfg)?;
    m.add_input(&cfg.paths.quads)?;
    write_manifest(&m, cfg)
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<Seq2Seq<f32>, PipelineError> {
    let (model, meta) = load_checkpoint(path, None)?;
    if let Some(fp) = &meta.vocab_fingerprint {
        if *fp != vocab.fingerprint() {
            return Err(PipelineError::Format {
                path: path.to_path_buf(),
                message: "checkpoint was trained with a different vocabulary".into(),
            });
        }
    }
    Ok(model)
}

fn default_rankings(cfg: &RunConfig, task: EvalTask) -> PathBuf {
    cfg.paths.reports.join(format!("ranked.{task}.jsonl"))
}

fn recommend(
    cfg: &RunConfig,
    task: EvalTask,
    checkpoint: Option<PathBuf>,
    k: Option<usize>,
    output: Option<PathBuf>,
) -> Result<(), PipelineError> {
    let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoints.join(CHECKPOINT_FILE));
    let output = output.unwrap_or_else(|| default_rankings(cfg, task));
    let p = load_prepared(cfg, false)?;
    let model = load_model(&ckpt, &p.vocab)?;
    let rec = p.recommender(&model, cfg);
    let mut lists = p.rank_test(&rec, task, &cfg.eval)?;
    if let Some(k) = k {
        for l in &mut lists {
            l.items.truncate(k);
            l.scores.truncate(k);
        }
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    write_rankings(&output, &lists)?;
    println!("{} ranked lists written to {}", lists.len(), output.display());
    let mut m = Manifest::new("recommend", cfg, cfg.seed);
    prepared_inputs(&mut m, cfg)?;
    m.add_input(&ckpt)?;
    write_manifest(&m, cfg)
}

fn summary_table(report: &EvalReport) -> String {
    let mut s = format!("{} over {} trial(s)\n", report.task, report.trials.len());
    for (name, (mean, sd)) in &report.summary {
        s.push_str(&format!("{name:<10}{mean:>10.4} ± {sd:<8.4}"));
        if let Some(t) = report.comparison.as_ref().and_then(|c| c.get(name)) {
            s.push_str(&format!("  t = {:>8.3}  p = {:.4}", t.t_statistic, t.p_value));
        }
        s.push('\n');
    }
    s
}

fn evaluate_cmd(cfg: &RunConfig, a: EvaluateArgs) -> Result<(), PipelineError> {
    let mut trials = TrialSet::default();
    let mut reports = Vec::new();
    let mut manifest = Manifest::new("evaluate", cfg, cfg.seed);
    match a.trials {
        Some(0) => {
            return Err(rdrec::config::ConfigError::Invalid {
                path: "--trials".into(),
                message: "must be at least 1".into(),
            }
            .into())
        }
        Some(n) => {
            let p = load_prepared(cfg, true)?;
            for seed in cfg.seed..cfg.seed + n as u64 {
                let dir = cfg.paths.checkpoints.join(format!("seed_{seed}"));
                let run = run_trial(&p, cfg, seed, &dir)?;
                let report = run.reports[&a.task].clone();
                write_rankings(&dir.join(format!("ranked.{}.jsonl", a.task)), &run.rankings[&a.task])?;
                log::info!("seed {seed}:\n{}", report.table());
                trials.push(seed, &report);
                reports.push(report);
            }
            prepared_inputs(&mut manifest, cfg)?;
            manifest.add_input(&cfg.paths.quads)?;
        }
        None => {
            let path = a.rankings.clone().unwrap_or_else(|| default_rankings(cfg, a.task));
            let p = load_prepared(cfg, false)?;
            let lists: Vec<UserRanking> = read_rankings(&path)?;
            let report = p.evaluate(&lists, &cfg.eval.ks)?;
            print!("{}", report.table());
            trials.push(cfg.seed, &report);
            reports.push(report);
            manifest.add_input(&cfg.paths.splits)?;
            manifest.add_input(&path)?;
        }
    }
    let comparison = match &a.baseline {
        Some(path) => {
            let base: EvalReport = read_json(path)?;
            manifest.add_input(path)?;
            Some(compare(&trials, &base.trials, cfg.eval.paired)?)
        }
        None => None,
    };
    let report = EvalReport {
        task: a.task,
        summary: trials.summary(),
        trials,
        reports,
        comparison,
    };
    if a.trials.is_some() || report.comparison.is_some() {
        print!("{}", summary_table(&report));
    }
    let out = a
        .output
        .unwrap_or_else(|| cfg.paths.reports.join(format!("report.{}.json", a.task)));
    write_json(&out, &report)?;
    println!("report written to {}", out.display());
    write_manifest(&manifest, cfg)
}

fn explain(cfg: &RunConfig, a: ExplainArgs) -> Result<(), PipelineError> {
    let ckpt = a
        .checkpoint
        .unwrap_or_else(|| cfg.paths.checkpoints.join(CHECKPOINT_FILE));
    let p = load_prepared(cfg, false)?;
    let model = load_model(&ckpt, &p.vocab)?;
    let rec = p.recommender(&model, cfg);
    println!("explanation: {}", rec.explain(&a.user, &a.item)?);
    println!("preference:  {}", rec.user_preference(&a.user)?);
    println!("attribute:   {}", rec.item_attribute(&a.item)?);
    let mut m = Manifest::new("explain", cfg, cfg.seed);
    prepared_inputs(&mut m, cfg)?;
    m.add_input(&ckpt)?;
    write_manifest(&m, cfg)
}
