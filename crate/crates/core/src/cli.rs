//! Command-line front end. Exit codes: 0 clean, 2 violations found, 1 error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::client::{BackendKind, ResponseCache};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::evaluation::{self, load_corpus, loocv, parse_grid, summary_table, Manifest};
use crate::pipeline::Pipeline;
use crate::prompts::ReviewTask;
use crate::pyramid::RasterImage;
use crate::report::{canonical_json, render_report, ReportFormat};
use crate::synth::{generate_corpus, write_corpus, ScenarioSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VIOLATIONS: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gridlens", version, about = "Multimodal review of power-grid drawings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set conf_threshold=0.7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Review one drawing; writes report.json, report.md and regions.json.
    Review {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Leave-one-out evaluation over an annotated corpus.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Thresholds as `a,b,c` or `lo:hi:step`; defaults to 0.30:0.90:0.05.
        #[arg(long)]
        grid: Option<String>,
        /// Task file; defaults to the one named in the corpus manifest.
        #[arg(long)]
        task: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic annotated corpus and its mock scenario.
    Synth {
        /// JSON scenario spec; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect or clear the response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum CacheAction {
    Inspect {
        #[command(flatten)]
        config: ConfigArgs,
    },
    Clear {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Loads the config file (or defaults) and applies `--set` overrides.
pub fn effective_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let cwd = std::env::current_dir().ok();
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {o:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim(), cwd.as_deref())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_error(e: &Error) {
    let v = json!({"error": e.kind(), "message": e.to_string()});
    eprintln!("{}", serde_json::to_string(&v).unwrap_or_else(|_| e.to_string()));
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn review(image: &Path, task: &Path, cfg: Config, out: &Path) -> Result<i32> {
    let task = ReviewTask::load(task)?;
    let drawing = RasterImage::load(image)?;
    let pipeline = Pipeline::new(cfg)?;
    let outcome = pipeline.review(&drawing, &task)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("report.json"), &render_report(&outcome.report, ReportFormat::Json))?;
    write(&out.join("report.md"), &render_report(&outcome.report, ReportFormat::Markdown))?;
    write(
        &out.join("regions.json"),
        canonical_json(&serde_json::to_value(&outcome.regions)?).as_bytes(),
    )?;
    let r = &outcome.report;
    println!(
        "{}: {} violation(s), {} need review, {} validated, {} failed crop(s)",
        r.drawing_id,
        r.count(crate::stage3::FindingKind::Violation),
        r.count(crate::stage3::FindingKind::NeedsHumanReview),
        r.count(crate::stage3::FindingKind::Validated),
        r.failed_crops.len()
    );
    Ok(if r.has_violations() { EXIT_VIOLATIONS } else { EXIT_OK })
}

pub fn cmd_review(image: &Path, task: &Path, cfg: &ConfigArgs, out: &Path) -> i32 {
    match effective_config(cfg).and_then(|c| review(image, task, c, out)) {
        Ok(code) => code,
        Err(e) => {
            report_error(&e);
            EXIT_ERROR
        }
    }
}

fn evaluate(corpus_dir: &Path, mut cfg: Config, grid: Option<&str>, task: Option<&Path>, out: &Path) -> Result<()> {
    let grid = match grid {
        Some(g) => parse_grid(g)?,
        None => evaluation::default_grid(),
    };
    let manifest = Manifest::load(corpus_dir)?;
    let corpus = load_corpus(corpus_dir)?;
    if cfg.backend.kind == BackendKind::Mock && cfg.backend.scenario_path.is_none() {
        cfg.backend.scenario_path = manifest.scenario.as_ref().map(|s| corpus_dir.join(s));
    }
    let task_path = match (task, &manifest.task) {
        (Some(t), _) => t.to_path_buf(),
        (None, Some(t)) => corpus_dir.join(t),
        (None, None) => return Err(Error::Config("no task file given and none named in the manifest".into())),
    };
    let task = ReviewTask::load(task_path)?;
    let vocabulary = cfg.expected_labels.clone();
    let max_inflight = cfg.max_inflight;
    let pipeline = Pipeline::new(cfg)?;

    let reports_dir = out.join("reports");
    std::fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let result = loocv(&corpus, &grid, &vocabulary, max_inflight, |a| {
        let drawing = RasterImage::load(&a.drawing_path)?;
        let outcome = pipeline.review(&drawing, &task)?;
        write(
            &reports_dir.join(format!("{}.json", outcome.report.drawing_id)),
            &render_report(&outcome.report, ReportFormat::Json),
        )?;
        Ok(outcome.prediction())
    })?;
    if result.summary.n_failed == result.summary.n_folds {
        return Err(Error::Evaluation(format!("pipeline failed on every drawing: {:?}", result.summary.notes)));
    }
    write(&out.join("folds.json"), canonical_json(&serde_json::to_value(&result)?).as_bytes())?;
    let table = summary_table(&result);
    write(&out.join("summary.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn cmd_evaluate(corpus_dir: &Path, cfg: &ConfigArgs, grid: Option<&str>, task: Option<&Path>, out: &Path) -> i32 {
    match effective_config(cfg).and_then(|c| evaluate(corpus_dir, c, grid, task, out)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report_error(&e);
            EXIT_ERROR
        }
    }
}

pub fn cmd_synth(spec_file: Option<&Path>, out: &Path) -> i32 {
    let run = || -> Result<()> {
        let spec = match spec_file {
            Some(p) => ScenarioSpec::load(p)?,
            None => ScenarioSpec::default(),
        };
        let corpus = generate_corpus(&spec)?;
        let manifest = write_corpus(&corpus, out)?;
        let violating = corpus.drawings.iter().filter(|d| d.truth.violating).count();
        println!(
            "wrote {} drawings ({violating} with violations) to {}",
            manifest.drawings.len(),
            out.display()
        );
        Ok(())
    };
    match run() {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report_error(&e);
            EXIT_ERROR
        }
    }
}

pub fn cmd_cache(action: &CacheAction) -> i32 {
    let (cfg, clear) = match action {
        CacheAction::Inspect { config } => (config, false),
        CacheAction::Clear { config } => (config, true),
    };
    let run = || -> Result<()> {
        let cfg = effective_config(cfg)?;
        let dir = cfg
            .backend
            .cache_dir
            .ok_or_else(|| Error::Config("backend.cache_dir is not set".into()))?;
        let cache = ResponseCache::new(&dir)?;
        if clear {
            println!("removed {} entries from {}", cache.clear()?, dir.display());
        } else {
            let (n, bytes) = cache.stats()?;
            println!("{}: {n} entries, {bytes} bytes", dir.display());
        }
        Ok(())
    };
    match run() {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report_error(&e);
            EXIT_ERROR
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    match &cli.command {
        Command::Review { image, task, out, config } => cmd_review(image, task, config, out),
        Command::Evaluate {
            corpus,
            out,
            grid,
            task,
            config,
        } => cmd_evaluate(corpus, config, grid.as_deref(), task.as_deref(), out),
        Command::Synth { spec, out } => cmd_synth(spec.as_deref(), out),
        Command::Cache { action } => cmd_cache(action),
    }
}
