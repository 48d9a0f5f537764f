//! Batch entry points behind the `leapd` binary.
//!
//! Every verb writes into one output directory, refuses to reuse a
//! non-empty one without `--force`, and leaves a `manifest.json` holding
//! the config hash, seed and version needed to rerun it.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use crate::config::{load_config, parse_overrides, DomainLabel, RunConfig};
use crate::datasets::{load_visdrone, make_domain_split, write_dataset, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablate_prompt_length, compare_runs, write_detections, EvalReport,
};
use crate::prompting::ABLATION_LENGTHS;
use crate::render::{render_comparison_chart, render_overlays};
use crate::sample::CategorySet;
use crate::training::{self, strip_domain_modules, FitOptions, Model, CHECKPOINT_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const OUT_ENV: &str = "LEAPD_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "leapd", version, about = "Domain-prompted aerial object detection")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory. Defaults to `$LEAPD_OUT/<verb>` or `runs/<verb>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Categories {
    Synthetic,
    Visdrone,
}

impl Categories {
    pub fn set(self) -> CategorySet {
        match self {
            Categories::Synthetic => CategorySet::synthetic(),
            Categories::Visdrone => CategorySet::visdrone(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset root in the VisDrone layout (`images/`, `annotations/`).
    #[arg(long)]
    pub data: PathBuf,
    /// Domain sidecar; defaults to `<data>/metadata.txt` when present.
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "synthetic")]
    pub categories: Categories,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic train split and a held-out split.
    GenData {
        /// Training domains, `altitude,view,weather` separated by `;`.
        #[arg(long, default_value = "low,front,day;medium,bird,night")]
        train_domains: String,
        #[arg(long, default_value = "low,side,foggy")]
        heldout_domains: String,
        #[arg(long, default_value_t = 100)]
        per_domain: usize,
        #[arg(long, default_value_t = 50)]
        heldout_per_domain: usize,
    },
    /// Trains a model and writes its checkpoint and metrics log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Evaluated after every epoch and once at the end.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Fine-tune prompts first, then train the detector.
        #[arg(long)]
        two_step: bool,
    },
    /// Evaluates a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Tabulates evaluation reports against a baseline run.
    Compare {
        /// Run directories or report files, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<String>,
        #[arg(long)]
        baseline: String,
    },
    /// Trains one run per prompt length plus a manual-prompt run.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        eval_data: PathBuf,
    },
    /// Copies a checkpoint without its domain modules.
    Strip {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Draws ground truth and detections onto every image.
    RenderOverlays {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Compare { .. } => "compare",
            Command::Ablate { .. } => "ablate",
            Command::Strip { .. } => "strip",
            Command::RenderOverlays { .. } => "render-overlays",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub verb: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub args: Vec<String>,
    pub config: String,
}

/// `v<crate version>`, or the describe string baked in at build time
/// through `LEAPD_GIT_DESCRIBE`.
pub fn version_string() -> String {
    option_env!("LEAPD_GIT_DESCRIBE")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// Parses `argv` (including the program name), runs the verb and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let args: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli, &args) {
        Ok(out) => {
            println!("{}", out.display());
            EXIT_OK
        }
        Err(e @ (Error::UnknownKey(_) | Error::InvalidValue { .. })) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let overrides = parse_overrides(&common.overrides)?;
    let mut cfg = match &common.config {
        Some(path) => load_config(path, &overrides)?,
        None => {
            let mut cfg = RunConfig::default();
            for (k, v) in &overrides {
                cfg.set(k, v)?;
            }
            cfg
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn output_dir(common: &Common, verb: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(verb)
    })
}

/// Creates `dir`, or accepts an existing one only when it is empty or
/// `force` is set.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Invalid(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_domains(list: &str) -> Result<Vec<DomainLabel>> {
    list.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

fn load_data(data: &DataArgs, cfg: &RunConfig, split: Split) -> Result<DatasetIndex> {
    load_visdrone(
        &data.data,
        data.metadata.as_deref(),
        cfg.fallback_domain,
        data.categories.set(),
        split,
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    write_json(&out.join(REPORT_FILE), report)?;
    write_text(&out.join("report.txt"), &report.to_text())
}

/// Reads `<run>/report.json`, or `<run>` itself when it is a file. Bare
/// names that do not exist are looked up under `$LEAPD_OUT`.
fn read_report(run: &str) -> Result<EvalReport> {
    let mut path = PathBuf::from(run);
    if !path.exists() {
        if let Some(root) = std::env::var_os(OUT_ENV) {
            path = PathBuf::from(root).join(run);
        }
    }
    if path.is_dir() {
        path = path.join(REPORT_FILE);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn run_name(run: &str) -> String {
    let p = Path::new(run);
    let name = if p.extension().is_some_and(|e| e == "json") {
        p.parent().and_then(Path::file_name)
    } else {
        p.file_name()
    };
    name.map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| run.to_string())
}

/// Runs the parsed command and returns its output directory.
pub fn execute(cli: &Cli, args: &[String]) -> Result<PathBuf> {
    let mut cfg = resolve_config(&cli.common)?;
    let verb = cli.command.verb();
    let out = output_dir(&cli.common, verb);
    prepare_output(&out, cli.common.force)?;

    match &cli.command {
        Command::GenData {
            train_domains,
            heldout_domains,
            per_domain,
            heldout_per_domain,
        } => {
            let train = parse_domains(train_domains)?;
            let heldout = parse_domains(heldout_domains)?;
            let per = (*per_domain).max(*heldout_per_domain);
            let (tr, ho) = make_domain_split(&train, &heldout, per, cfg.seed, cfg.image_size)?;
            let tr = keep_per_domain(&tr, *per_domain);
            let ho = keep_per_domain(&ho, *heldout_per_domain);
            for (name, idx) in [("train", &tr), ("heldout", &ho)] {
                let samples = idx.load_all(cfg.image_size, cfg.channels)?;
                write_dataset(&samples, &out.join(name))?;
                info!("wrote {} {name} scenes", samples.len());
            }
        }
        Command::Train {
            data,
            eval_data,
            two_step,
        } => {
            let train_set = load_data(data, &cfg, Split::Train)?;
            let eval_set = eval_data
                .as_ref()
                .map(|p| {
                    let args = DataArgs {
                        data: p.clone(),
                        metadata: None,
                        categories: data.categories,
                    };
                    load_data(&args, &cfg, Split::Val)
                })
                .transpose()?;
            let options = FitOptions { two_step: *two_step };
            let outcome = training::train(&cfg, &train_set, eval_set.as_ref(), options, &out)?;
            if let Some(report) = outcome.result.evaluations.last() {
                write_report(&out, report)?;
            }
        }
        Command::Eval { checkpoint, data } => {
            let (model, _) = Model::load(checkpoint)?;
            cfg = model.config.clone();
            let set = load_data(data, &cfg, Split::Val)?;
            let samples = set.load_all(cfg.image_size, cfg.channels)?;
            let (report, images) = model.evaluate(&samples)?;
            write_report(&out, &report)?;
            write_detections(&out.join("detections.txt"), &images)?;
            print!("{}", report.to_text());
        }
        Command::Compare { runs, baseline } => {
            let reports = runs
                .iter()
                .map(|r| Ok((run_name(r), read_report(r)?)))
                .collect::<Result<Vec<_>>>()?;
            let baseline = run_name(baseline);
            let cmp = compare_runs(&reports, &baseline)?;
            write_text(&out.join("comparison.txt"), &cmp.to_text())?;
            write_text(&out.join("comparison.jsonl"), &cmp.to_jsonl()?)?;
            render_comparison_chart(&cmp, &out.join("comparison.png"))?;
            print!("{}", cmp.to_text());
        }
        Command::Ablate {
            lengths,
            data,
            eval_data,
        } => {
            let lengths = lengths.clone().unwrap_or_else(|| ABLATION_LENGTHS.to_vec());
            let train_set = load_data(data, &cfg, Split::Train)?;
            let eval_args = DataArgs {
                data: eval_data.clone(),
                metadata: None,
                categories: data.categories,
            };
            let eval_set = load_data(&eval_args, &cfg, Split::Val)?;
            let train = train_set.load_all(cfg.image_size, cfg.channels)?;
            let eval = eval_set.load_all(cfg.image_size, cfg.channels)?;
            let table = ablate_prompt_length(&lengths, &cfg, &train_set.categories, &train, &eval)?;
            write_text(&out.join("ablation.txt"), &table.to_text())?;
            write_text(&out.join("ablation.jsonl"), &table.to_jsonl()?)?;
            print!("{}", table.to_text());
            let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                warn!("{failed} ablation row(s) failed");
            }
        }
        Command::Strip { checkpoint } => {
            strip_domain_modules(checkpoint, &out.join(CHECKPOINT_FILE))?;
            cfg = Model::load(&out.join(CHECKPOINT_FILE))?.0.config;
        }
        Command::RenderOverlays { checkpoint, data } => {
            let (model, _) = Model::load(checkpoint)?;
            cfg = model.config.clone();
            let set = load_data(data, &cfg, Split::Val)?;
            let summary = render_overlays(&model, &set, &out.join("overlays"))?;
            if summary.skipped > 0 {
                warn!("{} image(s) could not be read", summary.skipped);
            }
            println!("{} overlays written, {} skipped", summary.written.len(), summary.skipped);
        }
    }

    let manifest = Manifest {
        verb: verb.to_string(),
        version: version_string(),
        config_hash: cfg.hash_hex(),
        seed: cfg.seed,
        args: args.to_vec(),
        config: cfg.to_text(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(out)
}

/// Keeps the first `n` entries of every domain, preserving order.
fn keep_per_domain(index: &DatasetIndex, n: usize) -> DatasetIndex {
    let mut counts = std::collections::BTreeMap::new();
    let entries = index
        .entries
        .iter()
        .filter(|e| {
            let c = counts.entry(e.domain).or_insert(0usize);
            *c += 1;
            *c <= n
        })
        .cloned()
        .collect();
    DatasetIndex {
        entries,
        ..index.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["leapd", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["leapd", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["leapd", "--help"]), EXIT_OK);
    }

    #[test]
    fn bad_override_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run([
            "leapd",
            "strip",
            "--checkpoint",
            "missing.bin",
            "--set",
            "no_such_key=1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn refuses_non_empty_output_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "keep").unwrap();
        assert!(prepare_output(dir.path(), false).is_err());
        assert!(prepare_output(dir.path(), true).is_ok());
        assert_eq!(fs::read_to_string(dir.path().join("x")).unwrap(), "keep");
    }

    #[test]
    fn run_names_come_from_directories() {
        assert_eq!(run_name("runs/learnable"), "learnable");
        assert_eq!(run_name("runs/learnable/report.json"), "learnable");
        assert_eq!(run_name("a"), "a");
    }
}
