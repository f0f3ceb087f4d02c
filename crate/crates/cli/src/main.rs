//! `dsu`: generate the synthetic benchmark, train one model, run ablation
//! sweeps and the exact self-test suites.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsu::analyze::{self, PlotMetric};
use dsu::augment::AugKind;
use dsu::checks;
use dsu::data;
use dsu::train::{self, RunSpec, SweepKind, SweepRow};
use dsu::DsuError;
use log::warn;

use config::RunConfigFile;

/// Environment flag that makes `selftest` corrupt one oracle on purpose.
const FAULT_ENV: &str = "DSU_SELFTEST_INJECT_FAULT";

#[derive(Parser)]
#[command(name = "dsu", version, about = "Feature-statistics uncertainty augmentation on a synthetic multi-domain benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render every domain of the dataset section and write it with a manifest.
    GenerateData(Common),
    /// Train one model and write its report.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Run a sweep over p, insertion positions, batch size or augmentor.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: RunOverrides,
        /// p, positions, batch or method; defaults to sweep.kind.
        #[arg(long)]
        sweep: Option<String>,
        /// Runs executed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Statistics oracle, identity chain, renormalization algebra,
    /// expectation and gradient checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides training.seed (dataset.seed for generate-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Arbitrary override, `dotted.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RunOverrides {
    /// augmentor.p
    #[arg(long)]
    p: Option<f64>,
    /// augmentor.kind
    #[arg(long)]
    aug: Option<String>,
    /// training.held_out
    #[arg(long)]
    held_out: Option<String>,
    /// network.insert_positions, comma separated (empty for none).
    #[arg(long)]
    positions: Option<String>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<DsuError> for Failure {
    fn from(e: DsuError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::GenerateData(common) => generate_data(&common),
        Command::Train { common, overrides } => train_cmd(&common, &overrides),
        Command::Ablate {
            common,
            overrides,
            sweep,
            jobs,
        } => ablate(&common, &overrides, sweep.as_deref(), jobs),
        Command::Selftest { seed } => selftest(seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn split_set(s: &str) -> CliResult<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| Failure::Validation(format!("--set expects KEY=VALUE, got `{s}`")))
}

fn load_config(common: &Common, seed_key: &str, run: Option<&RunOverrides>) -> CliResult<RunConfigFile> {
    let mut sets = Vec::new();
    if let Some(seed) = common.seed {
        sets.push((seed_key.to_string(), seed.to_string()));
    }
    if let Some(dir) = &common.output_dir {
        sets.push(("output_dir".into(), serde_json::to_string(dir).unwrap_or_default()));
    }
    if let Some(o) = run {
        if let Some(p) = o.p {
            sets.push(("augmentor.p".into(), p.to_string()));
        }
        if let Some(a) = &o.aug {
            let kind: AugKind = a.parse()?;
            sets.push(("augmentor.kind".into(), format!("\"{kind}\"")));
        }
        if let Some(h) = &o.held_out {
            sets.push(("training.held_out".into(), serde_json::to_string(h).unwrap_or_default()));
        }
        if let Some(pos) = &o.positions {
            let slots = pos
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Failure::Validation(format!("--positions: {e}")))?;
            sets.push(("network.insert_positions".into(), format!("{slots:?}")));
        }
    }
    for s in &common.sets {
        sets.push(split_set(s)?);
    }
    let cfg = RunConfigFile::load(common.config.as_deref())?.with_overrides(&sets)?;
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// `<output_dir>/<config hash>-<UTC timestamp>`, created fresh.
fn run_dir(cfg: &RunConfigFile, force: bool) -> CliResult<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let dir = cfg.output_dir.join(format!("{}-{stamp}", cfg.hash()));
    if dir.exists() {
        if !force {
            return Err(Failure::Validation(format!(
                "{} already exists (pass --force to overwrite)",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(dir)
}

fn generate_data(common: &Common) -> CliResult<()> {
    let cfg = load_config(common, "dataset.seed", None)?;
    let dir = &cfg.output_dir;
    if dir.join(data::MANIFEST_FILE).exists() && !common.force {
        return Err(Failure::Validation(format!(
            "{} already holds a dataset (pass --force to overwrite)",
            dir.display()
        )));
    }
    let manifest = cfg.dataset.manifest()?;
    let domains = manifest.generate()?;
    data::export(dir, &manifest, &domains)?;
    for d in &domains {
        println!("{}: {} samples", d.spec.name, d.samples.len());
    }
    println!("wrote {}", dir.join(data::MANIFEST_FILE).display());
    Ok(())
}

fn train_cmd(common: &Common, overrides: &RunOverrides) -> CliResult<()> {
    let cfg = load_config(common, "training.seed", Some(overrides))?;
    let tc = cfg.train_config();
    tc.validate()?;
    let domains = tc.dataset.load()?;
    train::partition(&domains, &tc)?;
    let dir = run_dir(&cfg, common.force)?;
    let (report, params) = train::train_model(&tc, &domains)?;
    write_json(&dir.join("report.json"), &report)?;
    if tc.net.slots().contains(&analyze::DEFAULT_SLOT) {
        let part = train::partition(&domains, &tc)?;
        let shift = analyze::measure_shift(&params, &part.train, &part.test, analyze::DEFAULT_SLOT, None)?
            .tagged(tc.aug.kind.name(), tc.seed);
        write_json(&dir.join("shift.json"), &shift)?;
    } else {
        warn!("network has no slot {}; skipping shift analysis", analyze::DEFAULT_SLOT);
    }
    println!(
        "{} seed {} held-out {}: in-domain {:.4} out-of-domain {:.4}",
        tc.aug.kind, tc.seed, tc.held_out, report.in_domain_accuracy, report.out_of_domain_accuracy
    );
    println!("wrote {}", dir.join("report.json").display());
    Ok(())
}

fn sweep_name(kind: SweepKind) -> &'static str {
    match kind {
        SweepKind::P => "p",
        SweepKind::Positions => "positions",
        SweepKind::Batch => "batch",
        SweepKind::Method => "method",
    }
}

fn ablate(common: &Common, overrides: &RunOverrides, sweep: Option<&str>, jobs: usize) -> CliResult<()> {
    let cfg = load_config(common, "training.seed", Some(overrides))?;
    let kind = cfg.sweep_kind(sweep)?;
    let base = cfg.train_config();
    base.validate()?;
    let seeds = if cfg.sweep.seeds.is_empty() {
        vec![base.seed]
    } else {
        cfg.sweep.seeds.clone()
    };
    let held_out = if cfg.sweep.held_out.is_empty() {
        vec![base.held_out.clone()]
    } else {
        cfg.sweep.held_out.clone()
    };
    let mut specs: Vec<RunSpec> = Vec::new();
    for h in &held_out {
        let mut b = base.clone();
        b.held_out = h.clone();
        specs.extend(match kind {
            SweepKind::P => train::p_runs(&b, &cfg.sweep.p_values, &seeds)?,
            SweepKind::Positions => train::positions_runs(&b, &cfg.sweep.slot_sets, &seeds)?,
            SweepKind::Batch => train::batch_runs(&b, &cfg.sweep.batch_sizes, &seeds)?,
            SweepKind::Method => train::method_runs(&b, &cfg.sweep.methods, &seeds)?,
        });
    }
    let domains = base.dataset.load()?;
    let dir = run_dir(&cfg, common.force)?;
    let reports = train::run_all(&specs, &domains, jobs.max(1))?;
    let name = sweep_name(kind);
    let rows: Vec<SweepRow> = specs.iter().zip(&reports).map(|(s, r)| SweepRow::new(name, s, r)).collect();
    train::write_rows(&dir.join("rows.csv"), &rows)?;
    write_json(&dir.join("reports.json"), &reports)?;
    let points = analyze::emit_plot_data(&rows, PlotMetric::OutOfDomainAccuracy, &dir.join("plot.csv"))?;
    for p in &points {
        println!("{:<18} {:<12} out-of-domain {:.4} (n={})", p.group, p.x, p.y, p.n);
    }
    println!("wrote {} runs to {}", rows.len(), dir.display());
    Ok(())
}

fn selftest(seed: u64) -> CliResult<()> {
    let fault = std::env::var(FAULT_ENV).is_ok_and(|v| !v.is_empty() && v != "0");
    let results = checks::property_suite(seed, fault);
    for c in &results {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} self-test suites failed", results.len())));
    }
    Ok(())
}
