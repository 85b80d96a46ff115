//! `groklab` command line: training, Theorem-6 verification, sweeps and
//! report emission over a results tree.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Activation;
use crate::store::{self, RunManifest, StoredRun};
use crate::sweeps::{self, Axes, RunEntry, SweepOptions, SweepSpec};
use crate::thm6::VerifyConfig;
use crate::trainer::{self, RunConfig, RELU_CHECKPOINTS};

pub const RESULTS_ENV: &str = "GROKLAB_RESULTS";

#[derive(Debug, Parser)]
#[command(name = "groklab", version, about = "Grokking experiments on modular addition")]
pub struct Cli {
    /// Results root.
    #[arg(long, global = true, env = RESULTS_ENV, default_value = "results")]
    pub results: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run and persist metrics, checkpoints and a manifest.
    Train(TrainArgs),
    /// Check the Theorem-6 sign rule on a stored run's checkpoints.
    #[command(name = "verify-thm6")]
    VerifyThm6(VerifyArgs),
    /// Run every cell and seed of a sweep, skipping completed runs.
    Sweep(SweepArgs),
    /// Aggregate a results tree into table and plot-data CSVs.
    Report(ReportArgs),
    /// List presets with their pinned hashes, or print one.
    Presets {
        /// Print the expanded preset as JSON.
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Debug, Args, Default)]
pub struct RunOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight decay; 0 gives the control.
    #[arg(long)]
    pub eta: Option<f64>,
    /// `square` (x²) or `relu`.
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub gram_window: Option<usize>,
    #[arg(long)]
    pub modulus: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub metric_cadence: Option<usize>,
    /// Comma-separated checkpoint epochs.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<usize>>,
}

impl RunOverrides {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(a) = self.activation {
            // the schedule follows the activation unless given explicitly
            if a == Activation::Relu && c.activation != Activation::Relu {
                c.checkpoint_epochs = RELU_CHECKPOINTS.to_vec();
            }
            c.activation = a;
        }
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.epochs, self.epochs);
        set(&mut c.gram_window, self.gram_window);
        set(&mut c.modulus, self.modulus);
        set(&mut c.hidden, self.hidden);
        set(&mut c.metric_cadence, self.metric_cadence);
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = self.eta {
            c.eta = e;
        }
        if let Some(p) = self.train_fraction {
            c.train_fraction = p;
        }
        if let Some(ck) = &self.checkpoints {
            c.checkpoint_epochs = ck.clone();
        }
        c.checkpoint_epochs.retain(|&e| e <= c.epochs);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; its `[run]` section is the base.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a preset's base run.
    #[arg(long)]
    pub preset: Option<String>,
    /// Sweep directory name under the results root.
    #[arg(long, default_value = "train")]
    pub name: String,
    #[command(flatten)]
    pub overrides: RunOverrides,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Run directory holding a manifest and checkpoints.
    pub run: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated checkpoint epochs (default: the run's schedule).
    #[arg(long, value_delimiter = ',')]
    pub epochs: Option<Vec<usize>>,
    /// Audit the first N pairs with the leave-two-out projector.
    #[arg(long)]
    pub exact_audit: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Preset name.
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    /// TOML config with a `[sweep]` section.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Parallel runs (default: the spec's budget).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Leave-two-out audit size for runs that are verified.
    #[arg(long)]
    pub exact_audit: Option<usize>,
    /// Subset of seeds, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results tree (a sweep directory or the whole root).
    pub tree: Option<PathBuf>,
    /// Output directory (default: `<tree>/report`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Structured config file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub run: Option<RunConfig>,
    pub sweep: Option<SweepSpec>,
    pub verify: Option<VerifyConfig>,
}

pub fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

// ---------------------------------------------------------------- presets

pub const PRESETS: [&str; 7] = [
    "headline-grok",
    "headline-control",
    "relu",
    "eta-sweep",
    "window-sweep",
    "mp-sweep",
    "eta1e5-extended",
];

/// sha256 of each preset's canonical JSON, in [`PRESETS`] order.
pub const PRESET_HASHES: [&str; 7] = [
    "10b1f17bed71e155202b6c2f857c078820b41e5b5f38c387af1196f6a7b8b1a9",
    "15db3bdec81adc4e6a6ec7e5b0e7e730cf370bc81b5b7b9195fe1c292809b325",
    "16a28cc398dd9532311bbb73b9d543ef775a8a6b7b6593453517249669ecb202",
    "4b541ed9ed014e629df3cf01f69214d857410b2349f33f0b49a18379f9790781",
    "de64dd11b5ee0b4ac06e4e4b6061dec84c7d45b02d09df795038249ceeb0c4ad",
    "db5b7410bcab93d9ee8554dfcb5cc43f497106f64a2775a9ea90dede88f2d660",
    "a21dea6e0d67a915c29f642b670229e470e1e70cf434fbddba94f40d207f49db",
];

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

pub fn preset(name: &str) -> Result<SweepSpec> {
    let base = RunConfig::default();
    let spec = |base: RunConfig, axes: Axes| SweepSpec {
        name: name.to_string(),
        base,
        axes,
        budget: 1,
        verify: None,
    };
    Ok(match name {
        "headline-grok" => SweepSpec {
            verify: Some(VerifyConfig::default()),
            ..spec(base, Axes { seed: seeds(5), ..Default::default() })
        },
        "headline-control" => spec(
            RunConfig { eta: 0.0, ..base },
            Axes { seed: seeds(5), ..Default::default() },
        ),
        "relu" => SweepSpec {
            verify: Some(VerifyConfig::for_activation(Activation::Relu, base.eta)),
            ..spec(
                RunConfig {
                    activation: Activation::Relu,
                    epochs: 800,
                    checkpoint_epochs: RELU_CHECKPOINTS.to_vec(),
                    ..base
                },
                Axes { seed: seeds(3), ..Default::default() },
            )
        },
        "eta-sweep" => spec(
            RunConfig { epochs: 600, checkpoint_epochs: Vec::new(), ..base },
            Axes {
                seed: seeds(5),
                eta: vec![1e-5, 5e-5, 1e-4, 2e-4, 5e-4],
                ..Default::default()
            },
        ),
        "window-sweep" => spec(
            RunConfig { checkpoint_epochs: Vec::new(), ..base },
            Axes {
                seed: seeds(3),
                eta: vec![2e-4, 0.0],
                gram_window: vec![5, 10, 20, 30],
                ..Default::default()
            },
        ),
        "mp-sweep" => spec(
            RunConfig { checkpoint_epochs: Vec::new(), ..base },
            Axes {
                seed: seeds(5),
                modulus: vec![41, 71, 127],
                train_fraction: vec![0.1, 0.2, 0.3, 0.5],
                ..Default::default()
            },
        ),
        "eta1e5-extended" => spec(
            RunConfig { eta: 1e-5, epochs: 2000, checkpoint_epochs: Vec::new(), ..base },
            Axes { seed: vec![0], ..Default::default() },
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            )))
        }
    })
}

pub fn canonical_json(spec: &SweepSpec) -> Vec<u8> {
    serde_json::to_vec(spec).expect("sweep specs serialize")
}

pub fn preset_hash(name: &str) -> Result<String> {
    Ok(store::sha256_hex(&canonical_json(&preset(name)?)))
}

// ---------------------------------------------------------------- commands

fn fire_text(f: crate::detectors::FireResult) -> String {
    f.epoch().map(|e| e.to_string()).unwrap_or_else(|| "never".into())
}

fn print_fires(f: &crate::detectors::FireSummary) {
    println!("slope fire:      {}", fire_text(f.slope_fire));
    println!("rho_tian fire:   {}", fire_text(f.rho_fire));
    println!("train acc = 1:   {}", fire_text(f.train_acc_1));
    for (level, fire) in &f.test_crossings {
        println!("test acc >= {level}: {}", fire_text(*fire));
    }
    if let Some(g) = f.late_gap23 {
        println!("late sigma2/sigma3: {g:.4}");
    }
}

pub fn cmd_train(results: &Path, args: &TrainArgs, command: Vec<String>) -> Result<PathBuf> {
    let (mut config, cell) = match (&args.config, &args.preset) {
        (Some(_), Some(_)) => return Err(Error::Config("use either --config or --preset".into())),
        (Some(p), None) => (read_config(p)?.run.unwrap_or_default(), "custom".to_string()),
        (None, Some(name)) => (preset(name)?.base, name.clone()),
        (None, None) => (RunConfig::default(), "custom".to_string()),
    };
    args.overrides.apply(&mut config);
    config.validate()?;
    let dir = store::run_dir(results, &args.name, &cell, config.seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest = RunManifest::running(&config, Some(command));
    store::write_manifest(&dir, &manifest)?;
    let record = match trainer::run(&config) {
        Ok(r) => r,
        Err(e) => {
            store::write_failure(&dir, manifest, &e)?;
            return Err(e);
        }
    };
    store::write_run(&dir, &record, manifest)?;
    println!("run directory:   {}", dir.display());
    println!("epochs:          {} ({:.1} s)", record.metrics.len(), record.wall_time_secs);
    print_fires(&record.fires);
    Ok(dir)
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<Vec<PathBuf>> {
    let run = StoredRun::load(&args.run)?;
    let config = &run.manifest.config;
    let mut verify = match &args.config {
        Some(p) => read_config(p)?.verify.unwrap_or_else(|| VerifyConfig::for_activation(config.activation, config.eta)),
        None => VerifyConfig::for_activation(config.activation, config.eta),
    };
    verify.eta = config.eta;
    verify.checkpoint_epochs = match &args.epochs {
        Some(e) => e.clone(),
        None => run.checkpoint_epochs(),
    };
    if let Some(k) = args.top_k {
        verify.top_k = k;
        verify.exact_pairs = verify.exact_pairs.min(k);
    }
    verify.validate()?;
    let available = run.checkpoint_epochs();
    let missing: Vec<usize> = verify
        .checkpoint_epochs
        .iter()
        .copied()
        .filter(|e| !available.contains(e))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCheckpoints { missing, available });
    }
    let checkpoints = verify
        .checkpoint_epochs
        .iter()
        .map(|&e| run.checkpoint(e))
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = run.manifest.clone();
    let results = sweeps::verify_checkpoints(config, &checkpoints, &verify, args.exact_audit, Some((&run.dir, &mut manifest)))?;
    store::write_manifest(&run.dir, &manifest)?;
    let mut paths = Vec::new();
    for v in &results {
        let r = &v.report;
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
        println!(
            "epoch {:>5}: sign_match {} ({} match, {} mismatch, {} indeterminate), median |S| {}",
            r.epoch,
            fmt(r.sign_match),
            r.n_match,
            r.n_mismatch,
            r.n_indeterminate,
            fmt(r.median_abs_s)
        );
        if let Some((agree, total)) = v.audit_agreement() {
            println!("epoch {:>5}: exact audit {agree}/{total} agree", r.epoch);
        }
        paths.push(run.dir.join(store::thm6_name(r.epoch)));
    }
    Ok(paths)
}

fn describe(e: &RunEntry) -> String {
    let status = match (&e.error, e.resumed) {
        (Some(err), _) => format!("FAILED: {err}"),
        (None, true) => "done (resumed)".into(),
        (None, false) => "done".into(),
    };
    let fires = e
        .fires
        .as_ref()
        .map(|f| {
            format!(
                " slope={} rho={} test0.5={} test0.99={}",
                fire_text(f.slope_fire),
                fire_text(f.rho_fire),
                fire_text(f.test_crossing(0.5)),
                fire_text(f.test_crossing(0.99))
            )
        })
        .unwrap_or_default();
    format!("{} seed {}: {status}{fires}", e.cell, e.seed)
}

pub fn cmd_sweep(results: &Path, args: &SweepArgs, command: Vec<String>) -> Result<Vec<RunEntry>> {
    let mut spec = match (&args.preset, &args.spec) {
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => read_config(path)?
            .sweep
            .ok_or_else(|| Error::Config(format!("{} has no [sweep] section", path.display())))?,
        _ => return Err(Error::Config("give exactly one of --preset or --spec".into())),
    };
    if let Some(s) = &args.seeds {
        spec.axes.seed = s.clone();
    }
    let opts = SweepOptions {
        jobs: args.jobs,
        audit: args.exact_audit,
        command: Some(command),
    };
    let entries = sweeps::run_sweep(&spec, results, &opts, &|e| println!("{}", describe(e)))?;
    let failed = entries.iter().filter(|e| !e.done()).count();
    println!("{} runs, {} failed", entries.len(), failed);
    Ok(entries)
}

pub fn cmd_report(results: &Path, args: &ReportArgs) -> Result<Vec<PathBuf>> {
    let tree = args.tree.clone().unwrap_or_else(|| results.to_path_buf());
    if !tree.is_dir() {
        return Err(Error::MissingArtifact(format!("results tree {} does not exist", tree.display())));
    }
    let entries = sweeps::load_entries(&tree)?;
    if entries.is_empty() {
        return Err(Error::MissingArtifact(format!("no runs under {}", tree.display())));
    }
    let failed: Vec<&RunEntry> = entries.iter().filter(|e| !e.done()).collect();
    for e in &failed {
        println!("skipping {}", describe(e));
    }
    let done: Vec<RunEntry> = entries.iter().filter(|e| e.done()).cloned().collect();
    if done.is_empty() {
        return Err(Error::MissingArtifact(format!("no completed runs under {}", tree.display())));
    }
    let out = args.out.clone().unwrap_or_else(|| tree.join("report"));
    let summary = sweeps::aggregate(&done)?;
    let mut written = sweeps::emit_tables(&summary, &out)?;
    written.extend(sweeps::emit_plot_data(&done, &out)?);
    for c in &summary.cells {
        println!(
            "{}: {} seeds, grok {}/{}, slope fired {}/{}, rho fired {}/{}",
            c.cell,
            c.seeds.len(),
            c.n_grok,
            c.seeds.len(),
            c.slope_fire.fired,
            c.slope_fire.total,
            c.rho_fire.fired,
            c.rho_fire.total
        );
    }
    for s in &summary.separations {
        println!("separation {} / {}: {:.2}x", s.grok, s.control, s.ratio);
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}

fn cmd_presets(show: Option<&str>) -> Result<()> {
    match show {
        Some(name) => {
            let spec = preset(name)?;
            println!("{}", serde_json::to_string_pretty(&spec)?);
        }
        None => {
            for name in PRESETS {
                let spec = preset(name)?;
                println!("{name:<18} {:>3} runs  sha256 {}", spec.runs().len(), preset_hash(name)?);
            }
        }
    }
    Ok(())
}

pub fn dispatch(cli: &Cli, command: Vec<String>) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(&cli.results, a, command).map(drop),
        Command::VerifyThm6(a) => cmd_verify(a).map(drop),
        Command::Sweep(a) => {
            let entries = cmd_sweep(&cli.results, a, command)?;
            // a sweep with failed runs still exits nonzero
            match entries.iter().find_map(|e| e.error.clone()) {
                Some(err) => Err(Error::MissingArtifact(format!("some runs failed (first: {err})"))),
                None => Ok(()),
            }
        }
        Command::Report(a) => cmd_report(&cli.results, a).map(drop),
        Command::Presets { show } => cmd_presets(show.as_deref()),
    }
}

/// Entry point shared by the binary and tests.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let command = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
