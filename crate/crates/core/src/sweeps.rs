//! Multi-run experiments: cartesian sweeps over run settings, resumable
//! execution against a results tree, cross-seed aggregation and table output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::detectors::{lead_lag, FireResult, FireSummary};
use crate::error::{Error, Result};
use crate::model::Activation;
use crate::stats::{median, Spread};
use crate::store::{self, RunManifest, RunStatus, StoredRun};
use crate::thm6::{self, CheckpointVerification, VerifyConfig};
use crate::trainer::{self, Checkpoint, RunConfig};

/// Swept values. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Axes {
    pub seed: Vec<u64>,
    pub eta: Vec<f64>,
    pub gram_window: Vec<usize>,
    #[serde(alias = "M")]
    pub modulus: Vec<usize>,
    #[serde(alias = "p")]
    pub train_fraction: Vec<f64>,
    pub activation: Vec<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub name: String,
    pub base: RunConfig,
    pub axes: Axes,
    /// Maximum number of runs in flight.
    pub budget: usize,
    /// Theorem-6 verification after each run with `eta > 0`. The ridge is
    /// always the run's own `eta`; an empty epoch list means the run's
    /// checkpoint schedule.
    pub verify: Option<VerifyConfig>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            name: "sweep".into(),
            base: RunConfig::default(),
            axes: Axes::default(),
            budget: 1,
            verify: None,
        }
    }
}

/// One point of the sweep grid, before seeds are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub cell: String,
    pub seed: u64,
    pub config: RunConfig,
}

fn axis_or<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("sweep name {:?} is not a directory name", self.name)));
        }
        let mut seeds = self.axes.seed.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate seeds in sweep".into()));
        }
        for run in self.runs() {
            run.config.validate()?;
        }
        Ok(())
    }

    /// Grid cells in a fixed order: activation, modulus, train fraction,
    /// eta, window (last axis varies fastest).
    pub fn cells(&self) -> Vec<Cell> {
        let b = &self.base;
        let mut out = Vec::new();
        for &act in &axis_or(&self.axes.activation, b.activation) {
            for &m in &axis_or(&self.axes.modulus, b.modulus) {
                for &p in &axis_or(&self.axes.train_fraction, b.train_fraction) {
                    for &eta in &axis_or(&self.axes.eta, b.eta) {
                        for &w in &axis_or(&self.axes.gram_window, b.gram_window) {
                            let config = RunConfig {
                                activation: act,
                                modulus: m,
                                train_fraction: p,
                                eta,
                                gram_window: w,
                                ..b.clone()
                            };
                            out.push(Cell {
                                id: self.cell_id(&config),
                                config,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    fn cell_id(&self, c: &RunConfig) -> String {
        let mut parts = Vec::new();
        if !self.axes.activation.is_empty() {
            parts.push(format!("act={}", c.activation.name()));
        }
        if !self.axes.modulus.is_empty() {
            parts.push(format!("M={}", c.modulus));
        }
        if !self.axes.train_fraction.is_empty() {
            parts.push(format!("p={}", c.train_fraction));
        }
        if !self.axes.eta.is_empty() {
            parts.push(format!("eta={}", c.eta));
        }
        if !self.axes.gram_window.is_empty() {
            parts.push(format!("W={}", c.gram_window));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join("_")
        }
    }

    /// Every run of the sweep; seeds vary fastest.
    pub fn runs(&self) -> Vec<PlannedRun> {
        let seeds = axis_or(&self.axes.seed, self.base.seed);
        self.cells()
            .into_iter()
            .flat_map(|cell| {
                seeds.iter().map(move |&seed| PlannedRun {
                    cell: cell.id.clone(),
                    seed,
                    config: RunConfig {
                        seed,
                        ..cell.config.clone()
                    },
                })
            })
            .collect()
    }
}

/// Theorem-6 result at one checkpoint, as kept in sweep entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm6Point {
    pub epoch: usize,
    pub sign_match: Option<f64>,
    pub median_abs_s: Option<f64>,
    /// `(agreeing, audited)` from the leave-two-out audit.
    pub audit: Option<(usize, usize)>,
}

impl Thm6Point {
    pub fn of(v: &CheckpointVerification) -> Self {
        Thm6Point {
            epoch: v.report.epoch,
            sign_match: v.report.sign_match,
            median_abs_s: v.report.median_abs_s,
            audit: v.audit_agreement(),
        }
    }
}

/// Lightweight outcome of one run. Checkpoints and metric logs stay on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub cell: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dir: Option<PathBuf>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub fires: Option<FireSummary>,
    pub thm6: Vec<Thm6Point>,
    /// True when the run was found complete on disk and not re-executed.
    pub resumed: bool,
}

impl RunEntry {
    pub fn done(&self) -> bool {
        self.status == RunStatus::Done && self.fires.is_some()
    }
}

/// Verifies `checkpoints` and writes `thm6_<epoch>.json` plus the pair CSV
/// into `dir` when given, recording hashes in `manifest`.
pub fn verify_checkpoints(
    config: &RunConfig,
    checkpoints: &[Checkpoint],
    verify: &VerifyConfig,
    audit: Option<usize>,
    out: Option<(&Path, &mut RunManifest)>,
) -> Result<Vec<CheckpointVerification>> {
    let cfg = VerifyConfig {
        eta: config.eta,
        checkpoint_epochs: if verify.checkpoint_epochs.is_empty() {
            config.checkpoint_epochs.clone()
        } else {
            verify.checkpoint_epochs.clone()
        },
        ..verify.clone()
    };
    cfg.validate()?;
    let available: Vec<usize> = checkpoints.iter().map(|c| c.epoch).collect();
    let missing: Vec<usize> = cfg
        .checkpoint_epochs
        .iter()
        .copied()
        .filter(|e| !available.contains(e))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCheckpoints { missing, available });
    }
    let split = config.make_split()?;
    let mut results = Vec::new();
    let mut out = out;
    for &epoch in &cfg.checkpoint_epochs {
        let ck = checkpoints.iter().find(|c| c.epoch == epoch).expect("checked above");
        let f = thm6::checkpoint_features(&split, &ck.params, config.activation)?;
        let v = thm6::verify_features(f.as_ref(), &cfg, epoch, audit)?;
        if let Some((dir, manifest)) = out.as_mut() {
            write_verification(dir, &v)?;
            store::record_file(dir, manifest, &store::thm6_name(epoch))?;
            store::record_file(dir, manifest, &store::thm6_pairs_name(epoch))?;
        }
        results.push(v);
    }
    Ok(results)
}

pub fn write_verification(dir: &Path, v: &CheckpointVerification) -> Result<()> {
    let epoch = v.report.epoch;
    store::write_json(&dir.join(store::thm6_name(epoch)), v)?;
    let path = dir.join(store::thm6_pairs_name(epoch));
    let mut w = csv::Writer::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    w.write_record(["j", "l", "s", "b_jl", "resid", "verdict"])?;
    for p in &v.report.pairs {
        w.write_record([
            p.j.to_string(),
            p.l.to_string(),
            p.s.to_string(),
            p.b_jl.to_string(),
            p.resid.to_string(),
            format!("{:?}", p.verdict).to_lowercase(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Thm6 points already written next to a stored run.
pub fn stored_thm6(run: &StoredRun) -> Result<Vec<Thm6Point>> {
    let mut epochs: Vec<usize> = run
        .manifest
        .files
        .keys()
        .filter_map(|n| n.strip_prefix("thm6_")?.strip_suffix(".json")?.parse().ok())
        .collect();
    epochs.sort_unstable();
    epochs
        .into_iter()
        .map(|e| {
            let path = run.dir.join(store::thm6_name(e));
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let v: CheckpointVerification = serde_json::from_slice(&bytes)?;
            Ok(Thm6Point::of(&v))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Overrides the spec's budget when set.
    pub jobs: Option<usize>,
    /// Leave-two-out audit size for Theorem-6 verification.
    pub audit: Option<usize>,
    /// Command line recorded in each manifest.
    pub command: Option<Vec<String>>,
}

fn completed_entry(dir: &Path, planned: &PlannedRun, want_thm6: bool) -> Option<RunEntry> {
    let run = StoredRun::load(dir).ok()?;
    let m = &run.manifest;
    if m.status != RunStatus::Done || m.config != planned.config || !store::verify_hashes(dir, m).is_empty() {
        return None;
    }
    let thm6 = stored_thm6(&run).ok()?;
    if want_thm6 && thm6.is_empty() {
        return None;
    }
    Some(RunEntry {
        cell: planned.cell.clone(),
        seed: planned.seed,
        config: planned.config.clone(),
        dir: Some(dir.to_path_buf()),
        status: RunStatus::Done,
        error: None,
        fires: m.fires.clone(),
        thm6,
        resumed: true,
    })
}

fn execute(root: &Path, spec: &SweepSpec, planned: &PlannedRun, opts: &SweepOptions) -> RunEntry {
    let dir = store::run_dir(root, &spec.name, &planned.cell, planned.seed);
    let want_thm6 = spec.verify.is_some() && planned.config.eta > 0.0;
    if let Some(entry) = completed_entry(&dir, planned, want_thm6) {
        return entry;
    }
    let mut entry = RunEntry {
        cell: planned.cell.clone(),
        seed: planned.seed,
        config: planned.config.clone(),
        dir: Some(dir.clone()),
        status: RunStatus::Failed,
        error: None,
        fires: None,
        thm6: Vec::new(),
        resumed: false,
    };
    let manifest = RunManifest::running(&planned.config, opts.command.clone());
    let result = (|| -> Result<(FireSummary, Vec<Thm6Point>)> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        store::write_manifest(&dir, &manifest)?;
        let record = trainer::run(&planned.config)?;
        let mut manifest = store::write_run(&dir, &record, manifest.clone())?;
        let mut points = Vec::new();
        if let (true, Some(verify)) = (want_thm6, spec.verify.as_ref()) {
            let vs = verify_checkpoints(&record.config, &record.checkpoints, verify, opts.audit, Some((&dir, &mut manifest)))?;
            points = vs.iter().map(Thm6Point::of).collect();
            store::write_manifest(&dir, &manifest)?;
        }
        Ok((record.fires, points))
    })();
    match result {
        Ok((fires, thm6)) => {
            entry.status = RunStatus::Done;
            entry.fires = Some(fires);
            entry.thm6 = thm6;
        }
        Err(e) => {
            entry.error = Some(e.to_string());
            // best effort; the entry carries the error either way
            let _ = store::write_failure(&dir, manifest, &e);
        }
    }
    entry
}

/// Runs every planned run not already complete under `root/<name>`.
/// Per-run failures are captured in the returned entries; only an invalid
/// spec or unusable results root is an error.
pub fn run_sweep(
    spec: &SweepSpec,
    root: &Path,
    opts: &SweepOptions,
    progress: &(dyn Fn(&RunEntry) + Sync),
) -> Result<Vec<RunEntry>> {
    spec.validate()?;
    let sweep_dir = root.join(&spec.name);
    fs::create_dir_all(&sweep_dir).map_err(|e| Error::io(&sweep_dir, e))?;
    store::write_json(&sweep_dir.join("sweep.json"), spec)?;

    let planned = spec.runs();
    let jobs = opts.jobs.unwrap_or(spec.budget).clamp(1, planned.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunEntry>>> = Mutex::new(vec![None; planned.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(p) = planned.get(i) else { break };
                let entry = execute(root, spec, p, opts);
                progress(&entry);
                slots.lock().expect("no panics while holding the lock")[i] = Some(entry);
            });
        }
    });
    let entries: Vec<RunEntry> = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|e| e.expect("every slot filled"))
        .collect();
    store::write_json(&sweep_dir.join("entries.json"), &entries)?;
    Ok(entries)
}

/// Entries of every run stored under `root` (recursively), including
/// failed ones. The cell is the run's grandparent-relative path.
pub fn load_entries(root: &Path) -> Result<Vec<RunEntry>> {
    let mut out = Vec::new();
    for dir in store::find_runs(root)? {
        let run = StoredRun::load(&dir)?;
        let seed = run.manifest.config.seed;
        let cell = dir
            .parent()
            .and_then(|p| p.strip_prefix(root).ok())
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "base".into());
        let fires = match (&run.manifest.fires, run.manifest.status) {
            (Some(f), _) => Some(f.clone()),
            (None, RunStatus::Done) => Some(FireSummary::evaluate(&run.metrics, &run.manifest.config.detector)),
            _ => None,
        };
        out.push(RunEntry {
            cell,
            seed,
            config: run.manifest.config.clone(),
            dir: Some(dir.clone()),
            status: run.manifest.status,
            error: run.manifest.error.clone(),
            fires,
            thm6: stored_thm6(&run)?,
            resumed: true,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- aggregation

/// Fire-epoch statistics; runs that never fired count in `total` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FireStats {
    pub fired: usize,
    pub total: usize,
    pub spread: Option<Spread>,
    pub epochs: Vec<Option<usize>>,
}

impl FireStats {
    fn of(fires: &[FireResult]) -> Self {
        let vals: Vec<f64> = fires.iter().filter_map(|f| f.epoch()).map(|e| e as f64).collect();
        FireStats {
            fired: vals.len(),
            total: fires.len(),
            spread: Spread::of(&vals),
            epochs: fires.iter().map(|f| f.epoch()).collect(),
        }
    }
}

/// Cross-seed Theorem-6 statistics at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm6Stats {
    pub epoch: usize,
    pub n_seeds: usize,
    pub median_abs_s: Option<f64>,
    pub sign_match: Option<Spread>,
    pub audit_agree: usize,
    pub audit_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    /// Config of the lowest seed, identifying the cell's settings.
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub n_failed: usize,
    /// Fraction of seeds reaching test accuracy 0.99.
    pub grok_rate: f64,
    pub n_grok: usize,
    pub slope_fire: FireStats,
    pub rho_fire: FireStats,
    pub test_05: FireStats,
    pub test_099: FireStats,
    pub train_1: FireStats,
    /// Per-seed late-stage σ₂/σ₃ and their median.
    pub late_gap23: Vec<Option<f64>>,
    pub late_gap23_median: Option<f64>,
    pub late_gap23_spread: Option<Spread>,
    pub peak_gap23_median: Option<f64>,
    /// `t(slope fire) − t(test ≥ 0.99)` over seeds where both happened.
    pub slope_lag: Option<Spread>,
    /// `t(test ≥ 0.5) − t(ρ fire)` over seeds where both happened.
    pub rho_lead: Option<Spread>,
    pub max_rho: Option<f64>,
    pub thm6: Vec<Thm6Stats>,
}

/// Grok cell against its control (same settings with `eta = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub grok: String,
    pub control: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: Vec<CellSummary>,
    pub separations: Vec<Separation>,
}

impl SweepSummary {
    pub fn cell(&self, id: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.cell == id)
    }
}

fn summarize_cell(cell: &str, mut runs: Vec<&RunEntry>, failed: usize) -> Result<CellSummary> {
    if runs.is_empty() {
        return Err(Error::MissingCell(cell.to_string()));
    }
    runs.sort_by_key(|r| r.seed);
    let fires: Vec<&FireSummary> = runs.iter().map(|r| r.fires.as_ref().expect("done entries")).collect();
    let stats = |f: &dyn Fn(&FireSummary) -> FireResult| FireStats::of(&fires.iter().map(|s| f(s)).collect::<Vec<_>>());
    let spread_of = |v: Vec<Option<i64>>| Spread::of(&v.into_iter().flatten().map(|x| x as f64).collect::<Vec<_>>());

    let n_grok = fires.iter().filter(|f| f.max_test_acc >= 0.99).count();
    let late: Vec<Option<f64>> = fires.iter().map(|f| f.late_gap23).collect();
    let late_vals: Vec<f64> = late.iter().flatten().copied().collect();
    let peaks: Vec<f64> = fires.iter().filter_map(|f| f.peak_gap23).collect();

    let mut by_epoch: BTreeMap<usize, Vec<&Thm6Point>> = BTreeMap::new();
    for r in &runs {
        for p in &r.thm6 {
            by_epoch.entry(p.epoch).or_default().push(p);
        }
    }
    let thm6 = by_epoch
        .into_iter()
        .map(|(epoch, pts)| {
            let sm: Vec<f64> = pts.iter().filter_map(|p| p.sign_match).collect();
            let s: Vec<f64> = pts.iter().filter_map(|p| p.median_abs_s).collect();
            let (agree, total) = pts
                .iter()
                .filter_map(|p| p.audit)
                .fold((0, 0), |(a, t), (x, y)| (a + x, t + y));
            Thm6Stats {
                epoch,
                n_seeds: pts.len(),
                median_abs_s: median(&s),
                sign_match: Spread::of(&sm),
                audit_agree: agree,
                audit_total: total,
            }
        })
        .collect();

    Ok(CellSummary {
        cell: cell.to_string(),
        config: runs[0].config.clone(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        n_failed: failed,
        grok_rate: n_grok as f64 / runs.len() as f64,
        n_grok,
        slope_fire: stats(&|f| f.slope_fire),
        rho_fire: stats(&|f| f.rho_fire),
        test_05: stats(&|f| f.test_crossing(0.5)),
        test_099: stats(&|f| f.test_crossing(0.99)),
        train_1: stats(&|f| f.train_acc_1),
        late_gap23_median: median(&late_vals),
        late_gap23_spread: Spread::of(&late_vals),
        late_gap23: late,
        peak_gap23_median: median(&peaks),
        slope_lag: spread_of(fires.iter().map(|f| lead_lag(f.slope_fire, f.test_crossing(0.99))).collect()),
        rho_lead: spread_of(fires.iter().map(|f| lead_lag(f.test_crossing(0.5), f.rho_fire)).collect()),
        max_rho: fires.iter().filter_map(|f| f.max_rho).reduce(f64::max),
        thm6,
    })
}

/// Settings that identify a control partner: everything but `eta` and `seed`.
fn control_key(c: &RunConfig) -> RunConfig {
    RunConfig {
        eta: 0.0,
        seed: 0,
        data_seed: None,
        checkpoint_epochs: Vec::new(),
        ..c.clone()
    }
}

/// Groups done entries by cell. Failed entries are counted but carry no
/// statistics; a cell with no successful run is a [`Error::MissingCell`].
pub fn aggregate(entries: &[RunEntry]) -> Result<SweepSummary> {
    let mut groups: BTreeMap<&str, (Vec<&RunEntry>, usize)> = BTreeMap::new();
    for e in entries {
        let g = groups.entry(e.cell.as_str()).or_default();
        if e.done() {
            g.0.push(e);
        } else {
            g.1 += 1;
        }
    }
    if groups.is_empty() {
        return Err(Error::MissingCell("no runs to aggregate".into()));
    }
    let cells = groups
        .into_iter()
        .map(|(cell, (runs, failed))| summarize_cell(cell, runs, failed))
        .collect::<Result<Vec<_>>>()?;

    let mut separations = Vec::new();
    for g in cells.iter().filter(|c| c.config.eta > 0.0) {
        let key = control_key(&g.config);
        let control = cells
            .iter()
            .find(|c| c.config.eta == 0.0 && control_key(&c.config) == key);
        if let (Some(c), Some(num)) = (control, g.late_gap23_median) {
            if let Some(den) = c.late_gap23_median.filter(|d| *d > 0.0) {
                separations.push(Separation {
                    grok: g.cell.clone(),
                    control: c.cell.clone(),
                    ratio: num / den,
                });
            }
        }
    }
    Ok(SweepSummary { cells, separations })
}

// ---------------------------------------------------------------- tables

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn interval(s: Option<Spread>, lo: fn(&Spread) -> f64, hi: fn(&Spread) -> f64) -> String {
    s.map(|s| format!("[{}, {}]", lo(&s), hi(&s))).unwrap_or_default()
}

fn iqr(s: Option<Spread>) -> String {
    interval(s, |s| s.q25, |s| s.q75)
}

fn range(s: Option<Spread>) -> String {
    interval(s, |s| s.min, |s| s.max)
}

fn fire_list(f: &FireStats) -> String {
    let items: Vec<String> = f
        .epochs
        .iter()
        .map(|e| e.map(|x| x.to_string()).unwrap_or_else(|| "-".into()))
        .collect();
    format!("[{}]", items.join(", "))
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the table CSVs that the summary has data for, plus
/// `summary.json`. Returns the written paths.
pub fn emit_tables(summary: &SweepSummary, target: &Path) -> Result<Vec<PathBuf>> {
    if summary.cells.is_empty() {
        return Err(Error::MissingCell("empty summary".into()));
    }
    fs::create_dir_all(target).map_err(|e| Error::io(target, e))?;
    let mut written = Vec::new();

    let t1: Vec<Vec<String>> = summary
        .cells
        .iter()
        .flat_map(|c| {
            c.thm6.iter().map(move |t| {
                let sm = t.sign_match;
                vec![
                    c.cell.clone(),
                    t.epoch.to_string(),
                    opt(t.median_abs_s),
                    opt(sm.map(|s| s.median)),
                    iqr(sm),
                    range(sm),
                    t.n_seeds.to_string(),
                    format!("{}/{}", t.audit_agree, t.audit_total),
                ]
            })
        })
        .collect();
    if !t1.is_empty() {
        let p = target.join("table1_thm6.csv");
        write_table(
            &p,
            &["cell", "epoch", "median_absS", "match_median", "match_IQR", "match_range", "n_seeds", "audit_agree"],
            &t1,
        )?;
        written.push(p);
    }

    if !summary.separations.is_empty() {
        let mut t2 = Vec::new();
        let mut t4 = Vec::new();
        for s in &summary.separations {
            let g = summary.cell(&s.grok).expect("separation cells exist");
            let c = summary.cell(&s.control).expect("separation cells exist");
            for cell in [g, c] {
                t2.push(vec![
                    cell.cell.clone(),
                    cell.config.eta.to_string(),
                    opt(cell.slope_fire.spread.map(|x| x.median)),
                    iqr(cell.slope_fire.spread),
                    format!("{}/{}", cell.slope_fire.fired, cell.slope_fire.total),
                    opt(cell.late_gap23_median),
                    range(cell.late_gap23_spread),
                    s.ratio.to_string(),
                    opt(cell.slope_lag.map(|x| x.median)),
                    iqr(cell.slope_lag),
                    cell.seeds.len().to_string(),
                ]);
            }
            t4.push(vec![
                g.config.gram_window.to_string(),
                fire_list(&g.slope_fire),
                fire_list(&c.slope_fire),
                format!("{}/{}", g.slope_fire.fired, g.slope_fire.total),
                format!("{}/{}", c.slope_fire.fired, c.slope_fire.total),
                opt(g.late_gap23_median),
                opt(c.late_gap23_median),
                g.seeds.len().to_string(),
                c.seeds.len().to_string(),
            ]);
        }
        let p = target.join("table2_lockin.csv");
        write_table(
            &p,
            &[
                "cell",
                "eta",
                "slope_fire_median",
                "slope_fire_IQR",
                "fired",
                "late_ratio_median",
                "late_ratio_range",
                "separation",
                "lag_median",
                "lag_IQR",
                "n_seeds",
            ],
            &t2,
        )?;
        written.push(p);
        let p = target.join("table4_window.csv");
        write_table(
            &p,
            &[
                "W",
                "grok_fire",
                "ctrl_fire",
                "grok_fired",
                "ctrl_fired",
                "late_ratio_grok",
                "late_ratio_ctrl",
                "n_seeds_grok",
                "n_seeds_ctrl",
            ],
            &t4,
        )?;
        written.push(p);
    }

    let t5: Vec<Vec<String>> = summary
        .cells
        .iter()
        .map(|c| {
            vec![
                c.config.eta.to_string(),
                format!("{}/{}", c.n_grok, c.seeds.len()),
                opt(c.rho_fire.spread.map(|x| x.median)),
                opt(c.test_05.spread.map(|x| x.median)),
                opt(c.rho_lead.map(|x| x.median)),
                opt(c.late_gap23_median),
                c.seeds.len().to_string(),
                c.cell.clone(),
            ]
        })
        .collect();
    let p = target.join("table5_eta.csv");
    write_table(
        &p,
        &["eta", "grok_rate", "t_rho", "t_test05", "lead", "late_ratio", "n_seeds", "cell"],
        &t5,
    )?;
    written.push(p);

    written.push(store::write_json(&target.join("summary.json"), summary)?);
    Ok(written)
}

/// Cross-seed series written per cell for plotting.
pub const FIGURE_SERIES: [&str; 13] = [
    "train_acc",
    "test_acc",
    "rho_tian",
    "gap23",
    "gap12",
    "sigma_w1",
    "sigma_w2",
    "sigma_w3",
    "sigma_w4",
    "sigma_w5",
    "offdiag_ratio",
    "gf_norm",
    "loss",
];

fn series_value(m: &crate::instrumentation::EpochMetrics, name: &str) -> Option<f64> {
    match name {
        "train_acc" => Some(m.train_acc),
        "test_acc" => Some(m.test_acc).filter(|x| x.is_finite()),
        "rho_tian" => m.rho_tian,
        "gap23" => m.sigma_w_ratio(2, 3),
        "gap12" => m.sigma_w_ratio(1, 2),
        "offdiag_ratio" => m.offdiag_ratio,
        "gf_norm" => m.gf_norm,
        "loss" => Some(m.loss),
        s => {
            let i: usize = s.strip_prefix("sigma_w")?.parse().ok()?;
            Some(m.sigma_w[i - 1])
        }
    }
}

/// Epoch-indexed median/IQR series across the seeds of each cell, read from
/// the stored metric logs. One `figure_<cell>.csv` per cell.
pub fn emit_plot_data(entries: &[RunEntry], target: &Path) -> Result<Vec<PathBuf>> {
    let mut cells: BTreeMap<&str, Vec<Vec<crate::instrumentation::EpochMetrics>>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.done()) {
        let Some(dir) = &e.dir else { continue };
        let path = dir.join(store::METRICS);
        if path.exists() {
            cells.entry(&e.cell).or_default().push(store::read_metrics(&path)?);
        }
    }
    fs::create_dir_all(target).map_err(|e| Error::io(target, e))?;
    let mut written = Vec::new();
    for (cell, runs) in cells {
        let len = runs.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut header = vec!["epoch".to_string(), "n".to_string()];
        for s in FIGURE_SERIES {
            header.extend([format!("{s}_median"), format!("{s}_q25"), format!("{s}_q75")]);
        }
        let mut rows = Vec::with_capacity(len);
        for t in 0..len {
            let at: Vec<&crate::instrumentation::EpochMetrics> = runs.iter().filter_map(|r| r.get(t)).collect();
            let mut row = vec![at[0].epoch.to_string(), at.len().to_string()];
            for s in FIGURE_SERIES {
                let vals: Vec<f64> = at.iter().filter_map(|m| series_value(m, s)).collect();
                let sp = Spread::of(&vals);
                row.extend([opt(sp.map(|x| x.median)), opt(sp.map(|x| x.q25)), opt(sp.map(|x| x.q75))]);
            }
            rows.push(row);
        }
        let safe: String = cell.chars().map(|c| if c.is_alphanumeric() || "=._-".contains(c) { c } else { '_' }).collect();
        let p = target.join(format!("figure_{safe}.csv"));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_table(&p, &header, &rows)?;
        written.push(p);
    }
    Ok(written)
}
