//! Run persistence: JSON manifests, CSV metric logs and binary checkpoints.
//!
//! Layout: `<root>/<sweep>/<cell>/<seed>/{manifest.json, metrics.csv,
//! ckpt_<epoch>.glck, thm6_<epoch>.json, thm6_<epoch>_pairs.csv}`.
//!
//! Checkpoint file (`GLCK`, all integers and floats little-endian):
//!
//! ```text
//! magic "GLCK" | version u32 | dtype u8 | epoch u64 | adam_t u64
//! adam config: lr, beta1, beta2, eps, weight_decay f64 | decoupled u8
//! shape count u32 | (rows u64, cols u64) per array
//! rng blob length u32 | rng blob
//! arrays W, V, m_W, v_W, m_V, v_V as row-major f64
//! crc32 of everything above, u32
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use faer::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::instrumentation::{EpochMetrics, TOP};
use crate::model::Params;
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Dtype;
use crate::trainer::{Checkpoint, RunConfig, RunRecord};
use crate::detectors::FireSummary;

pub const MAGIC: &[u8; 4] = b"GLCK";
pub const FORMAT_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch}.glck")
}

pub fn thm6_name(epoch: usize) -> String {
    format!("thm6_{epoch}.json")
}

pub fn thm6_pairs_name(epoch: usize) -> String {
    format!("thm6_{epoch}_pairs.csv")
}

/// Directory of one run inside a results tree.
pub fn run_dir(root: &Path, sweep: &str, cell: &str, seed: u64) -> PathBuf {
    root.join(sweep).join(cell).join(seed.to_string())
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

// ---------------------------------------------------------------- checkpoints

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, x: f64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

/// Serializes a checkpoint into the `GLCK` byte format.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let arrays = checkpoint_arrays(ck);
    let payload: usize = arrays.iter().map(|m| m.nrows() * m.ncols() * 8).sum();
    let mut buf = Vec::with_capacity(payload + 256);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    buf.push(ck.dtype.tag());
    put_u64(&mut buf, ck.epoch as u64);
    put_u64(&mut buf, ck.adam.t);
    let c = ck.adam.config;
    for x in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
        put_f64(&mut buf, x);
    }
    buf.push(c.decoupled as u8);
    put_u32(&mut buf, arrays.len() as u32);
    for m in &arrays {
        put_u64(&mut buf, m.nrows() as u64);
        put_u64(&mut buf, m.ncols() as u64);
    }
    put_u32(&mut buf, ck.rng_state.len() as u32);
    buf.extend_from_slice(&ck.rng_state);
    for m in &arrays {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                put_f64(&mut buf, m[(i, j)]);
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

fn checkpoint_arrays(ck: &Checkpoint) -> [&Mat<f64>; 6] {
    [
        &ck.params.w,
        &ck.params.v,
        &ck.adam.m_w,
        &ck.adam.v_w,
        &ck.adam.m_v,
        &ck.adam.v_v,
    ]
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let out = &self.data[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            // the checksum already passed, so this is a malformed writer
            None => Err(Error::CheckpointShape(format!(
                "{} ends before its declared contents",
                self.path.display()
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Expected `(modulus, hidden)` of a checkpoint, taken from its run config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpectedShape {
    pub modulus: usize,
    pub hidden: usize,
}

impl ExpectedShape {
    pub fn of(config: &RunConfig) -> Self {
        ExpectedShape {
            modulus: config.modulus,
            hidden: config.hidden,
        }
    }

    fn arrays(self) -> [(usize, usize); 6] {
        let (m, k) = (self.modulus, self.hidden);
        let w = (2 * m, k);
        let v = (k, m);
        [w, v, w, w, v, v]
    }
}

/// Parses `GLCK` bytes. The checksum is validated before anything else, so
/// truncation and bit flips surface as [`Error::Checksum`].
pub fn decode_checkpoint(bytes: &[u8], path: &Path, expected: Option<ExpectedShape>) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let mut cur = Cursor { data: body, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(Error::NotCheckpoint(path.to_path_buf()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let tag = cur.u8()?;
    let dtype = Dtype::from_tag(tag).ok_or_else(|| Error::CheckpointShape(format!("unknown dtype tag {tag}")))?;
    let epoch = cur.u64()? as usize;
    let t = cur.u64()?;
    let config = AdamConfig {
        lr: cur.f64()?,
        beta1: cur.f64()?,
        beta2: cur.f64()?,
        eps: cur.f64()?,
        weight_decay: cur.f64()?,
        decoupled: cur.u8()? != 0,
    };
    let count = cur.u32()? as usize;
    if count != 6 {
        return Err(Error::CheckpointShape(format!("expected 6 arrays, found {count}")));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push((cur.u64()? as usize, cur.u64()? as usize));
    }
    if let Some(exp) = expected {
        let want = exp.arrays();
        if shapes != want {
            return Err(Error::CheckpointShape(format!(
                "{} holds arrays {:?}, run config expects {:?} (M = {}, K = {})",
                path.display(),
                shapes,
                want,
                exp.modulus,
                exp.hidden
            )));
        }
    }
    let rng_len = cur.u32()? as usize;
    let rng_state = cur.take(rng_len)?.to_vec();
    let mut arrays = Vec::with_capacity(count);
    for &(r, c) in &shapes {
        let raw = cur.take(r.checked_mul(c).and_then(|x| x.checked_mul(8)).ok_or_else(|| {
            Error::CheckpointShape(format!("array shape {r}x{c} overflows"))
        })?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        arrays.push(crate::linalg::from_row_major(r, c, &data));
    }
    if cur.pos != body.len() {
        return Err(Error::CheckpointShape(format!(
            "{} has {} trailing bytes",
            path.display(),
            body.len() - cur.pos
        )));
    }
    let mut it = arrays.into_iter();
    let mut next = || it.next().expect("six arrays");
    let params = Params { w: next(), v: next() };
    let adam = AdamState {
        config,
        m_w: next(),
        v_w: next(),
        m_v: next(),
        v_v: next(),
        t,
    };
    Ok(Checkpoint {
        epoch,
        dtype,
        params,
        adam,
        rng_state,
    })
}

pub fn write_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<PathBuf> {
    let path = dir.join(checkpoint_name(ck.epoch));
    write_atomic(&path, &encode_checkpoint(ck))?;
    Ok(path)
}

pub fn read_checkpoint(path: &Path, expected: Option<ExpectedShape>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, path, expected)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------- metrics

pub fn metrics_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "train_acc",
        "test_acc",
        "loss",
        "rho_tian",
        "offdiag_ratio",
        "gf_norm",
        "indep_proxy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=TOP).map(|i| format!("sigma_w{i}")));
    h.extend((1..=TOP).map(|i| format!("sigma_v{i}")));
    h
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn metrics_record(m: &EpochMetrics) -> Vec<String> {
    let mut r = vec![
        m.epoch.to_string(),
        m.train_acc.to_string(),
        m.test_acc.to_string(),
        m.loss.to_string(),
        fmt_opt(m.rho_tian),
        fmt_opt(m.offdiag_ratio),
        fmt_opt(m.gf_norm),
        fmt_opt(m.indep_proxy),
    ];
    r.extend(m.sigma_w.iter().map(f64::to_string));
    r.extend(m.sigma_v.iter().map(f64::to_string));
    r
}

/// Append-only CSV log with a fixed column order. Floats are written in
/// shortest round-trip form, so reloading is lossless.
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
    last_epoch: Option<usize>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        writer.write_record(metrics_header())?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            writer,
            last_epoch: None,
        })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        if self.last_epoch.is_some_and(|e| m.epoch <= e) {
            return Err(Error::MetricsFormat {
                path: self.path.clone(),
                reason: format!("epoch {} does not follow {}", m.epoch, self.last_epoch.unwrap_or(0)),
            });
        }
        self.writer.write_record(metrics_record(m))?;
        self.last_epoch = Some(m.epoch);
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(io_err(&self.path))
    }
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut log = MetricsLog::create(path)?;
    for r in rows {
        log.append(r)?;
    }
    log.finish()
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let bad = |reason: String| Error::MetricsFormat {
        path: path.to_path_buf(),
        reason,
    };
    if header != metrics_header() {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|e| bad(format!("column {}: {e}", metrics_header()[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if field(i).is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let epoch = field(0).parse::<usize>().map_err(|e| bad(format!("epoch: {e}")))?;
        let mut sigma_w = [0.0; TOP];
        let mut sigma_v = [0.0; TOP];
        for i in 0..TOP {
            sigma_w[i] = num(8 + i)?;
            sigma_v[i] = num(8 + TOP + i)?;
        }
        rows.push(EpochMetrics {
            epoch,
            train_acc: num(1)?,
            test_acc: num(2)?,
            loss: num(3)?,
            rho_tian: opt(4)?,
            offdiag_ratio: opt(5)?,
            gf_norm: opt(6)?,
            indep_proxy: opt(7)?,
            sigma_w,
            sigma_v,
        });
    }
    if rows.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
        return Err(bad("epochs are not strictly increasing".into()));
    }
    Ok(rows)
}

// ---------------------------------------------------------------- manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Platform {
    pub os: String,
    pub arch: String,
}

impl Platform {
    pub fn current() -> Self {
        Platform {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config: RunConfig,
    pub platform: Platform,
    pub threads: usize,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Command line that produced the run, when launched from the CLI.
    pub command: Option<Vec<String>>,
    pub wall_time_secs: Option<f64>,
    pub fires: Option<FireSummary>,
    /// File name → sha256 (hex) for every file the run produced.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn running(config: &RunConfig, command: Option<Vec<String>>) -> Self {
        RunManifest {
            artifact_version: ARTIFACT_VERSION.to_string(),
            config: config.clone(),
            platform: Platform::current(),
            threads: 1,
            started_unix: unix_now(),
            finished_unix: None,
            status: RunStatus::Running,
            error: None,
            command,
            wall_time_secs: None,
            fires: None,
            files: BTreeMap::new(),
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)?;
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Names of recorded files whose current hash differs from the manifest
/// (missing files included).
pub fn verify_hashes(dir: &Path, manifest: &RunManifest) -> Vec<String> {
    manifest
        .files
        .iter()
        .filter(|(name, hash)| sha256_file(&dir.join(name.as_str())).ok().as_deref() != Some(hash.as_str()))
        .map(|(name, _)| name.clone())
        .collect()
}

/// Records the hash of `name` (relative to `dir`) in the manifest.
pub fn record_file(dir: &Path, manifest: &mut RunManifest, name: &str) -> Result<()> {
    let hash = sha256_file(&dir.join(name))?;
    manifest.files.insert(name.to_string(), hash);
    Ok(())
}

/// Persists a finished run: metrics, checkpoints and a `done` manifest.
pub fn write_run(dir: &Path, record: &RunRecord, mut manifest: RunManifest) -> Result<RunManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_metrics(&dir.join(METRICS), &record.metrics)?;
    record_file(dir, &mut manifest, METRICS)?;
    for ck in &record.checkpoints {
        write_checkpoint(dir, ck)?;
        record_file(dir, &mut manifest, &checkpoint_name(ck.epoch))?;
    }
    manifest.status = RunStatus::Done;
    manifest.finished_unix = Some(unix_now());
    manifest.wall_time_secs = Some(record.wall_time_secs);
    manifest.fires = Some(record.fires.clone());
    manifest.config = record.config.clone();
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Marks a run as failed, keeping whatever it already wrote.
pub fn write_failure(dir: &Path, mut manifest: RunManifest, error: &Error) -> Result<RunManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    manifest.status = RunStatus::Failed;
    manifest.error = Some(error.to_string());
    manifest.finished_unix = Some(unix_now());
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// A run read back from disk; checkpoints are loaded on demand.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: Vec<EpochMetrics>,
}

impl StoredRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let metrics_path = dir.join(METRICS);
        let metrics = if metrics_path.exists() {
            read_metrics(&metrics_path)?
        } else {
            Vec::new()
        };
        Ok(StoredRun {
            dir: dir.to_path_buf(),
            manifest,
            metrics,
        })
    }

    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .manifest
            .files
            .keys()
            .filter_map(|n| n.strip_prefix("ckpt_")?.strip_suffix(".glck")?.parse().ok())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn checkpoint(&self, epoch: usize) -> Result<Checkpoint> {
        let path = self.dir.join(checkpoint_name(epoch));
        if !path.exists() {
            return Err(Error::MissingCheckpoints {
                missing: vec![epoch],
                available: self.checkpoint_epochs(),
            });
        }
        read_checkpoint(&path, Some(ExpectedShape::of(&self.manifest.config)))
    }

    /// Rebuilds the in-memory record (metrics plus every checkpoint).
    pub fn to_record(&self) -> Result<RunRecord> {
        let checkpoints = self
            .checkpoint_epochs()
            .into_iter()
            .map(|e| self.checkpoint(e))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunRecord {
            config: self.manifest.config.clone(),
            fires: FireSummary::evaluate(&self.metrics, &self.manifest.config.detector),
            metrics: self.metrics.clone(),
            checkpoints,
            wall_time_secs: self.manifest.wall_time_secs.unwrap_or(0.0),
        })
    }
}

/// Every directory under `root` holding a manifest, in sorted order.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(MANIFEST).is_file() {
            out.push(dir.clone());
        }
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if dir == root => return Err(Error::io(&dir, e)),
            Err(_) => continue,
        };
        for entry in entries.flatten() {
            if entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                stack.push(entry.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes any serializable value as pretty JSON and returns its path.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_atomic(path, &serde_json::to_vec_pretty(value)?)?;
    Ok(path.to_path_buf())
}
