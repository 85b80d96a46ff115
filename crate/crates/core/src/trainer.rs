//! One training run: seeded initialization, the full-batch epoch loop with
//! instrumentation, checkpoint snapshots and deterministic replay.
//!
//! Epochs are 0-based. Row `t` of the metrics log describes the parameters
//! `θ_t` held before step `t` together with the window spectra that include
//! the update `Δ_t = θ_{t+1} − θ_t`. A checkpoint at epoch `c` stores `θ_c`,
//! so `c` ranges over `0..=epochs`.

use std::collections::BTreeSet;
use std::time::Instant;

use faer::Mat;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DataSplit};
use crate::detectors::{DetectorConfig, FireSummary};
use crate::error::{Error, Result};
use crate::instrumentation::{self, ActivationGram, EpochMetrics, SpectralWindow};
use crate::linalg;
use crate::model::{self, Activation, Params};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{stream_rng, Stream};
use crate::scalar::{Dtype, Scalar};

/// Distribution of the initial weights; both are zero-mean and scaled by
/// `init_scale / sqrt(fan_in)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitDist {
    /// Standard deviation `init_scale / sqrt(fan_in)`.
    Gaussian,
    /// Uniform on `±init_scale / sqrt(fan_in)`.
    #[default]
    Uniform,
}

/// Objective whose gradient drives the optimizer, relative to the logged
/// `J = ½‖R‖²_F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// `J` itself.
    HalfSum,
    /// `J / n`.
    HalfSampleMean,
    /// `‖R‖² / n`, the per-sample mean of the squared error.
    #[default]
    SampleMean,
    /// `‖R‖² / (nM)`, the elementwise mean.
    EntryMean,
}

impl LossReduction {
    /// Factor applied to `∇J`.
    pub fn grad_factor(self, n: usize, modulus: usize) -> f64 {
        let n = n.max(1) as f64;
        match self {
            LossReduction::HalfSum => 1.0,
            LossReduction::HalfSampleMean => 1.0 / n,
            LossReduction::SampleMean => 2.0 / n,
            LossReduction::EntryMean => 2.0 / (n * modulus as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub modulus: usize,
    pub hidden: usize,
    pub train_fraction: f64,
    /// Weight decay. Zero gives the no-grokking control.
    pub eta: f64,
    pub activation: Activation,
    pub epochs: usize,
    pub seed: u64,
    /// Seed of the train/test split; defaults to `seed`.
    pub data_seed: Option<u64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decoupled_decay: bool,
    pub loss_reduction: LossReduction,
    pub gram_window: usize,
    pub checkpoint_epochs: Vec<usize>,
    /// `ρ_tian`, the off-diagonal ratio and the independence proxy are
    /// evaluated on epochs divisible by this; everything else every epoch.
    pub metric_cadence: usize,
    pub train_precision: Dtype,
    pub init_dist: InitDist,
    pub init_scale: f64,
    /// Column pairs sampled for the independence proxy.
    pub indep_pairs: usize,
    pub detector: DetectorConfig,
}

pub const SQUARE_CHECKPOINTS: [usize; 5] = [50, 100, 175, 250, 300];
pub const RELU_CHECKPOINTS: [usize; 5] = [100, 300, 500, 600, 700];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            modulus: 71,
            hidden: 2048,
            train_fraction: 0.40,
            eta: 2e-4,
            activation: Activation::Square,
            epochs: 400,
            seed: 0,
            data_seed: None,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decoupled_decay: false,
            loss_reduction: LossReduction::SampleMean,
            gram_window: 20,
            checkpoint_epochs: SQUARE_CHECKPOINTS.to_vec(),
            metric_cadence: 1,
            train_precision: Dtype::F32,
            init_dist: InitDist::Uniform,
            init_scale: 1.0,
            indep_pairs: 256,
            detector: DetectorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.modulus < 2 {
            return Err(Error::InvalidModulus(self.modulus));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::InvalidFraction(self.train_fraction));
        }
        if self.hidden < self.modulus {
            return fail(format!("hidden width {} is below the modulus {}", self.hidden, self.modulus));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return fail(format!("eta must be a finite nonnegative number, got {}", self.eta));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("lr must be positive and betas must lie in [0, 1)".into());
        }
        if self.gram_window == 0 || self.metric_cadence == 0 {
            return fail("gram_window and metric_cadence must be at least 1".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return fail(format!("init_scale must be positive, got {}", self.init_scale));
        }
        if let Some(&c) = self.checkpoint_epochs.iter().find(|&&c| c > self.epochs) {
            return fail(format!("checkpoint epoch {c} is past the last epoch {}", self.epochs));
        }
        self.detector.validate()
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.eta,
            decoupled: self.decoupled_decay,
        }
    }

    pub fn make_split(&self) -> Result<DataSplit> {
        let table = dataset::build_modadd(self.modulus)?;
        dataset::split(&table, self.train_fraction, self.data_seed())
    }
}

/// Initial weights scaled by `init_scale / sqrt(fan_in)`, drawn from streams
/// that are independent of the data split.
pub fn init_params<T: Scalar>(config: &RunConfig) -> Params<T> {
    let (m, k) = (config.modulus, config.hidden);
    let draw = |rows: usize, cols: usize, fan_in: usize, stream: Stream| {
        let scale = config.init_scale / (fan_in as f64).sqrt();
        let mut rng = stream_rng(config.seed, stream);
        let mut sample: Box<dyn FnMut() -> f64> = match config.init_dist {
            InitDist::Gaussian => {
                let d = Normal::new(0.0, scale).expect("valid std");
                Box::new(move || d.sample(&mut rng))
            }
            InitDist::Uniform => {
                let d = Uniform::new_inclusive(-scale, scale).expect("valid bounds");
                Box::new(move || d.sample(&mut rng))
            }
        };
        // row-major draw order so the layout of Mat does not leak into the stream
        let mut out = Mat::<T>::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] = T::lift(sample());
            }
        }
        out
    };
    Params {
        w: draw(2 * m, k, 2 * m, Stream::InitW),
        v: draw(k, m, k, Stream::InitV),
    }
}

/// Snapshot of `θ_epoch`, the optimizer moments and the sampler state,
/// always held in f64. `dtype` records the training precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub dtype: Dtype,
    pub params: Params<f64>,
    pub adam: AdamState<f64>,
    pub rng_state: Vec<u8>,
}

impl Checkpoint {
    fn capture<T: Scalar>(epoch: usize, params: &Params<T>, adam: &AdamState<T>, rng: &ChaCha8Rng) -> Self {
        let up = |m: &Mat<T>| linalg::widen(m.as_ref());
        Checkpoint {
            epoch,
            dtype: T::DTYPE,
            params: Params {
                w: up(&params.w),
                v: up(&params.v),
            },
            adam: AdamState {
                config: adam.config,
                m_w: up(&adam.m_w),
                v_w: up(&adam.v_w),
                m_v: up(&adam.m_v),
                v_v: up(&adam.v_v),
                t: adam.t,
            },
            rng_state: encode_rng(rng),
        }
    }

    fn matrices(&self) -> [(&'static str, &Mat<f64>); 6] {
        [
            ("W", &self.params.w),
            ("V", &self.params.v),
            ("m_W", &self.adam.m_w),
            ("v_W", &self.adam.v_w),
            ("m_V", &self.adam.m_v),
            ("v_V", &self.adam.v_v),
        ]
    }
}

/// Sampler state as `seed (32) ‖ stream (8) ‖ word_pos (16)`, little-endian.
pub fn encode_rng(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn decode_rng(blob: &[u8]) -> Option<ChaCha8Rng> {
    use rand::SeedableRng;
    if blob.len() != 56 {
        return None;
    }
    let seed: [u8; 32] = blob[..32].try_into().ok()?;
    let stream = u64::from_le_bytes(blob[32..40].try_into().ok()?);
    let pos = u128::from_le_bytes(blob[40..56].try_into().ok()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Some(rng)
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: RunConfig,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<Checkpoint>,
    pub fires: FireSummary,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn checkpoint(&self, epoch: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.epoch == epoch)
    }
}

pub fn run(config: &RunConfig) -> Result<RunRecord> {
    run_with_progress(config, |_| {})
}

/// Like [`run`], calling `progress` after each metrics row.
pub fn run_with_progress(config: &RunConfig, progress: impl FnMut(&EpochMetrics)) -> Result<RunRecord> {
    config.validate()?;
    let start = Instant::now();
    let (metrics, checkpoints) = match config.train_precision {
        Dtype::F32 => train::<f32>(config, progress)?,
        Dtype::F64 => train::<f64>(config, progress)?,
    };
    let fires = FireSummary::evaluate(&metrics, &config.detector);
    Ok(RunRecord {
        config: config.clone(),
        metrics,
        checkpoints,
        fires,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

fn scale_in_place<T: Scalar>(m: &mut Mat<T>, s: T) {
    for j in 0..m.ncols() {
        m.col_as_slice_mut(j).iter_mut().for_each(|x| *x = *x * s);
    }
}

fn train<T: Scalar>(
    config: &RunConfig,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<(Vec<EpochMetrics>, Vec<Checkpoint>)> {
    let split = config.make_split()?;
    let x_train = &split.train.inputs;
    let y_train = split.train.targets::<T>();
    let grad_scale = T::lift(config.loss_reduction.grad_factor(split.train.len(), config.modulus));
    let mut params = init_params::<T>(config);
    let mut adam = AdamState::new(config.adam(), &params);
    let mut sampler = stream_rng(config.seed, Stream::PairSample);
    let mut win_w = SpectralWindow::new(config.gram_window);
    let mut win_v = SpectralWindow::new(config.gram_window);
    let wanted: BTreeSet<usize> = config.checkpoint_epochs.iter().copied().collect();
    let mut checkpoints = Vec::with_capacity(wanted.len());
    let mut rows = Vec::with_capacity(config.epochs);
    let mut cache = model::ForwardCache::<T>::empty();
    let (mut test_f, mut test_yhat) = (Mat::<T>::zeros(0, 0), Mat::<T>::zeros(0, 0));
    let (mut dw, mut dv) = (Mat::<T>::zeros(0, 0), Mat::<T>::zeros(0, 0));

    for epoch in 0..config.epochs {
        if wanted.contains(&epoch) {
            checkpoints.push(Checkpoint::capture(epoch, &params, &adam, &sampler));
        }
        let at = |e: Error| e.at_epoch(epoch);
        model::forward_into(x_train, y_train.as_ref(), &params, config.activation, &mut cache).map_err(at)?;
        let loss = model::loss(&cache);
        if !loss.is_finite() {
            return Err(Error::NumericOverflow {
                tensor: "loss",
                epoch: Some(epoch),
            });
        }
        let train_acc = model::accuracy_labels(cache.yhat.as_ref(), &split.train.labels);
        let test_acc = if split.test.is_empty() {
            f64::NAN
        } else {
            model::predict_into(&split.test.inputs, &params, config.activation, &mut test_f, &mut test_yhat)
                .map_err(at)?;
            model::accuracy_labels(test_yhat.as_ref(), &split.test.labels)
        };

        let gf_norm = Some(instrumentation::gf_norm(cache.g_f.as_ref()));
        let (mut rho_tian, mut offdiag_ratio, mut indep_proxy) = (None, None, None);
        if epoch % config.metric_cadence == 0 {
            let gram = ActivationGram::from_activations(cache.f.as_ref());
            rho_tian = gram.rho_tian().ok();
            offdiag_ratio = gram.offdiag_ratio().ok();
            indep_proxy = instrumentation::indep_proxy(cache.g_f.as_ref(), config.indep_pairs, &mut sampler).ok();
        }

        model::backward_into(x_train, &cache, config.activation, &mut dw, &mut dv);
        if grad_scale != T::one() {
            scale_in_place(&mut dw, grad_scale);
            scale_in_place(&mut dv, grad_scale);
        }
        let deltas = adam.step_blocks(&mut params, &dw, &dv).map_err(at)?;
        let sigma_w = win_w.push_and_spectrum(linalg::flatten_col_major(&deltas.dw))?;
        let sigma_v = win_v.push_and_spectrum(linalg::flatten_col_major(&deltas.dv))?;

        let row = EpochMetrics {
            epoch,
            train_acc,
            test_acc,
            loss,
            rho_tian,
            offdiag_ratio,
            gf_norm,
            indep_proxy,
            sigma_w,
            sigma_v,
        };
        progress(&row);
        rows.push(row);
    }
    if wanted.contains(&config.epochs) {
        checkpoints.push(Checkpoint::capture(config.epochs, &params, &adam, &sampler));
    }
    Ok((rows, checkpoints))
}

/// How stored and replayed checkpoints are compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplayMode {
    /// Every f64 (and the RNG blob) must be bit-identical.
    Exact,
    /// `|a − b| ≤ rel · max(|a|, |b|, 1e-30)` elementwise.
    Tolerant { rel: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplayOutcome {
    Match,
    Diverged { epoch: usize, max_abs_diff: f64 },
}

impl ReplayOutcome {
    pub fn matched(self) -> bool {
        self == ReplayOutcome::Match
    }

    pub fn into_result(self) -> Result<()> {
        match self {
            ReplayOutcome::Match => Ok(()),
            ReplayOutcome::Diverged { epoch, max_abs_diff } => Err(Error::ReplayDivergence { epoch, max_abs_diff }),
        }
    }
}

/// Re-runs training from the record's config (to its last checkpoint) and
/// compares every stored checkpoint against the recomputed one.
pub fn replay_check(record: &RunRecord, mode: ReplayMode) -> Result<ReplayOutcome> {
    let last = record
        .checkpoints
        .iter()
        .map(|c| c.epoch)
        .max()
        .ok_or_else(|| Error::MissingArtifact("record has no checkpoints to replay".into()))?;
    let mut config = record.config.clone();
    config.epochs = last.max(1);
    config.checkpoint_epochs = record.checkpoints.iter().map(|c| c.epoch).collect();
    let replayed = run(&config)?;
    let mut stored: Vec<&Checkpoint> = record.checkpoints.iter().collect();
    stored.sort_by_key(|c| c.epoch);
    for ck in stored {
        let fresh = replayed.checkpoint(ck.epoch).ok_or_else(|| {
            Error::MissingArtifact(format!("replay produced no checkpoint at epoch {}", ck.epoch))
        })?;
        if let Some(diff) = checkpoint_mismatch(ck, fresh, mode) {
            return Ok(ReplayOutcome::Diverged {
                epoch: ck.epoch,
                max_abs_diff: diff,
            });
        }
    }
    Ok(ReplayOutcome::Match)
}

/// `Some(max |a − b|)` when the two checkpoints disagree under `mode`.
fn checkpoint_mismatch(a: &Checkpoint, b: &Checkpoint, mode: ReplayMode) -> Option<f64> {
    let mut max_diff = 0.0f64;
    let mut bad = a.adam.t != b.adam.t;
    if mode == ReplayMode::Exact && a.rng_state != b.rng_state {
        bad = true;
    }
    for ((_, x), (_, y)) in a.matrices().into_iter().zip(b.matrices()) {
        if (x.nrows(), x.ncols()) != (y.nrows(), y.ncols()) {
            return Some(f64::INFINITY);
        }
        for j in 0..x.ncols() {
            for (&p, &q) in x.col_as_slice(j).iter().zip(y.col_as_slice(j)) {
                let d = (p - q).abs();
                max_diff = max_diff.max(if d.is_nan() { f64::INFINITY } else { d });
                bad |= match mode {
                    ReplayMode::Exact => p.to_bits() != q.to_bits(),
                    ReplayMode::Tolerant { rel } => !(d <= rel * p.abs().max(q.abs()).max(1e-30)),
                };
            }
        }
    }
    bad.then_some(max_diff)
}
