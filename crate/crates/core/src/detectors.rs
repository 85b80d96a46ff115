//! Fire-epoch detectors over per-epoch metric series.
//!
//! A series is a slice indexed by epoch; `None` marks epochs where the
//! value was not logged or is undefined.

use serde::{Deserialize, Serialize};

use crate::instrumentation::EpochMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub slope_lag: usize,
    pub slope_thresh: f64,
    pub min_epoch: usize,
    pub rho_thresh: f64,
    pub acc_levels: Vec<f64>,
    /// Inclusive epoch range for the late-stage `σ₂/σ₃` median.
    pub late_from: usize,
    pub late_to: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            slope_lag: 25,
            slope_thresh: 0.04,
            min_epoch: 100,
            rho_thresh: 0.075,
            acc_levels: vec![0.5, 0.99],
            late_from: 200,
            late_to: 400,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let positive = self.slope_lag > 0
            && self.slope_thresh > 0.0
            && self.rho_thresh > 0.0
            && self.acc_levels.iter().all(|&l| l > 0.0 && l <= 1.0);
        if !positive {
            return Err(crate::Error::Config("detector thresholds must be positive".into()));
        }
        if self.min_epoch < self.slope_lag {
            return Err(crate::Error::Config(format!(
                "min_epoch ({}) must be at least slope_lag ({})",
                self.min_epoch, self.slope_lag
            )));
        }
        Ok(())
    }
}

/// Earliest epoch at which a detector fired, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FireResult(pub Option<usize>);

impl FireResult {
    pub const NEVER: FireResult = FireResult(None);

    pub fn at(epoch: usize) -> Self {
        FireResult(Some(epoch))
    }

    pub fn fired(self) -> bool {
        self.0.is_some()
    }

    pub fn epoch(self) -> Option<usize> {
        self.0
    }
}

impl std::fmt::Display for FireResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(e) => write!(f, "{e}"),
            None => f.write_str("never"),
        }
    }
}

/// `s(t) = [ln r(t) − ln r(t − lag)] / lag`; undefined where either endpoint
/// is missing or nonpositive.
pub fn slope_series(ratio: &[Option<f64>], lag: usize) -> Vec<Option<f64>> {
    let log = |x: Option<f64>| x.filter(|&v| v > 0.0 && v.is_finite()).map(f64::ln);
    (0..ratio.len())
        .map(|t| {
            if t < lag {
                return None;
            }
            let now = log(ratio[t])?;
            let then = log(ratio[t - lag])?;
            Some((now - then) / lag as f64)
        })
        .collect()
}

/// `min { t ≥ min_epoch : s(t) > slope_thresh }`.
pub fn slope_fire(ratio: &[Option<f64>], cfg: &DetectorConfig) -> FireResult {
    let s = slope_series(ratio, cfg.slope_lag);
    first_where(&s, cfg.min_epoch, |v| v > cfg.slope_thresh)
}

/// Earliest epoch `≥ min_epoch` with value `≥ thresh`.
pub fn threshold_fire(series: &[Option<f64>], thresh: f64, min_epoch: usize) -> FireResult {
    first_where(series, min_epoch, |v| v >= thresh)
}

/// Earliest epoch with accuracy `≥ level`.
pub fn crossing(acc: &[Option<f64>], level: f64) -> FireResult {
    threshold_fire(acc, level, 0)
}

fn first_where(series: &[Option<f64>], from: usize, pred: impl Fn(f64) -> bool) -> FireResult {
    FireResult(
        series
            .iter()
            .enumerate()
            .skip(from)
            .find(|(_, v)| v.is_some_and(&pred))
            .map(|(t, _)| t),
    )
}

/// `a − b` in epochs, defined only when both fired.
pub fn lead_lag(a: FireResult, b: FireResult) -> Option<i64> {
    Some(a.epoch()? as i64 - b.epoch()? as i64)
}

/// Median of the defined values over `from..=to`.
pub fn window_median(series: &[Option<f64>], from: usize, to: usize) -> Option<f64> {
    let vals: Vec<f64> = series
        .iter()
        .enumerate()
        .filter(|(t, _)| *t >= from && *t <= to)
        .filter_map(|(_, v)| *v)
        .collect();
    crate::stats::median(&vals)
}

/// Per-epoch series extracted from a metrics log, indexed by epoch.
#[derive(Debug, Clone, Default)]
pub struct MetricSeries {
    pub train_acc: Vec<Option<f64>>,
    pub test_acc: Vec<Option<f64>>,
    pub rho_tian: Vec<Option<f64>>,
    pub offdiag_ratio: Vec<Option<f64>>,
    pub gf_norm: Vec<Option<f64>>,
    /// `σ₂/σ₃` of the ΔW window.
    pub gap23: Vec<Option<f64>>,
    /// `σ₁/σ₂` of the ΔW window.
    pub gap12: Vec<Option<f64>>,
}

impl MetricSeries {
    pub fn from_metrics(rows: &[EpochMetrics]) -> Self {
        let len = rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        let mut s = MetricSeries {
            train_acc: vec![None; len],
            test_acc: vec![None; len],
            rho_tian: vec![None; len],
            offdiag_ratio: vec![None; len],
            gf_norm: vec![None; len],
            gap23: vec![None; len],
            gap12: vec![None; len],
        };
        for r in rows {
            let t = r.epoch;
            s.train_acc[t] = Some(r.train_acc);
            s.test_acc[t] = Some(r.test_acc);
            s.rho_tian[t] = r.rho_tian;
            s.offdiag_ratio[t] = r.offdiag_ratio;
            s.gf_norm[t] = r.gf_norm;
            s.gap23[t] = r.sigma_w_ratio(2, 3);
            s.gap12[t] = r.sigma_w_ratio(1, 2);
        }
        s
    }
}

/// Everything the sweeps and reports need from one run's log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FireSummary {
    pub slope_fire: FireResult,
    pub rho_fire: FireResult,
    pub train_acc_1: FireResult,
    pub test_crossings: Vec<(f64, FireResult)>,
    pub late_gap23: Option<f64>,
    pub peak_gap23: Option<f64>,
    pub max_rho: Option<f64>,
    pub max_test_acc: f64,
}

impl FireSummary {
    pub fn evaluate(rows: &[EpochMetrics], cfg: &DetectorConfig) -> Self {
        let s = MetricSeries::from_metrics(rows);
        let max_of = |v: &[Option<f64>]| v.iter().flatten().copied().reduce(f64::max);
        FireSummary {
            slope_fire: slope_fire(&s.gap23, cfg),
            rho_fire: threshold_fire(&s.rho_tian, cfg.rho_thresh, 0),
            train_acc_1: crossing(&s.train_acc, 1.0),
            test_crossings: cfg
                .acc_levels
                .iter()
                .map(|&l| (l, crossing(&s.test_acc, l)))
                .collect(),
            late_gap23: window_median(&s.gap23, cfg.late_from, cfg.late_to),
            peak_gap23: max_of(&s.gap23[cfg.min_epoch.min(s.gap23.len())..]),
            max_rho: max_of(&s.rho_tian),
            max_test_acc: max_of(&s.test_acc).unwrap_or(0.0),
        }
    }

    pub fn test_crossing(&self, level: f64) -> FireResult {
        self.test_crossings
            .iter()
            .find(|(l, _)| (*l - level).abs() < 1e-12)
            .map(|&(_, f)| f)
            .unwrap_or(FireResult::NEVER)
    }
}
