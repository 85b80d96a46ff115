//! Offline check of the feature-repulsion sign rule at checkpoints.
//!
//! `B = (F̃ᵀF̃ + ηI)⁻¹` is obtained through the `n × n` system
//! `A = F̃F̃ᵀ + ηI`, factored once per checkpoint as `A = LLᵀ`:
//! `B = (I − ZᵀZ)/η` with `Z = L⁻¹F̃`, and the ridge projector is
//! `P_η = ηA⁻¹`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use faer::linalg::solvers::Llt;
use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::dataset::DataSplit;
use crate::error::{Error, Result};
use crate::linalg::{self, dot, PAR};
use crate::model::{self, Activation, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub eta: f64,
    pub top_k: usize,
    pub exact_pairs: usize,
    pub checkpoint_epochs: Vec<usize>,
    pub norm_floor: f64,
    pub sign_floor: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            eta: 2e-4,
            top_k: 200,
            exact_pairs: 10,
            checkpoint_epochs: crate::trainer::SQUARE_CHECKPOINTS.to_vec(),
            norm_floor: 1e-12,
            sign_floor: 1e-12,
        }
    }
}

impl VerifyConfig {
    /// Defaults with the checkpoint schedule of the given activation.
    pub fn for_activation(activation: Activation, eta: f64) -> Self {
        let checkpoint_epochs = match activation {
            Activation::Square => crate::trainer::SQUARE_CHECKPOINTS.to_vec(),
            Activation::Relu => crate::trainer::RELU_CHECKPOINTS.to_vec(),
        };
        VerifyConfig {
            eta,
            checkpoint_epochs,
            ..VerifyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::RidgeRequired(self.eta));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.exact_pairs > self.top_k {
            return Err(Error::Config(format!(
                "exact_pairs ({}) cannot exceed top_k ({})",
                self.exact_pairs, self.top_k
            )));
        }
        if !(self.norm_floor >= 0.0 && self.sign_floor >= 0.0) {
            return Err(Error::Config("floors must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Match,
    Mismatch,
    Indeterminate,
}

/// `match` iff `sgn(B_jℓ) = −sgn(resid)` with both magnitudes at or above
/// `floor`; anything smaller is indeterminate.
pub fn verdict(b_jl: f64, resid: f64, floor: f64) -> Verdict {
    if !(b_jl.abs() >= floor) || !(resid.abs() >= floor) {
        Verdict::Indeterminate
    } else if b_jl.signum() == -resid.signum() {
        Verdict::Match
    } else {
        Verdict::Mismatch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub j: usize,
    pub l: usize,
    /// Cosine similarity of `f̃_j` and `f̃_ℓ`.
    pub s: f64,
    pub b_jl: f64,
    /// `f̃_jᵀ P f̃_ℓ`.
    pub resid: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub epoch: usize,
    /// `matches / (matches + mismatches)`; `None` when every pair is indeterminate.
    pub sign_match: Option<f64>,
    pub median_abs_s: Option<f64>,
    pub n_match: usize,
    pub n_mismatch: usize,
    pub n_indeterminate: usize,
    pub pairs: Vec<PairRecord>,
}

/// One leave-two-out comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub j: usize,
    pub l: usize,
    pub resid_approx: f64,
    pub resid_exact: f64,
    pub sign_approx: f64,
    pub sign_exact: f64,
    pub agree: bool,
}

/// Cholesky factor of `F̃F̃ᵀ + ηI`, shared read-only by every pair evaluation.
pub struct RidgeFactor<'a> {
    f_tilde: MatRef<'a, f64>,
    eta: f64,
    llt: Llt<f64>,
}

fn ridge_system(f_tilde: MatRef<'_, f64>, eta: f64) -> Mat<f64> {
    let mut a = linalg::outer_gram(f_tilde);
    for i in 0..a.nrows() {
        a[(i, i)] += eta;
    }
    a
}

fn factor(a: Mat<f64>, eta: f64) -> Result<Llt<f64>> {
    // λ_max ≤ tr(A), λ_min ≥ η
    let trace: f64 = (0..a.nrows()).map(|i| a[(i, i)]).sum();
    Llt::new(a.as_ref(), Side::Lower).map_err(|_| Error::Singular {
        condition: trace / eta,
    })
}

impl<'a> RidgeFactor<'a> {
    pub fn new(f_tilde: MatRef<'a, f64>, eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::RidgeRequired(eta));
        }
        if !linalg::all_finite(f_tilde) {
            return Err(Error::NumericOverflow {
                tensor: "F_tilde",
                epoch: None,
            });
        }
        let llt = factor(ridge_system(f_tilde, eta), eta)?;
        Ok(RidgeFactor { f_tilde, eta, llt })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `A⁻¹ v`.
    fn solve_vec(&self, v: &[f64]) -> Vec<f64> {
        let l = self.llt.L();
        let mut x = Mat::<f64>::from_fn(v.len(), 1, |i, _| v[i]);
        solve_lower_triangular_in_place(l, x.as_mut(), PAR);
        solve_upper_triangular_in_place(l.transpose(), x.as_mut(), PAR);
        x.col_as_slice(0).to_vec()
    }

    /// `P_η v = η (F̃F̃ᵀ + ηI)⁻¹ v`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut x = self.solve_vec(v);
        x.iter_mut().for_each(|e| *e *= self.eta);
        x
    }

    /// `P_η f̃_j`.
    pub fn project_column(&self, j: usize) -> Vec<f64> {
        let col: Vec<f64> = self.f_tilde.col(j).iter().copied().collect();
        self.project(&col)
    }

    /// `B = (1/η)(I − F̃ᵀ(F̃F̃ᵀ + ηI)⁻¹F̃)`, symmetric by construction.
    pub fn compute_b(&self) -> Mat<f64> {
        let mut z = self.f_tilde.to_owned();
        solve_lower_triangular_in_place(self.llt.L(), z.as_mut(), PAR);
        let mut b = linalg::gram(z.as_ref());
        let inv = 1.0 / self.eta;
        for j in 0..b.ncols() {
            for (i, x) in b.col_as_slice_mut(j).iter_mut().enumerate() {
                *x = if i == j { inv - *x * inv } else { -*x * inv };
            }
        }
        symmetrize(&mut b);
        b
    }
}

fn symmetrize(b: &mut Mat<f64>) {
    for j in 0..b.ncols() {
        for i in (j + 1)..b.nrows() {
            let avg = 0.5 * (b[(i, j)] + b[(j, i)]);
            b[(i, j)] = avg;
            b[(j, i)] = avg;
        }
    }
}

pub fn compute_b(f_tilde: MatRef<'_, f64>, eta: f64) -> Result<Mat<f64>> {
    Ok(RidgeFactor::new(f_tilde, eta)?.compute_b())
}

pub fn projector_apply(f_tilde: MatRef<'_, f64>, eta: f64, j: usize) -> Result<Vec<f64>> {
    Ok(RidgeFactor::new(f_tilde, eta)?.project_column(j))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RankedPair {
    s: f64,
    j: usize,
    l: usize,
}

impl Eq for RankedPair {}

impl Ord for RankedPair {
    /// Greater means better: larger `S`, then lexicographically smaller `(j, ℓ)`.
    fn cmp(&self, other: &Self) -> Ordering {
        self.s
            .total_cmp(&other.s)
            .then_with(|| (other.j, other.l).cmp(&(self.j, self.l)))
    }
}

impl PartialOrd for RankedPair {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn column_norms(f: MatRef<'_, f64>) -> Vec<f64> {
    (0..f.ncols()).map(|j| f.col(j).norm_l2()).collect()
}

/// The `k` column pairs with the largest signed cosine similarity, best
/// first. Columns with norm below `norm_floor` are excluded.
pub fn top_pairs(f_tilde: MatRef<'_, f64>, k: usize, norm_floor: f64) -> Result<Vec<(usize, usize, f64)>> {
    let norms = column_norms(f_tilde);
    let live: Vec<usize> = (0..norms.len()).filter(|&j| norms[j] >= norm_floor && norms[j] > 0.0).collect();
    if live.len() < 2 {
        return Err(Error::DegenerateFeatures { floor: norm_floor });
    }
    let mut unit = Mat::<f64>::zeros(f_tilde.nrows(), live.len());
    for (c, &j) in live.iter().enumerate() {
        let inv = 1.0 / norms[j];
        for (o, &x) in unit.col_as_slice_mut(c).iter_mut().zip(f_tilde.col(j).iter()) {
            *o = x * inv;
        }
    }
    let cos = linalg::gram_lower(unit.as_ref());
    // min-heap of the best k seen so far
    let mut heap: BinaryHeap<std::cmp::Reverse<RankedPair>> = BinaryHeap::with_capacity(k + 1);
    for b in 0..live.len() {
        let col = cos.col_as_slice(b);
        for a in (b + 1)..live.len() {
            let cand = RankedPair {
                s: col[a],
                j: live[b],
                l: live[a],
            };
            if heap.len() < k {
                heap.push(std::cmp::Reverse(cand));
            } else if let Some(worst) = heap.peek() {
                if cand > worst.0 {
                    heap.pop();
                    heap.push(std::cmp::Reverse(cand));
                }
            }
        }
    }
    let mut out: Vec<RankedPair> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    Ok(out.into_iter().map(|p| (p.j, p.l, p.s)).collect())
}

/// Evaluates the sign rule with the full projector on each pair.
pub fn sign_match(
    factor: &RidgeFactor<'_>,
    b: MatRef<'_, f64>,
    pairs: &[(usize, usize, f64)],
    sign_floor: f64,
    epoch: usize,
) -> VerifyReport {
    let f = factor.f_tilde;
    let mut projected: std::collections::HashMap<usize, Vec<f64>> = Default::default();
    let mut records = Vec::with_capacity(pairs.len());
    for &(j, l, s) in pairs {
        let p_l = projected.entry(l).or_insert_with(|| factor.project_column(l));
        let f_j: Vec<f64> = f.col(j).iter().copied().collect();
        let resid = dot(&f_j, p_l);
        let b_jl = b[(j, l)];
        records.push(PairRecord {
            j,
            l,
            s,
            b_jl,
            resid,
            verdict: verdict(b_jl, resid, sign_floor),
        });
    }
    summarize(epoch, records)
}

fn summarize(epoch: usize, pairs: Vec<PairRecord>) -> VerifyReport {
    let count = |v: Verdict| pairs.iter().filter(|p| p.verdict == v).count();
    let (n_match, n_mismatch, n_indeterminate) = (count(Verdict::Match), count(Verdict::Mismatch), count(Verdict::Indeterminate));
    let decided = n_match + n_mismatch;
    let abs_s: Vec<f64> = pairs.iter().map(|p| p.s.abs()).collect();
    VerifyReport {
        epoch,
        sign_match: (decided > 0).then(|| n_match as f64 / decided as f64),
        median_abs_s: crate::stats::median(&abs_s),
        n_match,
        n_mismatch,
        n_indeterminate,
        pairs,
    }
}

/// `f̃_jᵀ P_{η,−jℓ} f̃_ℓ` with `P_{η,−jℓ} = η(F̃₋F̃₋ᵀ + ηI)⁻¹`, where
/// `F̃₋` drops columns `j` and `ℓ`. One fresh factorization per call.
pub fn leave_two_out_resid(f_tilde: MatRef<'_, f64>, eta: f64, j: usize, l: usize) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::RidgeRequired(eta));
    }
    let mut a = ridge_system(f_tilde, eta);
    let n = a.nrows();
    let (fj, fl) = (f_tilde.col(j), f_tilde.col(l));
    for c in 0..n {
        for r in 0..n {
            a[(r, c)] -= fj[r] * fj[c] + fl[r] * fl[c];
        }
    }
    let llt = factor(a, eta)?;
    let mut x = Mat::<f64>::from_fn(n, 1, |i, _| fl[i]);
    solve_lower_triangular_in_place(llt.L(), x.as_mut(), PAR);
    solve_upper_triangular_in_place(llt.L().transpose(), x.as_mut(), PAR);
    let fj: Vec<f64> = fj.iter().copied().collect();
    Ok(eta * dot(&fj, x.col_as_slice(0)))
}

/// Leave-two-out audit of the first pairs of a report.
pub fn exact_projector_audit(f_tilde: MatRef<'_, f64>, eta: f64, pairs: &[PairRecord]) -> Result<Vec<AuditRecord>> {
    pairs
        .iter()
        .map(|p| {
            let exact = leave_two_out_resid(f_tilde, eta, p.j, p.l)?;
            let (sa, se) = (p.resid.signum(), exact.signum());
            Ok(AuditRecord {
                j: p.j,
                l: p.l,
                resid_approx: p.resid,
                resid_exact: exact,
                sign_approx: sa,
                sign_exact: se,
                agree: sa == se,
            })
        })
        .collect()
}

/// Centered training-set activations of `params`, in f64.
pub fn checkpoint_features(split: &DataSplit, params: &Params<f64>, activation: Activation) -> Result<Mat<f64>> {
    let y = split.train.targets::<f64>();
    let cache = model::forward(&split.train.inputs, y.as_ref(), params, activation)?;
    Ok(cache.f_tilde)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointVerification {
    pub report: VerifyReport,
    pub audit: Option<Vec<AuditRecord>>,
}

impl CheckpointVerification {
    pub fn audit_agreement(&self) -> Option<(usize, usize)> {
        self.audit
            .as_ref()
            .map(|a| (a.iter().filter(|r| r.agree).count(), a.len()))
    }
}

/// Full protocol on one checkpoint: factor, `B`, top pairs, sign rule and an
/// optional audit of the first `audit` pairs.
pub fn verify_features(
    f_tilde: MatRef<'_, f64>,
    cfg: &VerifyConfig,
    epoch: usize,
    audit: Option<usize>,
) -> Result<CheckpointVerification> {
    cfg.validate()?;
    let factor = RidgeFactor::new(f_tilde, cfg.eta)?;
    let b = factor.compute_b();
    let pairs = top_pairs(f_tilde, cfg.top_k, cfg.norm_floor)?;
    let report = sign_match(&factor, b.as_ref(), &pairs, cfg.sign_floor, epoch);
    drop(b);
    let audit = match audit {
        Some(n) if n > 0 => {
            let take = n.min(report.pairs.len());
            Some(exact_projector_audit(f_tilde, cfg.eta, &report.pairs[..take])?)
        }
        _ => None,
    };
    Ok(CheckpointVerification { report, audit })
}
