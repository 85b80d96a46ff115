//! Per-epoch observables: rolling Gram spectra of parameter updates,
//! the level metric `ρ_tian`, the off-diagonal ratio of `F̃ᵀF̃`, `‖G_F‖`
//! and a sampled column-independence proxy for `G_F`.

use std::collections::VecDeque;

use faer::{Mat, MatRef, Side};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot};
use crate::scalar::Scalar;

/// Number of leading eigenvalues reported per window.
pub const TOP: usize = 5;

/// Negative eigenvalues down to this magnitude are treated as round-off.
const EIG_NEG_TOL: f64 = 1e-10;

/// FIFO window of flattened update vectors with an incrementally
/// maintained `w × w` Gram matrix.
#[derive(Debug, Clone)]
pub struct SpectralWindow {
    capacity: usize,
    dim: Option<usize>,
    buffer: VecDeque<Vec<f64>>,
    // gram[i][j] = <buffer[i], buffer[j]>
    gram: VecDeque<VecDeque<f64>>,
}

impl SpectralWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be positive");
        SpectralWindow {
            capacity,
            dim: None,
            buffer: VecDeque::with_capacity(capacity + 1),
            gram: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn contents(&self) -> impl Iterator<Item = &[f64]> {
        self.buffer.iter().map(Vec::as_slice)
    }

    /// Appends `delta` (evicting the oldest entry at capacity) and returns the
    /// top eigenvalues of `ΔᵀΔ`, descending, zero-padded past the fill level.
    pub fn push_and_spectrum(&mut self, delta: Vec<f64>) -> Result<[f64; TOP]> {
        match self.dim {
            Some(d) if d != delta.len() => {
                return Err(Error::shape("window delta length", d, delta.len()));
            }
            None => self.dim = Some(delta.len()),
            _ => {}
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
            self.gram.pop_front();
            for row in &mut self.gram {
                row.pop_front();
            }
        }
        let dots: Vec<f64> = self.buffer.iter().map(|v| dot(v, &delta)).collect();
        for (row, &d) in self.gram.iter_mut().zip(&dots) {
            row.push_back(d);
        }
        let mut new_row: VecDeque<f64> = dots.into();
        new_row.push_back(dot(&delta, &delta));
        self.gram.push_back(new_row);
        self.buffer.push_back(delta);
        self.spectrum()
    }

    pub fn gram_matrix(&self) -> Mat<f64> {
        let w = self.buffer.len();
        Mat::from_fn(w, w, |i, j| self.gram[i][j])
    }

    fn spectrum(&self) -> Result<[f64; TOP]> {
        let g = self.gram_matrix();
        let mut eig = g
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|_| Error::UndefinedMetric {
                metric: "gram spectrum",
                reason: "eigensolver did not converge",
            })?;
        eig.sort_by(|a, b| b.total_cmp(a));
        let mut out = [0.0; TOP];
        for (slot, &l) in out.iter_mut().zip(&eig) {
            // tiny negatives are round-off; anything else is clamped too but flagged in debug
            debug_assert!(l >= -EIG_NEG_TOL * eig[0].abs().max(1.0), "negative Gram eigenvalue {l}");
            *slot = l.max(0.0);
        }
        Ok(out)
    }
}

/// Scalar summaries of `C = F̃ᵀF̃` and the column sums `s = Fᵀ1`, enough to
/// evaluate both `ρ_tian` and the off-diagonal ratio without forming any
/// `n × n` matrix. Only the lower triangle of `C` is ever computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationGram {
    pub n: usize,
    /// `‖C‖²_F`
    pub c_fro2: f64,
    /// `sᵀCs`
    pub s_c_s: f64,
    /// `tr C`
    pub trace: f64,
    /// `‖s‖²`
    pub s_norm2: f64,
    /// `Σ_j C_jj²`
    pub diag2: f64,
}

impl ActivationGram {
    pub fn from_activations<T: Scalar>(f: MatRef<'_, T>) -> Self {
        let (n, k) = (f.nrows(), f.ncols());
        let mut f_tilde = Mat::<f64>::zeros(n, k);
        let mut s = vec![0.0; k];
        for j in 0..k {
            let dst = f_tilde.col_as_slice_mut(j);
            match linalg::col_slice(f, j) {
                Some(col) => dst.iter_mut().zip(col).for_each(|(o, &x)| *o = x.widen()),
                None => dst.iter_mut().enumerate().for_each(|(i, o)| *o = f[(i, j)].widen()),
            }
            let sum: f64 = dst.iter().sum();
            s[j] = sum;
            let mean = if n > 0 { sum / n as f64 } else { 0.0 };
            dst.iter_mut().for_each(|x| *x -= mean);
        }
        let c = linalg::gram_lower(f_tilde.as_ref());
        drop(f_tilde);
        let (mut c_fro2, mut s_c_s, mut trace, mut diag2) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..k {
            let col = &c.col_as_slice(j)[j..];
            let d = col[0];
            trace += d;
            diag2 += d * d;
            s_c_s += s[j] * s[j] * d;
            let below = &col[1..];
            c_fro2 += 2.0 * dot(below, below);
            s_c_s += 2.0 * s[j] * dot(below, &s[j + 1..]);
        }
        c_fro2 += diag2;
        ActivationGram {
            n,
            c_fro2,
            s_c_s,
            trace,
            s_norm2: dot(&s, &s),
            diag2,
        }
    }

    /// `ρ = ‖P₁⊥FFᵀ − (aI + b11ᵀ)‖_F / ‖FFᵀ‖_F` where the level matrix
    /// carries the mean diagonal entry of `M = P₁⊥FFᵀ` on its diagonal and
    /// the mean off-diagonal entry elsewhere.
    ///
    /// With `G = FᵀF = C + ssᵀ/n`: `tr M = tr C`, `‖M‖² = ⟨G, C⟩`,
    /// `1ᵀM1 = 0` and `‖FFᵀ‖ = ‖G‖`. The expanded norm cancels, so values
    /// carry an absolute error of roughly `1e-8`; [`rho_tian`] evaluates the
    /// `n × n` residual directly when that matters.
    pub fn rho_tian(&self) -> Result<f64> {
        if self.n < 2 {
            return Err(Error::UndefinedMetric {
                metric: "rho_tian",
                reason: "needs at least two samples",
            });
        }
        let nf = self.n as f64;
        let g_fro2 = self.c_fro2 + 2.0 * self.s_c_s / nf + self.s_norm2 * self.s_norm2 / (nf * nf);
        if g_fro2 <= 0.0 {
            return Err(Error::UndefinedMetric {
                metric: "rho_tian",
                reason: "activation Gram is zero (all-dead activations)",
            });
        }
        // ⟨G, C⟩ = ‖C‖² + sᵀCs/n
        let m_fro2 = self.c_fro2 + self.s_c_s / nf;
        let diag_mean = self.trace / nf;
        let off_mean = -self.trace / (nf * (nf - 1.0));
        let level2 = nf * diag_mean * diag_mean + nf * (nf - 1.0) * off_mean * off_mean;
        let num2 = (m_fro2 - level2).max(0.0);
        Ok((num2 / g_fro2).sqrt())
    }

    /// `‖offdiag(F̃ᵀF̃)‖_F / ‖diag(F̃ᵀF̃)‖_F`.
    pub fn offdiag_ratio(&self) -> Result<f64> {
        if self.diag2 == 0.0 {
            return Err(Error::UndefinedMetric {
                metric: "offdiag_ratio",
                reason: "diagonal of the feature Gram is zero",
            });
        }
        Ok(((self.c_fro2 - self.diag2).max(0.0) / self.diag2).sqrt())
    }
}

/// Direct evaluation of `ρ_tian` on the `n × n` matrix `P₁⊥FFᵀ`.
pub fn rho_tian(f: MatRef<'_, f64>) -> Result<f64> {
    let n = f.nrows();
    if n < 2 {
        return Err(Error::UndefinedMetric {
            metric: "rho_tian",
            reason: "needs at least two samples",
        });
    }
    let f_tilde = linalg::center_rows(f);
    let m = linalg::mul(f_tilde.as_ref(), f.transpose());
    let fft = linalg::outer_gram(f);
    let den = linalg::frobenius(fft.as_ref());
    if den == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "rho_tian",
            reason: "activation Gram is zero (all-dead activations)",
        });
    }
    let nf = n as f64;
    let trace: f64 = (0..n).map(|i| m[(i, i)]).sum();
    let total: f64 = (0..n).map(|j| m.col_as_slice(j).iter().sum::<f64>()).sum();
    let diag_mean = trace / nf;
    let off_mean = (total - trace) / (nf * (nf - 1.0));
    let mut num2 = 0.0;
    for j in 0..n {
        for (i, &x) in m.col_as_slice(j).iter().enumerate() {
            let level = if i == j { diag_mean } else { off_mean };
            num2 += (x - level) * (x - level);
        }
    }
    Ok(num2.sqrt() / den)
}

pub fn offdiag_ratio(f_tilde: MatRef<'_, f64>) -> Result<f64> {
    if f_tilde.ncols() < 2 {
        return Err(Error::UndefinedMetric {
            metric: "offdiag_ratio",
            reason: "needs at least two features",
        });
    }
    offdiag_ratio_of(linalg::gram(f_tilde).as_ref())
}

fn offdiag_ratio_of(c: MatRef<'_, f64>) -> Result<f64> {
    let k = c.nrows();
    let mut diag2 = 0.0;
    let mut off2 = 0.0;
    for j in 0..k {
        for i in 0..k {
            let x = c[(i, j)] * c[(i, j)];
            if i == j {
                diag2 += x;
            } else {
                off2 += x;
            }
        }
    }
    if diag2 == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "offdiag_ratio",
            reason: "diagonal of the feature Gram is zero",
        });
    }
    Ok((off2 / diag2).sqrt())
}

pub fn gf_norm<T: Scalar>(g_f: MatRef<'_, T>) -> f64 {
    linalg::frobenius(g_f)
}

/// Mean `|cos|` over `n_pairs` distinct column pairs of `G_F`. When
/// `n_pairs` covers every pair, all pairs are used and `rng` is untouched;
/// otherwise pairs are drawn uniformly from `rng`, skipping zero-norm columns.
pub fn indep_proxy<T: Scalar>(g_f: MatRef<'_, T>, n_pairs: usize, rng: &mut impl Rng) -> Result<f64> {
    let k = g_f.ncols();
    let norms: Vec<f64> = (0..k)
        .map(|j| g_f.col(j).iter().map(|x| x.widen() * x.widen()).sum::<f64>().sqrt())
        .collect();
    let live: Vec<usize> = (0..k).filter(|&j| norms[j] > 0.0).collect();
    if live.len() < 2 {
        return Err(Error::UndefinedMetric {
            metric: "indep_proxy",
            reason: "fewer than two nonzero gradient columns",
        });
    }
    let cos = |j: usize, l: usize| {
        let d: f64 = g_f
            .col(j)
            .iter()
            .zip(g_f.col(l).iter())
            .map(|(a, b)| a.widen() * b.widen())
            .sum();
        (d / (norms[j] * norms[l])).abs()
    };
    let total_pairs = live.len() * (live.len() - 1) / 2;
    if n_pairs >= total_pairs {
        let mut acc = 0.0;
        for (x, &j) in live.iter().enumerate() {
            for &l in &live[x + 1..] {
                acc += cos(j, l);
            }
        }
        return Ok(acc / total_pairs as f64);
    }
    let mut acc = 0.0;
    let mut taken = 0;
    while taken < n_pairs {
        let j = rng.random_range(0..k);
        let l = rng.random_range(0..k);
        if j == l || norms[j] == 0.0 || norms[l] == 0.0 {
            continue;
        }
        acc += cos(j, l);
        taken += 1;
    }
    Ok(acc / n_pairs as f64)
}

/// One row of the per-epoch log. Cadence-skipped or undefined metrics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub loss: f64,
    pub rho_tian: Option<f64>,
    pub offdiag_ratio: Option<f64>,
    pub gf_norm: Option<f64>,
    pub indep_proxy: Option<f64>,
    pub sigma_w: [f64; TOP],
    pub sigma_v: [f64; TOP],
}

impl EpochMetrics {
    /// `σ_a / σ_b` (1-based) on the ΔW spectrum; undefined when `σ_b = 0`.
    pub fn sigma_w_ratio(&self, a: usize, b: usize) -> Option<f64> {
        let (num, den) = (self.sigma_w[a - 1], self.sigma_w[b - 1]);
        (den > 0.0).then(|| num / den)
    }
}
