//! Independent oracles shared by the property suite and the acceptance run.
#![allow(dead_code)]

use faer::Mat;
use grokking_lab::dataset::OneHotPairs;
use grokking_lab::detectors::{slope_fire, DetectorConfig};
use grokking_lab::model::{self, Activation, Params};
use grokking_lab::thm6::{self, RidgeFactor};
use grokking_lab::trainer::{self, ReplayMode, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Column-centered copy.
pub fn centered(f: &Mat<f64>) -> Mat<f64> {
    let n = f.nrows() as f64;
    let means: Vec<f64> = (0..f.ncols()).map(|j| (0..f.nrows()).map(|i| f[(i, j)]).sum::<f64>() / n).collect();
    Mat::from_fn(f.nrows(), f.ncols(), |i, j| f[(i, j)] - means[j])
}

pub fn matmul(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    assert_eq!(a.ncols(), b.nrows());
    Mat::from_fn(a.nrows(), b.ncols(), |i, j| (0..a.ncols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
}

pub fn transpose(a: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(a.ncols(), a.nrows(), |i, j| a[(j, i)])
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &Mat<f64>) -> Mat<f64> {
    let n = a.nrows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..2 * n).map(|j| if j < n { a[(i, j)] } else if j - n == i { 1.0 } else { 0.0 }).collect())
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let d = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    let pivot = m[c].clone();
                    m[r].iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
                }
            }
        }
    }
    Mat::from_fn(n, n, |i, j| m[i][n + j])
}

/// Cyclic Jacobi eigenvalues (descending) of a symmetric matrix.
pub fn jacobi_eigenvalues(a: &Mat<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn max_rel_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let scale = (0..a.nrows())
        .flat_map(|i| (0..a.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| b[(i, j)].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    (0..a.nrows())
        .flat_map(|i| (0..a.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| (a[(i, j)] - b[(i, j)]).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Random instance shapes `(n, K)` covering both `n < K` and `n > K`.
fn shape(i: usize) -> (usize, usize) {
    [(6, 9), (12, 5), (8, 8), (15, 11), (4, 13)][i % 5]
}

/// Max relative deviation of the Woodbury `B` from a direct inverse of
/// `F̃ᵀF̃ + ηI` over `instances` random problems.
pub fn woodbury_error(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = rng(100 + i as u64);
        let (n, k) = shape(i);
        let ft = centered(&random_mat(n, k, &mut r));
        let eta = [1e-3, 1e-2, 0.1, 1.0][i % 4];
        let b = thm6::compute_b(ft.as_ref(), eta).unwrap();
        let mut a = matmul(&transpose(&ft), &ft);
        for d in 0..k {
            a[(d, d)] += eta;
        }
        worst = worst.max(max_rel_diff(&b, &inverse(&a)));
    }
    worst
}

/// Max abs difference between `P_η = η(F̃F̃ᵀ+ηI)⁻¹` and `I − F̃BF̃ᵀ`.
pub fn projector_two_form_error(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = rng(200 + i as u64);
        let (n, k) = shape(i);
        let ft = centered(&random_mat(n, k, &mut r));
        let eta = [0.05, 0.2, 1.0][i % 3];
        let factor = RidgeFactor::new(ft.as_ref(), eta).unwrap();
        let b = factor.compute_b();
        let fbf = matmul(&matmul(&ft, &b), &transpose(&ft));
        for c in 0..n {
            let e: Vec<f64> = (0..n).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
            let p = factor.project(&e);
            for (row, pv) in p.iter().enumerate() {
                let other = if row == c { 1.0 } else { 0.0 } - fbf[(row, c)];
                worst = worst.max((pv - other).abs());
            }
        }
    }
    worst
}

/// `(violations, checked pairs)` of the exact sign rule with the
/// leave-two-out projector, over every pair above `floor`.
pub fn exact_sign_rule(instances: usize, floor: f64) -> (usize, usize) {
    let (mut bad, mut checked) = (0, 0);
    for i in 0..instances {
        let mut r = rng(300 + i as u64);
        let (n, k) = shape(i);
        let ft = centered(&random_mat(n, k, &mut r));
        let eta = [0.01, 0.1, 0.5][i % 3];
        let b = thm6::compute_b(ft.as_ref(), eta).unwrap();
        for j in 0..k {
            for l in j + 1..k {
                let resid = thm6::leave_two_out_resid(ft.as_ref(), eta, j, l).unwrap();
                if resid.abs() <= floor || b[(j, l)].abs() <= floor {
                    continue;
                }
                checked += 1;
                if b[(j, l)].signum() != -resid.signum() {
                    bad += 1;
                }
            }
        }
    }
    (bad, checked)
}

/// Smallest and largest eigenvalue of `P_η` across instances, plus the
/// largest asymmetry.
pub fn projector_spectrum(instances: usize) -> (f64, f64, f64) {
    let (mut lo, mut hi, mut asym) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for i in 0..instances {
        let mut r = rng(400 + i as u64);
        let (n, k) = shape(i);
        let ft = centered(&random_mat(n, k, &mut r));
        let factor = RidgeFactor::new(ft.as_ref(), 0.1).unwrap();
        let mut p = Mat::<f64>::zeros(n, n);
        for c in 0..n {
            let e: Vec<f64> = (0..n).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
            for (row, v) in factor.project(&e).into_iter().enumerate() {
                p[(row, c)] = v;
            }
        }
        for a in 0..n {
            for b in 0..n {
                asym = asym.max((p[(a, b)] - p[(b, a)]).abs());
            }
        }
        let ev = jacobi_eigenvalues(&p);
        lo = lo.min(*ev.last().unwrap());
        hi = hi.max(ev[0]);
    }
    (lo, hi, asym)
}

fn random_pairs(m: usize, n: usize, r: &mut ChaCha8Rng) -> (OneHotPairs, Mat<f64>) {
    let a: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let b: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let y = Mat::from_fn(n, m, |i, j| if (a[i] + b[i]) % m == j { 1.0 } else { 0.0 });
    (OneHotPairs { modulus: m, a, b }, y)
}

fn loss_at(x: &OneHotPairs, y: &Mat<f64>, p: &Params<f64>, act: Activation) -> f64 {
    model::loss(&model::forward(x, y.as_ref(), p, act).unwrap())
}

/// Worst relative error of the closed-form gradient against central
/// differences, over `instances` problems with `M = 5, K = 7, n = 12`.
/// ReLU instances are redrawn until no pre-activation lies near the kink.
pub fn gradient_check(act: Activation, instances: usize) -> f64 {
    let (m, k, n, h) = (5, 7, 12, 1e-6);
    let mut worst = 0.0f64;
    let mut r = rng(match act {
        Activation::Square => 500,
        Activation::Relu => 600,
    });
    let mut done = 0;
    while done < instances {
        let (x, y) = random_pairs(m, n, &mut r);
        let p = Params {
            w: random_mat(2 * m, k, &mut r),
            v: random_mat(k, m, &mut r),
        };
        let cache = model::forward(&x, y.as_ref(), &p, act).unwrap();
        let near_kink = (0..n).any(|i| (0..k).any(|j| cache.pre[(i, j)].abs() < 1e-3));
        if act == Activation::Relu && near_kink {
            continue;
        }
        done += 1;
        let g = model::grads(&x, y.as_ref(), &p, act).unwrap();
        let mut check = |analytic: &Mat<f64>, which: usize| {
            let (rows, cols) = (analytic.nrows(), analytic.ncols());
            let scale = (0..rows)
                .flat_map(|i| (0..cols).map(move |j| (i, j)))
                .map(|(i, j)| analytic[(i, j)].abs())
                .fold(0.0, f64::max)
                .max(1e-12);
            for i in 0..rows {
                for j in 0..cols {
                    let mut plus = p.clone();
                    let mut minus = p.clone();
                    let (pp, mm) = if which == 0 { (&mut plus.w, &mut minus.w) } else { (&mut plus.v, &mut minus.v) };
                    pp[(i, j)] += h;
                    mm[(i, j)] -= h;
                    let fd = (loss_at(&x, &y, &plus, act) - loss_at(&x, &y, &minus, act)) / (2.0 * h);
                    let err = (fd - analytic[(i, j)]).abs() / scale.max(analytic[(i, j)].abs());
                    worst = worst.max(err);
                }
            }
        };
        check(&g.dw, 0);
        check(&g.dv, 1);
    }
    worst
}

/// Constructed series: ln(σ₂/σ₃) flat until 150, then rising 0.05/epoch.
pub fn synthetic_slope_fire() -> Option<usize> {
    let r: Vec<Option<f64>> = (0..400)
        .map(|t: usize| Some((0.05 * t.saturating_sub(150) as f64).exp()))
        .collect();
    slope_fire(&r, &DetectorConfig::default()).epoch()
}

pub fn toy_config() -> RunConfig {
    RunConfig {
        modulus: 7,
        hidden: 24,
        train_fraction: 0.5,
        epochs: 20,
        checkpoint_epochs: vec![0, 10, 20],
        gram_window: 5,
        indep_pairs: 16,
        seed: 11,
        ..RunConfig::default()
    }
}

pub fn replay_toy() -> bool {
    let record = trainer::run(&toy_config()).unwrap();
    trainer::replay_check(&record, ReplayMode::Exact).unwrap().matched()
}
