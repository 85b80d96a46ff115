//! Two-layer network `Ŷ = σ(XW)V` with the zero-meaned squared loss
//! `J = ½‖P₁⊥(FV − Y)‖²_F`, `P₁⊥ = I − 11ᵀ/n`.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::dataset::OneHotPairs;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `σ(x) = x²`
    Square,
    /// `σ(x) = max(x, 0)` with `σ'(0) = 0`
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Square => x * x,
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Square => x + x,
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Square => "square",
            Activation::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" | "x2" => Ok(Activation::Square),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Model weights: `W` is `2M × K`, `V` is `K × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub w: Mat<T>,
    pub v: Mat<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(modulus: usize, hidden: usize) -> Self {
        Params {
            w: Mat::zeros(2 * modulus, hidden),
            v: Mat::zeros(hidden, modulus),
        }
    }

    pub fn modulus(&self) -> usize {
        self.v.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.v.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Pre-activations `XW`.
    pub pre: Mat<T>,
    /// Activations `F = σ(XW)`.
    pub f: Mat<T>,
    /// Sample-centered activations `P₁⊥F`.
    pub f_tilde: Mat<T>,
    pub yhat: Mat<T>,
    /// `R = P₁⊥(FV − Y)`.
    pub residual: Mat<T>,
    /// `G_F = ∂J/∂F = R Vᵀ`.
    pub g_f: Mat<T>,
}

#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub dw: Mat<T>,
    pub dv: Mat<T>,
    pub g_f: Mat<T>,
}

fn check_shapes<T: Scalar>(x: &OneHotPairs, y: MatRef<'_, T>, params: &Params<T>) -> Result<()> {
    if params.w.nrows() != x.width() {
        return Err(Error::shape("W rows", x.width(), params.w.nrows()));
    }
    if params.v.nrows() != params.w.ncols() {
        return Err(Error::shape("V rows", params.w.ncols(), params.v.nrows()));
    }
    if y.nrows() != x.len() || y.ncols() != params.v.ncols() {
        return Err(Error::shape(
            "Y",
            format!("{}x{}", x.len(), params.v.ncols()),
            format!("{}x{}", y.nrows(), y.ncols()),
        ));
    }
    Ok(())
}

/// Resizes `m` to `rows × cols` when its shape differs (contents unspecified).
fn ensure_shape<T: Scalar>(m: &mut Mat<T>, rows: usize, cols: usize) {
    if m.nrows() != rows || m.ncols() != cols {
        *m = Mat::zeros(rows, cols);
    }
}

/// `pre = XW` and `F = σ(pre)` in one pass; `centered`, when given, receives
/// `P₁⊥F`. Returns false if any activation column is non-finite.
fn gather_activate<T: Scalar>(
    x: &OneHotPairs,
    w: &Mat<T>,
    act: Activation,
    mut pre: Option<&mut Mat<T>>,
    f: &mut Mat<T>,
    mut centered: Option<&mut Mat<T>>,
) -> bool {
    let (n, k, m) = (x.len(), w.ncols(), x.modulus);
    ensure_shape(f, n, k);
    if let Some(p) = pre.as_deref_mut() {
        ensure_shape(p, n, k);
    }
    if let Some(c) = centered.as_deref_mut() {
        ensure_shape(c, n, k);
    }
    let inv_n = T::lift(1.0 / n.max(1) as f64);
    let mut finite = true;
    for j in 0..k {
        let wc = w.col_as_slice(j);
        let fc = f.col_as_slice_mut(j);
        let mut sum = T::zero();
        match pre.as_deref_mut() {
            Some(p) => {
                let pc = p.col_as_slice_mut(j);
                for (((o, q), &a), &b) in fc.iter_mut().zip(pc.iter_mut()).zip(&x.a).zip(&x.b) {
                    let z = wc[a] + wc[m + b];
                    *q = z;
                    *o = act.apply(z);
                    sum = sum + *o;
                }
            }
            None => {
                for ((o, &a), &b) in fc.iter_mut().zip(&x.a).zip(&x.b) {
                    *o = act.apply(wc[a] + wc[m + b]);
                    sum = sum + *o;
                }
            }
        }
        finite &= sum.is_finite();
        if let Some(c) = centered.as_deref_mut() {
            let mean = sum * inv_n;
            for (o, &v) in c.col_as_slice_mut(j).iter_mut().zip(fc.iter()) {
                *o = v - mean;
            }
        }
    }
    finite
}

fn matmul_into<T: Scalar>(out: &mut Mat<T>, lhs: MatRef<'_, T>, rhs: MatRef<'_, T>) {
    ensure_shape(out, lhs.nrows(), rhs.ncols());
    faer::linalg::matmul::matmul(out.as_mut(), faer::Accum::Replace, lhs, rhs, T::one(), linalg::PAR);
}

/// Predictions only (used for held-out evaluation).
pub fn predict<T: Scalar>(x: &OneHotPairs, params: &Params<T>, act: Activation) -> Result<Mat<T>> {
    let mut f = Mat::zeros(0, 0);
    let mut yhat = Mat::zeros(0, 0);
    predict_into(x, params, act, &mut f, &mut yhat)?;
    Ok(yhat)
}

/// [`predict`] writing into caller-owned buffers.
pub fn predict_into<T: Scalar>(
    x: &OneHotPairs,
    params: &Params<T>,
    act: Activation,
    f: &mut Mat<T>,
    yhat: &mut Mat<T>,
) -> Result<()> {
    if params.w.nrows() != x.width() {
        return Err(Error::shape("W rows", x.width(), params.w.nrows()));
    }
    if !gather_activate(x, &params.w, act, None, f, None) {
        return Err(Error::NumericOverflow {
            tensor: "F",
            epoch: None,
        });
    }
    matmul_into(yhat, f.as_ref(), params.v.as_ref());
    if !linalg::all_finite(yhat.as_ref()) {
        return Err(Error::NumericOverflow {
            tensor: "Yhat",
            epoch: None,
        });
    }
    Ok(())
}

impl<T: Scalar> ForwardCache<T> {
    /// Buffers that [`forward_into`] sizes on first use.
    pub fn empty() -> Self {
        ForwardCache {
            pre: Mat::zeros(0, 0),
            f: Mat::zeros(0, 0),
            f_tilde: Mat::zeros(0, 0),
            yhat: Mat::zeros(0, 0),
            residual: Mat::zeros(0, 0),
            g_f: Mat::zeros(0, 0),
        }
    }
}

pub fn forward<T: Scalar>(
    x: &OneHotPairs,
    y: MatRef<'_, T>,
    params: &Params<T>,
    act: Activation,
) -> Result<ForwardCache<T>> {
    let mut cache = ForwardCache::empty();
    forward_into(x, y, params, act, &mut cache)?;
    Ok(cache)
}

/// [`forward`] reusing the buffers already held by `cache`.
pub fn forward_into<T: Scalar>(
    x: &OneHotPairs,
    y: MatRef<'_, T>,
    params: &Params<T>,
    act: Activation,
    cache: &mut ForwardCache<T>,
) -> Result<()> {
    check_shapes(x, y, params)?;
    let ForwardCache {
        pre,
        f,
        f_tilde,
        yhat,
        residual,
        g_f,
    } = cache;
    if !gather_activate(x, &params.w, act, Some(pre), f, Some(f_tilde)) {
        return Err(Error::NumericOverflow {
            tensor: "F",
            epoch: None,
        });
    }
    matmul_into(yhat, f.as_ref(), params.v.as_ref());
    if !linalg::all_finite(yhat.as_ref()) {
        return Err(Error::NumericOverflow {
            tensor: "Yhat",
            epoch: None,
        });
    }
    let n = yhat.nrows();
    ensure_shape(residual, n, yhat.ncols());
    let inv_n = T::lift(1.0 / n.max(1) as f64);
    for j in 0..yhat.ncols() {
        let r = residual.col_as_slice_mut(j);
        let yh = yhat.col_as_slice(j);
        match linalg::col_slice(y, j) {
            Some(col) => r.iter_mut().zip(yh).zip(col).for_each(|((o, &p), &t)| *o = p - t),
            None => r.iter_mut().zip(yh).enumerate().for_each(|(i, (o, &p))| *o = p - y[(i, j)]),
        }
        let mean = r.iter().fold(T::zero(), |acc, &v| acc + v) * inv_n;
        r.iter_mut().for_each(|v| *v = *v - mean);
    }
    matmul_into(g_f, residual.as_ref(), params.v.transpose());
    Ok(())
}

/// `J = ½‖R‖²_F`, accumulated in f64.
pub fn loss<T: Scalar>(cache: &ForwardCache<T>) -> f64 {
    let r = linalg::frobenius(cache.residual.as_ref());
    0.5 * r * r
}

/// `dV = FᵀR` and `dW = Xᵀ(G_F ⊙ σ'(XW))` into caller-owned buffers; the
/// masked product is scattered on the fly rather than materialized.
pub fn backward_into<T: Scalar>(
    x: &OneHotPairs,
    cache: &ForwardCache<T>,
    act: Activation,
    dw: &mut Mat<T>,
    dv: &mut Mat<T>,
) {
    matmul_into(dv, cache.f.transpose(), cache.residual.as_ref());
    let (k, m) = (cache.g_f.ncols(), x.modulus);
    ensure_shape(dw, x.width(), k);
    for j in 0..k {
        let g = cache.g_f.col_as_slice(j);
        let p = cache.pre.col_as_slice(j);
        let dst = dw.col_as_slice_mut(j);
        dst.iter_mut().for_each(|v| *v = T::zero());
        let (lo, hi) = dst.split_at_mut(m);
        for (((&gi, &pi), &a), &b) in g.iter().zip(p).zip(&x.a).zip(&x.b) {
            let v = gi * act.derivative(pi);
            lo[a] = lo[a] + v;
            hi[b] = hi[b] + v;
        }
    }
}

/// Closed-form gradients reusing a forward cache:
/// `dV = FᵀR`, `G_F = RVᵀ`, `dW = Xᵀ(G_F ⊙ σ'(XW))`.
pub fn grads_from_cache<T: Scalar>(x: &OneHotPairs, cache: &ForwardCache<T>, act: Activation) -> Grads<T> {
    let mut dw = Mat::zeros(0, 0);
    let mut dv = Mat::zeros(0, 0);
    backward_into(x, cache, act, &mut dw, &mut dv);
    Grads {
        dw,
        dv,
        g_f: cache.g_f.clone(),
    }
}

pub fn grads<T: Scalar>(
    x: &OneHotPairs,
    y: MatRef<'_, T>,
    params: &Params<T>,
    act: Activation,
) -> Result<Grads<T>> {
    let cache = forward(x, y, params, act)?;
    Ok(grads_from_cache(x, &cache, act))
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax_row<T: Scalar>(m: MatRef<'_, T>, i: usize) -> usize {
    let mut best = 0;
    for j in 1..m.ncols() {
        if m[(i, j)] > m[(i, best)] {
            best = j;
        }
    }
    best
}

/// Fraction of rows where `argmax(Ŷ) = argmax(Y)`.
pub fn accuracy<T: Scalar>(yhat: MatRef<'_, T>, y: MatRef<'_, T>) -> f64 {
    assert_eq!((yhat.nrows(), yhat.ncols()), (y.nrows(), y.ncols()));
    if yhat.nrows() == 0 {
        return 0.0;
    }
    let hits = (0..yhat.nrows())
        .filter(|&i| argmax_row(yhat, i) == argmax_row(y, i))
        .count();
    hits as f64 / yhat.nrows() as f64
}

pub fn accuracy_labels<T: Scalar>(yhat: MatRef<'_, T>, labels: &[usize]) -> f64 {
    assert_eq!(yhat.nrows(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax_row(yhat, i) == l)
        .count();
    hits as f64 / labels.len() as f64
}
