//! Modular-addition task tables, one-hot encodings and seeded train/test splits.

use std::io::Write;
use std::path::Path;

use faer::Mat;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModRow {
    pub a: usize,
    pub b: usize,
    pub label: usize,
}

/// All `M²` rows `(a, b, (a + b) mod M)` in row-major `(a, b)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModTable {
    pub modulus: usize,
    pub rows: Vec<ModRow>,
}

pub fn build_modadd(modulus: usize) -> Result<ModTable> {
    if modulus < 2 {
        return Err(Error::InvalidModulus(modulus));
    }
    let rows = (0..modulus)
        .flat_map(|a| {
            (0..modulus).map(move |b| ModRow {
                a,
                b,
                label: (a + b) % modulus,
            })
        })
        .collect();
    Ok(ModTable { modulus, rows })
}

/// Dense `(X, Y)`: X has ones at columns `a` and `M + b`, Y a one at `label`.
pub fn encode(table: &ModTable) -> (Mat<f64>, Mat<f64>) {
    let subset = Subset::from_rows(table.modulus, table.rows.iter().copied());
    (subset.inputs.to_dense(), subset.targets())
}

/// Sparse form of the frozen identity embedding: row `i` of `X` is
/// `e_{a_i} ⊕ e_{b_i}` in `R^{2M}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotPairs {
    pub modulus: usize,
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl OneHotPairs {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn width(&self) -> usize {
        2 * self.modulus
    }

    pub fn to_dense<T: Scalar>(&self) -> Mat<T> {
        let mut x = Mat::<T>::zeros(self.len(), self.width());
        for (i, (&a, &b)) in self.a.iter().zip(&self.b).enumerate() {
            x[(i, a)] = T::one();
            x[(i, self.modulus + b)] = T::one();
        }
        x
    }

    /// `X W` as a row gather: row `i` is `W[a_i] + W[M + b_i]`.
    pub fn apply<T: Scalar>(&self, w: faer::MatRef<'_, T>) -> Mat<T> {
        assert_eq!(w.nrows(), self.width(), "W must have 2M rows");
        let m = self.modulus;
        let mut out = Mat::<T>::zeros(self.len(), w.ncols());
        for k in 0..w.ncols() {
            let dst = out.col_as_slice_mut(k);
            match crate::linalg::col_slice(w, k) {
                Some(col) => {
                    for ((o, &a), &b) in dst.iter_mut().zip(&self.a).zip(&self.b) {
                        *o = col[a] + col[m + b];
                    }
                }
                None => {
                    for (i, o) in dst.iter_mut().enumerate() {
                        *o = w[(self.a[i], k)] + w[(m + self.b[i], k)];
                    }
                }
            }
        }
        out
    }

    /// `Xᵀ Z` as a scatter-add of the rows of `Z`.
    pub fn transpose_apply<T: Scalar>(&self, z: faer::MatRef<'_, T>) -> Mat<T> {
        assert_eq!(z.nrows(), self.len(), "Z must have n rows");
        let m = self.modulus;
        let mut out = Mat::<T>::zeros(self.width(), z.ncols());
        for k in 0..z.ncols() {
            let dst = out.col_as_slice_mut(k);
            let (lo, hi) = dst.split_at_mut(m);
            match crate::linalg::col_slice(z, k) {
                Some(col) => {
                    for ((&v, &a), &b) in col.iter().zip(&self.a).zip(&self.b) {
                        lo[a] = lo[a] + v;
                        hi[b] = hi[b] + v;
                    }
                }
                None => {
                    for i in 0..self.len() {
                        let v = z[(i, k)];
                        lo[self.a[i]] = lo[self.a[i]] + v;
                        hi[self.b[i]] = hi[self.b[i]] + v;
                    }
                }
            }
        }
        out
    }
}

/// A subset of the table: inputs plus integer labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subset {
    pub inputs: OneHotPairs,
    pub labels: Vec<usize>,
}

impl Subset {
    fn from_rows(modulus: usize, rows: impl Iterator<Item = ModRow>) -> Self {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut labels = Vec::new();
        for r in rows {
            a.push(r.a);
            b.push(r.b);
            labels.push(r.label);
        }
        Subset {
            inputs: OneHotPairs { modulus, a, b },
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One-hot target matrix `Y` (n × M).
    pub fn targets<T: Scalar>(&self) -> Mat<T> {
        let m = self.inputs.modulus;
        let mut y = Mat::<T>::zeros(self.len(), m);
        for (i, &l) in self.labels.iter().enumerate() {
            y[(i, l)] = T::one();
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub modulus: usize,
    pub train_fraction: f64,
    /// Sorted table-row indices in the training set.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train: Subset,
    pub test: Subset,
}

pub fn train_size(modulus: usize, p: f64) -> usize {
    let total = modulus * modulus;
    ((p * total as f64).floor() as usize).min(total)
}

/// Uniform subset without replacement of `floor(p·M²)` rows, fixed by `seed`.
pub fn split(table: &ModTable, p: f64, seed: u64) -> Result<DataSplit> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidFraction(p));
    }
    let total = table.rows.len();
    let n_train = train_size(table.modulus, p);
    let mut rng = stream_rng(seed, Stream::Split);
    let mut train_indices = rand::seq::index::sample(&mut rng, total, n_train).into_vec();
    train_indices.sort_unstable();

    let mut in_train = vec![false; total];
    for &i in &train_indices {
        in_train[i] = true;
    }
    let test_indices: Vec<usize> = (0..total).filter(|&i| !in_train[i]).collect();

    let pick = |idx: &[usize]| Subset::from_rows(table.modulus, idx.iter().map(|&i| table.rows[i]));
    Ok(DataSplit {
        modulus: table.modulus,
        train_fraction: p,
        train: pick(&train_indices),
        test: pick(&test_indices),
        train_indices,
        test_indices,
    })
}

/// Audit export with columns `a,b,label,is_train`.
pub fn write_split_csv(table: &ModTable, split: &DataSplit, path: &Path) -> Result<()> {
    let mut in_train = vec![false; table.rows.len()];
    for &i in &split.train_indices {
        in_train[i] = true;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(out, "a,b,label,is_train")?;
        for (row, &t) in table.rows.iter().zip(&in_train) {
            writeln!(out, "{},{},{},{}", row.a, row.b, row.label, u8::from(t))?;
        }
        out.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modulus_two_enumerates_by_hand() {
        let t = build_modadd(2).unwrap();
        let rows: Vec<_> = t.rows.iter().map(|r| (r.a, r.b, r.label)).collect();
        assert_eq!(rows, vec![(0, 0, 0), (0, 1, 1), (1, 0, 1), (1, 1, 0)]);
    }

    #[test]
    fn small_labels_and_sizes() {
        let t = build_modadd(3).unwrap();
        let r = t.rows.iter().find(|r| r.a == 1 && r.b == 2).unwrap();
        assert_eq!(r.label, 0);
        assert_eq!(build_modadd(71).unwrap().rows.len(), 5041);
        assert!(matches!(build_modadd(1), Err(Error::InvalidModulus(1))));
        assert!(matches!(build_modadd(0), Err(Error::InvalidModulus(0))));
    }

    #[test]
    fn encode_rows_and_class_balance() {
        let t = build_modadd(2).unwrap();
        let (x, y) = encode(&t);
        // row (1, 0, 1)
        assert_eq!((0..4).map(|j| x[(2, j)]).collect::<Vec<_>>(), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!((0..2).map(|j| y[(2, j)]).collect::<Vec<_>>(), vec![0.0, 1.0]);

        let t = build_modadd(7).unwrap();
        let (x, y) = encode(&t);
        for i in 0..x.nrows() {
            let s: f64 = (0..x.ncols()).map(|j| x[(i, j)]).sum();
            assert_eq!(s, 2.0);
            let first: f64 = (0..7).map(|j| x[(i, j)]).sum();
            assert_eq!(first, 1.0);
        }
        for c in 0..7 {
            let s: f64 = (0..y.nrows()).map(|i| y[(i, c)]).sum();
            assert_eq!(s, 7.0);
        }
    }

    #[test]
    fn argmax_decoding_recovers_operands() {
        let t = build_modadd(5).unwrap();
        let (x, _) = encode(&t);
        for (i, row) in t.rows.iter().enumerate() {
            let a = (0..5).find(|&j| x[(i, j)] == 1.0).unwrap();
            let b = (0..5).find(|&j| x[(i, 5 + j)] == 1.0).unwrap();
            assert_eq!((a, b), (row.a, row.b));
        }
    }

    #[test]
    fn headline_split_size() {
        let t = build_modadd(71).unwrap();
        let s = split(&t, 0.40, 0).unwrap();
        assert_eq!(s.train_indices.len(), 2016);
        assert_eq!(s.train.len() + s.test.len(), 5041);
        assert!(s.train_indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn full_fraction_leaves_empty_test_set() {
        let t = build_modadd(5).unwrap();
        let s = split(&t, 1.0, 3).unwrap();
        assert_eq!(s.train.len(), 25);
        assert!(s.test.is_empty());
    }

    #[test]
    fn fraction_out_of_range_is_rejected() {
        let t = build_modadd(5).unwrap();
        for p in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(split(&t, p, 0), Err(Error::InvalidFraction(_))));
        }
    }

    #[test]
    fn split_is_seed_deterministic_and_seed_sensitive() {
        let t = build_modadd(11).unwrap();
        let a = split(&t, 0.4, 7).unwrap();
        let b = split(&t, 0.4, 7).unwrap();
        assert_eq!(a.train_indices, b.train_indices);
        let others: Vec<_> = (8..11).map(|s| split(&t, 0.4, s).unwrap().train_indices).collect();
        for o in &others {
            assert_ne!(o, &a.train_indices);
        }
        let mut all: Vec<usize> = a.train_indices.iter().chain(&a.test_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..121).collect::<Vec<_>>());
    }

    #[test]
    fn gather_and_scatter_match_dense_products() {
        let t = build_modadd(4).unwrap();
        let s = split(&t, 0.5, 1).unwrap();
        let x = s.train.inputs.to_dense::<f64>();
        let w = Mat::<f64>::from_fn(8, 3, |i, j| (i as f64 - 2.5) * 0.3 + j as f64);
        let xw = s.train.inputs.apply(w.as_ref());
        let dense = crate::linalg::mul(x.as_ref(), w.as_ref());
        let z = Mat::<f64>::from_fn(s.train.len(), 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let xtz = s.train.inputs.transpose_apply(z.as_ref());
        let dense_t = crate::linalg::mul(x.transpose(), z.as_ref());
        for i in 0..xw.nrows() {
            for j in 0..3 {
                assert_eq!(xw[(i, j)], dense[(i, j)]);
            }
        }
        for i in 0..8 {
            for j in 0..3 {
                assert!((xtz[(i, j)] - dense_t[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_csv_has_one_row_per_table_entry() {
        let t = build_modadd(3).unwrap();
        let s = split(&t, 0.5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        write_split_csv(&t, &s, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "a,b,label,is_train");
        assert_eq!(lines.len(), 10);
        let n_train = lines[1..].iter().filter(|l| l.ends_with(",1")).count();
        assert_eq!(n_train, 4);
    }
}
