use super::dense::Dense;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Compressed-row sparse matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

pub type SparseMatrix = Csr<f32>;

/// How node degrees are measured for symmetric normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegreeMode {
    /// Number of stored nonzeros in the row (binary graphs).
    Count,
    /// Sum of stored values in the row (weighted graphs).
    ValueSum,
    /// Sum of absolute stored values; admits signed weights.
    AbsValueSum,
}

impl<T: Scalar> Csr<T> {
    pub fn new(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1 || indptr[0] != 0 {
            return Err(Error::Shape {
                expected: format!("{} row offsets starting at 0", rows + 1),
                actual: format!("{} offsets", indptr.len()),
            });
        }
        if indptr.windows(2).any(|w| w[0] > w[1]) || indptr[rows] != indices.len() {
            return Err(Error::Domain("row offsets must be nondecreasing and end at nnz".into()));
        }
        if indices.len() != values.len() {
            return Err(Error::Shape {
                expected: format!("{} values", indices.len()),
                actual: format!("{} values", values.len()),
            });
        }
        for r in 0..rows {
            let idx = &indices[indptr[r]..indptr[r + 1]];
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Domain(format!(
                    "column indices of row {r} are not strictly increasing"
                )));
            }
            if idx.last().is_some_and(|&c| c >= cols) {
                return Err(Error::Index(format!("column index in row {r} exceeds {cols}")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse values".into()));
        }
        Ok(Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Csr {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Csr {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut trip: Vec<(usize, usize, T)>) -> Result<Self> {
        for &(r, c, _) in &trip {
            if r >= rows || c >= cols {
                return Err(Error::Index(format!("({r},{c}) outside {rows}x{cols}")));
            }
        }
        trip.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(trip.len());
        let mut values: Vec<T> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Csr::new(rows, cols, indptr, indices, values)
    }

    pub fn from_dense(d: &Dense<T>) -> Self {
        let mut trip = Vec::new();
        for r in 0..d.rows() {
            for c in 0..d.cols() {
                let v = d.get(r, c);
                if v != T::zero() {
                    trip.push((r, c, v));
                }
            }
        }
        Self::from_triplets(d.rows(), d.cols(), trip).expect("dense entries are in range")
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[T]) {
        let (s, e) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[s..e], &self.values[s..e])
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        let (idx, val) = self.row(r);
        match idx.binary_search(&c) {
            Ok(p) => val[p],
            Err(_) => T::zero(),
        }
    }

    pub fn to_dense(&self) -> Dense<T> {
        let mut d = Dense::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                d.set(r, c, v);
            }
        }
        d
    }

    pub fn cast<U: Scalar>(&self) -> Csr<U> {
        Csr {
            rows: self.rows,
            cols: self.cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut trip = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                trip.push((c, r, v));
            }
        }
        Self::from_triplets(self.cols, self.rows, trip).expect("transpose stays in range")
    }

    /// Sparse-dense product `self · b`, parallel over output rows.
    pub fn spmm(&self, b: &Dense<T>) -> Result<Dense<T>> {
        if self.cols != b.rows() {
            return Err(Error::dim(
                "spmm",
                format!("{}x{} · {:?}", self.rows, self.cols, b.shape()),
            ));
        }
        let mut out = Dense::zeros(self.rows, b.cols());
        out.par_rows_mut(|r, orow| {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                for (o, &x) in orow.iter_mut().zip(b.row(c)) {
                    *o += v * x;
                }
            }
        });
        Ok(out)
    }

    /// `selfᵀ · b` without materializing the transpose.
    pub fn spmm_transposed(&self, b: &Dense<T>) -> Result<Dense<T>> {
        if self.rows != b.rows() {
            return Err(Error::dim(
                "spmm_transposed",
                format!("({}x{})ᵀ · {:?}", self.rows, self.cols, b.shape()),
            ));
        }
        let mut out = Dense::zeros(self.cols, b.cols());
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            let brow = b.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(brow) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    pub fn degrees(&self, mode: DegreeMode) -> Vec<T> {
        (0..self.rows)
            .map(|r| match mode {
                DegreeMode::Count => T::of(self.row_nnz(r) as f64),
                DegreeMode::ValueSum => self.row(r).1.iter().copied().sum(),
                DegreeMode::AbsValueSum => self.row(r).1.iter().map(|v| v.abs()).sum(),
            })
            .collect()
    }

    /// `D^{-1/2} A D^{-1/2}`. Zero-degree nodes produce zero rows and columns.
    /// Negative entries are rejected unless degrees are absolute sums.
    pub fn sym_normalize(&self, mode: DegreeMode) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::dim(
                "sym_normalize",
                format!("matrix must be square, got {}x{}", self.rows, self.cols),
            ));
        }
        if mode != DegreeMode::AbsValueSum && self.values.iter().any(|&v| v < T::zero()) {
            return Err(Error::Domain(
                "sym_normalize requires nonnegative entries".into(),
            ));
        }
        let inv_sqrt: Vec<T> = self
            .degrees(mode)
            .into_iter()
            .map(|d| {
                if d > T::zero() {
                    T::one() / d.sqrt()
                } else {
                    T::zero()
                }
            })
            .collect();
        let mut values = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                values.push(v * inv_sqrt[r] * inv_sqrt[c]);
            }
        }
        Ok(Csr {
            rows: self.rows,
            cols: self.cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spmm_is_noop() {
        let b = Dense::from_fn(3, 2, |r, c| (r * 2 + c) as f32 - 1.5);
        assert_eq!(Csr::identity(3).spmm(&b).unwrap(), b);
    }

    #[test]
    fn zero_spmm_is_zero() {
        let b = Dense::from_fn(3, 2, |r, c| (r + c) as f32);
        let z = Csr::<f32>::zeros(4, 3).spmm(&b).unwrap();
        assert_eq!(z, Dense::zeros(4, 2));
    }

    #[test]
    fn spmm_shape_mismatch() {
        let b = Dense::<f32>::zeros(2, 2);
        assert!(matches!(
            Csr::<f32>::identity(3).spmm(&b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn single_edge_normalizes_to_one() {
        let a = Csr::from_triplets(2, 2, vec![(0, 1, 1.0f32), (1, 0, 1.0)]).unwrap();
        let n = a.sym_normalize(DegreeMode::Count).unwrap();
        assert_eq!(n.get(0, 1), 1.0);
        assert_eq!(n.get(1, 0), 1.0);
    }

    #[test]
    fn star_graph_hub_leaf_weight() {
        // hub 0 with leaves 1..=3: d_hub = 3, d_leaf = 1
        let mut t = Vec::new();
        for l in 1..=3 {
            t.push((0, l, 1.0f64));
            t.push((l, 0, 1.0));
        }
        let n = Csr::from_triplets(4, 4, t)
            .unwrap()
            .sym_normalize(DegreeMode::Count)
            .unwrap();
        for l in 1..=3 {
            assert!((n.get(0, l) - 1.0 / 3f64.sqrt()).abs() < 1e-15);
            assert!((n.get(l, 0) - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_node_gives_zero_row() {
        let a = Csr::from_triplets(3, 3, vec![(0, 1, 1.0f32), (1, 0, 1.0)]).unwrap();
        let n = a.sym_normalize(DegreeMode::Count).unwrap();
        assert_eq!(n.row_nnz(2), 0);
        assert!(n.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn negative_entries_rejected() {
        let a = Csr::from_triplets(2, 2, vec![(0, 1, -1.0f32)]).unwrap();
        assert!(matches!(
            a.sym_normalize(DegreeMode::ValueSum),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn value_sum_degrees() {
        let a = Csr::from_triplets(2, 2, vec![(0, 1, 0.5f64), (1, 0, 0.5)]).unwrap();
        let n = a.sym_normalize(DegreeMode::ValueSum).unwrap();
        // 0.5 / sqrt(0.5 * 0.5)
        assert!((n.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constructor_validates_layout() {
        assert!(Csr::<f32>::new(2, 2, vec![0, 1], vec![0], vec![1.0]).is_err());
        assert!(Csr::<f32>::new(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(Csr::<f32>::new(1, 3, vec![0, 1], vec![0], vec![f32::NAN]).is_err());
        assert!(Csr::<f32>::new(1, 3, vec![0, 2], vec![0, 2], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn duplicates_are_summed() {
        let a = Csr::from_triplets(1, 2, vec![(0, 1, 1.0f32), (0, 1, 2.0)]).unwrap();
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.get(0, 1), 3.0);
    }
}
