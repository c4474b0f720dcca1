//! Dense row-major `f64` tensors and the forward kernels shared by the
//! recorded graph and the non-recording inference path.

use serde::{Deserialize, Serialize};

use super::NumError;

/// Dense row-major tensor of `f64` values.
///
/// Scalars have an empty shape and one element. Most operations in this
/// crate work on rank-2 tensors; vectors are represented as `1×n` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumError::DataLength {
                shape,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite {
                op: "new",
                index: pos,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(NumError::Shape {
                op: "from_rows",
                lhs: vec![m, n],
                rhs: vec![1, bad.len()],
            });
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![1.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor without validating finiteness. Kernels use this for
    /// intermediate results and validate at the graph boundary.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize), NumError> {
        if self.shape.len() != 2 {
            return Err(NumError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumError> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(NumError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::raw(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor, NumError> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::raw(vec![n, m], out))
    }

    /// Row-wise softmax of `temperature_inv * self`, computed with the row
    /// maximum subtracted.
    pub fn softmax_rows(&self, temperature_inv: f64) -> Result<Tensor, NumError> {
        let (m, n) = self.require_matrix("softmax_rows")?;
        if n == 0 {
            return Err(NumError::Empty { op: "softmax_rows" });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            softmax_into(row, temperature_inv, &mut out[i * n..(i + 1) * n]);
        }
        Ok(Tensor::raw(vec![m, n], out))
    }

    /// Scales each row to unit L2 norm. Zero rows stay zero; the count of
    /// such rows is returned alongside.
    pub fn normalize_rows(&self) -> Result<(Tensor, usize), NumError> {
        let (m, n) = self.require_matrix("normalize_rows")?;
        let mut out = self.data.clone();
        let mut zero_rows = 0;
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let norm = l2_norm(row);
            if norm == 0.0 {
                zero_rows += 1;
                continue;
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok((Tensor::raw(vec![m, n], out), zero_rows))
    }

    /// Per-row cosine similarity between two equally shaped matrices,
    /// returned as an `m×1` column.
    pub fn cosine_rows(&self, other: &Tensor) -> Result<Tensor, NumError> {
        if self.shape != other.shape {
            return Err(NumError::Shape {
                op: "cosine_rows",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let m = self.rows();
        let out = (0..m).map(|i| cosine(self.row(i), other.row(i))).collect();
        Ok(Tensor::raw(vec![m, 1], out))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor, NumError> {
        let (m, n) = self.require_matrix("gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(NumError::Index {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Tensor::raw(vec![idx.len(), n], out))
    }

    pub fn select_cols(&self, idx: &[usize]) -> Result<Tensor, NumError> {
        let (m, n) = self.require_matrix("select_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(NumError::Index {
                op: "select_cols",
                index: bad,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * idx.len());
        for i in 0..m {
            out.extend(idx.iter().map(|&j| self.data[i * n + j]));
        }
        Ok(Tensor::raw(vec![m, idx.len()], out))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumError> {
        if self.shape != other.shape {
            return Err(NumError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::raw(self.shape.clone(), data))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn softmax_into(row: &[f64], temperature_inv: f64, out: &mut [f64]) {
    let max = row
        .iter()
        .map(|&v| v * temperature_inv)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v * temperature_inv - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity. A zero-norm argument yields 0 and bumps the global
/// degenerate-cosine counter (see [`degenerate_cosine_count`]).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        note_degenerate_cosine();
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

static DEGENERATE_COSINES: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

pub(crate) fn note_degenerate_cosine() {
    DEGENERATE_COSINES.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
}

/// Number of cosine evaluations (or row normalizations) that hit a
/// zero-norm vector since process start.
pub fn degenerate_cosine_count() -> u64 {
    DEGENERATE_COSINES.load(std::sync::atomic::Ordering::Relaxed)
}

/// Correctly rounded sum of a slice (Shewchuk's exact partials).
///
/// Used where a sum of decimal-looking values must reproduce the decimal
/// total exactly, e.g. rsum over reported Recall@K percentages.
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &x in values {
        let mut x = x;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the partials to a single double, handling the half-way case.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(i, p) * b.get(p, j);
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let b = Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-14);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(NumError::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::from_rows(&[vec![0.3; 4]]).unwrap();
        let s = t.softmax_rows(1.0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let t = Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap();
        let s = t.softmax_rows(1.0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let row = [0.3, -1.2, 2.5, 0.0, 0.9];
        let t = Tensor::from_rows(&[row.to_vec()]).unwrap();
        let s = t.softmax_rows(2.0).unwrap();
        let total: f64 = row.iter().map(|v| (2.0 * v).exp()).sum();
        for (j, v) in row.iter().enumerate() {
            assert!((s.data()[j] - (2.0 * v).exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let t = Tensor::from_rows(&[vec![1000.0, 1001.0]]).unwrap();
        let s = t.softmax_rows(1.0).unwrap();
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_cosine_counts_warning() {
        let before = degenerate_cosine_count();
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!(degenerate_cosine_count() > before);
    }

    #[test]
    fn exact_sum_reproduces_decimal_totals() {
        assert_eq!(exact_sum(&[67.4, 90.7, 94.9, 47.8, 77.4, 85.3]), 463.5);
        assert_eq!(exact_sum(&[70.1, 92.0, 96.0, 52.3, 79.9, 86.8]), 477.1);
        assert_eq!(exact_sum(&[1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum(&[]), 0.0);
    }

    #[test]
    fn new_rejects_bad_data() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl proptest::strategy::Strategy<Value = Tensor> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 5), c in matrix(5, 2)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-10);
        }

        #[test]
        fn softmax_ignores_row_shift(x in matrix(3, 6), shift in -50.0f64..50.0, t in 0.1f64..20.0) {
            let shifted = x.map(|v| v + shift);
            let a = x.softmax_rows(t).unwrap();
            let b = shifted.softmax_rows(t).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }
}
