//! Dense row-major tensors and the eager numeric kernels used by the tape.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{arg_err, QueptError, Result};
use crate::scalar::Scalar;

/// Dense row-major array. `data.len()` always equals the product of `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return arg_err(format!("shape {shape:?} must be non-empty with positive dims"));
        }
        if numel_of(&shape) != data.len() {
            return Err(QueptError::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel_of(shape)],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return arg_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: T, rng: &mut R) -> Self {
        let n = numel_of(shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z) * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: T, hi: T, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(lo.to_f64_lossy(), hi.to_f64_lossy());
        let data = (0..numel_of(shape)).map(|_| T::lit(dist.sample(rng))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(QueptError::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.numel() as f64)
    }

    /// Largest element and its first index.
    pub fn argmax(&self) -> (usize, T) {
        let mut best = (0, self.data[0]);
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    /// Smallest element and its first index.
    pub fn argmin(&self) -> (usize, T) {
        let mut best = (0, self.data[0]);
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v < best.1 {
                best = (i, v);
            }
        }
        best
    }

    fn check_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(QueptError::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self [m×k] · other [k×n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.check_2d("matmul")?;
        let (k2, n) = other.check_2d("matmul")?;
        if k != k2 {
            return Err(QueptError::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    /// `self [m×k] · otherᵀ` where `other` is `[n×k]`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.check_2d("matmul_t")?;
        let (n, k2) = other.check_2d("matmul_t")?;
        if k != k2 {
            return Err(QueptError::Dimension {
                op: "matmul_t",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.check_2d("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Rows `[start, end)` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return arg_err(format!("row slice {start}..{end} of {:?}", self.shape));
        }
        let c = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::new(shape, self.data[start * c..end * c].to_vec())
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.check_2d("slice_cols")?;
        if start >= end || end > n {
            return arg_err(format!("column slice {start}..{end} of {:?}", self.shape));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Self::new(vec![m, w], out)
    }
}

/// out += a[m×k] · b[k×n]
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += a[k×m]ᵀ · b[k×n]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Per-row cosine similarity of two `[t×d]` tensors. Zero-norm rows score 0.
pub fn cosine_sim_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<T>> {
    a.same_shape(b, "cosine_sim_rows")?;
    let t = a.rows();
    let out = (0..t)
        .map(|i| {
            let (ra, rb) = (a.row(i), b.row(i));
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na: T = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb: T = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
            if na == T::zero() || nb == T::zero() {
                T::zero()
            } else {
                (dot / (na * nb)).max(-T::one()).min(T::one())
            }
        })
        .collect();
    Ok(out)
}

/// Mean absolute difference.
pub fn mae<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.same_shape(b, "mae")?;
    let s: T = a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(s / T::lit(a.numel() as f64))
}

/// Mean squared difference.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.same_shape(b, "mse")?;
    let s: T = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(s / T::lit(a.numel() as f64))
}

/// Two-sample Kolmogorov-Smirnov statistic: sup |F_a(x) − F_b(x)|.
pub fn ks_statistic<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return arg_err("ks_statistic needs non-empty samples");
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return arg_err("ks_statistic input contains NaN");
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    let cmp = |p: &T, q: &T| p.partial_cmp(q).expect("no NaN");
    xs.sort_by(cmp);
    ys.sort_by(cmp);
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < xs.len() && j < ys.len() {
        let v = if xs[i] <= ys[j] { xs[i] } else { ys[j] };
        while i < xs.len() && xs[i] == v {
            i += 1;
        }
        while j < ys.len() && ys[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(T::lit(d))
}

/// Linear-interpolated quantile of `values` at fraction `q ∈ [0, 1]`.
pub fn quantile<T: Scalar>(values: &mut [T], q: f64) -> T {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    values[lo] + (values[hi] - values[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t2(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let p = t2(&[&[1., 0.], &[0., 0.]]).matmul(&t2(&[&[5., 6.], &[7., 8.]])).unwrap();
        assert_eq!(p, t2(&[&[5., 6.], &[0., 0.]]));
        let ones_r = Tensor::<f32>::full(&[1, 3], 1.0);
        let ones_c = Tensor::<f32>::full(&[3, 1], 1.0);
        assert_eq!(ones_r.matmul(&ones_c).unwrap().data(), &[3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_t_agrees_with_transpose() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let via_t = a.matmul(&b.transpose().unwrap()).unwrap();
        let direct = a.matmul_t(&b).unwrap();
        for (x, y) in via_t.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    use rand::SeedableRng;

    #[test]
    fn cosine_examples() {
        let a = t2(&[&[1., 2.], &[0., 3.]]);
        assert!(cosine_sim_rows(&a, &a).unwrap().iter().all(|&c| (c - 1.0).abs() < 1e-6));
        let s = cosine_sim_rows(&t2(&[&[1., 0.]]), &t2(&[&[0., 1.]])).unwrap();
        assert_eq!(s[0], 0.0);
        let s = cosine_sim_rows(&t2(&[&[1., 1.]]), &t2(&[&[1., 0.]])).unwrap();
        assert!((s[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-4);
        let s = cosine_sim_rows(&t2(&[&[0., 0.]]), &t2(&[&[1., 0.]])).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(cosine_sim_rows(&t2(&[&[0., 0.]]), &t2(&[&[1., 0., 0.]])).is_err());
    }

    #[test]
    fn mae_examples() {
        let a = t2(&[&[1., 2.]]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &t2(&[&[2., 4.]])).unwrap(), 1.5);
        assert_eq!(mae(&t2(&[&[-1.]]), &t2(&[&[1.]])).unwrap(), 2.0);
        assert!(mae(&a, &t2(&[&[1.]])).is_err());
    }

    #[test]
    fn ks_examples() {
        let a = [0.3f32, -1.0, 2.0];
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0f32, 0., 0.], &[1., 1., 1.]).unwrap(), 1.0);
        assert_eq!(ks_statistic(&[0f32, 1.], &[0., 2.]).unwrap(), 0.5);
        assert!(ks_statistic::<f32>(&[], &[1.0]).is_err());
    }

    #[test]
    fn quantile_endpoints() {
        let mut v = vec![3.0f32, 1.0, 2.0, 7.0];
        assert_eq!(quantile(&mut v, 1.0), 7.0);
        assert_eq!(quantile(&mut v, 0.0), 1.0);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }
}
