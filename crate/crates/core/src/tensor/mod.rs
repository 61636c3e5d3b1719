//! Dense row-major tensors and the pure (non-recorded) operations on them.
//!
//! Values are IEEE-754 floats at a precision chosen by the caller via the
//! [`Scalar`] parameter. Every public operation validates shapes and leaves
//! only finite values behind; NaN/Inf is an error state, not a value.

mod svd;
mod tape;

pub use svd::{truncated_svd, SvdResult};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major float tensor with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n], requires_grad: false }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        let t = Tensor { shape: shape.to_vec(), data, requires_grad: false };
        t.ensure_finite("from_vec")?;
        Ok(t)
    }

    /// Build a 2-D tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {n_cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(&[n_rows, n_cols], data)
    }

    /// Internal constructor for op outputs whose shape is known consistent.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Usage(format!("expected scalar, got shape {:?}", self.shape)))
        }
    }

    /// Row/column extents of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!("expected 2-D tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        let c = self.cols();
        self.data[row * c + col] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for &x in &self.data {
            if !x.is_finite() {
                return Err(Error::Numerical(format!("non-finite value produced by {context}")));
            }
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::new_unchecked(vec![c, r], out))
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Tensor<T> {
        Tensor::new_unchecked(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Cast elementwise through f64 into another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::<U>::new_unchecked(
            self.shape.clone(),
            self.data.iter().map(|&x| U::from_f64(x.to_f64_val())).collect(),
        )
    }
}

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    // ikj order keeps the inner loop contiguous on both b and out.
    for i in 0..m {
        for k in 0..ka {
            let aik = a.data[i * ka + k];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    let t = Tensor::new_unchecked(vec![m, n], out);
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// `a[m×k] · b[n×k]ᵀ`, the row-by-row dot-product form.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul_nt inner extents differ: {:?} × {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data[i * ka..(i + 1) * ka];
        for j in 0..n {
            let b_row = &b.data[j * kb..(j + 1) * kb];
            let mut s = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            out[i * n + j] = s;
        }
    }
    let t = Tensor::new_unchecked(vec![m, n], out);
    t.ensure_finite("matmul_nt")?;
    Ok(t)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(a, b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(a, b, "sub", |x, y| x - y)
}

pub fn mul_elem<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(a, b, "mul_elem", |x, y| x * y)
}

fn elementwise<T: Scalar, F: Fn(T, T) -> T>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    name: &str,
    f: F,
) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "{name} shapes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    let t = Tensor::new_unchecked(a.shape.clone(), data);
    t.ensure_finite(name)?;
    Ok(t)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
    let t = a.map(|x| x * factor);
    t.ensure_finite("scale")?;
    Ok(t)
}

/// Root-mean-square normalization of each row, scaled elementwise by `gamma`.
///
/// `y_i = x_i * gamma_i / sqrt(mean(x²) + eps)` per row of the trailing extent.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::Parameter("rms_norm eps must be positive".into()));
    }
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("rms_norm on empty shape".into()))?;
    if gamma.numel() != d {
        return Err(Error::Dimension(format!(
            "rms_norm gamma has {} entries, rows have {d}",
            gamma.numel()
        )));
    }
    let n_rows = x.numel() / d;
    let mut out = vec![T::zero(); x.numel()];
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for r in 0..n_rows {
        let row = &x.data[r * d..(r + 1) * d];
        let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
        let inv_rms = T::one() / (ms + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = row[j] * inv_rms * gamma.data[j];
        }
    }
    let t = Tensor::new_unchecked(x.shape.clone(), out);
    t.ensure_finite("rms_norm")?;
    Ok(t)
}

/// Row-wise softmax with max-subtraction stabilization.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[i * c + j] = out[i * c + j] / z;
        }
    }
    let t = Tensor::new_unchecked(vec![r, c], out);
    t.ensure_finite("softmax_rows")?;
    Ok(t)
}

/// Rows of `src` selected by `ids` (token-embedding lookup).
pub fn gather_rows<T: Scalar>(src: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, c) = src.dims2()?;
    let mut data = Vec::with_capacity(ids.len() * c);
    for &id in ids {
        if id >= v {
            return Err(Error::data(format!("row id {id} out of range for {v} rows")));
        }
        data.extend_from_slice(&src.data[id * c..(id + 1) * c]);
    }
    Ok(Tensor::new_unchecked(vec![ids.len(), c], data))
}

pub fn slice_cols<T: Scalar>(src: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = src.dims2()?;
    if start + len > c {
        return Err(Error::Dimension(format!(
            "column slice {start}..{} out of range for {c} columns",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(r * len);
    for i in 0..r {
        data.extend_from_slice(&src.data[i * c + start..i * c + start + len]);
    }
    Ok(Tensor::new_unchecked(vec![r, len], data))
}

pub fn slice_rows<T: Scalar>(src: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = src.dims2()?;
    if start + len > r {
        return Err(Error::Dimension(format!(
            "row slice {start}..{} out of range for {r} rows",
            start + len
        )));
    }
    Ok(Tensor::new_unchecked(
        vec![len, c],
        src.data[start * c..(start + len) * c].to_vec(),
    ))
}

/// Dot product, norms, and cosine of two equal-length vectors.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine over lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Numerical("cosine of a zero-norm vector".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// L2-normalize each row in place; zero rows are a numerical error.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = x.data.clone();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(Error::Numerical(format!("zero-norm vector at row {i}")));
        }
        for v in row.iter_mut() {
            *v = *v / norm;
        }
    }
    Ok(Tensor::new_unchecked(vec![r, c], out))
}

/// Central-difference gradient of a scalar function, the independent oracle
/// against which recorded gradients are checked.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if h <= T::zero() {
        return Err(Error::Parameter("finite_diff_grad step must be positive".into()));
    }
    let mut grad = vec![T::zero(); x.numel()];
    let mut probe = x.clone();
    let two_h = h + h;
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let f_plus = f(&probe)?;
        probe.data[i] = orig - h;
        let f_minus = f(&probe)?;
        probe.data[i] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::Numerical("non-finite function value in finite_diff_grad".into()));
        }
        grad[i] = (f_plus - f_minus) / two_h;
    }
    Ok(Tensor::new_unchecked(x.shape.clone(), grad))
}

/// Largest guarded relative discrepancy between two same-shape tensors:
/// `|a - b| / max(1, |a|, |b|)` maximized over entries. The unit floor keeps
/// the comparison meaningful where the true value is near zero and the
/// central-difference oracle is noise-limited.
pub fn max_rel_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "comparing shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let x = x.to_f64_val();
        let y = y.to_f64_val();
        let denom = x.abs().max(y.abs()).max(1.0);
        worst = worst.max((x - y).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let out = matmul(&eye, &m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_dot_product_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data()[0], 11.0);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, &[4, 3]);
        let b = random_tensor(&mut rng, &[3, 2]);
        let fast = matmul(&a, &b).unwrap();
        // Independent ijk reference.
        let mut naive = Tensor::<f64>::zeros(&[4, 2]);
        for i in 0..4 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.at(i, k) * b.at(k, j);
                }
                naive.set(i, j, s);
            }
        }
        assert!(fast.max_abs_diff(&naive) <= 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(crate::error::Error::Dimension(_))));
    }

    #[test]
    fn rms_norm_constant_vector_becomes_ones() {
        let x = Tensor::from_rows(&[vec![2.0, 2.0, 2.0, 2.0]]).unwrap();
        let gamma = Tensor::filled(&[4], 1.0);
        let y = rms_norm(&x, &gamma, 1e-15).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn rms_norm_zero_vector_guarded_by_eps() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let gamma = Tensor::filled(&[2], 1.0);
        let y = rms_norm(&x, &gamma, 1e-6).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn rms_norm_hand_case() {
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let y = rms_norm(&x, &gamma, 1e-15).unwrap();
        let rms = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / rms).abs() < 1e-10);
        assert!((y.data()[1] - 8.0 / rms).abs() < 1e-10);
    }

    #[test]
    fn rms_norm_gamma_mismatch_is_dimension_error() {
        let x = Tensor::<f64>::zeros(&[1, 4]);
        let gamma = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(
            rms_norm(&x, &gamma, 1e-6),
            Err(crate::error::Error::Dimension(_))
        ));
    }

    #[test]
    fn finite_diff_quadratic() {
        let x = Tensor::scalar(3.0f64);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| Ok(4.25f64), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        let a = Tensor::from_vec(&[1], vec![1e308]).unwrap();
        assert!(matches!(
            scale(&a, 1e10),
            Err(crate::error::Error::Numerical(_))
        ));
    }

    #[test]
    fn cosine_zero_norm_is_numerical_error() {
        assert!(matches!(
            cosine(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(crate::error::Error::Numerical(_))
        ));
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, &[5, 3]);
        let back = a.transpose().unwrap().transpose().unwrap();
        assert_eq!(a, back);
    }
}
