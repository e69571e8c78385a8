//! The differentiable kernels the decoder is built from, each with a
//! hand-written backward pass.
//!
//! Backward functions take the upstream gradient `dy` of the kernel output and
//! return (or accumulate) gradients with respect to the kernel inputs.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{QksError, Result};

fn check_matrix<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(QksError::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    Ok(())
}

/// `a[n×k] · b[k×p]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix(a, "matmul")?;
    check_matrix(b, "matmul")?;
    let (n, k) = (a.rows(), a.cols());
    let p = b.cols();
    if b.rows() != k {
        return Err(QksError::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, p]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..n {
        let orow = &mut od[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = ad[i * k + kk];
            let brow = &bd[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a[n×k] · b[p×k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix(a, "matmul_nt")?;
    check_matrix(b, "matmul_nt")?;
    let (n, k) = (a.rows(), a.cols());
    let p = b.rows();
    if b.cols() != k {
        return Err(QksError::Shape {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, p]);
    let od = out.data_mut();
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..p {
            od[i * p + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// `a[k×n]ᵀ · b[k×p]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix(a, "matmul_tn")?;
    check_matrix(b, "matmul_tn")?;
    let (k, n) = (a.rows(), a.cols());
    let p = b.cols();
    if b.rows() != k {
        return Err(QksError::Shape {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, p]);
    let od = out.data_mut();
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut od[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    Ok(out)
}

/// Sequential inner product.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Backward of `c = a·b`: returns `(da, db)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

/// `x[n×d] + bias[d]` broadcast over rows.
pub fn add_row<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if bias.len() != x.cols() {
        return Err(QksError::Shape {
            op: "add_row",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    let d = x.cols();
    for row in out.data_mut().chunks_mut(d) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Affine map `x·w + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    add_row(&matmul(x, w)?, b)
}

/// Column sums of a matrix; the bias gradient of [`add_row`].
pub fn col_sums<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.cols();
    let mut out = Tensor::zeros(&[d]);
    for row in x.data().chunks(d) {
        for (o, &v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix(x, "softmax_rows")?;
    if !x.all_finite() {
        return Err(QksError::NonFinite("softmax_rows input".into()));
    }
    let mut out = x.clone();
    let k = x.cols();
    for row in out.data_mut().chunks_mut(k) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Backward of softmax given its output `y`: `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    y.check_same(dy, "softmax_rows_backward")?;
    let k = y.cols();
    let mut dx = Tensor::zeros(y.shape());
    for ((dxr, yr), dyr) in dx
        .data_mut()
        .chunks_mut(k)
        .zip(y.data().chunks(k))
        .zip(dy.data().chunks(k))
    {
        softmax_backward_row(yr, dyr, dxr);
    }
    Ok(dx)
}

pub(crate) fn softmax_backward_row<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let inner = dot(y, dy);
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d = yv * (g - inner);
    }
}

/// Saved statistics of a layernorm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    /// Normalized input before the affine map.
    pub xhat: Tensor<T>,
    /// `1/sqrt(var + eps)` per row.
    pub inv_std: Vec<T>,
}

/// Per-row zero-mean unit-variance normalization, then `gain ⊙ x̂ + bias`.
/// Variance is the biased (population) estimate.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    check_matrix(x, "layernorm")?;
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(QksError::Shape {
            op: "layernorm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let n = x.rows();
    let dt = T::from_usize(d).unwrap();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
        let var_eps = var + eps;
        // A constant row with eps = 0 has no defined scale; map it to zero.
        let is = if var_eps > T::zero() {
            T::one() / var_eps.sqrt()
        } else {
            T::zero()
        };
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let o = &mut out.data_mut()[i * d..(i + 1) * d];
        for c in 0..d {
            o[c] = gain.data()[c] * xhat.data()[i * d + c] + bias.data()[c];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Backward of [`layernorm`]: returns `dx` and accumulates into `dgain`, `dbias`.
pub fn layernorm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    dy: &Tensor<T>,
    dgain: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
) -> Tensor<T> {
    let d = dy.cols();
    let dt = T::from_usize(d).unwrap();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dxhat = vec![T::zero(); d];
    for i in 0..dy.rows() {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for c in 0..d {
            dgain.data_mut()[c] += dyr[c] * xh[c];
            dbias.data_mut()[c] += dyr[c];
            dxhat[c] = dyr[c] * gain.data()[c];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() / dt;
        let mean_dxhat_xhat = dot(&dxhat, xh) / dt;
        let is = cache.inv_std[i];
        let dxr = dx.row_mut(i);
        for c in 0..d {
            dxr[c] = is * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Gaussian error linear unit, erf form: `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

/// `d gelu / dx = Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    cdf + x * pdf
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_same(dy, "gelu_backward")?;
    Ok(Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| g * gelu_grad_scalar(v))
            .collect(),
    )
    .expect("same shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    /// Triple-loop reference product.
    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (n, k, p) = (a.rows(), a.cols(), b.cols());
        Tensor::from_fn(&[n, p], |idx| {
            let (i, j) = (idx / p, idx % p);
            (0..k).map(|kk| a.get2(i, kk) * b.get2(kk, j)).sum()
        })
    }

    #[test]
    fn matmul_examples() {
        let x = t(&[vec![1.5, -2.0, 0.25], vec![3.0, 4.0, -1.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);

        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = t(&[vec![5.0], vec![6.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, naive(&a, &b));
        assert_eq!(c.data(), &[17.0, 39.0]);

        let m = Tensor::<f64>::zeros(&[2, 3]);
        let err = matmul(&m, &m).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[5, 4], |i| (i as f64 * 0.11).cos());
        let c = Tensor::<f64>::from_fn(&[3, 5], |i| i as f64 - 2.0);
        assert_eq!(matmul_nt(&a, &b).unwrap(), naive(&a, &b.transpose()));
        assert_eq!(matmul_tn(&a, &c).unwrap(), naive(&a.transpose(), &c));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t(&[vec![2.0; 4]])).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let y = softmax_rows(&t(&[vec![0.0, 3f64.ln()]])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);

        let y = softmax_rows(&t(&[vec![1000.0, 0.0]])).unwrap();
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax_rows(&t(&[vec![f64::NAN, 0.0]])).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let (y, _) = layernorm(&t(&[vec![4.0; 3]]), &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let (y, _) = layernorm(
            &t(&[vec![1.0, 3.0]]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            0.0,
        )
        .unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let bias = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let (y, _) = layernorm(&t(&[vec![1.0, 7.0, -2.0]]), &zeros, &bias, 1e-5).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // x·Φ(x) at x = 1: Φ(1) = 0.8413447460685429
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu_scalar(-1.0f64) + 0.158_655_253_931_457_05).abs() < 1e-15);
    }
}
