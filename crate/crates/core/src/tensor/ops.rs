//! Forward kernels shared by the tape and by non-differentiable callers.

use super::Tensor;
use crate::attention::AttentionMask;
use crate::error::{MooseError, Result};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c[m×n] += a[m×k] · b[k×n]`, i-k-j order so the inner loop runs over
/// contiguous output columns.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&a_it, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_it * b_tj;
            }
        }
    }
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(MooseError::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    Ok(Tensor::from_parts(
        vec![c, r],
        transpose_raw(a.data(), r, c),
    ))
}

/// Softmax over the last axis. Masked entries are skipped entirely and come
/// out as exact zeros; the mask's rows are cycled over the leading axes.
pub fn softmax_lastdim(x: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
    let k = *x
        .shape()
        .last()
        .ok_or_else(|| MooseError::invalid("softmax of a scalar"))?;
    if let Some(m) = mask {
        let q = if x.ndim() >= 2 {
            x.shape()[x.ndim() - 2]
        } else {
            1
        };
        if m.cols() != k || m.rows() != q {
            return Err(MooseError::shape(
                "softmax mask",
                x.shape(),
                &[m.rows(), m.cols()],
            ));
        }
    }
    let mut out = vec![0.0; x.numel()];
    for (r, (row, out_row)) in x
        .data()
        .chunks_exact(k)
        .zip(out.chunks_exact_mut(k))
        .enumerate()
    {
        let allowed = mask.map(|m| m.row(r % m.rows()));
        let is_allowed = |j: usize| allowed.is_none_or(|a| a[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if is_allowed(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(MooseError::FullyMaskedRow { row: r });
        }
        let mut sum = 0.0;
        for (j, (&v, o)) in row.iter().zip(out_row.iter_mut()).enumerate() {
            if is_allowed(j) {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        let inv = 1.0 / sum;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) struct LayerNormParts {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<LayerNormParts> {
    let d = *x.shape().last().unwrap_or(&0);
    if d < 2 {
        return Err(MooseError::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "layer norm needs a feature axis of at least 2".into(),
        });
    }
    if gamma.numel() != d || beta.numel() != d {
        return Err(MooseError::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok(LayerNormParts { out, xhat, inv_std })
}

/// Layer normalisation over the last axis with a learned affine map.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let parts = layer_norm_parts(x, gamma, beta)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), parts.out))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&[3, 4], &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for t in 0..5 {
                    s += a.at2(i, t) * b.at2(t, j);
                }
                assert!((c.at2(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::new(&[1, 3], vec![0.0; 3]).unwrap();
        let s = softmax_lastdim(&x, None).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let s = softmax_lastdim(&x, None).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);

        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = AttentionMask::from_fn(1, 3, |_, j| j == 2).unwrap();
        let s = softmax_lastdim(&x, Some(&m)).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let m = AttentionMask::from_raw(2, 2, vec![true, false, false, false]);
        let err = softmax_lastdim(&Tensor::zeros(&[2, 2]), Some(&m)).unwrap_err();
        assert!(matches!(err, MooseError::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let x = Tensor::new(&[1, 4], vec![2.5; 4]).unwrap();
        assert_eq!(layer_norm(&x, &ones, &zeros).unwrap().data(), &[0.0; 4]);

        let b = Tensor::new(&[4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 4], &mut rng);
        let y = layer_norm(&x, &zeros, &b).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), b.data());
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 32;
        let x = Tensor::from_fn(&[1, d], |_| rng.random_range(-10.0..10.0));
        let y = layer_norm(&x, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d])).unwrap();
        let mean = y.data().iter().sum::<f64>() / d as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        // Direct moments of the input give the variance the epsilon shrinks.
        let xm = x.data().iter().sum::<f64>() / d as f64;
        let xv = x.data().iter().map(|v| (v - xm).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - xv / (xv + LAYER_NORM_EPS)).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
