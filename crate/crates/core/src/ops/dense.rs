use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine map over the last axis: `y = x W^T + b` with `W: [Dout, Din]`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (rows, din, dout) = linear_dims(input, weight)?;
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} for output width {dout}", b.shape()),
            ));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        let xr = &x[r * din..][..din];
        for o in 0..dout {
            let wr = &w[o * din..][..din];
            let mut acc = bias.map_or(T::zero(), |b| b.data()[o]);
            for (&a, &b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            out.push(acc);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Ok(Tensor::from_parts(shape, out))
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let din = *input.shape().last().unwrap();
    match weight.shape() {
        &[dout, wdin] if wdin == din => Ok((input.numel() / din, din, dout)),
        other => Err(Error::shape(
            "linear",
            format!("input width {din} against weight {other:?}"),
        )),
    }
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (rows, din, dout) = linear_dims(input, weight)?;
    let x = input.data();
    let w = weight.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); rows * din];
    let mut gw = vec![T::zero(); dout * din];
    let mut gb = vec![T::zero(); dout];
    for r in 0..rows {
        let xr = &x[r * din..][..din];
        let gxr = &mut gx[r * din..][..din];
        for o in 0..dout {
            let g = gy[r * dout + o];
            gb[o] += g;
            let wr = &w[o * din..][..din];
            let gwr = &mut gw[o * din..][..din];
            for i in 0..din {
                gxr[i] += g * wr[i];
                gwr[i] += g * xr[i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gx),
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![dout], gb),
    })
}

/// Batched product of `[Bt,M,K]` with `[Bt,K,N]`, or with `[Bt,N,K]` when
/// `transpose_rhs` is set.
pub fn matmul<T: Scalar>(lhs: &Tensor<T>, rhs: &Tensor<T>, transpose_rhs: bool) -> Result<Tensor<T>> {
    let (bt, m, k, n) = matmul_dims(lhs, rhs, transpose_rhs)?;
    let a = lhs.data();
    let b = rhs.data();
    let mut out = vec![T::zero(); bt * m * n];
    for t in 0..bt {
        let ab = &a[t * m * k..][..m * k];
        let bb = &b[t * k * n..][..k * n];
        let ob = &mut out[t * m * n..][..m * n];
        for i in 0..m {
            let ar = &ab[i * k..][..k];
            let orow = &mut ob[i * n..][..n];
            if transpose_rhs {
                for (j, o) in orow.iter_mut().enumerate() {
                    let br = &bb[j * k..][..k];
                    let mut acc = T::zero();
                    for (&x, &y) in ar.iter().zip(br) {
                        acc += x * y;
                    }
                    *o = acc;
                }
            } else {
                for (p, &av) in ar.iter().enumerate() {
                    let br = &bb[p * n..][..n];
                    for (o, &bv) in orow.iter_mut().zip(br) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![bt, m, n], out))
}

fn matmul_dims<T: Scalar>(
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
    transpose_rhs: bool,
) -> Result<(usize, usize, usize, usize)> {
    let (&[bt, m, k], &[bt2, r1, r2]) = (lhs.shape(), rhs.shape()) else {
        return Err(Error::shape(
            "matmul",
            format!("expected rank-3 operands, got {:?} and {:?}", lhs.shape(), rhs.shape()),
        ));
    };
    let (rk, n) = if transpose_rhs { (r2, r1) } else { (r1, r2) };
    if bt != bt2 || rk != k {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?} (transpose_rhs={transpose_rhs})", lhs.shape(), rhs.shape()),
        ));
    }
    Ok((bt, m, k, n))
}

/// Gradients of [`matmul`] with respect to both operands.
pub fn matmul_backward<T: Scalar>(
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
    grad_out: &Tensor<T>,
    transpose_rhs: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bt, m, k, n) = matmul_dims(lhs, rhs, transpose_rhs)?;
    let a = lhs.data();
    let b = rhs.data();
    let g = grad_out.data();
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    for t in 0..bt {
        let ab = &a[t * m * k..][..m * k];
        let bb = &b[t * k * n..][..k * n];
        let gbt = &g[t * m * n..][..m * n];
        let gab = &mut ga[t * m * k..][..m * k];
        let gbb = &mut gb[t * k * n..][..k * n];
        for i in 0..m {
            for j in 0..n {
                let gv = gbt[i * n + j];
                for p in 0..k {
                    let (bidx, bval) = if transpose_rhs {
                        (j * k + p, bb[j * k + p])
                    } else {
                        (p * n + j, bb[p * n + j])
                    };
                    gab[i * k + p] += gv * bval;
                    gbb[bidx] += gv * ab[i * k + p];
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(lhs.shape().to_vec(), ga),
        Tensor::from_parts(rhs.shape().to_vec(), gb),
    ))
}

/// Numerically stable softmax over the last axis (max-subtracted).
pub fn softmax_lastaxis<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let n = *input.shape().last().unwrap();
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(input.shape().to_vec(), out)
}

pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let n = *output.shape().last().unwrap();
    let mut gx = vec![T::zero(); output.numel()];
    for ((y, g), gx) in output
        .data()
        .chunks(n)
        .zip(grad_out.data().chunks(n))
        .zip(gx.chunks_mut(n))
    {
        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for i in 0..n {
            gx[i] = y[i] * (g[i] - dot);
        }
    }
    Tensor::from_parts(output.shape().to_vec(), gx)
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(input: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = input.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(
            "permute",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let in_shape = input.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let x = input.data();
    let mut out = Vec::with_capacity(input.numel());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..input.numel() {
        out.push(x[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_zero_bias() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &w, Some(&Tensor::zeros(&[3]))).unwrap(), x);
    }

    #[test]
    fn zero_weight_gives_bias_rows() {
        let x = Tensor::<f32>::from_fn(&[4, 2], |i| i as f32);
        let w = Tensor::zeros(&[3, 2]);
        let b = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn inner_dimension_mismatch() {
        let x = Tensor::<f32>::zeros(&[4, 7]);
        assert!(linear(&x, &Tensor::zeros(&[5, 6]), None).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let x = Tensor::<f32>::full(&[1, 4], 3.0);
        assert_eq!(softmax_lastaxis(&x).data(), &[0.25; 4]);
        let big = Tensor::<f32>::new(vec![1, 2], vec![1e4, 0.0]).unwrap();
        let y = softmax_lastaxis(&big);
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-7 && y.data()[1].abs() < 1e-7);
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
        let back = permute(&y, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn matmul_transposed_agrees() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).cos());
        let b = Tensor::<f64>::from_fn(&[2, 4, 5], |i| (i as f64 * 0.11).sin());
        let bt = permute(&b, &[0, 2, 1]).unwrap();
        let y1 = matmul(&a, &b, false).unwrap();
        let y2 = matmul(&a, &bt, true).unwrap();
        assert!(y1.max_abs_diff(&y2) < 1e-12);
    }
}
