//! Factor-of-two bilinear resampling on `[B,C,H,W]` grids.
//!
//! Sample centres follow the half-pixel convention. Upsampling extends the
//! outermost interpolation segment linearly past the border, so any field that
//! is affine in `(y, x)` is reproduced exactly; downsampling by two is the 2×2
//! mean, which is bilinear sampling at the centre of each 2×2 block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizeFactor {
    Up2,
    Down2,
}

pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, factor: ResizeFactor) -> Result<Tensor<T>> {
    match factor {
        ResizeFactor::Up2 => upsample2(input),
        ResizeFactor::Down2 => avgpool2(input),
    }
}

/// `(i0, w0, i1, w1)` taps for each of the `2n` upsampled positions.
fn up_taps(n: usize) -> Vec<(usize, f64, usize, f64)> {
    (0..2 * n)
        .map(|j| {
            if n == 1 {
                return (0, 1.0, 0, 0.0);
            }
            let src = j as f64 / 2.0 - 0.25;
            let i0 = (src.floor().max(0.0) as usize).min(n - 2);
            let t = src - i0 as f64;
            (i0, 1.0 - t, i0 + 1, t)
        })
        .collect()
}

pub fn upsample2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = input.dims4("upsample2")?;
    let ty = up_taps(h);
    let tx = up_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![T::zero(); b * c * ho * wo];
    let mut rows = vec![T::zero(); wo * h];
    for p in 0..b * c {
        let src = &x[p * h * w..][..h * w];
        // horizontal pass into `rows[h][wo]`
        for i in 0..h {
            for (j, &(x0, w0, x1, w1)) in tx.iter().enumerate() {
                rows[i * wo + j] = T::lit(w0) * src[i * w + x0] + T::lit(w1) * src[i * w + x1];
            }
        }
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for (oy, &(y0, w0, y1, w1)) in ty.iter().enumerate() {
            for j in 0..wo {
                dst[oy * wo + j] = T::lit(w0) * rows[y0 * wo + j] + T::lit(w1) * rows[y1 * wo + j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

/// Adjoint of [`upsample2`]; `grad_out` has the upsampled shape.
pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, ho, wo] = grad_out.dims4("upsample2_backward")?;
    let (h, w) = (ho / 2, wo / 2);
    let ty = up_taps(h);
    let tx = up_taps(w);
    let g = grad_out.data();
    let mut out = vec![T::zero(); b * c * h * w];
    let mut rows = vec![T::zero(); h * wo];
    for p in 0..b * c {
        let gp = &g[p * ho * wo..][..ho * wo];
        rows.fill(T::zero());
        for (oy, &(y0, w0, y1, w1)) in ty.iter().enumerate() {
            for j in 0..wo {
                let v = gp[oy * wo + j];
                rows[y0 * wo + j] += T::lit(w0) * v;
                rows[y1 * wo + j] += T::lit(w1) * v;
            }
        }
        let dst = &mut out[p * h * w..][..h * w];
        for i in 0..h {
            for (j, &(x0, w0, x1, w1)) in tx.iter().enumerate() {
                let v = rows[i * wo + j];
                dst[i * w + x0] += T::lit(w0) * v;
                dst[i * w + x1] += T::lit(w1) * v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, h, w], out))
}

pub fn avgpool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = input.dims4("avgpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "avgpool2",
            format!("extents {h}x{w} must be even to halve"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for p in 0..b * c {
        let src = &x[p * h * w..][..h * w];
        for i in 0..ho {
            for j in 0..wo {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                out.push((src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

pub fn avgpool2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, ho, wo] = grad_out.dims4("avgpool2_backward")?;
    let (h, w) = (2 * ho, 2 * wo);
    let quarter = T::lit(0.25);
    let g = grad_out.data();
    let mut out = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        for i in 0..h {
            for j in 0..w {
                out[p * h * w + i * w + j] = g[p * ho * wo + (i / 2) * wo + j / 2] * quarter;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_survive_upsampling() {
        let x = Tensor::<f32>::full(&[1, 2, 3, 5], 7.0);
        let y = resize_bilinear(&x, ResizeFactor::Up2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 10]);
        assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-6));
    }

    #[test]
    fn two_by_two_mean() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = resize_bilinear(&x, ResizeFactor::Down2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.0);
    }

    #[test]
    fn odd_extent_downscale_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(avgpool2(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn ramp_round_trip() {
        let (h, w) = (6, 8);
        let x = Tensor::<f64>::from_fn(&[1, 1, h, w], |i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            0.3 * r - 1.7 * c + 0.25 * r * c + 2.0
        });
        let back = avgpool2(&upsample2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn single_pixel_upsample_replicates() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 3.5);
        let y = upsample2(&x).unwrap();
        assert_eq!(y.data(), &[3.5; 4]);
    }
}
