use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride and zero padding shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dArgs {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dArgs {
    pub const SAME3: Self = Self {
        stride: 1,
        padding: 1,
    };
    pub const POINTWISE: Self = Self {
        stride: 1,
        padding: 0,
    };
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    args: Conv2dArgs,
) -> Result<Geometry> {
    let [batch, cin, h, w] = input.dims4("conv2d")?;
    let [cout, wcin, kh, kw] = weight.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} is not odd")));
    }
    if args.stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {cout} output channels", b.shape()),
            ));
        }
    }
    let span_h = (h + 2 * args.padding) as isize - kh as isize;
    let span_w = (w + 2 * args.padding) as isize - kw as isize;
    if span_h < 0 || span_w < 0 {
        return Err(Error::shape(
            "conv2d",
            format!("non-positive output extent for {h}x{w} input, {kh}x{kw} kernel"),
        ));
    }
    Ok(Geometry {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho: span_h as usize / args.stride + 1,
        wo: span_w as usize / args.stride + 1,
        stride: args.stride,
        pad: args.padding,
    })
}

/// Output indices `o` in `0..out` with `o*stride + k - pad` inside `0..len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    // o*stride >= pad - k
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // o*stride <= len - 1 + pad - k
    let top = len - 1 + pad;
    let hi = if top < k {
        0
    } else {
        ((top - k) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

/// Cross-correlation of a `[B,Cin,H,W]` input with a `[Cout,Cin,kh,kw]` kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    args: Conv2dArgs,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, bias, args)?;
    let x = input.data();
    let wt = weight.data();
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * g.cout * plane_out];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let y = &mut out[(b * g.cout + co) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                y.fill(bias.data()[co]);
            }
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                        let wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &xin[iy * g.w..][..g.w];
                            let yrow = &mut y[oy * g.wo..][..g.wo];
                            if g.stride == 1 {
                                let src = &row[ox0 + kx - g.pad..ox1 + kx - g.pad];
                                for (yv, &xv) in yrow[ox0..ox1].iter_mut().zip(src) {
                                    *yv += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    yrow[ox] += wv * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.cout, g.ho, g.wo], out))
}

pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Adjoint of [`conv2d`]. The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    args: Conv2dArgs,
    need_input: bool,
) -> Result<Conv2dGrads<T>> {
    let g = geometry(input, weight, None, args)?;
    if grad_out.shape() != [g.batch, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {:?}", grad_out.shape()),
        ));
    }
    let x = input.data();
    let wt = weight.data();
    let gy = grad_out.data();
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gx = if need_input {
        vec![T::zero(); input.numel()]
    } else {
        Vec::new()
    };
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let gyp = &gy[(b * g.cout + co) * plane_out..][..plane_out];
            gb[co] += gyp.iter().copied().sum::<T>();
            for ci in 0..g.cin {
                let base_in = (b * g.cin + ci) * plane_in;
                let xin = &x[base_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                        let widx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let wv = wt[widx];
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gyp[oy * g.wo..][..g.wo];
                            let xrow = &xin[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let (lo, hi) = (ox0 + kx - g.pad, ox1 + kx - g.pad);
                                let gsrc = &grow[ox0..ox1];
                                acc += gsrc.iter().zip(&xrow[lo..hi]).map(|(&a, &b)| a * b).sum::<T>();
                                if need_input {
                                    let gxrow = &mut gx[base_in + iy * g.w..][lo..hi];
                                    for (gxv, &gv) in gxrow.iter_mut().zip(gsrc) {
                                        *gxv += wv * gv;
                                    }
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * g.stride + kx - g.pad];
                                }
                                if need_input {
                                    let gxrow = &mut gx[base_in + iy * g.w..][..g.w];
                                    for ox in ox0..ox1 {
                                        gxrow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: need_input.then(|| Tensor::from_parts(input.shape().to_vec(), gx)),
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![g.cout], gb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, Conv2dArgs::SAME3).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::from_fn(&[2, 1, 5, 4], |i| (i as f64).sin());
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, None, Conv2dArgs::SAME3).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_output_extent() {
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        let w = Tensor::<f32>::zeros(&[8, 3, 3, 3]);
        let y = conv2d(
            &x,
            &w,
            None,
            Conv2dArgs {
                stride: 2,
                padding: 1,
            },
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 8, 16, 16]);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dArgs::SAME3),
            Err(Error::Shape { .. })
        ));
        let w = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        let tiny = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&tiny, &w, None, Conv2dArgs::POINTWISE).is_err());
        let even = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &even, None, Conv2dArgs::POINTWISE).is_err());
    }
}
