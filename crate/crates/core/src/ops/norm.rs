use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standardises each `[H,W]` plane of a `[B,C,H,W]` tensor to zero mean and
/// unit (biased) variance: `(x - mean) / sqrt(var + eps)`.
pub fn standardize<T: Scalar>(input: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let [_, _, h, w] = input.dims4("standardize")?;
    let n = h * w;
    let inv_n = T::lit(1.0 / n as f64);
    let eps = T::lit(eps);
    let mut out = Vec::with_capacity(input.numel());
    for plane in input.data().chunks(n) {
        let mean = plane.iter().copied().sum::<T>() * inv_n;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv_std = (var + eps).sqrt().recip();
        out.extend(plane.iter().map(|&v| (v - mean) * inv_std));
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub fn standardize_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let [_, _, h, w] = input.dims4("standardize_backward")?;
    let n = h * w;
    let inv_n = T::lit(1.0 / n as f64);
    let eps = T::lit(eps);
    let mut out = Vec::with_capacity(input.numel());
    for (plane, g) in input.data().chunks(n).zip(grad_out.data().chunks(n)) {
        let mean = plane.iter().copied().sum::<T>() * inv_n;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv_std = (var + eps).sqrt().recip();
        let g_mean = g.iter().copied().sum::<T>() * inv_n;
        let gy_mean = g
            .iter()
            .zip(plane)
            .map(|(&gv, &x)| gv * (x - mean) * inv_std)
            .sum::<T>()
            * inv_n;
        out.extend(
            g.iter()
                .zip(plane)
                .map(|(&gv, &x)| inv_std * (gv - g_mean - (x - mean) * inv_std * gy_mean)),
        );
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}
