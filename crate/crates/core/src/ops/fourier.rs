//! Direct-definition 2-D discrete Fourier transform.
//!
//! Each plane is transformed along rows and then along columns by the textbook
//! sum, accumulated in `f64` whatever the tensor's element type. Extents at
//! this scale stay well under a hundred, so no fast algorithm is needed.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(cos, sin)` of `2πk/n` for `k in 0..n`.
fn twiddles(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect()
}

/// In-place 1-D DFT of a strided complex sequence. `sign` is -1 for the
/// forward transform and +1 for the (unnormalised) inverse.
#[allow(clippy::too_many_arguments)]
fn dft_1d(
    re: &mut [f64],
    im: &mut [f64],
    offset: usize,
    stride: usize,
    n: usize,
    tw: &[(f64, f64)],
    sign: f64,
    scratch: &mut Vec<(f64, f64)>,
) {
    scratch.clear();
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for t in 0..n {
            let (c, s) = tw[(k * t) % n];
            let s = sign * s;
            let (xr, xi) = (re[offset + t * stride], im[offset + t * stride]);
            sr += xr * c - xi * s;
            si += xr * s + xi * c;
        }
        scratch.push((sr, si));
    }
    for (t, &(r, i)) in scratch.iter().enumerate() {
        re[offset + t * stride] = r;
        im[offset + t * stride] = i;
    }
}

fn transform_plane(re: &mut [f64], im: &mut [f64], h: usize, w: usize, sign: f64) {
    let tw_w = twiddles(w);
    let tw_h = twiddles(h);
    let mut scratch = Vec::with_capacity(h.max(w));
    for r in 0..h {
        dft_1d(re, im, r * w, 1, w, &tw_w, sign, &mut scratch);
    }
    for c in 0..w {
        dft_1d(re, im, c, w, h, &tw_h, sign, &mut scratch);
    }
}

/// Forward transform of every `[H,W]` plane; returns `(real, imag)`.
pub fn dft2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, _, h, w] = input.dims4("dft2d")?;
    let mut re: Vec<f64> = input.data().iter().map(|v| v.as_f64()).collect();
    let mut im = vec![0.0; re.len()];
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        transform_plane(pr, pi, h, w, -1.0);
    }
    Ok((to_tensor(input.shape(), &re), to_tensor(input.shape(), &im)))
}

/// Inverse transform; the imaginary part of the result is discarded.
pub fn idft2d<T: Scalar>(real: &Tensor<T>, imag: &Tensor<T>) -> Result<Tensor<T>> {
    real.expect_same_shape("idft2d", imag)?;
    let [_, _, h, w] = real.dims4("idft2d")?;
    let mut re: Vec<f64> = real.data().iter().map(|v| v.as_f64()).collect();
    let mut im: Vec<f64> = imag.data().iter().map(|v| v.as_f64()).collect();
    let norm = 1.0 / (h * w) as f64;
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        transform_plane(pr, pi, h, w, 1.0);
    }
    re.iter_mut().for_each(|v| *v *= norm);
    Ok(to_tensor(real.shape(), &re))
}

fn to_tensor<T: Scalar>(shape: &[usize], v: &[f64]) -> Tensor<T> {
    Tensor::from_parts(shape.to_vec(), v.iter().map(|&x| T::lit(x)).collect())
}

/// Signed frequency of bin `k` in an `n`-point transform, measured from the
/// centred DC bin.
pub fn centred_frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Binary ideal high-pass mask over an `[h,w]` spectrum in natural (uncentred)
/// bin order. Bins whose centred radius is `<= cutoff_ratio * min(h,w) / 2`
/// are blocked (false); all others pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HighPassMask {
    h: usize,
    w: usize,
    pass: Vec<bool>,
}

impl HighPassMask {
    pub fn new(h: usize, w: usize, cutoff_ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&cutoff_ratio) {
            return Err(Error::invalid(
                "high_pass",
                format!("cutoff ratio {cutoff_ratio} outside [0, 1)"),
            ));
        }
        let radius = cutoff_ratio * h.min(w) as f64 / 2.0;
        let pass = (0..h * w)
            .map(|i| {
                let fy = centred_frequency(i / w, h);
                let fx = centred_frequency(i % w, w);
                (fy * fy + fx * fx).sqrt() > radius
            })
            .collect();
        Ok(Self { h, w, pass })
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn passes(&self, ky: usize, kx: usize) -> bool {
        self.pass[ky * self.w + kx]
    }

    pub fn bins(&self) -> &[bool] {
        &self.pass
    }

    /// Zeroes blocked bins of a spectrum in place.
    pub fn apply(&self, re: &mut [f64], im: &mut [f64]) {
        for (i, &keep) in self.pass.iter().enumerate() {
            if !keep {
                re[i] = 0.0;
                im[i] = 0.0;
            }
        }
    }
}

/// `Re(IDFT(mask ⊙ DFT(x)))` for each plane. The mask is even under
/// `k -> -k`, so this map is a real symmetric convolution and is its own adjoint.
pub fn high_pass<T: Scalar>(input: &Tensor<T>, mask: &HighPassMask) -> Result<Tensor<T>> {
    let [_, _, h, w] = input.dims4("high_pass")?;
    if mask.extents() != (h, w) {
        return Err(Error::shape(
            "high_pass",
            format!("mask {:?} for {h}x{w} planes", mask.extents()),
        ));
    }
    let mut re: Vec<f64> = input.data().iter().map(|v| v.as_f64()).collect();
    let mut im = vec![0.0; re.len()];
    let norm = 1.0 / (h * w) as f64;
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        transform_plane(pr, pi, h, w, -1.0);
        mask.apply(pr, pi);
        transform_plane(pr, pi, h, w, 1.0);
        pr.iter_mut().for_each(|v| *v *= norm);
    }
    Ok(to_tensor(input.shape(), &re))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_has_only_dc() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 6], 2.5);
        let (re, im) = dft2d(&x).unwrap();
        assert!((re.data()[0] - 2.5 * 24.0).abs() < 1e-9);
        for i in 1..24 {
            assert!(re.data()[i].abs() < 1e-9 && im.data()[i].abs() < 1e-9);
        }
        assert!(im.data()[0].abs() < 1e-9);
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = Tensor::<f64>::zeros(&[1, 1, 5, 4]);
        x.data_mut()[0] = 1.0;
        let (re, im) = dft2d(&x).unwrap();
        assert!(re.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(im.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn mask_blocks_dc_and_is_radially_symmetric() {
        let m = HighPassMask::new(8, 8, 0.25).unwrap();
        assert!(!m.passes(0, 0));
        for ky in 0..8 {
            for kx in 0..8 {
                assert_eq!(m.passes(ky, kx), m.passes((8 - ky) % 8, (8 - kx) % 8));
                assert_eq!(m.passes(ky, kx), m.passes(kx, ky));
            }
        }
        // radius 1: the DC bin and its four axis neighbours
        assert_eq!(m.bins().iter().filter(|&&p| !p).count(), 5);
        assert!(HighPassMask::new(8, 8, 1.0).is_err());
    }
}
