//! Forward kernels and their adjoints, free of any tape bookkeeping.

pub mod conv;
pub mod dense;
pub mod fourier;
pub mod norm;
pub mod resize;

pub use conv::{conv2d, Conv2dArgs};
pub use dense::{linear, matmul, permute, softmax_lastaxis};
pub use fourier::{dft2d, high_pass, idft2d, HighPassMask};
pub use norm::standardize;
pub use resize::{avgpool2, resize_bilinear, upsample2, ResizeFactor};

use crate::scalar::Scalar;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}
