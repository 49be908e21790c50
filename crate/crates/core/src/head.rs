//! Text-conditioned segmentation head and per-class BCE loss.
//!
//! Visual features pass through two 3×3 convs; each class then gets a
//! pointwise classifier whose kernel and bias are generated from its text
//! embedding on every forward pass.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::mgfe::init_conv;
use crate::ops::Conv2dArgs;
use crate::params::{dense_weight, Bound, ParamStore};
use crate::ppd::Dense;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BCE_EPS: f64 = 1e-7;

const V1: &str = "head.v1";
const V2: &str = "head.v2";
const KERNEL: &str = "head.kernel";
const OFFSET: &str = "head.offset";

pub fn init<T: Scalar>(store: &mut ParamStore<T>, channels: usize, text_dim: usize, rng: &mut ChaCha8Rng) {
    init_conv(store, V1, channels, channels, 3, rng);
    init_conv(store, V2, channels, channels, 3, rng);
    store.insert(format!("{KERNEL}.weight"), dense_weight(channels, text_dim, rng));
    store.insert(format!("{KERNEL}.bias"), Tensor::zeros(&[channels]));
    store.insert(format!("{OFFSET}.weight"), dense_weight(1, text_dim, rng));
    store.insert(format!("{OFFSET}.bias"), Tensor::zeros(&[1]));
}

/// The per-class generator: `t_n -> (w_n, b_n)`.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierGenerator {
    pub kernel: Dense,
    pub offset: Dense,
}

impl ClassifierGenerator {
    pub fn bind(p: &Bound) -> Result<Self> {
        Ok(Self {
            kernel: Dense::bind(p, KERNEL)?,
            offset: Dense::bind(p, OFFSET)?,
        })
    }
}

/// Two 3×3 convs with a SiLU in between.
pub fn visual_features<T: Scalar>(g: &mut Graph<T>, p: &Bound, merged: Var) -> Result<Var> {
    let a = g.conv2d(
        merged,
        p.var(&format!("{V1}.weight"))?,
        Some(p.var(&format!("{V1}.bias"))?),
        Conv2dArgs::SAME3,
    )?;
    let a = g.silu(a)?;
    g.conv2d(
        a,
        p.var(&format!("{V2}.weight"))?,
        Some(p.var(&format!("{V2}.bias"))?),
        Conv2dArgs::SAME3,
    )
}

/// `logits[b,n,y,x] = <w_n, features[b,:,y,x]> + b_n` with `(w_n, b_n)`
/// generated from the text embedding of class `n`.
pub fn class_logits<T: Scalar>(
    g: &mut Graph<T>,
    gen: &ClassifierGenerator,
    features: Var,
    text: Var,
) -> Result<Var> {
    let [_, c, _, _] = g.value(features).dims4("text_head")?;
    let &[classes, _] = g.shape(text) else {
        return Err(Error::shape("text_head", "text embeddings must be [N+1, D]"));
    };
    let kernels = gen.kernel.apply(g, text)?;
    if g.shape(kernels)[1] != c {
        return Err(Error::shape(
            "text_head",
            format!("generated kernels {:?} for {c} feature channels", g.shape(kernels)),
        ));
    }
    let kernels = g.reshape(kernels, &[classes, c, 1, 1])?;
    let offsets = gen.offset.apply(g, text)?;
    let offsets = g.reshape(offsets, &[classes])?;
    g.conv2d(features, kernels, Some(offsets), Conv2dArgs::POINTWISE)
}

/// Full head: `class_logits(visual_features(merged), text)`.
pub fn text_head<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    merged: Var,
    text: Var,
    expected_classes: usize,
) -> Result<Var> {
    if g.shape(text)[0] != expected_classes {
        return Err(Error::shape(
            "text_head",
            format!(
                "{} text embeddings for {expected_classes} configured classes",
                g.shape(text)[0]
            ),
        ));
    }
    let features = visual_features(g, p, merged)?;
    class_logits(g, &ClassifierGenerator::bind(p)?, features, text)
}

/// Repeated ×2 bilinear upsampling until the grid reaches `size`.
pub fn upsample_to_input<T: Scalar>(g: &mut Graph<T>, logits: Var, size: usize) -> Result<Var> {
    let mut x = logits;
    loop {
        let [_, _, h, w] = g.value(x).dims4("upsample_to_input")?;
        if h == size && w == size {
            return Ok(x);
        }
        if h >= size || w >= size || h != w {
            return Err(Error::shape(
                "upsample_to_input",
                format!("cannot reach {size}x{size} from {h}x{w} by doubling"),
            ));
        }
        x = g.upsample2(x)?;
    }
}

/// Mean per-class binary cross-entropy with clamped probabilities.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, probabilities: Var, target: &Tensor<T>) -> Result<Var> {
    g.bce(probabilities, target, BCE_EPS)
}

/// Per-pixel argmax over the class axis; ties go to the lowest class index.
pub fn predict<T: Scalar>(scores: &Tensor<T>) -> Result<LabelMap> {
    let [b, n, h, w] = scores.dims4("predict")?;
    if n > u8::MAX as usize + 1 {
        return Err(Error::invalid("predict", format!("{n} classes exceed 8-bit labels")));
    }
    let plane = h * w;
    let d = scores.data();
    let mut labels = Vec::with_capacity(b * plane);
    for bi in 0..b {
        let base = bi * n * plane;
        for px in 0..plane {
            let mut best = 0;
            let mut best_v = d[base + px];
            for c in 1..n {
                let v = d[base + c * plane + px];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelMap::new(b, h, w, labels)
}
