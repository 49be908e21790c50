//! Multi-grained visual features.
//!
//! From the middle-grain encoder output `Fm` this derives a fine grain `Ff`
//! (2× extents) and a coarse grain `Fc` (½× extents), then enhances each:
//! a Fourier high-pass residual on `Ff`, a 3×3 conv on `Fm`, and a k-nearest-
//! neighbour edge feature residual on `Fc`. The three raw grains are also fused
//! top-down into a blended feature at the middle resolution.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{Conv2dArgs, HighPassMask};
use crate::params::{conv_kernel, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighPassConfig {
    /// Fraction of the half-extent below which centred frequencies are removed.
    pub cutoff_ratio: f64,
}

impl Default for HighPassConfig {
    fn default() -> Self {
        Self { cutoff_ratio: 0.25 }
    }
}

impl HighPassConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_ratio > 0.0 && self.cutoff_ratio < 1.0) {
            return Err(Error::Config(format!(
                "high-pass cutoff ratio {} must lie in (0, 1)",
                self.cutoff_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopoConfig {
    pub k: usize,
    pub dilation: usize,
}

impl Default for TopoConfig {
    fn default() -> Self {
        Self { k: 9, dilation: 1 }
    }
}

impl TopoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.dilation == 0 {
            return Err(Error::Config("topology k and dilation must be positive".into()));
        }
        Ok(())
    }
}

/// Every grain and branch output of one batch.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBundle {
    pub fc: Var,
    pub fm: Var,
    pub ff: Var,
    pub fh: Var,
    pub fv: Var,
    pub ft: Var,
    pub fblend: Var,
}

fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, args: Conv2dArgs) -> Result<Var> {
    g.conv2d(
        x,
        p.var(&format!("{name}.weight"))?,
        Some(p.var(&format!("{name}.bias"))?),
        args,
    )
}

pub(crate) fn init_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    store.insert(format!("{name}.weight"), conv_kernel(cout, cin, k, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

pub const GRAIN_DOWN: &str = "grains.down";
pub const GRAIN_UP: &str = "grains.up";
pub const CONV_BRANCH: &str = "mgfe.conv";
pub const TOPO_REDUCE: &str = "mgfe.topo.reduce";
pub const TOPO_EXPAND: &str = "mgfe.topo.expand";
pub const FPN_LATERAL: &str = "fpn.lateral";
pub const FPN_SMOOTH: &str = "fpn.smooth";

pub fn init_grains<T: Scalar>(store: &mut ParamStore<T>, c: usize, rng: &mut ChaCha8Rng) {
    init_conv(store, GRAIN_DOWN, c, c, 3, rng);
    init_conv(store, GRAIN_UP, c, c, 3, rng);
}

pub fn init_conv_branch<T: Scalar>(store: &mut ParamStore<T>, c: usize, rng: &mut ChaCha8Rng) {
    init_conv(store, CONV_BRANCH, c, c, 3, rng);
}

pub fn init_topo<T: Scalar>(store: &mut ParamStore<T>, c: usize, rng: &mut ChaCha8Rng) {
    init_conv(store, TOPO_REDUCE, c / 2, c, 1, rng);
    init_conv(store, TOPO_EXPAND, c, c / 2, 1, rng);
}

pub fn init_fpn<T: Scalar>(store: &mut ParamStore<T>, c: usize, rng: &mut ChaCha8Rng) {
    init_conv(store, FPN_LATERAL, c, c, 1, rng);
    init_conv(store, FPN_SMOOTH, c, c, 3, rng);
}

/// `Fc = conv3(avgpool(Fm))`, `Ff = conv3(upsample(Fm))`.
pub fn derive_grains<T: Scalar>(g: &mut Graph<T>, p: &Bound, fm: Var) -> Result<(Var, Var)> {
    let [_, _, h, w] = g.value(fm).dims4("derive_grains")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "derive_grains",
            format!("middle grain {h}x{w} must have even extents"),
        ));
    }
    let pooled = g.avgpool2(fm)?;
    let fc = conv(g, p, GRAIN_DOWN, pooled, Conv2dArgs::SAME3)?;
    let up = g.upsample2(fm)?;
    let ff = conv(g, p, GRAIN_UP, up, Conv2dArgs::SAME3)?;
    Ok((fc, ff))
}

/// `Fh = IDFT(mask ⊙ DFT(Ff)) + Ff`.
pub fn high_pass_enhance<T: Scalar>(g: &mut Graph<T>, ff: Var, cfg: &HighPassConfig) -> Result<Var> {
    let [_, _, h, w] = g.value(ff).dims4("high_pass_enhance")?;
    let mask = Arc::new(HighPassMask::new(h, w, cfg.cutoff_ratio)?);
    let hf = g.high_pass(ff, mask)?;
    g.add(hf, ff)
}

/// `Fv = conv3(Fm)`, channel- and extent-preserving.
pub fn conv_branch<T: Scalar>(g: &mut Graph<T>, p: &Bound, fm: Var) -> Result<Var> {
    conv(g, p, CONV_BRANCH, fm, Conv2dArgs::SAME3)
}

/// Squared Euclidean distances between the rows of a `[P,C]` point set,
/// `|a|^2 - 2 a·b + |b|^2` clamped at zero. Accumulates in `f64`.
pub fn pairwise_sq_dist<T: Scalar>(points: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c] = points.shape() else {
        return Err(Error::shape(
            "pairwise_sq_dist",
            format!("expected [P,C], got {:?}", points.shape()),
        ));
    };
    let x: Vec<f64> = points.data().iter().map(|v| v.as_f64()).collect();
    let sq: Vec<f64> = x.chunks(c).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let a = &x[i * c..][..c];
        for j in 0..n {
            let b = &x[j * c..][..c];
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            out.push(T::lit(((sq[i] + sq[j]) - 2.0 * dot).max(0.0)));
        }
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

/// Dilated k-nearest neighbours from a `[P,P]` distance matrix.
///
/// For each row the other points are sorted by ascending distance (ties to the
/// lower index) and ranks `d, 2d, ..., kd` are taken. Returns `[P*k]` row-major.
pub fn knn_select<T: Scalar>(dist: &Tensor<T>, k: usize, dilation: usize) -> Result<Vec<usize>> {
    let &[n, n2] = dist.shape() else {
        return Err(Error::shape("knn_select", "distance matrix must be rank 2"));
    };
    if n != n2 {
        return Err(Error::shape("knn_select", format!("{n}x{n2} is not square")));
    }
    if k == 0 || dilation == 0 || k * dilation >= n {
        return Err(Error::invalid(
            "knn_select",
            format!("k={k}, dilation={dilation} needs k*dilation < {n} points"),
        ));
    }
    let d = dist.data();
    let mut out = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let row = &d[i * n..][..n];
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
        out.extend((1..=k).map(|r| order[r * dilation - 1]));
    }
    Ok(out)
}

/// Topological residual: `Ft = expand(max_k(edge features of knn(norm(reduce(Fc))))) + Fc`.
pub fn topo_enhance<T: Scalar>(g: &mut Graph<T>, p: &Bound, fc: Var, cfg: &TopoConfig) -> Result<Var> {
    Ok(topo_enhance_with(g, p, fc, cfg, None)?.0)
}

/// As [`topo_enhance`], but reuses `neighbours` (one `[P*k]` table per batch
/// item) instead of recomputing them when given. Returns the tables used.
pub fn topo_enhance_with<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    fc: Var,
    cfg: &TopoConfig,
    neighbours: Option<&[Vec<usize>]>,
) -> Result<(Var, Vec<Vec<usize>>)> {
    let [b, c, h, w] = g.value(fc).dims4("topo_enhance")?;
    let npts = h * w;
    if cfg.k * cfg.dilation >= npts {
        return Err(Error::invalid(
            "topo_enhance",
            format!(
                "{npts} spatial positions are too few for k={} dilation={}",
                cfg.k, cfg.dilation
            ),
        ));
    }
    let half = c / 2;
    let reduced = conv(g, p, TOPO_REDUCE, fc, Conv2dArgs::POINTWISE)?;
    let normed = g.standardize(reduced, STANDARDIZE_EPS)?;
    let nhwc = g.permute(normed, &[0, 2, 3, 1])?;
    let points = g.reshape(nhwc, &[b, npts, half])?;
    let tables = match neighbours {
        Some(t) => t.to_vec(),
        None => {
            let pts_val = g.value(points);
            let mut tables = Vec::with_capacity(b);
            for bi in 0..b {
                let slice = &pts_val.data()[bi * npts * half..][..npts * half];
                let plane = Tensor::from_parts(vec![npts, half], slice.to_vec());
                tables.push(knn_select(&pairwise_sq_dist(&plane)?, cfg.k, cfg.dilation)?);
            }
            tables
        }
    };
    let edges = g.edge_max(points, &tables, cfg.k)?;
    let grid = g.reshape(edges, &[b, h, w, half])?;
    let nchw = g.permute(grid, &[0, 3, 1, 2])?;
    let expanded = conv(g, p, TOPO_EXPAND, nchw, Conv2dArgs::POINTWISE)?;
    Ok((g.add(expanded, fc)?, tables))
}

/// Top-down fusion at the middle resolution:
/// `smooth(upsample(Fc) + lateral(Fm) + avgpool(Ff))`.
pub fn fpn_blend<T: Scalar>(g: &mut Graph<T>, p: &Bound, fc: Var, fm: Var, ff: Var) -> Result<Var> {
    let [b, c, h, w] = g.value(fm).dims4("fpn_blend")?;
    let want_c = [b, c, h / 2, w / 2];
    let want_f = [b, c, h * 2, w * 2];
    if g.shape(fc) != want_c || g.shape(ff) != want_f {
        return Err(Error::shape(
            "fpn_blend",
            format!(
                "grains {:?}/{:?}/{:?} do not follow the 1/2, 1, 2 extents",
                g.shape(fc),
                g.shape(fm),
                g.shape(ff)
            ),
        ));
    }
    let up = g.upsample2(fc)?;
    let lateral = conv(g, p, FPN_LATERAL, fm, Conv2dArgs::POINTWISE)?;
    let top = g.add(up, lateral)?;
    let down = g.avgpool2(ff)?;
    let sum = g.add(top, down)?;
    conv(g, p, FPN_SMOOTH, sum, Conv2dArgs::SAME3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::identity_kernel;
    use rand::SeedableRng;

    fn identity_store(c: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for name in [GRAIN_DOWN, GRAIN_UP, CONV_BRANCH, FPN_SMOOTH] {
            s.insert(format!("{name}.weight"), identity_kernel(c, 3));
            s.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
        }
        s.insert(format!("{FPN_LATERAL}.weight"), identity_kernel(c, 1));
        s.insert(format!("{FPN_LATERAL}.bias"), Tensor::zeros(&[c]));
        s
    }

    #[test]
    fn constant_middle_grain_gives_constant_grains() {
        let store = identity_store(3);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fm = g.constant(Tensor::full(&[2, 3, 8, 8], 1.5));
        let (fc, ff) = derive_grains(&mut g, &p, fm).unwrap();
        assert_eq!(g.shape(fc), &[2, 3, 4, 4]);
        assert_eq!(g.shape(ff), &[2, 3, 16, 16]);
        assert!(g.value(fc).data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
        assert!(g.value(ff).data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn grain_shapes_follow_contract() {
        let mut store = ParamStore::<f32>::new();
        init_grains(&mut store, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fm = g.constant(Tensor::zeros(&[2, 8, 16, 16]));
        let (fc, ff) = derive_grains(&mut g, &p, fm).unwrap();
        assert_eq!(g.shape(fc), &[2, 8, 8, 8]);
        assert_eq!(g.shape(ff), &[2, 8, 32, 32]);
        let odd = g.constant(Tensor::zeros(&[1, 8, 5, 6]));
        assert!(derive_grains(&mut g, &p, odd).is_err());
    }

    #[test]
    fn high_pass_of_constant_is_identity() {
        let mut g = Graph::<f64>::new();
        let ff = g.constant(Tensor::full(&[1, 2, 8, 8], -3.0));
        let fh = high_pass_enhance(&mut g, ff, &HighPassConfig::default()).unwrap();
        assert!(g.value(fh).max_abs_diff(g.value(ff)) < 1e-12);
    }

    #[test]
    fn conv_branch_identity_and_bias() {
        let store = identity_store(4);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fm = g.constant(Tensor::from_fn(&[1, 4, 6, 6], |i| (i as f64).cos()));
        let fv = conv_branch(&mut g, &p, fm).unwrap();
        assert_eq!(g.value(fv), g.value(fm));

        let mut store = store;
        *store.get_mut(&format!("{CONV_BRANCH}.weight")).unwrap() = Tensor::zeros(&[4, 4, 3, 3]);
        *store.get_mut(&format!("{CONV_BRANCH}.bias")).unwrap() =
            Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fm = g.constant(Tensor::from_fn(&[1, 4, 6, 6], |i| i as f64));
        let fv = conv_branch(&mut g, &p, fm).unwrap();
        for (c, plane) in g.value(fv).data().chunks(36).enumerate() {
            assert!(plane.iter().all(|&v| v == (c + 1) as f64));
        }
    }

    #[test]
    fn pythagorean_pair() {
        let pts = Tensor::<f64>::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        assert_eq!(pairwise_sq_dist(&pts).unwrap().data(), &[0.0, 25.0, 25.0, 0.0]);
        let same = Tensor::<f64>::full(&[5, 3], 2.0);
        assert!(pairwise_sq_dist(&same).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn knn_on_a_line() {
        let pts = Tensor::<f64>::from_fn(&[5, 1], |i| i as f64);
        let d = pairwise_sq_dist(&pts).unwrap();
        let nn = knn_select(&d, 2, 1).unwrap();
        assert_eq!(&nn[0..2], &[1, 2]);
        let nn = knn_select(&d, 2, 2).unwrap();
        assert_eq!(&nn[0..2], &[2, 4]);
        // point 2 has 1 and 3 equidistant: lower index first
        let nn = knn_select(&d, 2, 1).unwrap();
        assert_eq!(&nn[4..6], &[1, 3]);
        assert!(knn_select(&d, 2, 2).is_ok());
        assert!(knn_select(&d, 5, 1).is_err());
        assert!(knn_select(&d, 2, 3).is_err());
    }

    #[test]
    fn topo_zero_projection_is_identity() {
        let c = 8;
        let mut store = ParamStore::<f64>::new();
        init_topo(&mut store, c, &mut ChaCha8Rng::seed_from_u64(5));
        *store.get_mut(&format!("{TOPO_EXPAND}.weight")).unwrap() = Tensor::zeros(&[c, c / 2, 1, 1]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fc = g.constant(Tensor::from_fn(&[1, c, 4, 4], |i| ((i * 37) % 11) as f64 - 5.0));
        let ft = topo_enhance(&mut g, &p, fc, &TopoConfig::default()).unwrap();
        assert_eq!(g.value(ft), g.value(fc));
    }

    #[test]
    fn topo_identical_positions_add_bias() {
        let c = 4;
        let mut store = ParamStore::<f64>::new();
        init_topo(&mut store, c, &mut ChaCha8Rng::seed_from_u64(5));
        let bias = Tensor::new(vec![c], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        *store.get_mut(&format!("{TOPO_EXPAND}.bias")).unwrap() = bias.clone();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fc_val = Tensor::from_fn(&[1, c, 4, 4], |i| (i / 16) as f64 * 0.7);
        let fc = g.constant(fc_val.clone());
        let ft = topo_enhance(&mut g, &p, fc, &TopoConfig::default()).unwrap();
        for (ch, (out, inp)) in g.value(ft).data().chunks(16).zip(fc_val.data().chunks(16)).enumerate() {
            for (o, i) in out.iter().zip(inp) {
                assert!((o - (i + bias.data()[ch])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn topo_rejects_too_few_positions() {
        let mut store = ParamStore::<f64>::new();
        init_topo(&mut store, 4, &mut ChaCha8Rng::seed_from_u64(5));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fc = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(topo_enhance(&mut g, &p, fc, &TopoConfig::default()).is_err());
    }

    #[test]
    fn fpn_constant_and_shapes() {
        let store = identity_store(3);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fc = g.constant(Tensor::full(&[2, 3, 4, 4], 2.0));
        let fm = g.constant(Tensor::full(&[2, 3, 8, 8], 2.0));
        let ff = g.constant(Tensor::full(&[2, 3, 16, 16], 2.0));
        let out = fpn_blend(&mut g, &p, fc, fm, ff).unwrap();
        assert_eq!(g.shape(out), &[2, 3, 8, 8]);
        assert!(g.value(out).data().iter().all(|&v| (v - 6.0).abs() < 1e-12));
        assert!(fpn_blend(&mut g, &p, fm, fm, ff).is_err());
    }
}
