//! Built-in verification suites run by `cellseg check`.
//!
//! * `grads`: central finite differences against the tape's analytic
//!   gradients for every differentiable operation and for the whole model.
//! * `oracles`: kernels and metrics against direct brute-force
//!   re-implementations, plus the frequency and residual invariants.
//!
//! All checks run in `f64`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoders::{PromptSet, TextConfig};
use crate::error::{Error, Result};
use crate::head;
use crate::metrics::{compute_metrics, LabelMap};
use crate::mgfe::{self, HighPassConfig, TopoConfig};
use crate::model::{Ablation, Model, ModelConfig};
use crate::ops::fourier::{dft2d, idft2d, HighPassMask};
use crate::ops::Conv2dArgs;
use crate::params::{dense_weight, Bound, ParamStore};
use crate::ppd::{self, AttentionParams, Dense, DecoderConfig, DecoderSwitches, Stage};
use crate::tensor::Tensor;

/// Largest relative error accepted between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Tolerance for numeric oracle comparisons.
pub const ORACLE_TOLERANCE: f64 = 1e-5;
/// Step of the fourth-order central difference
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;
pub const DEFAULT_GRAD_SEEDS: usize = 20;
pub const DEFAULT_ORACLE_INSTANCES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grads,
    Oracles,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grads" => Ok(Suite::Grads),
            "oracles" => Ok(Suite::Oracles),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite '{other}', expected grads, oracles or all"
            ))),
        }
    }
}

/// Result of one named check across all its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: &'static str,
    pub instances: usize,
    /// Largest error seen (0 for exact checks that passed).
    pub worst: f64,
    pub tolerance: f64,
    pub failure: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.worst <= self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: {} instances, worst {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.instances,
            self.worst,
            self.tolerance
        )?;
        if let Some(msg) = &self.failure {
            write!(f, " - {msg}")?;
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub worst: f64,
    pub worst_at: String,
    pub coordinates: usize,
}

/// Compares analytic and central-difference gradients of
/// `L = sum(build(params) * R)` with a fixed random probe `R`.
///
/// `sample` limits the number of checked coordinates per tensor.
pub fn grad_check<F>(store: &ParamStore<f64>, build: F, probe_seed: u64, sample: Option<usize>) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>, grads: bool| -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let out = build(&mut g, &p)?;
        let probe = Tensor::randn(g.shape(out), 1.0, &mut ChaCha8Rng::seed_from_u64(probe_seed));
        let r = g.constant(probe);
        let prod = g.mul(out, r)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss).item();
        if !grads {
            return Ok((value, BTreeMap::new()));
        }
        let gr = g.backward(loss)?;
        Ok((value, p.collect(&g, &gr)))
    };
    let (_, analytic) = eval(store, true)?;
    let mut work = store.clone();
    let mut pick = ChaCha8Rng::seed_from_u64(probe_seed ^ 0x00c0_ffee);
    let mut report = GradReport {
        worst: 0.0,
        worst_at: String::new(),
        coordinates: 0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name)?.numel();
        let coords: Vec<usize> = match sample {
            Some(k) if k < n => (0..k).map(|_| pick.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work.get(&name)?.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(&name)?.data_mut()[i] = orig + offset;
                Ok(eval(&work, false)?.0)
            };
            let h = FD_STEP;
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            work.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic[&name].data()[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.worst || err.is_nan() {
                report.worst = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_at = format!("{name}[{i}] analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

fn store_of(items: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in items {
        s.insert(n, t);
    }
    s
}

fn grad_conv(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let k = if seed.is_multiple_of(2) { 3 } else { 1 };
    let stride = 1 + (seed / 2 % 2) as usize;
    let s = store_of(vec![
        ("x", randn(&[2, 3, 6, 5], &mut r)),
        ("w", randn(&[4, 3, k, k], &mut r)),
        ("b", randn(&[4], &mut r)),
    ]);
    let args = Conv2dArgs { stride, padding: k / 2 };
    grad_check(&s, |g, p| g.conv2d(p.var("x")?, p.var("w")?, Some(p.var("b")?), args), seed, None)
}

fn grad_linear(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let s = store_of(vec![
        ("x", randn(&[2, 3, 5], &mut r)),
        ("w", randn(&[4, 5], &mut r)),
        ("b", randn(&[4], &mut r)),
    ]);
    grad_check(&s, |g, p| g.linear(p.var("x")?, p.var("w")?, Some(p.var("b")?)), seed, None)
}

fn grad_matmul(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let t = seed.is_multiple_of(2);
    let rhs = if t { [3, 6, 5] } else { [3, 5, 6] };
    let s = store_of(vec![("a", randn(&[3, 4, 5], &mut r)), ("b", randn(&rhs, &mut r))]);
    grad_check(&s, |g, p| g.matmul(p.var("a")?, p.var("b")?, t), seed, None)
}

fn grad_softmax(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let s = store_of(vec![("x", randn(&[2, 3, 7], &mut r).scale(2.0))]);
    grad_check(&s, |g, p| g.softmax(p.var("x")?), seed, None)
}

fn grad_upsample(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let s = store_of(vec![("x", randn(&[2, 2, 3, 5], &mut r))]);
    grad_check(&s, |g, p| g.upsample2(p.var("x")?), seed, None)
}

fn grad_avgpool(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let s = store_of(vec![("x", randn(&[2, 2, 4, 6], &mut r))]);
    grad_check(&s, |g, p| g.avgpool2(p.var("x")?), seed, None)
}

fn grad_activations(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let s = store_of(vec![("x", randn(&[2, 3, 4], &mut r).scale(3.0))]);
    grad_check(
        &s,
        |g, p| {
            let x = p.var("x")?;
            let a = g.silu(x)?;
            let b = g.sigmoid(x)?;
            let b = g.scale(b, 2.0)?;
            g.add(a, b)
        },
        seed,
        None,
    )
}

fn grad_standardize(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let s = store_of(vec![("x", randn(&[2, 3, 4, 5], &mut r))]);
    grad_check(&s, |g, p| g.standardize(p.var("x")?, mgfe::STANDARDIZE_EPS), seed, None)
}

fn grad_layout(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let s = store_of(vec![("x", randn(&[2, 3, 4], &mut r)), ("t", randn(&[3, 5], &mut r))]);
    grad_check(
        &s,
        |g, p| {
            let x = g.permute(p.var("x")?, &[2, 0, 1])?;
            let x = g.reshape(x, &[2, 2, 6])?;
            let t = g.broadcast_batch(p.var("t")?, 2)?;
            let t = g.reshape(t, &[2, 3, 5])?;
            let ts = g.sum(t)?;
            let xs = g.sum(x)?;
            let m = g.mul(x, x)?;
            let m = g.sum(m)?;
            let a = g.add(ts, xs)?;
            g.add(a, m)
        },
        seed,
        None,
    )
}

fn grad_attention(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let dm = 8;
    let mut items = vec![("q_in", randn(&[2, 5, dm], &mut r)), ("kv_in", randn(&[2, 6, dm], &mut r))];
    for n in ["q", "k", "v", "o"] {
        items.push((leak(format!("{n}.weight")), dense_weight(dm, dm, &mut r)));
        items.push((leak(format!("{n}.bias")), randn(&[dm], &mut r).scale(0.1)));
    }
    let s = store_of(items);
    grad_check(
        &s,
        |g, p| {
            let params = AttentionParams {
                q: Dense::bind(p, "q")?,
                k: Dense::bind(p, "k")?,
                v: Dense::bind(p, "v")?,
                o: Dense::bind(p, "o")?,
            };
            Ok(ppd::cross_attend(g, &params, 2, p.var("q_in")?, p.var("kv_in")?)?.output)
        },
        seed,
        None,
    )
}

fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

fn grad_high_pass(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let s = store_of(vec![("x", randn(&[2, 3, 8, 8], &mut r))]);
    let cfg = HighPassConfig { cutoff_ratio: 0.25 };
    grad_check(&s, |g, p| mgfe::high_pass_enhance(g, p.var("x")?, &cfg), seed, None)
}

fn grad_topo(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let c = 4;
    let mut s = ParamStore::new();
    mgfe::init_topo(&mut s, c, &mut r);
    for (name, t) in [
        (format!("{}.bias", mgfe::TOPO_REDUCE), Tensor::randn(&[c / 2], 0.1, &mut r)),
        (format!("{}.bias", mgfe::TOPO_EXPAND), Tensor::randn(&[c], 0.1, &mut r)),
    ] {
        s.insert(name, t);
    }
    s.insert("fc", randn(&[2, c, 4, 4], &mut r));
    let cfg = TopoConfig {
        k: 3,
        dilation: 1 + (seed % 2) as usize,
    };
    // Neighbour selection is piecewise constant; the differentiable path is
    // checked with the graph found at the unperturbed point.
    let mut g = Graph::new();
    let bound = s.bind(&mut g);
    let fc = bound.var("fc")?;
    let (_, tables) = mgfe::topo_enhance_with(&mut g, &bound, fc, &cfg, None)?;
    grad_check(
        &s,
        |g, p| Ok(mgfe::topo_enhance_with(g, p, p.var("fc")?, &cfg, Some(&tables))?.0),
        seed,
        None,
    )
}

fn grad_text_head(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    head::init(&mut s, 4, 6, &mut r);
    s.insert("merged", randn(&[2, 4, 4, 4], &mut r));
    s.insert("text", randn(&[3, 6], &mut r));
    grad_check(
        &s,
        |g, p| head::text_head(g, p, p.var("merged")?, p.var("text")?, 3),
        seed,
        None,
    )
}

fn grad_bce(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let probs = Tensor::uniform(&[2, 3, 4, 4], 0.05, 0.95, &mut r);
    let target = Tensor::from_fn(&[2, 3, 4, 4], |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
    let s = store_of(vec![("p", probs)]);
    grad_check(&s, |g, p| g.bce(p.var("p")?, &target, head::BCE_EPS), seed, None)
}

/// Small model configuration used by the whole-network gradient check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        class_names: vec!["background".into(), "neoplastic".into(), "epithelial".into()],
        channels: 8,
        downsample: 2,
        model_dim: 8,
        heads: 2,
        text: TextConfig {
            dim: 8,
            ..TextConfig::default()
        },
        high_pass: HighPassConfig::default(),
        topo: TopoConfig::default(),
        ablation: Ablation::default(),
    }
}

fn grad_full_model(seed: u64) -> Result<GradReport> {
    let model = Model::<f64>::new(tiny_model_config(), &PromptSet::builtin(), seed)?;
    let mut r = rng(seed ^ 0xda7a);
    let size = 16;
    let images = Tensor::uniform(&[2, 3, size, size], 0.0, 1.0, &mut r);
    let labels = LabelMap::new(2, size, size, (0..2 * size * size).map(|_| r.random_range(0..3u8)).collect())?;
    let masks = crate::data::one_hot::<f64>(&labels, 3)?;
    grad_check(
        model.params(),
        |g, p| {
            let x = g.constant(images.clone());
            let fwd = model.forward(g, p, x)?;
            head::bce_loss(g, fwd.probabilities, &masks)
        },
        seed,
        Some(2),
    )
}

type GradCase = (&'static str, fn(u64) -> Result<GradReport>);

pub const GRAD_CASES: &[GradCase] = &[
    ("conv2d", grad_conv),
    ("linear", grad_linear),
    ("matmul", grad_matmul),
    ("softmax", grad_softmax),
    ("upsample2", grad_upsample),
    ("avgpool2", grad_avgpool),
    ("silu_sigmoid", grad_activations),
    ("standardize", grad_standardize),
    ("permute_reshape_broadcast", grad_layout),
    ("attention_stage", grad_attention),
    ("high_pass_path", grad_high_pass),
    ("topo_path", grad_topo),
    ("text_head", grad_text_head),
    ("bce", grad_bce),
    ("full_model", grad_full_model),
];

pub fn run_grad_case(case: &GradCase, seeds: usize) -> CheckOutcome {
    let mut out = CheckOutcome {
        suite: "grads",
        name: case.0,
        instances: 0,
        worst: 0.0,
        tolerance: GRAD_TOLERANCE,
        failure: None,
    };
    for seed in 0..seeds as u64 {
        match (case.1)(seed) {
            Ok(rep) => {
                out.instances += 1;
                if rep.worst > out.worst {
                    out.worst = rep.worst;
                    if rep.worst > GRAD_TOLERANCE {
                        out.failure = Some(format!("seed {seed}: {}", rep.worst_at));
                    }
                }
            }
            Err(e) => {
                out.failure = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    out
}

// ---------------------------------------------------------------- oracles

/// Tracks the worst numeric mismatch and the first exact mismatch.
struct Tally {
    worst: f64,
    failure: Option<String>,
}

impl Tally {
    fn new() -> Self {
        Self {
            worst: 0.0,
            failure: None,
        }
    }

    fn close(&mut self, what: impl FnOnce() -> String, got: f64, want: f64) {
        let err = (got - want).abs() / want.abs().max(1.0);
        if err.is_nan() || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
        }
        if (err.is_nan() || err > ORACLE_TOLERANCE) && self.failure.is_none() {
            self.failure = Some(format!("{}: got {got}, want {want}", what()));
        }
    }

    fn exact<V: PartialEq + fmt::Debug>(&mut self, what: impl FnOnce() -> String, got: V, want: V) {
        if got != want && self.failure.is_none() {
            self.failure = Some(format!("{}: got {got:?}, want {want:?}", what()));
        }
    }

    fn error(&mut self, e: Error) {
        if self.failure.is_none() {
            self.failure = Some(e.to_string());
        }
    }

    fn finish(self, name: &'static str, instances: usize) -> CheckOutcome {
        CheckOutcome {
            suite: "oracles",
            name,
            instances,
            worst: self.worst,
            tolerance: ORACLE_TOLERANCE,
            failure: self.failure,
        }
    }
}

fn oracle_pairwise(n: usize) -> CheckOutcome {
    let mut t = Tally::new();
    for inst in 0..n as u64 {
        let mut r = rng(inst);
        let (p, c) = (r.random_range(2..12), r.random_range(1..6));
        let pts = randn(&[p, c], &mut r).scale(3.0);
        let d = match mgfe::pairwise_sq_dist(&pts) {
            Ok(d) => d,
            Err(e) => {
                t.error(e);
                continue;
            }
        };
        for i in 0..p {
            for j in 0..p {
                let mut want = 0.0;
                for ch in 0..c {
                    let diff = pts.at(&[i, ch]) - pts.at(&[j, ch]);
                    want += diff * diff;
                }
                t.close(|| format!("instance {inst} ({i},{j})"), d.at(&[i, j]), want);
            }
        }
    }
    t.finish("pairwise_sq_dist", n)
}

/// Repeated minimum extraction over `(distance, index)`; the `r*d`-th pick
/// (1-based) is the `r`-th neighbour.
fn brute_knn(dist: &Tensor<f64>, k: usize, d: usize) -> Vec<usize> {
    let n = dist.shape()[0];
    let mut out = Vec::new();
    for i in 0..n {
        let mut taken = vec![false; n];
        taken[i] = true;
        let mut picks = Vec::new();
        for _ in 0..k * d {
            let mut best: Option<usize> = None;
            for (j, _) in taken.iter().enumerate().filter(|(_, t)| !**t) {
                best = match best {
                    Some(b) if dist.at(&[i, b]) <= dist.at(&[i, j]) => Some(b),
                    _ => Some(j),
                };
            }
            let b = best.expect("enough points");
            taken[b] = true;
            picks.push(b);
        }
        out.extend((1..=k).map(|r| picks[r * d - 1]));
    }
    out
}

fn oracle_knn(n: usize) -> CheckOutcome {
    let mut t = Tally::new();
    for inst in 0..n as u64 {
        let mut r = rng(inst ^ 0x6e6e);
        let p = r.random_range(4..16);
        let dilation = r.random_range(1..4usize).min(p - 1);
        let k = r.random_range(1..=((p - 1) / dilation));
        // Small integer coordinates produce many exact distance ties.
        let c = r.random_range(1..3);
        let pts = Tensor::from_fn(&[p, c], |_| r.random_range(0..3) as f64);
        let dist = Tensor::from_fn(&[p, p], |ij| {
            let (i, j) = (ij / p, ij % p);
            (0..c).map(|ch| (pts.at(&[i, ch]) - pts.at(&[j, ch])).powi(2)).sum()
        });
        match mgfe::knn_select(&dist, k, dilation) {
            Ok(got) => t.exact(|| format!("instance {inst} k={k} d={dilation}"), got, brute_knn(&dist, k, dilation)),
            Err(e) => t.error(e),
        }
    }
    t.finish("knn_select", n)
}

fn oracle_dft(n: usize) -> CheckOutcome {
    use std::f64::consts::PI;
    let mut t = Tally::new();
    for inst in 0..n as u64 {
        let mut r = rng(inst ^ 0xdf7);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let x = randn(&[1, 2, h, w], &mut r);
        let (re, im) = match dft2d(&x) {
            Ok(v) => v,
            Err(e) => {
                t.error(e);
                continue;
            }
        };
        for ch in 0..2 {
            for u in 0..h {
                for v in 0..w {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for y in 0..h {
                        for xx in 0..w {
                            let a = -2.0 * PI * (u as f64 * y as f64 / h as f64 + v as f64 * xx as f64 / w as f64);
                            sr += x.at(&[0, ch, y, xx]) * a.cos();
                            si += x.at(&[0, ch, y, xx]) * a.sin();
                        }
                    }
                    t.close(|| format!("instance {inst} re[{u},{v}]"), re.at(&[0, ch, u, v]), sr);
                    t.close(|| format!("instance {inst} im[{u},{v}]"), im.at(&[0, ch, u, v]), si);
                }
            }
        }
        // Inverse of an arbitrary spectrum (real part).
        let sr = randn(&[1, 1, h, w], &mut r);
        let si = randn(&[1, 1, h, w], &mut r);
        let inv = match idft2d(&sr, &si) {
            Ok(v) => v,
            Err(e) => {
                t.error(e);
                continue;
            }
        };
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let a = 2.0 * PI * (u as f64 * y as f64 / h as f64 + v as f64 * xx as f64 / w as f64);
                        acc += sr.at(&[0, 0, u, v]) * a.cos() - si.at(&[0, 0, u, v]) * a.sin();
                    }
                }
                t.close(|| format!("instance {inst} idft[{y},{xx}]"), inv.at(&[0, 0, y, xx]), acc / (h * w) as f64);
            }
        }
    }
    t.finish("dft_idft", n)
}

fn oracle_attention(n: usize) -> CheckOutcome {
    let mut t = Tally::new();
    for inst in 0..n as u64 {
        let mut r = rng(inst ^ 0xa77);
        let heads = r.random_range(1..4usize);
        let dk = r.random_range(1..4usize);
        let dm = heads * dk;
        let (b, tq, tk) = (r.random_range(1..3), r.random_range(1..6), r.random_range(1..6));
        let q = randn(&[b, tq, dm], &mut r);
        let kv = randn(&[b, tk, dm], &mut r);
        let w: Vec<(Tensor<f64>, Tensor<f64>)> = (0..4)
            .map(|_| (randn(&[dm, dm], &mut r).scale(0.7), randn(&[dm], &mut r).scale(0.2)))
            .collect();
        let mut g = Graph::<f64>::new();
        let mut dense = w.iter().map(|(wt, bs)| Dense {
            weight: g.constant(wt.clone()),
            bias: g.constant(bs.clone()),
        });
        let params = AttentionParams {
            q: dense.next().unwrap(),
            k: dense.next().unwrap(),
            v: dense.next().unwrap(),
            o: dense.next().unwrap(),
        };
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let got = match ppd::cross_attend(&mut g, &params, heads, qv, kvv) {
            Ok(a) => g.value(a.output).clone(),
            Err(e) => {
                t.error(e);
                continue;
            }
        };
        let proj = |x: &Tensor<f64>, bi: usize, ti: usize, (wt, bs): &(Tensor<f64>, Tensor<f64>)| -> Vec<f64> {
            (0..dm)
                .map(|o| bs.data()[o] + (0..dm).map(|i| wt.at(&[o, i]) * x.at(&[bi, ti, i])).sum::<f64>())
                .collect()
        };
        for bi in 0..b {
            let ks: Vec<Vec<f64>> = (0..tk).map(|j| proj(&kv, bi, j, &w[1])).collect();
            let vs: Vec<Vec<f64>> = (0..tk).map(|j| proj(&kv, bi, j, &w[2])).collect();
            for i in 0..tq {
                let qi = proj(&q, bi, i, &w[0]);
                let mut concat = vec![0.0; dm];
                for h in 0..heads {
                    let lo = h * dk;
                    let scores: Vec<f64> = (0..tk)
                        .map(|j| (0..dk).map(|d| qi[lo + d] * ks[j][lo + d]).sum::<f64>() / (dk as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for d in 0..dk {
                        concat[lo + d] = (0..tk).map(|j| e[j] / z * vs[j][lo + d]).sum();
                    }
                }
                let (wo, bo) = &w[3];
                for o in 0..dm {
                    let want = q.at(&[bi, i, o]) + bo.data()[o] + (0..dm).map(|c| wo.at(&[o, c]) * concat[c]).sum::<f64>();
                    t.close(|| format!("instance {inst} [{bi},{i},{o}]"), got.at(&[bi, i, o]), want);
                }
            }
        }
    }
    t.finish("attention", n)
}

fn oracle_bce(n: usize) -> CheckOutcome {
    let mut t = Tally::new();
    for inst in 0..n as u64 {
        let mut r = rng(inst ^ 0xbce);
        let len = r.random_range(1..40);
        // Include exact 0/1 probabilities to exercise the clamp.
        let p: Vec<f64> = (0..len)
            .map(|_| match r.random_range(0..6) {
                0 => 0.0,
                1 => 1.0,
                _ => r.random_range(0.0..1.0),
            })
            .collect();
        let y: Vec<f64> = (0..len).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::new(vec![len], p.clone()).expect("len > 0"));
        let got = match g.bce(pv, &Tensor::new(vec![len], y.clone()).expect("len > 0"), head::BCE_EPS) {
            Ok(l) => g.value(l).item(),
            Err(e) => {
                t.error(e);
                continue;
            }
        };
        let eps = head::BCE_EPS;
        let want = p
            .iter()
            .zip(&y)
            .map(|(&pi, &yi)| {
                let c = pi.max(eps).min(1.0 - eps);
                -(yi * c.ln() + (1.0 - yi) * (1.0 - c).ln())
            })
            .sum::<f64>()
            / len as f64;
        t.close(|| format!("instance {inst}"), got, want);
    }
    t.finish("bce", n)
}

fn oracle_metrics(n: usize) -> CheckOutcome {
    let mut t = Tally::new();
    for inst in 0..n as u64 {
        let mut r = rng(inst ^ 0x3e7);
        let classes = r.random_range(2..6usize);
        let len = r.random_range(1..60);
        // Skewed labels so some classes are absent from one or both maps.
        let draw = |r: &mut ChaCha8Rng| -> u8 {
            let v: f64 = r.random();
            ((v * v * classes as f64) as usize).min(classes - 1) as u8
        };
        let truth: Vec<u8> = (0..len).map(|_| draw(&mut r)).collect();
        let pred: Vec<u8> = (0..len)
            .map(|i| if r.random_bool(0.6) { truth[i] } else { draw(&mut r) })
            .collect();
        let names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        let report = match LabelMap::new(1, 1, len, pred.clone())
            .and_then(|p| compute_metrics(&p, &LabelMap::new(1, 1, len, truth.clone())?, &names))
        {
            Ok(rep) => rep,
            Err(e) => {
                t.error(e);
                continue;
            }
        };
        let total = len as f64;
        let correct = pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64;
        t.close(|| format!("instance {inst} PA"), report.pixel_accuracy, correct / total);
        let mut fw = 0.0;
        for c in 0..classes as u8 {
            for p in 0..classes as u8 {
                let count = pred.iter().zip(&truth).filter(|&(&a, &b)| a == p && b == c).count() as u64;
                t.exact(
                    || format!("instance {inst} confusion[{c},{p}]"),
                    report.confusion.get(c as usize, p as usize),
                    count,
                );
            }
            let tp = pred.iter().zip(&truth).filter(|&(&a, &b)| a == c && b == c).count() as f64;
            let fp = pred.iter().zip(&truth).filter(|&(&a, &b)| a == c && b != c).count() as f64;
            let fneg = pred.iter().zip(&truth).filter(|&(&a, &b)| a != c && b == c).count() as f64;
            let safe = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
            let m = &report.per_class[c as usize];
            t.close(|| format!("instance {inst} IoU{c}"), m.iou, safe(tp, tp + fp + fneg));
            t.close(|| format!("instance {inst} precision{c}"), m.precision, safe(tp, tp + fp));
            t.close(|| format!("instance {inst} F1{c}"), m.f1, safe(2.0 * tp, 2.0 * tp + fp + fneg));
            fw += (tp + fneg) / total * safe(tp, tp + fp + fneg);
        }
        t.close(|| format!("instance {inst} FWIoU"), report.fw_iou, fw);
    }
    t.finish("metrics", n)
}

fn oracle_frequency(n: usize) -> CheckOutcome {
    let mut t = Tally::new();
    for inst in 0..n as u64 {
        let mut r = rng(inst ^ 0xf4e);
        let (h, w) = (r.random_range(2..10), r.random_range(2..10));
        let x = randn(&[1, 2, h, w], &mut r);
        let ratio: f64 = r.random_range(0.05..0.95);

        // Constant input: no energy above DC, so the enhancement is the identity.
        let level: f64 = r.random_range(-3.0..3.0);
        let constant = Tensor::full(&[1, 2, h, w], level);
        let mut g = Graph::<f64>::new();
        let cv = g.constant(constant.clone());
        match mgfe::high_pass_enhance(&mut g, cv, &HighPassConfig { cutoff_ratio: ratio }) {
            Ok(v) => t.close(|| format!("instance {inst} constant residual"), g.value(v).max_abs_diff(&constant), 0.0),
            Err(e) => t.error(e),
        }

        let (re, im) = match dft2d(&x) {
            Ok(v) => v,
            Err(e) => {
                t.error(e);
                continue;
            }
        };
        // Mask idempotence on the spectrum is exact.
        let mask = HighPassMask::new(h, w, ratio).expect("ratio in range");
        let (mut r1, mut i1) = (re.data()[..h * w].to_vec(), im.data()[..h * w].to_vec());
        mask.apply(&mut r1, &mut i1);
        let (mut r2, mut i2) = (r1.clone(), i1.clone());
        mask.apply(&mut r2, &mut i2);
        t.exact(|| format!("instance {inst} mask idempotence"), (&r2, &i2), (&r1, &i1));

        // Parseval: sum |x|^2 == sum |X|^2 / (HW), relative 1e-4.
        let ex: f64 = x.data().iter().map(|v| v * v).sum();
        let ef: f64 = re.data().iter().zip(im.data()).map(|(a, b)| a * a + b * b).sum::<f64>() / (h * w) as f64;
        let rel = (ex - ef).abs() / ex.max(f64::MIN_POSITIVE);
        if rel > 1e-4 && t.failure.is_none() {
            t.failure = Some(format!("instance {inst} Parseval relative error {rel:e}"));
        }

        match idft2d(&re, &im) {
            Ok(back) => t.close(|| format!("instance {inst} round trip"), back.max_abs_diff(&x), 0.0),
            Err(e) => t.error(e),
        }
    }
    t.finish("frequency_invariants", n)
}

fn oracle_residuals(n: usize) -> CheckOutcome {
    let mut t = Tally::new();
    let instances = n;
    for inst in 0..n as u64 {
        let mut r = rng(inst ^ 0x7e5);
        let c = 2 * r.random_range(1..4usize);
        let (b, side) = (r.random_range(1..3), r.random_range(3..6usize));

        // Zero output projection makes the topological branch an identity.
        let mut s = ParamStore::<f64>::new();
        mgfe::init_topo(&mut s, c, &mut r);
        s.insert(format!("{}.weight", mgfe::TOPO_EXPAND), Tensor::zeros(&[c, c / 2, 1, 1]));
        s.insert(format!("{}.bias", mgfe::TOPO_EXPAND), Tensor::zeros(&[c]));
        let fc = randn(&[b, c, side, side], &mut r);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let fv = g.constant(fc.clone());
        let cfg = TopoConfig { k: 2, dilation: 1 };
        match mgfe::topo_enhance(&mut g, &p, fv, &cfg) {
            Ok(v) => t.exact(|| format!("instance {inst} topo identity"), g.value(v).data(), fc.data()),
            Err(e) => t.error(e),
        }

        // A disabled decoder stage passes its query through unchanged.
        let stage = Stage::ALL[inst as usize % 4];
        let dcfg = DecoderConfig {
            channels: c,
            text_dim: 3,
            model_dim: 4,
            heads: 2,
        };
        let switches = DecoderSwitches {
            disabled_stages: vec![stage],
            skip_blend_merge: false,
        };
        let mut s = ParamStore::<f64>::new();
        dcfg.init(&mut s, &switches, &mut r);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let grid = |g: &mut Graph<f64>, r: &mut ChaCha8Rng, k: usize| g.constant(randn(&[b, c, side * k, side * k], r));
        let fc = grid(&mut g, &mut r, 1);
        let fm = grid(&mut g, &mut r, 2);
        let ff = grid(&mut g, &mut r, 4);
        let bundle = mgfe::FeatureBundle {
            fc,
            fm,
            ff,
            fh: ff,
            fv: fm,
            ft: fc,
            fblend: fm,
        };
        let text = g.constant(randn(&[3, 3], &mut r));
        match ppd::decode(&mut g, &p, &dcfg, &bundle, text, &switches) {
            Ok(d) => {
                let i = stage.index();
                let before = if i == 0 {
                    let tok = Dense::bind(&p, "ppd.tok").expect("bound");
                    ppd::tokenize(&mut g, &tok, ff).map(|s| g.value(s.tokens).clone())
                } else {
                    Ok(g.value(d.stage_outputs[i - 1]).clone())
                };
                match before {
                    Ok(q) => t.exact(
                        || format!("instance {inst} stage {stage} identity"),
                        g.value(d.stage_outputs[i]).data(),
                        q.data(),
                    ),
                    Err(e) => t.error(e),
                }
                t.exact(|| format!("instance {inst} stage {stage} attention"), d.attention[i].is_none(), true);
            }
            Err(e) => t.error(e),
        }
    }
    // Each disabled stage removes parameters.
    let base = tiny_model_config();
    match Model::<f64>::layout(&base) {
        Ok(full) => {
            for stage in Stage::ALL {
                let mut cfg = base.clone();
                cfg.ablation.decoder.disabled_stages = vec![stage];
                match Model::<f64>::layout(&cfg) {
                    Ok(l) => t.exact(
                        || format!("stage {stage} parameter count below full"),
                        l.count() < full.count(),
                        true,
                    ),
                    Err(e) => t.error(e),
                }
            }
        }
        Err(e) => t.error(e),
    }
    t.finish("residual_contracts", instances)
}

type OracleCase = (&'static str, fn(usize) -> CheckOutcome);

pub const ORACLE_CASES: &[OracleCase] = &[
    ("pairwise_sq_dist", oracle_pairwise),
    ("knn_select", oracle_knn),
    ("dft_idft", oracle_dft),
    ("attention", oracle_attention),
    ("bce", oracle_bce),
    ("metrics", oracle_metrics),
    ("frequency_invariants", oracle_frequency),
    ("residual_contracts", oracle_residuals),
];

/// Runs `suite`, calling `report` after each check completes.
pub fn run(suite: Suite, seeds: usize, instances: usize, report: &mut dyn FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Grads | Suite::All) {
        for case in GRAD_CASES {
            let o = run_grad_case(case, seeds);
            report(&o);
            out.push(o);
        }
    }
    if matches!(suite, Suite::Oracles | Suite::All) {
        for (_, f) in ORACLE_CASES {
            let o = f(instances);
            report(&o);
            out.push(o);
        }
    }
    out
}
