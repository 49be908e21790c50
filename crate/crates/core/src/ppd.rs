//! Progressive prompt decoder.
//!
//! Four residual multi-head cross-attention stages run in sequence, each
//! querying the next feature with the previous output:
//!
//! ```text
//! A1 = attend(Q = tok(Fh), KV = tok(Fv))      stage qh
//! A2 = attend(Q = A1,      KV = tok(Ft))      stage qv
//! A3 = attend(Q = A2,      KV = tok(Ftext))   stage qt
//! A4 = attend(Q = A3,      KV = tok(Fblend))  stage qT
//! merged = detok(A4) + upsample(Fblend)
//! ```
//!
//! A disabled stage carries its query through unchanged and owns no parameters.
//! No positional encodings are used.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mgfe::FeatureBundle;
use crate::params::{dense_weight, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "qh")]
    Qh,
    #[serde(rename = "qv")]
    Qv,
    #[serde(rename = "qt")]
    Qt,
    #[serde(rename = "qT")]
    QT,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Qh, Stage::Qv, Stage::Qt, Stage::QT];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Qh => "qh",
            Stage::Qv => "qv",
            Stage::Qt => "qt",
            Stage::QT => "qT",
        }
    }

    fn prefix(self) -> String {
        format!("ppd.{}", self.name())
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s || st.name().replace('q', "q_") == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder stage '{s}'")))
    }
}

/// Which parts of the decoder are switched off.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSwitches {
    pub disabled_stages: Vec<Stage>,
    /// Drops the additive merge with the upsampled blended feature.
    pub skip_blend_merge: bool,
}

impl DecoderSwitches {
    /// Parses names from `{qh, qv, qt, qT, blend}`.
    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut sw = Self::default();
        for n in names {
            match n.as_ref() {
                "blend" => sw.skip_blend_merge = true,
                other => {
                    let st: Stage = other.parse()?;
                    if !sw.disabled_stages.contains(&st) {
                        sw.disabled_stages.push(st);
                    }
                }
            }
        }
        sw.disabled_stages.sort();
        Ok(sw)
    }

    pub fn enabled(&self, stage: Stage) -> bool {
        !self.disabled_stages.contains(&stage)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channels: usize,
    pub text_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    fn kv_width(&self, stage: Stage) -> usize {
        if stage == Stage::Qt {
            self.text_dim
        } else {
            self.channels
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, switches: &DecoderSwitches, rng: &mut ChaCha8Rng) {
        let dm = self.model_dim;
        init_dense(store, "ppd.tok", dm, self.channels, rng);
        init_dense(store, "ppd.detok", self.channels, dm, rng);
        for stage in Stage::ALL {
            if !switches.enabled(stage) {
                continue;
            }
            let pre = stage.prefix();
            init_dense(store, &format!("{pre}.kv_tok"), dm, self.kv_width(stage), rng);
            for proj in ["q", "k", "v", "o"] {
                init_dense(store, &format!("{pre}.{proj}"), dm, dm, rng);
            }
        }
    }
}

fn init_dense<T: Scalar>(store: &mut ParamStore<T>, name: &str, dout: usize, din: usize, rng: &mut ChaCha8Rng) {
    store.insert(format!("{name}.weight"), dense_weight(dout, din, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]));
}

/// Weight and bias nodes of one linear map.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    pub fn bind(p: &Bound, name: &str) -> Result<Self> {
        Ok(Self {
            weight: p.var(&format!("{name}.weight"))?,
            bias: p.var(&format!("{name}.bias"))?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, Some(self.bias))
    }
}

/// Where a token sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Grid { channels: usize, h: usize, w: usize },
    Text { classes: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    /// `[B, T, Dm]`
    pub tokens: Var,
    pub origin: Origin,
}

/// Row-major spatial flattening of `[B,C,H,W]` followed by a `C -> Dm` projection.
pub fn tokenize<T: Scalar>(g: &mut Graph<T>, proj: &Dense, feature: Var) -> Result<TokenSeq> {
    let [b, c, h, w] = g.value(feature).dims4("tokenize")?;
    let nhwc = g.permute(feature, &[0, 2, 3, 1])?;
    let flat = g.reshape(nhwc, &[b, h * w, c])?;
    let tokens = proj.apply(g, flat)?;
    Ok(TokenSeq {
        tokens,
        origin: Origin::Grid { channels: c, h, w },
    })
}

/// Class embeddings `[N+1, Dtext]`, shared across the batch, projected to `Dm`.
pub fn tokenize_text<T: Scalar>(g: &mut Graph<T>, proj: &Dense, text: Var, batch: usize) -> Result<TokenSeq> {
    let &[classes, _] = g.shape(text) else {
        return Err(Error::shape("tokenize_text", "text embeddings must be [N+1, D]"));
    };
    let shared = g.broadcast_batch(text, batch)?;
    let tokens = proj.apply(g, shared)?;
    Ok(TokenSeq {
        tokens,
        origin: Origin::Text { classes },
    })
}

/// Projects `Dm -> C` and restores the `[B,C,H,W]` grid of `seq.origin`.
pub fn detokenize<T: Scalar>(g: &mut Graph<T>, proj: &Dense, seq: &TokenSeq) -> Result<Var> {
    let Origin::Grid { channels, h, w } = seq.origin else {
        return Err(Error::shape("detokenize", "text tokens have no spatial origin"));
    };
    let shape = g.shape(seq.tokens).to_vec();
    if shape.len() != 3 || shape[1] != h * w {
        return Err(Error::shape(
            "detokenize",
            format!("{shape:?} does not match an origin grid of {h}x{w}"),
        ));
    }
    let projected = proj.apply(g, seq.tokens)?;
    if *g.shape(projected).last().unwrap() != channels {
        return Err(Error::shape(
            "detokenize",
            format!("projection yields {:?}, origin has {channels} channels", g.shape(projected)),
        ));
    }
    let grid = g.reshape(projected, &[shape[0], h, w, channels])?;
    g.permute(grid, &[0, 3, 1, 2])
}

/// Projections of one attention stage.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
}

impl AttentionParams {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            q: Dense::bind(p, &format!("{prefix}.q"))?,
            k: Dense::bind(p, &format!("{prefix}.k"))?,
            v: Dense::bind(p, &format!("{prefix}.v"))?,
            o: Dense::bind(p, &format!("{prefix}.o"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[B, Tq, Dm]`
    pub output: Var,
    /// `[B*h, Tq, Tk]` softmax weights
    pub weights: Var,
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let &[b, t, dm] = g.shape(x) else {
        return Err(Error::shape("cross_attend", "tokens must be [B,T,D]"));
    };
    let dk = dm / heads;
    let r = g.reshape(x, &[b, t, heads, dk])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[b * heads, t, dk])
}

/// `q + O(concat_h softmax(Q_h K_h^T / sqrt(d_k)) V_h)`.
pub fn cross_attend<T: Scalar>(
    g: &mut Graph<T>,
    params: &AttentionParams,
    heads: usize,
    q: Var,
    kv: Var,
) -> Result<Attended> {
    let (&[b, tq, dm], &[bk, _, dmk]) = (g.shape(q), g.shape(kv)) else {
        return Err(Error::shape(
            "cross_attend",
            format!("expected [B,T,D] tokens, got {:?} and {:?}", g.shape(q), g.shape(kv)),
        ));
    };
    if b != bk || dm != dmk || heads == 0 || dm % heads != 0 {
        return Err(Error::shape(
            "cross_attend",
            format!("queries {:?}, keys {:?}, {heads} heads", g.shape(q), g.shape(kv)),
        ));
    }
    let dk = dm / heads;
    let qp = params.q.apply(g, q)?;
    let kp = params.k.apply(g, kv)?;
    let vp = params.v.apply(g, kv)?;
    let qh = split_heads(g, qp, heads)?;
    let kh = split_heads(g, kp, heads)?;
    let vh = split_heads(g, vp, heads)?;
    let scores = g.matmul(qh, kh, true)?;
    let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = g.softmax(scaled)?;
    let mixed = g.matmul(weights, vh, false)?;
    let r = g.reshape(mixed, &[b, heads, tq, dk])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    let concat = g.reshape(p, &[b, tq, dm])?;
    let out = params.o.apply(g, concat)?;
    let output = g.add(out, q)?;
    Ok(Attended { output, weights })
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// `[B, C, 2H, 2W]` at the fine-grain resolution.
    pub merged: Var,
    /// Output tokens after each stage (a disabled stage repeats its query).
    pub stage_outputs: [Var; 4],
    /// Attention weights of each enabled stage.
    pub attention: [Option<Var>; 4],
}

pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &DecoderConfig,
    bundle: &FeatureBundle,
    text: Var,
    switches: &DecoderSwitches,
) -> Result<Decoded> {
    let batch = g.shape(bundle.fh)[0];
    let query_tok = Dense::bind(p, "ppd.tok")?;
    let start = tokenize(g, &query_tok, bundle.fh)?;
    let mut current = start.tokens;
    let mut stage_outputs = [current; 4];
    let mut attention = [None; 4];
    for stage in Stage::ALL {
        if switches.enabled(stage) {
            let pre = stage.prefix();
            let kv_proj = Dense::bind(p, &format!("{pre}.kv_tok"))?;
            let kv = match stage {
                Stage::Qh => tokenize(g, &kv_proj, bundle.fv)?,
                Stage::Qv => tokenize(g, &kv_proj, bundle.ft)?,
                Stage::Qt => tokenize_text(g, &kv_proj, text, batch)?,
                Stage::QT => tokenize(g, &kv_proj, bundle.fblend)?,
            };
            let params = AttentionParams::bind(p, &pre)?;
            let att = cross_attend(g, &params, cfg.heads, current, kv.tokens)?;
            current = att.output;
            attention[stage.index()] = Some(att.weights);
        }
        stage_outputs[stage.index()] = current;
    }
    let detok = Dense::bind(p, "ppd.detok")?;
    let grid = detokenize(
        g,
        &detok,
        &TokenSeq {
            tokens: current,
            origin: start.origin,
        },
    )?;
    let merged = if switches.skip_blend_merge {
        grid
    } else {
        let up = g.upsample2(bundle.fblend)?;
        g.add(grid, up)?
    };
    Ok(Decoded {
        merged,
        stage_outputs,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dense_leaf(g: &mut Graph<f64>, w: Tensor<f64>) -> Dense {
        let dout = w.shape()[0];
        Dense {
            weight: g.param(w),
            bias: g.param(Tensor::zeros(&[dout])),
        }
    }

    fn eye(n: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn stage_names_parse() {
        assert_eq!("qT".parse::<Stage>().unwrap(), Stage::QT);
        assert_eq!("q_h".parse::<Stage>().unwrap(), Stage::Qh);
        assert!("qx".parse::<Stage>().is_err());
        let sw = DecoderSwitches::parse(&["qt", "blend", "qt"]).unwrap();
        assert_eq!(sw.disabled_stages, vec![Stage::Qt]);
        assert!(sw.skip_blend_merge);
        assert!(DecoderSwitches::parse(&["nope"]).is_err());
    }

    #[test]
    fn tokens_are_row_major() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let proj = dense_leaf(&mut g, eye(2));
        let seq = tokenize(&mut g, &proj, x).unwrap();
        // token (r,c) carries channels [x[0,r,c], x[1,r,c]]
        assert_eq!(g.value(seq.tokens).data(), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
        let back = detokenize(&mut g, &proj, &seq).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn detokenize_rejects_origin_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let proj = dense_leaf(&mut g, eye(2));
        let seq = tokenize(&mut g, &proj, x).unwrap();
        let wrong = TokenSeq {
            tokens: seq.tokens,
            origin: Origin::Grid { channels: 2, h: 3, w: 3 },
        };
        assert!(detokenize(&mut g, &proj, &wrong).is_err());
    }

    fn random_params(g: &mut Graph<f64>, dm: usize, seed: u64) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = |g: &mut Graph<f64>| Dense {
            weight: g.param(Tensor::randn(&[dm, dm], 0.5, &mut rng)),
            bias: g.param(Tensor::randn(&[dm], 0.1, &mut rng)),
        };
        AttentionParams {
            q: d(g),
            k: d(g),
            v: d(g),
            o: d(g),
        }
    }

    #[test]
    fn singleton_key_broadcasts_value() {
        let mut g = Graph::<f64>::new();
        let dm = 4;
        let params = random_params(&mut g, dm, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = g.constant(Tensor::randn(&[1, 3, dm], 1.0, &mut rng));
        let kv = g.constant(Tensor::randn(&[1, 1, dm], 1.0, &mut rng));
        let out = cross_attend(&mut g, &params, 2, q, kv).unwrap();
        let v = params.v.apply(&mut g, kv).unwrap();
        let ov = params.o.apply(&mut g, v).unwrap();
        let ov = g.value(ov).data().to_vec();
        let (o, qv) = (g.value(out.output), g.value(q));
        for t in 0..3 {
            for (d, &expect) in ov.iter().enumerate() {
                assert!((o.data()[t * dm + d] - (expect + qv.data()[t * dm + d])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_projection_attends_uniformly() {
        let mut g = Graph::<f64>::new();
        let dm = 4;
        let mut params = random_params(&mut g, dm, 3);
        params.q = Dense {
            weight: g.param(Tensor::zeros(&[dm, dm])),
            bias: g.param(Tensor::zeros(&[dm])),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = g.constant(Tensor::randn(&[1, 2, dm], 1.0, &mut rng));
        let kv = g.constant(Tensor::randn(&[1, 5, dm], 1.0, &mut rng));
        let out = cross_attend(&mut g, &params, 2, q, kv).unwrap();
        assert!(g.value(out.weights).data().iter().all(|&w| (w - 0.2).abs() < 1e-12));
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut g = Graph::<f64>::new();
        let params = random_params(&mut g, 4, 1);
        let q = g.constant(Tensor::zeros(&[1, 2, 4]));
        let kv = g.constant(Tensor::zeros(&[1, 2, 6]));
        assert!(cross_attend(&mut g, &params, 2, q, kv).is_err());
        let kv = g.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(cross_attend(&mut g, &params, 3, q, kv).is_err());
    }
}
