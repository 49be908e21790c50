//! The full segmentation network: encoder, multi-grained features, decoder and
//! text-conditioned head, with ablation switches.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{ImageEncoderConfig, PromptSet, TextConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::head;
use crate::mgfe::{self, FeatureBundle, HighPassConfig, TopoConfig};
use crate::params::{Bound, ParamStore};
use crate::ppd::{self, Decoded, DecoderConfig, DecoderSwitches};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Feed the raw grains `{Fc, Fm, Ff}` to the decoder.
    pub disable_mgfe: bool,
    /// Feed the blended feature straight to the head.
    pub disable_ppd: bool,
    pub disable_hf: bool,
    pub disable_topo: bool,
    pub decoder: DecoderSwitches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Index 0 is background.
    pub class_names: Vec<String>,
    pub channels: usize,
    pub downsample: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub text: TextConfig,
    pub high_pass: HighPassConfig,
    pub topo: TopoConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn encoder(&self) -> ImageEncoderConfig {
        ImageEncoderConfig {
            in_channels: 3,
            channels: self.channels,
            downsample: self.downsample,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            channels: self.channels,
            text_dim: self.text.dim,
            model_dim: self.model_dim,
            heads: self.heads,
        }
    }

    fn uses_conv_branch(&self) -> bool {
        !self.ablation.disable_mgfe
    }

    fn uses_hf(&self) -> bool {
        !self.ablation.disable_mgfe && !self.ablation.disable_hf
    }

    fn uses_topo(&self) -> bool {
        !self.ablation.disable_mgfe && !self.ablation.disable_topo
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Config("need background plus at least one class".into()));
        }
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "channel width {} must be even and at least 2",
                self.channels
            )));
        }
        self.encoder().validate()?;
        self.decoder().validate()?;
        self.high_pass.validate()?;
        self.topo.validate()?;
        Ok(())
    }

    /// Smallest patch size accepted, given the coarse grain must hold
    /// more than `k * dilation` positions.
    pub fn check_patch_size(&self, size: usize) -> Result<()> {
        let unit = 2 * self.downsample;
        if size == 0 || !size.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "patch size {size} is not a multiple of {unit}"
            )));
        }
        let coarse = size / unit;
        if self.uses_topo() && coarse * coarse <= self.topo.k * self.topo.dilation {
            return Err(Error::Config(format!(
                "patch size {size} leaves {} coarse positions, need more than k*dilation = {}",
                coarse * coarse,
                self.topo.k * self.topo.dilation
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    text: Tensor<T>,
}

/// Every node of interest from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub features: FeatureBundle,
    pub decoded: Option<Decoded>,
    /// Logits at the input resolution `[B, N+1, S, S]`.
    pub logits: Var,
    pub probabilities: Var,
}

/// Intermediate map selectable for feature dumps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureStage {
    HighFrequency,
    Conv,
    Topo,
    Blend,
    /// Output of decoder stage 1..=4 (`qh`, `qv`, `qt`, `qT`).
    Attention(usize),
}

impl std::str::FromStr for FeatureStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hf" => Self::HighFrequency,
            "conv" => Self::Conv,
            "topo" => Self::Topo,
            "blend" => Self::Blend,
            "a1" => Self::Attention(1),
            "a2" => Self::Attention(2),
            "a3" => Self::Attention(3),
            "a4" => Self::Attention(4),
            other => {
                return Err(Error::Config(format!(
                    "unknown feature stage '{other}', expected hf|conv|topo|blend|a1|a2|a3|a4"
                )))
            }
        })
    }
}

fn component_rng(seed: u64, component: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ component)
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters from `seed`; text embeddings from `prompts`, selected
    /// by the configured class names.
    pub fn new(config: ModelConfig, prompts: &PromptSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let prompts = prompts.select(&config.class_names)?;
        let text = TextEncoder::new(config.text)?.encode(&prompts)?;
        let c = config.channels;
        let mut params = ParamStore::new();
        config.encoder().init(&mut params, &mut component_rng(seed, 1));
        mgfe::init_grains(&mut params, c, &mut component_rng(seed, 2));
        if config.uses_conv_branch() {
            mgfe::init_conv_branch(&mut params, c, &mut component_rng(seed, 3));
        }
        if config.uses_topo() {
            mgfe::init_topo(&mut params, c, &mut component_rng(seed, 4));
        }
        mgfe::init_fpn(&mut params, c, &mut component_rng(seed, 5));
        if !config.ablation.disable_ppd {
            config
                .decoder()
                .init(&mut params, &config.ablation.decoder, &mut component_rng(seed, 6));
        }
        head::init(&mut params, c, config.text.dim, &mut component_rng(seed, 7));
        Ok(Self {
            config,
            params,
            text,
        })
    }

    /// Reassembles a model from stored parameters and frozen text embeddings.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>, text: Tensor<T>) -> Result<Self> {
        config.validate()?;
        if text.shape() != [config.num_classes(), config.text.dim] {
            return Err(Error::Format(format!(
                "text embeddings {:?} do not match {} classes of width {}",
                text.shape(),
                config.num_classes(),
                config.text.dim
            )));
        }
        let reference = Self::layout(&config)?;
        for (name, t) in reference.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Format(format!("missing tensor '{name}'")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::Format(format!("unexpected tensor '{extra}'")));
        }
        Ok(Self {
            config,
            params,
            text,
        })
    }

    /// Parameter names and shapes for `config` (values are throwaway).
    pub fn layout(config: &ModelConfig) -> Result<ParamStore<T>> {
        let prompts = PromptSet::new(
            config
                .class_names
                .iter()
                .map(|n| crate::encoders::ClassPrompt {
                    name: n.clone(),
                    sentences: vec!["x".into(); crate::encoders::SENTENCES_PER_CLASS],
                })
                .collect(),
        )?;
        Ok(Model::<T>::new(config.clone(), &prompts, 0)?.params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Frozen class embeddings `[N+1, Dtext]`.
    pub fn text_embeddings(&self) -> &Tensor<T> {
        &self.text
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            text: self.text.cast(),
        }
    }

    /// Records the forward pass of `images` (`[B,3,S,S]`) on `g`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<ForwardPass> {
        let cfg = &self.config;
        let [_, _, size, size_w] = g.value(images).dims4("forward")?;
        if size != size_w {
            return Err(Error::shape("forward", format!("patches must be square, got {size}x{size_w}")));
        }
        cfg.check_patch_size(size)?;
        let fm = cfg.encoder().encode(g, p, images)?;
        let (fc, ff) = mgfe::derive_grains(g, p, fm)?;
        let fh = if cfg.uses_hf() {
            mgfe::high_pass_enhance(g, ff, &cfg.high_pass)?
        } else {
            ff
        };
        let fv = if cfg.uses_conv_branch() {
            mgfe::conv_branch(g, p, fm)?
        } else {
            fm
        };
        let ft = if cfg.uses_topo() {
            mgfe::topo_enhance(g, p, fc, &cfg.topo)?
        } else {
            fc
        };
        let fblend = mgfe::fpn_blend(g, p, fc, fm, ff)?;
        let features = FeatureBundle {
            fc,
            fm,
            ff,
            fh,
            fv,
            ft,
            fblend,
        };
        let text = g.constant(self.text.clone());
        let (merged, decoded) = if cfg.ablation.disable_ppd {
            (fblend, None)
        } else {
            let d = ppd::decode(g, p, &cfg.decoder(), &features, text, &cfg.ablation.decoder)?;
            (d.merged, Some(d))
        };
        let small = head::text_head(g, p, merged, text, cfg.num_classes())?;
        let logits = head::upsample_to_input(g, small, size)?;
        let probabilities = g.sigmoid(logits)?;
        Ok(ForwardPass {
            features,
            decoded,
            logits,
            probabilities,
        })
    }

    /// Mean BCE of one batch and the gradient of every parameter.
    pub fn loss_and_grads(
        &self,
        images: &Tensor<T>,
        masks: &Tensor<T>,
    ) -> Result<(T, BTreeMap<String, Tensor<T>>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(images.clone());
        let fwd = self.forward(&mut g, &p, x)?;
        let loss = head::bce_loss(&mut g, fwd.probabilities, masks)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), p.collect(&g, &grads)))
    }

    pub fn loss(&self, images: &Tensor<T>, masks: &Tensor<T>) -> Result<T> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(images.clone());
        let fwd = self.forward(&mut g, &p, x)?;
        let loss = head::bce_loss(&mut g, fwd.probabilities, masks)?;
        Ok(g.value(loss).item())
    }

    /// Per-class probabilities `[B, N+1, S, S]`.
    pub fn predict_probabilities(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(images.clone());
        let fwd = self.forward(&mut g, &p, x)?;
        Ok(g.value(fwd.probabilities).clone())
    }

    /// The selected intermediate map for `images`, as `[B, C, H, W]`.
    /// Decoder stage outputs are laid back onto the fine-grain grid.
    pub fn feature_map(&self, images: &Tensor<T>, stage: FeatureStage) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(images.clone());
        let fwd = self.forward(&mut g, &p, x)?;
        let f = &fwd.features;
        let var = match stage {
            FeatureStage::HighFrequency => f.fh,
            FeatureStage::Conv => f.fv,
            FeatureStage::Topo => f.ft,
            FeatureStage::Blend => f.fblend,
            FeatureStage::Attention(i) => {
                let decoded = fwd.decoded.as_ref().ok_or_else(|| {
                    Error::Config("this checkpoint was trained without the decoder".into())
                })?;
                let tokens = decoded.stage_outputs[i - 1];
                let [b, _, h, w] = g.value(f.fh).dims4("feature_map")?;
                let dm = g.shape(tokens)[2];
                let grid = g.reshape(tokens, &[b, h, w, dm])?;
                g.permute(grid, &[0, 3, 1, 2])?
            }
        };
        Ok(g.value(var).clone())
    }
}
