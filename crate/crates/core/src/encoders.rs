//! Deterministic stand-ins for a pre-trained vision-language encoder pair.
//!
//! The text side hashes tokens into a frozen, seeded embedding table and
//! mean-pools them. The image side is a small trainable conv stack whose output
//! grid is the input grid divided by the downsample factor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::Conv2dArgs;
use crate::params::{conv_kernel, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SENTENCES_PER_CLASS: usize = 3;
pub const DEFAULT_PROMPTS: &str = include_str!("../assets/prompts.toml");

/// Class names (index 0 is background) with exactly three describing
/// sentences each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(rename = "class")]
    classes: Vec<ClassPrompt>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub name: String,
    pub sentences: Vec<String>,
}

impl PromptSet {
    pub fn new(classes: Vec<ClassPrompt>) -> Result<Self> {
        let set = Self { classes };
        set.validate()?;
        Ok(set)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let set: Self = toml::from_str(text).map_err(|e| Error::Prompt(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Background plus the five built-in nucleus types.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_PROMPTS).expect("built-in prompt file is valid")
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Prompt(
                "need background plus at least one class".into(),
            ));
        }
        for (i, class) in self.classes.iter().enumerate() {
            if class.name.trim().is_empty() {
                return Err(Error::Prompt(format!("class #{i} has an empty name")));
            }
            if self.classes[..i].iter().any(|c| c.name == class.name) {
                return Err(Error::Prompt(format!("class '{}' listed twice", class.name)));
            }
            if class.sentences.len() != SENTENCES_PER_CLASS {
                return Err(Error::Prompt(format!(
                    "class '{}' has {} sentences, expected {SENTENCES_PER_CLASS}",
                    class.name,
                    class.sentences.len()
                )));
            }
            if let Some(j) = class.sentences.iter().position(|s| tokenize(s, usize::MAX).is_empty()) {
                return Err(Error::Prompt(format!(
                    "class '{}' sentence {} has no tokens",
                    class.name,
                    j + 1
                )));
            }
        }
        Ok(())
    }

    /// Sub-set in the order of `names`.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let classes = names
            .iter()
            .map(|n| {
                self.classes
                    .iter()
                    .find(|c| &c.name == n)
                    .cloned()
                    .ok_or_else(|| Error::Prompt(format!("no prompt for class '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn classes(&self) -> &[ClassPrompt] {
        &self.classes
    }
}

/// Lowercased alphanumeric runs, at most `limit` of them.
pub fn tokenize(sentence: &str, limit: usize) -> Vec<String> {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(limit)
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub dim: usize,
    pub vocab: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            vocab: 4096,
            max_tokens: 77,
            seed: 0x7e47,
        }
    }
}

/// Frozen hashed-bucket text encoder. The table is never trained.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextConfig,
    table: Tensor<f32>,
}

impl TextEncoder {
    pub fn new(config: TextConfig) -> Result<Self> {
        if config.dim == 0 || config.vocab == 0 || config.max_tokens == 0 {
            return Err(Error::Config("text encoder sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = Tensor::randn(&[config.vocab, config.dim], 1.0, &mut rng);
        Ok(Self { config, table })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn table(&self) -> &Tensor<f32> {
        &self.table
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.config.vocab as u64) as usize
    }

    fn row(&self, bucket: usize) -> &[f32] {
        &self.table.data()[bucket * self.config.dim..][..self.config.dim]
    }

    /// Mean of the table rows of the (truncated) tokens.
    pub fn encode_sentence(&self, sentence: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(sentence, self.config.max_tokens);
        if tokens.is_empty() {
            return Err(Error::Prompt(format!("sentence '{sentence}' has no tokens")));
        }
        let mut acc = vec![0.0f64; self.config.dim];
        for t in &tokens {
            for (a, &v) in acc.iter_mut().zip(self.row(self.bucket(t))) {
                *a += v as f64;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// Class embeddings `[N+1, dim]`: mean over each class's sentence vectors.
    pub fn encode<T: Scalar>(&self, prompts: &PromptSet) -> Result<Tensor<T>> {
        let dim = self.config.dim;
        let mut data = Vec::with_capacity(prompts.len() * dim);
        for class in prompts.classes() {
            let mut acc = vec![0.0f64; dim];
            for s in &class.sentences {
                for (a, v) in acc.iter_mut().zip(self.encode_sentence(s)?) {
                    *a += v;
                }
            }
            let n = class.sentences.len() as f64;
            data.extend(acc.into_iter().map(|a| T::lit(a / n)));
        }
        Tensor::new(vec![prompts.len(), dim], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub downsample: usize,
}

impl ImageEncoderConfig {
    fn stride2_layers(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let n2 = self.stride2_layers();
        (0..=n2)
            .map(|i| {
                let cin = if i == 0 { self.in_channels } else { self.channels };
                let stride = if i < n2 { 2 } else { 1 };
                (format!("encoder.conv{}", i + 1), cin, self.channels, stride)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample factor {} is not a power of two",
                self.downsample
            )));
        }
        if self.channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        for (name, cin, cout, _) in self.layers() {
            store.insert(format!("{name}.weight"), conv_kernel(cout, cin, 3, rng));
            store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
    }

    /// `[B,3,S,S]` image batch to the middle-grain feature `[B,C,S/s,S/s]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Var> {
        let [_, c, h, w] = g.value(images).dims4("encode_image")?;
        if c != self.in_channels {
            return Err(Error::shape(
                "encode_image",
                format!("expected {} input channels, got {c}", self.in_channels),
            ));
        }
        let unit = 2 * self.downsample;
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::shape(
                "encode_image",
                format!("extents {h}x{w} are not divisible by {unit}"),
            ));
        }
        let layers = self.layers();
        let mut x = images;
        for (i, (name, _, _, stride)) in layers.iter().enumerate() {
            x = g.conv2d(
                x,
                p.var(&format!("{name}.weight"))?,
                Some(p.var(&format!("{name}.bias"))?),
                Conv2dArgs {
                    stride: *stride,
                    padding: 1,
                },
            )?;
            if i + 1 < layers.len() {
                x = g.silu(x)?;
            }
        }
        Ok(x)
    }

    pub fn final_bias_name(&self) -> String {
        format!("encoder.conv{}.bias", self.stride2_layers() + 1)
    }
}
