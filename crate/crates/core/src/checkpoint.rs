//! Binary checkpoint: little-endian, `MNCH` magic, JSON config snapshot and a
//! name-sorted table of f32 tensors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MNCH";
pub const VERSION: u32 = 1;
/// Table entry holding the frozen class embeddings.
pub const TEXT_TENSOR: &str = "text.embeddings";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("file truncated while reading {}", what())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        let mut tensors: BTreeMap<String, Tensor<f32>> = model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        tensors.insert(TEXT_TENSOR.to_string(), model.text_embeddings().clone());
        Self {
            config: model.config().clone(),
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut params = ParamStore::new();
        let mut text = None;
        for (name, t) in &self.tensors {
            if name == TEXT_TENSOR {
                text = Some(t.clone());
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        let text = text.ok_or_else(|| Error::Format(format!("missing tensor '{TEXT_TENSOR}'")))?;
        Model::from_parts(self.config.clone(), params, text)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = serde_json::to_string(&self.config).expect("config serializes");
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. Truncation inside the tensor table names the
    /// tensor expected at that position, derived from the config snapshot.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, &|| "magic bytes".into())?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"MNCH\"")));
        }
        let version = r.u32(&|| "version".into())?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32(&|| "config length".into())? as usize;
        let raw = r.take(len, &|| "config snapshot".into())?;
        let text = std::str::from_utf8(raw).map_err(|e| Error::Format(format!("config is not UTF-8: {e}")))?;
        let config: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
        let expected = expected_names(&config)?;
        let count = r.u32(&|| "tensor count".into())? as usize;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let label = || match expected.get(i) {
                Some(n) => format!("tensor '{n}'"),
                None => format!("tensor #{i}"),
            };
            let nlen = r.u16(&label)? as usize;
            let name = std::str::from_utf8(r.take(nlen, &label)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let label = || format!("tensor '{name}'");
            let rank = r.u8(&label)? as usize;
            let shape = (0..rank)
                .map(|_| r.u32(&label).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, &label)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("tensor '{name}' appears twice")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the tensor table",
                bytes.len() - r.pos
            )));
        }
        if let Some(missing) = expected.iter().find(|n| !tensors.contains_key(*n)) {
            return Err(Error::Format(format!("missing tensor '{missing}'")));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Sorted table names a checkpoint of `config` must contain.
fn expected_names(config: &ModelConfig) -> Result<Vec<String>> {
    let layout = Model::<f32>::layout(config).map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
    let mut names: Vec<String> = layout.names().map(str::to_string).collect();
    names.push(TEXT_TENSOR.to_string());
    names.sort();
    Ok(names)
}
