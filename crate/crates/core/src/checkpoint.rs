//! Self-describing checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | bytes        | content                                             |
//! |--------------|-----------------------------------------------------|
//! | 8            | magic `AGTCKPT\0`                                   |
//! | 4            | format version (`u32`, currently 1)                 |
//! | 8            | header length `H` in bytes (`u64`)                  |
//! | H            | UTF-8 JSON header                                   |
//! | 8 × N        | payload: `N` `f64` values                           |
//!
//! The header holds the model config, one entry per tensor
//! (`name`, `section`, `shape`, `offset` in f64 elements from the payload
//! start) and a free-form `extra` object. Model parameters live in section
//! `param`, batch-norm running statistics in `buffer`; the trainer appends
//! optimizer moments in sections `adam_m` / `adam_v` and its step counter in
//! `extra`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ActivityGraphTransformer, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AGTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const PARAM_SECTION: &str = "param";
pub const BUFFER_SECTION: &str = "buffer";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub section: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    section: String,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::parse(None, msg)
}

impl Checkpoint {
    pub fn from_model(model: &ActivityGraphTransformer) -> Self {
        let store = model.store();
        let params = store.params().iter().map(|p| NamedTensor {
            name: p.name.clone(),
            section: PARAM_SECTION.into(),
            tensor: p.value.clone(),
        });
        let buffers = store.buffers().iter().map(|b| NamedTensor {
            name: b.name.clone(),
            section: BUFFER_SECTION.into(),
            tensor: b.value.clone(),
        });
        Self {
            config: model.config().clone(),
            tensors: params.chain(buffers).collect(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn get(&self, section: &str, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.section == section && t.name == name)
            .map(|t| &t.tensor)
    }

    pub fn section<'a>(&'a self, section: &'a str) -> impl Iterator<Item = &'a NamedTensor> + 'a {
        self.tensors.iter().filter(move |t| t.section == section)
    }

    pub fn push(&mut self, section: &str, name: &str, tensor: Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            section: section.into(),
            tensor,
        });
    }

    /// Rebuilds the model; every parameter and buffer must be present with
    /// the shape the config implies.
    pub fn to_model(&self) -> Result<ActivityGraphTransformer> {
        let mut model = ActivityGraphTransformer::new(self.config.clone(), 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &mut ActivityGraphTransformer) -> Result<()> {
        if model.config() != &self.config {
            return Err(parse_err("checkpoint config does not match the model"));
        }
        let lookup = |section: &str, name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = self
                .get(section, name)
                .ok_or_else(|| parse_err(format!("checkpoint lacks {section} `{name}`")))?;
            if t.shape() != shape {
                return Err(parse_err(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let store = model.store_mut();
        for p in store.params_mut() {
            p.value = lookup(PARAM_SECTION, &p.name, p.value.shape())?;
        }
        for b in store.buffers_mut() {
            b.value = lookup(BUFFER_SECTION, &b.name, b.value.shape())?;
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = Entry {
                    name: t.name.clone(),
                    section: t.section.clone(),
                    shape: t.tensor.shape().to_vec(),
                    offset,
                };
                offset += t.tensor.numel();
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            tensors: entries,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| parse_err(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.tensors {
            for v in t.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| parse_err("file too short for a checkpoint header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(parse_err("not a checkpoint file (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| parse_err("truncated checkpoint header"))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(parse_err(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| parse_err("truncated checkpoint header"))?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| parse_err("header length overflows"))?;
        let mut json = Vec::new();
        r.by_ref().take(len as u64).read_to_end(&mut json)?;
        if json.len() != len {
            return Err(parse_err("truncated checkpoint header"));
        }
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| parse_err(format!("checkpoint header: {e}")))?;
        header.config.validate()?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() % 8 != 0 {
            return Err(parse_err(
                "checkpoint payload is not a whole number of f64 values",
            ));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > values.len() {
                return Err(parse_err(format!(
                    "`{}` points outside the payload",
                    e.name
                )));
            }
            let tensor = Tensor::new(e.shape, values[e.offset..e.offset + n].to_vec())
                .map_err(|err| parse_err(format!("`{}`: {err}", e.name)))?;
            expected += n;
            tensors.push(NamedTensor {
                name: e.name,
                section: e.section,
                tensor,
            });
        }
        if expected != values.len() {
            return Err(parse_err("trailing data after checkpoint payload"));
        }
        Ok(Self {
            config: header.config,
            tensors,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
