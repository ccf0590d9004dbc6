//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `FAGANCKP`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then every tensor as
//! row-major little-endian floats in header order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Real};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::optim::{Adam, AdamConfig};

pub const MAGIC: &[u8; 8] = b"FAGANCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume or reuse a run.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Real> {
    /// Completed adversarial iterations.
    pub iteration: usize,
    pub generator: Generator<F>,
    pub discriminator: Option<Discriminator<F>>,
    pub optim_g: Option<Adam<F>>,
    pub optim_d: Option<Adam<F>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    iteration: usize,
    generator: GeneratorConfig,
    discriminator: Option<DiscriminatorConfig>,
    optim_g: Option<OptimHeader>,
    optim_d: Option<OptimHeader>,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

struct Writer<'a, F: Real> {
    tensors: Vec<TensorHeader>,
    data: Vec<&'a Array2<F>>,
}

impl<'a, F: Real> Writer<'a, F> {
    fn push(&mut self, name: String, value: &'a Array2<F>) {
        let (rows, cols) = value.dim();
        self.tensors.push(TensorHeader { name, rows, cols });
        self.data.push(value);
    }

    fn store(&mut self, prefix: &str, store: &'a ParamStore<F>) {
        for id in store.ids() {
            self.push(format!("{prefix}/{}", store.name(id)), store.get(id));
        }
    }

    fn adam(&mut self, prefix: &str, adam: &'a Adam<F>) {
        let (first, second) = adam.moments();
        for (i, m) in first.iter().enumerate() {
            self.push(format!("{prefix}/m/{i}"), m);
        }
        for (i, v) in second.iter().enumerate() {
            self.push(format!("{prefix}/v/{i}"), v);
        }
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer {
            tensors: Vec::new(),
            data: Vec::new(),
        };
        w.store("generator", &self.generator.params);
        if let Some(d) = &self.discriminator {
            w.store("discriminator", &d.params);
        }
        if let Some(a) = &self.optim_g {
            w.adam("optim_g", a);
        }
        if let Some(a) = &self.optim_d {
            w.adam("optim_d", a);
        }
        let optim = |a: &Adam<F>| OptimHeader {
            config: *a.config(),
            step: a.steps(),
        };
        let header = Header {
            dtype: F::DTYPE.to_string(),
            iteration: self.iteration,
            generator: self.generator.config,
            discriminator: self.discriminator.as_ref().map(|d| d.config),
            optim_g: self.optim_g.as_ref().map(optim),
            optim_d: self.optim_d.as_ref().map(optim),
            tensors: w.tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for tensor in w.data {
            for &x in tensor.iter() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        if header.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, {} requested",
                header.dtype,
                F::DTYPE
            )));
        }
        let mut data = &body[header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.rows * t.cols;
            if data.len() < n * F::BYTES {
                return Err(Error::Checkpoint(format!("tensor `{}` is truncated", t.name)));
            }
            let (chunk, rest) = data.split_at(n * F::BYTES);
            let values: Vec<F> = chunk.chunks_exact(F::BYTES).map(F::read_le).collect();
            tensors.push((t.name.as_str(), Array2::from_shape_vec((t.rows, t.cols), values).unwrap()));
            data = rest;
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }

        let mut tensors = tensors.into_iter().peekable();
        let mut take_prefix = |prefix: &str| {
            let mut out = Vec::new();
            while let Some((name, _)) = tensors.peek() {
                let Some(rest) = name.strip_prefix(prefix) else { break };
                let rest = rest.to_string();
                let (_, value) = tensors.next().unwrap();
                out.push((rest, value));
            }
            out
        };
        let to_store = |items: Vec<(String, Array2<F>)>| {
            let mut store = ParamStore::new();
            for (name, value) in items {
                store.add(name, value);
            }
            store
        };
        let generator = Generator::from_params(header.generator, to_store(take_prefix("generator/")))?;
        let discriminator = match header.discriminator {
            Some(cfg) => Some(Discriminator::from_params(cfg, to_store(take_prefix("discriminator/")))?),
            None => None,
        };
        let mut adam = |h: Option<OptimHeader>, prefix: &str, store: Option<&ParamStore<F>>| -> Result<Option<Adam<F>>> {
            let Some(h) = h else { return Ok(None) };
            let store = store.ok_or_else(|| bad("optimizer state without its network"))?;
            let items = take_prefix(prefix);
            let n = store.len();
            if items.len() != 2 * n {
                return Err(Error::Checkpoint(format!("{prefix} holds {} moments, expected {}", items.len(), 2 * n)));
            }
            let (first, second): (Vec<_>, Vec<_>) = items.into_iter().map(|(_, v)| v).enumerate().partition(|(i, _)| *i < n);
            let first: Vec<_> = first.into_iter().map(|(_, v)| v).collect();
            let second: Vec<_> = second.into_iter().map(|(_, v)| v).collect();
            for (id, m) in store.ids().zip(&first) {
                if store.get(id).dim() != m.dim() {
                    return Err(Error::Checkpoint(format!("{prefix} moment shape mismatch")));
                }
            }
            Ok(Some(Adam::from_state(h.config, h.step, first, second)))
        };
        let optim_g = adam(header.optim_g, "optim_g/", Some(&generator.params))?;
        let optim_d = adam(header.optim_d, "optim_d/", discriminator.as_ref().map(|d| &d.params))?;
        if !take_prefix("").is_empty() {
            return Err(bad("unrecognized tensors"));
        }
        Ok(Checkpoint {
            iteration: header.iteration,
            generator,
            discriminator,
            optim_g,
            optim_d,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
