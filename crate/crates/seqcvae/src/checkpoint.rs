//! Checkpoint container: `SQCV` magic, little-endian u32 version, a JSON
//! header (run config, vocabulary, step counter, RNG seed, shape
//! manifest), then every tensor's f64 values little-endian in manifest
//! order. Round-trips are bit-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tensor};
use crate::corpus::VocabIndex;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SQCV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Run configuration as recorded by the caller; opaque here.
    pub config: serde_json::Value,
    pub vocab: Option<VocabIndex>,
    pub step: u64,
    /// Root seed; together with `step` this pins every derived stream.
    pub seed: u64,
    /// Tensor manifest in payload order.
    pub shapes: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(
        config: serde_json::Value,
        vocab: Option<VocabIndex>,
        step: u64,
        seed: u64,
        tensors: BTreeMap<String, Tensor>,
    ) -> Self {
        let shapes = tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect();
        Checkpoint {
            header: CheckpointHeader { config, vocab, step, seed, shapes },
            tensors,
        }
    }

    /// Bundle a parameter store plus optional optimizer slots. Parameter
    /// tensors go under `param/`, slot groups under their own prefix.
    pub fn from_params(
        config: serde_json::Value,
        vocab: Option<VocabIndex>,
        step: u64,
        params: &ParameterStore,
        extra: &BTreeMap<String, Tensor>,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, t) in params.iter() {
            tensors.insert(format!("param/{name}"), t.clone());
        }
        for (name, t) in extra {
            tensors.insert(name.clone(), t.clone());
        }
        Checkpoint::new(config, vocab, step, params.seed(), tensors)
    }

    /// Rebuild a parameter store from the `param/` entries, verifying each
    /// shape against `expected` (name → shape from the model layout).
    pub fn to_params(&self, expected: &BTreeMap<String, Vec<usize>>) -> Result<ParameterStore> {
        let mut store = ParameterStore::new(self.header.seed);
        for (name, shape) in expected {
            let key = format!("param/{name}");
            let tensor = self.tensors.get(&key).ok_or_else(|| Error::CheckpointShape {
                name: name.clone(),
                stored: vec![],
                expected: shape.clone(),
            })?;
            if tensor.shape() != &shape[..] {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    stored: tensor.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
            store.create(name, shape.clone(), crate::autodiff::Init::Zeros);
            store.get_mut(name).data_mut().copy_from_slice(tensor.data());
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (name, _) in &self.header.shapes {
            let tensor = &self.tensors[name];
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut v4 = [0u8; 4];
        read_exact(&mut r, &mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut l8 = [0u8; 8];
        read_exact(&mut r, &mut l8)?;
        let header_len = u64::from_le_bytes(l8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        read_exact(&mut r, &mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

        let mut tensors = BTreeMap::new();
        let mut buf = [0u8; 8];
        for (name, shape) in &header.shapes {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.insert(name.clone(), Tensor::new(shape.clone(), data));
        }
        Ok(Checkpoint { header, tensors })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    })
}
