//! Checkpoint container: a config snapshot plus named parameter tensors,
//! integrity-checked with a trailing SHA-256 digest.
//!
//! Layout: magic `TSCK`, format version (u32 LE), length-prefixed config
//! JSON, tensor count (u32 LE), then per tensor a length-prefixed name and
//! the tensor's own binary encoding; finally the SHA-256 of every
//! preceding byte. Tensors round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor2D};

const MAGIC: &[u8; 4] = b"TSCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub version: u32,
    pub config_json: String,
    pub tensors: BTreeMap<String, Tensor2D<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config_json: impl Into<String>) -> Self {
        Checkpoint {
            version: VERSION,
            config_json: config_json.into(),
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every parameter of a store under `namespace.` (e.g. `gnn.l0.w`).
    pub fn insert_store(&mut self, namespace: &str, store: &ParamStore<T>) -> Result<()> {
        for (name, param) in store.iter() {
            let key = format!("{namespace}.{name}");
            if self.tensors.insert(key.clone(), param.value.clone()).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor '{key}'")));
            }
        }
        Ok(())
    }

    /// Extracts one namespace back into a parameter store, with zeroed
    /// gradients.
    pub fn extract_store(&self, namespace: &str) -> Result<ParamStore<T>> {
        let prefix = format!("{namespace}.");
        let mut store = ParamStore::new();
        for (key, tensor) in &self.tensors {
            if let Some(rest) = key.strip_prefix(&prefix) {
                store.insert(rest, tensor.clone())?;
            }
        }
        if store.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds no tensors under namespace '{namespace}'"
            )));
        }
        Ok(store)
    }

    pub fn namespaces(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .tensors
            .keys()
            .filter_map(|k| k.split_once('.').map(|(ns, _)| ns.to_string()))
            .collect();
        out.dedup();
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut body = Vec::new();
        body.extend_from_slice(MAGIC);
        body.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_json.as_bytes();
        body.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        body.extend_from_slice(cfg);
        body.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let nb = name.as_bytes();
            body.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            body.extend_from_slice(nb);
            tensor.write_to(&mut body)?;
        }
        let digest = Sha256::digest(&body);
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&body)?;
        w.write_all(&digest)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < 32 {
            return Err(Error::Checkpoint("checkpoint truncated".into()));
        }
        let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored_digest {
            return Err(Error::Checkpoint("checkpoint checksum mismatch".into()));
        }
        let mut r = body;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        read_exact(&mut r, &mut cfg)?;
        let config_json = String::from_utf8(cfg)
            .map_err(|e| Error::Checkpoint(format!("config snapshot not UTF-8: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut nb = vec![0u8; name_len];
            read_exact(&mut r, &mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
            let tensor = Tensor2D::read_from(&mut r)?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
            }
        }
        Ok(Checkpoint {
            version,
            config_json,
            tensors,
        })
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("checkpoint truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
