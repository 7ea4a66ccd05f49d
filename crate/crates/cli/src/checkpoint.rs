//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! ```text
//! magic     8 bytes  "XMODAL01"
//! version   u32
//! manifest  u32 length + UTF-8 JSON
//! count     u32
//! tensors   count × { u32 name length, name, u32 ndim, ndim × u32 dims, f32 data }
//! ```
//! A network `net` stored under prefix `p` contributes `p/<param>` values,
//! `p/<param>@m` and `p/<param>@v` Adam moments, `p/<param>@u` spectral-norm
//! vectors and `p/#<buffer>` running statistics.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde_json::Value;
use xmodal::tensor::{NetParams, Tensor};

pub const MAGIC: &[u8; 8] = b"XMODAL01";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).context("value exceeds u32")?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).context("truncated checkpoint")?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    ensure!(buf.len() == n, "truncated checkpoint");
    Ok(buf)
}

impl Checkpoint {
    pub fn new(manifest: Value) -> Self {
        Self {
            manifest,
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        let manifest = serde_json::to_vec(&self.manifest)?;
        put_u32(&mut out, manifest.len())?;
        out.extend_from_slice(&manifest);
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let magic = get_bytes(&mut r, 8).context("missing magic")?;
        ensure!(magic == MAGIC, "not a checkpoint (bad magic)");
        let version = get_u32(&mut r)?;
        ensure!(
            version == VERSION as usize,
            "unsupported checkpoint version {version}"
        );
        let len = get_u32(&mut r)?;
        let manifest =
            serde_json::from_slice(&get_bytes(&mut r, len)?).context("corrupt manifest")?;
        let count = get_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = get_u32(&mut r)?;
            let name =
                String::from_utf8(get_bytes(&mut r, len)?).context("tensor name is not UTF-8")?;
            let ndim = get_u32(&mut r)?;
            let shape = (0..ndim)
                .map(|_| get_u32(&mut r))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .context("tensor too large")?;
            let raw = get_bytes(&mut r, numel.checked_mul(4).context("tensor too large")?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        ensure!(r.is_empty(), "trailing bytes after tensors");
        Ok(Self { manifest, tensors })
    }

    /// Writes through a temporary file so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?)
            .with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("in {}", path.display()))
    }

    pub fn field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .manifest
            .get(key)
            .ok_or_else(|| anyhow!("checkpoint manifest lacks {key:?}"))?;
        serde_json::from_value(v.clone()).with_context(|| format!("checkpoint field {key:?}"))
    }

    pub fn insert_net(&mut self, prefix: &str, net: &NetParams<f32>) -> Result<()> {
        for (name, p) in &net.params {
            self.tensors
                .insert(format!("{prefix}/{name}"), p.value.clone());
            self.tensors
                .insert(format!("{prefix}/{name}@m"), p.adam_m.clone());
            self.tensors
                .insert(format!("{prefix}/{name}@v"), p.adam_v.clone());
            if let Some(u) = &p.sn_u {
                self.tensors.insert(
                    format!("{prefix}/{name}@u"),
                    Tensor::new(vec![u.len()], u.clone())?,
                );
            }
        }
        for (name, b) in &net.buffers {
            self.tensors.insert(format!("{prefix}/#{name}"), b.clone());
        }
        let mut t = self
            .manifest
            .get("adam_t")
            .cloned()
            .unwrap_or_else(|| Value::Object(Default::default()));
        t[prefix] = Value::from(net.adam_t);
        self.manifest["adam_t"] = t;
        Ok(())
    }

    /// Overwrites every tensor of `template` (a freshly built network with
    /// the same spec) from the checkpoint; names and shapes must agree.
    pub fn restore_net(&self, prefix: &str, template: &mut NetParams<f32>) -> Result<()> {
        let get = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| anyhow!("checkpoint lacks tensor {name}"))?;
            ensure!(
                t.shape() == shape,
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            );
            Ok(t.clone())
        };
        let mut expected = 0;
        for (name, p) in template.params.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = get(&format!("{prefix}/{name}"), &shape)?;
            p.adam_m = get(&format!("{prefix}/{name}@m"), &shape)?;
            p.adam_v = get(&format!("{prefix}/{name}@v"), &shape)?;
            p.zero_grad();
            expected += 3;
            if let Some(u) = &mut p.sn_u {
                *u = get(&format!("{prefix}/{name}@u"), &[u.len()])?.into_data();
                expected += 1;
            }
        }
        for (name, b) in template.buffers.iter_mut() {
            let shape = b.shape().to_vec();
            *b = get(&format!("{prefix}/#{name}"), &shape)?;
            expected += 1;
        }
        let stored = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(&format!("{prefix}/")))
            .count();
        if stored != expected {
            bail!("checkpoint has {stored} tensors under {prefix}/, network expects {expected}");
        }
        template.adam_t = self
            .manifest
            .get("adam_t")
            .and_then(|t| t.get(prefix))
            .and_then(Value::as_u64)
            .ok_or_else(|| anyhow!("checkpoint lacks adam_t for {prefix}"))?;
        Ok(())
    }
}
