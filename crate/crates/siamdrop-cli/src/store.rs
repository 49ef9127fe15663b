//! Binary weight store: named tensors with shapes, little-endian f32
//! payload, a trailing SHA-256 over everything before it, and the resolved
//! config embedded as text. Writes are temp-file-then-rename.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use siamdrop_core::combine::EncoderHead;
use siamdrop_core::norm::BatchNorm;
use siamdrop_core::{Backbone, BackboneConfig};

const MAGIC: &[u8; 4] = b"SDWT";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    pub config_text: String,
    pub tensors: Vec<NamedTensor>,
}

fn push_tensor(out: &mut Vec<NamedTensor>, name: String, shape: Vec<u32>, data: &[f32]) {
    debug_assert_eq!(
        shape.iter().map(|&d| d as usize).product::<usize>(),
        data.len()
    );
    out.push(NamedTensor {
        name,
        shape,
        data: data.to_vec(),
    });
}

fn push_bn(out: &mut Vec<NamedTensor>, prefix: &str, bn: &BatchNorm) {
    let c = bn.channels as u32;
    push_tensor(out, format!("{prefix}.gamma"), vec![c], &bn.gamma);
    push_tensor(out, format!("{prefix}.beta"), vec![c], &bn.beta);
    push_tensor(out, format!("{prefix}.running_mean"), vec![c], &bn.running_mean);
    push_tensor(out, format!("{prefix}.running_var"), vec![c], &bn.running_var);
    push_tensor(out, format!("{prefix}.eps"), vec![1], &[bn.eps]);
    push_tensor(out, format!("{prefix}.momentum"), vec![1], &[bn.momentum]);
}

impl WeightStore {
    pub fn from_model(
        config_text: String,
        backbone: &Backbone,
        head: Option<&EncoderHead>,
    ) -> WeightStore {
        let mut tensors = Vec::new();
        for (i, b) in backbone.blocks.iter().enumerate() {
            let conv = &b.conv;
            push_tensor(
                &mut tensors,
                format!("bb{i}.conv.weight"),
                vec![
                    conv.out_channels as u32,
                    conv.in_per_group() as u32,
                    conv.kernel as u32,
                    conv.kernel as u32,
                ],
                &conv.weight,
            );
            push_tensor(
                &mut tensors,
                format!("bb{i}.conv.bias"),
                vec![conv.out_channels as u32],
                &conv.bias,
            );
            push_bn(&mut tensors, &format!("bb{i}.bn"), &b.bn);
        }
        if let Some(h) = head {
            for (tag, conv) in [("conv1", &h.conv1), ("conv2", &h.conv2)] {
                push_tensor(
                    &mut tensors,
                    format!("head.{tag}.weight"),
                    vec![
                        conv.out_channels as u32,
                        conv.in_per_group() as u32,
                        1,
                        1,
                    ],
                    &conv.weight,
                );
                push_tensor(
                    &mut tensors,
                    format!("head.{tag}.bias"),
                    vec![conv.out_channels as u32],
                    &conv.bias,
                );
            }
            push_bn(&mut tensors, "head.bn1", &h.bn1);
            push_bn(&mut tensors, "head.bn2", &h.bn2);
        }
        WeightStore {
            config_text,
            tensors,
        }
    }

    fn index(&self) -> BTreeMap<&str, &NamedTensor> {
        self.tensors.iter().map(|t| (t.name.as_str(), t)).collect()
    }

    fn take<'a>(
        index: &BTreeMap<&str, &'a NamedTensor>,
        name: &str,
        len: usize,
    ) -> Result<&'a NamedTensor> {
        let t = index
            .get(name)
            .with_context(|| format!("weight store has no tensor {name:?}"))?;
        if t.data.len() != len {
            bail!(
                "tensor {name:?} holds {} values, model wants {len}",
                t.data.len()
            );
        }
        Ok(t)
    }

    fn load_bn(index: &BTreeMap<&str, &NamedTensor>, prefix: &str, bn: &mut BatchNorm) -> Result<()> {
        let c = bn.channels;
        bn.gamma = Self::take(index, &format!("{prefix}.gamma"), c)?.data.clone();
        bn.beta = Self::take(index, &format!("{prefix}.beta"), c)?.data.clone();
        bn.running_mean = Self::take(index, &format!("{prefix}.running_mean"), c)?.data.clone();
        bn.running_var = Self::take(index, &format!("{prefix}.running_var"), c)?.data.clone();
        bn.eps = Self::take(index, &format!("{prefix}.eps"), 1)?.data[0];
        bn.momentum = Self::take(index, &format!("{prefix}.momentum"), 1)?.data[0];
        Ok(())
    }

    /// Rebuilds a backbone with the stored tensors; `cfg` fixes the
    /// architecture (normally read from the stored config text).
    pub fn load_backbone(&self, cfg: &BackboneConfig) -> Result<Backbone> {
        let mut backbone = Backbone::new(cfg).context("backbone architecture")?;
        let index = self.index();
        for (i, b) in backbone.blocks.iter_mut().enumerate() {
            let w = Self::take(&index, &format!("bb{i}.conv.weight"), b.conv.weight.len())?;
            b.conv.weight = w.data.clone();
            b.conv.bias = Self::take(&index, &format!("bb{i}.conv.bias"), b.conv.bias.len())?
                .data
                .clone();
            Self::load_bn(&index, &format!("bb{i}.bn"), &mut b.bn)?;
        }
        Ok(backbone)
    }

    /// The stored encoder head, if one was saved; its input width comes from
    /// the conv1 shape descriptor.
    pub fn load_head(&self) -> Result<Option<EncoderHead>> {
        let index = self.index();
        let Some(w1) = index.get("head.conv1.weight") else {
            return Ok(None);
        };
        if w1.shape.len() != 4 {
            bail!("head.conv1.weight has rank {}, want 4", w1.shape.len());
        }
        let n = w1.shape[1] as usize;
        let mut head = EncoderHead::new(n, 0).context("head architecture")?;
        head.conv1.weight = Self::take(&index, "head.conv1.weight", head.conv1.weight.len())?
            .data
            .clone();
        head.conv1.bias = Self::take(&index, "head.conv1.bias", head.conv1.bias.len())?
            .data
            .clone();
        head.conv2.weight = Self::take(&index, "head.conv2.weight", head.conv2.weight.len())?
            .data
            .clone();
        head.conv2.bias = Self::take(&index, "head.conv2.bias", head.conv2.bias.len())?
            .data
            .clone();
        Self::load_bn(&index, "head.bn1", &mut head.bn1)?;
        Self::load_bn(&index, "head.bn2", &mut head.bn2)?;
        Ok(Some(head))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<WeightStore> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
            bail!("weight store truncated: {} bytes", bytes.len());
        }
        let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        let digest = Sha256::digest(body);
        if digest.as_slice() != checksum {
            bail!("weight store checksum mismatch (file corrupt or truncated)");
        }
        let mut cur = Cursor { body, pos: 0 };
        let magic = cur.bytes(4)?;
        if magic != MAGIC {
            bail!("not a weight store (bad magic)");
        }
        let version = cur.u32()?;
        if version != VERSION {
            bail!("weight store version {version} unsupported (want {VERSION})");
        }
        let cfg_len = cur.u32()? as usize;
        let config_text = String::from_utf8(cur.bytes(cfg_len)?.to_vec())
            .context("config text is not UTF-8")?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.bytes(name_len)?.to_vec())
                .context("tensor name is not UTF-8")?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()?);
            }
            let len: usize = shape.iter().map(|&d| d as usize).product();
            let raw = cur.bytes(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if cur.pos != body.len() {
            bail!("weight store has {} trailing bytes", body.len() - cur.pos);
        }
        Ok(WeightStore {
            config_text,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<WeightStore> {
        let bytes =
            std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}

struct Cursor<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.body.len() {
            bail!("weight store ends early inside a record");
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Backbone, EncoderHead) {
        let mut cfg = BackboneConfig::default();
        cfg.channels = vec![3, 4, 6];
        cfg.strides = vec![2, 2];
        cfg.seed = 5;
        let mut backbone = Backbone::new(&cfg).unwrap();
        // make running stats non-default so round trips cover them
        for b in &mut backbone.blocks {
            for (i, v) in b.bn.running_mean.iter_mut().enumerate() {
                *v = i as f32 * 0.25 - 1.0;
            }
        }
        let head = EncoderHead::new(13, 9).unwrap();
        (backbone, head)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (backbone, head) = sample();
        let store = WeightStore::from_model("answer = 42\n".into(), &backbone, Some(&head));
        let bytes = store.to_bytes();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(store, back);
        let mut cfg = BackboneConfig::default();
        cfg.channels = vec![3, 4, 6];
        cfg.strides = vec![2, 2];
        let bb2 = back.load_backbone(&cfg).unwrap();
        for (a, b) in backbone.blocks.iter().zip(&bb2.blocks) {
            assert_eq!(a.conv.weight, b.conv.weight);
            assert_eq!(a.bn.running_mean, b.bn.running_mean);
            assert_eq!(a.bn.eps, b.bn.eps);
        }
        let h2 = back.load_head().unwrap().unwrap();
        assert_eq!(head.conv1.weight, h2.conv1.weight);
        assert_eq!(head.bn2.running_var, h2.bn2.running_var);
    }

    #[test]
    fn truncation_and_corruption_fail_checksum() {
        let (backbone, _) = sample();
        let store = WeightStore::from_model(String::new(), &backbone, None);
        let bytes = store.to_bytes();
        for cut in [1usize, 7, 100] {
            let err = WeightStore::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(err.to_string().contains("checksum") || err.to_string().contains("truncated"));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x01;
        assert!(WeightStore::from_bytes(&flipped).is_err());
    }

    #[test]
    fn headless_store_loads_no_head() {
        let (backbone, _) = sample();
        let store = WeightStore::from_model(String::new(), &backbone, None);
        let back = WeightStore::from_bytes(&store.to_bytes()).unwrap();
        assert!(back.load_head().unwrap().is_none());
    }
}
