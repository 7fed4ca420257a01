//! Checkpoint container.
//!
//! ```text
//! bilevel-checkpoint 1
//! config_digest <hex>
//! steps <n>
//! content_sha256 <hex of the payload>
//! denoiser <json>
//! tensor <name> <kind> <d0>x<d1>.. <offset> <len>
//! mask <name> <offset> <len>
//! end
//! <payload>
//! ```
//!
//! Tensor payloads are little-endian `f64`; mask payloads are one byte per
//! entry (1 = kept) and follow all tensors. Offsets are in bytes from the
//! start of the payload.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Context};
use bilevel_core::denoiser::DenoiserConfig;
use bilevel_core::params::{ParamKind, ParamStore};
use bilevel_core::pruning::PruneMask;
use bilevel_core::tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::config::hex;

const MAGIC: &str = "bilevel-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub config_digest: String,
    pub steps: u64,
    /// SHA-256 of the payload; filled in on save.
    pub content_sha256: String,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub denoiser: DenoiserConfig,
    pub params: ParamStore<f64>,
    pub provenance: Provenance,
}

fn kind_name(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Weight => "weight",
        ParamKind::Bias => "bias",
        ParamKind::Embedding => "embedding",
    }
}

fn parse_kind(s: &str) -> anyhow::Result<ParamKind> {
    Ok(match s {
        "weight" => ParamKind::Weight,
        "bias" => ParamKind::Bias,
        "embedding" => ParamKind::Embedding,
        other => bail!("unknown parameter kind {other:?}"),
    })
}

impl Checkpoint {
    pub fn new(
        denoiser: DenoiserConfig,
        params: ParamStore<f64>,
        config_digest: String,
        steps: u64,
    ) -> Self {
        Self {
            denoiser,
            params,
            provenance: Provenance {
                config_digest,
                steps,
                content_sha256: String::new(),
            },
        }
    }

    pub fn mask(&self) -> Option<PruneMask> {
        let mut entries = BTreeMap::new();
        for (name, p) in self.params.iter() {
            entries.insert(name.to_string(), p.mask()?.to_vec());
        }
        Some(PruneMask::from_entries(entries))
    }

    pub fn to_bytes(&self) -> anyhow::Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut dir = String::new();
        for (name, p) in self.params.iter() {
            ensure!(
                !name.contains(char::is_whitespace),
                "tensor name {name:?} contains whitespace"
            );
            let v = p.value();
            let offset = payload.len();
            for x in v.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            let shape: Vec<String> = v.shape().iter().map(usize::to_string).collect();
            dir.push_str(&format!(
                "tensor {name} {} {} {offset} {}\n",
                kind_name(p.kind()),
                if shape.is_empty() {
                    "scalar".to_string()
                } else {
                    shape.join("x")
                },
                v.len()
            ));
        }
        for (name, p) in self.params.iter() {
            if let Some(m) = p.mask() {
                let offset = payload.len();
                payload.extend(m.iter().map(|&k| u8::from(k)));
                dir.push_str(&format!("mask {name} {offset} {}\n", m.len()));
            }
        }
        let mut out = Vec::with_capacity(payload.len() + dir.len() + 256);
        writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;
        writeln!(out, "config_digest {}", self.provenance.config_digest)?;
        writeln!(out, "steps {}", self.provenance.steps)?;
        writeln!(out, "content_sha256 {}", hex(&Sha256::digest(&payload)))?;
        writeln!(out, "denoiser {}", serde_json::to_string(&self.denoiser)?)?;
        out.extend_from_slice(dir.as_bytes());
        writeln!(out, "end")?;
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> anyhow::Result<Self> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let mut next = |cursor: &mut std::io::Cursor<&[u8]>| -> anyhow::Result<String> {
            line.clear();
            ensure!(
                cursor.read_line(&mut line)? > 0,
                "truncated checkpoint header"
            );
            Ok(line.trim_end_matches('\n').to_string())
        };
        let magic = next(&mut cursor)?;
        let version = magic
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| anyhow!("not a checkpoint file"))?;
        ensure!(
            version == FORMAT_VERSION.to_string(),
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        );
        let mut field =
            |cursor: &mut std::io::Cursor<&[u8]>, key: &str| -> anyhow::Result<String> {
                let l = next(cursor)?;
                l.strip_prefix(key)
                    .and_then(|r| r.strip_prefix(' '))
                    .map(str::to_string)
                    .ok_or_else(|| anyhow!("expected header field {key:?}, found {l:?}"))
            };
        let config_digest = field(&mut cursor, "config_digest")?;
        let steps: u64 = field(&mut cursor, "steps")?.parse()?;
        let content = field(&mut cursor, "content_sha256")?;
        let denoiser: DenoiserConfig = serde_json::from_str(&field(&mut cursor, "denoiser")?)?;

        struct TensorEntry {
            name: String,
            kind: ParamKind,
            shape: Vec<usize>,
            offset: usize,
            len: usize,
        }
        let mut tensors = Vec::new();
        let mut masks = Vec::new();
        loop {
            let mut l = String::new();
            ensure!(
                cursor.read_line(&mut l)? > 0,
                "checkpoint header has no end marker"
            );
            let parts: Vec<&str> = l.split_whitespace().collect();
            match parts.as_slice() {
                ["end"] => break,
                ["tensor", name, kind, shape, offset, len] => tensors.push(TensorEntry {
                    name: name.to_string(),
                    kind: parse_kind(kind)?,
                    shape: if *shape == "scalar" {
                        Vec::new()
                    } else {
                        shape.split('x').map(str::parse).collect::<Result<_, _>>()?
                    },
                    offset: offset.parse()?,
                    len: len.parse()?,
                }),
                ["mask", name, offset, len] => masks.push((
                    name.to_string(),
                    offset.parse::<usize>()?,
                    len.parse::<usize>()?,
                )),
                _ => bail!("malformed checkpoint directory line {:?}", l.trim_end()),
            }
        }
        let mut payload = Vec::new();
        cursor.read_to_end(&mut payload)?;
        ensure!(
            hex(&Sha256::digest(&payload)) == content,
            "checkpoint payload hash mismatch (file corrupted or truncated)"
        );

        let mut params = ParamStore::new();
        for t in &tensors {
            let end = t.offset + 8 * t.len;
            ensure!(
                end <= payload.len(),
                "tensor {} runs past the payload",
                t.name
            );
            let data: Vec<f64> = payload[t.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?, t.kind);
        }
        for (name, offset, len) in masks {
            ensure!(
                offset + len <= payload.len(),
                "mask {name} runs past the payload"
            );
            let m: Vec<bool> = payload[offset..offset + len]
                .iter()
                .map(|&b| b != 0)
                .collect();
            params
                .attach_mask(&name, Arc::new(m))
                .with_context(|| format!("mask {name}"))?;
        }
        Ok(Self {
            denoiser,
            params,
            provenance: Provenance {
                config_digest,
                steps,
                content_sha256: content,
            },
        })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)
            .with_context(|| format!("writing checkpoint {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.insert(
            "hidden.0.weight",
            Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
            ParamKind::Weight,
        );
        p.insert(
            "hidden.0.bias",
            Tensor::vector(vec![0.1, 0.2]),
            ParamKind::Bias,
        );
        p.attach_mask("hidden.0.weight", Arc::new(vec![true, false, true, true]))
            .unwrap();
        p.attach_mask("hidden.0.bias", Arc::new(vec![true, true]))
            .unwrap();
        Checkpoint::new(DenoiserConfig::default(), p, "abc".into(), 7)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.params.values_bitwise_eq(&ck.params));
        assert_eq!(back.mask(), ck.mask());
        assert_eq!(back.provenance.steps, 7);
        assert_eq!(back.denoiser, ck.denoiser);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"something else\n").is_err());
    }
}
