//! Binary checkpoints: magic `HKCKPT01`, a `u32` tensor count, then per
//! tensor `u32` name length, UTF-8 name, `u32` rank, `u64` dims and
//! little-endian `f64` values.
//!
//! Network checkpoints carry their template, mode and architecture as
//! tensors whose names start with `__`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hyperkernel::Candidate;
use crate::mixedop::{AlphaMode, DerivedOp, Form};
use crate::ndtensor::Tensor;
use crate::searchspace::{ArchitectureMatrix, NetKind, NetMode, Network, NetworkTemplate};

const MAGIC: &[u8; 8] = b"HKCKPT01";

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.bytes.len(),
                message: format!("checkpoint truncated while reading {what}"),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format {
            offset: self.pos - 8,
            message: format!("{what} {v} too large"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint (missing magic HKCKPT01)".into(),
        });
    }
    let mut c = Cursor { bytes, pos: 8 };
    let count = c.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let at = c.pos;
        let len = c.u32("name length")?;
        let name = String::from_utf8(c.take(len, "name")?.to_vec()).map_err(|_| Error::Format {
            offset: at + 4,
            message: format!("tensor {i} name is not UTF-8"),
        })?;
        let rank = c.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u64("dimension")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format {
                offset: c.pos,
                message: format!("tensor {name:?} has an overflowing shape {shape:?}"),
            })?;
        let raw = c.take(n.saturating_mul(8), &format!("values of {name:?}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos,
            message: "trailing bytes after the last tensor".into(),
        });
    }
    Ok(out)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

fn kind_code(k: NetKind) -> f64 {
    match k {
        NetKind::Cls1d => 0.0,
        NetKind::Cls3d => 1.0,
        NetKind::Seg3d => 2.0,
    }
}

fn form_code(f: Option<Form>) -> f64 {
    match f {
        None => -1.0,
        Some(f) => Form::ALL.iter().position(|&g| g == f).unwrap() as f64,
    }
}

fn meta_usize(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(Error::Format {
            offset: 0,
            message: format!("checkpoint metadata field {what} is invalid: {v}"),
        })
    }
}

fn template_tensor(t: &NetworkTemplate) -> Tensor {
    Tensor::vector(&[
        kind_code(t.kind),
        t.blocks as f64,
        t.layers as f64,
        form_code(t.form),
        t.hyper_size as f64,
        t.initial_channels as f64,
        t.stem_length as f64,
        t.patch as f64,
        t.bands as f64,
        t.classes as f64,
    ])
}

fn template_from(t: &Tensor) -> Result<NetworkTemplate> {
    let v = t.data();
    if v.len() != 10 {
        return Err(Error::Format {
            offset: 0,
            message: "checkpoint template record has the wrong length".into(),
        });
    }
    let kind = match v[0] {
        0.0 => NetKind::Cls1d,
        1.0 => NetKind::Cls3d,
        2.0 => NetKind::Seg3d,
        x => return Err(Error::Config(format!("checkpoint has unknown network kind code {x}"))),
    };
    let form = if v[3] < 0.0 {
        None
    } else {
        Some(
            *Form::ALL
                .get(meta_usize(v[3], "form")?)
                .ok_or_else(|| Error::Config("bad form code".into()))?,
        )
    };
    let t = NetworkTemplate {
        kind,
        blocks: meta_usize(v[1], "blocks")?,
        layers: meta_usize(v[2], "layers")?,
        form,
        hyper_size: meta_usize(v[4], "hyper_size")?,
        initial_channels: meta_usize(v[5], "initial_channels")?,
        stem_length: meta_usize(v[6], "stem_length")?,
        patch: meta_usize(v[7], "patch")?,
        bands: meta_usize(v[8], "bands")?,
        classes: meta_usize(v[9], "classes")?,
    };
    t.validate()?;
    Ok(t)
}

/// Network parameters, buffers and metadata as named tensors.
pub fn network_tensors(net: &Network) -> Result<Vec<(String, Tensor)>> {
    let t = net.template();
    let alpha = net.mixed_edges().first().map(|e| e.alpha_mode());
    let mode = match (net.mode(), alpha) {
        (NetMode::Derived, _) => 0.0,
        (NetMode::Search, Some(AlphaMode::Free)) => 2.0,
        (NetMode::Search, _) => 1.0,
    };
    let mut out = vec![
        ("__template".to_string(), template_tensor(t)),
        ("__mode".to_string(), Tensor::scalar(mode)),
    ];
    if net.mode() == NetMode::Derived {
        let ops = net.architecture()?.to_derived(t)?;
        let per = ops[0][0].ops.len();
        let codes: Vec<f64> = ops
            .iter()
            .flatten()
            .flat_map(|d| d.ops.iter().map(|c| c.code() as f64))
            .collect();
        out.push(("__arch".to_string(), Tensor::new(vec![t.blocks, t.layers, per], codes)?));
    }
    out.extend(net.params().into_iter().map(|p| (p.name.clone(), p.value.clone())));
    Ok(out)
}

/// Rebuilds a network from [`network_tensors`] output.
pub fn network_from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Network> {
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("checkpoint lacks {name}"),
            })
    };
    let template = template_from(find("__template")?)?;
    let mut net = match find("__mode")?.item()? {
        0.0 => {
            let arch = find("__arch")?;
            let (m, n) = (template.blocks, template.layers);
            if arch.shape().len() != 3 || arch.shape()[..2] != [m, n] {
                return Err(Error::Config(format!(
                    "checkpoint architecture shape {:?} does not fit {m}x{n}",
                    arch.shape()
                )));
            }
            let per = arch.shape()[2];
            let kind = template.edge_kind();
            let ops: Vec<Vec<DerivedOp>> = (0..m)
                .map(|b| {
                    (0..n)
                        .map(|l| {
                            let cands = (0..per)
                                .map(|k| meta_usize(arch.get(&[b, l, k]), "architecture").map(Candidate::from_code))
                                .collect::<Result<Vec<_>>>()?;
                            DerivedOp::new(kind, cands)
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            Network::derived(&template, &ArchitectureMatrix::from_derived(&ops)?, 0)?
        }
        1.0 => Network::search(&template, AlphaMode::Hyper, 0)?,
        2.0 => Network::search(&template, AlphaMode::Free, 0)?,
        x => return Err(Error::Config(format!("checkpoint has unknown mode {x}"))),
    };
    let expected = net.params().len();
    let stored = tensors.iter().filter(|(n, _)| !n.starts_with("__")).count();
    if stored != expected {
        return Err(Error::Config(format!(
            "checkpoint holds {stored} tensors but the network has {expected}"
        )));
    }
    for p in net.params_mut() {
        let t = find(&p.name).map_err(|_| Error::Config(format!("checkpoint lacks parameter {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Config(format!(
                "parameter {} has shape {:?} in the checkpoint but {:?} in the network",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(net)
}

pub fn save_network(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    save_tensors(path, &network_tensors(net)?)
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    network_from_tensors(load_tensors(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let ts = vec![
            ("a".to_string(), Tensor::vector(&[1.5, -2.0])),
            ("scalar".to_string(), Tensor::scalar(3.0)),
        ];
        let bytes = encode(&ts);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ts);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"HKCKPT02").is_err());
    }
}
