//! Versioned binary checkpoints.
//!
//! Layout: magic `MOELABCK`, `u32` LE version, `u64` LE header length, a UTF-8
//! header, then the payload of little-endian `f32` values. Header lines are
//! the model configuration (`model.* = ...`), optional optimizer settings
//! (`optim.* = ...`), and one `tensor <name> <shape> <offset> <len>` line per
//! tensor with offsets in elements, contiguous in manifest order. Optimizer
//! moments appear as tensors `adam.m/<param>` and `adam.v/<param>`.

use std::fmt::Write as _;
use std::path::Path;

use super::config_file::{model_to_text, parse_model};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::{AdamConfig, AdamW};

pub const MAGIC: &[u8; 8] = b"MOELABCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optim: Option<AdamW>,
}

struct Entry<'a> {
    name: String,
    shape: Vec<usize>,
    data: &'a [f32],
}

pub fn encode_checkpoint(model: &Model<f32>, optim: Option<&AdamW>) -> Vec<u8> {
    let mut entries: Vec<Entry<'_>> = model
        .params
        .iter()
        .map(|p| Entry { name: p.name.clone(), shape: p.value.shape().to_vec(), data: p.value.data() })
        .collect();
    let mut header = model_to_text(&model.config);
    if let Some(o) = optim {
        let c = &o.config;
        let _ = write!(
            header,
            "optim.step = {}\noptim.base_lr = {:?}\noptim.min_lr = {:?}\noptim.warmup_steps = {}\n\
             optim.total_steps = {}\noptim.weight_decay = {:?}\noptim.beta1 = {:?}\noptim.beta2 = {:?}\n\
             optim.eps = {:?}\noptim.clip_norm = {}\n",
            o.step,
            c.base_lr,
            c.min_lr,
            c.warmup_steps,
            c.total_steps,
            c.weight_decay,
            c.betas.0,
            c.betas.1,
            c.eps,
            c.clip_norm.map_or("none".to_string(), |x| format!("{x:?}")),
        );
        for (kind, moments) in [("m", &o.m), ("v", &o.v)] {
            for (p, data) in model.params.iter().zip(moments.iter()) {
                entries.push(Entry { name: format!("adam.{kind}/{}", p.name), shape: p.value.shape().to_vec(), data });
            }
        }
    }
    let mut offset = 0usize;
    for e in &entries {
        let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
        let _ = writeln!(header, "tensor {} {} {offset} {}", e.name, shape.join(","), e.data.len());
        offset += e.data.len();
    }
    let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for e in &entries {
        for x in e.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, optim: Option<&AdamW>) -> Result<()> {
    let bytes = encode_checkpoint(model, optim);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Manifest {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: String| Error::Corrupt(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing MOELABCK magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("format version {version} is not the supported version {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header =
        std::str::from_utf8(&bytes[20..header_end]).map_err(|_| corrupt("header is not UTF-8".into()))?;
    let payload = &bytes[header_end..];
    if payload.len() % 4 != 0 {
        return Err(corrupt(format!("payload of {} bytes is not a whole number of f32 values", payload.len())));
    }
    let available = payload.len() / 4;

    let mut config_text = String::new();
    let mut optim_kv: Vec<(String, String)> = Vec::new();
    let mut manifest = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let bad = || corrupt(format!("malformed manifest line {line:?}"));
            if parts.len() != 4 {
                return Err(bad());
            }
            let shape = parts[1].split(',').map(str::parse).collect::<Result<Vec<usize>, _>>().map_err(|_| bad())?;
            manifest.push(Manifest {
                name: parts[0].to_string(),
                shape,
                offset: parts[2].parse().map_err(|_| bad())?,
                len: parts[3].parse().map_err(|_| bad())?,
            });
        } else if let Some(rest) = line.strip_prefix("optim.") {
            let (k, v) = rest.split_once(" = ").ok_or_else(|| corrupt(format!("malformed line {line:?}")))?;
            optim_kv.push((k.to_string(), v.to_string()));
        } else {
            config_text.push_str(line);
            config_text.push('\n');
        }
    }
    let config = parse_model(&config_text).map_err(|e| corrupt(format!("embedded configuration: {e}")))?;

    let mut expected = 0usize;
    for m in &manifest {
        if m.offset != expected || m.shape.iter().product::<usize>() != m.len {
            return Err(corrupt(format!(
                "tensor {} has offset {} and length {} for shape {:?}; expected offset {expected}",
                m.name, m.offset, m.len, m.shape
            )));
        }
        if m.offset + m.len > available {
            return Err(corrupt(format!(
                "tensor {} needs values {}..{} but the payload holds {available}",
                m.name,
                m.offset,
                m.offset + m.len
            )));
        }
        expected += m.len;
    }
    if expected != available {
        return Err(corrupt(format!("payload holds {available} values, manifest describes {expected}")));
    }
    let read = |m: &Manifest| -> Vec<f32> {
        payload[4 * m.offset..4 * (m.offset + m.len)]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect()
    };
    let find = |name: &str| manifest.iter().find(|m| m.name == name);

    let mut model = Model::<f32>::new(&config)?;
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for (id, name) in model.params.ids().collect::<Vec<_>>().into_iter().zip(&names) {
        let m = find(name).ok_or_else(|| corrupt(format!("tensor {name} missing from manifest")))?;
        if m.shape != model.params.get(id).shape() {
            return Err(corrupt(format!(
                "tensor {name} has shape {:?}, configuration implies {:?}",
                m.shape,
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = Tensor::new(m.shape.clone(), read(m))?;
    }

    let optim = if optim_kv.is_empty() {
        None
    } else {
        let get = |k: &str| -> Result<&str> {
            optim_kv
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| corrupt(format!("optimizer field {k} missing")))
        };
        let f = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| corrupt(format!("optimizer field {k}"))) };
        let u = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| corrupt(format!("optimizer field {k}"))) };
        let clip = match get("clip_norm")? {
            "none" => None,
            v => Some(v.parse().map_err(|_| corrupt("optimizer field clip_norm".into()))?),
        };
        let config = AdamConfig {
            base_lr: f("base_lr")?,
            min_lr: f("min_lr")?,
            warmup_steps: u("warmup_steps")?,
            total_steps: u("total_steps")?,
            weight_decay: f("weight_decay")?,
            betas: (f("beta1")?, f("beta2")?),
            eps: f("eps")?,
            clip_norm: clip,
        };
        let mut o = AdamW::new(config, &model.params);
        o.step = u("step")?;
        for (kind, store) in [("m", &mut o.m), ("v", &mut o.v)] {
            for (slot, name) in store.iter_mut().zip(&names) {
                let key = format!("adam.{kind}/{name}");
                let m = find(&key).ok_or_else(|| corrupt(format!("tensor {key} missing from manifest")))?;
                if m.len != slot.len() {
                    return Err(corrupt(format!("tensor {key} has {} values, expected {}", m.len, slot.len())));
                }
                *slot = read(m);
            }
        }
        Some(o)
    };
    Ok(Checkpoint { model, optim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, MoeVariant};

    fn model() -> Model<f32> {
        Model::new(&ModelConfig::toy(MoeVariant::Cartesian)).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let mut o = AdamW::new(AdamConfig::for_run(1e-3, 10), &m.params);
        o.step = 4;
        o.m[0][0] = 0.25;
        let back = decode_checkpoint(&encode_checkpoint(&m, Some(&o))).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.optim.unwrap(), o);
        assert!(decode_checkpoint(&encode_checkpoint(&m, None)).unwrap().optim.is_none());
    }

    #[test]
    fn truncation_names_first_bad_tensor() {
        let bytes = encode_checkpoint(&model(), None);
        let err = decode_checkpoint(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));
        assert!(err.to_string().contains("tensor head"), "{err}");
    }

    #[test]
    fn version_mismatch_is_hard_error() {
        let mut bytes = encode_checkpoint(&model(), None);
        bytes[8] = 2;
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("version 2"));
        assert!(decode_checkpoint(b"not a checkpoint at all").is_err());
    }
}
