//! Versioned binary containers.
//!
//! Layout: 4-byte magic, `u32` format version, `u64` header length, the
//! header as canonical JSON text, `u32` array count, then per array: `u32`
//! name length, UTF-8 name, `u32` rank, `u64` dims, little-endian `f64`
//! data. All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{PicError, Result};
use crate::network::{build_cascade, CascadeModel};
use crate::ops::RunningStats;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

pub const MODEL_MAGIC: [u8; 4] = *b"PICM";
pub const DATASET_MAGIC: [u8; 4] = *b"PICD";
pub const OPTIM_MAGIC: [u8; 4] = *b"PICO";

/// Decoded container: JSON header text and named arrays in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: String,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| PicError::Format(format!("missing array `{name}`")))
    }
}

pub fn encode(magic: [u8; 4], header: &str, arrays: &[(String, &Tensor)]) -> Vec<u8> {
    let payload: usize = arrays.iter().map(|(n, t)| 8 + n.len() + 8 * (t.ndim() + t.numel())).sum();
    let mut out = Vec::with_capacity(20 + header.len() + payload);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| PicError::Format("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| PicError::Format("length overflows usize".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| PicError::Format("invalid UTF-8".into()))
    }
}

pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let found = r.take(4)?;
    if found != magic {
        return Err(PicError::Format(format!(
            "expected {} file, found magic {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(found)
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(PicError::Format(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let hlen = r.u64()?;
    let header = r.string(hlen)?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = r.string(nlen)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| PicError::Format(format!("array `{name}` too large")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| PicError::Format("array too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| PicError::Format(format!("array `{name}`: {e}")))?;
        arrays.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(PicError::Format("trailing bytes after last array".into()));
    }
    Ok(Container { header, arrays })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PicError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PicError::io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format_version: u32,
    config: RunConfig,
}

fn running_names(i: &str) -> (String, String) {
    (format!("{i}.running_mean"), format!("{i}.running_var"))
}

fn norm_prefixes(model: &CascadeModel) -> Vec<String> {
    let mut out: Vec<String> = (0..model.blocks.len()).map(|i| format!("block{i}")).collect();
    out.push("head".into());
    out
}

/// Serializes parameters and any running statistics.
pub fn model_to_bytes(model: &CascadeModel) -> Vec<u8> {
    let header = serde_json::to_string(&ModelHeader {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
    })
    .expect("header serializes");
    let mut arrays: Vec<(String, Tensor)> = Vec::new();
    for (prefix, norm) in norm_prefixes(model).iter().zip(model.norms()) {
        if let Some(rs) = &norm.running {
            let (m, v) = running_names(prefix);
            let c = rs.mean.len();
            arrays.push((m, Tensor::from_parts(vec![c], rs.mean.clone())));
            arrays.push((v, Tensor::from_parts(vec![c], rs.var.clone())));
        }
    }
    let mut refs: Vec<(String, &Tensor)> = model.params();
    refs.extend(arrays.iter().map(|(n, t)| (n.clone(), t)));
    encode(MODEL_MAGIC, &header, &refs)
}

/// Rebuilds a model, rejecting any array whose name or shape disagrees with
/// the model its embedded config describes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<CascadeModel> {
    let c = decode(MODEL_MAGIC, bytes)?;
    let header: ModelHeader =
        serde_json::from_str(&c.header).map_err(|e| PicError::Format(format!("model header: {e}")))?;
    let mut model = build_cascade(&header.config)?;
    let expected: Vec<(String, Vec<usize>)> =
        model.params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    let mut values = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let t = c.array(name)?;
        if t.shape() != shape.as_slice() {
            return Err(PicError::Format(format!(
                "`{name}` has shape {:?}, config implies {shape:?}",
                t.shape()
            )));
        }
        values.push(t.clone());
    }
    model.set_params(&values)?;
    let prefixes = norm_prefixes(&model);
    let widths: Vec<usize> = model.norms().iter().map(|n| n.scale.numel()).collect();
    let mut known = expected.len();
    let mut stats = Vec::new();
    for (prefix, width) in prefixes.iter().zip(widths) {
        let (m, v) = running_names(prefix);
        let found = (c.array(&m), c.array(&v));
        stats.push(match found {
            (Ok(mean), Ok(var)) => {
                if mean.shape() != [width] || var.shape() != [width] {
                    return Err(PicError::Format(format!("`{prefix}` running stats expect {width} channels")));
                }
                known += 2;
                Some(RunningStats {
                    mean: mean.data().to_vec(),
                    var: var.data().to_vec(),
                })
            }
            (Err(_), Err(_)) => None,
            _ => return Err(PicError::Format(format!("`{prefix}` has incomplete running stats"))),
        });
    }
    if known != c.arrays.len() {
        return Err(PicError::Format(format!(
            "{} unexpected arrays in model file",
            c.arrays.len() - known
        )));
    }
    for (norm, s) in model.blocks.iter_mut().map(|b| &mut b.norm).chain([&mut model.head.norm]).zip(stats) {
        norm.running = s;
    }
    Ok(model)
}

pub fn save_model(model: &CascadeModel, path: &Path) -> Result<()> {
    write_file(path, &model_to_bytes(model))
}

pub fn load_model(path: &Path) -> Result<CascadeModel> {
    model_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> CascadeModel {
        let mut cfg = RunConfig {
            variant: Variant::PicOrdered,
            depth: 2,
            window: 3,
            keys: 4,
            values: 4,
            channels: 8,
            ..RunConfig::default()
        };
        cfg.data.timesteps = 12;
        build_cascade(&cfg).unwrap()
    }

    #[test]
    fn container_round_trip() {
        let a = Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap();
        let bytes = encode(*b"TEST", "{\"k\":1}", &[("a".into(), &a)]);
        let c = decode(*b"TEST", &bytes).unwrap();
        assert_eq!(c.header, "{\"k\":1}");
        assert!(c.array("a").unwrap().bitwise_eq(&a));
        assert!(decode(*b"NOPE", &bytes).is_err());
        assert!(decode(*b"TEST", &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = encode(*b"TEST", "{}", &[]);
        bytes[4] = 2;
        let err = decode(*b"TEST", &bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"));
    }

    #[test]
    fn model_round_trip_bitwise() {
        let mut m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        m.calibrate(&Tensor::randn(&[3, 12, 8], 1.0, &mut rng)).unwrap();
        let bytes = model_to_bytes(&m);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back), bytes);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = model();
        let mut cfg = m.config.clone();
        cfg.channels = 12;
        let header = serde_json::to_string(&ModelHeader {
            format_version: FORMAT_VERSION,
            config: cfg,
        })
        .unwrap();
        let bytes = encode(MODEL_MAGIC, &header, &m.params());
        let err = model_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("config implies"), "{err}");
    }
}
