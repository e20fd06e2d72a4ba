//! Checkpoint files: a text manifest followed by little-endian 32-bit
//! values.
//!
//! ```text
//! mdnmt-checkpoint 1
//! step = 1200
//! model.d_model = 64
//! ...
//! tensor = embed 1849x64
//! ...
//! sha256 = <hex digest of the binary section>
//! data
//! <binary section>
//! ```

use std::path::Path;

use mdnmt::model::{ModelConfig, ModelParams};
use mdnmt::tensor::{Float, Tensor};
use mdnmt::{Error, Result};
use sha2::{Digest, Sha256};

const MAGIC: &str = "mdnmt-checkpoint 1";
const DATA_LINE: &[u8] = b"data\n";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes `params` reached at schedule step `step`.
pub fn to_bytes<T: Float>(step: u64, params: &ModelParams<T>) -> Vec<u8> {
    let mut data = Vec::with_capacity(4 * params.param_count());
    for t in params.tensors() {
        for &x in t.data() {
            data.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let mut head = format!("{MAGIC}\nstep = {step}\n");
    for (k, v) in params.config.fields() {
        head.push_str(&format!("model.{k} = {v}\n"));
    }
    for (name, t) in params.names().zip(params.tensors()) {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!("tensor = {name} {}\n", shape.join("x")));
    }
    head.push_str(&format!("sha256 = {}\n", hex(&Sha256::digest(&data))));
    let mut out = head.into_bytes();
    out.extend_from_slice(DATA_LINE);
    out.extend_from_slice(&data);
    out
}

/// Parses [`to_bytes`] output, verifying the checksum and every shape.
pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<(u64, ModelParams<T>)> {
    let split = bytes
        .windows(DATA_LINE.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == DATA_LINE)
        .ok_or_else(|| bad("no data section"))?;
    let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("manifest is not UTF-8"))?;
    let data = &bytes[split + 1 + DATA_LINE.len()..];
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint file (bad header)"));
    }
    let mut step = None;
    let mut model = Vec::new();
    let mut tensors = Vec::new();
    let mut digest = None;
    for line in lines {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| bad(format!("malformed manifest line `{line}`")))?;
        match k {
            "step" => step = Some(v.parse::<u64>().map_err(|_| bad("bad step"))?),
            "tensor" => {
                let (name, shape) = v
                    .rsplit_once(' ')
                    .ok_or_else(|| bad(format!("malformed tensor line `{line}`")))?;
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape of `{name}`"))))
                    .collect::<Result<Vec<_>>>()?;
                tensors.push((name.to_owned(), shape));
            }
            "sha256" => digest = Some(v.to_owned()),
            _ => match k.strip_prefix("model.") {
                Some(field) => model.push((field.to_owned(), v.to_owned())),
                None => return Err(bad(format!("unknown manifest key `{k}`"))),
            },
        }
    }
    let step = step.ok_or_else(|| bad("manifest lacks the step"))?;
    let digest = digest.ok_or_else(|| bad("manifest lacks the checksum"))?;
    if hex(&Sha256::digest(data)) != digest {
        return Err(bad("checksum mismatch: the binary section is corrupt"));
    }
    let config = ModelConfig::from_fields(|k| model.iter().find(|(f, _)| f == k).map(|(_, v)| v.clone()))
        .map_err(|e| bad(crate::config::strip_category(&e)))?;
    let expected: usize = tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if data.len() != 4 * expected {
        return Err(bad(format!(
            "binary section has {} bytes, manifest shapes need {}",
            data.len(),
            4 * expected
        )));
    }
    let mut values = data
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
    let mut built = Vec::with_capacity(tensors.len());
    for (_, shape) in &tensors {
        let n = shape.iter().product();
        built.push(Tensor::new(shape, values.by_ref().take(n).collect())?);
    }
    let params = ModelParams::from_tensors(&config, built).map_err(|e| bad(crate::config::strip_category(&e)))?;
    for ((name, _), expected) in tensors.iter().zip(params.names()) {
        if name != expected {
            return Err(bad(format!("tensor `{name}` found where `{expected}` belongs")));
        }
    }
    Ok((step, params))
}

pub fn save<T: Float>(path: &Path, step: u64, params: &ModelParams<T>) -> Result<()> {
    std::fs::write(path, to_bytes(step, params))
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn load<T: Float>(path: &Path) -> Result<(u64, ModelParams<T>)> {
    let bytes = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes).map_err(|e| bad(format!("{}: {}", path.display(), crate::config::strip_category(&e))))
}

#[cfg(test)]
mod tests {
    use mdnmt::heads::HeadKind;

    use super::*;

    fn params(kind: HeadKind, seed: u64) -> ModelParams<f32> {
        let cfg = ModelConfig {
            d_model: 12,
            n_heads: 2,
            d_ff: 12,
            n_enc_layers: 1,
            n_dec_layers: 2,
            dropout: 0.1,
            max_len: 20,
            vocab_size: 23,
            head_kind: kind,
            n_groups: 2,
            seed,
        };
        let mut p = ModelParams::init(&cfg, seed).unwrap();
        // non-trivial values everywhere, including the zero-initialized ones
        for (i, t) in p.tensors_mut().iter_mut().enumerate() {
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                *x += (i * 31 + j) as f32 * 1e-3 - 0.01;
            }
        }
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        for kind in [HeadKind::Vanilla, HeadKind::DomSpec, HeadKind::DomExtr, HeadKind::DomSpecExtr] {
            let p = params(kind, 3);
            let (step, q) = from_bytes::<f32>(&to_bytes(77, &p)).unwrap();
            assert_eq!(step, 77);
            assert_eq!(q.config, p.config);
            assert!(q.bitwise_eq(&p));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let p = params(HeadKind::DomExtr, 1);
        let mut bytes = to_bytes(5, &p);
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        let bytes = to_bytes(5, &p);
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 4]).is_err());
        assert!(from_bytes::<f32>(b"junk\ndata\n").is_err());
        let key = b"model.vocab_size = 23";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        let mut edited = bytes.clone();
        edited[at + key.len() - 1] = b'4';
        assert!(matches!(from_bytes::<f32>(&edited), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wide_values_are_stored_as_f32() {
        let p = params(HeadKind::Vanilla, 2).cast::<f64>();
        let (_, q) = from_bytes::<f64>(&to_bytes(1, &p)).unwrap();
        assert!(q.bitwise_eq(&p));
    }
}
