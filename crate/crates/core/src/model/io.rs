//! Binary weights file.
//!
//! Little-endian layout:
//! ```text
//! magic    8 bytes  "KTWEIGHT"
//! version  u32
//! config   u32 byte length + UTF-8 `key=value` lines
//! count    u32 number of tensors
//! tensor   u16 name length, name, u8 rank, rank x u64 dims, f64 payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{BatchNorm, LstmLayer, ModelConfig, ModelError, ModelWeights};

const MAGIC: &[u8; 8] = b"KTWEIGHT";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_weights<W: Write>(mut out: W, weights: &ModelWeights) -> Result<(), ModelError> {
    weights.check_shapes()?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let config = weights.config.to_string();
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(config.as_bytes())?;
    let tensors = weights.tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, (dims, data)) in tensors {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[dims.len() as u8])?;
        for d in dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes atomically: a temporary file in the target directory is renamed
/// into place.
pub fn save_weights(path: &Path, weights: &ModelWeights) -> Result<(), ModelError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    write_weights(std::io::BufWriter::new(tmp.as_file_mut()), weights)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| ModelError::Io(e.error))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            ModelError::CorruptFile(format!("unexpected end of file at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn tensor_slot<'w>(weights: &'w mut ModelWeights, name: &str) -> Option<&'w mut Vec<f64>> {
    let (prefix, field) = name.split_once('.')?;
    if let Some(i) = prefix.strip_prefix("lstm") {
        let layer = weights.layers.get_mut(i.parse::<usize>().ok()?)?;
        return match field {
            "w_input" => Some(&mut layer.w_input),
            "w_recurrent" => Some(&mut layer.w_recurrent),
            "bias" => Some(&mut layer.bias),
            _ => None,
        };
    }
    let bn = weights
        .norms
        .get_mut(prefix.strip_prefix("bn")?.parse::<usize>().ok()?)?;
    match field {
        "gamma" => Some(&mut bn.gamma),
        "beta" => Some(&mut bn.beta),
        "running_mean" => Some(&mut bn.running_mean),
        "running_var" => Some(&mut bn.running_var),
        _ => None,
    }
}

/// Parses a weights file from memory.
pub fn read_weights(bytes: &[u8]) -> Result<ModelWeights, ModelError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(ModelError::CorruptFile("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config_len = cur.u32()? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| ModelError::CorruptFile("config block is not UTF-8".into()))?;
    let entries = config_text
        .lines()
        .map(|l| {
            l.split_once('=')
                .ok_or_else(|| ModelError::CorruptFile(format!("bad config line `{l}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let config =
        ModelConfig::from_entries(entries).map_err(|e| ModelError::CorruptFile(e.to_string()))?;
    config
        .validate()
        .map_err(|e| ModelError::CorruptFile(e.to_string()))?;

    let h = config.hidden_units;
    let mut weights = ModelWeights {
        layers: (0..config.num_layers)
            .map(|l| {
                let d = if l == 0 { config.input_dim } else { h };
                LstmLayer {
                    input_dim: d,
                    hidden: h,
                    w_input: Vec::new(),
                    w_recurrent: Vec::new(),
                    bias: Vec::new(),
                }
            })
            .collect(),
        norms: (1..config.num_layers)
            .map(|_| BatchNorm {
                gamma: vec![],
                beta: vec![],
                running_mean: vec![],
                running_var: vec![],
            })
            .collect(),
        config,
    };
    let expected: std::collections::BTreeMap<String, Vec<usize>> = {
        let shaped = ModelWeights::init_with(&weights.config, &mut super::model_rng(0));
        shaped
            .tensors()
            .into_iter()
            .map(|(k, (d, _))| (k, d))
            .collect()
    };

    let count = cur.u32()? as usize;
    if count != expected.len() {
        return Err(ModelError::CorruptFile(format!(
            "{count} tensors, expected {}",
            expected.len()
        )));
    }
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| ModelError::CorruptFile("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let want = expected
            .get(&name)
            .ok_or_else(|| ModelError::CorruptFile(format!("unexpected tensor `{name}`")))?;
        if &dims != want {
            return Err(ModelError::ShapeMismatch(format!(
                "tensor `{name}` has dims {dims:?}, config implies {want:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let payload = cur.take(
            n.checked_mul(8)
                .ok_or_else(|| ModelError::CorruptFile("tensor too large".into()))?,
        )?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let slot = tensor_slot(&mut weights, &name).expect("expected tensor names resolve");
        if !slot.is_empty() {
            return Err(ModelError::CorruptFile(format!(
                "duplicate tensor `{name}`"
            )));
        }
        *slot = values;
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::CorruptFile(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    weights.check_shapes()?;
    Ok(weights)
}

pub fn load_weights(path: &Path) -> Result<ModelWeights, ModelError> {
    read_weights(&fs::read(path)?)
}

/// Loads and checks that the stored architecture matches `expected`.
pub fn load_weights_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<ModelWeights, ModelError> {
    let weights = load_weights(path)?;
    let c = &weights.config;
    if (c.input_dim, c.hidden_units, c.num_layers)
        != (
            expected.input_dim,
            expected.hidden_units,
            expected.num_layers,
        )
    {
        return Err(ModelError::ShapeMismatch(format!(
            "file holds {} layer(s) of {} units over {} inputs; expected {} of {} over {}",
            c.num_layers,
            c.hidden_units,
            c.input_dim,
            expected.num_layers,
            expected.hidden_units,
            expected.input_dim
        )));
    }
    Ok(weights)
}
