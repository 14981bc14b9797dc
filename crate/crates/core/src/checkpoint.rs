//! Binary checkpoint container: magic, version, named little-endian f32
//! tensors and a trailing CRC32 over everything before it. Round trips are
//! bit-identical.

use crate::agent::Agent;
use gridqa_autodiff::{AdamState, Tensor};
use indexmap::IndexMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 5] = b"ABYA1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {MAGIC:?}")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("entry name is not valid utf-8")]
    BadName,
    #[error("checkpoint does not match the model: missing {missing:?}, unexpected {unexpected:?}")]
    SchemaMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("entry {name}: dims {got:?} do not match expected {expected:?}")]
    DimsMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

/// Serializes named tensors in iteration order.
pub fn save(path: &Path, entries: &IndexMap<String, Tensor<f32>>) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.dims().len() as u32).to_le_bytes());
        for &d in tensor.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

/// Reads a checkpoint back, verifying magic, version and CRC.
pub fn load(path: &Path) -> Result<IndexMap<String, Tensor<f32>>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < MAGIC.len() + 8 + 4 {
        return Err(CheckpointError::Truncated("header"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    if &body[..5] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = 5usize;
    let read_u32 = |pos: &mut usize, what: &'static str| -> Result<u32, CheckpointError> {
        if *pos + 4 > body.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let v = u32::from_le_bytes(body[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let version = read_u32(&mut pos, "version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut pos, "entry count")? as usize;
    let mut entries = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut pos, "name length")? as usize;
        if pos + name_len > body.len() {
            return Err(CheckpointError::Truncated("name"));
        }
        let name = std::str::from_utf8(&body[pos..pos + name_len])
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        pos += name_len;
        let rank = read_u32(&mut pos, "rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut pos, "dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        if pos + 4 * numel > body.len() {
            return Err(CheckpointError::Truncated("payload"));
        }
        let data: Vec<f32> = body[pos..pos + 4 * numel]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 4 * numel;
        entries.insert(name, Tensor::from_vec(&dims, data));
    }
    if pos != body.len() {
        return Err(CheckpointError::Truncated("trailing bytes"));
    }
    Ok(entries)
}

fn param_key(name: &str) -> String {
    format!("param/{name}")
}

/// Saves all agent parameters plus, when given, the optimizer moments and
/// step count.
pub fn save_agent(
    path: &Path,
    agent: &Agent<f32>,
    adam: Option<&AdamState<f32>>,
) -> Result<(), CheckpointError> {
    let mut entries = IndexMap::new();
    for (name, p) in agent.params.iter() {
        entries.insert(param_key(name), p.value.clone());
    }
    if let Some(state) = adam {
        for (name, _) in agent.params.iter() {
            let (m, v) = state.moments(name);
            entries.insert(format!("adam.m/{name}"), m.clone());
            entries.insert(format!("adam.v/{name}"), v.clone());
        }
        entries.insert("adam.t".to_string(), Tensor::scalar(state.step_count() as f32));
    }
    save(path, &entries)
}

/// What a checkpoint's parameter set covers relative to an agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    /// Every agent parameter present: a full restore.
    Full,
    /// Exactly the question-policy parameters: a pretrained LM init.
    LanguageModelOnly,
}

/// Loads parameters into the agent. A full checkpoint must cover the agent's
/// parameter set exactly (a baseline checkpoint therefore cannot load into a
/// question-asking model); a checkpoint holding only `lm.*` entries
/// initializes the question policy. Optimizer moments are restored when both
/// present and requested.
pub fn load_agent(
    path: &Path,
    agent: &mut Agent<f32>,
    mut adam: Option<&mut AdamState<f32>>,
) -> Result<Coverage, CheckpointError> {
    let entries = load(path)?;
    let file_params: Vec<String> = entries
        .keys()
        .filter_map(|k| k.strip_prefix("param/"))
        .map(|s| s.to_string())
        .collect();
    let agent_params: Vec<String> = agent.params.names().map(|s| s.to_string()).collect();

    let lm_only = !file_params.is_empty() && file_params.iter().all(|n| n.starts_with("lm."));
    let coverage = if lm_only && file_params.len() != agent_params.len() {
        let agent_lm: Vec<&String> =
            agent_params.iter().filter(|n| n.starts_with("lm.")).collect();
        let missing: Vec<String> = agent_lm
            .iter()
            .filter(|n| !file_params.contains(n))
            .map(|n| n.to_string())
            .collect();
        let unexpected: Vec<String> = file_params
            .iter()
            .filter(|n| !agent_lm.contains(n))
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(CheckpointError::SchemaMismatch { missing, unexpected });
        }
        Coverage::LanguageModelOnly
    } else {
        let missing: Vec<String> = agent_params
            .iter()
            .filter(|n| !file_params.contains(n))
            .cloned()
            .collect();
        let unexpected: Vec<String> = file_params
            .iter()
            .filter(|n| !agent_params.contains(n))
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(CheckpointError::SchemaMismatch { missing, unexpected });
        }
        Coverage::Full
    };

    for name in &file_params {
        let tensor = &entries[&param_key(name)];
        let param = agent.params.get_mut(name);
        if param.value.dims() != tensor.dims() {
            return Err(CheckpointError::DimsMismatch {
                name: name.clone(),
                expected: param.value.dims().to_vec(),
                got: tensor.dims().to_vec(),
            });
        }
        param.value = tensor.clone();
    }

    if coverage == Coverage::Full {
        if let Some(state) = adam.as_deref_mut() {
            if let Some(t) = entries.get("adam.t") {
                for name in &file_params {
                    let m = entries
                        .get(&format!("adam.m/{name}"))
                        .ok_or(CheckpointError::Truncated("adam.m"))?;
                    let v = entries
                        .get(&format!("adam.v/{name}"))
                        .ok_or(CheckpointError::Truncated("adam.v"))?;
                    state.restore(name, m.clone(), v.clone());
                }
                state.set_step_count(t.item() as u64);
            }
        }
    }
    Ok(coverage)
}
