//! On-disk formats: `STB1` checkpoints, steering-vector JSON, JSONL datasets.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use clalab::model::{ModelConfig, Parameters, TensorSpec};
use clalab::steering::{SteerKind, SteeringVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"STB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    revision: u64,
    tensors: Vec<TensorSpec>,
    payload_bytes: usize,
}

/// Serializes parameters: magic, little-endian u32 header length, JSON
/// header, then the raw little-endian f64 payload.
pub fn checkpoint_bytes(params: &Parameters) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: *params.config(),
        revision: params.revision(),
        tensors: params.layout().specs().to_vec(),
        payload_bytes: params.num_params() * 8,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + header.payload_bytes);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> CliResult<Parameters> {
    if bytes.len() < 8 {
        return Err(CliError::Data("checkpoint truncated before header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CliError::Data(format!(
            "unsupported checkpoint magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| CliError::Data("checkpoint header truncated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| CliError::Data(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CliError::Data(format!("unsupported checkpoint format version {}, expected {FORMAT_VERSION}", header.format_version)));
    }
    let payload = &bytes[8 + hlen..];
    let expected: usize = header.tensors.iter().map(|t| t.len() * 8).sum();
    if payload.len() != header.payload_bytes || payload.len() != expected {
        return Err(CliError::Data(format!(
            "checkpoint payload is {} bytes, header declares {} and tensors need {expected}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let data: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let params = Parameters::from_raw(header.config, data, header.revision)?;
    if params.layout().specs() != header.tensors.as_slice() {
        return Err(CliError::Data("checkpoint tensor table does not match its config".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &Parameters) -> CliResult<()> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> CliResult<Parameters> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_checkpoint(&bytes)
}

/// Steering-vector file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorFile {
    pub kind: SteerKind,
    pub layer: usize,
    pub dim: usize,
    pub gamma_default: f64,
    pub model_revision: u64,
    pub values: Vec<f64>,
    /// Target language the vector was extracted for; applies to all items when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_pairs: Option<usize>,
}

impl VectorFile {
    pub fn new(v: &SteeringVector, gamma_default: f64, lang: Option<usize>) -> Self {
        Self {
            kind: v.kind,
            layer: v.layer,
            dim: v.dim(),
            gamma_default,
            model_revision: v.model_revision,
            values: v.values.clone(),
            lang,
            n_pairs: Some(v.n_pairs),
        }
    }

    pub fn vector(&self) -> SteeringVector {
        SteeringVector {
            kind: self.kind,
            layer: self.layer,
            values: self.values.clone(),
            n_pairs: self.n_pairs.unwrap_or(0),
            model_revision: self.model_revision,
        }
    }
}

pub fn save_vector(path: &Path, v: &VectorFile) -> CliResult<()> {
    let mut s = serde_json::to_string(v).map_err(|e| CliError::Data(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn load_vector(path: &Path) -> CliResult<VectorFile> {
    let v: VectorFile = read_json(path)?;
    if v.values.len() != v.dim {
        return Err(CliError::Data(format!("{}: dim {} but {} values", path.display(), v.dim, v.values.len())));
    }
    if v.values.iter().any(|x| !x.is_finite()) {
        return Err(CliError::Numeric(format!("{}: non-finite vector values", path.display())));
    }
    Ok(v)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let s = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r).map_err(|e| CliError::Data(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clalab::init_model;

    fn tiny() -> Parameters {
        init_model(&ModelConfig { vocab_size: 10, n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, max_seq_len: 8, seed: 3 }).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = tiny();
        let bytes = checkpoint_bytes(&p);
        let q = parse_checkpoint(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(checkpoint_bytes(&q), bytes);
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let mut bytes = checkpoint_bytes(&tiny());
        bytes[3] = b'2';
        assert!(matches!(parse_checkpoint(&bytes), Err(CliError::Data(_))));

        let p = tiny();
        let good = checkpoint_bytes(&p);
        let hlen = u32::from_le_bytes(good[4..8].try_into().unwrap()) as usize;
        let header = String::from_utf8(good[8..8 + hlen].to_vec()).unwrap().replace("\"format_version\":1", "\"format_version\":9");
        let mut bad = good[..4].to_vec();
        bad.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bad.extend_from_slice(header.as_bytes());
        bad.extend_from_slice(&good[8 + hlen..]);
        let err = parse_checkpoint(&bad).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = checkpoint_bytes(&tiny());
        assert!(parse_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        assert!(parse_checkpoint(&bytes[..6]).is_err());
    }
}
