//! Single-file checkpoints: a JSON header (metadata, parameter manifest and
//! alias table) followed by a raw little-endian value blob and a SHA-256
//! checksum. Writes are atomic (temp file + rename); loads verify the
//! checksum before constructing anything, so a truncated or corrupt file
//! never yields a partial parameter set.

use crate::error::{Error, Result};
use crate::model::{ParameterSet, Stage};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DTCP";
const FORMAT_VERSION: u32 = 1;

/// Training metadata carried by a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub step: usize,
    pub dev_loss: f64,
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    path: String,
    shape: Vec<usize>,
    /// Element offset into the blob.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: CheckpointMeta,
    params: Vec<ParamRecord>,
    aliases: Vec<(String, String)>,
}

/// Serializes `params` and `meta` to `path`, bit-exactly.
pub fn save_checkpoint<F: Scalar>(
    params: &ParameterSet<F>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let mut records = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, p) in params.iter() {
        records.push(ParamRecord {
            path: name.to_string(),
            shape: p.shape.clone(),
            offset,
        });
        for &v in &p.data {
            v.write_le(&mut blob);
        }
        offset += p.data.len();
    }
    let header = Header {
        dtype: F::DTYPE.to_string(),
        meta: meta.clone(),
        params: records,
        aliases: params
            .aliases()
            .map(|(a, t)| (a.to_string(), t.to_string()))
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut out = Vec::with_capacity(16 + header_json.len() + blob.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`] with matching scalar type.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(ParameterSet<F>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 + 32 {
        return Err(Error::Checkpoint(format!(
            "{}: file too short ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch (truncated or corrupt)",
            path.display()
        )));
    }
    if &body[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if body.len() < 16 + header_len {
        return Err(Error::Checkpoint(format!(
            "{}: header extends past end of file",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&body[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("{}: header decode: {e}", path.display())))?;
    if header.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "{}: dtype {} does not match requested {}",
            path.display(),
            header.dtype,
            F::DTYPE
        )));
    }
    let blob = &body[16 + header_len..];
    let total_elems: usize = header
        .params
        .iter()
        .map(|r| r.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total_elems * F::BYTE_WIDTH {
        return Err(Error::Checkpoint(format!(
            "{}: blob holds {} bytes, manifest wants {}",
            path.display(),
            blob.len(),
            total_elems * F::BYTE_WIDTH
        )));
    }

    let mut params = ParameterSet::new();
    for record in &header.params {
        let n: usize = record.shape.iter().product();
        let start = record.offset * F::BYTE_WIDTH;
        let end = start + n * F::BYTE_WIDTH;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {} overruns blob",
                path.display(),
                record.path
            )));
        }
        let data: Vec<F> = blob[start..end]
            .chunks_exact(F::BYTE_WIDTH)
            .map(F::read_le)
            .collect();
        params.insert(&record.path, record.shape.clone(), data);
    }
    for (alias, target) in &header.aliases {
        if !params.contains(target) {
            return Err(Error::Checkpoint(format!(
                "{}: alias {alias} points at missing parameter {target}",
                path.display()
            )));
        }
        params.add_alias(alias, target);
    }
    Ok((params, header.meta))
}

/// True when two checkpoints describe the same parameter layout (paths,
/// shapes and aliases), which averaging requires.
pub fn same_manifest<F: Scalar>(a: &ParameterSet<F>, b: &ParameterSet<F>) -> bool {
    let pa: Vec<_> = a.iter().map(|(n, p)| (n.to_string(), p.shape.clone())).collect();
    let pb: Vec<_> = b.iter().map(|(n, p)| (n.to_string(), p.shape.clone())).collect();
    let aa: Vec<_> = a.aliases().collect();
    let ab: Vec<_> = b.aliases().collect();
    pa == pb && aa == ab
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_parameters;
    use crate::model::{CtcSharing, ModelConfig};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            step: 42,
            dev_loss: 3.25,
            stage: Stage::Stage1,
            config_hash: "deadbeef".into(),
            seed: 7,
            code_version: crate::CODE_VERSION.into(),
        }
    }

    fn toy_params(sharing: CtcSharing) -> ParameterSet<f32> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            feat_dim: 4,
            vocab_size: 6,
            conv_kernel: 3,
            ctc_sharing: sharing,
            ..ModelConfig::default()
        };
        init_parameters(&cfg, Stage::Stage1, 77).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let params = toy_params(CtcSharing::C1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &meta(), &path).unwrap();
        let (loaded, m) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(m, meta());
        for ((na, pa), (nb, pb)) in params.iter().zip(loaded.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.shape, pb.shape);
            assert!(pa
                .data
                .iter()
                .zip(pb.data.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_blob_fails_checksum_with_no_partial_load() {
        let params = toy_params(CtcSharing::C1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &meta(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 100);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let params = toy_params(CtcSharing::C1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &meta(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let params = toy_params(CtcSharing::C1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &meta(), &path).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn c3_alias_table_survives_roundtrip_with_mutation() {
        let mut params = toy_params(CtcSharing::C3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &meta(), &path).unwrap();
        let (mut loaded, _) = load_checkpoint::<f32>(&path).unwrap();

        for p in [&mut params, &mut loaded] {
            let n = p.get("ctc.ns_h.b").unwrap().data.len();
            p.set_data("ctc.ns_h.b", (0..n).map(|i| i as f32).collect())
                .unwrap();
        }
        assert_eq!(
            loaded.get("ctc.s_l.b").unwrap().data,
            params.get("ctc.s_l.b").unwrap().data,
        );
        assert_eq!(loaded.resolve("ctc.s_h.w"), "ctc.s_l.w");
    }
}
