use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Architecture, ModelGraph};
use crate::nn::{InitScheme, ParameterStore};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"EMAP";
pub const VERSION: u8 = 1;
const PREFIX: usize = 4 + 1 + 4;

/// Location of one parameter tensor in the blob section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: usize,
    pub trainable: bool,
}

/// Training provenance stored with the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: Option<TrainConfig>,
    pub protocol: Option<String>,
    pub dataset_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub epoch: Option<usize>,
    /// Left empty by default so identical runs give identical files.
    pub timestamps: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    image_size: usize,
    init: InitScheme,
    manifest: Vec<ManifestEntry>,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

pub fn encode_checkpoint(model: &ModelGraph, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for p in model.params.iter() {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            trainable: p.trainable,
        });
        offset += p.value.numel() * 4;
    }
    let header = Header {
        architecture: model.arch,
        image_size: model.image_size,
        init: model.init,
        manifest,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::format("header_length", "header exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + offset + 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.iter() {
        out.extend_from_slice(&p.value.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelGraph, CheckpointMeta)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format("magic", "not an EMAP checkpoint"));
    }
    if bytes.len() < 5 || bytes[4] != VERSION {
        let found = bytes.get(4).map_or("missing".to_string(), |v| v.to_string());
        return Err(Error::format("version", format!("expected {VERSION}, found {found}")));
    }
    if bytes.len() < PREFIX + 4 {
        return Err(Error::format("crc32", "file too short to hold a checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header_len = u32::from_le_bytes(body[5..9].try_into().expect("four bytes")) as usize;
    let blobs_start = PREFIX
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::format("header_length", format!("{header_len} exceeds the file")))?;
    let header: Header =
        serde_json::from_slice(&body[PREFIX..blobs_start]).map_err(|e| Error::format("header", e.to_string()))?;
    let blobs = &body[blobs_start..];
    let mut store = ParameterStore::new();
    let mut expected_offset = 0;
    for entry in &header.manifest {
        let field = || format!("manifest[{}]", entry.name);
        if entry.offset != expected_offset {
            return Err(Error::format(
                field(),
                format!(
                    "offset {} but the previous blob ends at {expected_offset}",
                    entry.offset
                ),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * 4;
        if end > blobs.len() {
            return Err(Error::format(
                field(),
                format!("blob ends at {end} but only {} blob bytes are present", blobs.len()),
            ));
        }
        let values = blobs[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let value = Tensor::new(entry.shape.clone(), values).map_err(|e| Error::format(field(), e.to_string()))?;
        store
            .push(entry.name.clone(), value, entry.trainable)
            .map_err(|e| Error::format(field(), e.to_string()))?;
        expected_offset = end;
    }
    if expected_offset != blobs.len() {
        return Err(Error::format(
            "manifest",
            format!(
                "manifest covers {expected_offset} bytes but {} blob bytes are present",
                blobs.len()
            ),
        ));
    }
    let model = ModelGraph::from_store(header.architecture, header.image_size, store, header.init)
        .map_err(|e| Error::format("architecture", e.to_string()))?;
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &ModelGraph, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { field, message } => Error::File {
            path: path.to_path_buf(),
            message: format!("format error in {field}: {message}"),
        },
        Error::Checksum { .. } => Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
        other => other,
    })
}

/// Hex SHA-256 of a file, for recording the inputs of a run.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BlackBoxSpec, DecoderSpec};
    use crate::nn::InitKind;
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    fn model() -> ModelGraph {
        let spec = BlackBoxSpec {
            conv_layers: 1,
            filters: 2,
            kernel: 3,
        };
        let bb = ModelGraph::build_blackbox(spec, 16, InitScheme::glorot(3)).unwrap();
        let dec = DecoderSpec {
            conv_layers: 2,
            filters: 3,
            kernel: 3,
            ..Default::default()
        };
        ModelGraph::build_interpretable(&bb, dec, InitScheme::new(InitKind::RandomNormal, 5)).unwrap()
    }

    fn probe() -> Tensor {
        let mut rng = stream(0, Stream::Probe, &[]);
        Tensor::from_fn(&[4, 1, 16, 16], |_| rng.random::<f32>())
    }

    #[test]
    fn round_trip_gives_identical_outputs_and_flags() {
        let m = model();
        let meta = CheckpointMeta {
            epoch: Some(7),
            ..Default::default()
        };
        let bytes = encode_checkpoint(&m, &meta).unwrap();
        let (back, meta_back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(
            m.forward(&probe()).unwrap().to_le_bytes(),
            back.forward(&probe()).unwrap().to_le_bytes()
        );
        let flags = |g: &ModelGraph| g.params.iter().map(|p| p.trainable).collect::<Vec<_>>();
        assert_eq!(flags(&m), flags(&back));
        assert_eq!(encode_checkpoint(&back, &meta_back).unwrap(), bytes);
    }

    #[test]
    fn header_echoes_init_scheme() {
        let bytes = encode_checkpoint(&model(), &CheckpointMeta::default()).unwrap();
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
        assert_eq!(header["init"]["kind"], "random_normal");
        assert_eq!(header["init"]["seed"], 5);
    }

    #[test]
    fn corruption_is_reported_by_field() {
        let bytes = encode_checkpoint(&model(), &CheckpointMeta::default()).unwrap();
        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(decode_checkpoint(truncated), Err(Error::Checksum { .. })));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checksum { .. })));

        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(decode_checkpoint(&version), Err(Error::Format { field, .. }) if field == "version"));

        assert!(matches!(decode_checkpoint(b"NOPE"), Err(Error::Format { field, .. }) if field == "magic"));
    }

    #[test]
    fn manifest_blob_disagreement_names_the_field() {
        let bytes = encode_checkpoint(&model(), &CheckpointMeta::default()).unwrap();
        let mut body = bytes[..bytes.len() - 4 - 4].to_vec();
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        let err = decode_checkpoint(&body).unwrap_err();
        assert!(
            matches!(err, Error::Format { ref field, .. } if field.starts_with("manifest")),
            "{err}"
        );
    }

    #[test]
    fn load_error_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emap");
        std::fs::write(&path, b"EMAP\x01garbage").unwrap();
        let msg = load_checkpoint(&path).unwrap_err().to_string();
        assert!(msg.contains("m.emap"), "{msg}");
    }
}
