//! Model checkpoint file format.
//!
//! A checkpoint is a single binary file:
//! - magic string `ACEv1`
//! - a little-endian u64 byte length, then that many bytes of UTF-8 JSON
//!   holding the [`CheckpointHeader`]
//! - a sequence of tensor records, each `(name length: u64 LE, name bytes,
//!   rank: u64 LE, dims: u64 LE each, data: f64 LE each)`, read until EOF.
//!
//! Tensors are written in a fixed order (model parameters sorted by name,
//! then `centroids`, then optionally `knn.features`), so saving a loaded
//! checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ace_core::harness::ExperimentConfig;
use ace_core::{Centroids, KnnIndex, ModelConfig, ModelParams, Tensor};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 5] = b"ACEv1";
const CENTROIDS_NAME: &str = "centroids";
const KNN_FEATURES_NAME: &str = "knn.features";

/// Everything needed to rebuild the scoring pipeline and reproduce the split
/// the model was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub experiment: ExperimentConfig,
    pub model: ModelConfig,
    pub k_ind: usize,
    pub seed: u64,
}

/// A trained model with its scoring artifacts.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub centroids: Centroids,
    pub knn: Option<KnnIndex>,
}

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    write_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    write_u64(buf, tensor.rank() as u64);
    for &d in tensor.shape() {
        write_u64(buf, d as u64);
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    let header_json =
        serde_json::to_vec(&checkpoint.header).context("serializing checkpoint header")?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u64(&mut buf, header_json.len() as u64);
    buf.extend_from_slice(&header_json);
    for (name, tensor) in checkpoint.params.tensors() {
        write_tensor(&mut buf, name, tensor);
    }
    write_tensor(&mut buf, CENTROIDS_NAME, checkpoint.centroids.matrix());
    if let Some(knn) = &checkpoint.knn {
        write_tensor(&mut buf, KNN_FEATURES_NAME, knn.features());
    }
    Ok(buf)
}

/// Writes a checkpoint file.
pub fn save(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(checkpoint)?;
    fs::write(path, bytes).with_context(|| format!("writing checkpoint {}", path.display()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(
                "checkpoint is truncated: needed {n} bytes for {what} at offset {}, \
                 only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            );
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses a checkpoint from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic string")?;
    if magic != MAGIC {
        bail!(
            "not an ACE checkpoint: expected magic {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(magic)
        );
    }
    let header_len = r.u64("header length")? as usize;
    let header_bytes = r.take(header_len, "header JSON")?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).context("parsing checkpoint header JSON")?;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    while !r.done() {
        let name_len = r.u64("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| anyhow!("checkpoint tensor name is not UTF-8"))?;
        let rank = r.u64("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| anyhow!("checkpoint tensor {name:?} has overflowing dimensions"))?;
        let data_len = numel
            .checked_mul(8)
            .ok_or_else(|| anyhow!("checkpoint tensor {name:?} has overflowing dimensions"))?;
        let data_bytes = r.take(data_len, "tensor data")?;
        let data: Vec<f64> = data_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| anyhow!("checkpoint tensor {name:?}: {e}"))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            bail!("checkpoint holds tensor {name:?} twice");
        }
    }

    let centroid_matrix = tensors
        .remove(CENTROIDS_NAME)
        .ok_or_else(|| anyhow!("checkpoint is missing the {CENTROIDS_NAME:?} tensor"))?;
    let centroids = Centroids::from_matrix(centroid_matrix)
        .map_err(|e| anyhow!("checkpoint centroids: {e}"))?;
    let knn = match tensors.remove(KNN_FEATURES_NAME) {
        Some(features) => Some(
            KnnIndex::new(features, header.experiment.knn_k)
                .map_err(|e| anyhow!("checkpoint knn index: {e}"))?,
        ),
        None => None,
    };
    let params = ModelParams::from_tensors(&header.model, tensors)
        .map_err(|e| anyhow!("checkpoint parameters: {e}"))?;

    Ok(Checkpoint {
        header,
        params,
        centroids,
        knn,
    })
}

/// Reads a checkpoint file.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes =
        fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    from_bytes(&bytes).with_context(|| format!("parsing checkpoint {}", path.display()))
}
