//! Self-describing checkpoint container.
//!
//! One safetensors file holds every parameter tensor, the normalisation
//! running statistics, the frozen anchor, and the final Reference
//! embeddings; the string metadata block carries a format version, the
//! architecture tag, embedding dimension, init mode, input shape, the
//! training configuration as JSON, and optionally the dataset id. This is
//! enough to score new samples without touching the original dataset.

use super::{build_backbone, Architecture, BuildOptions, Embedding, EmbeddingNetwork, InitMode};
use crate::nn::Parameterized;
use crate::{Error, Result, Scalar};
use ndarray::{Array1, Array2, Axis};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub struct LoadedCheckpoint<F: Scalar> {
    pub network: EmbeddingNetwork<F>,
    pub anchor: Embedding<F>,
    pub reference_embeddings: Vec<Embedding<F>>,
    /// Training configuration as the JSON it was saved with.
    pub config_json: String,
    pub dataset_id: Option<String>,
}

fn to_f32_bytes<F: Scalar>(values: impl Iterator<Item = F>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&(v.to_f64_c() as f32).to_le_bytes());
    }
    out
}

fn from_f32_bytes<F: Scalar>(bytes: &[u8]) -> Vec<F> {
    bytes
        .chunks_exact(4)
        .map(|c| F::from_f64_c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect()
}

/// Writes a checkpoint for a trained (or freshly built) network.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    network: &EmbeddingNetwork<F>,
    anchor: &Embedding<F>,
    reference_embeddings: &[Embedding<F>],
    config_json: &str,
    dataset_id: Option<&str>,
) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    network.visit_params(&mut |meta, view| {
        tensors.push((
            format!("param.{}", meta.name),
            view.shape().to_vec(),
            to_f32_bytes(view.iter().copied()),
        ));
    });
    network.visit_buffers(&mut |name, view| {
        tensors.push((
            format!("buffer.{name}"),
            view.shape().to_vec(),
            to_f32_bytes(view.iter().copied()),
        ));
    });
    tensors.push((
        "anchor".to_string(),
        vec![anchor.len()],
        to_f32_bytes(anchor.as_slice().iter().copied()),
    ));
    let n = reference_embeddings.len();
    let l = network.embedding_dim();
    let mut ref_bytes = Vec::with_capacity(n * l * 4);
    for e in reference_embeddings {
        if e.len() != l {
            return Err(Error::ShapeMismatch(format!(
                "reference embedding length {} != {l}",
                e.len()
            )));
        }
        ref_bytes.extend(to_f32_bytes(e.as_slice().iter().copied()));
    }
    tensors.push(("reference_embeddings".to_string(), vec![n, l], ref_bytes));

    let (c, h, w) = network.input_shape();
    let mut meta = HashMap::new();
    meta.insert(
        "format_version".to_string(),
        CHECKPOINT_FORMAT_VERSION.to_string(),
    );
    meta.insert("architecture".to_string(), network.architecture().to_string());
    meta.insert(
        "embedding_dim".to_string(),
        network.embedding_dim().to_string(),
    );
    meta.insert("init_mode".to_string(), network.init_mode().to_string());
    meta.insert("input_shape".to_string(), format!("{c},{h},{w}"));
    meta.insert("config".to_string(), config_json.to_string());
    if let Some(id) = dataset_id {
        meta.insert("dataset_id".to_string(), id.to_string());
    }

    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("bad tensor {name}: {e:?}")))
        })
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(views, &Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("write {}: {e:?}", path.display())))
}

fn meta_field<'m>(meta: &'m HashMap<String, String>, key: &str, path: &Path) -> Result<&'m str> {
    meta.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata '{key}'", path.display())))
}

/// Reads a checkpoint and reconstructs the network, anchor and Reference
/// embeddings. Bias-freedom is re-audited after loading.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<LoadedCheckpoint<F>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&buf)
        .map_err(|e| Error::Checkpoint(format!("parse {}: {e:?}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&buf)
        .map_err(|e| Error::Checkpoint(format!("parse header {}: {e:?}", path.display())))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{}: no metadata block", path.display())))?;

    let version: u32 = meta_field(meta, "format_version", path)?
        .parse()
        .map_err(|_| Error::Checkpoint("bad format_version".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {version} (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let architecture: Architecture = meta_field(meta, "architecture", path)?.parse()?;
    let embedding_dim: usize = meta_field(meta, "embedding_dim", path)?
        .parse()
        .map_err(|_| Error::Checkpoint("bad embedding_dim".into()))?;
    let init_mode: InitMode = meta_field(meta, "init_mode", path)?.parse()?;
    let shape_parts: Vec<usize> = meta_field(meta, "input_shape", path)?
        .split(',')
        .map(|p| p.parse().map_err(|_| Error::Checkpoint("bad input_shape".into())))
        .collect::<Result<_>>()?;
    if shape_parts.len() != 3 {
        return Err(Error::Checkpoint("input_shape must have 3 fields".into()));
    }
    let input_shape = (shape_parts[0], shape_parts[1], shape_parts[2]);
    let config_json = meta_field(meta, "config", path)?.to_string();
    let dataset_id = meta.get("dataset_id").cloned();

    // Build with Kaiming placeholders, then overwrite everything by name.
    let mut network = build_backbone::<F>(
        architecture,
        embedding_dim,
        InitMode::Kaiming,
        input_shape,
        &BuildOptions::default(),
    )?;
    network.init_mode = init_mode;

    let fetch = |name: &str| -> Result<(Vec<usize>, Vec<F>)> {
        let t = st
            .tensor(name)
            .map_err(|_| Error::Checkpoint(format!("{}: missing tensor '{name}'", path.display())))?;
        if t.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor '{name}' is not f32")));
        }
        Ok((t.shape().to_vec(), from_f32_bytes(t.data())))
    };

    let mut load_err: Option<Error> = None;
    network.visit_params_mut(&mut |meta_p, mut value, _| {
        if load_err.is_some() {
            return;
        }
        match fetch(&format!("param.{}", meta_p.name)) {
            Ok((shape, data)) => {
                if value.shape() != shape.as_slice() {
                    load_err = Some(Error::Checkpoint(format!(
                        "tensor 'param.{}' has shape {shape:?}, expected {:?}",
                        meta_p.name,
                        value.shape()
                    )));
                    return;
                }
                for (dst, src) in value.iter_mut().zip(data) {
                    *dst = src;
                }
            }
            Err(e) => load_err = Some(e),
        }
    });
    network.visit_buffers_mut(&mut |name, mut value| {
        if load_err.is_some() {
            return;
        }
        match fetch(&format!("buffer.{name}")) {
            Ok((shape, data)) => {
                if value.shape() != shape.as_slice() {
                    load_err = Some(Error::Checkpoint(format!(
                        "tensor 'buffer.{name}' has shape {shape:?}, expected {:?}",
                        value.shape()
                    )));
                    return;
                }
                for (dst, src) in value.iter_mut().zip(data) {
                    *dst = src;
                }
            }
            Err(e) => load_err = Some(e),
        }
    });
    if let Some(e) = load_err {
        return Err(e);
    }

    let offenders = crate::nn::audit_bias_free(&network);
    if !offenders.is_empty() {
        return Err(Error::Checkpoint(format!(
            "loaded network has additive parameters: {offenders:?}"
        )));
    }

    let (a_shape, a_data) = fetch("anchor")?;
    if a_shape != [embedding_dim] {
        return Err(Error::Checkpoint("anchor shape mismatch".into()));
    }
    let anchor = Embedding::new(Array1::from_vec(a_data));

    let (r_shape, r_data) = fetch("reference_embeddings")?;
    if r_shape.len() != 2 || r_shape[1] != embedding_dim {
        return Err(Error::Checkpoint("reference_embeddings shape mismatch".into()));
    }
    let refs = Array2::from_shape_vec((r_shape[0], r_shape[1]), r_data)
        .map_err(|e| Error::Checkpoint(format!("reference_embeddings: {e}")))?;
    let reference_embeddings = refs
        .axis_iter(Axis(0))
        .map(|row| Embedding::new(row.to_owned()))
        .collect();

    Ok(LoadedCheckpoint {
        network,
        anchor,
        reference_embeddings,
        config_json,
        dataset_id,
    })
}
