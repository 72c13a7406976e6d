//! Loading published pretrained tensors into a backbone.
//!
//! The weights file is a safetensors document using this crate's parameter
//! names (see `scripts/export_pretrained.py` for the converter from
//! torchvision's published checkpoints). Every backbone tensor except the
//! embedding head must be present; the head is always freshly initialised.
//! Bias and shift tensors of the published models are deliberately not
//! consumed: the backbones carry no additive parameters.

use super::{Architecture, Backbone};
use crate::nn::Parameterized;
use crate::{Error, Result, Scalar};
use safetensors::tensor::Dtype;
use safetensors::SafeTensors;
use std::path::Path;

fn read_f32<F: Scalar>(data: &[u8]) -> Vec<F> {
    data.chunks_exact(4)
        .map(|c| F::from_f64_c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect()
}

pub(super) fn load_into<F: Scalar>(
    backbone: &mut Backbone<F>,
    architecture: Architecture,
    path: &Path,
) -> Result<()> {
    let buf = std::fs::read(path).map_err(|e| {
        Error::PretrainedUnavailable(format!("cannot read {}: {e}", path.display()))
    })?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| {
        Error::PretrainedUnavailable(format!("cannot parse {}: {e:?}", path.display()))
    })?;

    let mut missing: Vec<String> = Vec::new();
    let mut failure: Option<Error> = None;
    let mut copy = |name: &str, value: &mut dyn FnMut(&[u8], &[usize]) -> Result<()>| {
        match st.tensor(name) {
            Ok(t) => {
                if t.dtype() != Dtype::F32 {
                    failure = Some(Error::PretrainedUnavailable(format!(
                        "tensor '{name}' in {} is not f32",
                        path.display()
                    )));
                    return;
                }
                if let Err(e) = value(t.data(), t.shape()) {
                    failure = Some(e);
                }
            }
            Err(_) => missing.push(name.to_string()),
        }
    };

    let net: &mut dyn Parameterized<F> = match (architecture, backbone) {
        (Architecture::Vgg3, Backbone::Vgg3(net)) => net,
        (Architecture::ResNet18, Backbone::ResNet18(net)) => net,
        _ => unreachable!("backbone matches architecture by construction"),
    };

    net.visit_params_mut(&mut |meta, mut value, _| {
        if meta.name == "head.weight" {
            return; // head is always freshly initialised
        }
        copy(&meta.name, &mut |data, shape| {
            if value.shape() != shape {
                return Err(Error::PretrainedUnavailable(format!(
                    "tensor '{}' has shape {shape:?} but the network expects {:?} \
                     (for grayscale datasets build the backbone with 3 input channels)",
                    meta.name,
                    value.shape()
                )));
            }
            for (dst, src) in value.iter_mut().zip(read_f32::<F>(data)) {
                *dst = src;
            }
            Ok(())
        });
    });
    net.visit_buffers_mut(&mut |name, mut value| {
        copy(name, &mut |data, shape| {
            if value.shape() != shape {
                return Err(Error::PretrainedUnavailable(format!(
                    "buffer '{name}' has shape {shape:?} but the network expects {:?}",
                    value.shape()
                )));
            }
            for (dst, src) in value.iter_mut().zip(read_f32::<F>(data)) {
                *dst = src;
            }
            Ok(())
        });
    });

    if let Some(e) = failure {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::PretrainedUnavailable(format!(
            "{} lacks required tensors: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(())
}
