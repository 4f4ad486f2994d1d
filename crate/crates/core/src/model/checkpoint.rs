//! Bit-exact checkpoint container.
//!
//! Layout: 8-byte magic `PTSEGCK1`, a little-endian u32 header length, a JSON
//! header (model config, step counter, caller extras, tensor directory), then
//! each tensor's f64 values little-endian in directory order. Raw f64 bytes
//! round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

use super::{ConvParams, ModelConfig, NetworkParams};

const MAGIC: &[u8; 8] = b"PTSEGCK1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    extras: Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `params` (and caller-owned `extras` such as preprocessing
/// statistics) to `path`.
pub fn save_checkpoint(params: &NetworkParams, extras: &Value, path: &Path) -> Result<()> {
    let named = params.named_tensors();
    let header = Header {
        model: params.config.clone(),
        step: params.step,
        extras: extras.clone(),
        tensors: named
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, _, data) in &named {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(NetworkParams, Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;

    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, &mut offset)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, not a checkpoint file".into(),
        });
    }

    let mut len_bytes = [0u8; 4];
    read_exact_at(&mut r, &mut len_bytes, &mut offset)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;

    let mut header_bytes = vec![0u8; header_len];
    read_exact_at(&mut r, &mut header_bytes, &mut offset)?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Format {
        offset: 12,
        message: format!("invalid header JSON: {e}"),
    })?;
    header.model.validate()?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let mut data = vec![0f64; count];
        for slot in data.iter_mut() {
            let mut bytes = [0u8; 8];
            read_exact_at(&mut r, &mut bytes, &mut offset)?;
            *slot = f64::from_le_bytes(bytes);
        }
        tensors.push((entry.name.clone(), entry.shape.clone(), data));
    }

    let params = assemble(&header.model, header.step, &tensors)?;
    Ok((params, header.extras))
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        offset: *offset,
        message: format!("truncated checkpoint: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

fn assemble(
    config: &ModelConfig,
    step: u64,
    tensors: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<NetworkParams> {
    let mut reference = NetworkParams::init(config, 0).map_err(|e| Error::Format {
        offset: 12,
        message: format!("header config invalid: {e}"),
    })?;
    reference.step = step;

    let expected = reference.named_tensors();
    if expected.len() != tensors.len() {
        return Err(Error::Format {
            offset: 12,
            message: format!(
                "tensor directory has {} entries, config implies {}",
                tensors.len(),
                expected.len()
            ),
        });
    }

    fn find<'a>(
        tensors: &'a [(String, Vec<usize>, Vec<f64>)],
        name: &str,
    ) -> Result<&'a (String, Vec<usize>, Vec<f64>)> {
        tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Format {
                offset: 12,
                message: format!("missing tensor `{name}`"),
            })
    }

    fn load_conv(
        tensors: &[(String, Vec<usize>, Vec<f64>)],
        name: &str,
        conv: &mut ConvParams,
    ) -> Result<()> {
        let (_, wshape, wdata) = find(tensors, &format!("{name}.weight"))?;
        if wshape.as_slice() != conv.weight.shape() {
            return Err(Error::Format {
                offset: 12,
                message: format!("tensor `{name}.weight` has shape {wshape:?}"),
            });
        }
        conv.weight = Array4::from_shape_vec(
            (wshape[0], wshape[1], wshape[2], wshape[3]),
            wdata.clone(),
        )
        .expect("shape checked");
        let (_, bshape, bdata) = find(tensors, &format!("{name}.bias"))?;
        if bshape.as_slice() != conv.bias.shape() {
            return Err(Error::Format {
                offset: 12,
                message: format!("tensor `{name}.bias` has shape {bshape:?}"),
            });
        }
        conv.bias = Array1::from_vec(bdata.clone());
        Ok(())
    }

    let mut stem = reference.stem.clone();
    load_conv(tensors, "stem", &mut stem)?;
    let mut encoders = reference.encoders.clone();
    for (i, enc) in encoders.iter_mut().enumerate() {
        load_conv(tensors, &format!("enc{i}"), enc)?;
    }
    let mut decoders = reference.decoders.clone();
    for (i, dec) in decoders.iter_mut().enumerate() {
        load_conv(tensors, &format!("dec{i}"), dec)?;
    }
    let mut head = reference.head.clone();
    load_conv(tensors, "head", &mut head)?;

    Ok(NetworkParams {
        config: config.clone(),
        step,
        stem,
        encoders,
        decoders,
        head,
    })
}
