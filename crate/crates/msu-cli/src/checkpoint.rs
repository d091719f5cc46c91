//! Dense model checkpoints: architecture echo + raw weights, CRC-protected.
//!
//! Layout (little-endian): magic "MSUC", u16 version, u32 input rank + dims,
//! u32 layer-def count, per def a tag byte plus parameters, then for every
//! trainable layer its weights and bias as f32 arrays, and a CRC-32 trailer.

use msu_core::nn::{Layer, LayerDef, Model};
use msu_core::tensor::DenseTensor;

use crate::error::{CliError, Result};

const MAGIC: [u8; 4] = *b"MSUC";
const VERSION: u16 = 1;

pub fn save(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.input_shape().len() as u32).to_le_bytes());
    for &d in model.input_shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        match layer {
            Layer::Fc { weight, .. } => {
                buf.push(0);
                buf.extend_from_slice(&(weight.shape()[0] as u32).to_le_bytes());
            }
            Layer::Conv2d { weight, stride, pad, .. } => {
                buf.push(1);
                for v in [weight.shape()[0], weight.shape()[2], weight.shape()[3], *stride, *pad] {
                    buf.extend_from_slice(&(v as u32).to_le_bytes());
                }
            }
            Layer::Relu => buf.push(2),
            Layer::MaxPool2 => buf.push(3),
            Layer::Flatten => buf.push(4),
        }
    }
    for id in model.trainable_layers() {
        for &v in model.weight(id).unwrap().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &b in model.bias(id).unwrap() {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn load(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 14 {
        return Err(CliError::Data("checkpoint truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CliError::Data(format!(
            "checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(CliError::Data(format!("checkpoint truncated at byte {pos}", pos = *pos)));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(CliError::Data("not an MSUC checkpoint".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(CliError::Data(format!("unknown checkpoint version {version}")));
    }
    let rank = u32_at(&mut pos)? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(u32_at(&mut pos)? as usize);
    }
    let def_count = u32_at(&mut pos)? as usize;
    let mut defs = Vec::with_capacity(def_count);
    for _ in 0..def_count {
        let tag = take(&mut pos, 1)?[0];
        defs.push(match tag {
            0 => LayerDef::Fc { out: u32_at(&mut pos)? as usize },
            1 => {
                let out_channels = u32_at(&mut pos)? as usize;
                let kh = u32_at(&mut pos)? as usize;
                let kw = u32_at(&mut pos)? as usize;
                let stride = u32_at(&mut pos)? as usize;
                let pad = u32_at(&mut pos)? as usize;
                LayerDef::Conv2d { out_channels, kernel: (kh, kw), stride, pad }
            }
            2 => LayerDef::Relu,
            3 => LayerDef::MaxPool2,
            4 => LayerDef::Flatten,
            other => return Err(CliError::Data(format!("unknown layer tag {other}"))),
        });
    }
    let mut model = Model::init(&input_shape, &defs, 0)
        .map_err(|e| CliError::Data(format!("checkpoint architecture invalid: {e}")))?;
    for id in model.trainable_layers() {
        let volume = model.weight(id).unwrap().len();
        let shape = model.weight(id).unwrap().shape().to_vec();
        let wbytes = take(&mut pos, 4 * volume)?;
        let weights: Vec<f32> =
            wbytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        *model.weight_mut(id).unwrap() = DenseTensor::new(&shape, weights)
            .map_err(|e| CliError::Data(format!("checkpoint weights invalid: {e}")))?;
        let bias_len = model.bias(id).unwrap().len();
        let bbytes = take(&mut pos, 4 * bias_len)?;
        *model.bias_mut(id).unwrap() =
            bbytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    }
    if pos != body.len() {
        return Err(CliError::Data("checkpoint has trailing bytes".into()));
    }
    Ok(model)
}

/// Checks that a loaded checkpoint matches the architecture built from config.
pub fn check_matches(checkpoint: &Model, expected: &Model) -> Result<()> {
    if checkpoint.input_shape() != expected.input_shape()
        || checkpoint.layers().len() != expected.layers().len()
    {
        return Err(CliError::Data("checkpoint does not match the configured architecture".into()));
    }
    for (a, b) in checkpoint.layers().iter().zip(expected.layers()) {
        let same = match (a, b) {
            (Layer::Fc { weight: wa, .. }, Layer::Fc { weight: wb, .. }) => {
                wa.shape() == wb.shape()
            }
            (
                Layer::Conv2d { weight: wa, stride: sa, pad: pa, .. },
                Layer::Conv2d { weight: wb, stride: sb, pad: pb, .. },
            ) => wa.shape() == wb.shape() && sa == sb && pa == pb,
            (Layer::Relu, Layer::Relu)
            | (Layer::MaxPool2, Layer::MaxPool2)
            | (Layer::Flatten, Layer::Flatten) => true,
            _ => false,
        };
        if !same {
            return Err(CliError::Data(
                "checkpoint does not match the configured architecture".into(),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights() {
        let model = Model::init(
            &[1, 4, 4],
            &[
                LayerDef::Conv2d { out_channels: 2, kernel: (3, 3), stride: 1, pad: 1 },
                LayerDef::Relu,
                LayerDef::Flatten,
                LayerDef::Fc { out: 3 },
            ],
            77,
        )
        .unwrap();
        let bytes = save(&model);
        let loaded = load(&bytes).unwrap();
        assert_eq!(loaded, model);
        check_matches(&loaded, &model).unwrap();
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let model = Model::init(&[4], &[LayerDef::Fc { out: 2 }], 1).unwrap();
        let mut bytes = save(&model);
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        assert!(load(&bytes).is_err());
    }
}
