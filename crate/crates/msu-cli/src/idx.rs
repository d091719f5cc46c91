//! IDX file loader (the format used by standard small image datasets):
//! big-endian magic 0x00000803 for ubyte images, 0x00000801 for ubyte labels.

use msu_core::nn::{Dataset, Targets};
use msu_core::tensor::DenseTensor;

use crate::error::{CliError, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], pos: usize) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| CliError::Data(format!("idx file truncated at byte {pos}")))
}

/// Decodes an image file to a unit-scaled `(N, 1, H, W)` tensor.
pub fn decode_images(bytes: &[u8]) -> Result<DenseTensor> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(CliError::Data(format!(
            "bad idx image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let h = read_u32_be(bytes, 8)? as usize;
    let w = read_u32_be(bytes, 12)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(CliError::Data(format!(
            "idx image payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    if n == 0 {
        return Err(CliError::Data("idx image file holds zero images".into()));
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    DenseTensor::new(&[n, 1, h, w], data).map_err(|e| CliError::Data(e.to_string()))
}

/// Decodes a label file to integer class labels.
pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(CliError::Data(format!(
            "bad idx label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(CliError::Data(format!(
            "idx label payload is {} bytes, header implies {}",
            bytes.len(),
            8 + n
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label pair into a classification dataset.
pub fn load_pair(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let inputs = decode_images(image_bytes)?;
    let labels = decode_labels(label_bytes)?;
    if labels.len() != inputs.shape()[0] {
        return Err(CliError::Data(format!(
            "{} labels for {} images",
            labels.len(),
            inputs.shape()[0]
        )));
    }
    Ok(Dataset { inputs, targets: Targets::Labels(labels) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_fixture() -> Vec<u8> {
        // Two 2x3 images, pixel values 0..12.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend((0..12).map(|v| v as u8 * 20));
        bytes
    }

    #[test]
    fn decodes_hand_built_images() {
        let t = decode_images(&image_fixture()).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 3]);
        assert_eq!(t.data()[1], 20.0 / 255.0);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_magic_truncation_and_count_mismatch() {
        let mut bad = image_fixture();
        bad[3] = 0x01;
        assert!(decode_images(&bad).is_err());

        let fixture = image_fixture();
        assert!(decode_images(&fixture[..10]).is_err());
        assert!(decode_images(&[]).is_err());

        let mut labels = Vec::new();
        labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[0, 1, 2]);
        assert!(load_pair(&fixture, &labels).is_err()); // 3 labels, 2 images
    }
}
