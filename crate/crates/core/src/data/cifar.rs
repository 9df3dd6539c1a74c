use std::path::Path;

use super::{DataError, Dataset};
use crate::tensor::{Shape, Tensor};

pub const CIFAR_IMAGE_BYTES: usize = 32 * 32 * 3;
pub const CIFAR_RECORD_BYTES: usize = CIFAR_IMAGE_BYTES + 1;
const PLANE: usize = 32 * 32;

/// Parse CIFAR-10 binary records: one label byte, then the red, green and
/// blue 32x32 planes in row-major order. Pixels are rescaled to `[0, 1]`
/// and assembled as NHWC.
pub fn parse_cifar10_bin(bytes: &[u8], id: &str) -> Result<Dataset, DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(DataError::BadLength {
            len: bytes.len(),
            record: CIFAR_RECORD_BYTES,
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut data = vec![0.0f32; n * CIFAR_IMAGE_BYTES];
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(DataError::BadLabel { record: r, label });
        }
        labels.push(label as usize);
        let img = &mut data[r * CIFAR_IMAGE_BYTES..(r + 1) * CIFAR_IMAGE_BYTES];
        for ch in 0..3 {
            let plane = &rec[1 + ch * PLANE..1 + (ch + 1) * PLANE];
            for (p, &v) in plane.iter().enumerate() {
                img[p * 3 + ch] = v as f32 / 255.0;
            }
        }
    }
    let images = Tensor::from_vec(Shape::new(n, 32, 32, 3), data).expect("record count");
    Ok(Dataset {
        id: id.to_string(),
        images,
        labels,
        num_classes: 10,
    })
}

pub fn load_cifar10_bin(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cifar10".into());
    parse_cifar10_bin(&bytes, &id)
}

/// Encode a 32x32x3 dataset with labels 0-9 into CIFAR-10 records.
/// Pixels are rounded to the nearest of 256 levels.
pub fn encode_cifar10_bin(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    let s = ds.images.shape();
    if (s.h, s.w, s.c) != (32, 32, 3) {
        return Err(DataError::NotCifarShaped(format!("{}x{}x{}", s.h, s.w, s.c)));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_BYTES);
    for (n, &label) in ds.labels.iter().enumerate() {
        if label > 9 {
            return Err(DataError::BadLabel {
                record: n,
                label: label.min(255) as u8,
            });
        }
        out.push(label as u8);
        let img = ds.images.image(n);
        for ch in 0..3 {
            for p in 0..PLANE {
                out.push((img[p * 3 + ch].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, f: impl Fn(usize, usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        for ch in 0..3 {
            for p in 0..PLANE {
                r.push(f(ch, p));
            }
        }
        r
    }

    #[test]
    fn hand_built_records_decode_exactly() {
        let mut bytes = record(3, |ch, p| ((ch * 50 + p) % 256) as u8);
        bytes.extend(record(9, |ch, p| if ch == 2 && p == 33 { 255 } else { 0 }));
        let ds = parse_cifar10_bin(&bytes, "fixture").unwrap();
        assert_eq!(ds.labels, vec![3, 9]);
        // pixel (row 1, col 1) = plane index 33
        assert_eq!(ds.images.at(0, 1, 1, 0), 33.0 / 255.0);
        assert_eq!(ds.images.at(0, 1, 1, 1), 83.0 / 255.0);
        assert_eq!(ds.images.at(0, 1, 1, 2), 133.0 / 255.0);
        assert_eq!(ds.images.at(0, 31, 31, 0), ((1023 % 256) as f32) / 255.0);
        assert_eq!(ds.images.at(1, 1, 1, 2), 1.0);
        assert_eq!(ds.images.at(1, 1, 1, 0), 0.0);
        assert_eq!(ds.images.data()[1024 * 3..].iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn truncated_file_names_record_size() {
        let bytes = vec![0u8; CIFAR_RECORD_BYTES + 10];
        let err = parse_cifar10_bin(&bytes, "t").unwrap_err();
        assert!(err.to_string().contains("3073"));
    }

    #[test]
    fn all_zero_record_is_black_label_zero() {
        let ds = parse_cifar10_bin(&vec![0u8; CIFAR_RECORD_BYTES], "z").unwrap();
        assert_eq!(ds.labels, vec![0]);
        assert!(ds.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_above_nine_rejected() {
        let bytes = record(10, |_, _| 0);
        assert!(matches!(
            parse_cifar10_bin(&bytes, "x"),
            Err(DataError::BadLabel { record: 0, label: 10 })
        ));
    }

    #[test]
    fn encode_inverts_parse() {
        let bytes = record(7, |ch, p| ((ch * 91 + p * 7) % 256) as u8);
        let ds = parse_cifar10_bin(&bytes, "x").unwrap();
        assert_eq!(encode_cifar10_bin(&ds).unwrap(), bytes);
    }
}
