//! IDX binary files (MNIST convention): big-endian header, unsigned bytes.
//!
//! Images use magic `0x00000803` (`N x H x W`); colour images are written
//! with `0x00000804` (`N x C x H x W`). Labels use `0x00000801`.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, IdxError, Result};
use crate::nn::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IMAGES4_MAGIC: u32 = 0x0000_0804;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Returns the dimensions and payload of an IDX ubyte buffer.
fn parse<'a>(
    bytes: &'a [u8],
    allowed: &[u32],
) -> std::result::Result<(Vec<usize>, &'a [u8]), IdxError> {
    let magic = read_u32(bytes, 0)?;
    if !allowed.contains(&magic) {
        return Err(IdxError::BadMagic {
            expected: allowed[0],
            found: magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_u32(bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * ndim;
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(IdxError::Truncated {
            expected: header + payload,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..header + payload]))
}

pub fn decode(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (dims, pixels) = parse(image_bytes, &[IMAGES_MAGIC, IMAGES4_MAGIC])?;
    let (ldims, labels) = parse(label_bytes, &[LABELS_MAGIC])?;
    let shape = match *dims.as_slice() {
        [n, h, w] => vec![n, 1, h, w],
        [n, c, h, w] => vec![n, c, h, w],
        _ => unreachable!("magic fixes the rank"),
    };
    if shape[0] != ldims[0] {
        return Err(IdxError::CountMismatch {
            images: shape[0],
            labels: ldims[0],
        }
        .into());
    }
    if shape.contains(&0) {
        return Err(IdxError::Unsupported(format!("empty dimension in {shape:?}")).into());
    }
    let images = Tensor::new(shape, pixels.iter().map(|&p| p as f32).collect())?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(images, labels, num_classes)
}

pub fn encode(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.num_classes > 256 {
        return Err(IdxError::Unsupported("labels above 255 do not fit in a byte".into()).into());
    }
    let shape = ds.images.shape();
    let mut img = Vec::with_capacity(20 + ds.images.len());
    let dims: &[usize] = if shape[1] == 1 {
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        &[shape[0], shape[2], shape[3]]
    } else {
        img.extend_from_slice(&IMAGES4_MAGIC.to_be_bytes());
        shape
    };
    for &d in dims {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &p in ds.images.data() {
        if p.fract() != 0.0 || !(0.0..=255.0).contains(&p) {
            return Err(IdxError::Unsupported(format!(
                "pixel value {p} is not an integer intensity"
            ))
            .into());
        }
        img.push(p as u8);
    }
    let mut lab = Vec::with_capacity(8 + ds.labels.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.labels.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode(&images, &labels)
}

pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = encode(ds)?;
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    fn mnist_like(n_img: u32, n_lab: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = header(IMAGES_MAGIC, &[n_img, 28, 28]);
        img.extend((0..n_img * 28 * 28).map(|i| (i % 251) as u8));
        let mut lab = header(LABELS_MAGIC, &[n_lab]);
        lab.extend((0..n_lab).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn decodes_mnist_header() {
        let (img, lab) = mnist_like(10, 10);
        let ds = decode(&img, &lab).unwrap();
        assert_eq!(ds.images.shape(), &[10, 1, 28, 28]);
        assert_eq!(ds.num_classes, 10);
        assert_eq!(ds.images.data()[300], (300 % 251) as f32);
    }

    #[test]
    fn distinct_errors() {
        let (img, lab) = mnist_like(10, 9);
        assert!(matches!(
            decode(&img, &lab),
            Err(Error::Idx(IdxError::CountMismatch { images: 10, labels: 9 }))
        ));
        let (mut img, lab) = mnist_like(10, 10);
        img[3] = 0x02;
        assert!(matches!(
            decode(&img, &lab),
            Err(Error::Idx(IdxError::BadMagic { .. }))
        ));
        let (img, lab) = mnist_like(10, 10);
        assert!(matches!(
            decode(&img[..img.len() - 1], &lab),
            Err(Error::Idx(IdxError::Truncated { .. }))
        ));
        assert!(matches!(
            decode(&img[..6], &lab),
            Err(Error::Idx(IdxError::Truncated { .. }))
        ));
    }

    #[test]
    fn encode_is_bit_exact_with_decode() {
        let (img, lab) = mnist_like(4, 4);
        let ds = decode(&img, &lab).unwrap();
        let (img2, lab2) = encode(&ds).unwrap();
        assert_eq!(img, img2);
        assert_eq!(lab, lab2);
    }
}
