//! MNIST-style IDX files (big-endian).
//!
//! Images: magic `0x00000803`, then `count`, `rows`, `cols` as `u32`, then
//! `count * rows * cols` bytes. Labels: magic `0x00000801`, `count`, then
//! `count` bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use super::image::DigitImage;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32<R: Read>(r: &mut R, offset: &mut u64, what: &str) -> Result<u32> {
    let v = r
        .read_u32::<BigEndian>()
        .map_err(|_| Error::format(*offset, format!("truncated {what}")))?;
    *offset += 4;
    Ok(v)
}

fn read_magic<R: Read>(r: &mut R, offset: &mut u64, want: u32) -> Result<()> {
    let magic = read_u32(r, offset, "magic number")?;
    if magic != want {
        return Err(Error::format(
            0,
            format!("magic {magic:#010x}, expected {want:#010x}"),
        ));
    }
    Ok(())
}

/// Reads every image, scaling pixels to `[0, 1]`.
pub fn read_idx_images<R: Read>(r: &mut R) -> Result<Vec<DigitImage>> {
    let mut offset = 0;
    read_magic(r, &mut offset, IDX_IMAGES_MAGIC)?;
    let count = read_u32(r, &mut offset, "image count")? as usize;
    let rows = read_u32(r, &mut offset, "row count")? as usize;
    let cols = read_u32(r, &mut offset, "column count")? as usize;
    let mut buf = vec![0u8; rows * cols];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|_| {
            Error::format(offset, format!("truncated pixels of image {i} of {count}"))
        })?;
        offset += buf.len() as u64;
        let pixels = buf.iter().map(|&b| b as f64 / 255.0).collect();
        out.push(DigitImage::new(rows, cols, pixels)?);
    }
    Ok(out)
}

pub fn read_idx_labels<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut offset = 0;
    read_magic(r, &mut offset, IDX_LABELS_MAGIC)?;
    let count = read_u32(r, &mut offset, "label count")? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels)
        .map_err(|_| Error::format(offset, format!("truncated labels, expected {count}")))?;
    Ok(labels)
}

/// Loads paired image and label files.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<(DigitImage, u8)>> {
    let images = read_idx_images(&mut BufReader::new(File::open(images_path)?))?;
    let labels = read_idx_labels(&mut BufReader::new(File::open(labels_path)?))?;
    if images.len() != labels.len() {
        // The count field sits right after the magic in both files.
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.len(), labels.len()),
        ));
    }
    Ok(images.into_iter().zip(labels).collect())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_idx_images<W: Write>(w: &mut W, images: &[DigitImage]) -> Result<()> {
    let (rows, cols) = images.first().map_or((0, 0), |i| (i.height, i.width));
    if let Some(bad) = images.iter().find(|i| (i.height, i.width) != (rows, cols)) {
        return Err(Error::data(format!(
            "IDX images must share one size: {rows}x{cols} vs {}x{}",
            bad.height, bad.width
        )));
    }
    w.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(images.len() as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    for img in images {
        let bytes: Vec<u8> = img.pixels.iter().map(|&v| to_byte(v)).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn write_idx_labels<W: Write>(w: &mut W, labels: &[u8]) -> Result<()> {
    w.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    Ok(())
}

pub fn save_idx(images_path: &Path, labels_path: &Path, data: &[(DigitImage, u8)]) -> Result<()> {
    let images: Vec<DigitImage> = data.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
    let mut wi = BufWriter::new(File::create(images_path)?);
    write_idx_images(&mut wi, &images)?;
    wi.flush()?;
    let mut wl = BufWriter::new(File::create(labels_path)?);
    write_idx_labels(&mut wl, &labels)?;
    wl.flush()?;
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

    #[test]
    fn all_255_image_reads_as_ones() {
        let mut bytes = header(IDX_IMAGES_MAGIC, &[1, 28, 28]);
        bytes.extend(std::iter::repeat_n(255u8, 784));
        let imgs = read_idx_images(&mut bytes.as_slice()).unwrap();
        assert_eq!(imgs.len(), 1);
        assert!(imgs[0].pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let bytes = header(0x0000_0802, &[0, 28, 28]);
        assert!(matches!(
            read_idx_images(&mut bytes.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(read_idx_labels(&mut header(IDX_IMAGES_MAGIC, &[0]).as_slice()).is_err());
    }

    #[test]
    fn truncation_names_offset() {
        let mut bytes = header(IDX_IMAGES_MAGIC, &[2, 2, 2]);
        bytes.extend([0u8; 6]);
        match read_idx_images(&mut bytes.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        let mut labels = header(IDX_LABELS_MAGIC, &[3]);
        labels.push(1);
        assert!(matches!(
            read_idx_labels(&mut labels.as_slice()),
            Err(Error::Format { offset: 8, .. })
        ));
    }
}
