//! IDX image file parsing (the classic handwritten-digit distribution
//! format): a big-endian header of magic plus dimension extents, then raw
//! unsigned bytes.

use crate::error::{Error, Result};
use std::io::Read;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// count * rows * cols brightness bytes, image-major.
    pub pixels: Vec<u8>,
}

/// Parse an IDX image file. Label files are recognized and rejected with a
/// pointed message; anything else is a format error at the failing offset.
pub fn load_mnist_idx(path: &Path) -> Result<IdxImages> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse_idx_images(&bytes)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let be_u32 = |offset: usize| -> Result<u32> {
        let end = offset + 4;
        if bytes.len() < end {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated header: need {} bytes, have {}", end, bytes.len()),
            ));
        }
        Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
    };
    let magic = be_u32(0)?;
    if magic == IDX_LABELS_MAGIC {
        return Err(Error::format(0, "this is a label file; expected image magic 0x00000803".to_string()));
    }
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad magic 0x{:08x}, expected 0x00000803", magic)));
    }
    let count = be_u32(4)? as usize;
    let rows = be_u32(8)? as usize;
    let cols = be_u32(12)? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .ok_or_else(|| Error::format(4, "dimension overflow".to_string()))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::format(
            16 + payload.len().min(expected) as u64,
            format!("payload holds {} bytes, header promises {}", payload.len(), expected),
        ));
    }
    Ok(IdxImages { count, rows, cols, pixels: payload.to_vec() })
}
