//! PCSEQ binary sequence files.
//!
//! Layout (normative, little-endian):
//!
//! ```text
//! bytes 0..6   magic "PCSEQ1"
//! u32          T  frames
//! u32          N  points per frame
//! u32          D  feature channels (0 allowed)
//! f32 * T*N*3  coordinates, frame-major, row-major
//! f32 * T*N*D  features, same order
//! ```

use crate::data::CloudSequence;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"PCSEQ1";

pub fn write_pcseq(path: &Path, seq: &CloudSequence) -> Result<()> {
    let bytes = encode_pcseq(seq)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn encode_pcseq(seq: &CloudSequence) -> Result<Vec<u8>> {
    let t = seq.len();
    if t == 0 {
        return Err(Error::contract("refusing to write an empty sequence"));
    }
    let n = seq.points_per_frame();
    let d = seq.feature_channels();
    let mut out = Vec::with_capacity(18 + t * n * (3 + d) * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for frame in seq.frames() {
        for &x in frame.coords.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if d > 0 {
        for frame in seq.frames() {
            let feats = frame.features.as_ref().expect("validated by CloudSequence");
            for &x in feats.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_pcseq(path: &Path) -> Result<CloudSequence> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    decode_pcseq(&bytes)
}

pub fn decode_pcseq(bytes: &[u8]) -> Result<CloudSequence> {
    if bytes.len() < 6 || &bytes[..6] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"PCSEQ1\"", bytes.get(..6))));
    }
    let le_u32 = |offset: usize| -> Result<u32> {
        let end = offset + 4;
        if bytes.len() < end {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated header: need {} bytes", end),
            ));
        }
        Ok(u32::from_le_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
    };
    let t = le_u32(6)? as usize;
    let n = le_u32(10)? as usize;
    let d = le_u32(14)? as usize;
    if t == 0 || n == 0 {
        return Err(Error::format(6, format!("degenerate sequence: T={} N={}", t, n)));
    }
    let header = 18usize;
    let coord_count = t * n * 3;
    let feat_count = t * n * d;
    let expected = header + (coord_count + feat_count) * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!(
                "file holds {} bytes, layout needs {} ({} missing)",
                bytes.len(),
                expected,
                expected.saturating_sub(bytes.len())
            ),
        ));
    }
    let f32_at = |idx: usize| -> f64 {
        let o = header + idx * 4;
        f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64
    };
    let mut frames = Vec::with_capacity(t);
    for ft in 0..t {
        let coords: Vec<f64> = (0..n * 3).map(|i| f32_at(ft * n * 3 + i)).collect();
        let coords = Tensor::from_vec(&[n, 3], coords)?;
        let features = if d > 0 {
            let base = coord_count + ft * n * d;
            let data: Vec<f64> = (0..n * d).map(|i| f32_at(base + i)).collect();
            Some(Tensor::from_vec(&[n, d], data)?)
        } else {
            None
        };
        frames.push(PointCloud::with_features(coords, features)?);
    }
    CloudSequence::new(frames)
}
