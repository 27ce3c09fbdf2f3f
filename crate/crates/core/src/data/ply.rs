//! ASCII PLY export for clouds and scene flow.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Write vertices with optional per-point flow properties (fx, fy, fz).
pub fn write_ply(path: &Path, points: &Tensor, flow: Option<&Tensor>) -> Result<()> {
    if points.rank() != 2 || points.cols() != 3 {
        return Err(Error::shape("write_ply", format!("points must be n x 3, got {:?}", points.shape())));
    }
    if let Some(f) = flow {
        if f.shape() != points.shape() {
            return Err(Error::shape(
                "write_ply",
                format!("flow {:?} does not match points {:?}", f.shape(), points.shape()),
            ));
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", points.rows())?;
    writeln!(out, "property float x")?;
    writeln!(out, "property float y")?;
    writeln!(out, "property float z")?;
    if flow.is_some() {
        writeln!(out, "property float fx")?;
        writeln!(out, "property float fy")?;
        writeln!(out, "property float fz")?;
    }
    writeln!(out, "end_header")?;
    for i in 0..points.rows() {
        let p = points.row(i);
        match flow {
            Some(f) => {
                let v = f.row(i);
                writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], v[0], v[1], v[2])?;
            }
            None => writeln!(out, "{} {} {}", p[0], p[1], p[2])?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rows_match_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let pts = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let flow = Tensor::from_rows(&[vec![0.1, 0.0, 0.0], vec![0.0, 0.2, 0.0]]).unwrap();
        write_ply(&path, &pts, Some(&flow)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "ply");
        assert!(lines.contains(&"element vertex 2"));
        assert!(lines.contains(&"property float fz"));
        assert_eq!(lines[lines.len() - 2], "1 2 3 0.1 0 0");
        assert_eq!(lines[lines.len() - 1], "4 5 6 0 0.2 0");
    }

    #[test]
    fn plain_vertices_skip_flow_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.ply");
        let pts = Tensor::from_rows(&[vec![0.5, 0.5, 0.0]]).unwrap();
        write_ply(&path, &pts, None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("fx"));
        assert!(text.trim_end().ends_with("0.5 0.5 0"));
    }
}
