//! Tensor files: one JSON header line
//! `{"rows":R,"cols":C,"dtype":"f32","order":"row-major"}` followed by
//! `R * C` little-endian `f32` values. Values are widened to `f64` on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    rows: usize,
    cols: usize,
    dtype: String,
    order: String,
}

pub fn read_tensor(path: &Path) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if line.last() != Some(&b'\n') {
        return Err(malformed("missing header line".into()));
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| malformed(format!("bad header: {e}")))?;
    if header.dtype != "f32" || header.order != "row-major" {
        return Err(malformed(format!(
            "unsupported layout dtype={} order={}",
            header.dtype, header.order
        )));
    }
    let count = header.rows * header.cols;
    let mut bytes = Vec::with_capacity(count * 4);
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 4 {
        return Err(malformed(format!(
            "expected {} payload bytes, found {}",
            count * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::new(header.rows, header.cols, data).map_err(|e| malformed(e.to_string()))
}

/// Writes `m` narrowed to `f32`.
pub fn write_tensor(path: &Path, m: &Matrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_string(&Header {
        rows: m.rows(),
        cols: m.cols(),
        dtype: "f32".into(),
        order: "row-major".into(),
    })
    .expect("header serializes");
    let io = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    for &x in m.data() {
        w.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let m = Matrix::new(2, 3, vec![0.5, -1.25, 3.0, 1e-3, 7.0, -0.0]).unwrap();
        write_tensor(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = br#"{"rows":2,"cols":3,"dtype":"f32","order":"row-major"}"#;
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes[header.len()], b'\n');
        assert_eq!(bytes.len(), header.len() + 1 + 24);
        assert_eq!(&bytes[header.len() + 1..header.len() + 5], &0.5f32.to_le_bytes());

        let back = read_tensor(&path).unwrap();
        assert_eq!(back.rows(), 2);
        for (a, b) in back.data().iter().zip(m.data()) {
            assert_eq!(*a, (*b as f32) as f64);
        }
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"{\"rows\":1,\"cols\":2,\"dtype\":\"f32\",\"order\":\"row-major\"}\n\0\0\0\0").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"{\"rows\":1,\"cols\":1,\"dtype\":\"f64\",\"order\":\"row-major\"}\n\0\0\0\0").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
        let missing = dir.path().join("nope.bin");
        let err = read_tensor(&missing).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("nope.bin"));
    }
}
