//! Binary portable graymap (P5) output.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

/// Writes a `height × width` row-major field as an 8-bit P5 image, mapping
/// `[lo, hi]` linearly onto `[0, 255]`. A degenerate range maps to mid-grey.
pub fn write_pgm(path: &Path, field: &[f32], height: usize, width: usize, lo: f64, hi: f64) -> io::Result<()> {
    assert_eq!(field.len(), height * width);
    let mut out = Vec::with_capacity(field.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    let span = hi - lo;
    out.extend(field.iter().map(|&v| {
        if span > 0.0 {
            (((v as f64 - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
        } else {
            128
        }
    }));
    fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &[0.0, 0.5, 1.0, 2.0, -1.0, 1.0], 2, 3, 0.0, 1.0).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 255, 0, 255]);
    }
}
