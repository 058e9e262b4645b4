//! Binary PGM (P5, maxval 255) reading and writing. Pixels travel as f64
//! tensors in `[0, 255]`; writing rounds and clamps to 8 bits.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = img.dims2("write_pgm")?;
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n").expect("vec write");
    out.extend(img.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let err = |msg: &str| Error::FileFormat { path: path.display().to_string(), msg: msg.into() };

    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and `#` comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P5" {
        return Err(err("not a binary PGM (P5)"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| err("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| err("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("expected maxval 255"));
    }
    // exactly one whitespace byte separates header and payload
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(err("truncated pixel data"));
    }
    let data = bytes[pos..pos + w * h].iter().map(|&b| b as f64).collect();
    Tensor::new(&[h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::new(&[2, 3], vec![0.0, 127.0, 255.0, 3.6, 4.4, 250.9]).unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.data(), &[0.0, 127.0, 255.0, 4.0, 4.0, 251.0]);
    }

    #[test]
    fn rejects_non_p5() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n255\n\x10\x20").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.data(), &[16.0, 32.0]);
    }
}
