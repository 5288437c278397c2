//! Minimal binary PNM (P5 grayscale / P6 color) reading and writing,
//! maxval 255.

use std::io::Write;
use std::path::Path;

use crate::error::{HarnessError, Result};

pub enum PnmImage {
    Gray { w: usize, h: usize, data: Vec<u8> },
    Rgb { w: usize, h: usize, data: Vec<u8> },
}

impl PnmImage {
    /// Interleaved RGB bytes regardless of source format.
    pub fn to_rgb(&self) -> (usize, usize, Vec<u8>) {
        match self {
            PnmImage::Rgb { w, h, data } => (*w, *h, data.clone()),
            PnmImage::Gray { w, h, data } => {
                let mut rgb = Vec::with_capacity(data.len() * 3);
                for &v in data {
                    rgb.extend_from_slice(&[v, v, v]);
                }
                (*w, *h, rgb)
            }
        }
    }
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    debug_assert_eq!(gray.len(), w * h);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(gray)?;
    Ok(())
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), 3 * w * h);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let bytes = std::fs::read(path)?;
    parse_pnm(&bytes).map_err(|m| HarnessError::Dataset(format!("{}: {m}", path.display())))
}

fn parse_pnm(bytes: &[u8]) -> std::result::Result<PnmImage, String> {
    if bytes.len() < 2 {
        return Err("file too short".into());
    }
    let gray = match &bytes[..2] {
        b"P5" => true,
        b"P6" => false,
        _ => return Err("not a binary PGM/PPM (P5/P6)".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .map_err(|e| e.to_string())?
            .parse::<usize>()
            .map_err(|e| e.to_string())?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // single whitespace byte before the raster
    pos += 1;
    let expect = if gray { w * h } else { 3 * w * h };
    if bytes.len() < pos + expect {
        return Err(format!("raster truncated: want {expect} bytes, have {}", bytes.len().saturating_sub(pos)));
    }
    let data = bytes[pos..pos + expect].to_vec();
    Ok(if gray {
        PnmImage::Gray { w, h, data }
    } else {
        PnmImage::Rgb { w, h, data }
    })
}
