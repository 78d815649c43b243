//! Float RGB images with binary PPM (P6, 8-bit) output plus a raw
//! little-endian f64 sidecar for loss-grade comparisons.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageF64 {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB, values in [0, 1].
    pub data: Vec<f64>,
}

impl ImageF64 {
    pub fn new(width: u32, height: u32) -> Self {
        ImageF64 {
            width,
            height,
            data: vec![0.0; (width * height * 3) as usize],
        }
    }

    pub fn pixel(&self, u: u32, v: u32) -> [f64; 3] {
        let i = ((v * self.width + u) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: u32, v: u32, rgb: [f64; 3]) {
        let i = ((v * self.width + u) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

fn sidecar_path(ppm_path: &Path) -> PathBuf {
    ppm_path.with_extension("f64")
}

/// Write `<stem>.ppm` (P6, 8-bit) and `<stem>.f64` (raw f64 LE, same pixel
/// order).
pub fn write_image(ppm_path: &Path, img: &ImageF64) -> Result<()> {
    let mut ppm = Vec::with_capacity(20 + img.data.len());
    ppm.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    for v in &img.data {
        ppm.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::File::create(ppm_path)?.write_all(&ppm)?;
    let mut raw = Vec::with_capacity(img.data.len() * 8);
    for v in &img.data {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(sidecar_path(ppm_path))?.write_all(&raw)?;
    Ok(())
}

/// Read an image back at float precision: dimensions from the PPM header,
/// data from the sidecar.
pub fn read_image(ppm_path: &Path) -> Result<ImageF64> {
    let mut bytes = Vec::new();
    std::fs::File::open(ppm_path)?.read_to_end(&mut bytes)?;
    let (width, height) = parse_ppm_header(ppm_path, &bytes)?;
    let mut raw = Vec::new();
    std::fs::File::open(sidecar_path(ppm_path))?.read_to_end(&mut raw)?;
    let expect = (width * height * 3) as usize * 8;
    if raw.len() != expect {
        return Err(Error::Parse {
            path: sidecar_path(ppm_path),
            line: 0,
            msg: format!("sidecar holds {} bytes, expected {expect}", raw.len()),
        });
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ImageF64 {
        width,
        height,
        data,
    })
}

fn parse_ppm_header(path: &Path, bytes: &[u8]) -> Result<(u32, u32)> {
    let err = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    // Byte-level tokenizer: the binary payload starts right after the
    // maxval's single whitespace byte.
    let mut cur = 0usize;
    let mut token = || -> Option<String> {
        while cur < bytes.len() && bytes[cur].is_ascii_whitespace() {
            cur += 1;
        }
        let start = cur;
        while cur < bytes.len() && !bytes[cur].is_ascii_whitespace() {
            cur += 1;
        }
        if start == cur {
            None
        } else {
            std::str::from_utf8(&bytes[start..cur]).ok().map(String::from)
        }
    };
    if token().as_deref() != Some("P6") {
        return Err(err("not a P6 PPM"));
    }
    let width: u32 = token()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err("bad width"))?;
    let height: u32 = token()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err("bad height"))?;
    if token().as_deref() != Some("255") {
        return Err(err("expected 8-bit maxval"));
    }
    Ok((width, height))
}
