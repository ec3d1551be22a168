//! Binary PGM (P5) and PPM (P6) reading and writing.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::image::ImagePlane;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("not a binary netpbm file: {0}")]
    Format(String),
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize, PnmError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(PnmError::Format("truncated header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PnmError::Format("bad header field".into()))
}

pub fn decode(bytes: &[u8]) -> Result<ImagePlane, PnmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(PnmError::Format("expected P5 or P6 magic".into())),
    };
    let mut pos = 2;
    let w = header_token(bytes, &mut pos)?;
    let h = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(PnmError::Format(format!("maxval {maxval}, only 255 is supported")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(PnmError::Format("missing separator after header".into()));
    }
    pos += 1;
    let n = w * h * channels;
    let body = bytes
        .get(pos..pos + n)
        .ok_or_else(|| PnmError::Format(format!("expected {n} sample bytes, found {}", bytes.len() - pos)))?;
    let mut data = vec![0u8; n];
    for (i, px) in body.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * w * h + i] = v;
        }
    }
    ImagePlane::new(w, h, channels, data).map_err(|e| PnmError::Format(e.to_string()))
}

pub fn encode(img: &ImagePlane) -> Result<Vec<u8>, PnmError> {
    let (w, h, c) = img.dims();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(PnmError::Format(format!("cannot store {c} channels"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * c);
    for i in 0..w * h {
        for ch in 0..c {
            out.push(img.plane(ch)[i]);
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<ImagePlane, PnmError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn write(path: &Path, img: &ImagePlane) -> Result<(), PnmError> {
    let bytes = encode(img)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}
