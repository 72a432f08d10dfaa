//! Binary netpbm images: P5 (8- or 16-bit big-endian gray) and P6 (8-bit RGB,
//! read only, converted to luma).

use std::io::{Read, Write};
use std::path::Path;

use super::FormatError;
use crate::image::{GrayImage, GrayImage16, Image};

/// A decoded gray image at its native depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnyGray {
    Gray8(GrayImage),
    Gray16(GrayImage16),
}

impl AnyGray {
    /// 8-bit view; 16-bit data is scaled down by its maxval.
    pub fn into_gray8(self) -> GrayImage {
        match self {
            AnyGray::Gray8(img) => img,
            AnyGray::Gray16(img) => img.map(|v| (v >> 8) as u8),
        }
    }
}

struct Header {
    magic: [u8; 2],
    cols: usize,
    rows: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, FormatError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(FormatError::Header("missing netpbm magic".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::Header("expected a decimal field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| FormatError::Header(format!("field `{text}` out of range")))?;
    }
    // exactly one whitespace byte before the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(FormatError::Header("missing separator before raster".into())),
    }
    let [cols, rows, maxval] = fields;
    if cols == 0 || rows == 0 {
        return Err(FormatError::Header("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(FormatError::Header(format!("maxval {maxval} out of range")));
    }
    Ok(Header {
        magic,
        cols: cols as usize,
        rows: rows as usize,
        maxval: maxval as u32,
        data_offset: pos,
    })
}

fn raster<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8], FormatError> {
    let sample = if header.maxval > 255 { 2 } else { 1 };
    let expected = header.rows * header.cols * channels * sample;
    let data = &bytes[header.data_offset..];
    if data.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: data.len(),
        });
    }
    Ok(&data[..expected])
}

/// Integer luma used for color inputs: (299 R + 587 G + 114 B) / 1000.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32) / 1000) as u8
}

/// Decodes a P5 or P6 image from memory. P6 is converted to 8-bit luma.
pub fn decode(bytes: &[u8]) -> Result<AnyGray, FormatError> {
    let header = parse_header(bytes)?;
    let (rows, cols) = (header.rows, header.cols);
    match &header.magic {
        b"P5" if header.maxval <= 255 => {
            let data = raster(bytes, &header, 1)?.to_vec();
            Ok(AnyGray::Gray8(Image::from_vec(rows, cols, data).expect("sized")))
        }
        b"P5" => {
            let data = raster(bytes, &header, 1)?
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]))
                .collect();
            Ok(AnyGray::Gray16(Image::from_vec(rows, cols, data).expect("sized")))
        }
        b"P6" if header.maxval <= 255 => {
            let data = raster(bytes, &header, 3)?
                .chunks_exact(3)
                .map(|p| luma(p[0], p[1], p[2]))
                .collect();
            Ok(AnyGray::Gray8(Image::from_vec(rows, cols, data).expect("sized")))
        }
        b"P6" => Err(FormatError::Unsupported("16-bit PPM".into())),
        m => Err(FormatError::Unsupported(format!(
            "netpbm variant {}",
            String::from_utf8_lossy(m)
        ))),
    }
}

pub fn read(path: impl AsRef<Path>) -> Result<AnyGray, FormatError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Reads any supported image and returns it as 8-bit gray.
pub fn read_gray8(path: impl AsRef<Path>) -> Result<GrayImage, FormatError> {
    read(path).map(AnyGray::into_gray8)
}

pub fn encode_pgm8(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_pgm16(img: &GrayImage16) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.cols(), img.rows()).into_bytes();
    for v in img.data() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Encodes an RGB raster (3 bytes per pixel, row-major) as P6.
pub fn encode_ppm(rows: usize, cols: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), rows * cols * 3, "rgb buffer size");
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_pgm8(path: impl AsRef<Path>, img: &GrayImage) -> Result<(), FormatError> {
    std::fs::File::create(path)?.write_all(&encode_pgm8(img))?;
    Ok(())
}

pub fn write_pgm16(path: impl AsRef<Path>, img: &GrayImage16) -> Result<(), FormatError> {
    std::fs::File::create(path)?.write_all(&encode_pgm16(img))?;
    Ok(())
}
