use std::path::Path;

use super::quantize_u8;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Encodes a `C x H x W` image as binary P6 (C = 3) or P5 (C = 1), maxval 255.
pub fn write_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected C x H x W, got {:?}", image.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Shape(format!("PPM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize_u8(d[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Decodes binary P5/P6 with maxval 255 into a `C x H x W` image in `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let c = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Parse(format!("unsupported magic {other:?}"))),
    };
    let w = header_number(bytes, &mut pos)?;
    let h = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Parse(format!("only maxval 255 is supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Parse("zero image dimension".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Parse("missing raster separator".into()));
    }
    pos += 1;
    let plane = h * w;
    let raster = &bytes[pos..];
    if raster.len() < c * plane {
        return Err(Error::Parse(format!(
            "truncated raster: need {} bytes, have {}",
            c * plane,
            raster.len()
        )));
    }
    let mut data = vec![0.0; c * plane];
    for p in 0..plane {
        for ch in 0..c {
            data[ch * plane + p] = raster[p * c + ch] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[c, h, w], data)
}

pub fn write_ppm_file(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, write_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm_file(path: &Path) -> Result<Tensor> {
    read_ppm(&std::fs::read(path)?)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse("truncated header".into()));
    }
    String::from_utf8(bytes[start..*pos].to_vec()).map_err(|_| Error::Parse("non-ASCII header".into()))
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Parse(format!("invalid header number {tok:?}")))
}
