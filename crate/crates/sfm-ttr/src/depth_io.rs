//! Depth maps and network input images on disk.
//!
//! * PFM: 32-bit floats, rows stored bottom to top. Depth maps are `Pf`
//!   (one channel), images are `PF` (three interleaved channels). Written
//!   little-endian (negative scale); both byte orders are read.
//! * 16-bit greyscale PNG, KITTI style: depth = value / 256, 0 = no depth.
//!
//! Invalid depth pixels are written as 0 and read back as invalid.

use std::fs;
use std::io::{self, BufRead, Read};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use thiserror::Error;

use sfm_ttr_core::model::Image;
use sfm_ttr_core::nn::Tensor;
use sfm_ttr_core::DepthMap;

#[derive(Debug, Error)]
pub enum DepthIoError {
    #[error("bad PFM header: {0}")]
    BadHeader(String),
    #[error("PFM has {found} channels, expected {expected}")]
    ChannelMismatch { found: usize, expected: usize },
    #[error("PFM payload is truncated")]
    Truncated,
    #[error("depth {0} is outside the 16-bit PNG range")]
    DepthOutOfRange(f64),
    #[error("PNG must be 16-bit greyscale, found {0}")]
    UnsupportedPng(String),
    #[error("unknown depth map extension for {0}")]
    UnknownExtension(String),
    #[error(transparent)]
    PngDecode(#[from] png::DecodingError),
    #[error(transparent)]
    PngEncode(#[from] png::EncodingError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Largest depth a 16-bit PNG can hold.
pub const PNG_MAX_DEPTH: f64 = u16::MAX as f64 / 256.0;

struct Pfm {
    channels: usize,
    width: usize,
    height: usize,
    /// Top-to-bottom, interleaved.
    data: Vec<f32>,
}

fn header_token(r: &mut impl BufRead) -> Result<String, DepthIoError> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(DepthIoError::BadHeader("unexpected end of header".into()));
        }
        let t = line.trim();
        if !t.is_empty() {
            return Ok(t.to_string());
        }
    }
}

fn decode_pfm(bytes: &[u8]) -> Result<Pfm, DepthIoError> {
    let mut r = bytes;
    let magic = header_token(&mut r)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(DepthIoError::BadHeader(format!("magic `{other}`"))),
    };
    let dims = header_token(&mut r)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (Some(Ok(width)), Some(Ok(height)), None) = (it.next(), it.next(), it.next()) else {
        return Err(DepthIoError::BadHeader(format!("dimensions `{dims}`")));
    };
    let scale_tok = header_token(&mut r)?;
    let scale: f64 = scale_tok.parse().map_err(|_| DepthIoError::BadHeader(format!("scale `{scale_tok}`")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(DepthIoError::BadHeader(format!("scale `{scale_tok}`")));
    }
    let n = width.checked_mul(height).and_then(|v| v.checked_mul(channels)).ok_or(DepthIoError::Truncated)?;
    let mut raw = vec![0u8; n.checked_mul(4).ok_or(DepthIoError::Truncated)?];
    r.read_exact(&mut raw).map_err(|_| DepthIoError::Truncated)?;
    let mut bottom_up = vec![0f32; n];
    if scale < 0.0 {
        LittleEndian::read_f32_into(&raw, &mut bottom_up);
    } else {
        BigEndian::read_f32_into(&raw, &mut bottom_up);
    }
    let row = width * channels;
    let data = if row == 0 { Vec::new() } else { bottom_up.chunks(row).rev().flatten().copied().collect() };
    Ok(Pfm { channels, width, height, data })
}

fn encode_pfm(pfm: &Pfm) -> Vec<u8> {
    let magic = if pfm.channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", pfm.width, pfm.height).into_bytes();
    let row = pfm.width * pfm.channels;
    let start = out.len();
    out.resize(start + pfm.data.len() * 4, 0);
    if row > 0 {
        for (i, chunk) in pfm.data.chunks(row).rev().enumerate() {
            let at = start + i * row * 4;
            LittleEndian::write_f32_into(chunk, &mut out[at..at + row * 4]);
        }
    }
    out
}

fn stored(map: &DepthMap, i: usize) -> f64 {
    if map.mask()[i] {
        map.values()[i]
    } else {
        0.0
    }
}

pub fn encode_depth_pfm(map: &DepthMap) -> Vec<u8> {
    let data = (0..map.len()).map(|i| stored(map, i) as f32).collect();
    encode_pfm(&Pfm { channels: 1, width: map.width(), height: map.height(), data })
}

pub fn decode_depth_pfm(bytes: &[u8]) -> Result<DepthMap, DepthIoError> {
    let pfm = decode_pfm(bytes)?;
    if pfm.channels != 1 {
        return Err(DepthIoError::ChannelMismatch { found: pfm.channels, expected: 1 });
    }
    let values = pfm.data.iter().map(|&v| f64::from(v)).collect();
    Ok(DepthMap::from_values(pfm.width, pfm.height, values).expect("sizes agree"))
}

pub fn encode_image_pfm(image: &Image) -> Result<Vec<u8>, DepthIoError> {
    if image.channels != 3 {
        return Err(DepthIoError::ChannelMismatch { found: image.channels, expected: 3 });
    }
    let (w, h) = (image.width, image.height);
    let mut data = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(image.at(c, y, x) as f32);
            }
        }
    }
    Ok(encode_pfm(&Pfm { channels: 3, width: w, height: h, data }))
}

pub fn decode_image_pfm(bytes: &[u8]) -> Result<Image, DepthIoError> {
    let pfm = decode_pfm(bytes)?;
    if pfm.channels != 3 {
        return Err(DepthIoError::ChannelMismatch { found: pfm.channels, expected: 3 });
    }
    let (w, h) = (pfm.width, pfm.height);
    let mut t = Tensor::zeros(3, h, w);
    for (i, px) in pfm.data.chunks(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            t.data[c * w * h + i] = f64::from(v);
        }
    }
    Ok(t)
}

pub fn encode_depth_png16(map: &DepthMap) -> Result<Vec<u8>, DepthIoError> {
    let mut samples = Vec::with_capacity(map.len() * 2);
    for i in 0..map.len() {
        let d = stored(map, i);
        if d > PNG_MAX_DEPTH {
            return Err(DepthIoError::DepthOutOfRange(d));
        }
        // Keep tiny valid depths distinguishable from the 0 sentinel.
        let v = if d > 0.0 { (d * 256.0).round().max(1.0) as u16 } else { 0 };
        samples.extend_from_slice(&v.to_be_bytes());
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, map.width() as u32, map.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&samples)?;
    writer.finish()?;
    Ok(out)
}

pub fn decode_depth_png16(bytes: &[u8]) -> Result<DepthMap, DepthIoError> {
    let mut reader = png::Decoder::new(io::Cursor::new(bytes)).read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(DepthIoError::UnsupportedPng(format!("{:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().ok_or(DepthIoError::UnsupportedPng("oversized".into()))?];
    let frame = reader.next_frame(&mut buf)?;
    let values = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / 256.0)
        .collect();
    Ok(DepthMap::from_values(w, h, values).expect("sizes agree"))
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Reads a `.pfm` or 16-bit `.png` depth map.
pub fn read_depth_map(path: &Path) -> Result<DepthMap, DepthIoError> {
    let bytes = fs::read(path)?;
    match extension(path).as_str() {
        "pfm" => decode_depth_pfm(&bytes),
        "png" => decode_depth_png16(&bytes),
        _ => Err(DepthIoError::UnknownExtension(path.display().to_string())),
    }
}

pub fn write_depth_map(path: &Path, map: &DepthMap) -> Result<(), DepthIoError> {
    let bytes = match extension(path).as_str() {
        "pfm" => encode_depth_pfm(map),
        "png" => encode_depth_png16(map)?,
        _ => return Err(DepthIoError::UnknownExtension(path.display().to_string())),
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image, DepthIoError> {
    decode_image_pfm(&fs::read(path)?)
}

pub fn write_image(path: &Path, image: &Image) -> Result<(), DepthIoError> {
    fs::write(path, encode_image_pfm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> DepthMap {
        DepthMap::from_fn(5, 3, |x, y| 1.5 + x as f64 + 10.0 * y as f64)
    }

    #[test]
    fn pfm_header_and_row_order() {
        let bytes = encode_depth_pfm(&ramp());
        assert!(bytes.starts_with(b"Pf\n5 3\n-1.0\n"));
        // The first stored row is the bottom image row.
        let first = LittleEndian::read_f32(&bytes[12..16]);
        assert_eq!(first, 21.5);
        assert_eq!(decode_depth_pfm(&bytes).unwrap(), ramp());
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        bytes.extend_from_slice(&4.0f32.to_be_bytes());
        let m = decode_depth_pfm(&bytes).unwrap();
        assert_eq!(m.values(), &[2.5, 4.0]);
    }

    #[test]
    fn pfm_errors() {
        assert!(matches!(decode_depth_pfm(b"P5\n1 1\n-1\n"), Err(DepthIoError::BadHeader(_))));
        assert!(matches!(decode_depth_pfm(b"Pf\n2 2\n-1\n\0\0\0\0"), Err(DepthIoError::Truncated)));
        let img = encode_image_pfm(&Tensor::zeros(3, 2, 2)).unwrap();
        assert!(matches!(decode_depth_pfm(&img), Err(DepthIoError::ChannelMismatch { found: 3, expected: 1 })));
    }

    #[test]
    fn invalid_pixels_round_trip_as_zero() {
        let mut m = ramp();
        m.invalidate(1, 1);
        let back = decode_depth_pfm(&encode_depth_pfm(&m)).unwrap();
        assert!(!back.is_valid(1, 1));
        assert_eq!(back.valid_count(), 14);
        let back = decode_depth_png16(&encode_depth_png16(&m).unwrap()).unwrap();
        assert!(!back.is_valid(1, 1));
    }

    #[test]
    fn png16_quantizes_to_1_over_256() {
        let m = DepthMap::from_values(3, 1, vec![1.0, 80.0 + 1.0 / 256.0, 12.3]).unwrap();
        let back = decode_depth_png16(&encode_depth_png16(&m).unwrap()).unwrap();
        assert_eq!(back.values()[..2], [1.0, 80.0 + 1.0 / 256.0]);
        assert!((back.values()[2] - 12.3).abs() <= 0.5 / 256.0);
        let too_deep = DepthMap::filled(1, 1, 300.0);
        assert!(matches!(encode_depth_png16(&too_deep), Err(DepthIoError::DepthOutOfRange(_))));
    }

    #[test]
    fn png16_rejects_eight_bit() {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, 1, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[7]).unwrap();
        w.finish().unwrap();
        assert!(matches!(decode_depth_png16(&out), Err(DepthIoError::UnsupportedPng(_))));
    }

    #[test]
    fn image_round_trip() {
        let data: Vec<f64> = (0..3 * 4 * 2).map(|i| i as f64 * 0.25).collect();
        let t = Tensor::from_data(3, 2, 4, data).unwrap();
        assert_eq!(decode_image_pfm(&encode_image_pfm(&t).unwrap()).unwrap(), t);
    }
}
