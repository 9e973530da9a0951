//! Binary PPM (P6), PGM (P5) and raw float plane (`ZFPL`) files.
//!
//! 8-bit files map byte `k` to `k / 255`; writers round to the nearest byte,
//! so values already on that grid round-trip exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PLANE_MAGIC: &[u8; 4] = b"ZFPL";

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Encodes a `3×H×W` image as P6.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::dim("encode_ppm", format!("channels must be 3, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(img.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Encodes a `1×H×W` (or `C×H×W`, stacked vertically) tensor as P5.
pub fn encode_pgm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    let mut out = format!("P5\n{w} {}\n255\n", c * h).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Encodes class indices as P5 bytes.
pub fn encode_labels(labels: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(format_err(path, 0, "truncated magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format_err(path, pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, pos, format!("expected header field {i}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, start, "header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(path, pos, "expected whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(path, pos, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, pos, "zero image extent"));
    }
    Ok(Header {
        magic,
        width,
        height,
        data_start: pos,
    })
}

fn pnm_payload<'a>(bytes: &'a [u8], path: &Path, magic: &[u8; 2], per_px: usize) -> Result<(Header, &'a [u8])> {
    let hd = parse_pnm_header(bytes, path)?;
    if &hd.magic != magic {
        return Err(format_err(
            path,
            0,
            format!("expected {}, found {:?}", String::from_utf8_lossy(magic), hd.magic),
        ));
    }
    let need = hd.width * hd.height * per_px;
    let have = bytes.len() - hd.data_start;
    if have < need {
        return Err(format_err(path, bytes.len(), format!("truncated pixel data: {have} of {need} bytes")));
    }
    if have > need {
        return Err(format_err(path, hd.data_start + need, "trailing bytes after pixel data"));
    }
    let start = hd.data_start;
    Ok((hd, &bytes[start..]))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let (hd, px) = pnm_payload(bytes, path, b"P6", 3)?;
    let plane = hd.width * hd.height;
    Tensor::new(
        vec![3, hd.height, hd.width],
        (0..3 * plane)
            .map(|i| dequantize(px[(i % plane) * 3 + i / plane]))
            .collect(),
    )
}

/// Decodes P5 into `channels × (height / channels) × width`.
pub fn decode_pgm(bytes: &[u8], path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let (hd, px) = pnm_payload(bytes, path, b"P5", 1)?;
    if hd.height % channels != 0 {
        return Err(format_err(
            path,
            0,
            format!("height {} is not a multiple of {channels} planes", hd.height),
        ));
    }
    Tensor::new(
        vec![channels, hd.height / channels, hd.width],
        px.iter().map(|&b| dequantize(b)).collect(),
    )
}

/// Decodes P5 class indices, returning `(labels, height, width)`.
pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let (hd, px) = pnm_payload(bytes, path, b"P5", 1)?;
    Ok((px.to_vec(), hd.height, hd.width))
}

/// `"ZFPL"`, `c`, `h`, `w` as little-endian u32, then `c·h·w` f32 values.
pub fn encode_planes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    let mut out = Vec::with_capacity(16 + 4 * t.len());
    out.extend_from_slice(PLANE_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_planes(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 16 {
        return Err(format_err(path, bytes.len(), "truncated header"));
    }
    if &bytes[..4] != PLANE_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected ZFPL"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    for (i, d) in [c, h, w].into_iter().enumerate() {
        if d == 0 {
            return Err(format_err(path, 4 + 4 * i, "zero extent"));
        }
    }
    let need = c * h * w * 4;
    let have = bytes.len() - 16;
    if have != need {
        return Err(format_err(
            path,
            16 + have.min(need),
            format!("payload is {have} bytes, header implies {need}"),
        ));
    }
    Tensor::new(
        vec![c, h, w],
        bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    )
}

pub fn save_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write(path, bytes)
}

pub fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    read(path)
}

pub fn save_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    write(path, &encode_ppm(img)?)
}

pub fn load_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(shape: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(shape, |i| dequantize((i * 37 % 256) as u8))
    }

    #[test]
    fn ppm_round_trip_is_exact() {
        let img = grid(&[3, 5, 4]);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n4 5\n255\n"));
        assert_eq!(decode_ppm(&bytes, Path::new("m")).unwrap(), img);
    }

    #[test]
    fn pgm_planes_round_trip() {
        let img = grid(&[3, 2, 4]);
        let bytes = encode_pgm(&img).unwrap();
        assert_eq!(decode_pgm(&bytes, Path::new("m"), 3).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let t = decode_pgm(&bytes, Path::new("m"), 1).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_files_report_offsets() {
        let bytes = encode_ppm(&grid(&[3, 5, 4])).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(
            decode_ppm(cut, Path::new("m")),
            Err(Error::Format { offset, .. }) if offset as usize == cut.len()
        ));
        assert!(matches!(
            decode_ppm(b"P6\n4", Path::new("m")),
            Err(Error::Format { .. })
        ));
        let planes = encode_planes(&Tensor::full(&[2, 3, 3], 0.25)).unwrap();
        assert!(matches!(
            decode_planes(&planes[..20], Path::new("m")),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_planes(&planes[..10], Path::new("m")),
            Err(Error::Format { offset: 10, .. })
        ));
    }

    #[test]
    fn planes_round_trip_and_header() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f32 * -0.3);
        let bytes = encode_planes(&t).unwrap();
        assert_eq!(bytes.len(), 16 + 24 * 4);
        assert_eq!(&bytes[..4], b"ZFPL");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(decode_planes(&bytes, Path::new("m")).unwrap(), t);
    }

    #[test]
    fn wrong_magic_rejected() {
        let bytes = encode_pgm(&grid(&[1, 2, 2])).unwrap();
        assert!(decode_ppm(&bytes, Path::new("m")).is_err());
    }
}
