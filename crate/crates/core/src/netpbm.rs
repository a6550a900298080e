//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(
            path,
            0,
            format!("expected magic `{}`", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and `#` comments between fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let name = ["width", "height", "maxval"][i];
            return Err(format_err(path, start, format!("expected {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, start, "number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(
            path,
            pos,
            "expected one whitespace byte after maxval",
        ));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(
            path,
            pos - 1,
            format!("maxval {maxval} unsupported, need 255"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, 2, "zero image dimension"));
    }
    Ok(Header {
        width,
        height,
        data_offset: pos,
    })
}

fn pixels<'a>(bytes: &'a [u8], h: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.data_offset;
    if have < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: h.data_offset + need,
            found: bytes.len(),
        });
    }
    Ok(&bytes[h.data_offset..h.data_offset + need])
}

/// RGB image as `[1, 3, h, w]` with samples scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6", path)?;
    let px = pixels(bytes, &h, 3, path)?;
    let plane = h.width * h.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(rgb[c]) / 255.0;
        }
    }
    Ok(Tensor::new(Shape::new(1, 3, h.height, h.width), data)?)
}

/// Gray image as `[1, 1, h, w]` with samples scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let h = parse_header(bytes, b"P5", path)?;
    let px = pixels(bytes, &h, 1, path)?;
    let data = px.iter().map(|&v| f64::from(v) / 255.0).collect();
    Ok(Tensor::new(Shape::new(1, 1, h.height, h.width), data)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes the first three channels of batch item 0.
pub fn encode_ppm(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let plane = s.plane();
    let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(t.data()[c * plane + i]));
        }
    }
    out
}

/// Encodes channel 0 of batch item 0.
pub fn encode_pgm(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(t.data()[..s.plane()].iter().map(|&v| quantize(v)));
    out
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(t)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(t)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_64x64_parses() {
        let mut bytes = b"P6\n64 64\n255\n".to_vec();
        bytes.extend((0..12288).map(|i| (i % 256) as u8));
        let t = decode_ppm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 64, 64));
        assert_eq!(t.at(0, 1, 0, 0), 1.0 / 255.0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5 # c\n2 # w\n1\n255\n\x00\xff".to_vec();
        let t = decode_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn truncation_names_file_and_size() {
        let bytes = b"P5\n4 4\n255\n\x00\x00".to_vec();
        match decode_pgm(&bytes, Path::new("short.pgm")) {
            Err(Error::Truncated {
                path,
                expected,
                found,
            }) => {
                assert_eq!(path, Path::new("short.pgm"));
                assert_eq!((expected, found), (11 + 16, 13));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_header_reports_offset() {
        match decode_ppm(b"P6\n12 x\n255\n", Path::new("b.ppm")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\x00", Path::new("c")),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n65535\n\x00\x00", Path::new("d")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn map_round_trip_within_quantization() {
        let t = Tensor::from_fn(Shape::new(1, 1, 5, 7), |_, _, y, x| {
            ((x * 7 + y * 3) % 11) as f64 / 10.3
        });
        let back = decode_pgm(&encode_pgm(&t), Path::new("m")).unwrap();
        assert!(t.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
        let rgb = Tensor::from_fn(Shape::new(1, 3, 4, 3), |_, c, y, x| {
            ((c + x + y) % 5) as f64 / 4.0
        });
        let back = decode_ppm(&encode_ppm(&rgb), Path::new("f")).unwrap();
        assert!(rgb.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }
}
