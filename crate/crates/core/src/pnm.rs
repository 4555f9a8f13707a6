//! 8-bit binary PGM (P5) and PPM (P6).

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::Field;

/// Parses a P5 or P6 byte stream. Samples map to `[0, 1]` by `/255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Field> {
    let mut pos = 0;
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err(Error::Format {
            offset: 0,
            message: "expected magic P5 or P6".into(),
        });
    }
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    pos += 2;
    let (width, _) = header_number(bytes, &mut pos, "width")?;
    let (height, _) = header_number(bytes, &mut pos, "height")?;
    let (maxval, maxval_at) = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: maxval_at,
            message: format!("unsupported maxval {maxval}, only 255 is supported"),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::Format {
            offset: maxval_at,
            message: format!("image dimensions {width}x{height} must be positive"),
        });
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Format {
                offset: pos,
                message: "expected a single whitespace byte after maxval".into(),
            })
        }
    }
    let n = width * height * channels;
    if bytes.len() - pos < n {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated payload: expected {n} bytes, found {}", bytes.len() - pos),
        });
    }
    let payload = &bytes[pos..pos + n];
    let plane = width * height;
    let mut data = vec![0.0; n];
    for (i, px) in payload.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * plane + i] = f64::from(b) / 255.0;
        }
    }
    Field::from_vec(height, width, channels, data)
}

/// Next decimal header field and its byte offset.
fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<(usize, usize)> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format {
            offset: start,
            message: format!("expected {what}"),
        });
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .map(|v| (v, start))
        .ok_or_else(|| Error::Format {
            offset: start,
            message: format!("{what} is out of range"),
        })
}

/// `round(clamp(v, 0, 1) * 255)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes a 1-channel field as P5 or a 3-channel field as P6.
pub fn encode_pnm(field: &Field) -> Result<Vec<u8>> {
    let (h, w, c) = field.shape();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::Shape(format!(
                "only 1- or 3-channel fields can be saved, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(plane * c);
    for i in 0..plane {
        for ch in 0..c {
            out.push(quantize(field.data()[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Field> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn save_image(field: &Field, path: &Path) -> Result<()> {
    let bytes = encode_pnm(field)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn p5_header_example() {
        let mut bytes = b"P5 4 4 255\n".to_vec();
        bytes.extend(0u8..16);
        let f = decode_pnm(&bytes).unwrap();
        assert_eq!(f.shape(), (4, 4, 1));
        assert_eq!(f.get(1, 2, 0), 6.0 / 255.0);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# max\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let f = decode_pnm(&bytes).unwrap();
        assert_eq!(f.data(), &[0.0, 1.0]);
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5004), 128);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(127.5 / 255.0), 128);
    }

    #[test]
    fn ppm_interleaving() {
        let f = Field::from_fn(2, 3, 3, |y, x, c| ((y * 3 + x) * 3 + c) as f64 / 255.0);
        let bytes = encode_pnm(&f).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(&bytes[11..17], &[0, 1, 2, 3, 4, 5]);
        assert_eq!(decode_pnm(&bytes).unwrap(), f);
    }

    #[test]
    fn format_errors_name_offsets() {
        let err = decode_pnm(b"P3 4 4 255\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let err = decode_pnm(b"P5 4 4 65535\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 7, .. }), "{err}");
        let err = decode_pnm(b"P5 4 x 255\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 5, .. }), "{err}");
        let mut short = b"P5 4 4 255\n".to_vec();
        short.extend([0u8; 10]);
        let err = decode_pnm(&short).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 21, .. }), "{err}");
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn masks_save_as_extremes() {
        let m = Field::from_fn(2, 2, 1, |y, _, _| y as f64);
        let bytes = encode_pnm(&m).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 255, 255]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let f = Field::from_fn(3, 5, 1, |y, x, _| ((y * 5 + x) * 17 % 256) as f64 / 255.0);
        save_image(&f, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), f);
        assert!(matches!(load_image(&dir.path().join("missing.pgm")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn eight_bit_round_trip(bytes in proptest::collection::vec(any::<u8>(), 12), rgb in any::<bool>()) {
            let c = if rgb { 3 } else { 1 };
            let n = 12 / c;
            let f = Field::from_vec(2, n / 2, c, bytes.iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap();
            let back = decode_pnm(&encode_pnm(&f).unwrap()).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
