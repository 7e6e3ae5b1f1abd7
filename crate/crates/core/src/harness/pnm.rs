//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};

/// How images are brought to the working resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    Nearest,
    Bilinear,
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let err = |offset: usize, msg: &str| Error::Parse {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(err(0, "missing P5/P6 magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(Error::Unsupported(format!("PNM variant P{}", bytes[1] as char))),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, ["expected width", "expected height", "expected maxval"][i]));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| err(start, "number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Unsupported(format!("maxval {maxval} (only 255 is supported)")));
    }
    if width == 0 || height == 0 {
        return Err(err(2, "zero image dimension"));
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos + 1,
    })
}

/// Decodes a P5/P6 byte buffer into `[0, 1]` samples.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height * h.channels;
    let payload = bytes.get(h.data_start..h.data_start + n).ok_or_else(|| Error::Parse {
        offset: bytes.len(),
        msg: format!("expected {n} sample bytes after header"),
    })?;
    Image::new(h.height, h.width, h.channels, payload.iter().map(|&b| f64::from(b) / 255.0).collect())
}

/// Quantizes with round-half-up; 1-channel images become P5, 3-channel P6.
pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads and resizes to `size` when it differs.
pub fn load_image_sized(path: &Path, size: Option<(usize, usize)>, mode: Resize) -> Result<Image> {
    let img = load_image(path)?;
    Ok(match size {
        Some((h, w)) if (h, w) != (img.height(), img.width()) => match mode {
            Resize::Nearest => img.resize_nearest(h, w),
            Resize::Bilinear => img.resize_bilinear(h, w),
        },
        _ => img,
    })
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

/// Mask from a grayscale image: samples above one half are corrupted.
pub fn load_mask(path: &Path, size: Option<(usize, usize)>) -> Result<BinaryMask> {
    let img = load_image(path)?;
    let m = BinaryMask::from_image(&img);
    Ok(match size {
        Some((h, w)) if (h, w) != (m.height(), m.width()) => m.resize_nearest(h, w),
        _ => m,
    })
}

pub fn save_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    save_image(path, &m.to_image())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn round_trip_within_half_step() {
        let mut r = SplitMix64::new(1);
        let img = Image::from_fn(5, 7, 3, |_, _, _| r.next_f64());
        let back = decode(&encode(&img)).unwrap();
        let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-15);
        assert_eq!(encode(&back), encode(&img));
    }

    #[test]
    fn header_comments_and_errors() {
        let ok = b"P5\n# note\n2 1\n255\n\x00\xff";
        let img = decode(ok).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        assert_eq!(BinaryMask::from_image(&img).data(), &[0.0, 1.0]);
        match decode(b"P6\n2 x\n255\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Unsupported(_))));
        assert!(matches!(decode(b"P3\n1 1\n255\n0"), Err(Error::Unsupported(_))));
        assert!(matches!(decode(b"P5\n2 2\n255\n\x00"), Err(Error::Parse { .. })));
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.2), 0);
    }
}
