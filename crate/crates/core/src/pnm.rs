//! Binary PGM (P5) and PPM (P6) images.
//!
//! Reading yields a `[1, H, W]` tensor in `[0, 1]`; color images are averaged
//! over their three channels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format { offset, detail: detail.into() }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    /// Offset of the first payload byte.
    data_start: usize,
}

fn skip_space(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b'#') => {
                while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                    pos += 1;
                }
            }
            _ => return pos,
        }
    }
}

fn header_int(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_space(bytes, pos);
    let end = start + bytes[start..].iter().take_while(|b| b.is_ascii_digit()).count();
    if end == start {
        return Err(format_err(start, format!("expected {what}")));
    }
    let v = std::str::from_utf8(&bytes[start..end])
        .expect("ascii digits")
        .parse::<usize>()
        .map_err(|_| format_err(start, format!("{what} out of range")))?;
    Ok((v, end))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_err(0, "expected magic P5 or P6")),
    };
    let (width, pos) = header_int(bytes, 2, "width")?;
    let (height, pos) = header_int(bytes, pos, "height")?;
    let (maxval, pos) = header_int(bytes, pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(pos, format!("empty image {width}×{height}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(format_err(pos, format!("maxval {maxval} outside 1..=65535")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(format_err(pos, "expected a whitespace byte after maxval"));
    }
    Ok(Header { channels, width, height, maxval, data_start: pos + 1 })
}

/// Decodes a P5 or P6 file held in memory.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let sample = if h.maxval > 255 { 2 } else { 1 };
    let expected = h.width * h.height * h.channels * sample;
    let payload = &bytes[h.data_start..];
    if payload.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, got {}", payload.len()),
        ));
    }
    let max = h.maxval as f64;
    let values: Vec<f64> = if sample == 1 {
        payload[..expected].iter().map(|&b| b as f64 / max).collect()
    } else {
        payload[..expected].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / max).collect()
    };
    let gray = values
        .chunks(h.channels)
        .map(|px| (px.iter().sum::<f64>() / h.channels as f64).min(1.0))
        .collect();
    Tensor::new(&[1, h.height, h.width], gray)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Encodes a `[H, W]` or `[1, H, W]` map as 8-bit P5, scaling its minimum
/// to 0 and its maximum to 255. A constant map encodes as all zeros.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *map.shape() {
        [h, w] | [1, h, w] => (h, w),
        ref s => return Err(Error::dim("encode_pgm", format!("expected [H, W] or [1, H, W], got {s:?}"))),
    };
    let d = map.data();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("cannot encode a map with non-finite values".into()));
    }
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(d.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    Ok(out)
}

pub fn write_pgm(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}

/// Encodes an image with values in `[0, 1]` as 8-bit P5 without rescaling,
/// clamping anything outside that range.
pub fn encode_gray(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [h, w] | [1, h, w] => (h, w),
        ref s => return Err(Error::dim("encode_gray", format!("expected [H, W] or [1, H, W], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_gray(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_gray(image)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tiny_p5() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0, 255, 51, 102]);
        let t = decode(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn p6_is_averaged() {
        let mut bytes = b"P6\n# comment\n1 1\n255\n".to_vec();
        bytes.extend([0, 51, 255]);
        let t = decode(&bytes).unwrap();
        assert!((t.data()[0] - 102.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn sixteen_bit_samples() {
        let mut bytes = b"P5 1 1 65535\n".to_vec();
        bytes.extend([0x80, 0x00]);
        assert!((decode(&bytes).unwrap().data()[0] - 32768.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn truncation_names_both_counts() {
        let mut bytes = b"P5 3 2 255\n".to_vec();
        bytes.extend([1, 2, 3, 4]);
        let err = decode(&bytes).unwrap_err();
        match &err {
            Error::Format { offset, detail } => {
                assert_eq!(*offset, bytes.len());
                assert!(detail.contains("expected 6 bytes, got 4"), "{detail}");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn bad_headers() {
        assert!(matches!(decode(b"P2 1 1 255\n\0"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode(b"P5 x 1 255\n\0"), Err(Error::Format { offset: 3, .. })));
        assert!(matches!(decode(b"P5 1 1 0\n\0"), Err(Error::Format { .. })));
        assert!(matches!(decode(b"P5 0 1 255\n"), Err(Error::Format { .. })));
    }

    #[test]
    fn gray_keeps_absolute_levels() {
        let t = Tensor::new(&[1, 1, 3], vec![0.2, 0.4, 1.5]).unwrap();
        let back = decode(&encode_gray(&t).unwrap()).unwrap();
        assert_eq!(back.data(), &[51.0 / 255.0, 102.0 / 255.0, 1.0]);
    }

    #[test]
    fn constant_map_encodes_as_zeros() {
        let bytes = encode_pgm(&Tensor::new(&[2, 2], vec![3.0; 4]).unwrap()).unwrap();
        assert!(bytes.ends_with(&[0, 0, 0, 0]));
    }

    proptest! {
        #[test]
        fn round_trip_within_one_level(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut data: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
            data[0] = 0.0;
            if h * w > 1 {
                data[1] = 1.0;
            }
            let map = Tensor::new(&[h, w], data.clone()).unwrap();
            let back = decode(&encode_pgm(&map).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), &[1, h, w]);
            for (a, b) in back.data().iter().zip(&data) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }
}
