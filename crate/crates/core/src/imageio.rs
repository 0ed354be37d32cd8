//! Netpbm readers/writers (P5/P6) and atomic file output.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `bytes` to `path` through a sibling temp file and a rename, so a
/// failure never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("expected magic {}", String::from_utf8_lossy(magic)),
        });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments
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
            return Err(Error::Parse {
                offset: pos,
                msg: "expected a decimal header field".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(Error::Parse {
                offset: start,
                msg: "header field out of range".into(),
            })?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Parse {
            offset: pos,
            msg: "expected a single whitespace byte before raster".into(),
        });
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Parse {
            offset: 2,
            msg: format!("invalid header {width}x{height} maxval {maxval}"),
        });
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        data_start: pos,
    })
}

fn samples(bytes: &[u8], h: &Header, count: usize) -> Result<Vec<u32>> {
    let wide = h.maxval > 255;
    let need = count * if wide { 2 } else { 1 };
    let raster = &bytes[h.data_start..];
    if raster.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("raster truncated: need {need} bytes, have {}", raster.len()),
        });
    }
    let out: Vec<u32> = if wide {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    } else {
        raster[..need].iter().map(|&b| b as u32).collect()
    };
    if let Some(i) = out.iter().position(|&v| v > h.maxval) {
        return Err(Error::Parse {
            offset: h.data_start + i * if wide { 2 } else { 1 },
            msg: format!("sample exceeds maxval {}", h.maxval),
        });
    }
    Ok(out)
}

/// Decodes a P6 image into a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6")?;
    let s = samples(bytes, &h, h.width * h.height * 3)?;
    let plane = h.width * h.height;
    let scale = h.maxval as f64;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in s.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / scale;
        }
    }
    Tensor::new(vec![3, h.height, h.width], data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` tensor as P6 with maxval 255.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::contract(format!("PPM needs a [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_u8(d[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read_file(path)?)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_atomic(path, &encode_ppm(image)?)
}

/// A P5 raster as raw integer samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayRaster {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub samples: Vec<u32>,
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayRaster> {
    let h = parse_header(bytes, b"P5")?;
    let samples = samples(bytes, &h, h.width * h.height)?;
    Ok(GrayRaster {
        width: h.width,
        height: h.height,
        maxval: h.maxval,
        samples,
    })
}

pub fn encode_pgm(r: &GrayRaster) -> Result<Vec<u8>> {
    if r.samples.len() != r.width * r.height || r.maxval == 0 || r.maxval > 65535 {
        return Err(Error::contract("inconsistent PGM raster"));
    }
    let mut out = format!("P5\n{} {}\n{}\n", r.width, r.height, r.maxval).into_bytes();
    if r.maxval > 255 {
        for &v in &r.samples {
            out.extend_from_slice(&(v.min(r.maxval) as u16).to_be_bytes());
        }
    } else {
        out.extend(r.samples.iter().map(|&v| v.min(r.maxval) as u8));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_grid_values() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| (i * 15) as f64 / 255.0);
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn pgm_sixteen_bit_is_big_endian() {
        let r = GrayRaster {
            width: 2,
            height: 1,
            maxval: 65535,
            samples: vec![1, 0x0203],
        };
        let bytes = encode_pgm(&r).unwrap();
        assert!(bytes.ends_with(&[0, 1, 2, 3]));
        assert_eq!(decode_pgm(&bytes).unwrap(), r);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let r = decode_pgm(bytes).unwrap();
        assert_eq!(r.samples, vec![0, 255]);
    }

    #[test]
    fn truncated_raster_reports_offset() {
        let bytes = b"P5\n4 4\n255\n\x00\x00";
        match decode_pgm(bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_parse_error() {
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\x00"),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
