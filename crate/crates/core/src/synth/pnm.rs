//! Binary netpbm images: `P6` colour frames, 16-bit `P5` gas maps and 8-bit
//! `P5` masks. Pixel values cross this boundary as `f32` in `[0, 1]`; colour
//! planes are channel-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn to_level(v: f32, max: f32) -> u32 {
    (v.clamp(0.0, 1.0) * max).round() as u32
}

fn write(path: &Path, magic: &str, w: usize, h: usize, max: u32, body: &[u8]) -> Result<()> {
    let mut out = format!("{magic}\n{w} {h}\n{max}\n").into_bytes();
    out.extend_from_slice(body);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `planes` is `[3, h, w]`.
pub fn write_ppm(path: &Path, w: usize, h: usize, planes: &[f32]) -> Result<()> {
    let n = w * h;
    debug_assert_eq!(planes.len(), 3 * n);
    let mut body = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            body.push(to_level(planes[c * n + i], 255.0) as u8);
        }
    }
    write(path, "P6", w, h, 255, &body)
}

/// 16-bit big-endian grey levels, `value * 65535`.
pub fn write_pgm16(path: &Path, w: usize, h: usize, values: &[f32]) -> Result<()> {
    let body: Vec<u8> = values
        .iter()
        .flat_map(|&v| (to_level(v, 65535.0) as u16).to_be_bytes())
        .collect();
    write(path, "P5", w, h, 65535, &body)
}

/// 8-bit mask with foreground stored as 255.
pub fn write_mask(path: &Path, w: usize, h: usize, mask: &[u8]) -> Result<()> {
    let body: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    write(path, "P5", w, h, 255, &body)
}

struct Header {
    magic: [u8; 2],
    w: usize,
    h: usize,
    max: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("not a netpbm file"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("header not terminated"));
    }
    let [w, h, max] = fields;
    if w == 0 || h == 0 || max == 0 || max > 65535 {
        return Err(bad("unsupported dimensions or depth"));
    }
    Ok(Header {
        magic,
        w,
        h,
        max: max as u32,
        offset: pos + 1,
    })
}

fn samples(bytes: &[u8], hd: &Header, count: usize, path: &Path) -> Result<Vec<f32>> {
    let wide = hd.max > 255;
    let size = if wide { 2 } else { 1 };
    let body = &bytes[hd.offset..];
    if body.len() != count * size {
        return Err(Error::Data(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            count * size,
            body.len()
        )));
    }
    let max = hd.max as f32;
    Ok(if wide {
        body.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / max)
            .collect()
    } else {
        body.iter().map(|&b| b as f32 / max).collect()
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Returns `(w, h, planes)` with planes laid out `[3, h, w]`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = read_bytes(path)?;
    let hd = parse_header(&bytes, path)?;
    if &hd.magic != b"P6" {
        return Err(Error::Data(format!("{}: expected P6", path.display())));
    }
    let n = hd.w * hd.h;
    let px = samples(&bytes, &hd, 3 * n, path)?;
    let mut planes = vec![0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            planes[c * n + i] = px[3 * i + c];
        }
    }
    Ok((hd.w, hd.h, planes))
}

/// Returns `(w, h, values)` for an 8- or 16-bit greyscale image.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = read_bytes(path)?;
    let hd = parse_header(&bytes, path)?;
    if &hd.magic != b"P5" {
        return Err(Error::Data(format!("{}: expected P5", path.display())));
    }
    let v = samples(&bytes, &hd, hd.w * hd.h, path)?;
    Ok((hd.w, hd.h, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        fs::write(&p, b"P5\n# note\n2 1\n255\n\x00\xff").unwrap();
        let (w, h, v) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(v, vec![0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        write_pgm16(&p, 1, 1, &[1.0 / 65535.0 * 258.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[1, 2]);
    }

    #[test]
    fn truncated_payload_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        fs::write(&p, b"P6\n2 2\n255\n\x00\x00").unwrap();
        assert_eq!(read_ppm(&p).unwrap_err().exit_code(), 3);
    }
}
