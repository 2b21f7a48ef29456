//! Shared low-level file plumbing: little-endian primitives, portable pixmap
//! images, and raw float32 dumps with small text headers. The owning modules
//! define the actual formats on top of these.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f32<W: Write>(w: &mut W, v: f32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u8<R: Read>(r: &mut R) -> std::io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn read_f32<R: Read>(r: &mut R) -> std::io::Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_magic<R: Read>(r: &mut R, expected: &[u8; 4], format: &'static str, path: &Path) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    if &b != expected {
        return Err(Error::format(format, path, format!("bad magic {:?}", b)));
    }
    Ok(())
}

pub fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Write a binary P6 pixmap from row-major `[r, g, b]` floats in [0, 1].
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[[f64; 3]]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel buffer size mismatch");
    let mut w = create_writer(path)?;
    let err = |e| Error::io(path, e);
    write!(w, "P6\n{} {}\n255\n", width, height).map_err(err)?;
    let mut buf = Vec::with_capacity(width * height * 3);
    for px in pixels {
        for c in px {
            buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&buf).map_err(err)?;
    w.flush().map_err(err)?;
    Ok(())
}

/// Read a binary P6 pixmap into row-major floats in [0, 1].
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let mut r = open_reader(path)?;
    let mut header = Vec::new();
    // Header: three whitespace-separated fields after "P6", then one byte.
    let mut fields = Vec::new();
    let mut cur = Vec::new();
    while fields.len() < 4 {
        let b = read_u8(&mut r).map_err(|e| Error::io(path, e))?;
        header.push(b);
        if b.is_ascii_whitespace() {
            if !cur.is_empty() {
                fields.push(String::from_utf8_lossy(&cur).to_string());
                cur.clear();
            }
            // Comments are not produced by this repo's writer; reject them.
        } else if b == b'#' {
            return Err(Error::format("ppm", path, "comments unsupported"));
        } else {
            cur.push(b);
        }
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::format("ppm", path, "expected P6 maxval 255"));
    }
    let width: usize = fields[1]
        .parse()
        .map_err(|_| Error::format("ppm", path, "bad width"))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| Error::format("ppm", path, "bad height"))?;
    let mut data = vec![0u8; width * height * 3];
    r.read_exact(&mut data).map_err(|e| Error::io(path, e))?;
    let pixels = data
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Ok((width, height, pixels))
}

/// Write a raw little-endian float32 dump preceded by a text header.
/// Header lines: `<tag> 1`, then one `key v...` line per entry, then `data`.
pub fn write_f32_dump(path: &Path, tag: &str, header: &[(&str, String)], values: &[f32]) -> Result<()> {
    let mut w = create_writer(path)?;
    let err = |e| Error::io(path, e);
    writeln!(w, "{} 1", tag).map_err(err)?;
    for (k, v) in header {
        writeln!(w, "{} {}", k, v).map_err(err)?;
    }
    writeln!(w, "data").map_err(err)?;
    for v in values {
        write_f32(&mut w, *v).map_err(err)?;
    }
    w.flush().map_err(err)?;
    Ok(())
}

/// Read a dump written by [`write_f32_dump`]; returns header entries and data.
pub fn read_f32_dump(path: &Path, tag: &str) -> Result<(Vec<(String, String)>, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |reason: &str| Error::Format {
        format: "f32dump",
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut header = Vec::new();
    let mut pos = 0usize;
    let mut first = true;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err("missing data marker"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| fmt_err("non-utf8 header"))?;
        pos += nl + 1;
        if first {
            let want = format!("{} 1", tag);
            if line != want {
                return Err(fmt_err(&format!("expected header '{}', got '{}'", want, line)));
            }
            first = false;
            continue;
        }
        if line == "data" {
            break;
        }
        match line.split_once(' ') {
            Some((k, v)) => header.push((k.to_string(), v.to_string())),
            None => return Err(fmt_err(&format!("bad header line '{}'", line))),
        }
    }
    let payload = &bytes[pos..];
    if payload.len() % 4 != 0 {
        return Err(fmt_err("payload not a multiple of 4 bytes"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn header_value<'a>(header: &'a [(String, String)], key: &str) -> Option<&'a str> {
    header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let pixels = vec![[0.0, 0.5, 1.0], [1.0, 0.0, 0.25], [0.1, 0.2, 0.3], [0.9, 0.8, 0.7]];
        write_ppm(&path, 2, 2, &pixels).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        for (a, b) in pixels.iter().zip(&back) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }

    #[test]
    fn f32_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let vals: Vec<f32> = (0..10).map(|i| i as f32 * 0.5).collect();
        write_f32_dump(&path, "TEST", &[("res", "10".into())], &vals).unwrap();
        let (hdr, back) = read_f32_dump(&path, "TEST").unwrap();
        assert_eq!(header_value(&hdr, "res"), Some("10"));
        assert_eq!(vals, back);
    }
}
