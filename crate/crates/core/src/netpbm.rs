//! Binary Netpbm reading and writing: 8-bit PGM (P5) and PPM (P6).
//! https://netpbm.sourceforge.net/doc/pgm.html

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::labels::{GreyImage, LabelError, LabelMap, LabelSchema, RgbImage};

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("{path}: {source}")]
    Label { path: String, source: LabelError },
}

struct Raster {
    width: usize,
    height: usize,
    bytes: Vec<u8>,
}

fn parse(path: &Path, magic: &[u8; 2], channels: usize) -> Result<Raster, NetpbmError> {
    let shown = path.display().to_string();
    let fmt_err = |detail: String| NetpbmError::Format { path: shown.clone(), detail };
    let buf = fs::read(path).map_err(|source| NetpbmError::Io { path: shown.clone(), source })?;
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(fmt_err(format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments may precede each header token.
        loop {
            match buf.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err("truncated header".into()));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err("bad header number".into()))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fmt_err(format!("degenerate size {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fmt_err(format!("only 8-bit maxval is supported, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fmt_err("missing raster separator".into()));
    }
    pos += 1;
    let need = width * height * channels;
    let raster = &buf[pos..];
    if raster.len() < need {
        return Err(fmt_err(format!("raster has {} bytes, expected {need}", raster.len())));
    }
    let bytes = raster[..need].iter().map(|&b| if maxval == 255 { b } else { (b as usize * 255 / maxval) as u8 }).collect();
    Ok(Raster { width, height, bytes })
}

fn write(path: &Path, magic: &str, width: usize, height: usize, raster: &[u8]) -> Result<(), NetpbmError> {
    let shown = path.display().to_string();
    let io = |source| NetpbmError::Io { path: shown.clone(), source };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut out = Vec::with_capacity(raster.len() + 20);
    write!(out, "{magic}\n{width} {height}\n255\n").expect("write to vec");
    out.extend_from_slice(raster);
    fs::write(path, out).map_err(io)
}

/// Raw 8-bit PGM samples.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), NetpbmError> {
    let r = parse(path, b"P5", 1)?;
    Ok((r.height, r.width, r.bytes))
}

pub fn write_pgm(path: &Path, height: usize, width: usize, samples: &[u8]) -> Result<(), NetpbmError> {
    assert_eq!(samples.len(), height * width);
    write(path, "P5", width, height, samples)
}

/// Grey image, normalized to `[0, 1]` by dividing by 255.
pub fn load_grey(path: &Path) -> Result<GreyImage, NetpbmError> {
    let (h, w, bytes) = read_pgm(path)?;
    GreyImage::new(h, w, bytes.into_iter().map(|b| b as f32 / 255.0).collect())
        .map_err(|source| NetpbmError::Label { path: path.display().to_string(), source })
}

/// Quantizes with `round(v * 255)`.
pub fn save_grey(path: &Path, img: &GreyImage) -> Result<(), NetpbmError> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    write_pgm(path, img.height(), img.width(), &bytes)
}

/// Label PGM: each sample is a 1-based class index of `schema`.
pub fn load_labels(path: &Path, schema: LabelSchema) -> Result<LabelMap, NetpbmError> {
    let shown = path.display().to_string();
    let (h, w, bytes) = read_pgm(path)?;
    if let Some(&bad) = bytes.iter().find(|&&b| b == 0 || b as usize > schema.n_classes()) {
        return Err(NetpbmError::Format {
            path: shown,
            detail: format!("label value {bad} outside 1..={} for the {schema} schema", schema.n_classes()),
        });
    }
    LabelMap::new(schema, h, w, bytes.into_iter().map(|b| b - 1).collect())
        .map_err(|source| NetpbmError::Label { path: shown, source })
}

pub fn save_labels(path: &Path, map: &LabelMap) -> Result<(), NetpbmError> {
    let bytes: Vec<u8> = map.pixels().iter().map(|&p| p + 1).collect();
    write_pgm(path, map.height(), map.width(), &bytes)
}

pub fn save_ppm(path: &Path, img: &RgbImage) -> Result<(), NetpbmError> {
    let raster: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    write(path, "P6", img.width, img.height, &raster)
}

pub fn load_ppm(path: &Path) -> Result<RgbImage, NetpbmError> {
    let r = parse(path, b"P6", 3)?;
    let pixels = r.bytes.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(RgbImage { height: r.height, width: r.width, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{colorize, dense};

    #[test]
    fn grey_round_trip_quantizes_to_255_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let img = GreyImage::new(2, 3, vec![0.0, 1.0, 0.5, 0.25, 0.75, 0.1]).unwrap();
        save_grey(&p, &img).unwrap();
        let back = load_grey(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    }

    #[test]
    fn labels_are_stored_one_based() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        let m = LabelMap::new(LabelSchema::Dense, 1, 3, vec![dense::A_LINE, dense::B_LINE, dense::BACKGROUND]).unwrap();
        save_labels(&p, &m).unwrap();
        let (_, _, raw) = read_pgm(&p).unwrap();
        assert_eq!(raw, vec![1, 2, 7]);
        assert_eq!(load_labels(&p, LabelSchema::Dense).unwrap(), m);
        assert!(load_labels(&p, LabelSchema::Sparse).is_err());
    }

    #[test]
    fn reads_header_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5\n# made by hand\n2 1\n# max\n255\n\x00\xff").unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (1, 2, vec![0, 255]));
    }

    #[test]
    fn rejects_truncated_raster_and_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        fs::write(&p, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(read_pgm(&p), Err(NetpbmError::Format { .. })));
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pgm(&p), Err(NetpbmError::Format { .. })));
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let m = LabelMap::new(LabelSchema::Dense, 2, 2, vec![0, 3, 5, 6]).unwrap();
        let rgb = colorize(&m);
        save_ppm(&p, &rgb).unwrap();
        assert_eq!(load_ppm(&p).unwrap(), rgb);
    }
}
