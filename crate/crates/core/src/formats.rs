//! Binary PGM (P5) and ASCII PLY readers and writers.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub comment: Option<String>,
    /// Row-major, one byte per pixel (`maxval <= 255`).
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(pgm: &Pgm) -> Result<Vec<u8>> {
    ensure!(
        pgm.maxval >= 1 && pgm.maxval <= 255,
        InvalidParam,
        "only 8-bit PGM is supported"
    );
    ensure!(
        pgm.pixels.len() == pgm.width * pgm.height,
        Shape,
        "pgm pixel count mismatch"
    );
    let mut out = b"P5\n".to_vec();
    if let Some(c) = &pgm.comment {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).as_bytes());
    out.extend_from_slice(&pgm.pixels);
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    ensure!(bytes.starts_with(b"P5"), Parse, "not a binary PGM (missing P5)");
    let mut pos = 2;
    let mut comments = Vec::new();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comment lines between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    let end = bytes[pos..]
                        .iter()
                        .position(|&b| b == b'\n')
                        .map_or(bytes.len(), |e| pos + e);
                    let text = String::from_utf8_lossy(&bytes[pos + 1..end]);
                    comments.push(text.trim().to_string());
                    pos = end;
                }
                Some(_) => break,
                None => return Err(Error::Parse("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        ensure!(pos > start, Parse, "expected a number in PGM header");
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Parse("PGM header number out of range".into()))?;
    }
    // exactly one whitespace byte precedes the raster
    ensure!(
        bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()),
        Parse,
        "missing separator before PGM raster"
    );
    pos += 1;
    let [width, height, maxval] = fields;
    ensure!((1..=255).contains(&maxval), Parse, "unsupported maxval {maxval}");
    let n = width * height;
    if bytes.len() - pos != n {
        return Err(Error::PayloadMismatch {
            expected: n,
            found: bytes.len() - pos,
        });
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        comment: (!comments.is_empty()).then(|| comments.join("\n")),
        pixels: bytes[pos..].to_vec(),
    })
}

pub fn write_pgm(pgm: &Pgm, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(pgm)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// ASCII PLY with `float x, y, z` vertex properties.
pub fn encode_ply(points: &[[f64; 3]]) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    );
    for p in points {
        out.push_str(&format!("{} {} {}\n", p[0] as f32, p[1] as f32, p[2] as f32));
    }
    out
}

pub fn decode_ply(text: &str) -> Result<Vec<[f32; 3]>> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some("ply"), Parse, "missing ply magic");
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, _] => ensure!(*fmt == "ascii", Parse, "only ascii PLY is supported"),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::Parse("bad vertex count".into()))?)
            }
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::Parse("no vertex element".into()))?;
    ensure!(
        props.len() >= 3 && props[..3] == ["x", "y", "z"],
        Parse,
        "expected x, y, z properties first"
    );
    let mut out = Vec::with_capacity(count);
    for line in lines.take(count) {
        let mut v = [0f32; 3];
        let mut toks = line.split_whitespace();
        for slot in v.iter_mut() {
            *slot = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad vertex line `{line}`")))?;
        }
        out.push(v);
    }
    ensure!(out.len() == count, Parse, "expected {count} vertices, found {}", out.len());
    Ok(out)
}

pub fn write_ply(points: &[[f64; 3]], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ply(points)).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<Vec<[f32; 3]>> {
    let path = path.as_ref();
    decode_ply(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_comment() {
        let pgm = Pgm {
            width: 3,
            height: 2,
            maxval: 255,
            comment: Some("layout note".into()),
            pixels: vec![0, 255, 0, 255, 255, 0],
        };
        let bytes = encode_pgm(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n# layout note\n3 2\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), pgm);
    }

    #[test]
    fn pgm_rejects_short_raster() {
        let mut bytes = encode_pgm(&Pgm {
            width: 2,
            height: 2,
            maxval: 255,
            comment: None,
            pixels: vec![1, 2, 3, 4],
        })
        .unwrap();
        bytes.pop();
        assert!(decode_pgm(&bytes).is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn ply_four_vertices() {
        let pts = [[0.0, 0.0, 1.0], [1.0, 0.0, 2.0], [0.0, 1.0, 3.0], [1.0, 1.0, 4.5]];
        let text = encode_ply(&pts);
        assert!(text.contains("element vertex 4\n"));
        let back = decode_ply(&text).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[3], [1.0, 1.0, 4.5]);
    }

    #[test]
    fn ply_truncated_body() {
        let text = encode_ply(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let cut: String = text.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(decode_ply(&cut).is_err());
    }
}
