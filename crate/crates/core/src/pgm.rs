//! Binary portable graymap (`P5`) images and the CSV index that lists a
//! saved shape dataset.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples, each `<= maxval`.
    pub pixels: Vec<u16>,
}

impl PgmImage {
    /// Quantizes intensities in `[0, 1]` to 8 bits; values outside are clamped.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            maxval: 255,
            pixels: values
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
                .collect(),
        })
    }

    pub fn to_unit(&self) -> Vec<f64> {
        let m = f64::from(self.maxval);
        self.pixels.iter().map(|&p| f64::from(p) / m).collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n{}\n", self.width, self.height, self.maxval)?;
        if self.maxval < 256 {
            let bytes: Vec<u8> = self.pixels.iter().map(|&p| p as u8).collect();
            w.write_all(&bytes)?;
        } else {
            for &p in &self.pixels {
                w.write_all(&p.to_be_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = header_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::Parse("not a binary PGM (expected P5)".into()));
        }
        let width = header_number(bytes, &mut pos)?;
        let height = header_number(bytes, &mut pos)?;
        let maxval = header_number(bytes, &mut pos)?;
        if width == 0 || height == 0 {
            return Err(Error::Parse("PGM has zero width or height".into()));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Parse(format!("PGM maxval {maxval} out of range")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::Parse("PGM header not terminated by whitespace".into()));
        }
        pos += 1;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Error::Parse("PGM dimensions overflow".into()))?;
        let sample = if maxval < 256 { 1 } else { 2 };
        let raster = &bytes[pos..];
        if n.checked_mul(sample) != Some(raster.len()) {
            return Err(Error::Parse(format!(
                "PGM raster has {} bytes, expected {}",
                raster.len(),
                n.saturating_mul(sample)
            )));
        }
        let pixels: Vec<u16> = if sample == 1 {
            raster.iter().map(|&b| u16::from(b)).collect()
        } else {
            raster
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        let maxval = maxval as u16;
        if pixels.iter().any(|&p| p > maxval) {
            return Err(Error::Parse("PGM sample exceeds maxval".into()));
        }
        Ok(Self {
            width,
            height,
            maxval,
            pixels,
        })
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while bytes.get(*pos).is_some_and(u8::is_ascii_whitespace) {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    if tok.len() > 9 || !tok.iter().all(u8::is_ascii_digit) {
        return Err(Error::Parse(format!(
            "bad PGM header field {:?}",
            String::from_utf8_lossy(tok)
        )));
    }
    Ok(std::str::from_utf8(tok)
        .expect("ascii digits")
        .parse()
        .expect("at most 9 digits"))
}

/// One row of a dataset index: image file name, shape kind, and the
/// fraction of lit pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub file: String,
    pub kind: String,
    pub area: f64,
}

pub const INDEX_HEADER: &str = "file,kind,area";

pub fn write_index(entries: &[IndexEntry]) -> String {
    let mut s = String::from(INDEX_HEADER);
    s.push('\n');
    for e in entries {
        s.push_str(&format!("{},{},{:.16e}\n", e.file, e.kind, e.area));
    }
    s
}

pub fn parse_index(text: &str) -> Result<Vec<IndexEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::Parse(format!("index must start with {INDEX_HEADER:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [file, kind, area] = fields[..] else {
            return Err(Error::Parse(format!("index line {}: expected 3 fields", i + 2)));
        };
        if file.is_empty() || file.contains(['/', '\\']) || file.starts_with('.') {
            return Err(Error::Parse(format!("index line {}: bad file name {file:?}", i + 2)));
        }
        let area: f64 = area
            .parse()
            .map_err(|_| Error::Parse(format!("index line {}: bad area {area:?}", i + 2)))?;
        if !(0.0..=1.0).contains(&area) {
            return Err(Error::Parse(format!(
                "index line {}: area {area} outside [0, 1]",
                i + 2
            )));
        }
        out.push(IndexEntry {
            file: file.to_string(),
            kind: kind.to_string(),
            area,
        });
    }
    Ok(out)
}
