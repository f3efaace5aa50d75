//! Small text and binary helpers shared by the persistence code.

use std::path::Path;

use crate::error::{Error, Result};

/// Comma-joined shortest round-trip representation of each value.
pub fn join_floats(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        if v.is_nan() {
            continue;
        }
        s.push_str(&format!("{v:?}"));
    }
    s
}

/// A numeric CSV table with a one-line header. Empty cells read as NaN.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub values: Vec<f64>,
}

impl Table {
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.header.len().max(1))
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn parse_table(text: &str, origin: &str) -> Result<Table> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(format!("{origin}: empty file")))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::format(format!(
                "{origin}: row {} has {} cells, header has {}",
                lineno + 2,
                cells.len(),
                header.len()
            )));
        }
        for c in cells {
            let c = c.trim();
            if c.is_empty() {
                values.push(f64::NAN);
            } else {
                values.push(c.parse::<f64>().map_err(|e| {
                    Error::format(format!("{origin}: row {}: `{c}`: {e}", lineno + 2))
                })?);
            }
        }
    }
    Ok(Table { header, values })
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, &path.display().to_string())
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte buffer.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("unexpected end of binary data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        let v = [0.1, -1.0 / 3.0, 1e-300, 12345.678];
        let t = parse_table(&format!("a,b,c,d\n{}\n", join_floats(&v)), "mem").unwrap();
        assert_eq!(t.values, v);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(parse_table("a,b\n1\n", "mem").is_err());
        assert!(parse_table("a\nfoo\n", "mem").is_err());
    }
}
