//! Shared plumbing for the binary container files: a plain-text header of
//! lines terminated by an `end` line, followed by a little-endian payload.

use std::path::Path;

use crate::{Error, Result};

pub(crate) const HEADER_END: &str = "end";

pub(crate) fn write_header(buf: &mut Vec<u8>, magic: &str, lines: &[String]) {
    buf.extend_from_slice(magic.as_bytes());
    buf.push(b'\n');
    for line in lines {
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
    }
    buf.extend_from_slice(HEADER_END.as_bytes());
    buf.push(b'\n');
}

/// Splits a container into its header lines (magic excluded) and payload.
pub(crate) fn split_header<'a>(
    bytes: &'a [u8],
    magic: &str,
    kind: &'static str,
    path: &Path,
) -> Result<(Vec<String>, &'a [u8])> {
    let bad = |reason: String| Error::Format {
        kind,
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = Vec::new();
    let mut pos = 0;
    let mut first = true;
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("header is not terminated".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| bad("header is not UTF-8".into()))?
            .to_string();
        pos += nl + 1;
        if first {
            if line != magic {
                return Err(bad(format!("expected `{magic}`, found `{line}`")));
            }
            first = false;
            continue;
        }
        if line == HEADER_END {
            break;
        }
        lines.push(line);
    }
    Ok((lines, &bytes[pos..]))
}

/// Parses `key = value` header lines into pairs, rejecting anything else.
pub(crate) fn header_pairs(
    lines: &[String],
    kind: &'static str,
    path: &Path,
) -> Result<Vec<(String, String)>> {
    lines
        .iter()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format {
                    kind,
                    path: path.to_path_buf(),
                    reason: format!("header line `{l}` is not `key = value`"),
                })
        })
        .collect()
}

pub(crate) fn push_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Cursor over a little-endian payload.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], kind: &'static str, path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            kind,
            path,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                kind: self.kind,
                path: self.path.to_path_buf(),
                reason: format!("payload truncated at byte {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                kind: self.kind,
                path: self.path.to_path_buf(),
                reason: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
