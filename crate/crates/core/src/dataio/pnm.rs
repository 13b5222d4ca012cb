//! Binary PGM (`P5`, 8/16-bit) and grayscale PFM (`Pf`) depth files.
//!
//! PGM samples are big-endian when `maxval > 255`. PFM stores 32-bit floats bottom row first;
//! a negative scale line means little-endian.

use std::path::Path;

use crate::dataio::atomic_write;
use crate::depth::DepthMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthFormat {
    Pgm,
    Pfm,
}

impl DepthFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("pgm") => Ok(DepthFormat::Pgm),
            Some("pfm") => Ok(DepthFormat::Pfm),
            _ => Err(Error::Unsupported(format!(
                "{}: expected a .pgm or .pfm extension",
                path.display()
            ))),
        }
    }
}

pub fn read_depth(path: &Path) -> Result<DepthMap<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth(&bytes, path)
}

/// Writes `map` in the format implied by the extension of `path`.
pub fn write_depth(path: &Path, map: &DepthMap<f64>) -> Result<()> {
    let bytes = match DepthFormat::from_path(path)? {
        DepthFormat::Pgm => encode_pgm(map)?,
        DepthFormat::Pfm => encode_pfm(map),
    };
    atomic_write(path, &bytes)
}

/// Decodes PGM or PFM bytes, chosen by magic number; `origin` labels errors.
pub fn decode_depth(bytes: &[u8], origin: &Path) -> Result<DepthMap<f64>> {
    match bytes.get(..2) {
        Some(b"P5") => decode_pgm(bytes, origin),
        Some(b"Pf") => decode_pfm(bytes, origin),
        Some(m) if m[0] == b'P' => Err(Error::Unsupported(format!(
            "{}: netpbm/PFM variant {:?} (only binary P5 PGM and grayscale Pf PFM are supported)",
            origin.display(),
            String::from_utf8_lossy(m)
        ))),
        _ => Err(Error::Unsupported(format!("{}: unknown magic", origin.display()))),
    }
}

/// Whitespace-separated header tokens with `#` comments; returns tokens and the offset just
/// past the single whitespace byte after the last one.
fn header_tokens(bytes: &[u8], count: usize, comments: bool) -> Option<(Vec<&str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || (comments && bytes[i] == b'#')) {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(std::str::from_utf8(&bytes[start..i]).ok()?);
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return None;
    }
    Some((tokens, i + 1))
}

fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<DepthMap<f64>> {
    let bad = |reason: &str| Error::Format {
        format: "PGM",
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let (tok, data_start) = header_tokens(bytes, 4, true).ok_or_else(|| bad("incomplete header"))?;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (parse(tok[1])?, parse(tok[2])?, parse(tok[3])?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid dimensions or maxval"));
    }
    let sample = if maxval < 256 { 1 } else { 2 };
    let n = width * height;
    let data = bytes
        .get(data_start..data_start + n * sample)
        .ok_or_else(|| bad("truncated pixel data"))?;
    let values: Vec<f64> = if sample == 1 {
        data.iter().map(|&b| b as f64).collect()
    } else {
        data.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    };
    DepthMap::new(height, width, values)?.with_value_range(0.0, maxval as f64)
}

fn decode_pfm(bytes: &[u8], origin: &Path) -> Result<DepthMap<f64>> {
    let bad = |reason: &str| Error::Format {
        format: "PFM",
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let (tok, data_start) = header_tokens(bytes, 4, false).ok_or_else(|| bad("incomplete header"))?;
    let width: usize = tok[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tok[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tok[3].parse().map_err(|_| bad("bad scale"))?;
    if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(bad("invalid dimensions or scale"));
    }
    let little = scale < 0.0;
    let n = width * height;
    let data = bytes
        .get(data_start..data_start + 4 * n)
        .ok_or_else(|| bad("truncated pixel data"))?;
    let mut values = vec![0.0; n];
    for (k, c) in data.chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (height - 1 - k / width, k % width);
        values[row * width + col] = v as f64;
    }
    DepthMap::new(height, width, values)
}

/// 8-bit when the map's value range fits in `0..=255`, 16-bit otherwise; values are rounded and
/// clamped to the sample range.
pub fn encode_pgm(map: &DepthMap<f64>) -> Result<Vec<u8>> {
    let (lo, hi) = map.value_range();
    if lo < 0.0 || hi > 65535.0 {
        return Err(Error::InvalidArgument(format!(
            "value range [{lo}, {hi}] does not fit a 16-bit PGM"
        )));
    }
    let maxval: u32 = if hi <= 255.0 { 255 } else { 65535 };
    let mut out = format!("P5\n{} {}\n{}\n", map.width(), map.height(), maxval).into_bytes();
    for &v in map.values() {
        let q = v.round().clamp(0.0, maxval as f64) as u32;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn encode_pfm(map: &DepthMap<f64>) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width(), map.height()).into_bytes();
    for row in (0..map.height()).rev() {
        for col in 0..map.width() {
            out.extend_from_slice(&(map.get(row, col) as f32).to_le_bytes());
        }
    }
    out
}
