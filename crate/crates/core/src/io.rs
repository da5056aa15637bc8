//! On-disk formats: the `TFD1` binary matrix, the plain-text signal format and
//! PGM rendering.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::Signal;
use crate::tfd::TfMatrix;

pub const TFD_MAGIC: &[u8; 4] = b"TFD1";
pub const TFD_VERSION: u32 = 1;
const TFD_HEADER: usize = 16;

/// Encodes `magic | u32 version | u32 rows | u32 cols | f64[rows·cols]`, all
/// little-endian, row-major with row = time.
pub fn encode_tfd(m: &TfMatrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::format("TFD1", "too many rows"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::format("TFD1", "too many columns"))?;
    let mut out = Vec::with_capacity(TFD_HEADER + 8 * m.data().len());
    out.extend_from_slice(TFD_MAGIC);
    out.extend_from_slice(&TFD_VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_tfd(bytes: &[u8]) -> Result<TfMatrix> {
    if bytes.len() < TFD_HEADER {
        return Err(Error::format("TFD1", "truncated header"));
    }
    if &bytes[..4] != TFD_MAGIC {
        return Err(Error::format(
            "TFD1",
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        ));
    }
    let version = u32_at(bytes, 4);
    if version != TFD_VERSION {
        return Err(Error::format("TFD1", format!("unsupported version {version}")));
    }
    let rows = u32_at(bytes, 8) as usize;
    let cols = u32_at(bytes, 12) as usize;
    let payload = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::format("TFD1", format!("dimensions {rows}x{cols} overflow")))?;
    let body = &bytes[TFD_HEADER..];
    if body.len() < payload {
        return Err(Error::format(
            "TFD1",
            format!("truncated payload: {} of {payload} bytes", body.len()),
        ));
    }
    if body.len() > payload {
        return Err(Error::format("TFD1", "trailing bytes after payload"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TfMatrix::from_vec(rows, cols, data)
}

pub fn write_tfd(path: &Path, m: &TfMatrix) -> Result<()> {
    fs::write(path, encode_tfd(m)?).map_err(|e| Error::io(path, e))
}

pub fn read_tfd(path: &Path) -> Result<TfMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tfd(&bytes)
}

/// One sample per line, `re,im`, no header. Uses the shortest decimal form
/// that round-trips exactly.
pub fn format_signal(z: &Signal) -> String {
    let mut out = String::with_capacity(z.len() * 40);
    for s in &z.samples {
        out.push_str(&format!("{},{}\n", s.re, s.im));
    }
    out
}

pub fn parse_signal(text: &str) -> Result<Signal> {
    let mut samples = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (re, im) = match (fields.next(), fields.next(), fields.next()) {
            (Some(re), Some(im), None) => (re.trim(), im.trim()),
            _ => {
                return Err(Error::format(
                    "signal",
                    format!("line {}: expected two comma-separated fields", line_no + 1),
                ))
            }
        };
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| {
                Error::format("signal", format!("line {}: {s:?}: {e}", line_no + 1))
            })
        };
        samples.push(Complex64::new(parse(re)?, parse(im)?));
    }
    Ok(Signal::new(samples))
}

pub fn write_signal(path: &Path, z: &Signal) -> Result<()> {
    fs::write(path, format_signal(z)).map_err(|e| Error::io(path, e))
}

pub fn read_signal(path: &Path) -> Result<Signal> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_signal(&text)
}

/// Binary PGM (P5) with time on the horizontal axis and frequency increasing
/// upward. Pixels are `round(255·clip(v, 0, max)/max)`.
pub fn encode_pgm(m: &TfMatrix) -> Vec<u8> {
    let (times, freqs) = m.shape();
    let max = m.max();
    let mut out = format!("P5\n{times} {freqs}\n255\n").into_bytes();
    for k in (0..freqs).rev() {
        for t in 0..times {
            let v = m.get(t, k);
            let px = if max > 0.0 {
                (255.0 * v.clamp(0.0, max) / max).round() as u8
            } else {
                0
            };
            out.push(px);
        }
    }
    out
}

pub fn render_tfd(m: &TfMatrix, path: &Path) -> Result<()> {
    if !m.is_finite() {
        return Err(Error::invalid("matrix", "cannot render non-finite entries"));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(m)).map_err(|e| Error::io(path, e))
}
