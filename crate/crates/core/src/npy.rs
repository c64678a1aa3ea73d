//! Minimal NPY v1.0 reader/writer for little-endian float payloads.
//!
//! Handles exactly what the dataset layout needs: C-ordered 1-D or 2-D
//! arrays of `<f4` or `<f8`, written back as `<f4`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::data::DataError;

const MAGIC: &[u8] = b"\x93NUMPY";

/// Read a 2-D array; a 1-D file becomes a single-row matrix.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_matrix(&bytes).map_err(|msg| DataError::Npy {
        path: path.display().to_string(),
        msg,
    })
}

fn parse_matrix(bytes: &[u8]) -> Result<Array2<f64>, String> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err("not an NPY file (bad magic)".into());
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if major != 1 || minor != 0 {
        return Err(format!("unsupported NPY version {major}.{minor}"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err("truncated header".into());
    }
    let header = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| "header is not utf-8".to_string())?;

    let descr = dict_value(header, "descr")?;
    let elem_size = match descr.as_str() {
        "<f4" => 4,
        "<f8" => 8,
        other => return Err(format!("unsupported dtype {other:?}, expected <f4 or <f8")),
    };
    let fortran = dict_value(header, "fortran_order")?;
    if fortran != "False" {
        return Err("fortran-ordered arrays are not supported".into());
    }
    let shape = parse_shape(&dict_value(header, "shape")?)?;
    let (rows, cols) = match shape.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => return Err(format!("expected 1-D or 2-D shape, got {other:?}")),
    };

    let payload = &bytes[data_start..];
    let expected = rows * cols * elem_size;
    if payload.len() < expected {
        return Err(format!(
            "payload too short: {} bytes, expected {expected}",
            payload.len()
        ));
    }
    let mut values = Vec::with_capacity(rows * cols);
    match elem_size {
        4 => {
            for chunk in payload[..expected].chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        _ => {
            for chunk in payload[..expected].chunks_exact(8) {
                values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())
}

/// Pull the value text for a key out of the python-dict header.
fn dict_value(header: &str, key: &str) -> Result<String, String> {
    let needle = format!("'{key}':");
    let start = header
        .find(&needle)
        .ok_or_else(|| format!("header missing key {key:?}"))?
        + needle.len();
    let rest = header[start..].trim_start();
    if let Some(stripped) = rest.strip_prefix('\'') {
        let end = stripped
            .find('\'')
            .ok_or_else(|| "unterminated string in header".to_string())?;
        return Ok(stripped[..end].to_string());
    }
    if rest.starts_with('(') {
        let end = rest
            .find(')')
            .ok_or_else(|| "unterminated tuple in header".to_string())?;
        return Ok(rest[..=end].to_string());
    }
    let end = rest
        .find([',', '}'])
        .ok_or_else(|| "malformed header".to_string())?;
    Ok(rest[..end].trim().to_string())
}

fn parse_shape(text: &str) -> Result<Vec<usize>, String> {
    let inner = text.trim().trim_start_matches('(').trim_end_matches(')');
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

/// Write a 2-D array as C-ordered `<f4`.
pub fn write_matrix(path: &Path, data: &Array2<f64>) -> Result<(), DataError> {
    let io_err = |e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}), }}",
        data.nrows(),
        data.ncols()
    );
    // pad with spaces so that 10 + len(header) is a multiple of 64, newline-terminated
    let unpadded = 10 + header.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat(' ').take(padding));
    header.push('\n');

    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&[1u8, 0u8]).map_err(io_err)?;
    file.write_all(&(header.len() as u16).to_le_bytes()).map_err(io_err)?;
    file.write_all(header.as_bytes()).map_err(io_err)?;
    let mut payload = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    file.write_all(&payload).map_err(io_err)
}
