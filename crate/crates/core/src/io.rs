//! On-disk formats: 8-bit PGM images, WPM1 world-point maps, atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array2;
use thiserror::Error;

pub const WPM_MAGIC: &[u8; 4] = b"WPM1";
const WPM_HEADER: usize = 32;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io { path: path.display().to_string(), source }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format { path: path.display().to_string(), msg: msg.into() }
}

/// Write through a sibling temp file and rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

/// Quantize `[0, 1]` intensities to 8 bits (round half up, clamped).
pub fn quantize_u8(img: &Array2<f64>) -> Array2<u8> {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
}

pub fn encode_pgm(img: &Array2<u8>) -> Vec<u8> {
    let (h, w) = img.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.iter());
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Array2<u8>, IoError> {
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
            if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                at += 1;
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(fmt_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    at += 1;
    if fields[0] != "P5" {
        return Err(fmt_err(path, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| fmt_err(path, format!("bad {what} {s:?}")));
    let (w, h, max) = (parse(&fields[1], "width")?, parse(&fields[2], "height")?, parse(&fields[3], "maxval")?);
    if max != 255 {
        return Err(fmt_err(path, format!("only 8-bit PGM is supported, maxval {max}")));
    }
    let data = bytes.get(at..at + w * h).ok_or_else(|| fmt_err(path, "truncated PGM data"))?;
    Ok(Array2::from_shape_vec((h, w), data.to_vec()).expect("size checked"))
}

pub fn write_pgm(path: &Path, img: &Array2<u8>) -> Result<(), IoError> {
    atomic_write(path, &encode_pgm(img))
}

pub fn read_pgm(path: &Path) -> Result<Array2<u8>, IoError> {
    decode_pgm(&read_bytes(path)?, path)
}

/// Per-pixel world points with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldPointMap {
    pub points: Array2<Vector3<f64>>,
    pub valid: Array2<bool>,
}

impl WorldPointMap {
    pub fn dim(&self) -> (usize, usize) {
        self.points.dim()
    }
}

/// Header: magic, rows (u32), cols (u32), validity-plane flag (u32), 16 reserved
/// bytes. Body: row-major XYZ f64 triples, then one f64 (0 or 1) per pixel when
/// the flag is set.
pub fn encode_wpm(map: &WorldPointMap) -> Vec<u8> {
    let (h, w) = map.dim();
    let mut out = Vec::with_capacity(WPM_HEADER + h * w * 32);
    out.extend_from_slice(WPM_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&[0u8; 16]);
    for p in map.points.iter() {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &ok in map.valid.iter() {
        out.extend_from_slice(&(if ok { 1f64 } else { 0f64 }).to_le_bytes());
    }
    out
}

pub fn decode_wpm(bytes: &[u8], path: &Path) -> Result<WorldPointMap, IoError> {
    if bytes.len() < WPM_HEADER || &bytes[..4] != WPM_MAGIC {
        return Err(fmt_err(path, "missing WPM1 magic"));
    }
    let u32_at = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, flag) = (u32_at(4), u32_at(8), u32_at(12));
    let n = h * w;
    let expect = WPM_HEADER + n * 24 + if flag != 0 { n * 8 } else { 0 };
    if bytes.len() != expect {
        return Err(fmt_err(path, format!("expected {expect} bytes for {h}x{w}, found {}", bytes.len())));
    }
    let f64_at = |k: usize| f64::from_le_bytes(bytes[k..k + 8].try_into().expect("8 bytes"));
    let body = WPM_HEADER;
    let pts: Vec<Vector3<f64>> =
        (0..n).map(|i| Vector3::new(f64_at(body + 24 * i), f64_at(body + 24 * i + 8), f64_at(body + 24 * i + 16))).collect();
    let valid: Vec<bool> = if flag != 0 {
        (0..n).map(|i| f64_at(body + 24 * n + 8 * i) != 0.0).collect()
    } else {
        pts.iter().map(|p| p.iter().all(|v| v.is_finite())).collect()
    };
    Ok(WorldPointMap {
        points: Array2::from_shape_vec((h, w), pts).expect("size checked"),
        valid: Array2::from_shape_vec((h, w), valid).expect("size checked"),
    })
}

pub fn write_wpm(path: &Path, map: &WorldPointMap) -> Result<(), IoError> {
    atomic_write(path, &encode_wpm(map))
}

pub fn read_wpm(path: &Path) -> Result<WorldPointMap, IoError> {
    decode_wpm(&read_bytes(path)?, path)
}
