//! RVID container: a 24-byte little-endian header followed by a
//! frame-major, row-major, channel-last payload.
//!
//! ```text
//! 0..4   b"RVID"
//! 4      version (1)
//! 5      dtype   (0 = u8, 1 = f32)
//! 6..8   reserved, zero
//! 8..24  T, H, W, C as u32
//! 24..   T·H·W·C values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use stvsr_core::{FlowField, VideoTensor};

pub const MAGIC: &[u8; 4] = b"RVID";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "u8" => Some(Dtype::U8),
            "f32" => Some(Dtype::F32),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RvidError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("byte {offset}: bad magic {found:?}, expected \"RVID\"")]
    Magic { offset: usize, found: Vec<u8> },
    #[error("byte {offset}: unsupported version {found}")]
    Version { offset: usize, found: u8 },
    #[error("byte {offset}: unsupported dtype code {found}")]
    Dtype { offset: usize, found: u8 },
    #[error("byte {offset}: reserved bytes must be zero")]
    Reserved { offset: usize },
    #[error("byte {offset}: dimension {name} must be >= 1")]
    ZeroDim { offset: usize, name: &'static str },
    #[error("byte {offset}: truncated, expected {expected} bytes in total, file has {actual}")]
    Truncated { offset: usize, expected: usize, actual: usize },
    #[error("byte {offset}: {extra} unexpected trailing bytes")]
    Trailing { offset: usize, extra: usize },
    #[error("byte {offset}: value {value} is not a valid pixel intensity")]
    Value { offset: usize, value: f32 },
    #[error("{0}")]
    Shape(String),
}

/// Parsed header plus payload as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rvid {
    pub dtype: Dtype,
    pub dims: [usize; 4],
    pub values: Vec<f64>,
}

fn io_err(path: &Path, source: std::io::Error) -> RvidError {
    RvidError::Io { path: path.display().to_string(), source }
}

/// `round(v·255)`, ties away from zero.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(dims: [usize; 4], values: &[f64], dtype: Dtype) -> Result<Vec<u8>, RvidError> {
    let n: usize = dims.iter().product();
    if values.len() != n {
        return Err(RvidError::Shape(format!("{} values for dims {dims:?}", values.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + n * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&[0, 0]);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| RvidError::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::U8 => out.extend(values.iter().map(|&v| quantize_u8(v))),
        Dtype::F32 => {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Rvid, RvidError> {
    if bytes.len() < HEADER_LEN {
        return Err(RvidError::Truncated { offset: bytes.len(), expected: HEADER_LEN, actual: bytes.len() });
    }
    if &bytes[0..4] != MAGIC {
        return Err(RvidError::Magic { offset: 0, found: bytes[0..4].to_vec() });
    }
    if bytes[4] != VERSION {
        return Err(RvidError::Version { offset: 4, found: bytes[4] });
    }
    let dtype = match bytes[5] {
        0 => Dtype::U8,
        1 => Dtype::F32,
        found => return Err(RvidError::Dtype { offset: 5, found }),
    };
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(RvidError::Reserved { offset: if bytes[6] != 0 { 6 } else { 7 } });
    }
    let mut dims = [0usize; 4];
    for (i, name) in ["T", "H", "W", "C"].into_iter().enumerate() {
        let off = 8 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(RvidError::ZeroDim { offset: off, name });
        }
        dims[i] = d;
    }
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let expected = n.and_then(|n| n.checked_mul(dtype.size())).and_then(|p| p.checked_add(HEADER_LEN));
    let Some(expected) = expected else {
        return Err(RvidError::Shape(format!("dimensions {dims:?} overflow")));
    };
    if bytes.len() < expected {
        return Err(RvidError::Truncated { offset: bytes.len(), expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(RvidError::Trailing { offset: expected, extra: bytes.len() - expected });
    }
    let payload = &bytes[HEADER_LEN..];
    let values = match dtype {
        Dtype::U8 => payload.iter().map(|&b| b as f64 / 255.0).collect(),
        Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    Ok(Rvid { dtype, dims, values })
}

pub fn read(path: &Path) -> Result<Rvid, RvidError> {
    decode(&fs::read(path).map_err(|e| io_err(path, e))?)
}

pub fn write(path: &Path, dims: [usize; 4], values: &[f64], dtype: Dtype) -> Result<(), RvidError> {
    let bytes = encode(dims, values, dtype)?;
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

/// Loads a video; every value must be a finite intensity in `[0, 1]`.
pub fn load_rvid(path: &Path) -> Result<VideoTensor, RvidError> {
    let r = read(path)?;
    if let Some(i) = r.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(RvidError::Value { offset: HEADER_LEN + i * r.dtype.size(), value: r.values[i] as f32 });
    }
    let [t, h, w, c] = r.dims;
    VideoTensor::new(t, h, w, c, r.values).map_err(|e| RvidError::Shape(e.to_string()))
}

pub fn save_rvid(video: &VideoTensor, path: &Path, dtype: Dtype) -> Result<(), RvidError> {
    let (t, h, w, c) = video.dims();
    write(path, [t, h, w, c], video.data(), dtype)
}

/// Flow sidecar: `T−1` forward fields then `T−1` backward fields, `C = 2`,
/// `f32`.
pub fn save_flows(path: &Path, fwd: &[FlowField], bwd: &[FlowField]) -> Result<(), RvidError> {
    let first = fwd.first().or(bwd.first()).ok_or_else(|| RvidError::Shape("no flows to save".into()))?;
    let (h, w) = (first.h, first.w);
    let mut values = Vec::with_capacity((fwd.len() + bwd.len()) * h * w * 2);
    for f in fwd.iter().chain(bwd) {
        if (f.h, f.w) != (h, w) {
            return Err(RvidError::Shape("flow fields differ in size".into()));
        }
        values.extend_from_slice(&f.data);
    }
    write(path, [fwd.len() + bwd.len(), h, w, 2], &values, Dtype::F32)
}

pub fn load_flows(path: &Path) -> Result<(Vec<FlowField>, Vec<FlowField>), RvidError> {
    let r = read(path)?;
    let [n, h, w, c] = r.dims;
    if c != 2 || n % 2 != 0 {
        return Err(RvidError::Shape(format!("flow sidecar needs C = 2 and an even frame count, got {:?}", r.dims)));
    }
    let half = n / 2;
    let mut fwd = Vec::with_capacity(half);
    let mut bwd = Vec::with_capacity(half);
    for (i, d) in r.values.chunks_exact(h * w * 2).enumerate() {
        let f = FlowField::new(h, w, d.to_vec()).map_err(|e| RvidError::Shape(e.to_string()))?;
        if i < half {
            fwd.push(f.between(i, i + 1));
        } else {
            bwd.push(f.between(i - half + 1, i - half));
        }
    }
    Ok((fwd, bwd))
}
