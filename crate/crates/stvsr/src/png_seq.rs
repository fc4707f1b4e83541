//! Directory of 8-bit PNG frames named `frame_00000.png`, `frame_00001.png`, …

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use stvsr_core::{Frame, VideoTensor};

use crate::rvid::quantize_u8;

#[derive(Debug, thiserror::Error)]
pub enum PngError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Decode { path: String, source: png::DecodingError },
    #[error("{path}: {source}")]
    Encode { path: String, source: png::EncodingError },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> PngError {
    PngError::Format { path: path.display().to_string(), msg: msg.into() }
}

/// Reads one PNG as an RGB or grayscale frame. Alpha is dropped, 16-bit
/// samples are reduced to 8 bits.
pub fn read_png(path: &Path) -> Result<Frame, PngError> {
    let file = File::open(path).map_err(|e| PngError::Io { path: path.display().to_string(), source: e })?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| PngError::Decode { path: path.display().to_string(), source: e })?;
    let size = reader.output_buffer_size().ok_or_else(|| fmt_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| PngError::Decode { path: path.display().to_string(), source: e })?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (src_c, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(fmt_err(path, "indexed colour was not expanded")),
    };
    let mut data = Vec::with_capacity(h * w * keep);
    for y in 0..h {
        let row = &buf[y * info.line_size..][..w * src_c];
        for px in row.chunks_exact(src_c) {
            data.extend(px[..keep].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Frame::new(h, w, keep, data).map_err(|e| fmt_err(path, e.to_string()))
}

pub fn write_png(path: &Path, frame: &Frame) -> Result<(), PngError> {
    let colour = match frame.c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(fmt_err(path, format!("cannot write {c}-channel frames"))),
    };
    let file = File::create(path).map_err(|e| PngError::Io { path: path.display().to_string(), source: e })?;
    let mut enc = png::Encoder::new(BufWriter::new(file), frame.w as u32, frame.h as u32);
    enc.set_color(colour);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = frame.data.iter().map(|&v| quantize_u8(v)).collect();
    let enc_err = |e| PngError::Encode { path: path.display().to_string(), source: e };
    let mut w = enc.write_header().map_err(enc_err)?;
    w.write_image_data(&bytes).map_err(enc_err)?;
    w.finish().map_err(enc_err)
}

/// Frame files of `dir` in index order. Indices must run 0, 1, 2, … with
/// no gaps.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, PngError> {
    let io = |e| PngError::Io { path: dir.display().to_string(), source: e };
    let mut idx = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let name = entry.map_err(io)?.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(n) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".png")) {
            let i: usize = n.parse().map_err(|_| fmt_err(dir, format!("bad frame name {name}")))?;
            idx.push(i);
        }
    }
    idx.sort_unstable();
    if idx.is_empty() {
        return Err(fmt_err(dir, "no frame_*.png files"));
    }
    if let Some((pos, _)) = idx.iter().enumerate().find(|(p, i)| *p != **i) {
        return Err(fmt_err(dir, format!("frame {pos} missing")));
    }
    Ok(idx.into_iter().map(|i| dir.join(frame_name(i))).collect())
}

pub fn import_dir(dir: &Path) -> Result<VideoTensor, PngError> {
    let frames = list_frames(dir)?.iter().map(|p| read_png(p)).collect::<Result<Vec<_>, _>>()?;
    VideoTensor::from_frames(&frames).map_err(|e| fmt_err(dir, e.to_string()))
}

pub fn export_dir(video: &VideoTensor, dir: &Path) -> Result<(), PngError> {
    fs::create_dir_all(dir).map_err(|e| PngError::Io { path: dir.display().to_string(), source: e })?;
    for (i, f) in video.frames().iter().enumerate() {
        write_png(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}
