//! On-disk formats: 8-bit PNG frames, binary PGM masks, Middlebury `.flo` flow.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use thiserror::Error;

use crate::raster::{FlowField, Frame, Mask, RasterError};

const FLO_MAGIC: &[u8; 4] = b"PIEH";
/// Middlebury convention: components above this magnitude mark unknown flow.
const FLO_UNKNOWN: f32 = 1e10;
const FLO_UNKNOWN_THRESHOLD: f32 = 1e9;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}: bad flow file: {reason}")]
    BadFlow { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Raster { path: PathBuf, source: RasterError },
    #[error("{0}: no PNG frames found")]
    EmptySequence(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> IoError + '_ {
    move |source| IoError::Image {
        path: path.to_path_buf(),
        source,
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_frame(path: &Path) -> Result<Frame, IoError> {
    let img = ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(img_err(path))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| {
            [
                p[0] as f32 / 255.0,
                p[1] as f32 / 255.0,
                p[2] as f32 / 255.0,
            ]
        })
        .collect();
    Frame::from_pixels(w as usize, h as usize, data).map_err(|source| IoError::Raster {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<(), IoError> {
    let bytes: Vec<u8> = frame
        .pixels()
        .iter()
        .flat_map(|c| [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
        .collect();
    image::save_buffer(
        path,
        &bytes,
        frame.width() as u32,
        frame.height() as u32,
        ExtendedColorType::Rgb8,
    )
    .map_err(img_err(path))
}

/// Writes a mask as binary PGM with values 0 / 255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<(), IoError> {
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&m| if m { 255 } else { 0 })
        .collect();
    let file = File::create(path).map_err(io_err(path))?;
    let encoder = PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(
            &bytes,
            mask.width() as u32,
            mask.height() as u32,
            ExtendedColorType::L8,
        )
        .map_err(img_err(path))
}

/// Reads a PGM mask; any value >= 128 counts as valid.
pub fn read_mask(path: &Path) -> Result<Mask, IoError> {
    let img = ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(img_err(path))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p[0] >= 128).collect();
    Mask::from_vec(w as usize, h as usize, data).map_err(|source| IoError::Raster {
        path: path.to_path_buf(),
        source,
    })
}

/// Middlebury `.flo`: "PIEH", width and height as little-endian i32, then
/// row-major interleaved little-endian f32 `(u, v)` pairs. Invalid pixels are
/// written with the format's unknown-flow sentinel.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(12 + flow.data().len() * 8);
    buf.extend_from_slice(FLO_MAGIC);
    buf.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (d, &valid) in flow.data().iter().zip(flow.valid().data()) {
        let (u, v) = if valid {
            (d[0] as f32, d[1] as f32)
        } else {
            (FLO_UNKNOWN, FLO_UNKNOWN)
        };
        buf.extend_from_slice(&u.to_le_bytes());
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_flo(path: &Path) -> Result<FlowField, IoError> {
    let bad = |reason: &str| IoError::BadFlow {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < 12 || &bytes[0..4] != FLO_MAGIC {
        return Err(bad("missing PIEH header"));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(bad("non-positive dimensions"));
    }
    let (width, height) = (width as usize, height as usize);
    let expected = 12 + width * height * 8;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for chunk in bytes[12..].chunks_exact(8) {
        let u = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let v = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        let ok = u.is_finite()
            && v.is_finite()
            && u.abs() < FLO_UNKNOWN_THRESHOLD
            && v.abs() < FLO_UNKNOWN_THRESHOLD;
        valid.push(ok);
        data.push(if ok { [u as f64, v as f64] } else { [0.0, 0.0] });
    }
    let mask = Mask::from_vec(width, height, valid).map_err(|source| IoError::Raster {
        path: path.to_path_buf(),
        source,
    })?;
    FlowField::from_parts(width, height, data, mask).map_err(|source| IoError::Raster {
        path: path.to_path_buf(),
        source,
    })
}

/// Name of a precomputed flow file for a (reference, neighbor) frame pair.
pub fn flow_file_name(reference: usize, neighbor: usize) -> String {
    format!("flow_{reference:06}_{neighbor:06}.flo")
}

/// PNG files of a directory, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Reads a numbered image sequence, optionally restricted to names with `prefix`.
pub fn read_sequence(dir: &Path, prefix: Option<&str>) -> Result<Vec<Frame>, IoError> {
    let paths: Vec<PathBuf> = list_frames(dir)?
        .into_iter()
        .filter(|p| match prefix {
            Some(pre) => p
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(pre)),
            None => true,
        })
        .collect();
    if paths.is_empty() {
        return Err(IoError::EmptySequence(dir.to_path_buf()));
    }
    paths.iter().map(|p| read_frame(p)).collect()
}

pub fn ensure_dir(dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.flo");
        let flow = FlowField::from_fn(2, 1, |x, _| [x as f64 + 0.5, -1.25]).unwrap();
        write_flo(&path, &flow).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PIEH");
        assert_eq!(&bytes[4..8], &2i32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1i32.to_le_bytes());
        assert_eq!(&bytes[12..16], &0.5f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &(-1.25f32).to_le_bytes());
        assert_eq!(&bytes[20..24], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 2 * 8);
        assert_eq!(read_flo(&path).unwrap(), flow);
    }

    #[test]
    fn flo_preserves_invalid_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.flo");
        let mask = Mask::from_fn(3, 2, |x, y| (x + y) % 2 == 0).unwrap();
        let flow = FlowField::from_parts(3, 2, vec![[1.0, 2.0]; 6], mask).unwrap();
        write_flo(&path, &flow).unwrap();
        assert_eq!(read_flo(&path).unwrap(), flow);
    }

    #[test]
    fn flo_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.flo");
        fs::write(&path, b"NOPE0000000000").unwrap();
        assert!(matches!(read_flo(&path), Err(IoError::BadFlow { .. })));
    }

    #[test]
    fn png_and_pgm_roundtrip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Frame::from_fn(5, 3, |x, y| {
            [x as f32 * 51.0 / 255.0, y as f32 / 255.0, 1.0]
        })
        .unwrap();
        let fp = dir.path().join("f.png");
        write_frame(&fp, &frame).unwrap();
        assert_eq!(read_frame(&fp).unwrap(), frame);

        let mask = Mask::from_fn(5, 3, |x, y| x > y).unwrap();
        let mp = dir.path().join("m.pgm");
        write_mask(&mp, &mask).unwrap();
        let bytes = fs::read(&mp).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(read_mask(&mp).unwrap(), mask);
    }
}
