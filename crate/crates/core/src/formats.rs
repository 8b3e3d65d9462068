//! Binary container formats for motion and frame-feature matrices.
//!
//! Both are little-endian: a 4-byte magic, a `u32` version, the shape header,
//! then row-major `f32` values.
//!
//! ```text
//! motion  : "RGMO" | version u32 | frames u32 | dim u32 | fps f32 | frames*dim f32
//! features: "RGVF" | version u32 | frames u32 | dim u32 |            frames*dim f32
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::pose_codec::{MotionSequence, MOTION_FPS};
use crate::video_features::FrameFeatures;

pub const MOTION_MAGIC: [u8; 4] = *b"RGMO";
pub const FEATURE_MAGIC: [u8; 4] = *b"RGVF";
pub const FORMAT_VERSION: u32 = 1;

struct Header {
    frames: usize,
    dim: usize,
    fps: Option<f32>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn encode(magic: [u8; 4], frames: usize, dim: usize, fps: Option<f32>, values: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + values.len() * 4);
    buf.extend_from_slice(&magic);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(frames as u32).unwrap();
    buf.write_u32::<LittleEndian>(dim as u32).unwrap();
    if let Some(fps) = fps {
        buf.write_f32::<LittleEndian>(fps).unwrap();
    }
    for &v in values {
        buf.write_f32::<LittleEndian>(v).unwrap();
    }
    buf
}

fn decode(path: &Path, bytes: &[u8], magic: [u8; 4], with_fps: bool) -> Result<(Header, Vec<f32>)> {
    let mut cur = Cursor::new(bytes);
    let mut got = [0u8; 4];
    cur.read_exact(&mut got)
        .map_err(|_| corrupt(path, "file shorter than its magic number"))?;
    if got != magic {
        return Err(corrupt(path, format!("bad magic {got:?}")));
    }
    let short = |_| corrupt(path, "truncated header");
    let version = cur.read_u32::<LittleEndian>().map_err(short)?;
    if version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let frames = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
    let dim = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
    let fps = if with_fps {
        Some(cur.read_f32::<LittleEndian>().map_err(short)?)
    } else {
        None
    };
    if dim == 0 {
        return Err(corrupt(path, "zero row width"));
    }
    let body = &bytes[cur.position() as usize..];
    let row_bytes = dim * 4;
    if body.len() % row_bytes != 0 {
        return Err(corrupt(
            path,
            format!("body of {} bytes is not a whole number of {dim}-wide rows", body.len()),
        ));
    }
    let rows = body.len() / row_bytes;
    if rows != frames {
        return Err(Error::Shape {
            what: format!("row count of {}", path.display()),
            expected: frames,
            found: rows,
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((Header { frames, dim, fps }, values))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn motion_to_bytes(motion: &MotionSequence) -> Vec<u8> {
    encode(
        MOTION_MAGIC,
        motion.frames(),
        motion.dim(),
        Some(MOTION_FPS as f32),
        motion.data(),
    )
}

pub fn write_motion(path: &Path, motion: &MotionSequence) -> Result<()> {
    write_bytes(path, &motion_to_bytes(motion))
}

pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, values) = decode(path, &bytes, MOTION_MAGIC, true)?;
    let fps = h.fps.unwrap_or_default() as f64;
    if (fps - MOTION_FPS).abs() > 1e-6 {
        return Err(corrupt(path, format!("motion stored at {fps} FPS, expected {MOTION_FPS}")));
    }
    MotionSequence::new(h.frames, h.dim, values)
}

pub fn features_to_bytes(features: &FrameFeatures) -> Vec<u8> {
    encode(
        FEATURE_MAGIC,
        features.frames(),
        features.dim(),
        None,
        features.data(),
    )
}

pub fn write_features(path: &Path, features: &FrameFeatures) -> Result<()> {
    write_bytes(path, &features_to_bytes(features))
}

pub fn read_features(path: &Path) -> Result<FrameFeatures> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, values) = decode(path, &bytes, FEATURE_MAGIC, false)?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FrameFeatures::new(h.frames, h.dim, values, source)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motion_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rgmo");
        let m = MotionSequence::new(3, 2, vec![1.0, -2.0, 3.5, 0.25, 9.0, -0.0]).unwrap();
        write_motion(&path, &m).unwrap();
        assert_eq!(read_motion(&path).unwrap(), m);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(read_motion(&path), Err(Error::Corrupt { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_motion(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn feature_header_row_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.rgvf");
        let f = FrameFeatures::new(16, 4, (0..64).map(|i| i as f32).collect(), "f".into()).unwrap();
        write_features(&path, &f).unwrap();
        assert_eq!(read_features(&path).unwrap().data(), f.data());

        let bytes = fs::read(&path).unwrap();
        // drop the last row only
        fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = read_features(&path).unwrap_err();
        match &err {
            Error::Shape { expected, found, .. } => assert_eq!((*expected, *found), (16, 15)),
            other => panic!("unexpected {other:?}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("16") && msg.contains("15"), "{msg}");

        // truncation that cuts a row in half
        fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Corrupt { .. })));
    }
}
