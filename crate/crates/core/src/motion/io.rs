//! `IMK1` motion container and dataset directories.
//!
//! Container layout (little-endian): magic `IMK1`, `u32` N, J, d, layout code,
//! `f32` fps, then `N*J*d` `f32` values in (frame, joint, feature) order.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{InteractionSample, Layout, MotionSequence, SkeletonSpec};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"IMK1";
const HEADER_LEN: usize = 24;

pub fn encode_motion(motion: &MotionSequence) -> Vec<u8> {
    let (n, j, d) = motion.data().dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * j * d);
    out.extend_from_slice(&MAGIC);
    for v in [n as u32, j as u32, d as u32, motion.layout().code()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&motion.fps().to_le_bytes());
    for v in motion.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_motion(bytes: &[u8]) -> Result<MotionSequence> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { needed: 4, found: bytes.len() });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { needed: HEADER_LEN, found: bytes.len() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (n, j, d, code) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
    let fps = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let layout = Layout::from_code(code).ok_or_else(|| Error::DimensionMismatch(format!("unknown layout code {code}")))?;
    if d != layout.feature_dim() {
        return Err(Error::DimensionMismatch(format!("feature dim {d} does not match layout {layout:?}")));
    }
    let count = n
        .checked_mul(j)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::DimensionMismatch("header dimensions overflow".into()))?;
    let needed = count.checked_mul(4).and_then(|v| v.checked_add(HEADER_LEN)).ok_or_else(|| Error::DimensionMismatch("header dimensions overflow".into()))?;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, found: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(Error::DimensionMismatch(format!("{} trailing bytes after payload", bytes.len() - needed)));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array3::from_shape_vec((n, j, d), values).expect("length checked above");
    MotionSequence::new(data, fps, SkeletonSpec::for_joint_count(j), layout)
}

pub fn write_motion(motion: &MotionSequence, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_motion(motion))?;
    Ok(())
}

pub fn read_motion(path: impl AsRef<Path>) -> Result<MotionSequence> {
    decode_motion(&fs::read(path)?)
}

/// One row of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub motion_a: String,
    pub motion_b: String,
    pub texts: Vec<String>,
    #[serde(default)]
    pub class: Option<String>,
}

pub const INDEX_FILE: &str = "dataset.json";

/// Writes `<id>_a.imk1`, `<id>_b.imk1` per sample plus the `dataset.json` index.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[InteractionSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let a = format!("{}_a.imk1", s.id);
        let b = format!("{}_b.imk1", s.id);
        write_motion(&s.motion_a, dir.join(&a))?;
        write_motion(&s.motion_b, dir.join(&b))?;
        entries.push(DatasetEntry { id: s.id.clone(), motion_a: a, motion_b: b, texts: s.texts.clone(), class: s.class.clone() });
    }
    let mut json = serde_json::to_string_pretty(&entries)?;
    json.push('\n');
    fs::write(dir.join(INDEX_FILE), json)?;
    Ok(())
}

pub fn read_dataset_index(dir: impl AsRef<Path>) -> Result<Vec<DatasetEntry>> {
    let text = fs::read_to_string(dir.as_ref().join(INDEX_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<InteractionSample>> {
    let dir = dir.as_ref();
    read_dataset_index(dir)?
        .into_iter()
        .map(|e| {
            let a = read_motion(dir.join(&e.motion_a))?;
            let b = read_motion(dir.join(&e.motion_b))?;
            InteractionSample::new(e.id, e.class, e.texts, a, b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn motion(n: usize, seed: u32) -> MotionSequence {
        let data = Array3::from_shape_fn((n, 8, 12), |(f, j, c)| {
            ((f * 97 + j * 13 + c) as f32 * 0.37 + seed as f32).sin() * 1e3_f32.powf((c % 3) as f32 - 1.0)
        });
        MotionSequence::new(data, 20.0, SkeletonSpec::synthetic8(), Layout::PosVelRot6d).unwrap()
    }

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = motion(7, 1);
        let path = dir.path().join("m.imk1");
        write_motion(&m, &path).unwrap();
        let back = read_motion(&path).unwrap();
        assert_eq!(back, m);
        let bits = |m: &MotionSequence| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn header_bytes() {
        let bytes = encode_motion(&motion(2, 0));
        assert_eq!(&bytes[..4], b"IMK1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 12);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 20.0);
        assert_eq!(bytes.len(), 24 + 2 * 8 * 12 * 4);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_motion(&motion(2, 0));
        bytes[0] = b'X';
        assert!(matches!(decode_motion(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_motion(&motion(3, 0));
        assert!(matches!(decode_motion(&bytes[..bytes.len() - 4]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_motion(&bytes[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn dimension_mismatch() {
        let mut bytes = encode_motion(&motion(2, 0));
        bytes[12..16].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_motion(&bytes), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = InteractionSample::new("s0", Some("bow".into()), vec!["two people bow".into()], motion(4, 1), motion(4, 2)).unwrap();
        write_dataset(dir.path(), std::slice::from_ref(&s)).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, vec![s]);
    }

    proptest! {
        #[test]
        fn arbitrary_payload_round_trips(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 36)) {
            let data = Array3::from_shape_vec((3, 2, 6), values).unwrap();
            let m = MotionSequence::new(data, 29.97, SkeletonSpec::chain(2), Layout::Rot6d).unwrap();
            let back = decode_motion(&encode_motion(&m)).unwrap();
            prop_assert_eq!(encode_motion(&back), encode_motion(&m));
        }
    }
}
