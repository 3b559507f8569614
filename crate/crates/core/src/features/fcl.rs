use super::FeatureError;
use crate::scalar::Real;
use crate::types::FeatureCloud;
use nalgebra::Point3;
use std::path::Path;

pub const FCL_MAGIC: &[u8; 4] = b"FCL1";
const HEADER_LEN: usize = 12;

/// Little-endian `.fcl` bytes: magic, `u32` count, `u32` dim, `N x 3`
/// positions then `N x D` descriptors, all `f32`.
pub fn encode_feature_cloud<T: Real>(fc: &FeatureCloud<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * fc.len() * (3 + fc.dim()));
    out.extend_from_slice(FCL_MAGIC);
    out.extend_from_slice(&(fc.len() as u32).to_le_bytes());
    out.extend_from_slice(&(fc.dim() as u32).to_le_bytes());
    for p in fc.points() {
        for c in p.iter() {
            out.extend_from_slice(&c.as_f32().to_le_bytes());
        }
    }
    for v in fc.descriptors() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    out
}

pub fn decode_feature_cloud<T: Real>(bytes: &[u8]) -> Result<FeatureCloud<T>, FeatureError> {
    if bytes.len() < 4 {
        return Err(FeatureError::TruncatedFile);
    }
    if &bytes[..4] != FCL_MAGIC {
        return Err(FeatureError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::TruncatedFile);
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (n, d) = (word(4), word(8));
    let expected = (n as u64) * (3 + d as u64) * 4 + HEADER_LEN as u64;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(FeatureError::TruncatedFile);
    }
    if actual > expected {
        return Err(FeatureError::DimMismatch {
            expected: expected as usize,
            got: bytes.len(),
        });
    }
    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64));
    let points: Vec<Point3<T>> = (0..n)
        .map(|_| {
            let (x, y, z) = (
                floats.next().unwrap(),
                floats.next().unwrap(),
                floats.next().unwrap(),
            );
            Point3::new(x, y, z)
        })
        .collect();
    let descriptors: Vec<T> = floats.collect();
    if d == 0 && n > 0 {
        return Err(FeatureError::DimMismatch {
            expected: 1,
            got: 0,
        });
    }
    Ok(FeatureCloud::new(points, descriptors, d.max(1))?)
}

pub fn save_feature_cloud<T: Real>(
    fc: &FeatureCloud<T>,
    path: impl AsRef<Path>,
) -> Result<(), FeatureError> {
    std::fs::write(path, encode_feature_cloud(fc))?;
    Ok(())
}

pub fn load_feature_cloud<T: Real>(
    path: impl AsRef<Path>,
) -> Result<FeatureCloud<T>, FeatureError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FeatureError::FileMissing(path.to_path_buf()),
        _ => FeatureError::Io(e),
    })?;
    decode_feature_cloud(&bytes)
}
