//! Precomputed feature files: one global vector `g` plus `n` local vectors.
//!
//! Layout (little-endian): `ARNFEAT1`, `u32 g_dim`, `g_dim × f64`, `u32 n`,
//! `u32 s_dim`, `n × s_dim × f64` row-major.

use std::fs;
use std::path::Path;

use crate::attention::EncodedSource;
use crate::error::{Error, FeatureError, Result};
use crate::tensor::Vector;

const MAGIC: &[u8; 8] = b"ARNFEAT1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], FeatureError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(FeatureError::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FeatureError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or(FeatureError::Dimension("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parse feature bytes. `g_dim` and `s_dim` must agree; the attentive decoder
/// reads both through the same source dimension.
pub fn parse_features(bytes: &[u8]) -> Result<EncodedSource, FeatureError> {
    if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let g_dim = r.u32()? as usize;
    if g_dim == 0 {
        return Err(FeatureError::Dimension("g_dim is zero".into()));
    }
    let g = r.f64s(g_dim)?;
    let n = r.u32()? as usize;
    let s_dim = r.u32()? as usize;
    if n == 0 {
        return Err(FeatureError::NoLocalVectors);
    }
    if s_dim != g_dim {
        return Err(FeatureError::Dimension(format!(
            "g_dim {g_dim} but s_dim {s_dim}"
        )));
    }
    let flat = r.f64s(
        n.checked_mul(s_dim)
            .ok_or(FeatureError::Dimension("size overflow".into()))?,
    )?;
    if r.pos != bytes.len() {
        return Err(FeatureError::TrailingBytes(bytes.len() - r.pos));
    }
    let s = flat.chunks_exact(s_dim).map(Vector::from).collect();
    Ok(EncodedSource { g: g.into(), s })
}

pub fn load_features(path: &Path) -> Result<EncodedSource> {
    let bytes =
        fs::read(path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    Ok(parse_features(&bytes)?)
}

pub fn encode_features(src: &EncodedSource) -> Vec<u8> {
    let s_dim = src.local_dim();
    let mut out = Vec::with_capacity(20 + 8 * (src.g.len() + src.s.len() * s_dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(src.g.len() as u32).to_le_bytes());
    for v in src.g.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(src.s.len() as u32).to_le_bytes());
    out.extend_from_slice(&(s_dim as u32).to_le_bytes());
    for row in &src.s {
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_features(path: &Path, src: &EncodedSource) -> Result<()> {
    fs::write(path, encode_features(src))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(g_dim: u32, n: u32, s_dim: u32) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&g_dim.to_le_bytes());
        b.extend(std::iter::repeat(0u8).take(8 * g_dim as usize));
        b.extend_from_slice(&n.to_le_bytes());
        b.extend_from_slice(&s_dim.to_le_bytes());
        b
    }

    #[test]
    fn inception_shapes_parse() {
        let mut b = header(1536, 64, 1536);
        b.extend((0..64 * 1536).flat_map(|i| (i as f64 * 1e-3).to_le_bytes()));
        let src = parse_features(&b).unwrap();
        assert_eq!(src.g.len(), 1536);
        assert_eq!(src.s.len(), 64);
        assert_eq!(src.s[63][1535], (63 * 1536 + 1535) as f64 * 1e-3);
    }

    #[test]
    fn round_trip_bitwise() {
        let src = EncodedSource::new(
            vec![1.0 / 3.0, -0.0, f64::MIN_POSITIVE].into(),
            vec![vec![0.1, 0.2, 0.3].into(), vec![-1e300, 7.0, 1e-310].into()],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_features(&p, &src).unwrap();
        let back = load_features(&p).unwrap();
        let bits = |s: &EncodedSource| -> Vec<u64> {
            s.g.iter()
                .chain(s.s.iter().flat_map(|r| r.iter()))
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&back), bits(&src));
    }

    #[test]
    fn distinct_errors() {
        assert_eq!(parse_features(b"ARNFEAT2xxxx"), Err(FeatureError::BadMagic));
        assert_eq!(
            parse_features(&header(4, 0, 4)),
            Err(FeatureError::NoLocalVectors)
        );
        assert!(matches!(
            parse_features(&header(4, 2, 3)),
            Err(FeatureError::Dimension(_))
        ));
        assert!(matches!(
            parse_features(&header(4, 2, 4)),
            Err(FeatureError::Truncated { .. })
        ));
        let mut b = header(1, 1, 1);
        b.extend_from_slice(&1.0f64.to_le_bytes());
        b.push(0);
        assert_eq!(parse_features(&b), Err(FeatureError::TrailingBytes(1)));
    }
}
