//! Single-file checkpoint container.
//!
//! Layout (little-endian): magic `MWX1`, u32 config-JSON length, config
//! JSON (version + architecture + normalization), u32 tensor count, then
//! per tensor: u16 name length, name bytes, u8 ndim, u32 dims, f32 values;
//! finally a CRC32 of everything before it.
//!
//! Parameters are kept f32-representable in memory (initialization and
//! every optimizer step round through f32), so save -> load is exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::types::{ModelConfig, ModelState, Normalization, CHECKPOINT_VERSION};

const MAGIC: &[u8; 4] = b"MWX1";

/// CRC-32 (IEEE 802.3, reflected, init/final 0xFFFFFFFF).
pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: String,
    config: ModelConfig,
    normalization: Normalization,
}

/// Serialized checkpoint bytes; the on-disk format of [`save_checkpoint`].
pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    state.validate()?;
    let header = CheckpointHeader {
        version: state.version.clone(),
        config: state.config.clone(),
        normalization: state.normalization.clone(),
    };
    let json = serde_json::to_vec(&header)?;

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (name, m) in &state.params {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::EncodingError(format!("parameter name too long: {}", name)));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(2u8);
        buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for &v in &m.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptChecksum("file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let buf = std::fs::read(path)?;
    if buf.len() < MAGIC.len() + 8 {
        return Err(Error::CorruptChecksum("file too short".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored_crc = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32(body) != stored_crc {
        return Err(Error::CorruptChecksum("crc32 mismatch".into()));
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::VersionError("bad magic bytes".into()));
    }
    let json_len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(json_len)?)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::VersionError(format!(
            "checkpoint version '{}', this build reads '{}'",
            header.version, CHECKPOINT_VERSION
        )));
    }
    let n_tensors = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptChecksum("parameter name is not utf-8".into()))?;
        let ndim = r.take(1)?[0];
        if ndim != 2 {
            return Err(Error::VersionError(format!("tensor {} has ndim {}", name, ndim)));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if params.insert(name.clone(), Mat::from_vec(rows, cols, data)).is_some() {
            return Err(Error::CorruptChecksum(format!("duplicate tensor {}", name)));
        }
    }
    if r.pos != body.len() {
        return Err(Error::CorruptChecksum("trailing bytes after tensors".into()));
    }

    let state = ModelState {
        config: header.config,
        params,
        normalization: header.normalization,
        version: header.version,
    };
    state.validate()?;
    Ok(state)
}

/// Load and require an architecture identical to `want` (seed aside, every
/// field participates).
pub fn load_checkpoint_checked(path: &Path, want: &ModelConfig) -> Result<ModelState> {
    let state = load_checkpoint(path)?;
    let mut got = state.config.clone();
    got.seed = want.seed;
    if &got != want {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint architecture does not match the requested configuration ({:?} vs {:?})",
            state.config, want
        )));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Connectivity, SurfaceMode};
    use tempfile::tempdir;

    fn f32_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect(),
        )
    }

    fn state() -> ModelState {
        let mut params = BTreeMap::new();
        params.insert("head.w".to_string(), f32_mat(3, 4, 1));
        params.insert("head.b".to_string(), f32_mat(1, 4, 2));
        ModelState {
            config: ModelConfig {
                d_latent: 12,
                n_heads: 3,
                n_layers_self: 2,
                n_layers_cross: 2,
                location_encoding_degree: 2,
                mlp_hidden: 8,
                connectivity: Connectivity::Full,
                surface_mode: SurfaceMode::Embedding { dim: 4 },
                seed: 9,
            },
            params,
            normalization: Normalization::identity(),
            version: CHECKPOINT_VERSION.to_string(),
        }
    }

    #[test]
    fn crc32_reference_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.mwx");
        let s = state();
        save_checkpoint(&s, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config, s.config);
        assert_eq!(back.normalization, s.normalization);
        assert_eq!(back.params.len(), s.params.len());
        for (name, m) in &s.params {
            assert_eq!(&back.params[name].data, &m.data, "tensor {}", name);
        }
    }

    #[test]
    fn truncation_detected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.mwx");
        save_checkpoint(&state(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CorruptChecksum(_))));
    }

    #[test]
    fn flipped_byte_detected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.mwx");
        save_checkpoint(&state(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CorruptChecksum(_))));
    }

    #[test]
    fn config_mismatch_detected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.mwx");
        let s = state();
        save_checkpoint(&s, &p).unwrap();
        let mut want = s.config.clone();
        want.n_heads = 4;
        want.d_latent = 16;
        assert!(matches!(
            load_checkpoint_checked(&p, &want),
            Err(Error::ConfigMismatch(_))
        ));
        assert!(load_checkpoint_checked(&p, &s.config).is_ok());
    }

    #[test]
    fn bad_magic_is_version_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.mwx");
        save_checkpoint(&state(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'Z';
        // Recompute the crc so the magic check is what fires.
        let crc = crc32(&bytes[..bytes.len() - 4]);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::VersionError(_))));
    }
}
