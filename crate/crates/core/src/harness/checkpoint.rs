//! Versioned binary checkpoint: config text, parameters, skill memory,
//! optimizer moments, generator state and step, closed by a SHA-256.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{HarnessError, RunConfig};
use crate::codec::{verify_checksum, Reader, Writer};
use crate::msm::SkillMemory;
use crate::tensor::{Adam, ParamStore};

const MAGIC: &[u8; 8] = b"VLACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
    pub memory: SkillMemory,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

fn encode_rng(rng: &ChaCha8Rng, w: &mut Writer) {
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    let pos = rng.get_word_pos();
    w.u64(pos as u64);
    w.u64((pos >> 64) as u64);
}

fn decode_rng(r: &mut Reader<'_>) -> Result<ChaCha8Rng, HarnessError> {
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32)?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    rng.set_word_pos(lo | (hi << 64));
    Ok(rng)
}

pub fn to_bytes(cfg: &RunConfig, state: &TrainState) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    // Only file names are kept so the bytes do not depend on where the
    // run lives.
    let mut stored = cfg.clone();
    for p in [&mut stored.dataset, &mut stored.checkpoint, &mut stored.metrics] {
        if let Some(name) = p.file_name() {
            *p = name.into();
        }
    }
    w.str(&stored.to_text());
    w.u64(state.step);
    let mut p = Writer::new();
    state.params.encode(&mut p);
    w.block(p);
    let mut m = Writer::new();
    state.memory.encode(&mut m);
    w.block(m);
    let mut a = Writer::new();
    state.adam.encode(&mut a);
    w.block(a);
    encode_rng(&state.rng, &mut w);
    w.finish_with_checksum()
}

pub fn from_bytes(bytes: &[u8]) -> Result<(RunConfig, TrainState), HarnessError> {
    let body = verify_checksum(bytes)?;
    let mut r = Reader::new(body);
    if r.take(MAGIC.len())? != MAGIC {
        return Err(HarnessError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(HarnessError::Version(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let cfg = RunConfig::parse(&r.str()?)?;
    let step = r.u64()?;
    let params = ParamStore::decode(&mut r.block()?)?;
    let memory = SkillMemory::decode(&mut r.block()?)?;
    let adam = Adam::decode(&mut r.block()?)?;
    let rng = decode_rng(&mut r)?;
    r.expect_end()?;
    Ok((cfg, TrainState { params, adam, memory, rng, step }))
}

/// Writes through a temporary file so a crash never leaves a torn
/// checkpoint behind.
pub fn save(path: &Path, cfg: &RunConfig, state: &TrainState) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(cfg, state)).map_err(HarnessError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(HarnessError::io(path))
}

pub fn load(path: &Path) -> Result<(RunConfig, TrainState), HarnessError> {
    let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
    from_bytes(&bytes)
}

/// Fails unless `ckpt` describes the same architecture as `cfg`.
pub fn check_compatible(cfg: &RunConfig, ckpt: &RunConfig) -> Result<(), HarnessError> {
    let (a, b) = (cfg.policy(), ckpt.policy());
    if a.backbone != b.backbone || a.head != b.head || a.enable_mol != b.enable_mol || a.enable_msm != b.enable_msm {
        return Err(HarnessError::Version("checkpoint was written for a different model configuration".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msm::SkillEntry;
    use rand::RngCore;

    fn state() -> (RunConfig, TrainState) {
        let cfg = RunConfig { n_layers: 3, d_model: 16, n_heads: 2, n_queries: 2, d_k: 16, head_layers: 2, head_heads: 2, horizon: 2, exec_horizon: 2, ..RunConfig::default() };
        let params = crate::policy::init_params(&cfg.policy()).unwrap();
        let mut memory = SkillMemory::new(4);
        memory.insert(SkillEntry { key: vec![1.0, 2.0], value: vec![0.1; 6], traj_id: 3, t: 1 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(5);
        for _ in 0..13 {
            rng.next_u32();
        }
        (cfg, TrainState { params, adam: Adam::new(1e-3, 0.9, 0.999, 1e-8), memory, rng, step: 17 })
    }

    #[test]
    fn roundtrip_is_lossless() {
        let (cfg, s) = state();
        let bytes = to_bytes(&cfg, &s);
        let (c2, mut s2) = from_bytes(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(s2, s);
        let mut r = s.rng.clone();
        assert_eq!(s2.rng.next_u64(), r.next_u64());
    }

    #[test]
    fn corruption_and_mismatch_detected() {
        let (cfg, s) = state();
        let mut bytes = to_bytes(&cfg, &s);
        bytes[40] ^= 1;
        assert!(from_bytes(&bytes).is_err());
        let other = RunConfig { d_k: 32, ..cfg.clone() };
        assert!(matches!(check_compatible(&other, &cfg), Err(HarnessError::Version(_))));
        assert!(check_compatible(&RunConfig { steps: 9, ..cfg.clone() }, &cfg).is_ok());
    }
}
