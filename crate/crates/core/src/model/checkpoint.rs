//! Checkpoints: `"DVCK" | u32 version | u64 header length | JSON header |
//! f64 little-endian payload`, slots in [`Params`] order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Objective};
use super::network::{AnyNetwork, Architecture};
use crate::error::{Error, Result};
use crate::numerics::params::Params;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub objective: Objective,
    pub slots: Vec<SlotHeader>,
}

pub fn encode_checkpoint(net: &AnyNetwork, config: &ModelConfig) -> Result<Vec<u8>> {
    let slots = net.slots();
    let header = CheckpointHeader {
        architecture: net.architecture(),
        config: config.clone(),
        objective: *net.objective(),
        slots: slots
            .iter()
            .map(|s| SlotHeader {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = slots.iter().map(|s| s.data.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for s in &slots {
        for v in s.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, AnyNetwork)> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])?;
    // Any seed works: every value is overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = AnyNetwork::new(header.architecture, &header.config, header.objective, &mut rng)?;
    let mut payload = &body[header_len..];
    {
        let slots = net.slots_mut();
        if slots.len() != header.slots.len() {
            return Err(bad(format!(
                "header lists {} tensors, architecture has {}",
                header.slots.len(),
                slots.len()
            )));
        }
        for (slot, h) in slots.into_iter().zip(&header.slots) {
            if slot.name != h.name || slot.shape != h.shape {
                return Err(bad(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    h.name, h.shape, slot.name, slot.shape
                )));
            }
            let need = 8 * slot.data.len();
            if payload.len() < need {
                return Err(bad(format!("payload truncated in tensor {}", h.name)));
            }
            for (v, chunk) in slot.data.iter_mut().zip(payload[..need].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            payload = &payload[need..];
        }
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing bytes after payload", payload.len())));
    }
    Ok((header, net))
}

pub fn save_checkpoint(path: &Path, net: &AnyNetwork, config: &ModelConfig) -> Result<()> {
    let bytes = encode_checkpoint(net, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, AnyNetwork)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Params;

    #[test]
    fn round_trip_is_bit_exact_for_every_architecture() {
        let cfg = ModelConfig::tiny(3, 4);
        for arch in Architecture::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut net = AnyNetwork::new(arch, &cfg, Objective::default(), &mut rng).unwrap();
            for bn in net.batch_norms_mut() {
                bn.running_mean[0] = 0.1 + 1e-17;
                bn.running_var[0] = std::f64::consts::PI;
            }
            let bytes = encode_checkpoint(&net, &cfg).unwrap();
            let (header, back) = decode_checkpoint(&bytes).unwrap();
            assert_eq!(header.architecture, arch);
            for (a, b) in net.slots().iter().zip(back.slots().iter()) {
                assert_eq!(a.name, b.name);
                let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a.data), bits(b.data));
            }
            assert_eq!(encode_checkpoint(&back, &cfg).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let cfg = ModelConfig::tiny(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = AnyNetwork::new(Architecture::Concat, &cfg, Objective::default(), &mut rng).unwrap();
        let bytes = encode_checkpoint(&net, &cfg).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(Error::Checkpoint(_))));
    }
}
