use crate::error::{Error, Result};
use crate::plan::SplitMode;

/// Session parameters the client announces in its HELLO frame.
///
/// Layout: `plan_hash [32] | mode u8 | seed u64 | lr f64 | batch_size u32`,
/// little-endian, 53 bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub plan_hash: [u8; 32],
    pub mode: SplitMode,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: u32,
}

impl Hello {
    pub const LEN: usize = 53;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.plan_hash);
        out.push(match self.mode {
            SplitMode::NoSplit => 0,
            SplitMode::SingleSplit => 1,
            SplitMode::DoubleSplit => 2,
        });
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.lr.to_le_bytes());
        out.extend_from_slice(&self.batch_size.to_le_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() != Self::LEN {
            return Err(Error::Wire(format!("HELLO payload must be {} bytes, got {}", Self::LEN, b.len())));
        }
        let mode = match b[32] {
            0 => SplitMode::NoSplit,
            1 => SplitMode::SingleSplit,
            2 => SplitMode::DoubleSplit,
            m => return Err(Error::Wire(format!("unknown split mode {m}"))),
        };
        Ok(Self {
            plan_hash: b[..32].try_into().expect("32 bytes"),
            mode,
            seed: u64::from_le_bytes(b[33..41].try_into().expect("8 bytes")),
            lr: f64::from_le_bytes(b[41..49].try_into().expect("8 bytes")),
            batch_size: u32::from_le_bytes(b[49..53].try_into().expect("4 bytes")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let h = Hello {
            plan_hash: [7; 32],
            mode: SplitMode::DoubleSplit,
            seed: 99,
            lr: 0.05,
            batch_size: 8,
        };
        assert_eq!(Hello::decode(&h.encode()).unwrap(), h);
        assert!(Hello::decode(&h.encode()[..52]).is_err());
    }
}
