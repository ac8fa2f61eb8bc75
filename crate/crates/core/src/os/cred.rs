//! Per-process credential records as laid out in kernel memory.

use serde::{Deserialize, Serialize};

pub const CRED_BYTES: u64 = 256;
/// Leading and trailing tag of every record.
pub const CRED_MAGIC: u64 = 0x4352_4544_5f52_4543;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cred {
    pub uid: u32,
    pub gid: u32,
    pub euid: u32,
    pub egid: u32,
    pub pid: u32,
}

impl Cred {
    pub fn user(uid: u32, pid: u32) -> Self {
        Cred { uid, gid: uid, euid: uid, egid: uid, pid }
    }

    pub fn encode(&self) -> [u8; CRED_BYTES as usize] {
        let mut b = [0u8; CRED_BYTES as usize];
        b[0..8].copy_from_slice(&CRED_MAGIC.to_le_bytes());
        b[8..12].copy_from_slice(&self.uid.to_le_bytes());
        b[12..16].copy_from_slice(&self.gid.to_le_bytes());
        b[16..20].copy_from_slice(&self.euid.to_le_bytes());
        b[20..24].copy_from_slice(&self.egid.to_le_bytes());
        b[24..28].copy_from_slice(&self.pid.to_le_bytes());
        b[248..256].copy_from_slice(&CRED_MAGIC.to_le_bytes());
        b
    }

    /// Parses a record; both tags must be intact.
    pub fn decode(b: &[u8]) -> Option<Cred> {
        if b.len() < CRED_BYTES as usize {
            return None;
        }
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        if u64_at(0) != CRED_MAGIC || u64_at(248) != CRED_MAGIC {
            return None;
        }
        Some(Cred { uid: u32_at(8), gid: u32_at(12), euid: u32_at(16), egid: u32_at(20), pid: u32_at(24) })
    }
}

/// Byte offsets of the id fields, for in-place edits.
pub const UID_OFFSET: u64 = 8;
pub const ID_FIELDS_BYTES: u64 = 16;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let c = Cred::user(1000, 42);
        assert_eq!(Cred::decode(&c.encode()), Some(c));
    }

    #[test]
    fn damaged_tag_rejected() {
        let mut b = Cred::user(1000, 1).encode();
        b[250] ^= 4;
        assert_eq!(Cred::decode(&b), None);
        assert_eq!(Cred::decode(&[0u8; 256]), None);
    }
}
