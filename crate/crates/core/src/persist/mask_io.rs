//! Mask artifacts: a compact bitset file plus a per-layer text summary.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::masking::{GroupMask, Mask};

use super::checkpoint::{seal, unseal, Dec, Enc};

pub const MASK_MAGIC: &[u8; 4] = b"CSMK";
pub const MASK_VERSION: u32 = 1;

pub fn mask_to_bytes(mask: &Mask) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(mask.groups.len() as u64);
    for g in &mask.groups {
        e.str(&g.name);
        e.u32(g.shape.len() as u32);
        for &d in &g.shape {
            e.u64(d as u64);
        }
        e.bits(&g.bits);
    }
    seal(MASK_MAGIC, MASK_VERSION, &e.0)
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<Mask> {
    let mut d = Dec::new(unseal(MASK_MAGIC, MASK_VERSION, bytes)?);
    let n = d.usize()?;
    let mut groups = Vec::new();
    for _ in 0..n {
        let name = d.str()?;
        let rank = d.u32()? as usize;
        let shape = (0..rank).map(|_| d.usize()).collect::<Result<Vec<_>>>()?;
        let bits = d.bits()?;
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::Integrity(format!("mask group {name} has {} bits for shape {shape:?}", bits.len())));
        }
        groups.push(GroupMask { name, shape, bits });
    }
    d.done()?;
    Ok(Mask { groups })
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    std::fs::write(path, mask_to_bytes(mask)).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    mask_from_bytes(&bytes)
}

/// One line per layer: name, kept / total, remaining fraction.
pub fn mask_summary(mask: &Mask) -> String {
    let mut out = String::new();
    for g in &mask.groups {
        let kept = g.bits.iter().filter(|&&b| b).count();
        let total = g.bits.len();
        let frac = if total == 0 { 0.0 } else { kept as f64 / total as f64 };
        let _ = writeln!(out, "{:<12} {:>8}/{:<8} {:.4}", g.name, kept, total, frac);
    }
    let frac = mask.remaining_fraction().unwrap_or(0.0);
    let _ = writeln!(out, "{:<12} {:>8}/{:<8} {:.4}", "total", mask.kept(), mask.total(), frac);
    out
}

pub fn save_mask_summary(mask: &Mask, path: &Path) -> Result<()> {
    std::fs::write(path, mask_summary(mask)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitset_round_trip() {
        let mask = Mask {
            groups: vec![
                GroupMask {
                    name: "dense0".into(),
                    shape: vec![3, 3],
                    bits: vec![true, false, true, true, false, false, true, true, true],
                },
                GroupMask {
                    name: "dense2".into(),
                    shape: vec![1],
                    bits: vec![false],
                },
            ],
        };
        let back = mask_from_bytes(&mask_to_bytes(&mask)).unwrap();
        assert_eq!(back, mask);
        let text = mask_summary(&mask);
        assert!(text.contains("dense0"));
        assert!(text.lines().last().unwrap().contains("6/10"));
    }

    #[test]
    fn corrupted_bitset_is_rejected() {
        let mask = Mask { groups: vec![] };
        let mut bytes = mask_to_bytes(&mask);
        bytes[0] = b'X';
        assert!(matches!(mask_from_bytes(&bytes), Err(Error::Integrity(_))));
    }
}
