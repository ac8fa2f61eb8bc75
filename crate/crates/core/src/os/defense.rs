//! Frame placement under the software defenses.
//!
//! Each defense splits physical memory into zones by DRAM row index and
//! routes every allocation to one of them:
//! - none: a single zone;
//! - CATT: kernel rows at the bottom, a guard gap, then user rows;
//! - RIP-RH: kernel rows at the bottom, user rows split into per-user slots;
//! - CTA: page tables in the top rows, allocated downward and skipping rows
//!   with anti cells; everything else below.

use serde::{Deserialize, Serialize};

use super::buddy::BuddyAllocator;
use crate::address_map::DramMapper;
use crate::config::{DefenseConfig, DefenseKind, OsConfig, PAGE_SIZE};
use crate::dram::DramState;
use crate::error::OsError;
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    PageTable(u8),
    Cred,
    User,
    Background,
}

impl Purpose {
    pub fn name(self) -> String {
        match self {
            Purpose::PageTable(l) => format!("table_l{l}"),
            Purpose::Cred => "cred".into(),
            Purpose::User => "user".into(),
            Purpose::Background => "background".into(),
        }
    }

    pub fn is_kernel(self) -> bool {
        matches!(self, Purpose::PageTable(_) | Purpose::Cred)
    }
}

/// Top-down table region used by CTA.
#[derive(Clone, Debug)]
pub struct CtaZone {
    /// Region frames, highest first.
    frames: Vec<u64>,
    next: usize,
    freed: Vec<u64>,
    verify: bool,
    pub low_frame: u64,
}

impl CtaZone {
    fn alloc(&mut self, dram: &mut DramState) -> Result<u64, OsError> {
        if let Some(f) = self.freed.pop() {
            return Ok(f);
        }
        while self.next < self.frames.len() {
            let f = self.frames[self.next];
            self.next += 1;
            if self.verify {
                let loc = dram.mapper().locate(f * PAGE_SIZE);
                let bank = dram.mapper().flat_bank(&loc);
                if dram.row_has_anti(bank, loc.row) {
                    continue;
                }
            }
            return Ok(f);
        }
        Err(OsError::PlacementExhausted)
    }
}

#[derive(Clone, Debug)]
pub struct Placement {
    kind: DefenseKind,
    zones: Vec<BuddyAllocator>,
    slots: u32,
    cta: Option<CtaZone>,
    /// Zone index per frame; `u8::MAX` for frames outside every zone.
    zone_of: Vec<u8>,
}

pub const NO_ZONE: u8 = u8::MAX;
pub const CTA_ZONE: u8 = 254;

impl Placement {
    pub fn new(os: &OsConfig, mapper: &DramMapper, seed: u64) -> Self {
        let d: &DefenseConfig = &os.defense;
        let frames = mapper.dram_bytes() / PAGE_SIZE;
        let rows = mapper.rows_per_bank();
        let boot = os.boot_kernel_frames;
        let kr = d.kernel_rows;
        let user_rows = rows.saturating_sub(kr);
        let slot_w = (user_rows / d.user_slots.max(1)).max(1);
        let classify = |row: u32| -> u8 {
            match d.kind {
                DefenseKind::None => 0,
                DefenseKind::Catt => {
                    if row < kr {
                        0
                    } else if row < kr + d.buffer_rows {
                        NO_ZONE
                    } else {
                        1
                    }
                }
                DefenseKind::Riprh => {
                    if row < kr {
                        0
                    } else {
                        1 + ((row - kr) / slot_w).min(d.user_slots - 1) as u8
                    }
                }
                DefenseKind::Cta => {
                    if row >= rows - d.cta_rows {
                        CTA_ZONE
                    } else {
                        0
                    }
                }
            }
        };
        let mut zone_of = vec![NO_ZONE; frames as usize];
        for f in boot..frames {
            zone_of[f as usize] = classify(mapper.locate(f * PAGE_SIZE).row);
        }
        let n_zones = match d.kind {
            DefenseKind::None | DefenseKind::Cta => 1,
            DefenseKind::Catt => 2,
            DefenseKind::Riprh => 1 + d.user_slots as usize,
        };
        let mut zones: Vec<BuddyAllocator> =
            (0..n_zones).map(|z| BuddyAllocator::new(os.p_consec, os.pcp_batch, util::derive(seed, 0x2000 + z as u64))).collect();
        // contiguous runs of equal zone
        let mut f = 0u64;
        while f < frames {
            let z = zone_of[f as usize];
            let mut e = f + 1;
            while e < frames && zone_of[e as usize] == z {
                e += 1;
            }
            if (z as usize) < n_zones {
                zones[z as usize].add_range(f, e);
            }
            f = e;
        }
        let cta = (d.kind == DefenseKind::Cta).then(|| {
            let mut region: Vec<u64> = (boot..frames).filter(|&f| zone_of[f as usize] == CTA_ZONE).collect();
            region.reverse();
            let low_frame = region.last().copied().unwrap_or(frames);
            CtaZone { frames: region, next: 0, freed: Vec::new(), verify: d.cta_verify_true_cells, low_frame }
        });
        Placement { kind: d.kind, zones, slots: d.user_slots.max(1), cta, zone_of }
    }

    pub fn kind(&self) -> DefenseKind {
        self.kind
    }

    fn zone_index(&self, purpose: Purpose, uid: u32) -> u8 {
        match (self.kind, purpose) {
            (DefenseKind::Cta, Purpose::PageTable(_)) => CTA_ZONE,
            (DefenseKind::None | DefenseKind::Cta, _) => 0,
            (_, p) if p.is_kernel() => 0,
            (DefenseKind::Catt, _) => 1,
            (DefenseKind::Riprh, _) => 1 + (uid % self.slots) as u8,
        }
    }

    /// One frame for `purpose` on behalf of `uid`. Returns the frame and the
    /// zone it came from.
    pub fn alloc(&mut self, purpose: Purpose, uid: u32, dram: &mut DramState) -> Result<(u64, u8), OsError> {
        let z = self.zone_index(purpose, uid);
        let f = if z == CTA_ZONE {
            self.cta.as_mut().expect("cta zone").alloc(dram)?
        } else {
            self.zones[z as usize].alloc_order0().map_err(|_| {
                if self.kind == DefenseKind::None {
                    OsError::OutOfMemory
                } else {
                    OsError::PlacementExhausted
                }
            })?
        };
        Ok((f, z))
    }

    /// Naturally aligned block of `2^order` frames for user data.
    pub fn alloc_block(&mut self, order: u8, uid: u32) -> Result<(u64, u8), OsError> {
        let z = self.zone_index(Purpose::User, uid);
        let f = self.zones[z as usize].alloc_block(order)?;
        Ok((f, z))
    }

    pub fn free(&mut self, frame: u64, order: u8) {
        let z = self.zone_of[frame as usize];
        if z == CTA_ZONE {
            if let Some(c) = self.cta.as_mut() {
                c.freed.push(frame);
            }
        } else if (z as usize) < self.zones.len() {
            self.zones[z as usize].free_block(frame, order);
        }
    }

    pub fn zone_of(&self, frame: u64) -> u8 {
        self.zone_of.get(frame as usize).copied().unwrap_or(NO_ZONE)
    }

    /// Lowest frame of the CTA table region, when CTA is active.
    pub fn cta_low_frame(&self) -> Option<u64> {
        self.cta.as_ref().map(|c| c.low_frame)
    }

    pub fn free_frames(&self, zone: u8) -> u64 {
        self.zones.get(zone as usize).map_or(0, |z| z.free_frames())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::desk;
    use crate::dram::{CellKind, FlippableCell};

    fn setup(kind: DefenseKind) -> (Placement, DramState) {
        let mut m = desk().machine;
        m.os.defense.kind = kind;
        let dram = DramState::new(&m.dram, &m.flip, 5).unwrap();
        (Placement::new(&m.os, dram.mapper(), 9), dram)
    }

    fn row_of(d: &DramState, f: u64) -> u32 {
        d.mapper().locate(f * PAGE_SIZE).row
    }

    #[test]
    fn catt_separates_kernel_and_user_rows() {
        let (mut p, mut d) = setup(DefenseKind::Catt);
        let kr = desk().machine.os.defense.kernel_rows;
        for _ in 0..500 {
            let (t, _) = p.alloc(Purpose::PageTable(1), 1000, &mut d).unwrap();
            assert!(row_of(&d, t) < kr);
            let (u, _) = p.alloc(Purpose::User, 1000, &mut d).unwrap();
            assert!(row_of(&d, u) > kr);
        }
    }

    #[test]
    fn riprh_slots_by_uid() {
        let (mut p, mut d) = setup(DefenseKind::Riprh);
        let (a, za) = p.alloc(Purpose::User, 1000, &mut d).unwrap();
        let (b, zb) = p.alloc(Purpose::User, 1001, &mut d).unwrap();
        assert_ne!(za, zb);
        assert_ne!(row_of(&d, a), row_of(&d, b));
    }

    #[test]
    fn cta_tables_descend_and_skip_anti_rows() {
        let (mut p, mut d) = setup(DefenseKind::Cta);
        let frames = d.mapper().dram_bytes() / PAGE_SIZE;
        // flag the row of the top frame
        let top = frames - 1;
        let loc = d.mapper().locate(top * PAGE_SIZE);
        let bank = d.mapper().flat_bank(&loc);
        d.clear_row_cells(bank, loc.row);
        d.plant_cell(FlippableCell { bank, row: loc.row, bit: 77, kind: CellKind::Anti, threshold: 2000 });
        let (f, z) = p.alloc(Purpose::PageTable(1), 1000, &mut d).unwrap();
        assert_eq!(z, CTA_ZONE);
        let fl = d.mapper().locate(f * PAGE_SIZE);
        assert!(!(d.mapper().flat_bank(&fl) == bank && fl.row == loc.row));
        let mut prev = f;
        for _ in 0..50 {
            let (g, _) = p.alloc(Purpose::PageTable(1), 1000, &mut d).unwrap();
            assert!(g < prev);
            let gl = d.mapper().locate(g * PAGE_SIZE);
            assert!(!d.row_has_anti(d.mapper().flat_bank(&gl), gl.row));
            prev = g;
        }
        let (c, _) = p.alloc(Purpose::Cred, 1000, &mut d).unwrap();
        assert!(c < p.cta_low_frame().unwrap());
    }

    #[test]
    fn none_single_zone_skips_boot() {
        let (mut p, mut d) = setup(DefenseKind::None);
        let boot = desk().machine.os.boot_kernel_frames;
        for _ in 0..200 {
            let (f, z) = p.alloc(Purpose::User, 1000, &mut d).unwrap();
            assert_eq!(z, 0);
            assert!(f >= boot);
        }
    }
}
