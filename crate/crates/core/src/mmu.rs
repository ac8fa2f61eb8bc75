//! Four-level page walker with paging-structure caches, and the `Machine`
//! that ties DRAM, caches, TLB and walker to one simulated clock.

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::address_map::{is_canonical, split_virtual, PhysAddr, VirtAddr};
use crate::cache_tlb::{CacheHierarchy, HitLevel, SetAssocArray, TlbHierarchy, TlbHit};
use crate::config::{LatencyConfig, MachineConfig, PolicyConfig, PolicyKind, PAGE_SIZE};
use crate::dram::{AccessTag, DramState, RowOutcome};
use crate::error::{ConfigError, PageFault};
use crate::util;

pub const PTE_P: u64 = 1;
pub const PTE_RW: u64 = 1 << 1;
pub const PTE_US: u64 = 1 << 2;
pub const PTE_PS: u64 = 1 << 7;
pub const PFN_MASK: u64 = 0x000F_FFFF_FFFF_F000;
/// Flags used for every entry the OS installs for user mappings.
pub const PTE_USER: u64 = PTE_P | PTE_RW | PTE_US;

#[inline]
pub fn pte_frame(pte: u64) -> u64 {
    (pte & PFN_MASK) >> 12
}

#[inline]
pub fn make_pte(frame: u64, flags: u64) -> u64 {
    (frame << 12) & PFN_MASK | flags
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TlbOutcome {
    L1,
    L2,
    Huge,
    Miss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PscHit {
    Pde,
    Pdpte,
    Pml4e,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PteFetch {
    /// Table level of the fetched entry (1 = L1PTE).
    pub level: u8,
    pub entry_pa: u64,
    pub hit: HitLevel,
    pub dram: Option<RowOutcome>,
    pub cycles: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkTrace {
    pub tlb: TlbOutcome,
    pub psc: Option<PscHit>,
    pub fetches: ArrayVec<PteFetch, 4>,
    pub total_cycles: u64,
}

impl WalkTrace {
    /// Re-derives the cycle total from the trace and the latency table.
    pub fn recompute_cycles(&self, lat: &LatencyConfig, psc_lookup: u32, dram: (u32, u32, u32)) -> u64 {
        match self.tlb {
            TlbOutcome::L1 | TlbOutcome::Huge => lat.tlb_l1_hit as u64,
            TlbOutcome::L2 => lat.tlb_l2_hit as u64,
            TlbOutcome::Miss => {
                let mut c = (lat.tlb_l2_hit + lat.walk_base + psc_lookup) as u64;
                for f in &self.fetches {
                    c += level_cycles(lat, f.hit, f.dram, dram) as u64;
                }
                c
            }
        }
    }
}

fn level_cycles(lat: &LatencyConfig, hit: HitLevel, dram: Option<RowOutcome>, t: (u32, u32, u32)) -> u32 {
    match hit {
        HitLevel::L1 => lat.l1_hit,
        HitLevel::L2 => lat.l2_hit,
        HitLevel::Llc => lat.llc_hit,
        HitLevel::Memory => {
            lat.llc_hit
                + match dram.expect("memory access has a DRAM outcome") {
                    RowOutcome::RowHit => t.0,
                    RowOutcome::RowMiss => t.1,
                    RowOutcome::RowConflict => t.2,
                }
        }
    }
}

/// PML4E/PDPTE/PDE caches, fully associative, keyed by address prefix.
#[derive(Clone, Debug)]
pub struct PagingStructureCaches {
    pub pde: SetAssocArray,
    pub pdpte: SetAssocArray,
    pub pml4e: SetAssocArray,
}

impl PagingStructureCaches {
    pub fn new(pde: u32, pdpte: u32, pml4e: u32) -> Self {
        let lru = PolicyConfig::new(PolicyKind::TrueLru);
        PagingStructureCaches {
            pde: SetAssocArray::new(1, pde as usize, lru.clone(), 1),
            pdpte: SetAssocArray::new(1, pdpte as usize, lru.clone(), 2),
            pml4e: SetAssocArray::new(1, pml4e as usize, lru, 3),
        }
    }

    fn cache(&mut self, level: u8) -> &mut SetAssocArray {
        match level {
            2 => &mut self.pde,
            3 => &mut self.pdpte,
            4 => &mut self.pml4e,
            _ => unreachable!("no PSC for level {level}"),
        }
    }

    fn fill(&mut self, level: u8, key: u64, frame: u64) {
        let c = self.cache(level);
        match c.find(0, key) {
            Some(w) => {
                c.remove(0, key);
                let _ = w;
                c.insert(0, key, frame);
            }
            None => {
                c.insert(0, key, frame);
            }
        }
    }

    pub fn flush(&mut self) {
        self.pde.clear();
        self.pdpte.clear();
        self.pml4e.clear();
    }

    /// Drops every entry covering `va`.
    pub fn invalidate(&mut self, va: u64) {
        self.pde.remove(0, va >> 21);
        self.pdpte.remove(0, va >> 30);
        self.pml4e.remove(0, va >> 39);
    }

    pub fn contents(&self) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
        let keys = |a: &SetAssocArray| {
            let mut v: Vec<u64> = a.valid_tags().map(|(_, t)| t).collect();
            v.sort_unstable();
            v
        };
        (keys(&self.pde), keys(&self.pdpte), keys(&self.pml4e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineCounters {
    pub walks: u64,
    pub dram_accesses: u64,
    pub walk_dram_fetches: u64,
}

#[derive(Clone, Debug)]
pub struct Translation {
    pub pa: PhysAddr,
    pub trace: WalkTrace,
}

#[derive(Clone, Debug)]
pub struct LoadResult {
    pub pa: PhysAddr,
    pub trace: WalkTrace,
    pub data_level: HitLevel,
    pub cycles: u64,
}

#[derive(Clone, Debug)]
pub struct Machine {
    cfg: MachineConfig,
    pub dram: DramState,
    pub caches: CacheHierarchy,
    pub tlb: TlbHierarchy,
    pub psc: PagingStructureCaches,
    clock: u64,
    counters: MachineCounters,
    frames: u64,
}

impl Machine {
    pub fn new(cfg: &MachineConfig, seed: u64) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let dram = DramState::new(&cfg.dram, &cfg.flip, util::derive(seed, 0xD7A3))
            .map_err(|e| ConfigError::Invalid { path: "machine.dram".into(), msg: e.to_string() })?;
        Ok(Machine {
            cfg: cfg.clone(),
            dram,
            caches: CacheHierarchy::new(&cfg.caches, util::derive(seed, 0xCAC4E)),
            tlb: TlbHierarchy::new(&cfg.tlb, util::derive(seed, 0x71B)),
            psc: PagingStructureCaches::new(cfg.psc.pde, cfg.psc.pdpte, cfg.psc.pml4e),
            clock: 0,
            counters: MachineCounters::default(),
            frames: cfg.dram.frames(),
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn advance(&mut self, cycles: u64) {
        self.clock += cycles;
        self.dram.refresh_tick(self.clock);
    }

    pub fn counters(&self) -> MachineCounters {
        self.counters
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    fn dram_triple(&self) -> (u32, u32, u32) {
        (self.cfg.dram.t_row_hit, self.cfg.dram.t_row_miss, self.cfg.dram.t_row_conflict)
    }

    /// One physical read through the cache hierarchy issued at cycle `at`.
    fn mem_read(&mut self, pa: u64, at: u64, tag: AccessTag) -> (HitLevel, Option<RowOutcome>, u32) {
        let acc = self.caches.cache_access(PhysAddr(pa));
        let lat = &self.cfg.latency;
        match acc.level {
            HitLevel::L1 => (HitLevel::L1, None, lat.l1_hit),
            HitLevel::L2 => (HitLevel::L2, None, lat.l2_hit),
            HitLevel::Llc => (HitLevel::Llc, None, lat.llc_hit),
            HitLevel::Memory => {
                let llc = lat.llc_hit;
                self.counters.dram_accesses += 1;
                let d = self.dram.access(pa, at + llc as u64, tag);
                (HitLevel::Memory, Some(d.outcome), llc + d.latency)
            }
        }
    }

    /// Translation through TLB, PSCs and the walker, issued at cycle `at`.
    pub fn translate_at(&mut self, va: VirtAddr, root: u64, at: u64) -> Result<Translation, PageFault> {
        if !is_canonical(va.0) {
            return Err(PageFault::NonCanonical { va: va.0 });
        }
        let lat = self.cfg.latency.clone();
        let vpn = va.vpn();
        if let Some(pfn) = self.tlb.lookup_huge(va.0 >> 21 & ((1 << 27) - 1)) {
            let pa = pfn * PAGE_SIZE + (va.0 & ((2 << 20) - 1));
            return Ok(Translation {
                pa: PhysAddr(pa),
                trace: WalkTrace { tlb: TlbOutcome::Huge, psc: None, fetches: ArrayVec::new(), total_cycles: lat.tlb_l1_hit as u64 },
            });
        }
        if let Some((pfn, hit)) = self.tlb.tlb_lookup(vpn) {
            let (tlb, c) = match hit {
                TlbHit::L1 | TlbHit::Huge => (TlbOutcome::L1, lat.tlb_l1_hit),
                TlbHit::L2 => (TlbOutcome::L2, lat.tlb_l2_hit),
            };
            return Ok(Translation {
                pa: PhysAddr(pfn * PAGE_SIZE + (va.0 & 0xfff)),
                trace: WalkTrace { tlb, psc: None, fetches: ArrayVec::new(), total_cycles: c as u64 },
            });
        }
        self.counters.walks += 1;
        let idx = split_virtual(va).expect("canonical");
        let v = va.0 & ((1 << 48) - 1);
        let mut cycles = (lat.tlb_l2_hit + lat.walk_base + self.cfg.psc.lookup_cycles) as u64;
        let (psc, mut level, mut table) = if let Some(w) = self.psc.pde.lookup(0, v >> 21) {
            (PscHit::Pde, 1u8, self.psc.pde.payload(0, w))
        } else if let Some(w) = self.psc.pdpte.lookup(0, v >> 30) {
            (PscHit::Pdpte, 2, self.psc.pdpte.payload(0, w))
        } else if let Some(w) = self.psc.pml4e.lookup(0, v >> 39) {
            (PscHit::Pml4e, 3, self.psc.pml4e.payload(0, w))
        } else {
            (PscHit::None, 4, root)
        };
        let mut fetches = ArrayVec::new();
        loop {
            let entry_pa = table * PAGE_SIZE + idx.at(level) as u64 * 8;
            let (hit, dram, c) = self.mem_read(entry_pa, at + cycles, AccessTag::Walk(level));
            if dram.is_some() {
                self.counters.walk_dram_fetches += 1;
            }
            cycles += c as u64;
            fetches.push(PteFetch { level, entry_pa, hit, dram, cycles: c });
            let pte = self.dram.read_u64(entry_pa);
            if pte & PTE_P == 0 {
                return Err(PageFault::NotPresent { va: va.0, level });
            }
            let frame = pte_frame(pte);
            if frame >= self.frames {
                return Err(PageFault::BadFrame { va: va.0, level });
            }
            if level == 2 && pte & PTE_PS != 0 {
                let base = frame & !511;
                self.tlb.fill_huge(v >> 21, base);
                let pa = base * PAGE_SIZE + (va.0 & ((2 << 20) - 1));
                return Ok(Translation {
                    pa: PhysAddr(pa),
                    trace: WalkTrace { tlb: TlbOutcome::Miss, psc: Some(psc), fetches, total_cycles: cycles },
                });
            }
            if level == 1 {
                self.tlb.tlb_fill(vpn, frame);
                let pa = frame * PAGE_SIZE + (va.0 & 0xfff);
                return Ok(Translation {
                    pa: PhysAddr(pa),
                    trace: WalkTrace { tlb: TlbOutcome::Miss, psc: Some(psc), fetches, total_cycles: cycles },
                });
            }
            let key = v >> (12 + 9 * (level as u64 - 1));
            self.psc.fill(level, key, frame);
            table = frame;
            level -= 1;
        }
    }

    pub fn translate(&mut self, va: VirtAddr, root: u64) -> Result<Translation, PageFault> {
        let at = self.clock;
        self.translate_at(va, root, at)
    }

    /// Software walk of the tables in DRAM; touches no cache state.
    pub fn translate_check(&self, va: VirtAddr, root: u64) -> Result<PhysAddr, PageFault> {
        let idx = split_virtual(va).map_err(|_| PageFault::NonCanonical { va: va.0 })?;
        let mut table = root;
        for level in (1..=4u8).rev() {
            let pte = self.dram.read_u64(table * PAGE_SIZE + idx.at(level) as u64 * 8);
            if pte & PTE_P == 0 {
                return Err(PageFault::NotPresent { va: va.0, level });
            }
            let frame = pte_frame(pte);
            if frame >= self.frames {
                return Err(PageFault::BadFrame { va: va.0, level });
            }
            if level == 2 && pte & PTE_PS != 0 {
                return Ok(PhysAddr((frame & !511) * PAGE_SIZE + (va.0 & ((2 << 20) - 1))));
            }
            if level == 1 {
                return Ok(PhysAddr(frame * PAGE_SIZE + (va.0 & 0xfff)));
            }
            table = frame;
        }
        unreachable!()
    }

    /// Table frames visited by a software walk, root first.
    pub fn walk_frames(&self, va: VirtAddr, root: u64) -> Result<Vec<u64>, PageFault> {
        let idx = split_virtual(va).map_err(|_| PageFault::NonCanonical { va: va.0 })?;
        let mut out = vec![root];
        let mut table = root;
        for level in (2..=4u8).rev() {
            let pte = self.dram.read_u64(table * PAGE_SIZE + idx.at(level) as u64 * 8);
            if pte & PTE_P == 0 {
                return Err(PageFault::NotPresent { va: va.0, level });
            }
            if level == 2 && pte & PTE_PS != 0 {
                return Ok(out);
            }
            table = pte_frame(pte);
            out.push(table);
        }
        Ok(out)
    }

    /// Physical address of the L1PTE that maps `va`.
    pub fn l1pte_addr(&self, va: VirtAddr, root: u64) -> Result<PhysAddr, PageFault> {
        let frames = self.walk_frames(va, root)?;
        if frames.len() < 4 {
            return Err(PageFault::NotPresent { va: va.0, level: 1 });
        }
        let idx = split_virtual(va).expect("canonical");
        Ok(PhysAddr(frames[3] * PAGE_SIZE + idx.pt_idx as u64 * 8))
    }

    /// Timed load at cycle `at`, without advancing the clock.
    pub fn load_at(&mut self, va: VirtAddr, root: u64, at: u64) -> Result<LoadResult, PageFault> {
        let t = self.translate_at(va, root, at)?;
        let (level, _, c) = self.mem_read(t.pa.0, at + t.trace.total_cycles, AccessTag::Data);
        let cycles = t.trace.total_cycles + c as u64;
        Ok(LoadResult { pa: t.pa, trace: t.trace, data_level: level, cycles })
    }

    /// Serial load: the clock advances by the access latency.
    pub fn load(&mut self, va: VirtAddr, root: u64) -> Result<LoadResult, PageFault> {
        let r = self.load_at(va, root, self.clock)?;
        self.advance(r.cycles);
        Ok(r)
    }

    /// Independent loads issued together; returns the overlapped cost and
    /// advances the clock by it.
    pub fn load_batch(&mut self, vas: &[VirtAddr], root: u64) -> Result<u64, PageFault> {
        let w = self.cfg.latency.mlp_width as u64;
        let start = self.clock;
        let (mut sum, mut max) = (0u64, 0u64);
        for &va in vas {
            let r = self.load_at(va, root, start + sum / w)?;
            sum += r.cycles;
            max = max.max(r.cycles);
        }
        let cost = max.max(sum.div_ceil(w));
        self.advance(cost);
        Ok(cost)
    }

    /// Flushes TLB and paging-structure caches (address-space switch).
    pub fn flush_translations(&mut self) {
        self.tlb.flush();
        self.psc.flush();
    }

    pub fn invalidate_va(&mut self, va: VirtAddr) {
        self.tlb.invalidate(va.vpn());
        self.psc.invalidate(va.0 & ((1 << 48) - 1));
    }

    pub fn recompute(&self, trace: &WalkTrace) -> u64 {
        trace.recompute_cycles(&self.cfg.latency, self.cfg.psc.lookup_cycles, self.dram_triple())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::desk;

    /// Hand-built tables: root 100, pdpt 101, pd 102, l1pt 103..
    fn machine_with_tables() -> (Machine, u64) {
        let mut cfg = desk().machine;
        cfg.flip.density_per_mbit = 0.0;
        let mut m = Machine::new(&cfg, 1).unwrap();
        let root = 100;
        m.dram.write_u64(root * 4096, make_pte(101, PTE_USER));
        m.dram.write_u64(101 * 4096, make_pte(102, PTE_USER));
        for pd in 0..4u64 {
            m.dram.write_u64(102 * 4096 + pd * 8, make_pte(103 + pd, PTE_USER));
            for i in 0..512u64 {
                m.dram.write_u64((103 + pd) * 4096 + i * 8, make_pte(1000 + pd * 512 + i, PTE_USER));
            }
        }
        (m, root)
    }

    #[test]
    fn cold_walk_then_tlb_hit() {
        let (mut m, root) = machine_with_tables();
        let va = VirtAddr(0x20_3000);
        let t = m.translate(va, root).unwrap();
        assert_eq!(t.pa.0, (1000 + 512 + 3) * 4096);
        assert_eq!(t.trace.tlb, TlbOutcome::Miss);
        assert_eq!(t.trace.psc, Some(PscHit::None));
        assert_eq!(t.trace.fetches.len(), 4);
        assert!(t.trace.fetches.iter().all(|f| f.hit == HitLevel::Memory));
        let before = m.counters().dram_accesses;
        let t2 = m.translate(va, root).unwrap();
        assert_eq!(t2.trace.tlb, TlbOutcome::L1);
        assert!(t2.trace.fetches.is_empty() && t2.trace.psc.is_none());
        assert_eq!(m.counters().dram_accesses, before);
    }

    #[test]
    fn implicit_primitive_shape() {
        let (mut m, root) = machine_with_tables();
        let va = VirtAddr(0x40_5000);
        m.translate(va, root).unwrap();
        let (_, pdpte0, pml40) = m.psc.contents();
        m.tlb.invalidate(va.vpn());
        let l1pte = m.l1pte_addr(va, root).unwrap();
        m.caches.llc_evict_line(l1pte);
        let t = m.translate(va, root).unwrap();
        assert_eq!(t.trace.psc, Some(PscHit::Pde));
        assert_eq!(t.trace.fetches.len(), 1);
        assert_eq!(t.trace.fetches[0].level, 1);
        assert_eq!(t.trace.fetches[0].entry_pa, l1pte.0);
        assert_eq!(t.trace.fetches[0].hit, HitLevel::Memory);
        let (_, pdpte1, pml41) = m.psc.contents();
        assert_eq!((pdpte0, pml40), (pdpte1, pml41));
    }

    #[test]
    fn cycles_recomputable_from_trace() {
        let (mut m, root) = machine_with_tables();
        for i in 0..2000u64 {
            let va = VirtAddr((i * 7919 % 2048) << 12);
            let t = m.translate(va, root).unwrap();
            assert_eq!(m.recompute(&t.trace), t.trace.total_cycles);
            if i % 3 == 0 {
                m.caches.llc_evict_line(m.l1pte_addr(va, root).unwrap());
                m.tlb.invalidate(va.vpn());
            }
        }
    }

    #[test]
    fn translate_check_agrees_and_faults() {
        let (mut m, root) = machine_with_tables();
        for i in 0..2048u64 {
            let va = VirtAddr(i << 12 | (i % 4096));
            let a = m.translate(va, root).unwrap().pa;
            assert_eq!(a, m.translate_check(va, root).unwrap());
        }
        assert!(matches!(m.translate_check(VirtAddr(1 << 30), root), Err(PageFault::NotPresent { level: 3, .. })));
        assert!(matches!(m.translate(VirtAddr(1 << 30), root), Err(PageFault::NotPresent { level: 3, .. })));
        // remap is visible to the software walk at once
        m.dram.write_u64(103 * 4096, make_pte(7777, PTE_USER));
        assert_eq!(m.translate_check(VirtAddr(0), root).unwrap().0, 7777 * 4096);
    }

    #[test]
    fn huge_page_leaf() {
        let (mut m, root) = machine_with_tables();
        m.dram.write_u64(102 * 4096 + 8 * 8, make_pte(4096, PTE_USER | PTE_PS));
        let va = VirtAddr((8 << 21) + 0x12345);
        let t = m.translate(va, root).unwrap();
        assert_eq!(t.pa.0, 4096 * 4096 + 0x12345);
        assert_eq!(t.trace.fetches.len(), 3);
        assert_eq!(m.translate(va, root).unwrap().trace.tlb, TlbOutcome::Huge);
        assert_eq!(m.translate_check(va, root).unwrap(), t.pa);
    }

    #[test]
    fn batch_overlaps_loads() {
        let (mut m, root) = machine_with_tables();
        let vas: Vec<VirtAddr> = (0..16u64).map(|i| VirtAddr(i << 12)).collect();
        let mut serial = m.clone();
        let t0 = serial.clock();
        for &v in &vas {
            serial.load(v, root).unwrap();
        }
        let serial_cost = serial.clock() - t0;
        let cost = m.load_batch(&vas, root).unwrap();
        assert!(cost < serial_cost);
    }
}
