//! Simulated kernel: frame allocation, page tables, processes and creds.

pub mod buddy;
pub mod cred;
pub mod defense;
pub mod syscall;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use buddy::BuddyAllocator;
pub use cred::{Cred, CRED_BYTES, CRED_MAGIC};
pub use defense::{Placement, Purpose};
pub use syscall::{HardwareInfo, MapKind, ProcessHandle, Syscalls};

use crate::address_map::{split_virtual, VirtAddr};
use crate::config::{MachineConfig, HUGE_PAGE_SIZE, PAGE_SIZE};
use crate::error::{ConfigError, OsError, PageFault};
use crate::mmu::{make_pte, pte_frame, Machine, PTE_P, PTE_PS, PTE_RW, PTE_US, PTE_USER};
use crate::util;

pub const ROOT_UID: u32 = 0;
pub const ATTACKER_UID: u32 = 1000;
pub const BACKGROUND_UID: u32 = 1001;
/// Contents of the sentinel frame, repeated.
pub const SENTINEL_MAGIC: u64 = 0x5345_4e54_494e_454c;
/// First address handed out when no hint is given.
const MMAP_BASE: u64 = 0x10_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Owner {
    Free,
    Boot,
    Table { pid: u32, level: u8 },
    Cred,
    User { pid: u32 },
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocEvent {
    pub seq: u64,
    pub cycle: u64,
    pub pid: u32,
    pub frame: u64,
    pub order: u8,
    pub purpose: Purpose,
    pub zone: u8,
}

pub fn alloc_log_csv(log: &[AllocEvent]) -> String {
    let mut s = String::from("seq,cycle,pid,frame,order,purpose,zone\n");
    for e in log {
        s.push_str(&format!("{},{},{},{},{},{},{}\n", e.seq, e.cycle, e.pid, e.frame, e.order, e.purpose.name(), e.zone));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    Anon,
    Huge,
    Shared { frame: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub start: u64,
    pub len: u64,
    pub kind: RegionKind,
}

#[derive(Clone, Debug)]
pub struct AddressSpace {
    pub root: u64,
    regions: BTreeMap<u64, Region>,
    next_va: u64,
}

impl AddressSpace {
    pub fn region_of(&self, va: u64) -> Option<&Region> {
        self.regions.range(..=va).next_back().map(|(_, r)| r).filter(|r| va < r.start + r.len)
    }

    fn overlaps(&self, start: u64, len: u64) -> bool {
        if let Some((_, r)) = self.regions.range(..start + len).next_back() {
            return r.start + r.len > start;
        }
        false
    }

    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.regions.values()
    }
}

#[derive(Clone, Debug)]
pub struct Process {
    pub pid: u32,
    pub uid: u32,
    pub cred_pa: u64,
    pub space: Option<AddressSpace>,
}

#[derive(Clone, Debug)]
pub struct System {
    pub machine: Machine,
    cfg: MachineConfig,
    placement: Placement,
    owners: Vec<Owner>,
    procs: Vec<Process>,
    alloc_log: Vec<AllocEvent>,
    cred_slab: Option<(u64, u32)>,
    noise: ChaCha8Rng,
    bg_rng: ChaCha8Rng,
    active: u32,
    log_allocs: bool,
}

impl System {
    pub fn new(cfg: &MachineConfig, seed: u64) -> Result<Self, ConfigError> {
        let machine = Machine::new(cfg, seed)?;
        let placement = Placement::new(&cfg.os, machine.dram.mapper(), util::derive(seed, 0x05));
        let frames = machine.frames();
        let mut owners = vec![Owner::Free; frames as usize];
        for o in owners.iter_mut().take(cfg.os.boot_kernel_frames as usize) {
            *o = Owner::Boot;
        }
        let mut sys = System {
            machine,
            cfg: cfg.clone(),
            placement,
            owners,
            procs: Vec::new(),
            alloc_log: Vec::new(),
            cred_slab: None,
            noise: util::rng(seed, 0x0004_015E),
            bg_rng: util::rng(seed, 0xB6),
            active: 0,
            log_allocs: true,
        };
        let pat: Vec<u8> = SENTINEL_MAGIC.to_le_bytes().iter().copied().cycle().take(PAGE_SIZE as usize).collect();
        sys.machine.dram.fill_frame(cfg.os.sentinel_frame, pat.as_slice().try_into().expect("page"));
        // pid 1: root-owned init without an address space
        sys.new_process(ROOT_UID, false).map_err(|e| ConfigError::Invalid { path: "machine.os".into(), msg: e.to_string() })?;
        Ok(sys)
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn owner(&self, frame: u64) -> Owner {
        self.owners.get(frame as usize).copied().unwrap_or(Owner::Free)
    }

    pub fn alloc_log(&self) -> &[AllocEvent] {
        &self.alloc_log
    }

    pub fn set_alloc_logging(&mut self, on: bool) {
        self.log_allocs = on;
    }

    pub fn process(&self, pid: u32) -> Option<&Process> {
        pid.checked_sub(1).and_then(|i| self.procs.get(i as usize))
    }

    fn process_mut(&mut self, pid: u32) -> Result<&mut Process, OsError> {
        pid.checked_sub(1).and_then(|i| self.procs.get_mut(i as usize)).ok_or(OsError::NoProcess(pid))
    }

    pub fn process_count(&self) -> usize {
        self.procs.len()
    }

    pub fn root_of(&self, pid: u32) -> Result<u64, OsError> {
        self.process(pid).and_then(|p| p.space.as_ref()).map(|s| s.root).ok_or(OsError::NoProcess(pid))
    }

    pub fn space(&self, pid: u32) -> Option<&AddressSpace> {
        self.process(pid).and_then(|p| p.space.as_ref())
    }

    /// Frame allocation with ownership bookkeeping. Allocations made for the
    /// attacker may be interleaved with background activity.
    fn alloc(&mut self, purpose: Purpose, pid: u32, uid: u32) -> Result<u64, OsError> {
        let (f, zone) = self.placement.alloc(purpose, uid, &mut self.machine.dram)?;
        self.record(f, 0, purpose, pid, zone);
        self.machine.dram.zero_frame(f);
        if uid == ATTACKER_UID {
            self.background_activity()?;
        }
        Ok(f)
    }

    fn background_activity(&mut self) -> Result<(), OsError> {
        let rate = self.cfg.os.background_allocs;
        if rate <= 0.0 {
            return Ok(());
        }
        let n = rate.floor() as u32 + u32::from(self.bg_rng.random::<f64>() < rate.fract());
        for _ in 0..n {
            let (f, zone) = self.placement.alloc(Purpose::Background, BACKGROUND_UID, &mut self.machine.dram)?;
            self.record(f, 0, Purpose::Background, 0, zone);
        }
        Ok(())
    }

    fn record(&mut self, frame: u64, order: u8, purpose: Purpose, pid: u32, zone: u8) {
        let owner = match purpose {
            Purpose::PageTable(level) => Owner::Table { pid, level },
            Purpose::Cred => Owner::Cred,
            Purpose::User => Owner::User { pid },
            Purpose::Background => Owner::Background,
        };
        for f in frame..frame + (1 << order) {
            self.owners[f as usize] = owner;
        }
        if self.log_allocs {
            let seq = self.alloc_log.len() as u64;
            self.alloc_log.push(AllocEvent { seq, cycle: self.machine.clock(), pid, frame, order, purpose, zone });
        }
    }

    fn free_frame(&mut self, frame: u64, order: u8) {
        for f in frame..frame + (1 << order) {
            self.owners[f as usize] = Owner::Free;
        }
        self.placement.free(frame, order);
    }

    fn write_cred(&mut self, pid: u32, uid: u32) -> Result<u64, OsError> {
        let per = self.cfg.os.creds_per_frame;
        let (frame, slot) = match self.cred_slab {
            Some((f, s)) if s < per => (f, s),
            _ => (self.alloc(Purpose::Cred, pid, uid)?, 0),
        };
        self.cred_slab = Some((frame, slot + 1));
        let pa = frame * PAGE_SIZE + slot as u64 * CRED_BYTES;
        self.machine.dram.write_phys(crate::address_map::PhysAddr(pa), &Cred::user(uid, pid).encode());
        Ok(pa)
    }

    /// Creates a process with its cred; user processes also get an empty
    /// address space.
    pub fn new_process(&mut self, uid: u32, with_space: bool) -> Result<u32, OsError> {
        let pid = self.procs.len() as u32 + 1;
        let cred_pa = self.write_cred(pid, uid)?;
        self.procs.push(Process { pid, uid, cred_pa, space: None });
        if with_space {
            let root = self.alloc(Purpose::PageTable(4), pid, uid)?;
            self.process_mut(pid)?.space = Some(AddressSpace { root, regions: BTreeMap::new(), next_va: MMAP_BASE });
        }
        Ok(pid)
    }

    pub fn spawn_attacker(&mut self) -> Result<u32, OsError> {
        self.new_process(ATTACKER_UID, true)
    }

    /// Syscall view of a process.
    pub fn handle(&mut self, pid: u32) -> ProcessHandle<'_> {
        ProcessHandle::new(self, pid)
    }

    /// True when the cred of `pid`, as stored in DRAM, grants root.
    pub fn privilege_check(&self, pid: u32) -> bool {
        let Some(p) = self.process(pid) else { return false };
        let mut b = [0u8; CRED_BYTES as usize];
        self.machine.dram.read_phys(crate::address_map::PhysAddr(p.cred_pa), &mut b);
        Cred::decode(&b).is_some_and(|c| c.uid == ROOT_UID)
    }

    /// Makes `pid` the running process; switching flushes translations.
    pub(crate) fn activate(&mut self, pid: u32) {
        if self.active != pid {
            self.machine.flush_translations();
            self.active = pid;
        }
    }

    fn uid_of(&self, pid: u32) -> u32 {
        self.process(pid).map_or(ROOT_UID, |p| p.uid)
    }

    /// Returns the table at `level` covering `va`, creating missing levels.
    fn ensure_table(&mut self, pid: u32, va: u64, level: u8) -> Result<u64, OsError> {
        let root = self.root_of(pid)?;
        let uid = self.uid_of(pid);
        let idx = split_virtual(VirtAddr(va)).map_err(|_| OsError::Fault(PageFault::NonCanonical { va }))?;
        let mut table = root;
        for l in (level + 1..=4).rev() {
            let epa = table * PAGE_SIZE + idx.at(l) as u64 * 8;
            let e = self.machine.dram.read_u64(epa);
            table = if e & PTE_P != 0 {
                if l == 2 && e & PTE_PS != 0 {
                    return Err(OsError::Overlap(va, PAGE_SIZE));
                }
                pte_frame(e)
            } else {
                let t = self.alloc(Purpose::PageTable(l - 1), pid, uid)?;
                self.machine.dram.write_u64(epa, make_pte(t, PTE_P | PTE_RW | PTE_US));
                t
            };
        }
        Ok(table)
    }

    fn l1_entry_pa(&mut self, pid: u32, va: u64) -> Result<u64, OsError> {
        let t = self.ensure_table(pid, va, 1)?;
        Ok(t * PAGE_SIZE + ((va >> 12) & 511) * 8)
    }

    /// Frames mapped under `kind` for one 4 KiB page.
    fn back_page(&mut self, pid: u32, region: Region, va: u64) -> Result<(), OsError> {
        let uid = self.uid_of(pid);
        match region.kind {
            RegionKind::Anon => {
                let f = self.alloc(Purpose::User, pid, uid)?;
                let epa = self.l1_entry_pa(pid, va)?;
                self.machine.dram.write_u64(epa, make_pte(f, PTE_USER));
            }
            RegionKind::Shared { frame } => {
                let epa = self.l1_entry_pa(pid, va)?;
                self.machine.dram.write_u64(epa, make_pte(frame, PTE_USER));
            }
            RegionKind::Huge => {
                let base = va & !(HUGE_PAGE_SIZE - 1);
                let pd = self.ensure_table(pid, base, 2)?;
                let (f, zone) = self.placement.alloc_block(9, uid)?;
                self.record(f, 9, Purpose::User, pid, zone);
                for g in f..f + 512 {
                    self.machine.dram.zero_frame(g);
                }
                let epa = pd * PAGE_SIZE + ((base >> 21) & 511) * 8;
                self.machine.dram.write_u64(epa, make_pte(f, PTE_USER | PTE_PS));
            }
        }
        Ok(())
    }

    /// Populates `[start, start+len)` of a region. Full 2 MiB chunks of a
    /// shared mapping get their leaf table written in one pass.
    fn populate(&mut self, pid: u32, region: Region, start: u64, len: u64) -> Result<u64, OsError> {
        let mut va = start;
        let end = start + len;
        let mut pages = 0;
        while va < end {
            match region.kind {
                RegionKind::Shared { frame } if va.is_multiple_of(HUGE_PAGE_SIZE) && va + HUGE_PAGE_SIZE <= end => {
                    let t = self.ensure_table(pid, va, 1)?;
                    let pte = make_pte(frame, PTE_USER).to_le_bytes();
                    let pat: Vec<u8> = pte.iter().copied().cycle().take(PAGE_SIZE as usize).collect();
                    self.machine.dram.fill_frame(t, pat.as_slice().try_into().expect("page"));
                    va += HUGE_PAGE_SIZE;
                    pages += 512;
                }
                RegionKind::Huge => {
                    self.back_page(pid, region, va)?;
                    va += HUGE_PAGE_SIZE;
                    pages += 512;
                }
                _ => {
                    self.back_page(pid, region, va)?;
                    va += PAGE_SIZE;
                    pages += 1;
                }
            }
        }
        Ok(pages)
    }

    /// Maps a new region. Returns its start address and the populated page
    /// count.
    pub fn mmap(&mut self, pid: u32, hint: Option<u64>, len: u64, kind: MapKind, populate: bool) -> Result<(u64, u64), OsError> {
        let huge = matches!(kind, MapKind::Huge);
        let unit = if huge { HUGE_PAGE_SIZE } else { PAGE_SIZE };
        if len == 0 {
            return Err(OsError::Invalid("zero-length mapping"));
        }
        let len = len.div_ceil(unit) * unit;
        let rkind = match kind {
            MapKind::Anon => RegionKind::Anon,
            MapKind::Huge => RegionKind::Huge,
            MapKind::Alias { source } => {
                let root = self.root_of(pid)?;
                let pa = self.machine.translate_check(VirtAddr(source), root).map_err(OsError::Fault)?;
                let frame = pa.0 / PAGE_SIZE;
                if self.owner(frame) != (Owner::User { pid }) {
                    return Err(OsError::Invalid("alias source is not a private user page"));
                }
                RegionKind::Shared { frame }
            }
        };
        let space = self.process(pid).and_then(|p| p.space.as_ref()).ok_or(OsError::NoProcess(pid))?;
        let start = match hint {
            Some(h) => {
                if h % unit != 0 {
                    return Err(OsError::Invalid("unaligned hint"));
                }
                h
            }
            None => {
                let mut s = space.next_va.div_ceil(HUGE_PAGE_SIZE) * HUGE_PAGE_SIZE;
                while space.overlaps(s, len) {
                    s += HUGE_PAGE_SIZE;
                }
                s
            }
        };
        if !crate::address_map::is_canonical(start) || !crate::address_map::is_canonical(start + len - 1) || start + len > 1 << 47 {
            return Err(OsError::Invalid("address outside the user half"));
        }
        if space.overlaps(start, len) {
            return Err(OsError::Overlap(start, len));
        }
        let region = Region { start, len, kind: rkind };
        {
            let space = self.process_mut(pid)?.space.as_mut().expect("space");
            space.regions.insert(start, region);
            if hint.is_none() {
                space.next_va = start + len;
            }
        }
        let pages = if populate { self.populate(pid, region, start, len)? } else { 0 };
        Ok((start, pages))
    }

    /// Unmaps every region inside `[start, start+len)`.
    pub fn munmap(&mut self, pid: u32, start: u64, len: u64) -> Result<u64, OsError> {
        let root = self.root_of(pid)?;
        let space = self.space(pid).ok_or(OsError::NoProcess(pid))?;
        let victims: Vec<Region> =
            space.regions.range(start..start + len).map(|(_, r)| *r).filter(|r| r.start + r.len <= start + len).collect();
        if victims.is_empty() {
            return Err(OsError::Unmapped(start));
        }
        let mut pages = 0;
        let mut chunks = Vec::new();
        for r in victims {
            let step = if r.kind == RegionKind::Huge { HUGE_PAGE_SIZE } else { PAGE_SIZE };
            let mut va = r.start;
            while va < r.start + r.len {
                let frames = self.machine.walk_frames(VirtAddr(va), root);
                if let Ok(fr) = frames {
                    let idx = split_virtual(VirtAddr(va)).expect("canonical");
                    let (table, level) = if r.kind == RegionKind::Huge {
                        (fr[2], 2)
                    } else if fr.len() == 4 {
                        (fr[3], 1)
                    } else {
                        (u64::MAX, 0)
                    };
                    if level > 0 {
                        let epa = table * PAGE_SIZE + idx.at(level) as u64 * 8;
                        let e = self.machine.dram.read_u64(epa);
                        if e & PTE_P != 0 {
                            let f = pte_frame(e);
                            self.machine.dram.write_u64(epa, 0);
                            match r.kind {
                                RegionKind::Anon if self.owner(f) == (Owner::User { pid }) => self.free_frame(f, 0),
                                RegionKind::Huge => self.free_frame(f & !511, 9),
                                _ => {}
                            }
                            pages += 1;
                        }
                    }
                }
                self.machine.invalidate_va(VirtAddr(va));
                va += step;
            }
            self.process_mut(pid)?.space.as_mut().expect("space").regions.remove(&r.start);
            if r.kind != RegionKind::Huge {
                let mut base = r.start & !(HUGE_PAGE_SIZE - 1);
                while base < r.start + r.len {
                    chunks.push(base);
                    base += HUGE_PAGE_SIZE;
                }
            }
        }
        chunks.dedup();
        for base in chunks {
            self.release_leaf_table(pid, root, base);
        }
        Ok(pages)
    }

    /// Frees the leaf table behind the 2 MiB chunk at `base` once no region
    /// covers the chunk and the table holds no entries.
    fn release_leaf_table(&mut self, pid: u32, root: u64, base: u64) {
        if self.space(pid).is_some_and(|s| s.overlaps(base, HUGE_PAGE_SIZE)) {
            return;
        }
        let Ok(fr) = self.machine.walk_frames(VirtAddr(base), root) else { return };
        if fr.len() != 4 {
            return;
        }
        let (dir, table) = (fr[2], fr[3]);
        let empty = (0..512).all(|i| self.machine.dram.read_u64(table * PAGE_SIZE + i * 8) == 0);
        if !empty || self.owner(table) != (Owner::Table { pid, level: 1 }) {
            return;
        }
        let idx = split_virtual(VirtAddr(base)).expect("canonical");
        self.machine.dram.write_u64(dir * PAGE_SIZE + idx.at(2) as u64 * 8, 0);
        self.free_frame(table, 0);
        self.machine.invalidate_va(VirtAddr(base));
    }

    /// Resolves a not-present fault inside a mapped region by populating
    /// the page. Returns false when the address is not mapped.
    pub(crate) fn handle_fault(&mut self, pid: u32, va: u64) -> Result<bool, OsError> {
        let Some(region) = self.space(pid).and_then(|s| s.region_of(va)).copied() else {
            return Ok(false);
        };
        let page = if region.kind == RegionKind::Huge { va & !(HUGE_PAGE_SIZE - 1) } else { va & !(PAGE_SIZE - 1) };
        self.back_page(pid, region, page)?;
        let cost = self.cfg.os.populate_cycles_per_page;
        self.machine.advance(cost);
        Ok(true)
    }

    /// Creates `n` idle child processes of `pid`; each gets a cred.
    pub fn spawn_children(&mut self, pid: u32, n: u32) -> Result<Vec<u32>, OsError> {
        let uid = self.uid_of(pid);
        (0..n).map(|_| self.new_process(uid, false)).collect()
    }

    /// Every present leaf entry of `pid` maps a frame the process owns, or
    /// the frame backing one of its shared regions.
    pub fn check_confinement(&self, pid: u32) -> Result<(), (u64, u64)> {
        let Some(space) = self.space(pid) else { return Ok(()) };
        for r in space.regions() {
            let step = if r.kind == RegionKind::Huge { HUGE_PAGE_SIZE } else { PAGE_SIZE };
            let mut va = r.start;
            while va < r.start + r.len {
                if let Ok(pa) = self.machine.translate_check(VirtAddr(va), space.root) {
                    let f = pa.0 / PAGE_SIZE;
                    if self.owner(f) != (Owner::User { pid }) {
                        return Err((va, f));
                    }
                }
                va += step;
            }
        }
        Ok(())
    }

    /// Frames holding page tables of `pid` at `level`.
    pub fn table_frames(&self, pid: u32, level: u8) -> Vec<u64> {
        self.owners.iter().enumerate().filter(|(_, o)| **o == Owner::Table { pid, level }).map(|(f, _)| f as u64).collect()
    }

    pub(crate) fn noise(&mut self, latency: u64) -> u64 {
        let n = &self.cfg.noise;
        let mut l = latency;
        if n.amplitude > 0 {
            l += self.noise.random_range(0..n.amplitude as u64);
        }
        if n.spike_prob > 0.0 && self.noise.random::<f64>() < n.spike_prob {
            l += n.spike_cycles as u64;
        }
        l
    }

    /// Clone with an independent noise stream, for what-if branches.
    pub fn fork(&self, label: u64) -> System {
        let mut s = self.clone();
        s.noise = ChaCha8Rng::seed_from_u64(util::derive(label, 0xF0));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{desk, DefenseKind};

    fn sys() -> (System, u32) {
        let mut s = System::new(&desk().machine, 3).unwrap();
        let pid = s.spawn_attacker().unwrap();
        (s, pid)
    }

    #[test]
    fn mapping_2mib_window_adds_one_leaf_table() {
        let (mut s, pid) = sys();
        let (a, _) = s.mmap(pid, None, PAGE_SIZE, MapKind::Anon, true).unwrap();
        let before = s.table_frames(pid, 1).len();
        let hint = 0x20_0000_0000;
        s.mmap(pid, Some(hint), HUGE_PAGE_SIZE, MapKind::Alias { source: a }, true).unwrap();
        assert_eq!(s.table_frames(pid, 1).len(), before + 1);
        let root = s.root_of(pid).unwrap();
        let u = s.machine.translate_check(VirtAddr(a), root).unwrap();
        for i in [0u64, 1, 511] {
            let pa = s.machine.translate_check(VirtAddr(hint + i * PAGE_SIZE + 8), root).unwrap();
            assert_eq!(pa.0, u.0 + 8);
        }
    }

    #[test]
    fn overlap_rejected_and_unmap_faults() {
        let (mut s, pid) = sys();
        let (a, _) = s.mmap(pid, Some(0x40_0000_0000), 8 * PAGE_SIZE, MapKind::Anon, true).unwrap();
        assert_eq!(s.mmap(pid, Some(a + PAGE_SIZE), PAGE_SIZE, MapKind::Anon, true), Err(OsError::Overlap(a + PAGE_SIZE, PAGE_SIZE)));
        let root = s.root_of(pid).unwrap();
        let f = s.machine.translate_check(VirtAddr(a), root).unwrap().0 / PAGE_SIZE;
        assert_eq!(s.owner(f), Owner::User { pid });
        s.munmap(pid, a, 8 * PAGE_SIZE).unwrap();
        assert!(s.machine.translate_check(VirtAddr(a), root).is_err());
        assert_eq!(s.owner(f), Owner::Free);
    }

    #[test]
    fn confinement_holds_after_setup() {
        let (mut s, pid) = sys();
        let (a, _) = s.mmap(pid, None, 64 * PAGE_SIZE, MapKind::Anon, true).unwrap();
        s.mmap(pid, None, 4 * HUGE_PAGE_SIZE, MapKind::Alias { source: a }, true).unwrap();
        s.mmap(pid, None, HUGE_PAGE_SIZE, MapKind::Huge, true).unwrap();
        assert_eq!(s.check_confinement(pid), Ok(()));
    }

    #[test]
    fn privilege_check_reads_dram() {
        let (mut s, pid) = sys();
        assert!(!s.privilege_check(pid));
        assert!(s.privilege_check(1));
        let pa = s.process(pid).unwrap().cred_pa;
        s.machine.dram.write_phys(crate::address_map::PhysAddr(pa + cred::UID_OFFSET), &[0u8; 4]);
        assert!(s.privilege_check(pid));
    }

    #[test]
    fn creds_pack_per_frame() {
        let (mut s, pid) = sys();
        let kids = s.spawn_children(pid, 40).unwrap();
        let frames: std::collections::BTreeSet<u64> = kids.iter().map(|&k| s.process(k).unwrap().cred_pa / PAGE_SIZE).collect();
        assert!(frames.len() <= 4);
        for f in frames {
            assert_eq!(s.owner(f), Owner::Cred);
        }
    }

    #[test]
    fn catt_tables_and_user_in_separate_rows() {
        let mut m = desk().machine;
        m.os.defense.kind = DefenseKind::Catt;
        let mut s = System::new(&m, 1).unwrap();
        let pid = s.spawn_attacker().unwrap();
        let (a, _) = s.mmap(pid, None, PAGE_SIZE, MapKind::Anon, true).unwrap();
        s.mmap(pid, None, 16 * HUGE_PAGE_SIZE, MapKind::Alias { source: a }, true).unwrap();
        let kr = m.os.defense.kernel_rows;
        let row = |f: u64| s.machine.dram.mapper().locate(f * PAGE_SIZE).row;
        for t in s.table_frames(pid, 1) {
            assert!(row(t) < kr);
        }
        let root = s.root_of(pid).unwrap();
        let u = s.machine.translate_check(VirtAddr(a), root).unwrap().0 / PAGE_SIZE;
        assert!(row(u) > kr);
    }

    #[test]
    fn lazy_region_faults_in() {
        let (mut s, pid) = sys();
        let (a, n) = s.mmap(pid, None, 4 * PAGE_SIZE, MapKind::Anon, false).unwrap();
        assert_eq!(n, 0);
        let root = s.root_of(pid).unwrap();
        assert!(s.machine.translate_check(VirtAddr(a), root).is_err());
        assert!(s.handle_fault(pid, a + 10).unwrap());
        assert!(s.machine.translate_check(VirtAddr(a), root).is_ok());
        assert!(!s.handle_fault(pid, 0x1000).unwrap());
    }

    #[test]
    fn alloc_log_csv_header() {
        let (s, _) = sys();
        let csv = alloc_log_csv(s.alloc_log());
        assert!(csv.starts_with("seq,cycle,pid,frame,order,purpose,zone\n"));
        assert!(csv.lines().count() >= 3);
    }
}
