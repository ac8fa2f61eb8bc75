//! The unprivileged interface a process sees.
//!
//! Everything an attacker learns comes through here: mappings, memory
//! contents read through its own virtual addresses, and noisy timings.

use serde::{Deserialize, Serialize};

use super::System;
use crate::address_map::VirtAddr;
use crate::config::{MachineConfig, TlbConfig, HUGE_PAGE_SIZE, PAGE_SIZE};
use crate::error::{OsError, PageFault};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Anon,
    /// One 2 MiB page.
    Huge,
    /// Every page maps the frame currently behind `source`.
    Alias {
        source: u64,
    },
}

/// Public hardware facts: datasheet geometry, no mapping functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub page_size: u64,
    pub huge_page_size: u64,
    pub line_bytes: u64,
    pub llc_bytes: u64,
    pub llc_ways: u32,
    pub llc_slices: u32,
    pub l1d_bytes: u64,
    pub l2_bytes: u64,
    pub tlb: TlbConfig,
    pub dram_bytes: u64,
    pub row_bytes: u64,
    pub total_banks: u32,
    /// Bytes covered by one row index across all banks.
    pub rows_size: u64,
    /// Nominal refresh interval in cycles.
    pub refresh_cycles: u64,
    /// Kernel frame used to verify a page-table takeover.
    pub kernel_sentinel_pfn: u64,
}

impl HardwareInfo {
    pub fn from_config(m: &MachineConfig) -> Self {
        let c = &m.caches;
        HardwareInfo {
            page_size: PAGE_SIZE,
            huge_page_size: HUGE_PAGE_SIZE,
            line_bytes: c.line_bytes,
            llc_bytes: c.llc_bytes(),
            llc_ways: c.llc.ways,
            llc_slices: c.llc_slices,
            l1d_bytes: c.l1.sets as u64 * c.l1.ways as u64 * c.line_bytes,
            l2_bytes: c.l2.sets as u64 * c.l2.ways as u64 * c.line_bytes,
            tlb: m.tlb.clone(),
            dram_bytes: m.dram.dram_bytes(),
            row_bytes: m.dram.row_bytes,
            total_banks: m.dram.total_banks(),
            rows_size: m.dram.rows_size(),
            refresh_cycles: m.flip.refresh_epoch_cycles,
            kernel_sentinel_pfn: m.os.sentinel_frame,
        }
    }

    pub fn tlb_entries(&self) -> u64 {
        let t = &self.tlb;
        (t.l1d.sets * t.l1d.ways + t.l2s.sets * t.l2s.ways) as u64
    }
}

pub trait Syscalls {
    fn hw(&self) -> HardwareInfo;
    fn getpid(&self) -> u32;
    fn getuid(&self) -> u32;
    /// Maps `len` bytes; returns the start address.
    fn mmap(&mut self, hint: Option<u64>, len: u64, kind: MapKind, populate: bool) -> Result<u64, OsError>;
    fn munmap(&mut self, va: u64, len: u64) -> Result<(), OsError>;
    /// Forks `n` idle children.
    fn spawn(&mut self, n: u32) -> Result<(), OsError>;
    fn read_u64(&mut self, va: u64) -> Result<u64, OsError>;
    fn write_u64(&mut self, va: u64, v: u64) -> Result<(), OsError>;
    fn read_page(&mut self, va: u64, buf: &mut [u8]) -> Result<(), OsError>;
    /// One serial load bracketed by timestamp reads; returns its latency.
    fn timed_read(&mut self, va: u64) -> Result<u64, OsError>;
    /// Independent loads issued back to back; returns the elapsed cycles.
    fn touch_batch(&mut self, vas: &[u64]) -> Result<u64, OsError>;
    fn spin(&mut self, cycles: u64);
    fn now(&self) -> u64;
}

pub struct ProcessHandle<'a> {
    sys: &'a mut System,
    pid: u32,
}

impl<'a> ProcessHandle<'a> {
    pub(crate) fn new(sys: &'a mut System, pid: u32) -> Self {
        sys.activate(pid);
        ProcessHandle { sys, pid }
    }

    pub fn system(&mut self) -> &mut System {
        self.sys
    }

    fn root(&self) -> Result<u64, OsError> {
        self.sys.root_of(self.pid)
    }

    fn charge_syscall(&mut self, pages: u64) {
        let os = &self.sys.cfg.os;
        let c = os.syscall_cycles + pages * os.populate_cycles_per_page;
        self.sys.machine.advance(c);
    }

    /// Software-resolves `va`, populating lazily mapped pages first.
    fn resolve(&mut self, va: u64) -> Result<u64, OsError> {
        let root = self.root()?;
        match self.sys.machine.translate_check(VirtAddr(va), root) {
            Ok(pa) => Ok(pa.0),
            Err(PageFault::NotPresent { .. }) => {
                if self.sys.handle_fault(self.pid, va)? {
                    self.sys.machine.translate_check(VirtAddr(va), root).map(|p| p.0).map_err(OsError::Fault)
                } else {
                    Err(OsError::Fault(PageFault::NotPresent { va, level: 1 }))
                }
            }
            Err(e) => Err(OsError::Fault(e)),
        }
    }

    /// Timed load; the hardware walk is authoritative for the address.
    fn load(&mut self, va: u64) -> Result<(u64, u64), OsError> {
        self.resolve(va)?;
        let root = self.root()?;
        let r = self.sys.machine.load(VirtAddr(va), root)?;
        Ok((r.pa.0, r.cycles))
    }
}

impl Syscalls for ProcessHandle<'_> {
    fn hw(&self) -> HardwareInfo {
        HardwareInfo::from_config(&self.sys.cfg)
    }

    fn getpid(&self) -> u32 {
        self.pid
    }

    fn getuid(&self) -> u32 {
        self.sys.uid_of(self.pid)
    }

    fn mmap(&mut self, hint: Option<u64>, len: u64, kind: MapKind, populate: bool) -> Result<u64, OsError> {
        let (va, pages) = self.sys.mmap(self.pid, hint, len, kind, populate)?;
        self.charge_syscall(pages);
        Ok(va)
    }

    fn munmap(&mut self, va: u64, len: u64) -> Result<(), OsError> {
        let pages = self.sys.munmap(self.pid, va, len)?;
        self.charge_syscall(pages / 4);
        Ok(())
    }

    fn spawn(&mut self, n: u32) -> Result<(), OsError> {
        self.sys.spawn_children(self.pid, n)?;
        let c = self.sys.cfg.os.syscall_cycles * n as u64;
        self.sys.machine.advance(c);
        self.sys.activate(self.pid);
        Ok(())
    }

    fn read_u64(&mut self, va: u64) -> Result<u64, OsError> {
        let (pa, _) = self.load(va)?;
        Ok(self.sys.machine.dram.read_u64(pa))
    }

    fn write_u64(&mut self, va: u64, v: u64) -> Result<(), OsError> {
        let (pa, _) = self.load(va)?;
        self.sys.machine.dram.write_u64(pa, v);
        Ok(())
    }

    fn read_page(&mut self, va: u64, buf: &mut [u8]) -> Result<(), OsError> {
        let base = va & !(PAGE_SIZE - 1);
        let (pa, _) = self.load(base)?;
        let n = buf.len().min(PAGE_SIZE as usize);
        self.sys.machine.dram.read_phys(crate::address_map::PhysAddr(pa), &mut buf[..n]);
        // streaming the remaining lines
        let lines = (n as u64).div_ceil(self.sys.cfg.caches.line_bytes);
        let c = lines * self.sys.cfg.latency.l1_hit as u64;
        self.sys.machine.advance(c);
        Ok(())
    }

    fn timed_read(&mut self, va: u64) -> Result<u64, OsError> {
        let (_, c) = self.load(va)?;
        Ok(self.sys.noise(c))
    }

    fn touch_batch(&mut self, vas: &[u64]) -> Result<u64, OsError> {
        for &va in vas {
            self.resolve(va)?;
        }
        let root = self.root()?;
        let v: Vec<VirtAddr> = vas.iter().map(|&a| VirtAddr(a)).collect();
        let c = self.sys.machine.load_batch(&v, root)?;
        Ok(self.sys.noise(c))
    }

    fn spin(&mut self, cycles: u64) {
        self.sys.machine.advance(cycles);
    }

    fn now(&self) -> u64 {
        self.sys.machine.clock()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::desk;

    #[test]
    fn noise_only_on_measurements() {
        let mut m = desk().machine;
        m.noise.amplitude = 50;
        let mut s = System::new(&m, 1).unwrap();
        let pid = s.spawn_attacker().unwrap();
        let mut h = s.handle(pid);
        let a = h.mmap(None, PAGE_SIZE, MapKind::Anon, true).unwrap();
        h.timed_read(a).unwrap();
        let t0 = h.now();
        let l = h.timed_read(a).unwrap();
        let dt = h.now() - t0;
        // serial load: clock advanced by the true latency only
        assert!(l >= dt);
        assert!(dt < 10);
    }

    #[test]
    fn read_write_through_mapping() {
        let mut s = System::new(&desk().machine, 1).unwrap();
        let pid = s.spawn_attacker().unwrap();
        let mut h = s.handle(pid);
        let a = h.mmap(None, 2 * PAGE_SIZE, MapKind::Anon, false).unwrap();
        h.write_u64(a + PAGE_SIZE + 16, 0xdead).unwrap();
        assert_eq!(h.read_u64(a + PAGE_SIZE + 16).unwrap(), 0xdead);
        assert!(matches!(h.read_u64(0x1000), Err(OsError::Fault(_))));
    }

    #[test]
    fn hw_info_matches_desk() {
        let hw = HardwareInfo::from_config(&desk().machine);
        assert_eq!(hw.rows_size, 8 * 32 * 1024);
        assert_eq!(hw.tlb_entries(), 64 + 128);
        assert_eq!(hw.llc_bytes, 1024 * 12 * 64);
    }
}
