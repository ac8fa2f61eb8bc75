//! Two-level data TLB with exclusive victim-fill, plus a 2 MiB-page TLB.

use serde::{Deserialize, Serialize};

use super::array::SetAssocArray;
use crate::address_map::tlb_set;
use crate::config::TlbConfig;
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TlbHit {
    L1,
    L2,
    Huge,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbStats {
    pub l1_hits: u64,
    pub l2_hits: u64,
    pub misses: u64,
}

#[derive(Clone, Debug)]
pub struct TlbHierarchy {
    cfg: TlbConfig,
    l1: SetAssocArray,
    l2: SetAssocArray,
    huge: SetAssocArray,
    stats: TlbStats,
}

impl TlbHierarchy {
    pub fn new(cfg: &TlbConfig, seed: u64) -> Self {
        let mk = |l: &crate::config::TlbLevelConfig, label: u64| {
            SetAssocArray::new(l.sets as usize, l.ways as usize, l.policy.clone(), util::derive(seed, label))
        };
        TlbHierarchy { cfg: cfg.clone(), l1: mk(&cfg.l1d, 11), l2: mk(&cfg.l2s, 12), huge: mk(&cfg.huge, 13), stats: TlbStats::default() }
    }

    /// Translation for a 4 KiB page. An L2 hit migrates the entry into L1 and
    /// pushes the L1 evictee down.
    pub fn tlb_lookup(&mut self, vpn: u64) -> Option<(u64, TlbHit)> {
        let s1 = tlb_set(vpn, &self.cfg.l1d) as usize;
        if let Some(w) = self.l1.lookup(s1, vpn) {
            self.stats.l1_hits += 1;
            return Some((self.l1.payload(s1, w), TlbHit::L1));
        }
        let s2 = tlb_set(vpn, &self.cfg.l2s) as usize;
        if let Some(pfn) = self.l2.remove(s2, vpn) {
            self.stats.l2_hits += 1;
            self.fill_l1(vpn, pfn);
            return Some((pfn, TlbHit::L2));
        }
        self.stats.misses += 1;
        None
    }

    pub fn tlb_fill(&mut self, vpn: u64, pfn: u64) {
        let s2 = tlb_set(vpn, &self.cfg.l2s) as usize;
        self.l2.remove(s2, vpn);
        let s1 = tlb_set(vpn, &self.cfg.l1d) as usize;
        if let Some(w) = self.l1.find(s1, vpn) {
            self.l1.remove(s1, self.l1.tag(s1, w));
        }
        self.fill_l1(vpn, pfn);
    }

    fn fill_l1(&mut self, vpn: u64, pfn: u64) {
        let s1 = tlb_set(vpn, &self.cfg.l1d) as usize;
        if let Some((old, old_pfn)) = self.l1.insert(s1, vpn, pfn) {
            let s2 = tlb_set(old, &self.cfg.l2s) as usize;
            self.l2.insert(s2, old, old_pfn);
        }
    }

    /// Translation for a 2 MiB page, keyed by `va >> 21`.
    pub fn lookup_huge(&mut self, vpn2m: u64) -> Option<u64> {
        let s = tlb_set(vpn2m, &self.cfg.huge) as usize;
        let w = self.huge.lookup(s, vpn2m)?;
        self.stats.l1_hits += 1;
        Some(self.huge.payload(s, w))
    }

    pub fn fill_huge(&mut self, vpn2m: u64, pfn: u64) {
        let s = tlb_set(vpn2m, &self.cfg.huge) as usize;
        if self.huge.find(s, vpn2m).is_none() {
            self.huge.insert(s, vpn2m, pfn);
        }
    }

    pub fn invalidate(&mut self, vpn: u64) {
        let s1 = tlb_set(vpn, &self.cfg.l1d) as usize;
        self.l1.remove(s1, vpn);
        let s2 = tlb_set(vpn, &self.cfg.l2s) as usize;
        self.l2.remove(s2, vpn);
        let s = tlb_set(vpn >> 9, &self.cfg.huge) as usize;
        self.huge.remove(s, vpn >> 9);
    }

    pub fn flush(&mut self) {
        self.l1.clear();
        self.l2.clear();
        self.huge.clear();
    }

    /// Level holding `vpn`, without touching replacement state.
    pub fn probe(&self, vpn: u64) -> Option<TlbHit> {
        if self.l1.contains(tlb_set(vpn, &self.cfg.l1d) as usize, vpn) {
            Some(TlbHit::L1)
        } else if self.l2.contains(tlb_set(vpn, &self.cfg.l2s) as usize, vpn) {
            Some(TlbHit::L2)
        } else {
            None
        }
    }

    pub fn stats(&self) -> TlbStats {
        self.stats
    }

    pub fn config(&self) -> &TlbConfig {
        &self.cfg
    }
}
