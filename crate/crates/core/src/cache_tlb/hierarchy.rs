//! L1D, L2 and the sliced inclusive LLC. Tag-only: data lives in DRAM.

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use super::array::SetAssocArray;
use crate::address_map::{llc_set_slice, PhysAddr};
use crate::config::CacheConfig;
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HitLevel {
    L1,
    L2,
    Llc,
    Memory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Eviction {
    pub level: HitLevel,
    pub line: u64,
}

#[derive(Clone, Debug)]
pub struct CacheAccess {
    pub level: HitLevel,
    pub evictions: ArrayVec<Eviction, 6>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub l1_hits: u64,
    pub l2_hits: u64,
    pub llc_hits: u64,
    pub llc_misses: u64,
}

#[derive(Clone, Debug)]
pub struct CacheHierarchy {
    cfg: CacheConfig,
    l1: SetAssocArray,
    l2: SetAssocArray,
    llc: Vec<SetAssocArray>,
    stats: CacheStats,
}

impl CacheHierarchy {
    pub fn new(cfg: &CacheConfig, seed: u64) -> Self {
        let mk = |l: &crate::config::LevelConfig, label: u64| {
            SetAssocArray::new(l.sets as usize, l.ways as usize, l.policy.clone(), util::derive(seed, label))
        };
        CacheHierarchy {
            cfg: cfg.clone(),
            l1: mk(&cfg.l1, 1),
            l2: mk(&cfg.l2, 2),
            llc: (0..cfg.llc_slices).map(|s| mk(&cfg.llc, 100 + s as u64)).collect(),
            stats: CacheStats::default(),
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    #[inline]
    fn line(&self, pa: u64) -> u64 {
        pa >> self.cfg.line_bytes.trailing_zeros()
    }

    #[inline]
    fn l1_set(&self, line: u64) -> usize {
        (line & (self.cfg.l1.sets as u64 - 1)) as usize
    }

    #[inline]
    fn l2_set(&self, line: u64) -> usize {
        (line & (self.cfg.l2.sets as u64 - 1)) as usize
    }

    #[inline]
    fn llc_loc(&self, line: u64) -> (usize, usize) {
        let (s, set) = llc_set_slice(PhysAddr(line << self.cfg.line_bytes.trailing_zeros()), &self.cfg);
        (s as usize, set as usize)
    }

    /// Looks up a physical address, filling every level on the way back.
    pub fn cache_access(&mut self, pa: PhysAddr) -> CacheAccess {
        let line = self.line(pa.0);
        let mut ev = ArrayVec::new();
        let s1 = self.l1_set(line);
        if self.l1.lookup(s1, line).is_some() {
            self.stats.l1_hits += 1;
            return CacheAccess { level: HitLevel::L1, evictions: ev };
        }
        let s2 = self.l2_set(line);
        let level = if self.l2.lookup(s2, line).is_some() {
            self.stats.l2_hits += 1;
            HitLevel::L2
        } else {
            let (sl, s3) = self.llc_loc(line);
            if self.llc[sl].lookup(s3, line).is_some() {
                self.stats.llc_hits += 1;
                HitLevel::Llc
            } else {
                self.stats.llc_misses += 1;
                if let Some((victim, _)) = self.llc[sl].insert(s3, line, 0) {
                    ev.push(Eviction { level: HitLevel::Llc, line: victim });
                    self.back_invalidate(victim);
                }
                HitLevel::Memory
            }
        };
        if level != HitLevel::L2 {
            if let Some((v, _)) = self.l2.insert(s2, line, 0) {
                ev.push(Eviction { level: HitLevel::L2, line: v });
            }
        }
        if let Some((v, _)) = self.l1.insert(s1, line, 0) {
            ev.push(Eviction { level: HitLevel::L1, line: v });
        }
        CacheAccess { level, evictions: ev }
    }

    fn back_invalidate(&mut self, line: u64) {
        let s1 = self.l1_set(line);
        self.l1.remove(s1, line);
        let s2 = self.l2_set(line);
        self.l2.remove(s2, line);
    }

    /// Drops a line from every level. Returns false when the LLC did not hold it.
    pub fn llc_evict_line(&mut self, pa: PhysAddr) -> bool {
        let line = self.line(pa.0);
        let (sl, s3) = self.llc_loc(line);
        let had = self.llc[sl].remove(s3, line).is_some();
        self.back_invalidate(line);
        had
    }

    /// Highest level holding the line, without touching replacement state.
    pub fn probe(&self, pa: PhysAddr) -> HitLevel {
        let line = self.line(pa.0);
        if self.l1.contains(self.l1_set(line), line) {
            HitLevel::L1
        } else if self.l2.contains(self.l2_set(line), line) {
            HitLevel::L2
        } else {
            let (sl, s3) = self.llc_loc(line);
            if self.llc[sl].contains(s3, line) {
                HitLevel::Llc
            } else {
                HitLevel::Memory
            }
        }
    }

    /// True when every L1/L2 line is also in the LLC.
    pub fn check_inclusive(&self) -> bool {
        let in_llc = |line: u64| {
            let (sl, s3) = self.llc_loc(line);
            self.llc[sl].contains(s3, line)
        };
        self.l1.valid_tags().all(|(_, t)| in_llc(t)) && self.l2.valid_tags().all(|(_, t)| in_llc(t))
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn flush_all(&mut self) {
        self.l1.clear();
        self.l2.clear();
        for s in &mut self.llc {
            s.clear();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{desk, LevelConfig, PolicyConfig, PolicyKind};
    use proptest::prelude::*;

    fn toy() -> CacheHierarchy {
        let mut c = desk().machine.caches;
        let lru = PolicyConfig::new(PolicyKind::TrueLru);
        c.l1 = LevelConfig { sets: 1, ways: 1, policy: lru.clone() };
        c.l2 = LevelConfig { sets: 1, ways: 1, policy: lru.clone() };
        c.llc = LevelConfig { sets: 4, ways: 2, policy: lru };
        CacheHierarchy::new(&c, 1)
    }

    #[test]
    fn cold_then_l1() {
        let mut h = CacheHierarchy::new(&desk().machine.caches, 1);
        assert_eq!(h.cache_access(PhysAddr(0x1000)).level, HitLevel::Memory);
        assert_eq!(h.cache_access(PhysAddr(0x1008)).level, HitLevel::L1);
    }

    #[test]
    fn lru_toy_overflow_goes_to_memory() {
        // 2-way LLC set 0 holds lines 0, 4, 8 (set = line mod 4); hand-simulated stack
        let mut h = toy();
        let a = |l: u64| PhysAddr(l * 64);
        assert_eq!(h.cache_access(a(0)).level, HitLevel::Memory); // [0]
        assert_eq!(h.cache_access(a(4)).level, HitLevel::Memory); // [4,0]
        assert_eq!(h.cache_access(a(8)).level, HitLevel::Memory); // [8,4] evicts 0
        assert_eq!(h.cache_access(a(0)).level, HitLevel::Memory);
        assert_eq!(h.cache_access(a(0)).level, HitLevel::L1);
    }

    #[test]
    fn evict_line_back_invalidates() {
        let mut h = CacheHierarchy::new(&desk().machine.caches, 1);
        let pa = PhysAddr(0x4240);
        h.cache_access(pa);
        assert!(h.llc_evict_line(pa));
        assert_eq!(h.probe(pa), HitLevel::Memory);
        assert!(!h.llc_evict_line(pa));
        assert_eq!(h.cache_access(pa).level, HitLevel::Memory);
    }

    proptest! {
        #[test]
        fn inclusive_after_every_step(lines in proptest::collection::vec(0u64..64, 1..300)) {
            let mut h = toy();
            for l in lines {
                h.cache_access(PhysAddr(l * 64));
                prop_assert!(h.check_inclusive());
            }
        }

        #[test]
        fn inclusive_desk_random(lines in proptest::collection::vec(0u64..(1 << 16), 1..2000)) {
            let mut h = CacheHierarchy::new(&desk().machine.caches, 2);
            for l in lines {
                h.cache_access(PhysAddr(l * 64 * 1024 % (64 << 20)));
            }
            prop_assert!(h.check_inclusive());
        }
    }
}
