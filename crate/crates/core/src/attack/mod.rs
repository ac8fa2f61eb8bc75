//! Unprivileged page-walk hammering attacker.
//!
//! The attacker only sees a [`Syscalls`] implementation: it maps memory,
//! reads and writes through its own addresses and times loads. The phases
//! are calibration, eviction-set sizing, pool preparation, page-table spray,
//! same-bank pair discovery, hammering with periodic content checks, and
//! escalation through a captured page table or a credential record.

pub mod evset;
pub mod hammer;
pub mod pairs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use evset::{Buffers, EvictionPool, EvictionSet, LlcClass};
pub use hammer::{FlipDescriptor, FlipKind};
pub use pairs::{Candidate, HammerPair, Spray};

use crate::config::{AttackConfig, DefenseKind, PAGE_SIZE};
use crate::error::AttackError;
use crate::os::{HardwareInfo, MapKind, Syscalls};
use crate::util::{self, median};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Latency above which a load took a page walk.
    pub tlb_miss: u64,
    /// Latency above which a load went to DRAM.
    pub dram: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub tlb: u32,
    pub llc: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Escalation {
    None,
    L1pt,
    Cred,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackEvent {
    pub cycle: u64,
    pub kind: String,
    pub detail: String,
}

/// Outcome and phase accounting of one attack run. Cycle counts are
/// simulated cycles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub seed: u64,
    pub defense: String,
    pub regime: String,
    pub tlb_evset_size: u32,
    pub llc_evset_size: u32,
    pub calib_cycles: u64,
    pub tlb_prep_cycles: u64,
    pub llc_prep_cycles: u64,
    pub spray_cycles: u64,
    pub pair_cycles: u64,
    pub hammer_cycles: u64,
    pub check_cycles: u64,
    pub candidates_probed: u32,
    pub same_bank_pairs: u32,
    pub pairs_hammered: u32,
    pub rounds: u64,
    pub median_round_cycles: u64,
    pub flips_detected: u32,
    pub l1pt_flips: u32,
    pub cred_flips: u32,
    pub other_flips: u32,
    pub first_flip_cycle: Option<u64>,
    pub escalation: Escalation,
    pub escalated_pid: Option<u32>,
    /// Address that maps the sentinel frame after an L1PT takeover.
    pub sentinel_va: Option<u64>,
    pub total_cycles: u64,
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub events: Vec<AttackEvent>,
}

impl AttackReport {
    pub fn new(seed: u64, cfg: &AttackConfig, defense: DefenseKind) -> Self {
        AttackReport {
            seed,
            defense: defense.name().into(),
            regime: cfg.regime.name().into(),
            tlb_evset_size: 0,
            llc_evset_size: 0,
            calib_cycles: 0,
            tlb_prep_cycles: 0,
            llc_prep_cycles: 0,
            spray_cycles: 0,
            pair_cycles: 0,
            hammer_cycles: 0,
            check_cycles: 0,
            candidates_probed: 0,
            same_bank_pairs: 0,
            pairs_hammered: 0,
            rounds: 0,
            median_round_cycles: 0,
            flips_detected: 0,
            l1pt_flips: 0,
            cred_flips: 0,
            other_flips: 0,
            first_flip_cycle: None,
            escalation: Escalation::None,
            escalated_pid: None,
            sentinel_va: None,
            total_cycles: 0,
            error: None,
            events: Vec::new(),
        }
    }

    pub fn escalated(&self) -> bool {
        self.escalation != Escalation::None
    }

    pub const CSV_HEADER: &'static str = "seed,defense,regime,tlb_evset_size,llc_evset_size,calib_cycles,tlb_prep_cycles,llc_prep_cycles,spray_cycles,pair_cycles,hammer_cycles,check_cycles,candidates_probed,same_bank_pairs,pairs_hammered,rounds,median_round_cycles,flips_detected,l1pt_flips,cred_flips,other_flips,first_flip_cycle,escalation,escalated_pid,total_cycles,error";

    pub fn csv_row(&self) -> String {
        let opt = |o: Option<u64>| o.map(|v| v.to_string()).unwrap_or_default();
        let esc = match self.escalation {
            Escalation::None => "none",
            Escalation::L1pt => "l1pt",
            Escalation::Cred => "cred",
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.defense,
            self.regime,
            self.tlb_evset_size,
            self.llc_evset_size,
            self.calib_cycles,
            self.tlb_prep_cycles,
            self.llc_prep_cycles,
            self.spray_cycles,
            self.pair_cycles,
            self.hammer_cycles,
            self.check_cycles,
            self.candidates_probed,
            self.same_bank_pairs,
            self.pairs_hammered,
            self.rounds,
            self.median_round_cycles,
            self.flips_detected,
            self.l1pt_flips,
            self.cred_flips,
            self.other_flips,
            opt(self.first_flip_cycle),
            esc,
            opt(self.escalated_pid.map(u64::from)),
            self.total_cycles,
            self.error.as_deref().unwrap_or("").replace(',', ";"),
        )
    }
}

/// Everything the attacker has learned, detachable from the syscall handle
/// so a run can be resumed on a cloned machine.
#[derive(Clone, Debug)]
pub struct AttackerState {
    pub cfg: AttackConfig,
    pub hw: HardwareInfo,
    pub rng: ChaCha8Rng,
    pub th: Thresholds,
    pub sizes: Sizes,
    pub buf: Buffers,
    pub pool: EvictionPool,
    pub spray: Spray,
    pub maps: Vec<(u64, u64)>,
    pub probe_medians: Vec<u64>,
    pub seen_flips: Vec<u64>,
    pub round_costs: Vec<u64>,
    pub events: Vec<AttackEvent>,
}

pub struct Attacker<'s, S: Syscalls> {
    pub(crate) sys: &'s mut S,
    pub cfg: AttackConfig,
    pub hw: HardwareInfo,
    pub(crate) rng: ChaCha8Rng,
    pub th: Thresholds,
    pub sizes: Sizes,
    pub buf: Buffers,
    pub pool: EvictionPool,
    pub spray: Spray,
    /// Own 4 KiB mappings as (start, len).
    pub maps: Vec<(u64, u64)>,
    pub probe_medians: Vec<u64>,
    pub(crate) seen_flips: Vec<u64>,
    pub(crate) round_costs: Vec<u64>,
    pub events: Vec<AttackEvent>,
}

impl<'s, S: Syscalls> Attacker<'s, S> {
    pub fn new(sys: &'s mut S, cfg: &AttackConfig, seed: u64) -> Self {
        let hw = sys.hw();
        Attacker {
            sys,
            cfg: cfg.clone(),
            hw,
            rng: ChaCha8Rng::seed_from_u64(util::derive(seed, 0xA77)),
            th: Thresholds::default(),
            sizes: Sizes::default(),
            buf: Buffers::default(),
            pool: EvictionPool::default(),
            spray: Spray::default(),
            maps: Vec::new(),
            probe_medians: Vec::new(),
            seen_flips: Vec::new(),
            round_costs: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn resume(sys: &'s mut S, st: AttackerState) -> Self {
        Attacker {
            sys,
            cfg: st.cfg,
            hw: st.hw,
            rng: st.rng,
            th: st.th,
            sizes: st.sizes,
            buf: st.buf,
            pool: st.pool,
            spray: st.spray,
            maps: st.maps,
            probe_medians: st.probe_medians,
            seen_flips: st.seen_flips,
            round_costs: st.round_costs,
            events: st.events,
        }
    }

    pub fn state(&self) -> AttackerState {
        AttackerState {
            cfg: self.cfg.clone(),
            hw: self.hw.clone(),
            rng: self.rng.clone(),
            th: self.th,
            sizes: self.sizes,
            buf: self.buf.clone(),
            pool: self.pool.clone(),
            spray: self.spray.clone(),
            maps: self.maps.clone(),
            probe_medians: self.probe_medians.clone(),
            seen_flips: self.seen_flips.clone(),
            round_costs: self.round_costs.clone(),
            events: self.events.clone(),
        }
    }

    /// mmap that remembers small-page mappings.
    pub(crate) fn map(&mut self, hint: Option<u64>, len: u64, kind: MapKind, populate: bool) -> Result<u64, AttackError> {
        let va = self.sys.mmap(hint, len, kind, populate)?;
        if kind != MapKind::Huge {
            self.maps.push((va, len));
        }
        Ok(va)
    }

    /// The syscall handle, for tests that need to reach behind it.
    pub fn syscalls(&mut self) -> &mut S {
        self.sys
    }

    pub(crate) fn log(&mut self, kind: &str, detail: String) {
        let cycle = self.sys.now();
        self.events.push(AttackEvent { cycle, kind: kind.into(), detail });
    }

    /// Derives the TLB-miss and DRAM latency thresholds as midpoints between
    /// measured fast and slow populations.
    pub fn calibrate(&mut self) -> Result<Thresholds, AttackError> {
        const N: usize = 31;
        self.prepare_tlb_region()?;
        let p = self.buf.tlb_base + 3 * PAGE_SIZE;
        let sweep: Vec<u64> = (0..2 * self.hw.tlb_entries()).map(|i| self.buf.tlb_base + (4 + i) * PAGE_SIZE).collect();
        let (mut fast, mut slow) = (Vec::with_capacity(N), Vec::with_capacity(N));
        for _ in 0..N {
            self.sys.read_u64(p)?;
            fast.push(self.sys.timed_read(p)?);
            self.sys.touch_batch(&sweep)?;
            slow.push(self.sys.timed_read(p)?);
        }
        let (f, s) = (median(&mut fast), median(&mut slow));
        if s <= f {
            return Err(AttackError::Calibration("page walks are not measurably slower".into()));
        }
        self.th.tlb_miss = (f + s) / 2;

        self.prepare_llc_buffer()?;
        let (mut fast, mut slow) = (Vec::with_capacity(N), Vec::with_capacity(N));
        let r0 = self.buf.llc_regions[0];
        for i in 0..N as u64 {
            // untouched lines spread over the buffer
            let x = r0 + (i * 97 % (self.buf.llc_region_bytes / PAGE_SIZE)) * PAGE_SIZE + 64 * (1 + i % 30);
            slow.push(self.timed_line(x)?);
            fast.push(self.timed_line(x)?);
        }
        let (f, s) = (median(&mut fast), median(&mut slow));
        if s <= f {
            return Err(AttackError::Calibration("DRAM accesses are not measurably slower".into()));
        }
        self.th.dram = (f + s) / 2;
        let th = self.th;
        self.log("calibrate", format!("tlb_miss>{} dram>{}", th.tlb_miss, th.dram));
        Ok(th)
    }

    /// Eviction-set sizes from the searches, unless fixed by configuration.
    pub fn size_eviction_sets(&mut self, report: &mut AttackReport) -> Result<(), AttackError> {
        let t0 = self.sys.now();
        self.sizes.tlb = match self.cfg.tlb_evset_size {
            Some(n) => n,
            None => {
                let target = self.map(None, PAGE_SIZE, MapKind::Anon, true)?;
                self.find_min_tlb_eviction_size(target)?
            }
        };
        let t1 = self.sys.now();
        self.prepare_llc_buffer()?;
        self.sizes.llc = match self.cfg.llc_evset_size {
            Some(n) => n,
            None => {
                let x = self.buf.llc_regions[0] + 5 * self.hw.line_bytes;
                self.find_min_llc_eviction_size(x)?
            }
        };
        let t2 = self.sys.now();
        report.tlb_prep_cycles += t1 - t0;
        report.llc_prep_cycles += t2 - t1;
        report.tlb_evset_size = self.sizes.tlb;
        report.llc_evset_size = self.sizes.llc;
        let sz = self.sizes;
        self.log("sizes", format!("tlb={} llc={}", sz.tlb, sz.llc));
        Ok(())
    }

    /// Preparation up to and including the spray.
    pub fn prepare(&mut self, report: &mut AttackReport) -> Result<(), AttackError> {
        let t0 = self.sys.now();
        self.calibrate()?;
        report.calib_cycles = self.sys.now() - t0;
        self.size_eviction_sets(report)?;
        let t1 = self.sys.now();
        self.build_pool(&[self.target_pte_offset()])?;
        report.llc_prep_cycles += self.sys.now() - t1;
        let t2 = self.sys.now();
        self.spray_tables()?;
        report.spray_cycles = self.sys.now() - t2;
        Ok(())
    }

    /// Full attack; budget exhaustion is reported, not raised.
    pub fn run(&mut self, report: &mut AttackReport) {
        let start = self.sys.now();
        let res = self.prepare(report).and_then(|_| self.hammer_loop(report));
        if let Err(e) = res {
            report.error = Some(e.to_string());
        }
        report.total_cycles = self.sys.now() - start;
        report.events = std::mem::take(&mut self.events);
    }
}

/// Runs the whole pipeline for one seed on the given syscall surface.
pub fn run_pthammer<S: Syscalls>(sys: &mut S, cfg: &AttackConfig, defense: DefenseKind, seed: u64) -> AttackReport {
    let mut report = AttackReport::new(seed, cfg, defense);
    let mut att = Attacker::new(sys, cfg, seed);
    att.run(&mut report);
    report
}
