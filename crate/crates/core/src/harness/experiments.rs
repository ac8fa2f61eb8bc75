//! E1..E7. Each `eN_*` function runs one seed and returns typed rows;
//! [`run_experiment`] fans seeds out and builds the tables.

use serde::{Deserialize, Serialize};

use super::{map_seeds, Executor, ExperimentId, ExperimentOutput, ExperimentSpec, Row, Table};
use crate::address_map::{llc_set_slice, PhysAddr, VirtAddr};
use crate::attack::{run_pthammer, AttackReport, Attacker, Candidate, Escalation};
use crate::cache_tlb::HitLevel;
use crate::config::{Config, DefenseKind, PolicyConfig, PolicyKind, HUGE_PAGE_SIZE, PAGE_SIZE};
use crate::dram::FlipEvent;
use crate::error::HarnessError;
use crate::os::{MapKind, ProcessHandle, Syscalls, System};
use crate::util::median;

/// Credential-spray processes used against CTA when the config has none.
pub const CTA_CRED_SPRAY: u32 = 4096;

fn machine(cfg: &Config, seed: u64) -> Result<(System, u32), HarnessError> {
    let mut sys = System::new(&cfg.machine, seed)?;
    let pid = sys.spawn_attacker()?;
    Ok((sys, pid))
}

fn policy_label(p: Option<PolicyKind>) -> &'static str {
    match p {
        None => "preset",
        Some(PolicyKind::TrueLru) => "true_lru",
        Some(PolicyKind::TreePlru) => "tree_plru",
        Some(PolicyKind::QuadAge) => "quad_age",
    }
}

// ---------------------------------------------------------------- E1

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TlbCurveRow {
    pub preset: String,
    pub seed: u64,
    pub size: u32,
    pub trials: u32,
    /// Judged by the attacker from latency.
    pub miss_rate: f64,
    /// Target translation absent from every TLB level before the timed load.
    pub true_miss_rate: f64,
}

impl Row for TlbCurveRow {
    const HEADER: &'static [&'static str] = &["preset", "seed", "size", "trials", "miss_rate", "true_miss_rate"];
}

pub fn default_tlb_sizes(cfg: &Config) -> Vec<u32> {
    let t = &cfg.machine.tlb;
    (1..=2 * (t.l1d.ways + t.l2s.ways)).collect()
}

/// TLB miss rate of one target after touching `size` congruent pages.
pub fn e1_tlb_curve(cfg: &Config, seed: u64, sizes: &[u32], trials: u32) -> Result<Vec<TlbCurveRow>, HarnessError> {
    let (mut sys, pid) = machine(cfg, seed)?;
    let mut h = sys.handle(pid);
    let mut att = Attacker::new(&mut h, &cfg.attack, seed);
    att.calibrate()?;
    att.prepare_tlb_region()?;
    let target = att.map(None, PAGE_SIZE, MapKind::Anon, true)?;
    let mut rows = Vec::new();
    for &n in sizes {
        let set = att.tlb_congruent(target, n as usize);
        if set.len() < n as usize {
            return Err(HarnessError::Runtime(format!("only {} congruent pages for size {n}", set.len())));
        }
        let (mut seen, mut truth) = (0u32, 0u32);
        for _ in 0..trials {
            att.sys.read_u64(target)?;
            att.sys.touch_batch(&set)?;
            if att.syscalls().system().machine.tlb.probe(target / PAGE_SIZE).is_none() {
                truth += 1;
            }
            if att.sys.timed_read(target)? > att.th.tlb_miss {
                seen += 1;
            }
        }
        let t = trials.max(1) as f64;
        rows.push(TlbCurveRow {
            preset: cfg.machine.name.clone(),
            seed,
            size: n,
            trials,
            miss_rate: seen as f64 / t,
            true_miss_rate: truth as f64 / t,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- E2

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LlcCurveRow {
    pub preset: String,
    pub seed: u64,
    pub policy: String,
    pub ways: u32,
    pub size: u32,
    pub trials: u32,
    pub evict_rate: f64,
    /// Line absent from the LLC before the timed load.
    pub true_evict_rate: f64,
}

impl Row for LlcCurveRow {
    const HEADER: &'static [&'static str] = &["preset", "seed", "policy", "ways", "size", "trials", "evict_rate", "true_evict_rate"];
}

pub fn default_llc_sizes(cfg: &Config) -> Vec<u32> {
    (1..=2 * cfg.machine.caches.llc.ways).collect()
}

/// LLC eviction rate of one line after touching `size` congruent lines,
/// optionally under a replacement policy other than the preset's.
pub fn e2_llc_curve(
    cfg: &Config,
    seed: u64,
    policy: Option<PolicyKind>,
    sizes: &[u32],
    trials: u32,
) -> Result<Vec<LlcCurveRow>, HarnessError> {
    let mut cfg = cfg.clone();
    if let Some(k) = policy {
        cfg.machine.caches.llc.policy = PolicyConfig::new(k);
    }
    let (mut sys, pid) = machine(&cfg, seed)?;
    let mut h = sys.handle(pid);
    let mut att = Attacker::new(&mut h, &cfg.attack, seed);
    att.calibrate()?;
    att.prepare_llc_buffer()?;
    let x = att.buf.llc_regions[0] + 5 * att.hw.line_bytes;
    let max = sizes.iter().copied().max().unwrap_or(0) as usize;
    let set = att.congruent_lines(x, max)?;
    if set.len() < max {
        return Err(HarnessError::Runtime(format!("only {} congruent lines for size {max}", set.len())));
    }
    let root = att.syscalls().system().root_of(pid)?;
    let mut rows = Vec::new();
    for &n in sizes {
        let members = &set[..n as usize];
        let (mut seen, mut truth) = (0u32, 0u32);
        for _ in 0..trials {
            att.sys.read_u64(x)?;
            att.sys.touch_batch(members)?;
            let sys = att.syscalls().system();
            let pa = sys.machine.translate_check(VirtAddr(x), root).map_err(|e| HarnessError::Runtime(e.to_string()))?;
            if sys.machine.caches.probe(pa) == HitLevel::Memory {
                truth += 1;
            }
            if att.timed_line(x)? > att.th.dram {
                seen += 1;
            }
        }
        let t = trials.max(1) as f64;
        rows.push(LlcCurveRow {
            preset: cfg.machine.name.clone(),
            seed,
            policy: policy_label(policy).into(),
            ways: cfg.machine.caches.llc.ways,
            size: n,
            trials,
            evict_rate: seen as f64 / t,
            true_evict_rate: truth as f64 / t,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- E3

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub preset: String,
    pub seed: u64,
    pub regime: String,
    pub pool_classes: u32,
    pub pool_prep_cycles: u64,
    pub target: u32,
    pub chosen_class: u32,
    /// (slice << 32 | set) of the class and of the target's leaf entry.
    pub chosen_set: u64,
    pub true_set: u64,
    pub false_positive: bool,
}

impl Row for SelectionRow {
    const HEADER: &'static [&'static str] = &[
        "preset",
        "seed",
        "regime",
        "pool_classes",
        "pool_prep_cycles",
        "target",
        "chosen_class",
        "chosen_set",
        "true_set",
        "false_positive",
    ];
}

/// Builds the eviction pool, then selects an LLC eviction set for
/// `targets` fresh pages and checks each choice against the cache
/// geometry.
pub fn e3_selection(cfg: &Config, seed: u64, targets: u32) -> Result<Vec<SelectionRow>, HarnessError> {
    let (mut sys, pid) = machine(cfg, seed)?;
    let mut h = sys.handle(pid);
    let mut att = Attacker::new(&mut h, &cfg.attack, seed);
    let mut report = AttackReport::new(seed, &cfg.attack, cfg.machine.os.defense.kind);
    att.calibrate()?;
    att.size_eviction_sets(&mut report)?;
    let t0 = att.sys.now();
    att.build_pool(&[0])?;
    let prep = att.sys.now() - t0;
    let base = att.map(None, targets as u64 * HUGE_PAGE_SIZE, MapKind::Anon, false)?;
    let geom = cfg.machine.caches.clone();
    let key = |pa: PhysAddr| {
        let (slice, set) = llc_set_slice(pa, &geom);
        (slice as u64) << 32 | set as u64
    };
    let mut rows = Vec::new();
    for k in 0..targets {
        let target = base + k as u64 * HUGE_PAGE_SIZE + PAGE_SIZE;
        att.sys.read_u64(target)?;
        let tlb = att.tlb_evset(target);
        let chosen = att.select_llc_eviction_set(target, &tlb)?;
        let sys = att.syscalls().system();
        let root = sys.root_of(pid)?;
        let rt = |e: crate::error::PageFault| HarnessError::Runtime(e.to_string());
        let pte = sys.machine.l1pte_addr(VirtAddr(target), root).map_err(rt)?;
        let member = sys.machine.translate_check(VirtAddr(chosen.members[0]), root).map_err(rt)?;
        let (t, c) = (key(pte), key(member));
        rows.push(SelectionRow {
            preset: cfg.machine.name.clone(),
            seed,
            regime: cfg.attack.regime.name().into(),
            pool_classes: att.pool.classes.len() as u32,
            pool_prep_cycles: prep,
            target: k,
            chosen_class: chosen.class,
            chosen_set: c,
            true_set: t,
            false_positive: c != t,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- E4

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub preset: String,
    pub seed: u64,
    pub window_a: u64,
    pub evidence: u64,
    pub threshold: Option<u64>,
    pub classified_same_bank: bool,
    pub true_same_bank: bool,
    pub bank_a: u32,
    pub bank_b: u32,
    pub row_a: u32,
    pub row_b: u32,
    /// Row distance between the two leaf tables; 2 leaves one victim row.
    pub row_gap: u32,
}

impl Row for PairRow {
    const HEADER: &'static [&'static str] = &[
        "preset",
        "seed",
        "window_a",
        "evidence",
        "threshold",
        "classified_same_bank",
        "true_same_bank",
        "bank_a",
        "bank_b",
        "row_a",
        "row_b",
        "row_gap",
    ];
}

/// Leaf-table (bank, row) of an attacker address.
fn table_location(sys: &System, root: u64, va: u64) -> Result<(u32, u32), HarnessError> {
    let pte = sys.machine.l1pte_addr(VirtAddr(va), root).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let m = sys.machine.dram.mapper();
    let loc = m.locate(pte.0);
    Ok((m.flat_bank(&loc), loc.row))
}

/// Probes `candidates` pairs after a full spray and compares the bank
/// classification with where the leaf tables really are.
pub fn e4_pairs(cfg: &Config, seed: u64, candidates: u32) -> Result<Vec<PairRow>, HarnessError> {
    let (mut sys, pid) = machine(cfg, seed)?;
    let mut h = sys.handle(pid);
    let mut att = Attacker::new(&mut h, &cfg.attack, seed);
    let mut report = AttackReport::new(seed, &cfg.attack, cfg.machine.os.defense.kind);
    att.prepare(&mut report)?;
    let order: Vec<u64> = att.candidate_windows().into_iter().take(candidates as usize).collect();
    let found = att.find_hammer_pairs(order)?;
    let th = att.conflict_threshold();
    let sys = att.syscalls().system();
    let root = sys.root_of(pid)?;
    let mut rows = Vec::new();
    for c in found {
        let (bank_a, row_a) = table_location(sys, root, c.pair.a)?;
        let (bank_b, row_b) = table_location(sys, root, c.pair.b)?;
        rows.push(PairRow {
            preset: cfg.machine.name.clone(),
            seed,
            window_a: c.window_a,
            evidence: c.pair.evidence,
            threshold: th,
            classified_same_bank: c.same_bank,
            true_same_bank: bank_a == bank_b,
            bank_a,
            bank_b,
            row_a,
            row_b,
            row_gap: row_a.abs_diff(row_b),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- E5

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PaddingRow {
    pub preset: String,
    pub seed: u64,
    pub window_a: u64,
    pub padding: u64,
    pub median_round_cycles: u64,
    pub rounds: u64,
    pub budget_cycles: u64,
    /// Cycles from the first round to the first flip anywhere in DRAM.
    pub first_flip_cycles: Option<u64>,
}

impl Row for PaddingRow {
    const HEADER: &'static [&'static str] =
        &["preset", "seed", "window_a", "padding", "median_round_cycles", "rounds", "budget_cycles", "first_flip_cycles"];
}

pub fn default_paddings() -> Vec<u64> {
    (0..=24).map(|i| i * 50).collect()
}

struct HammerRun {
    first_flip: Option<u64>,
    rounds: u64,
    median_cost: u64,
}

/// Hammers one pair until the first flip or `budget` cycles.
fn hammer_for(att: &mut Attacker<'_, ProcessHandle<'_>>, c: &Candidate, budget: u64) -> Result<HammerRun, HarnessError> {
    let ev = Attacker::<ProcessHandle<'_>>::evictors(c);
    let before = att.syscalls().system().machine.dram.flip_log().len();
    let t0 = att.sys.now();
    let mut costs = Vec::new();
    let mut first = None;
    while att.sys.now() - t0 < budget {
        costs.push(att.hammer_round(&ev, c)?);
        let log = att.syscalls().system().machine.dram.flip_log();
        if log.len() > before {
            first = Some(log[before].cycle.saturating_sub(t0));
            break;
        }
    }
    let rounds = costs.len() as u64;
    let median_cost = if costs.is_empty() { 0 } else { median(&mut costs) };
    Ok(HammerRun { first_flip: first, rounds, median_cost })
}

/// Finds a pair that flips without padding, then replays it from the same
/// machine state for every padding with three times the unpadded
/// time-to-flip as budget.
pub fn e5_padding(cfg: &Config, seed: u64, paddings: &[u64]) -> Result<Vec<PaddingRow>, HarnessError> {
    let (mut sys, pid) = machine(cfg, seed)?;
    let mut h = sys.handle(pid);
    let mut att = Attacker::new(&mut h, &cfg.attack, seed);
    att.cfg.padding_cycles = 0;
    let mut report = AttackReport::new(seed, &cfg.attack, cfg.machine.os.defense.kind);
    att.prepare(&mut report)?;
    let probe_budget = att.hw.refresh_cycles.max(1) * cfg.attack.epochs_per_pair.max(1) as u64;
    let batch = cfg.attack.pair_batch.max(1) as usize;
    let order = att.candidate_windows();
    let mut pending: Vec<Candidate> = Vec::new();
    let mut tried = 0u32;
    let mut label = 0u64;
    let mut chosen = None;
    'search: for chunk in order.chunks(batch) {
        pending.extend(att.find_hammer_pairs(chunk.iter().copied())?);
        let Some(th) = att.conflict_threshold() else { continue };
        for c in pending.drain(..).filter(|c| c.pair.evidence > th) {
            if tried >= cfg.attack.max_pairs {
                break 'search;
            }
            tried += 1;
            label += 1;
            let st = att.state();
            let mut fork = att.syscalls().system().fork(label);
            let mut fh = fork.handle(pid);
            let mut fa = Attacker::resume(&mut fh, st);
            let run = hammer_for(&mut fa, &c, probe_budget)?;
            if let Some(t) = run.first_flip {
                chosen = Some((c, t));
                break 'search;
            }
        }
    }
    let Some((c, t0)) = chosen else {
        return Err(HarnessError::Runtime(format!("seed {seed}: no pair flipped within {tried} pairs")));
    };
    let budget = 3 * t0.max(1);
    let st = att.state();
    let mut rows = Vec::new();
    for (i, &p) in paddings.iter().enumerate() {
        let mut fork = att.syscalls().system().fork(0x5000 + i as u64);
        let mut fh = fork.handle(pid);
        let mut fa = Attacker::resume(&mut fh, st.clone());
        fa.cfg.padding_cycles = p;
        let run = hammer_for(&mut fa, &c, budget)?;
        rows.push(PaddingRow {
            preset: cfg.machine.name.clone(),
            seed,
            window_a: c.window_a,
            padding: p,
            median_round_cycles: run.median_cost,
            rounds: run.rounds,
            budget_cycles: budget,
            first_flip_cycles: run.first_flip,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- E6 / E7

/// One end-to-end run and what the simulator says about it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub report: AttackReport,
    /// Escalation confirmed from outside the attacker: the sentinel frame
    /// is mapped at the reported address, or the credential is root's.
    pub verified: bool,
    pub flips: Vec<FlipEvent>,
}

impl RunOutcome {
    pub fn l1pt_takeover(&self) -> bool {
        self.verified && self.report.escalation == Escalation::L1pt
    }

    pub fn cred_escalation(&self) -> bool {
        self.verified && self.report.escalation == Escalation::Cred
    }
}

pub fn e6_run(cfg: &Config, seed: u64) -> Result<RunOutcome, HarnessError> {
    let (mut sys, pid) = machine(cfg, seed)?;
    let defense = cfg.machine.os.defense.kind;
    let report = {
        let mut h = sys.handle(pid);
        run_pthammer(&mut h, &cfg.attack, defense, seed)
    };
    let verified = match report.escalation {
        Escalation::None => false,
        Escalation::L1pt => {
            let root = sys.root_of(pid)?;
            let want = cfg.machine.os.sentinel_frame * PAGE_SIZE;
            report
                .sentinel_va
                .and_then(|va| sys.machine.translate_check(VirtAddr(va), root).ok())
                .is_some_and(|pa| pa.0 & !(PAGE_SIZE - 1) == want)
        }
        Escalation::Cred => report.escalated_pid.is_some_and(|p| sys.privilege_check(p)),
    };
    Ok(RunOutcome { report, verified, flips: sys.machine.dram.flip_log().to_vec() })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlipRow {
    pub seed: u64,
    pub cycle: u64,
    pub bank: u32,
    pub row: u32,
    pub bit: u32,
    pub polarity: String,
}

impl Row for FlipRow {
    const HEADER: &'static [&'static str] = &["seed", "cycle", "bank", "row", "bit", "polarity"];
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub preset: String,
    pub defense: String,
    pub seed: u64,
    pub cred_spray: u32,
    pub escalated: bool,
    pub escalation: String,
    pub l1pt_takeovers: u32,
    pub cred_escalations: u32,
    pub flips_detected: u32,
    pub l1pt_flips: u32,
    pub cred_flips: u32,
    pub other_flips: u32,
    pub true_flips: usize,
    pub first_flip_cycle: Option<u64>,
    pub total_cycles: u64,
    pub error: Option<String>,
}

impl Row for DefenseRow {
    const HEADER: &'static [&'static str] = &[
        "preset",
        "defense",
        "seed",
        "cred_spray",
        "escalated",
        "escalation",
        "l1pt_takeovers",
        "cred_escalations",
        "flips_detected",
        "l1pt_flips",
        "cred_flips",
        "other_flips",
        "true_flips",
        "first_flip_cycle",
        "total_cycles",
        "error",
    ];
}

fn escalation_name(e: Escalation) -> &'static str {
    match e {
        Escalation::None => "none",
        Escalation::L1pt => "l1pt",
        Escalation::Cred => "cred",
    }
}

/// Config for one row of the defense matrix.
pub fn defense_config(base: &Config, defense: DefenseKind, cred_spray: u32) -> Config {
    let mut cfg = base.clone();
    cfg.machine.os.defense.kind = defense;
    if defense == DefenseKind::Cta && cfg.attack.cred_spray_processes == 0 {
        cfg.attack.cred_spray_processes = cred_spray;
    }
    cfg
}

pub fn e7_row(cfg: &Config, seed: u64) -> Result<DefenseRow, HarnessError> {
    let o = e6_run(cfg, seed)?;
    let r = &o.report;
    Ok(DefenseRow {
        preset: cfg.machine.name.clone(),
        defense: cfg.machine.os.defense.kind.name().into(),
        seed,
        cred_spray: cfg.attack.cred_spray_processes,
        escalated: o.verified,
        escalation: escalation_name(r.escalation).into(),
        l1pt_takeovers: o.l1pt_takeover() as u32,
        cred_escalations: o.cred_escalation() as u32,
        flips_detected: r.flips_detected,
        l1pt_flips: r.l1pt_flips,
        cred_flips: r.cred_flips,
        other_flips: r.other_flips,
        true_flips: o.flips.len(),
        first_flip_cycle: r.first_flip_cycle,
        total_cycles: r.total_cycles,
        error: r.error.clone(),
    })
}

// ---------------------------------------------------------------- driver

fn flatten<T>(per_seed: Vec<Result<Vec<T>, HarnessError>>) -> Result<Vec<T>, HarnessError> {
    let mut out = Vec::new();
    for r in per_seed {
        out.extend(r?);
    }
    Ok(out)
}

/// Runs every repetition of `spec` on `base` with the spec's overrides.
pub fn run_experiment(spec: &ExperimentSpec, base: &Config, exec: Executor) -> Result<ExperimentOutput, HarnessError> {
    if spec.reps == 0 {
        return Err(crate::error::ConfigError::Invalid { path: "reps".into(), msg: "must be positive".into() }.into());
    }
    let cfg = spec.apply(base);
    cfg.validate()?;
    let seeds = spec.seeds();
    let sw = &spec.sweep;
    let id = spec.experiment;
    let mut tables = Vec::new();
    let mut documents = Vec::new();
    match id {
        ExperimentId::E1 => {
            let sizes = sw.sizes.clone().unwrap_or_else(|| default_tlb_sizes(&cfg));
            let trials = sw.trials.unwrap_or(cfg.attack.tlb_trials);
            let rows = flatten(map_seeds(exec, &seeds, |s| e1_tlb_curve(&cfg, s, &sizes, trials)))?;
            tables.push(Table::from_rows(id.stem(), &rows)?);
        }
        ExperimentId::E2 => {
            let sizes = sw.sizes.clone().unwrap_or_else(|| default_llc_sizes(&cfg));
            let trials = sw.trials.unwrap_or(cfg.attack.llc_trials);
            let policies = sw.policies.clone().unwrap_or_else(|| vec![None, Some(PolicyKind::TreePlru), Some(PolicyKind::TrueLru)]);
            let mut rows = Vec::new();
            for p in policies {
                rows.extend(flatten(map_seeds(exec, &seeds, |s| e2_llc_curve(&cfg, s, p, &sizes, trials)))?);
            }
            tables.push(Table::from_rows(id.stem(), &rows)?);
        }
        ExperimentId::E3 => {
            let n = sw.targets.unwrap_or(64);
            let rows = flatten(map_seeds(exec, &seeds, |s| e3_selection(&cfg, s, n)))?;
            tables.push(Table::from_rows(id.stem(), &rows)?);
        }
        ExperimentId::E4 => {
            let n = sw.candidates.unwrap_or(128);
            let rows = flatten(map_seeds(exec, &seeds, |s| e4_pairs(&cfg, s, n)))?;
            tables.push(Table::from_rows(id.stem(), &rows)?);
        }
        ExperimentId::E5 => {
            let pads = sw.paddings.clone().unwrap_or_else(default_paddings);
            let rows = flatten(map_seeds(exec, &seeds, |s| e5_padding(&cfg, s, &pads)))?;
            tables.push(Table::from_rows(id.stem(), &rows)?);
        }
        ExperimentId::E6 => {
            let outs: Vec<RunOutcome> = map_seeds(exec, &seeds, |s| e6_run(&cfg, s)).into_iter().collect::<Result<_, _>>()?;
            let mut csv = format!("{},verified,true_flips\n", AttackReport::CSV_HEADER);
            for o in &outs {
                csv.push_str(&format!("{},{},{}\n", o.report.csv_row(), o.verified, o.flips.len()));
            }
            tables.push(Table { name: id.stem().into(), csv, rows: outs.len() });
            let flips: Vec<FlipRow> = outs
                .iter()
                .flat_map(|o| {
                    o.flips.iter().map(|f| FlipRow {
                        seed: o.report.seed,
                        cycle: f.cycle,
                        bank: f.bank,
                        row: f.row,
                        bit: f.bit,
                        polarity: f.polarity.name().into(),
                    })
                })
                .collect();
            tables.push(Table::from_rows("e6_flips", &flips)?);
            let events: Vec<serde_json::Value> = outs
                .iter()
                .map(|o| serde_json::json!({ "seed": o.report.seed, "defense": o.report.defense, "events": o.report.events }))
                .collect();
            documents.push(("e6_events".to_string(), serde_json::Value::Array(events)));
        }
        ExperimentId::E7 => {
            let defenses: Vec<DefenseKind> = match spec.defense {
                Some(d) => vec![d],
                None => DefenseKind::ALL.to_vec(),
            };
            let spray = sw.cred_spray.unwrap_or(CTA_CRED_SPRAY);
            let mut rows = Vec::new();
            for d in defenses {
                let c = defense_config(&cfg, d, spray);
                let r: Vec<DefenseRow> = map_seeds(exec, &seeds, |s| e7_row(&c, s)).into_iter().collect::<Result<_, _>>()?;
                rows.extend(r);
            }
            tables.push(Table::from_rows(id.stem(), &rows)?);
        }
    }
    Ok(ExperimentOutput { spec: spec.clone(), config_hash: cfg.hash(), tables, documents })
}
