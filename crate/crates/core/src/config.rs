//! Machine, OS and attacker configuration, presets, and validation.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::ConfigError;

/// Replacement policy families for set-associative structures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    TrueLru,
    TreePlru,
    QuadAge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Age given to newly inserted lines (QuadAge only, 0..=3).
    #[serde(default = "default_insert_age")]
    pub insert_age: u8,
    /// Probability that a fill in a full set picks a uniformly random victim
    /// instead of the policy's choice.
    #[serde(default)]
    pub random_victim: f64,
}

fn default_insert_age() -> u8 {
    2
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        PolicyConfig { kind, insert_age: 2, random_victim: 0.0 }
    }
}

/// Assignment of physical-address bits to DRAM coordinates. Each entry is an
/// XOR mask; the coordinate bit is the parity of `pa & mask`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitLayout {
    pub column: Vec<u64>,
    pub bank: Vec<u64>,
    pub rank: Vec<u64>,
    pub channel: Vec<u64>,
    pub row: Vec<u64>,
}

fn bit_masks(lo: u32, n: u32) -> Vec<u64> {
    (lo..lo + n).map(|b| 1u64 << b).collect()
}

impl BitLayout {
    /// Plain layout: column lowest, then bank, rank, channel, row highest.
    pub fn linear(col_bits: u32, bank_bits: u32, rank_bits: u32, chan_bits: u32, row_bits: u32) -> Self {
        let mut lo = 0;
        let column = bit_masks(lo, col_bits);
        lo += col_bits;
        let bank = bit_masks(lo, bank_bits);
        lo += bank_bits;
        let rank = bit_masks(lo, rank_bits);
        lo += rank_bits;
        let channel = bit_masks(lo, chan_bits);
        lo += chan_bits;
        let row = bit_masks(lo, row_bits);
        BitLayout { column, bank, rank, channel, row }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramConfig {
    pub channels: u32,
    pub ranks: u32,
    pub banks_per_rank: u32,
    pub rows_per_bank: u32,
    pub row_bytes: u64,
    pub layout: BitLayout,
    pub t_row_hit: u32,
    pub t_row_miss: u32,
    pub t_row_conflict: u32,
    /// An open row is closed after this many idle cycles (0 keeps rows open).
    #[serde(default)]
    pub row_idle_close_cycles: u64,
}

impl DramConfig {
    pub fn total_banks(&self) -> u32 {
        self.channels * self.ranks * self.banks_per_rank
    }

    pub fn dram_bytes(&self) -> u64 {
        self.total_banks() as u64 * self.rows_per_bank as u64 * self.row_bytes
    }

    /// Bytes covered by one row index across every bank, rank and channel.
    pub fn rows_size(&self) -> u64 {
        self.total_banks() as u64 * self.row_bytes
    }

    pub fn frames(&self) -> u64 {
        self.dram_bytes() / PAGE_SIZE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub sets: u32,
    pub ways: u32,
    pub policy: PolicyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub line_bytes: u64,
    pub l1: LevelConfig,
    pub l2: LevelConfig,
    /// Per-slice geometry of the inclusive LLC.
    pub llc: LevelConfig,
    pub llc_slices: u32,
    /// One XOR mask per slice-index bit.
    pub slice_hash: Vec<u64>,
}

impl CacheConfig {
    pub fn llc_bytes(&self) -> u64 {
        self.llc_slices as u64 * self.llc.sets as u64 * self.llc.ways as u64 * self.line_bytes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TlbHash {
    /// `vpn mod sets`
    Linear,
    /// XOR of all `log2(sets)`-bit chunks of the vpn.
    XorFold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlbLevelConfig {
    pub sets: u32,
    pub ways: u32,
    pub hash: TlbHash,
    pub policy: PolicyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlbConfig {
    pub l1d: TlbLevelConfig,
    pub l2s: TlbLevelConfig,
    /// Separate 2 MiB-page TLB.
    pub huge: TlbLevelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PscConfig {
    pub pde: u32,
    pub pdpte: u32,
    pub pml4e: u32,
    pub lookup_cycles: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    pub l1_hit: u32,
    pub l2_hit: u32,
    pub llc_hit: u32,
    pub tlb_l1_hit: u32,
    pub tlb_l2_hit: u32,
    /// Fixed cost of starting a page walk after a TLB miss.
    pub walk_base: u32,
    /// Independent loads issued back to back overlap up to this factor.
    pub mlp_width: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipConfig {
    /// Flippable cells per million bits.
    pub density_per_mbit: f64,
    pub true_fraction: f64,
    pub threshold_min: u32,
    pub threshold_max: u32,
    /// Cycles per full refresh epoch; 0 disables refresh.
    pub refresh_epoch_cycles: u64,
    /// Cell polarity is shared by blocks of this many row indices
    /// (all banks); 0 draws polarity per cell.
    pub polarity_block_rows: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum DefenseKind {
    None,
    Catt,
    Riprh,
    Cta,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 4] = [DefenseKind::None, DefenseKind::Catt, DefenseKind::Riprh, DefenseKind::Cta];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Catt => "catt",
            DefenseKind::Riprh => "riprh",
            DefenseKind::Cta => "cta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Some(DefenseKind::None),
            "catt" => Some(DefenseKind::Catt),
            "riprh" | "rip-rh" => Some(DefenseKind::Riprh),
            "cta" => Some(DefenseKind::Cta),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Row indices `[0, kernel_rows)` form the kernel partition (CATT, RIP-RH).
    pub kernel_rows: u32,
    /// CATT guard rows between the kernel and user partitions.
    pub buffer_rows: u32,
    /// RIP-RH: number of per-user row ranges above the kernel partition.
    pub user_slots: u32,
    /// CTA: number of row indices at the top of memory reserved for page tables.
    pub cta_rows: u32,
    /// CTA: skip rows that contain anti cells.
    pub cta_verify_true_cells: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsConfig {
    /// Probability that a per-CPU refill continues the previous run of frames.
    pub p_consec: f64,
    /// Order-0 frames taken from the buddy lists per refill.
    pub pcp_batch: u32,
    /// Frames taken by the kernel at boot before any process runs.
    pub boot_kernel_frames: u64,
    /// Kernel-owned frame whose PFN the attacker aims its rewritten entries at.
    pub sentinel_frame: u64,
    pub creds_per_frame: u32,
    /// Simulated cycles charged per system call and per populated page.
    pub syscall_cycles: u64,
    pub populate_cycles_per_page: u64,
    /// Expected frames taken by other tenants per attacker allocation.
    pub background_allocs: f64,
    pub defense: DefenseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Uniform additive jitter in `[0, amplitude)` cycles on measured latencies.
    pub amplitude: u32,
    pub spike_prob: f64,
    pub spike_cycles: u32,
}

impl NoiseConfig {
    pub fn off() -> Self {
        NoiseConfig { amplitude: 0, spike_prob: 0.0, spike_cycles: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    pub name: String,
    pub dram: DramConfig,
    pub caches: CacheConfig,
    pub tlb: TlbConfig,
    pub psc: PscConfig,
    pub latency: LatencyConfig,
    pub flip: FlipConfig,
    pub os: OsConfig,
    pub noise: NoiseConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Superpage,
    Regular,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Superpage => "superpage",
            Regime::Regular => "regular",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "superpage" | "huge" => Some(Regime::Superpage),
            "regular" | "4k" => Some(Regime::Regular),
            _ => None,
        }
    }
}

/// Which sprayed windows a flip check reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanScope {
    /// Windows whose tables sit in the row between the hammered pair.
    VictimBand,
    /// Every window between the two hammered addresses.
    PairSpan,
    /// Every sprayed window.
    FullSpray,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub regime: Regime,
    /// Trials per size step in the TLB minimal-size search.
    pub tlb_trials: u32,
    /// Trials per size step in the LLC minimal-size search.
    pub llc_trials: u32,
    /// A size step fails once its rate falls this far below the starting rate.
    pub trim_tolerance: f64,
    /// Trials per candidate class when selecting an LLC eviction set.
    pub select_trials: u32,
    /// Trials per candidate pair in the bank probe.
    pub probe_trials: u32,
    /// Idle cycles before each bank-probe measurement.
    pub probe_spin_cycles: u64,
    /// Page-table pages to spray.
    pub spray_tables: u32,
    /// Spray batches; each batch maps its windows to a fresh shared frame.
    pub spray_batches: u32,
    /// Private pages mapped in slices ahead of each batch's shared frame,
    /// spreading those frames through free memory.
    #[serde(default)]
    pub drain_pages: u32,
    /// Processes spawned in slices during the spray (credential spray).
    pub cred_spray_processes: u32,
    /// Candidate pairs examined per probe batch.
    pub pair_batch: u32,
    pub max_pairs: u32,
    /// Refresh epochs spent hammering each pair.
    pub epochs_per_pair: u32,
    /// Rounds between flip checks; 0 checks once per refresh epoch.
    pub check_every_rounds: u32,
    pub max_flips: u32,
    /// Idle cycles added to every hammer round.
    pub padding_cycles: u64,
    pub scan_scope: ScanScope,
    /// Skip the online size searches and use these sizes.
    #[serde(default)]
    pub tlb_evset_size: Option<u32>,
    #[serde(default)]
    pub llc_evset_size: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub machine: MachineConfig,
    pub attack: AttackConfig,
}

pub const PAGE_SIZE: u64 = 4096;
pub const HUGE_PAGE_SIZE: u64 = 2 << 20;

pub const PRESETS: [&str; 4] = ["desk", "t420", "x230", "e6420"];

pub fn preset(name: &str) -> Option<Config> {
    match name {
        "desk" => Some(desk()),
        "t420" => Some(laptop("t420", 12, 30)),
        "x230" => Some(laptop("x230", 12, 28)),
        "e6420" => Some(laptop("e6420", 16, 32)),
        _ => None,
    }
}

pub fn list_presets() -> Vec<(&'static str, Config)> {
    PRESETS.iter().map(|n| (*n, preset(n).expect("preset"))).collect()
}

fn default_attack() -> AttackConfig {
    AttackConfig {
        regime: Regime::Superpage,
        tlb_trials: 100,
        llc_trials: 100,
        trim_tolerance: 0.02,
        select_trials: 9,
        probe_trials: 32,
        probe_spin_cycles: 1000,
        spray_tables: 7168,
        spray_batches: 4,
        drain_pages: 1024,
        cred_spray_processes: 0,
        pair_batch: 16,
        max_pairs: 128,
        epochs_per_pair: 2,
        check_every_rounds: 0,
        max_flips: 512,
        padding_cycles: 0,
        scan_scope: ScanScope::VictimBand,
        tlb_evset_size: None,
        llc_evset_size: None,
    }
}

fn l1_tlb_level(sets: u32, ways: u32) -> TlbLevelConfig {
    TlbLevelConfig { sets, ways, hash: TlbHash::Linear, policy: PolicyConfig::new(PolicyKind::TrueLru) }
}

fn tlb_level(sets: u32, ways: u32) -> TlbLevelConfig {
    TlbLevelConfig { sets, ways, hash: TlbHash::Linear, policy: PolicyConfig::new(PolicyKind::QuadAge) }
}

fn llc_policy() -> PolicyConfig {
    PolicyConfig { kind: PolicyKind::TrueLru, insert_age: 2, random_victim: 0.02 }
}

/// Scaled-down machine: 64 MiB of DRAM, one 12-way LLC slice.
pub fn desk() -> Config {
    let machine = MachineConfig {
        name: "desk".into(),
        dram: DramConfig {
            channels: 1,
            ranks: 1,
            banks_per_rank: 8,
            rows_per_bank: 256,
            row_bytes: 32 << 10,
            layout: BitLayout::linear(15, 3, 0, 0, 8),
            t_row_hit: 80,
            t_row_miss: 130,
            t_row_conflict: 170,
            row_idle_close_cycles: 400,
        },
        caches: CacheConfig {
            line_bytes: 64,
            l1: LevelConfig { sets: 64, ways: 8, policy: PolicyConfig::new(PolicyKind::TrueLru) },
            l2: LevelConfig { sets: 512, ways: 8, policy: PolicyConfig::new(PolicyKind::TrueLru) },
            llc: LevelConfig { sets: 1024, ways: 12, policy: llc_policy() },
            llc_slices: 1,
            slice_hash: vec![],
        },
        tlb: TlbConfig { l1d: l1_tlb_level(16, 4), l2s: tlb_level(32, 4), huge: l1_tlb_level(8, 4) },
        psc: PscConfig { pde: 16, pdpte: 8, pml4e: 4, lookup_cycles: 2 },
        latency: LatencyConfig { l1_hit: 4, l2_hit: 12, llc_hit: 30, tlb_l1_hit: 1, tlb_l2_hit: 8, walk_base: 20, mlp_width: 8 },
        flip: FlipConfig {
            density_per_mbit: 200.0,
            true_fraction: 0.75,
            threshold_min: 1500,
            threshold_max: 2500,
            refresh_epoch_cycles: 1_000_000,
            polarity_block_rows: 8,
        },
        os: OsConfig {
            p_consec: 0.9,
            pcp_batch: 255,
            boot_kernel_frames: 256,
            sentinel_frame: 7,
            creds_per_frame: 16,
            syscall_cycles: 500,
            populate_cycles_per_page: 200,
            background_allocs: 0.0,
            defense: DefenseConfig {
                kind: DefenseKind::None,
                kernel_rows: 128,
                buffer_rows: 1,
                user_slots: 2,
                cta_rows: 128,
                cta_verify_true_cells: true,
            },
        },
        noise: NoiseConfig { amplitude: 6, spike_prob: 0.002, spike_cycles: 800 },
    };
    Config { machine, attack: default_attack() }
}

/// Laptop-class machines: 8 GiB dual-channel DDR3, two LLC slices.
fn laptop(name: &str, llc_ways: u32, llc_hit: u32) -> Config {
    // column 0..12, channel 13^18, bank 14^18..16^20, rank 17^21, row 18..32
    let layout = BitLayout {
        column: bit_masks(0, 13),
        bank: vec![(1 << 14) | (1 << 18), (1 << 15) | (1 << 19), (1 << 16) | (1 << 20)],
        rank: vec![(1 << 17) | (1 << 21)],
        channel: vec![(1 << 13) | (1 << 18)],
        row: bit_masks(18, 15),
    };
    let mut cfg = desk();
    let m = &mut cfg.machine;
    m.name = name.into();
    m.dram = DramConfig {
        channels: 2,
        ranks: 2,
        banks_per_rank: 8,
        rows_per_bank: 32768,
        row_bytes: 8 << 10,
        layout,
        t_row_hit: 80,
        t_row_miss: 130,
        t_row_conflict: 170,
        row_idle_close_cycles: 400,
    };
    m.caches.llc = LevelConfig { sets: 2048, ways: llc_ways, policy: llc_policy() };
    m.caches.llc_slices = 2;
    m.caches.slice_hash = vec![0x1_B5F5_7540 & ((1u64 << 33) - 1)];
    m.caches.l2 = LevelConfig { sets: 512, ways: 8, policy: PolicyConfig::new(PolicyKind::TrueLru) };
    m.tlb = TlbConfig { l1d: l1_tlb_level(16, 4), l2s: tlb_level(128, 4), huge: l1_tlb_level(8, 4) };
    m.latency.llc_hit = llc_hit;
    m.flip.threshold_min = 40_000;
    m.flip.threshold_max = 60_000;
    m.flip.refresh_epoch_cycles = 128_000_000;
    m.os.boot_kernel_frames = 16384;
    m.os.defense.kernel_rows = 12288;
    m.os.defense.cta_rows = 16384;
    cfg
}

fn is_pow2(x: u64) -> bool {
    x != 0 && x & (x - 1) == 0
}

fn err(path: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.to_string(), msg: msg.into() }
}

impl MachineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dram;
        for (p, v) in [
            ("machine.dram.channels", d.channels as u64),
            ("machine.dram.ranks", d.ranks as u64),
            ("machine.dram.banks_per_rank", d.banks_per_rank as u64),
            ("machine.dram.rows_per_bank", d.rows_per_bank as u64),
            ("machine.dram.row_bytes", d.row_bytes),
        ] {
            if !is_pow2(v) {
                return Err(err(p, "must be a nonzero power of two"));
            }
        }
        if d.row_bytes < PAGE_SIZE {
            return Err(err("machine.dram.row_bytes", "must hold at least one page"));
        }
        let l = &d.layout;
        for (p, masks, dim) in [
            ("machine.dram.layout.column", &l.column, d.row_bytes),
            ("machine.dram.layout.bank", &l.bank, d.banks_per_rank as u64),
            ("machine.dram.layout.rank", &l.rank, d.ranks as u64),
            ("machine.dram.layout.channel", &l.channel, d.channels as u64),
            ("machine.dram.layout.row", &l.row, d.rows_per_bank as u64),
        ] {
            if 1u64 << masks.len() != dim {
                return Err(err(p, format!("needs log2({dim}) masks, found {}", masks.len())));
            }
        }
        // column bits must be the low page bits so that frames never straddle rows
        for b in 0..12 {
            if l.column.get(b) != Some(&(1u64 << b)) {
                return Err(err("machine.dram.layout.column", "bits 0..12 must map to the low column bits"));
            }
        }
        crate::address_map::DramMapper::new(d).map_err(|e| err("machine.dram.layout", e.to_string()))?;
        if !(d.t_row_hit < d.t_row_miss && d.t_row_miss <= d.t_row_conflict) {
            return Err(err("machine.dram.t_row_hit", "requires t_row_hit < t_row_miss <= t_row_conflict"));
        }

        let c = &self.caches;
        if c.line_bytes != 64 {
            return Err(err("machine.caches.line_bytes", "only 64-byte lines are supported"));
        }
        for (p, lv) in [("machine.caches.l1", &c.l1), ("machine.caches.l2", &c.l2), ("machine.caches.llc", &c.llc)] {
            if !is_pow2(lv.sets as u64) {
                return Err(err(&format!("{p}.sets"), "must be a nonzero power of two"));
            }
            if lv.ways == 0 || lv.ways > 64 {
                return Err(err(&format!("{p}.ways"), "must be in 1..=64"));
            }
            check_policy(&format!("{p}.policy"), &lv.policy)?;
        }
        if !is_pow2(c.llc_slices as u64) || 1u64 << c.slice_hash.len() != c.llc_slices as u64 {
            return Err(err("machine.caches.slice_hash", "needs log2(llc_slices) masks"));
        }
        if c.llc_bytes() < (c.l1.sets * c.l1.ways + c.l2.sets * c.l2.ways) as u64 * c.line_bytes {
            return Err(err("machine.caches.llc", "inclusive LLC smaller than L1+L2"));
        }

        for (p, lv) in [("machine.tlb.l1d", &self.tlb.l1d), ("machine.tlb.l2s", &self.tlb.l2s), ("machine.tlb.huge", &self.tlb.huge)] {
            if !is_pow2(lv.sets as u64) {
                return Err(err(&format!("{p}.sets"), "must be a nonzero power of two"));
            }
            if !is_pow2(lv.ways as u64) || lv.ways > 64 {
                return Err(err(&format!("{p}.ways"), "must be a power of two up to 64"));
            }
            check_policy(&format!("{p}.policy"), &lv.policy)?;
        }
        if self.psc.pde == 0 || self.psc.pdpte == 0 || self.psc.pml4e == 0 {
            return Err(err("machine.psc", "cache sizes must be nonzero"));
        }
        let lat = &self.latency;
        if !(lat.l1_hit < lat.l2_hit && lat.l2_hit < lat.llc_hit) {
            return Err(err("machine.latency.l1_hit", "requires l1_hit < l2_hit < llc_hit"));
        }
        if lat.tlb_l1_hit >= lat.tlb_l2_hit {
            return Err(err("machine.latency.tlb_l1_hit", "requires tlb_l1_hit < tlb_l2_hit"));
        }
        if lat.mlp_width == 0 {
            return Err(err("machine.latency.mlp_width", "must be at least 1"));
        }

        let f = &self.flip;
        if !(f.density_per_mbit >= 0.0 && f.density_per_mbit <= 1e6) {
            return Err(err("machine.flip.density_per_mbit", "must lie in [0, 1e6]"));
        }
        if !(0.0..=1.0).contains(&f.true_fraction) {
            return Err(err("machine.flip.true_fraction", "must lie in [0, 1]"));
        }
        if f.threshold_min == 0 || f.threshold_min > f.threshold_max {
            return Err(err("machine.flip.threshold_min", "requires 0 < threshold_min <= threshold_max"));
        }

        let o = &self.os;
        if !(0.0..=1.0).contains(&o.p_consec) {
            return Err(err("machine.os.p_consec", "must lie in [0, 1]"));
        }
        if !(o.background_allocs >= 0.0 && o.background_allocs < 64.0) {
            return Err(err("machine.os.background_allocs", "must lie in [0, 64)"));
        }
        if o.pcp_batch == 0 {
            return Err(err("machine.os.pcp_batch", "must be at least 1"));
        }
        let frames = d.frames();
        if o.boot_kernel_frames >= frames || o.sentinel_frame >= o.boot_kernel_frames.max(1) {
            return Err(err("machine.os.sentinel_frame", "must be a boot kernel frame inside DRAM"));
        }
        if o.creds_per_frame == 0 || o.creds_per_frame as u64 * crate::os::cred::CRED_BYTES > PAGE_SIZE {
            return Err(err("machine.os.creds_per_frame", "creds must fit in one page"));
        }
        let df = &o.defense;
        let rows = d.rows_per_bank;
        if df.kernel_rows == 0 || df.kernel_rows + df.buffer_rows >= rows {
            return Err(err("machine.os.defense.kernel_rows", "kernel and buffer rows must leave user rows"));
        }
        if df.user_slots == 0 || df.user_slots > 253 || df.user_slots > rows - df.kernel_rows {
            return Err(err("machine.os.defense.user_slots", "must be in 1..=user rows"));
        }
        if df.cta_rows == 0 || df.cta_rows >= rows {
            return Err(err("machine.os.defense.cta_rows", "must leave rows below the table region"));
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.spike_prob) {
            return Err(err("machine.noise.spike_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn check_policy(path: &str, p: &PolicyConfig) -> Result<(), ConfigError> {
    if p.insert_age > 3 {
        return Err(err(&format!("{path}.insert_age"), "must be in 0..=3"));
    }
    if !(0.0..=1.0).contains(&p.random_victim) {
        return Err(err(&format!("{path}.random_victim"), "must lie in [0, 1]"));
    }
    Ok(())
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (p, v) in [
            ("attack.tlb_trials", self.tlb_trials),
            ("attack.llc_trials", self.llc_trials),
            ("attack.select_trials", self.select_trials),
            ("attack.probe_trials", self.probe_trials),
            ("attack.spray_batches", self.spray_batches),
            ("attack.pair_batch", self.pair_batch),
            ("attack.epochs_per_pair", self.epochs_per_pair),
        ] {
            if v == 0 {
                return Err(err(p, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.trim_tolerance) {
            return Err(err("attack.trim_tolerance", "must lie in [0, 1)"));
        }
        if self.spray_tables < self.spray_batches {
            return Err(err("attack.spray_tables", "must be at least spray_batches"));
        }
        Ok(())
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.machine.validate()?;
        self.attack.validate()
    }

    /// Parses a JSON config. A top-level `"base": "<preset>"` key starts from
    /// that preset and deep-merges the remaining keys over it.
    pub fn from_json(text: &str) -> Result<Config, ConfigError> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(obj) = v.as_object_mut() {
            if let Some(base) = obj.remove("base") {
                let name = base.as_str().ok_or_else(|| err("base", "must be a preset name"))?;
                let p = preset(name).ok_or_else(|| err("base", format!("unknown preset `{name}`")))?;
                let mut merged = serde_json::to_value(&p).expect("preset serializes");
                merge(&mut merged, v);
                v = merged;
            }
        }
        let cfg: Config = serde_path_from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
        Config::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Deserializes while tracking the JSON path of the first failing field.
fn serde_path_from_value(v: Value) -> Result<Config, ConfigError> {
    match serde_json::from_value::<Config>(v.clone()) {
        Ok(c) => Ok(c),
        Err(e) => {
            let path = locate_error(&v).unwrap_or_default();
            Err(ConfigError::Schema { path, msg: e.to_string() })
        }
    }
}

/// Finds the deepest sub-object that fails to parse on its own, by probing
/// each known section type in turn.
fn locate_error(v: &Value) -> Option<String> {
    fn probe<T: serde::de::DeserializeOwned>(v: &Value, key: &str, prefix: &str) -> Option<String> {
        let sub = v.get(key)?;
        match serde_json::from_value::<T>(sub.clone()) {
            Ok(_) => None,
            Err(_) => Some(format!("{prefix}{key}")),
        }
    }
    if let Some(m) = v.get("machine") {
        let found = probe::<DramConfig>(m, "dram", "machine.")
            .or_else(|| probe::<CacheConfig>(m, "caches", "machine."))
            .or_else(|| probe::<TlbConfig>(m, "tlb", "machine."))
            .or_else(|| probe::<PscConfig>(m, "psc", "machine."))
            .or_else(|| probe::<LatencyConfig>(m, "latency", "machine."))
            .or_else(|| probe::<FlipConfig>(m, "flip", "machine."))
            .or_else(|| probe::<OsConfig>(m, "os", "machine."))
            .or_else(|| probe::<NoiseConfig>(m, "noise", "machine."));
        if found.is_some() {
            return found;
        }
        if serde_json::from_value::<MachineConfig>(m.clone()).is_err() {
            return Some("machine".into());
        }
    } else {
        return Some("machine".into());
    }
    if v.get("attack").is_none() || serde_json::from_value::<AttackConfig>(v["attack"].clone()).is_err() {
        return Some("attack".into());
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for (name, cfg) in list_presets() {
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn laptop_llc_sizes() {
        let t = preset("t420").unwrap();
        assert_eq!(t.machine.caches.llc.ways, 12);
        assert_eq!(t.machine.caches.llc_bytes(), 3 << 20);
        let e = preset("e6420").unwrap();
        assert_eq!(e.machine.caches.llc.ways, 16);
        assert_eq!(e.machine.caches.llc_bytes(), 4 << 20);
        assert_eq!(t.machine.dram.dram_bytes(), 8 << 30);
        assert_eq!(t.machine.dram.rows_size(), 256 << 10);
    }

    #[test]
    fn desk_geometry() {
        let d = desk();
        assert_eq!(d.machine.dram.dram_bytes(), 64 << 20);
        assert_eq!(d.machine.dram.rows_size(), 256 << 10);
    }

    #[test]
    fn base_merge_overrides_one_field() {
        let c = Config::from_json(r#"{"base":"desk","machine":{"os":{"p_consec":0.5}}}"#).unwrap();
        assert_eq!(c.machine.os.p_consec, 0.5);
        assert_eq!(c.machine.caches.llc.ways, 12);
    }

    #[test]
    fn malformed_config_names_field() {
        let e = Config::from_json(r#"{"base":"desk","machine":{"caches":{"llc":{"sets":"many"}}}}"#).unwrap_err();
        assert!(e.to_string().contains("machine.caches"), "{e}");
        let e = Config::from_json(r#"{"base":"desk","machine":{"caches":{"llc":{"sets":1000}}}}"#).unwrap_err();
        assert!(e.to_string().contains("machine.caches.llc.sets"), "{e}");
        let e = Config::from_json(r#"{"base":"desk","machine":{"flip":{"true_fraction":2.0}}}"#).unwrap_err();
        assert!(e.to_string().contains("machine.flip.true_fraction"), "{e}");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = desk();
        let mut b = desk();
        assert_eq!(a.hash(), b.hash());
        b.machine.os.p_consec = 0.8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn json_roundtrip() {
        for (_, c) in list_presets() {
            let back = Config::from_json(&c.to_json()).unwrap();
            assert_eq!(back, c);
        }
    }
}
