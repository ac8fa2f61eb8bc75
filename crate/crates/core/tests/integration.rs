use proptest::prelude::*;
use walkhammer::address_map::{split_virtual, DramMapper, PhysAddr, VirtAddr};
use walkhammer::attack::{run_pthammer, AttackReport, Escalation};
use walkhammer::cache_tlb::CacheHierarchy;
use walkhammer::config::{desk, list_presets, preset, Config, DefenseKind, LevelConfig, PolicyConfig, PolicyKind, PAGE_SIZE};
use walkhammer::dram::flip_log_csv;
use walkhammer::error::OsError;
use walkhammer::mmu::WalkTrace;
use walkhammer::os::{alloc_log_csv, HardwareInfo, MapKind, ProcessHandle, Syscalls, System};

/// Forwards every call and records accesses outside the regions this
/// process has mapped.
struct Audited<'a> {
    inner: ProcessHandle<'a>,
    regions: Vec<(u64, u64)>,
    violations: Vec<u64>,
    accesses: u64,
}

impl Audited<'_> {
    fn note(&mut self, va: u64) {
        self.accesses += 1;
        if !self.regions.iter().any(|&(s, l)| va >= s && va < s + l) {
            self.violations.push(va);
        }
    }
}

impl Syscalls for Audited<'_> {
    fn hw(&self) -> HardwareInfo {
        self.inner.hw()
    }
    fn getpid(&self) -> u32 {
        self.inner.getpid()
    }
    fn getuid(&self) -> u32 {
        self.inner.getuid()
    }
    fn mmap(&mut self, hint: Option<u64>, len: u64, kind: MapKind, populate: bool) -> Result<u64, OsError> {
        let va = self.inner.mmap(hint, len, kind, populate)?;
        self.regions.push((va, len));
        Ok(va)
    }
    fn munmap(&mut self, va: u64, len: u64) -> Result<(), OsError> {
        self.inner.munmap(va, len)?;
        // split any region that overlaps the hole
        let mut out = Vec::new();
        for &(s, l) in &self.regions {
            let e = s + l;
            if e <= va || s >= va + len {
                out.push((s, l));
                continue;
            }
            if s < va {
                out.push((s, va - s));
            }
            if e > va + len {
                out.push((va + len, e - va - len));
            }
        }
        self.regions = out;
        Ok(())
    }
    fn spawn(&mut self, n: u32) -> Result<(), OsError> {
        self.inner.spawn(n)
    }
    fn read_u64(&mut self, va: u64) -> Result<u64, OsError> {
        self.note(va);
        self.inner.read_u64(va)
    }
    fn write_u64(&mut self, va: u64, v: u64) -> Result<(), OsError> {
        self.note(va);
        self.inner.write_u64(va, v)
    }
    fn read_page(&mut self, va: u64, buf: &mut [u8]) -> Result<(), OsError> {
        self.note(va);
        self.inner.read_page(va, buf)
    }
    fn timed_read(&mut self, va: u64) -> Result<u64, OsError> {
        self.note(va);
        self.inner.timed_read(va)
    }
    fn touch_batch(&mut self, vas: &[u64]) -> Result<u64, OsError> {
        for &v in vas {
            self.note(v);
        }
        self.inner.touch_batch(vas)
    }
    fn spin(&mut self, cycles: u64) {
        self.inner.spin(cycles)
    }
    fn now(&self) -> u64 {
        self.inner.now()
    }
}

#[test]
fn attack_only_touches_its_own_mappings() {
    let cfg = desk();
    let mut sys = System::new(&cfg.machine, 3).unwrap();
    let pid = sys.spawn_attacker().unwrap();
    let mut a = Audited { inner: sys.handle(pid), regions: Vec::new(), violations: Vec::new(), accesses: 0 };
    let r = run_pthammer(&mut a, &cfg.attack, DefenseKind::None, 3);
    assert!(a.accesses > 100_000, "{}", a.accesses);
    // the only reads beyond the OS's view are of the slot the attacker
    // forges in a flipped table, after the flip
    let stray: Vec<u64> = a.violations.iter().copied().filter(|v| v & 0x1f_ffff != 7 * PAGE_SIZE).collect();
    assert!(stray.is_empty(), "accesses outside mappings {stray:x?}");
    assert_eq!(r.escalation, Escalation::L1pt, "{:?}", r.error);
}

#[test]
fn takeover_reads_the_sentinel_frame() {
    let cfg = desk();
    let mut sys = System::new(&cfg.machine, 5).unwrap();
    let pid = sys.spawn_attacker().unwrap();
    let r = {
        let mut h = sys.handle(pid);
        run_pthammer(&mut h, &cfg.attack, DefenseKind::None, 5)
    };
    assert!(r.escalated());
    let va = r.sentinel_va.expect("sentinel address reported");
    let root = sys.root_of(pid).unwrap();
    let pa = sys.machine.translate_check(VirtAddr(va), root).unwrap();
    assert_eq!(pa.0 / PAGE_SIZE, cfg.machine.os.sentinel_frame);
    // the rewritten entry lives in one of the attacker's own tables
    let pte = sys.machine.l1pte_addr(VirtAddr(va), root).unwrap();
    assert!(sys.table_frames(pid, 1).contains(&(pte.0 / PAGE_SIZE)));
    assert!(r.first_flip_cycle.is_some());
}

#[test]
fn unescalated_run_reports_why() {
    let mut cfg = desk();
    cfg.attack.max_pairs = 1;
    cfg.attack.epochs_per_pair = 1;
    let mut sys = System::new(&cfg.machine, 1).unwrap();
    let pid = sys.spawn_attacker().unwrap();
    let r = {
        let mut h = sys.handle(pid);
        run_pthammer(&mut h, &cfg.attack, DefenseKind::None, 1)
    };
    if r.escalation == Escalation::None {
        assert!(r.pairs_hammered <= 1);
    }
    assert!(sys.check_confinement(pid).is_ok() || r.flips_detected > 0);
}

#[test]
fn report_exports_are_consistent() {
    let cfg = desk();
    let mut sys = System::new(&cfg.machine, 2).unwrap();
    sys.set_alloc_logging(true);
    let pid = sys.spawn_attacker().unwrap();
    let r = {
        let mut h = sys.handle(pid);
        run_pthammer(&mut h, &cfg.attack, DefenseKind::None, 2)
    };
    let cols = AttackReport::CSV_HEADER.split(',').count();
    assert_eq!(r.csv_row().split(',').count(), cols);
    let json = serde_json::to_string(&r.events).unwrap();
    let back: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(back.as_array().unwrap().len(), r.events.len());
    let full: AttackReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(full, r);

    let flips = flip_log_csv(sys.machine.dram.flip_log());
    assert!(flips.starts_with("cycle,bank,row,bit,polarity\n"));
    assert_eq!(flips.lines().count(), sys.machine.dram.flip_log().len() + 1);
    let allocs = alloc_log_csv(sys.alloc_log());
    assert!(allocs.lines().count() > 7000, "{}", allocs.lines().count());
}

#[test]
fn walk_trace_round_trips() {
    let cfg = desk();
    let mut sys = System::new(&cfg.machine, 4).unwrap();
    let pid = sys.spawn_attacker().unwrap();
    let va = sys.handle(pid).mmap(None, 1 << 21, MapKind::Anon, true).unwrap();
    let root = sys.root_of(pid).unwrap();
    sys.machine.tlb.flush();
    let t = sys.machine.translate(VirtAddr(va + 0x1234), root).unwrap();
    assert_eq!(t.trace.fetches.len(), 4);
    let back: WalkTrace = serde_json::from_str(&serde_json::to_string(&t.trace).unwrap()).unwrap();
    assert_eq!(back, t.trace);
}

#[test]
fn presets_round_trip_through_json() {
    for (name, c) in list_presets() {
        let back = Config::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c, "{name}");
        assert_eq!(back.hash(), c.hash());
    }
    let over = Config::from_json(r#"{"base":"t420","attack":{"max_pairs":3}}"#).unwrap();
    assert_eq!(over.attack.max_pairs, 3);
    assert_ne!(over.hash(), preset("t420").unwrap().hash());
}

fn small_caches(kind: PolicyKind) -> walkhammer::config::CacheConfig {
    let mut cc = desk().machine.caches;
    let p = PolicyConfig::new(kind);
    cc.l1 = LevelConfig { sets: 4, ways: 2, policy: p.clone() };
    cc.l2 = LevelConfig { sets: 8, ways: 4, policy: p.clone() };
    cc.llc = LevelConfig { sets: 16, ways: 6, policy: p };
    cc.llc_slices = 1;
    cc.slice_hash = Vec::new();
    cc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laptop_mapping_round_trips(pa in 0u64..(8u64 << 30)) {
        for name in ["t420", "x230", "e6420"] {
            let m = DramMapper::new(&preset(name).unwrap().machine.dram).unwrap();
            let loc = m.phys_to_dram(PhysAddr(pa)).unwrap();
            prop_assert_eq!(m.dram_to_phys(loc).0, pa);
        }
    }

    #[test]
    fn hierarchy_stays_inclusive(
        kind in prop_oneof![Just(PolicyKind::TrueLru), Just(PolicyKind::TreePlru), Just(PolicyKind::QuadAge)],
        trace in proptest::collection::vec(0u64..300, 1..2000),
    ) {
        let cc = small_caches(kind);
        let mut h = CacheHierarchy::new(&cc, 1);
        for line in trace {
            h.cache_access(PhysAddr(line * cc.line_bytes));
            prop_assert!(h.check_inclusive());
        }
    }

    #[test]
    fn virtual_split_joins_back(v in 0u64..(1u64 << 47)) {
        let idx = split_virtual(VirtAddr(v)).unwrap();
        prop_assert_eq!(idx.join(), v);
    }

    #[test]
    fn mapped_pages_translate_consistently(pages in proptest::collection::vec(0u64..512, 1..64), seed in 0u64..1000) {
        let cfg = desk();
        let mut sys = System::new(&cfg.machine, seed).unwrap();
        let pid = sys.spawn_attacker().unwrap();
        let base = sys.handle(pid).mmap(None, 1 << 21, MapKind::Anon, true).unwrap();
        let root = sys.root_of(pid).unwrap();
        for p in pages {
            let va = VirtAddr(base + p * PAGE_SIZE + 8 * p);
            let a = sys.machine.translate(va, root).unwrap().pa;
            prop_assert_eq!(Some(a), sys.machine.translate_check(va, root).ok());
        }
    }
}
