//! Byte-addressable DRAM with row buffers, staggered refresh, activation
//! accounting and a deterministic threshold disturbance model.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::address_map::{DramLocation, DramMapper, PhysAddr};
use crate::config::{DramConfig, FlipConfig, PAGE_SIZE};
use crate::error::MapError;
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    /// Flips 1 to 0 only.
    True,
    /// Flips 0 to 1 only.
    Anti,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::True => "true",
            CellKind::Anti => "anti",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlippableCell {
    pub bank: u32,
    pub row: u32,
    /// Bit offset within the row.
    pub bit: u32,
    pub kind: CellKind,
    pub threshold: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowOutcome {
    RowHit,
    RowMiss,
    RowConflict,
}

/// Who issued a DRAM access.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessTag {
    Data,
    /// Page-walk fetch of a table entry at the given level (1 = L1PTE).
    Walk(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramEvent {
    pub cycle: u64,
    pub pa: u64,
    pub bank: u32,
    pub row: u32,
    pub outcome: RowOutcome,
    pub tag: AccessTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipEvent {
    pub cycle: u64,
    pub bank: u32,
    pub row: u32,
    pub bit: u32,
    pub polarity: CellKind,
    /// Physical byte address and bit within that byte.
    pub pa: u64,
    pub bit_in_byte: u8,
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    bit: u32,
    kind: CellKind,
    threshold: u32,
    /// Epoch in which the cell last flipped.
    spent: u32,
}

#[derive(Clone, Debug, Default)]
struct RowCells {
    min_threshold: u32,
    has_anti: bool,
    cells: Vec<Cell>,
}

#[derive(Clone, Copy, Debug, Default)]
struct RowCounter {
    epoch: u32,
    count: u32,
}

#[derive(Clone, Copy, Debug, Default)]
struct BankState {
    open_row: Option<u32>,
    last_access: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct DramAccess {
    pub latency: u32,
    pub outcome: RowOutcome,
    pub bank: u32,
    pub row: u32,
}

const NO_EPOCH: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub struct DramState {
    cfg: DramConfig,
    flip: FlipConfig,
    seed: u64,
    mapper: DramMapper,
    banks: Vec<BankState>,
    counters: Vec<RowCounter>,
    cells: HashMap<u32, RowCells>,
    frames: Vec<Option<Box<[u8]>>>,
    flip_log: Vec<FlipEvent>,
    trace: Option<Vec<DramEvent>>,
    now: u64,
}

impl DramState {
    pub fn new(cfg: &DramConfig, flip: &FlipConfig, seed: u64) -> Result<Self, MapError> {
        let mapper = DramMapper::new(cfg)?;
        let nbanks = cfg.total_banks() as usize;
        let rows = cfg.rows_per_bank as usize;
        let mut d = DramState {
            cfg: cfg.clone(),
            flip: flip.clone(),
            seed,
            mapper,
            banks: vec![BankState::default(); nbanks],
            counters: vec![RowCounter { epoch: NO_EPOCH, count: 0 }; nbanks * rows],
            cells: HashMap::new(),
            frames: vec![None; cfg.frames() as usize],
            flip_log: Vec::new(),
            trace: None,
            now: 0,
        };
        d.seed_cell_map(seed, flip.density_per_mbit, flip.true_fraction, (flip.threshold_min, flip.threshold_max))?;
        Ok(d)
    }

    /// Re-seeds the flippable-cell map. Cells are generated lazily per row
    /// from `(seed, bank, row)`, so the map is identical across runs.
    pub fn seed_cell_map(&mut self, seed: u64, density: f64, true_fraction: f64, range: (u32, u32)) -> Result<(), MapError> {
        if !(0.0..=1e6).contains(&density) {
            return Err(MapError::Density);
        }
        self.seed = seed;
        self.flip.density_per_mbit = density;
        self.flip.true_fraction = true_fraction;
        self.flip.threshold_min = range.0.max(1);
        self.flip.threshold_max = range.1.max(range.0.max(1));
        self.cells.clear();
        Ok(())
    }

    pub fn mapper(&self) -> &DramMapper {
        &self.mapper
    }

    pub fn config(&self) -> &DramConfig {
        &self.cfg
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    fn row_key(&self, bank: u32, row: u32) -> usize {
        bank as usize * self.cfg.rows_per_bank as usize + row as usize
    }

    fn row_bits(&self) -> u64 {
        self.cfg.row_bytes * 8
    }

    /// Polarity shared by a block of row indices, or `None` in per-cell mode.
    fn block_kind(&self, row: u32) -> Option<CellKind> {
        let b = self.flip.polarity_block_rows;
        if b == 0 {
            return None;
        }
        let mut r = util::rng(self.seed, 0xB10C_0000 ^ (row / b) as u64);
        Some(if r.random::<f64>() < self.flip.true_fraction { CellKind::True } else { CellKind::Anti })
    }

    fn generate_row(&self, bank: u32, row: u32) -> RowCells {
        let key = self.row_key(bank, row) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(util::derive(self.seed, 0xCE11_0000_0000 ^ key));
        let bits = self.row_bits();
        let p = self.flip.density_per_mbit / 1e6;
        let n = if p <= 0.0 { 0 } else { Binomial::new(bits, p.min(1.0)).expect("valid binomial").sample(&mut rng) };
        let block = self.block_kind(row);
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, bits as usize, n as usize).into_vec();
        picks.sort_unstable();
        let mut out = RowCells { min_threshold: u32::MAX, has_anti: false, cells: Vec::with_capacity(picks.len()) };
        for bit in picks {
            let kind = block.unwrap_or_else(|| if rng.random::<f64>() < self.flip.true_fraction { CellKind::True } else { CellKind::Anti });
            let threshold = rng.random_range(self.flip.threshold_min..=self.flip.threshold_max);
            out.push(Cell { bit: bit as u32, kind, threshold, spent: NO_EPOCH });
        }
        out
    }

    fn row_cells(&mut self, bank: u32, row: u32) -> &mut RowCells {
        let key = self.row_key(bank, row) as u32;
        if !self.cells.contains_key(&key) {
            let rc = self.generate_row(bank, row);
            self.cells.insert(key, rc);
        }
        self.cells.get_mut(&key).expect("row generated")
    }

    /// Flippable cells of one row, generating them on first use.
    pub fn cells_in_row(&mut self, bank: u32, row: u32) -> Vec<FlippableCell> {
        self.row_cells(bank, row)
            .cells
            .iter()
            .map(|c| FlippableCell { bank, row, bit: c.bit, kind: c.kind, threshold: c.threshold })
            .collect()
    }

    pub fn row_has_anti(&mut self, bank: u32, row: u32) -> bool {
        self.row_cells(bank, row).has_anti
    }

    /// Test hook: places (or replaces) one cell.
    pub fn plant_cell(&mut self, cell: FlippableCell) {
        let rc = self.row_cells(cell.bank, cell.row);
        rc.cells.retain(|c| c.bit != cell.bit);
        rc.push(Cell { bit: cell.bit, kind: cell.kind, threshold: cell.threshold.max(1), spent: NO_EPOCH });
        rc.cells.sort_by_key(|c| c.bit);
    }

    /// Test hook: removes every cell of one row.
    pub fn clear_row_cells(&mut self, bank: u32, row: u32) {
        let rc = self.row_cells(bank, row);
        *rc = RowCells { min_threshold: u32::MAX, has_anti: false, cells: Vec::new() };
    }

    /// Refresh offset of a row within each epoch.
    fn refresh_offset(&self, row: u32) -> u64 {
        self.flip.refresh_epoch_cycles * row as u64 / self.cfg.rows_per_bank as u64
    }

    /// Index of the refresh window that contains `t` for this row.
    pub fn epoch_of(&self, row: u32, t: u64) -> u32 {
        let e = self.flip.refresh_epoch_cycles;
        if e == 0 {
            return 0;
        }
        let off = self.refresh_offset(row);
        if t < off {
            0
        } else {
            ((t - off) / e + 1) as u32
        }
    }

    /// Activations of a row since its last refresh, as of cycle `t`.
    pub fn activations_at(&self, bank: u32, row: u32, t: u64) -> u32 {
        let c = self.counters[self.row_key(bank, row)];
        if c.epoch == self.epoch_of(row, t) {
            c.count
        } else {
            0
        }
    }

    pub fn activations(&self, bank: u32, row: u32) -> u32 {
        self.activations_at(bank, row, self.now)
    }

    /// Advances the DRAM clock. Refresh is applied lazily: counters and spent
    /// flags carry the epoch in which they were written.
    pub fn refresh_tick(&mut self, now: u64) {
        self.now = self.now.max(now);
    }

    pub fn dram_access(&mut self, loc: DramLocation, now: u64) -> (u32, RowOutcome) {
        let pa = self.mapper.dram_to_phys(loc).0;
        let a = self.access(pa, now, AccessTag::Data);
        (a.latency, a.outcome)
    }

    /// Timed access to the row holding `pa`.
    pub fn access(&mut self, pa: u64, now: u64, tag: AccessTag) -> DramAccess {
        self.refresh_tick(now);
        let loc = self.mapper.locate(pa);
        let b = self.mapper.flat_bank(&loc);
        let idle = self.cfg.row_idle_close_cycles;
        let bank = &mut self.banks[b as usize];
        let open = match bank.open_row {
            Some(r) if idle > 0 && now.saturating_sub(bank.last_access) > idle => {
                let _ = r;
                None
            }
            o => o,
        };
        let outcome = match open {
            Some(r) if r == loc.row => RowOutcome::RowHit,
            Some(_) => RowOutcome::RowConflict,
            None => RowOutcome::RowMiss,
        };
        bank.open_row = Some(loc.row);
        bank.last_access = now;
        let latency = match outcome {
            RowOutcome::RowHit => self.cfg.t_row_hit,
            RowOutcome::RowMiss => self.cfg.t_row_miss,
            RowOutcome::RowConflict => self.cfg.t_row_conflict,
        };
        if let Some(t) = self.trace.as_mut() {
            t.push(DramEvent { cycle: now, pa, bank: b, row: loc.row, outcome, tag });
        }
        if outcome != RowOutcome::RowHit {
            self.activate(b, loc.row, now);
        }
        DramAccess { latency, outcome, bank: b, row: loc.row }
    }

    fn activate(&mut self, bank: u32, row: u32, now: u64) {
        let epoch = self.epoch_of(row, now);
        let key = self.row_key(bank, row);
        let c = &mut self.counters[key];
        if c.epoch != epoch {
            *c = RowCounter { epoch, count: 0 };
        }
        c.count = c.count.saturating_add(1);
        if row > 0 {
            self.evaluate_disturbance_at(bank, row - 1, now);
        }
        if row + 1 < self.cfg.rows_per_bank {
            self.evaluate_disturbance_at(bank, row + 1, now);
        }
    }

    /// Checks the two neighbours of `activated_row` and applies any flips.
    pub fn evaluate_disturbance(&mut self, bank: u32, activated_row: u32) -> Vec<(u32, u32)> {
        let start = self.flip_log.len();
        let now = self.now;
        if activated_row > 0 {
            self.evaluate_disturbance_at(bank, activated_row - 1, now);
        }
        if activated_row + 1 < self.cfg.rows_per_bank {
            self.evaluate_disturbance_at(bank, activated_row + 1, now);
        }
        self.flip_log[start..].iter().map(|f| (f.row, f.bit)).collect()
    }

    fn evaluate_disturbance_at(&mut self, bank: u32, victim: u32, now: u64) {
        let below = if victim > 0 { self.activations_at(bank, victim - 1, now) } else { 0 };
        let above = if victim + 1 < self.cfg.rows_per_bank { self.activations_at(bank, victim + 1, now) } else { 0 };
        let eff = below + above;
        let epoch = self.epoch_of(victim, now);
        if self.row_cells(bank, victim).min_threshold > eff {
            return;
        }
        let key = self.row_key(bank, victim) as u32;
        let mut rc = self.cells.remove(&key).expect("row generated");
        for cell in rc.cells.iter_mut() {
            if cell.threshold > eff || cell.spent == epoch {
                continue;
            }
            let loc = DramLocation { row: victim, column: cell.bit / 8, ..self.location_of_bank(bank) };
            let pa = self.mapper.dram_to_phys(loc).0;
            let bit = (cell.bit % 8) as u8;
            let cur = self.read_byte(pa) >> bit & 1;
            let admits = match cell.kind {
                CellKind::True => cur == 1,
                CellKind::Anti => cur == 0,
            };
            if !admits {
                continue;
            }
            self.write_byte(pa, self.read_byte(pa) ^ (1 << bit));
            cell.spent = epoch;
            self.flip_log.push(FlipEvent { cycle: now, bank, row: victim, bit: cell.bit, polarity: cell.kind, pa, bit_in_byte: bit });
        }
        self.cells.insert(key, rc);
    }

    fn location_of_bank(&self, flat: u32) -> DramLocation {
        let (channel, rank, bank) = self.mapper.split_bank(flat);
        DramLocation { channel, rank, bank, row: 0, column: 0 }
    }

    pub fn flip_log(&self) -> &[FlipEvent] {
        &self.flip_log
    }

    pub fn enable_trace(&mut self, on: bool) {
        self.trace = if on { Some(Vec::new()) } else { None };
    }

    pub fn take_trace(&mut self) -> Vec<DramEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    // ---- storage ----

    fn frame_mut(&mut self, frame: usize) -> &mut [u8] {
        self.frames[frame].get_or_insert_with(|| vec![0u8; PAGE_SIZE as usize].into_boxed_slice())
    }

    pub fn read_byte(&self, pa: u64) -> u8 {
        match &self.frames[(pa / PAGE_SIZE) as usize] {
            Some(f) => f[(pa % PAGE_SIZE) as usize],
            None => 0,
        }
    }

    pub fn write_byte(&mut self, pa: u64, v: u8) {
        self.frame_mut((pa / PAGE_SIZE) as usize)[(pa % PAGE_SIZE) as usize] = v;
    }

    /// Aligned 64-bit little-endian read.
    #[inline]
    pub fn read_u64(&self, pa: u64) -> u64 {
        debug_assert_eq!(pa % 8, 0);
        match &self.frames[(pa / PAGE_SIZE) as usize] {
            Some(f) => {
                let o = (pa % PAGE_SIZE) as usize;
                u64::from_le_bytes(f[o..o + 8].try_into().expect("8 bytes"))
            }
            None => 0,
        }
    }

    #[inline]
    pub fn write_u64(&mut self, pa: u64, v: u64) {
        debug_assert_eq!(pa % 8, 0);
        let o = (pa % PAGE_SIZE) as usize;
        self.frame_mut((pa / PAGE_SIZE) as usize)[o..o + 8].copy_from_slice(&v.to_le_bytes());
    }

    pub fn read_phys(&self, pa: PhysAddr, buf: &mut [u8]) {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = self.read_byte(pa.0 + i as u64);
        }
    }

    pub fn write_phys(&mut self, pa: PhysAddr, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            self.write_byte(pa.0 + i as u64, *b);
        }
    }

    pub fn fill_frame(&mut self, frame: u64, bytes: &[u8; PAGE_SIZE as usize]) {
        self.frame_mut(frame as usize).copy_from_slice(bytes);
    }

    pub fn zero_frame(&mut self, frame: u64) {
        self.frames[frame as usize] = None;
    }

    pub fn frame_bytes(&self, frame: u64) -> Option<&[u8]> {
        self.frames[frame as usize].as_deref()
    }

    /// Row-relative read; `loc.column` is the starting byte.
    pub fn read_bits(&self, loc: DramLocation, len: usize) -> Result<Vec<u8>, MapError> {
        if loc.column as u64 + len as u64 > self.cfg.row_bytes {
            return Err(MapError::CrossRow);
        }
        Ok((0..len as u32).map(|i| self.read_byte(self.mapper.dram_to_phys(DramLocation { column: loc.column + i, ..loc }).0)).collect())
    }

    pub fn write_bits(&mut self, loc: DramLocation, bytes: &[u8]) -> Result<(), MapError> {
        if loc.column as u64 + bytes.len() as u64 > self.cfg.row_bytes {
            return Err(MapError::CrossRow);
        }
        for (i, b) in bytes.iter().enumerate() {
            let pa = self.mapper.dram_to_phys(DramLocation { column: loc.column + i as u32, ..loc }).0;
            self.write_byte(pa, *b);
        }
        Ok(())
    }

    /// Counts every cell in the map, generating all rows.
    pub fn total_cells(&mut self) -> (u64, u64) {
        let (mut all, mut tru) = (0u64, 0u64);
        for bank in 0..self.cfg.total_banks() {
            for row in 0..self.cfg.rows_per_bank {
                for c in &self.row_cells(bank, row).cells {
                    all += 1;
                    tru += (c.kind == CellKind::True) as u64;
                }
            }
        }
        (all, tru)
    }
}

impl RowCells {
    fn push(&mut self, c: Cell) {
        self.min_threshold = self.min_threshold.min(c.threshold);
        self.has_anti |= c.kind == CellKind::Anti;
        self.cells.push(c);
    }
}

/// Writes the flip log as CSV.
pub fn flip_log_csv(log: &[FlipEvent]) -> String {
    let mut s = String::from("cycle,bank,row,bit,polarity\n");
    for f in log {
        s.push_str(&format!("{},{},{},{},{}\n", f.cycle, f.bank, f.row, f.bit, f.polarity.name()));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::desk;

    fn quiet() -> DramState {
        let c = desk().machine;
        let mut f = c.flip.clone();
        f.density_per_mbit = 0.0;
        DramState::new(&c.dram, &f, 1).unwrap()
    }

    fn loc(bank: u32, row: u32) -> DramLocation {
        DramLocation { bank, row, ..Default::default() }
    }

    /// Alternates accesses to the two rows around `victim`, 1 cycle apart.
    fn hammer(d: &mut DramState, bank: u32, victim: u32, times: u32, t0: u64) -> u64 {
        let mut t = t0;
        for i in 0..times {
            let r = if i % 2 == 0 { victim - 1 } else { victim + 1 };
            d.dram_access(loc(bank, r), t);
            t += 1;
        }
        t
    }

    #[test]
    fn row_hit_and_conflicts() {
        let mut d = quiet();
        assert_eq!(d.dram_access(loc(2, 5), 0).1, RowOutcome::RowMiss);
        assert_eq!(d.dram_access(loc(2, 5), 1).1, RowOutcome::RowHit);
        let mut t = 10;
        d.dram_access(loc(3, 10), t);
        for i in 0..20 {
            t += 1;
            let r = if i % 2 == 0 { 12 } else { 10 };
            let (lat, o) = d.dram_access(loc(3, r), t);
            assert_eq!(o, RowOutcome::RowConflict);
            assert!(lat > d.config().t_row_hit);
        }
    }

    #[test]
    fn idle_row_closes() {
        let mut d = quiet();
        d.dram_access(loc(0, 4), 0);
        let idle = d.config().row_idle_close_cycles;
        assert_eq!(d.dram_access(loc(0, 9), idle + 5).1, RowOutcome::RowMiss);
    }

    #[test]
    fn threshold_fires_double_sided() {
        let mut d = quiet();
        let victim = 40;
        let t = 1000;
        d.plant_cell(FlippableCell { bank: 1, row: victim, bit: 77, kind: CellKind::True, threshold: t });
        let pa = d.mapper().dram_to_phys(DramLocation { bank: 1, row: victim, column: 77 / 8, ..Default::default() }).0;
        d.write_byte(pa, 0xff);
        hammer(&mut d, 1, victim, t - 1, 0);
        assert!(d.flip_log().is_empty());
        hammer(&mut d, 1, victim, 1, 5000);
        assert_eq!(d.flip_log().len(), 1);
        assert_eq!(d.read_byte(pa), 0xff ^ (1 << (77 % 8)));
        // more activations never revert the flip
        hammer(&mut d, 1, victim, 4000, 6000);
        assert_eq!(d.read_byte(pa), 0xff ^ (1 << (77 % 8)));
        assert_eq!(d.flip_log().len(), 1);
    }

    #[test]
    fn single_sided_stays_below_threshold() {
        // closed form: one row gets n activations per epoch, the victim sees n
        let mut d = quiet();
        let epoch = 1_000_000u64;
        d.plant_cell(FlippableCell { bank: 0, row: 100, bit: 3, kind: CellKind::Anti, threshold: 3000 });
        // one access every 400 cycles with an idle close of 400: each is an activation
        let per_epoch = epoch / 401;
        assert!(per_epoch < 3000);
        let mut t = 0;
        for _ in 0..(3 * per_epoch) {
            d.dram_access(loc(0, 99), t);
            t += 401;
        }
        assert!(d.flip_log().is_empty());
    }

    #[test]
    fn true_cell_holding_zero_never_flips() {
        let mut d = quiet();
        d.plant_cell(FlippableCell { bank: 0, row: 20, bit: 0, kind: CellKind::True, threshold: 1 });
        hammer(&mut d, 0, 20, 5000, 0);
        assert!(d.flip_log().is_empty());
    }

    #[test]
    fn refresh_resets_counts() {
        let mut d = quiet();
        let victim = 8;
        d.plant_cell(FlippableCell { bank: 0, row: victim, bit: 9, kind: CellKind::Anti, threshold: 600 });
        // start right after both neighbours' refresh slots this epoch
        let e = 1_000_000u64;
        let off = e * (victim as u64 + 1) / 256 + 1;
        hammer(&mut d, 0, victim, 599, off);
        let next = off + e;
        hammer(&mut d, 0, victim, 2, next);
        assert!(d.flip_log().is_empty(), "counts survived refresh");
    }

    #[test]
    fn refresh_disabled_keeps_counting() {
        let c = desk().machine;
        let mut f = c.flip.clone();
        f.density_per_mbit = 0.0;
        f.refresh_epoch_cycles = 0;
        let mut d = DramState::new(&c.dram, &f, 1).unwrap();
        let mut t = 0;
        for i in 1..=50u32 {
            d.dram_access(loc(0, 3), t);
            d.dram_access(loc(0, 5), t + 1);
            t += 10_000_000;
            assert_eq!(d.activations_at(0, 3, t), i);
        }
    }

    #[test]
    fn staggered_refresh_schedule() {
        // oracle: row r is refreshed at r*E/rows + k*E
        let mut d = quiet();
        let e = 1_000_000u64;
        let rows = 256u64;
        let (r, r2) = (10u32, 12u32);
        let t0 = e * (r as u64) / rows + 5 * e + 1;
        d.dram_access(loc(0, r), t0);
        d.dram_access(loc(0, r2), t0 + 1);
        // r2's next refresh comes before r's
        let slot_r2 = e * (r2 as u64) / rows + 5 * e;
        let slot_r = e * (r as u64) / rows + 6 * e;
        assert!(t0 < slot_r2 && slot_r2 < slot_r);
        assert_eq!(d.activations_at(0, r, slot_r2 - 1), 1);
        assert_eq!(d.activations_at(0, r2, slot_r2 - 1), 1);
        assert_eq!(d.activations_at(0, r2, slot_r2), 0);
        assert_eq!(d.activations_at(0, r, slot_r2), 1);
        assert_eq!(d.activations_at(0, r, slot_r), 0);
    }

    #[test]
    fn storage_roundtrip_and_zero_fill() {
        let mut d = quiet();
        let l = DramLocation { bank: 3, row: 17, column: 100, ..Default::default() };
        assert_eq!(d.read_bits(l, 4).unwrap(), vec![0; 4]);
        d.write_bits(l, &[1, 2, 3, 4]).unwrap();
        assert_eq!(d.read_bits(l, 4).unwrap(), vec![1, 2, 3, 4]);
        let edge = DramLocation { column: (32 << 10) - 2, ..l };
        assert_eq!(d.read_bits(edge, 4), Err(MapError::CrossRow));
    }

    #[test]
    fn hammer_flip_differs_in_one_bit() {
        let mut d = quiet();
        let l = DramLocation { bank: 5, row: 30, column: 64, ..Default::default() };
        d.write_bits(l, &[0u8; 8]).unwrap();
        d.plant_cell(FlippableCell { bank: 5, row: 30, bit: 64 * 8 + 13, kind: CellKind::Anti, threshold: 100 });
        hammer(&mut d, 5, 30, 200, 0);
        let got = d.read_bits(l, 8).unwrap();
        let diff: u32 = got.iter().map(|b| b.count_ones()).sum();
        assert_eq!(diff, 1);
        assert_eq!(got[1], 1 << 5);
    }

    #[test]
    fn cell_map_deterministic_and_dense() {
        let c = desk().machine;
        let mut a = DramState::new(&c.dram, &c.flip, 42).unwrap();
        let mut b = DramState::new(&c.dram, &c.flip, 42).unwrap();
        assert_eq!(a.cells_in_row(3, 77), b.cells_in_row(3, 77));
        // count over the full 64 MiB (5.4e8 bits)
        let bits = c.dram.dram_bytes() as f64 * 8.0;
        let expect = c.flip.density_per_mbit * bits / 1e6;
        let (n, _) = a.total_cells();
        assert!((n as f64 - expect).abs() <= 0.05 * expect, "{n} vs {expect}");
    }

    #[test]
    fn true_fraction_one_gives_only_true_cells() {
        let c = desk().machine;
        for block in [0, 8] {
            let mut f = c.flip.clone();
            f.true_fraction = 1.0;
            f.polarity_block_rows = block;
            let mut d = DramState::new(&c.dram, &f, 5).unwrap();
            let (n, t) = d.total_cells();
            assert_eq!(n, t);
        }
    }

    #[test]
    fn per_cell_true_fraction() {
        let c = desk().machine;
        let mut f = c.flip.clone();
        f.polarity_block_rows = 0;
        f.true_fraction = 0.6;
        let mut d = DramState::new(&c.dram, &f, 5).unwrap();
        let (n, t) = d.total_cells();
        let frac = t as f64 / n as f64;
        assert!((frac - 0.6).abs() < 0.01, "{frac}");
    }

    #[test]
    fn density_above_one_per_bit_rejected() {
        let mut d = quiet();
        assert_eq!(d.seed_cell_map(1, 2e6, 0.5, (1, 2)), Err(MapError::Density));
    }

    #[test]
    fn flip_log_csv_header() {
        let s = flip_log_csv(&[FlipEvent { cycle: 5, bank: 1, row: 2, bit: 3, polarity: CellKind::Anti, pa: 0, bit_in_byte: 3 }]);
        assert_eq!(s, "cycle,bank,row,bit,polarity\n5,1,2,3,anti\n");
    }
}
