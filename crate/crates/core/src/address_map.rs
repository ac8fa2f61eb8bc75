//! Bit-layout functions: physical address to DRAM coordinates and cache sets,
//! virtual address to TLB sets and page-table indices.

use serde::{Deserialize, Serialize};

use crate::config::{CacheConfig, DramConfig, TlbHash, TlbLevelConfig};
use crate::error::MapError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysAddr(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VirtAddr(pub u64);

impl VirtAddr {
    pub fn new(v: u64) -> Result<Self, MapError> {
        if is_canonical(v) {
            Ok(VirtAddr(v))
        } else {
            Err(MapError::NonCanonical(v))
        }
    }

    pub fn vpn(self) -> u64 {
        (self.0 & ((1 << 48) - 1)) >> 12
    }

    pub fn offset(self, by: u64) -> VirtAddr {
        VirtAddr(self.0.wrapping_add(by))
    }
}

pub fn is_canonical(v: u64) -> bool {
    let top = v >> 47;
    top == 0 || top == (1 << 17) - 1
}

impl std::fmt::LowerHex for VirtAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::LowerHex::fmt(&self.0, f)
    }
}

impl std::fmt::LowerHex for PhysAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::LowerHex::fmt(&self.0, f)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DramLocation {
    pub channel: u32,
    pub rank: u32,
    pub bank: u32,
    pub row: u32,
    pub column: u32,
}

#[inline]
fn parity(x: u64) -> u64 {
    (x.count_ones() & 1) as u64
}

/// Precomputed GF(2) map between physical addresses and DRAM coordinates.
#[derive(Clone, Debug)]
pub struct DramMapper {
    /// Output masks in order column, bank, rank, channel, row.
    masks: Vec<u64>,
    /// Row j recovers physical bit j from the packed coordinate vector.
    inverse: Vec<u64>,
    widths: [u32; 5],
    ranks: u32,
    banks_per_rank: u32,
    rows_per_bank: u32,
    dram_bytes: u64,
}

impl DramMapper {
    pub fn new(g: &DramConfig) -> Result<Self, MapError> {
        let l = &g.layout;
        let widths = [l.column.len() as u32, l.bank.len() as u32, l.rank.len() as u32, l.channel.len() as u32, l.row.len() as u32];
        let masks: Vec<u64> = l.column.iter().chain(&l.bank).chain(&l.rank).chain(&l.channel).chain(&l.row).copied().collect();
        let dram_bytes = g.dram_bytes();
        let have = dram_bytes.trailing_zeros();
        let n = masks.len() as u32;
        if n != have || !dram_bytes.is_power_of_two() {
            return Err(MapError::Width { need: n, have });
        }
        if masks.iter().any(|m| m >> n != 0) {
            return Err(MapError::Singular);
        }
        let inverse = invert(&masks).ok_or(MapError::Singular)?;
        Ok(DramMapper {
            masks,
            inverse,
            widths,
            ranks: g.ranks,
            banks_per_rank: g.banks_per_rank,
            rows_per_bank: g.rows_per_bank,
            dram_bytes,
        })
    }

    pub fn phys_to_dram(&self, pa: PhysAddr) -> Result<DramLocation, MapError> {
        if pa.0 >= self.dram_bytes {
            return Err(MapError::OutOfRange(pa.0));
        }
        Ok(self.locate(pa.0))
    }

    /// Unchecked variant for addresses already known to be in range.
    #[inline]
    pub fn locate(&self, pa: u64) -> DramLocation {
        let mut y = 0u64;
        for (k, m) in self.masks.iter().enumerate() {
            y |= parity(pa & m) << k;
        }
        let mut out = [0u32; 5];
        let mut shift = 0;
        for (i, w) in self.widths.iter().enumerate() {
            out[i] = ((y >> shift) & ((1u64 << w) - 1)) as u32;
            shift += w;
        }
        DramLocation { column: out[0], bank: out[1], rank: out[2], channel: out[3], row: out[4] }
    }

    pub fn dram_to_phys(&self, loc: DramLocation) -> PhysAddr {
        let fields = [loc.column, loc.bank, loc.rank, loc.channel, loc.row];
        let mut y = 0u64;
        let mut shift = 0;
        for (i, w) in self.widths.iter().enumerate() {
            y |= ((fields[i] as u64) & ((1u64 << w) - 1)) << shift;
            shift += w;
        }
        let mut x = 0u64;
        for (j, r) in self.inverse.iter().enumerate() {
            x |= parity(r & y) << j;
        }
        PhysAddr(x)
    }

    /// Flat bank id over (channel, rank, bank).
    #[inline]
    pub fn flat_bank(&self, loc: &DramLocation) -> u32 {
        (loc.channel * self.ranks + loc.rank) * self.banks_per_rank + loc.bank
    }

    /// Inverse of `flat_bank`, returning (channel, rank, bank).
    pub fn split_bank(&self, flat: u32) -> (u32, u32, u32) {
        let bank = flat % self.banks_per_rank;
        let rest = flat / self.banks_per_rank;
        (rest / self.ranks, rest % self.ranks, bank)
    }

    pub fn rows_per_bank(&self) -> u32 {
        self.rows_per_bank
    }

    pub fn dram_bytes(&self) -> u64 {
        self.dram_bytes
    }
}

/// Gauss-Jordan inversion of a square GF(2) matrix given as row masks.
fn invert(rows: &[u64]) -> Option<Vec<u64>> {
    let n = rows.len();
    let mut a: Vec<(u64, u64)> = rows.iter().enumerate().map(|(k, &m)| (m, 1u64 << k)).collect();
    for col in 0..n {
        let p = (col..n).find(|&r| a[r].0 >> col & 1 == 1)?;
        a.swap(col, p);
        let pivot = a[col];
        for (r, row) in a.iter_mut().enumerate() {
            if r != col && row.0 >> col & 1 == 1 {
                row.0 ^= pivot.0;
                row.1 ^= pivot.1;
            }
        }
    }
    Some(a.into_iter().map(|(_, inv)| inv).collect())
}

/// LLC (slice, set) of a physical address.
#[inline]
pub fn llc_set_slice(pa: PhysAddr, g: &CacheConfig) -> (u32, u32) {
    let line_shift = g.line_bytes.trailing_zeros();
    let set = ((pa.0 >> line_shift) & (g.llc.sets as u64 - 1)) as u32;
    let mut slice = 0u32;
    for (i, m) in g.slice_hash.iter().enumerate() {
        slice |= (parity(pa.0 & m) as u32) << i;
    }
    (slice, set)
}

/// Set index of a virtual page number in one TLB level.
#[inline]
pub fn tlb_set(vpn: u64, g: &TlbLevelConfig) -> u32 {
    let bits = g.sets.trailing_zeros();
    let mask = g.sets as u64 - 1;
    match g.hash {
        TlbHash::Linear => (vpn & mask) as u32,
        TlbHash::XorFold => {
            if bits == 0 {
                return 0;
            }
            let mut v = vpn & ((1 << 36) - 1);
            let mut acc = 0u64;
            while v != 0 {
                acc ^= v & mask;
                v >>= bits;
            }
            acc as u32
        }
    }
}

/// Virtual page numbers in `[start, start + count)` that share every listed
/// level's set with `vpn`.
pub fn pages_in_tlb_set<'a>(vpn: u64, levels: &'a [&'a TlbLevelConfig], start: u64, count: u64) -> impl Iterator<Item = u64> + 'a {
    let want: Vec<u32> = levels.iter().map(|g| tlb_set(vpn, g)).collect();
    (start..start + count).filter(move |&v| levels.iter().zip(&want).all(|(g, &s)| tlb_set(v, g) == s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageTableIndices {
    pub pml4_idx: u16,
    pub pdpt_idx: u16,
    pub pd_idx: u16,
    pub pt_idx: u16,
    pub page_offset: u16,
}

impl PageTableIndices {
    /// Index at a table level (4 = PML4 ... 1 = L1PT).
    pub fn at(&self, level: u8) -> u16 {
        match level {
            4 => self.pml4_idx,
            3 => self.pdpt_idx,
            2 => self.pd_idx,
            1 => self.pt_idx,
            _ => panic!("no table level {level}"),
        }
    }

    /// Bits 0..48 of the source address.
    pub fn join(&self) -> u64 {
        (self.pml4_idx as u64) << 39
            | (self.pdpt_idx as u64) << 30
            | (self.pd_idx as u64) << 21
            | (self.pt_idx as u64) << 12
            | self.page_offset as u64
    }
}

pub fn split_virtual(va: VirtAddr) -> Result<PageTableIndices, MapError> {
    if !is_canonical(va.0) {
        return Err(MapError::NonCanonical(va.0));
    }
    let v = va.0;
    Ok(PageTableIndices {
        pml4_idx: ((v >> 39) & 511) as u16,
        pdpt_idx: ((v >> 30) & 511) as u16,
        pd_idx: ((v >> 21) & 511) as u16,
        pt_idx: ((v >> 12) & 511) as u16,
        page_offset: (v & 4095) as u16,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{desk, preset, BitLayout, PolicyConfig, PolicyKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_mapper() -> DramMapper {
        DramMapper::new(&desk().machine.dram).unwrap()
    }

    /// Independent extraction for the linear desk layout.
    fn oracle_desk(pa: u64) -> DramLocation {
        DramLocation { column: (pa & 0x7fff) as u32, bank: ((pa >> 15) & 7) as u32, rank: 0, channel: 0, row: (pa >> 18) as u32 }
    }

    #[test]
    fn zero_maps_to_origin() {
        assert_eq!(desk_mapper().phys_to_dram(PhysAddr(0)).unwrap(), DramLocation::default());
    }

    #[test]
    fn desk_example_row1_bank1() {
        let l = desk_mapper().phys_to_dram(PhysAddr(0x48000)).unwrap();
        assert_eq!((l.row, l.bank), (1, 1));
    }

    #[test]
    fn out_of_range_rejected() {
        let m = desk_mapper();
        assert_eq!(m.phys_to_dram(PhysAddr(64 << 20)), Err(MapError::OutOfRange(64 << 20)));
    }

    #[test]
    fn desk_exhaustive_roundtrip_and_oracle() {
        let m = desk_mapper();
        // every 8-byte word of the 64 MiB space
        let mut pa = 0u64;
        while pa < (64 << 20) {
            let l = m.phys_to_dram(PhysAddr(pa)).unwrap();
            assert_eq!(l, oracle_desk(pa));
            assert_eq!(m.dram_to_phys(l).0, pa);
            pa += 8;
        }
    }

    #[test]
    fn laptop_sampled_roundtrip() {
        let cfg = preset("t420").unwrap();
        let m = DramMapper::new(&cfg.machine.dram).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let pa = rng.random_range(0..cfg.machine.dram.dram_bytes());
            let l = m.phys_to_dram(PhysAddr(pa)).unwrap();
            assert!(l.row < 32768 && l.bank < 8 && l.rank < 2 && l.channel < 2 && l.column < 8192);
            assert_eq!(m.dram_to_phys(l).0, pa);
        }
    }

    #[test]
    fn singular_layout_rejected() {
        let mut d = desk().machine.dram;
        d.layout.bank[0] = d.layout.column[3];
        assert_eq!(DramMapper::new(&d).unwrap_err(), MapError::Singular);
        let mut d = desk().machine.dram;
        d.layout = BitLayout::linear(15, 3, 0, 0, 7);
        assert!(matches!(DramMapper::new(&d), Err(MapError::Width { .. })));
    }

    #[test]
    fn one_row_stride_is_adjacent_row() {
        let cfg = desk().machine.dram;
        let m = DramMapper::new(&cfg).unwrap();
        let stride = cfg.rows_size();
        for pa in (0..(63 << 20)).step_by(4096 * 7) {
            let a = m.phys_to_dram(PhysAddr(pa)).unwrap();
            let b = m.phys_to_dram(PhysAddr(pa + stride)).unwrap();
            assert_eq!(m.flat_bank(&a), m.flat_bank(&b));
            assert_eq!(b.row, a.row + 1);
        }
    }

    #[test]
    fn llc_examples() {
        let mut g = desk().machine.caches;
        assert_eq!(llc_set_slice(PhysAddr(0), &g), (0, 0));
        g.llc_slices = 2;
        g.slice_hash = vec![0x40000];
        assert_eq!(llc_set_slice(PhysAddr(0x40000), &g).0, 1);
        // differ only above the set field and outside the masks
        let a = llc_set_slice(PhysAddr(0x1240), &g);
        let b = llc_set_slice(PhysAddr(0x1240 | 1 << 20), &g);
        assert_eq!(a, b);
    }

    #[test]
    fn tlb_examples() {
        let g = TlbLevelConfig { sets: 16, ways: 4, hash: TlbHash::Linear, policy: PolicyConfig::new(PolicyKind::QuadAge) };
        assert_eq!(tlb_set(0, &g), 0);
        assert_eq!(tlb_set(17, &g), 1);
        let x = TlbLevelConfig { hash: TlbHash::XorFold, ..g.clone() };
        assert_eq!(tlb_set(0, &x), 0);
        assert_eq!(tlb_set(0x11, &x), 0);
        assert_eq!(tlb_set(0x12, &x), 3);
    }

    #[test]
    fn pages_in_tlb_set_exhaustive() {
        let t = preset("t420").unwrap().machine.tlb;
        for hash in [TlbHash::Linear, TlbHash::XorFold] {
            let mut l1 = t.l1d.clone();
            let mut l2 = t.l2s.clone();
            l1.hash = hash;
            l2.hash = hash;
            let levels = [&l1, &l2];
            for vpn in [0u64, 5, 0x1234, 0xfffff] {
                let mut n = 0;
                for v in pages_in_tlb_set(vpn, &levels, 0, 1 << 20) {
                    assert_eq!(tlb_set(v, &l1), tlb_set(vpn, &l1));
                    assert_eq!(tlb_set(v, &l2), tlb_set(vpn, &l2));
                    n += 1;
                }
                // every congruent page in the region is produced
                let direct =
                    (0..1u64 << 20).filter(|&v| tlb_set(v, &l1) == tlb_set(vpn, &l1) && tlb_set(v, &l2) == tlb_set(vpn, &l2)).count();
                assert_eq!(n, direct);
                assert!(n > 0);
            }
        }
    }

    #[test]
    fn split_examples() {
        let z = split_virtual(VirtAddr(0)).unwrap();
        assert_eq!((z.pml4_idx, z.pdpt_idx, z.pd_idx, z.pt_idx, z.page_offset), (0, 0, 0, 0, 0));
        let f = split_virtual(VirtAddr(0x0000_7FFF_FFFF_FFFF)).unwrap();
        assert_eq!((f.pml4_idx, f.pdpt_idx, f.pd_idx, f.pt_idx, f.page_offset), (255, 511, 511, 511, 4095));
        let s = split_virtual(VirtAddr(0x4020_1000)).unwrap();
        assert_eq!((s.pml4_idx, s.pdpt_idx, s.pd_idx, s.pt_idx, s.page_offset), (0, 1, 1, 1, 0));
        assert!(split_virtual(VirtAddr(0x0000_8000_0000_0000)).is_err());
    }

    proptest! {
        #[test]
        fn split_join_roundtrip(v in 0u64..(1 << 47)) {
            prop_assert_eq!(split_virtual(VirtAddr(v)).unwrap().join(), v);
        }

        #[test]
        fn page_offset_never_changes_tlb_set(vpn in 0u64..(1 << 36), off in 0u64..4096) {
            let t = desk().machine.tlb;
            let va = vpn << 12 | off;
            prop_assert_eq!(tlb_set(VirtAddr(va).vpn(), &t.l1d), tlb_set(vpn, &t.l1d));
        }

        #[test]
        fn line_offset_never_changes_llc(pa in 0u64..(8u64 << 30), off in 0u64..64) {
            let g = preset("t420").unwrap().machine.caches;
            let base = pa & !63;
            prop_assert_eq!(llc_set_slice(PhysAddr(base | off), &g), llc_set_slice(PhysAddr(base), &g));
        }
    }
}
