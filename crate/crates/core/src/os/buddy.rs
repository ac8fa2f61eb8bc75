//! Buddy allocator with a per-CPU order-0 cache refilled in runs.
//!
//! Order-0 requests are served LIFO from the per-CPU list. A refill carves
//! `batch` frames from the buddy lists, continuing right after the previous
//! run with probability `p_consec` and otherwise starting over at a random
//! free block.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::OsError;

pub const MAX_ORDER: u8 = 10;

#[derive(Clone, Debug)]
pub struct BuddyAllocator {
    free: Vec<BTreeSet<u64>>,
    pcp: Vec<u64>,
    cursor: Option<u64>,
    p_consec: f64,
    batch: u32,
    rng: ChaCha8Rng,
    free_frames: u64,
}

impl BuddyAllocator {
    pub fn new(p_consec: f64, batch: u32, seed: u64) -> Self {
        BuddyAllocator {
            free: vec![BTreeSet::new(); MAX_ORDER as usize + 1],
            pcp: Vec::new(),
            cursor: None,
            p_consec,
            batch: batch.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            free_frames: 0,
        }
    }

    /// Allocator over one contiguous frame range.
    pub fn with_range(start: u64, end: u64, p_consec: f64, batch: u32, seed: u64) -> Self {
        let mut b = BuddyAllocator::new(p_consec, batch, seed);
        b.add_range(start, end);
        b
    }

    /// Frees `[start, end)` into the buddy lists as maximal aligned blocks.
    pub fn add_range(&mut self, start: u64, end: u64) {
        let mut f = start;
        while f < end {
            let mut k = 0u8;
            while k < MAX_ORDER && f.is_multiple_of(2 << k) && f + (2 << k) <= end {
                k += 1;
            }
            self.insert_merge(f, k);
            f += 1 << k;
        }
    }

    pub fn free_frames(&self) -> u64 {
        self.free_frames
    }

    fn insert_merge(&mut self, mut start: u64, mut k: u8) {
        self.free_frames += 1 << k;
        while k < MAX_ORDER {
            let buddy = start ^ (1 << k);
            if self.free[k as usize].remove(&buddy) {
                start = start.min(buddy);
                k += 1;
            } else {
                break;
            }
        }
        self.free[k as usize].insert(start);
    }

    /// Removes one free frame from the buddy lists, splitting its block.
    fn carve(&mut self, f: u64) -> bool {
        for k in 0..=MAX_ORDER {
            let start = f & !((1u64 << k) - 1);
            if self.free[k as usize].remove(&start) {
                let mut lo = start;
                let mut k = k;
                while k > 0 {
                    k -= 1;
                    let half = 1u64 << k;
                    if f >= lo + half {
                        self.free[k as usize].insert(lo);
                        lo += half;
                    } else {
                        self.free[k as usize].insert(lo + half);
                    }
                }
                self.free_frames -= 1;
                return true;
            }
        }
        false
    }

    fn refill(&mut self) {
        let mut got = Vec::with_capacity(self.batch as usize);
        if let Some(c) = self.cursor {
            if self.rng.random::<f64>() < self.p_consec {
                let mut f = c;
                while got.len() < self.batch as usize && self.carve(f) {
                    got.push(f);
                    f += 1;
                }
            }
        }
        if got.is_empty() {
            let Some(k) = (0..=MAX_ORDER as usize).rev().find(|&k| !self.free[k].is_empty()) else {
                return;
            };
            let n = self.free[k].len();
            let pick = self.rng.random_range(0..n);
            let mut f = *self.free[k].iter().nth(pick).expect("nonempty order");
            while got.len() < self.batch as usize && self.carve(f) {
                got.push(f);
                f += 1;
            }
        }
        if let Some(&last) = got.last() {
            self.cursor = Some(last + 1);
        }
        self.pcp.extend(got.into_iter().rev());
    }

    pub fn alloc_order0(&mut self) -> Result<u64, OsError> {
        if self.pcp.is_empty() {
            self.refill();
        }
        self.pcp.pop().ok_or(OsError::OutOfMemory)
    }

    /// Aligned block of `2^order` frames from the smallest fitting free block
    /// (lowest address first).
    pub fn alloc_block(&mut self, order: u8) -> Result<u64, OsError> {
        if order == 0 {
            return self.alloc_order0();
        }
        let k = (order..=MAX_ORDER).find(|&k| !self.free[k as usize].is_empty()).ok_or(OsError::OutOfMemory)?;
        let start = *self.free[k as usize].iter().next().expect("nonempty");
        self.free[k as usize].remove(&start);
        let mut k = k;
        while k > order {
            k -= 1;
            self.free[k as usize].insert(start + (1 << k));
        }
        self.free_frames -= 1 << order;
        Ok(start)
    }

    pub fn alloc_frames(&mut self, count: usize, order: u8) -> Result<Vec<u64>, OsError> {
        (0..count).map(|_| self.alloc_block(order)).collect()
    }

    /// Order-0 frees go to the per-CPU list; larger blocks merge back.
    pub fn free_block(&mut self, start: u64, order: u8) {
        if order == 0 {
            self.pcp.push(start);
        } else {
            self.insert_merge(start, order);
        }
    }

    pub fn free_frames_list(&mut self, frames: &[u64], order: u8) {
        for &f in frames {
            self.free_block(f, order);
        }
    }

    pub fn is_free(&self, f: u64) -> bool {
        self.pcp.contains(&f) || (0..=MAX_ORDER).any(|k| self.free[k as usize].contains(&(f & !((1u64 << k) - 1))))
    }

    /// Every block is aligned to its order and no two blocks overlap.
    pub fn check_sound(&self) -> bool {
        let mut spans: Vec<(u64, u64)> = Vec::new();
        for (k, set) in self.free.iter().enumerate() {
            for &s in set {
                if s % (1 << k) != 0 {
                    return false;
                }
                spans.push((s, s + (1 << k)));
            }
        }
        for &p in &self.pcp {
            spans.push((p, p + 1));
        }
        spans.sort_unstable();
        spans.windows(2).all(|w| w[0].1 <= w[1].0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lifo_reuse() {
        let mut b = BuddyAllocator::with_range(0, 4096, 0.9, 63, 1);
        let a = b.alloc_frames(2, 0).unwrap();
        b.free_frames_list(&a, 0);
        let mut c = b.alloc_frames(2, 0).unwrap();
        c.sort_unstable();
        let mut a2 = a.clone();
        a2.sort_unstable();
        assert_eq!(a2, c);
    }

    #[test]
    fn burst_mostly_consecutive() {
        for seed in 0..10 {
            let mut b = BuddyAllocator::with_range(0, 65536, 0.9, 63, seed);
            let f = b.alloc_frames(1024, 0).unwrap();
            let adj = f.windows(2).filter(|w| w[1] == w[0] + 1).count();
            assert!(adj as f64 / 1023.0 >= 0.85, "seed {seed}: {adj}");
        }
    }

    #[test]
    fn p_consec_zero_breaks_runs() {
        let mut b = BuddyAllocator::with_range(0, 65536, 0.0, 63, 3);
        let f = b.alloc_frames(1024, 0).unwrap();
        let jumps = f.windows(2).filter(|w| w[1] != w[0] + 1).count();
        assert!(jumps >= 10);
    }

    #[test]
    fn exhaust_then_error() {
        let mut b = BuddyAllocator::with_range(0, 64, 0.9, 8, 1);
        for _ in 0..64 {
            b.alloc_order0().unwrap();
        }
        assert_eq!(b.alloc_order0(), Err(OsError::OutOfMemory));
        assert_eq!(b.alloc_block(3), Err(OsError::OutOfMemory));
    }

    #[test]
    fn blocks_are_aligned() {
        let mut b = BuddyAllocator::with_range(3, 5000, 0.9, 8, 1);
        for order in [9u8, 4, 1, 7] {
            let s = b.alloc_block(order).unwrap();
            assert_eq!(s % (1 << order), 0);
            assert!(s >= 3 && s + (1 << order) <= 5000);
        }
        assert!(b.check_sound());
    }

    #[test]
    fn free_merges_back() {
        let mut b = BuddyAllocator::with_range(0, 1024, 0.9, 8, 1);
        let s = b.alloc_block(5).unwrap();
        b.free_block(s, 5);
        assert_eq!(b.alloc_block(10).unwrap(), 0);
    }

    proptest! {
        #[test]
        fn no_double_allocation(ops in proptest::collection::vec((0u8..4, any::<bool>()), 1..200), seed in 0u64..50) {
            let mut b = BuddyAllocator::with_range(0, 2048, 0.7, 16, seed);
            let mut live: Vec<(u64, u8)> = Vec::new();
            for (order, free) in ops {
                if free && !live.is_empty() {
                    let (s, o) = live.remove(0);
                    b.free_block(s, o);
                } else if let Ok(s) = b.alloc_block(order) {
                    for &(t, o) in &live {
                        prop_assert!(s + (1 << order) <= t || t + (1 << o) <= s);
                    }
                    for f in s..s + (1 << order) {
                        prop_assert!(!b.is_free(f));
                    }
                    live.push((s, order));
                }
                prop_assert!(b.check_sound());
            }
        }
    }
}
