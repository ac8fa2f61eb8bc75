//! Deterministic DRAM and memory-hierarchy simulator with an unprivileged
//! page-walk hammering attacker and an experiment harness.

pub mod address_map;
pub mod attack;
pub mod cache_tlb;
pub mod config;
pub mod dram;
pub mod error;
pub mod harness;
pub mod mmu;
pub mod os;
pub mod util;
