//! Set-associative structures: data caches with an inclusive sliced LLC, and
//! the two-level TLB.

pub mod array;
pub mod hierarchy;
pub mod tlb;

pub use array::SetAssocArray;
pub use hierarchy::{CacheAccess, CacheHierarchy, CacheStats, Eviction, HitLevel};
pub use tlb::{TlbHierarchy, TlbHit, TlbStats};
