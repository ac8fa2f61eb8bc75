//! Small shared helpers: seed mixing and sample statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a label.
#[inline]
pub fn derive(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label))
}

pub fn rng(seed: u64, label: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label))
}

pub fn median(xs: &mut [u64]) -> u64 {
    assert!(!xs.is_empty(), "median of empty sample");
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// Otsu split of a sample into a low and a high population. Returns the
/// threshold `t`: values `> t` belong to the high population. `None` when
/// fewer than two distinct values exist.
pub fn two_cluster_split(xs: &[u64]) -> Option<u64> {
    let mut v = xs.to_vec();
    v.sort_unstable();
    if v.first()? == v.last()? {
        return None;
    }
    let n = v.len() as f64;
    let total: f64 = v.iter().map(|&x| x as f64).sum();
    let mut best = (f64::MIN, 0u64);
    let mut lo_sum = 0.0;
    for i in 0..v.len() - 1 {
        lo_sum += v[i] as f64;
        if v[i] == v[i + 1] {
            continue;
        }
        let w0 = (i + 1) as f64;
        let w1 = n - w0;
        let m0 = lo_sum / w0;
        let m1 = (total - lo_sum) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, (v[i] + v[i + 1]) / 2);
        }
    }
    Some(best.1)
}
