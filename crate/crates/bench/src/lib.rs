//! Shared fixtures for the benchmarks.

use physseg::phantom::{generate_phantom, PhantomConfig};
use physseg::{HardSegmentation, MpmVolume};

/// A deterministic phantom of edge `n`.
pub fn phantom(n: usize) -> (MpmVolume, HardSegmentation) {
    generate_phantom(7, [n; 3], &PhantomConfig::default(), 40.0, "bench").expect("valid phantom")
}
