//! Execution strategy for independent replicas.

use alloc::vec::Vec;

/// Maps a pure per-replica computation over `0..count`.
///
/// Implementations must return results in replica order. Every replica is a
/// pure function of its index (noise is keyed by `(seed, replica, mode, step)`),
/// so any implementation yields bit-identical output.
pub trait ReplicaRunner: Sync {
    fn map<T, F>(&self, count: u32, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(u32) -> T + Sync + Send;
}

/// Runs replicas one after the other on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ReplicaRunner for Sequential {
    fn map<T, F>(&self, count: u32, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(u32) -> T + Sync + Send,
    {
        (0..count).map(f).collect()
    }
}
