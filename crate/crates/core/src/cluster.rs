//! Cluster membership, heartbeat monitoring, and failure cleanup.
//!
//! The failure and scaling granularity is a whole instance. Instances prove
//! liveness by heartbeating; one that falls silent longer than the failure
//! timeout is marked `Failed` by [`ClusterState::detect_failures`]. Nothing
//! here kills an instance directly — the simulation driver simply stops
//! scheduling heartbeats for a dead instance and detection follows from the
//! stale timestamp, which also reproduces the real detection delay window.
//!
//! After detection, [`cleanup_after_failure`] reclaims every block the dead
//! instance had allocated on surviving peers (blocks mid-transfer that were
//! never handed to the peer's index) and purges its advisory tree entries.
//! Historical KV that peers indexed from data received earlier is locally
//! owned and deliberately kept.

use std::collections::BTreeMap;

use crate::config::InstanceConfig;
use crate::mempool::MemPool;
use crate::scheduler::GlobalScheduler;
use crate::types::{InstanceId, SimTime};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClusterError {
    #[error("instance {0} is already registered")]
    DuplicateId(InstanceId),
    #[error("instance {0} is not registered")]
    UnknownId(InstanceId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceStatus {
    Live,
    Failed,
    Removed,
}

#[derive(Debug, Clone)]
pub struct Member {
    pub spec: InstanceConfig,
    pub status: InstanceStatus,
    pub last_heartbeat: SimTime,
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    members: BTreeMap<InstanceId, Member>,
    pub heartbeat_interval: f64,
    pub failure_timeout: f64,
}

impl ClusterState {
    pub fn new(heartbeat_interval: f64, failure_timeout: f64) -> Self {
        ClusterState { members: BTreeMap::new(), heartbeat_interval, failure_timeout }
    }

    pub fn register(
        &mut self,
        id: InstanceId,
        spec: InstanceConfig,
        now: SimTime,
    ) -> Result<(), ClusterError> {
        if self.members.contains_key(&id) {
            return Err(ClusterError::DuplicateId(id));
        }
        self.members
            .insert(id, Member { spec, status: InstanceStatus::Live, last_heartbeat: now });
        Ok(())
    }

    /// Graceful removal: the instance stops taking new work immediately.
    pub fn remove(&mut self, id: InstanceId) -> Result<(), ClusterError> {
        match self.members.get_mut(&id) {
            Some(m) => {
                m.status = InstanceStatus::Removed;
                Ok(())
            }
            None => Err(ClusterError::UnknownId(id)),
        }
    }

    pub fn heartbeat(&mut self, id: InstanceId, now: SimTime) -> Result<(), ClusterError> {
        match self.members.get_mut(&id) {
            Some(m) => {
                if m.status == InstanceStatus::Live {
                    m.last_heartbeat = now;
                }
                Ok(())
            }
            None => Err(ClusterError::UnknownId(id)),
        }
    }

    /// Mark every live instance whose last heartbeat is older than the
    /// failure timeout as `Failed`; returns the newly failed ids (ascending).
    pub fn detect_failures(&mut self, now: SimTime) -> Vec<InstanceId> {
        let mut failed = Vec::new();
        for (&id, m) in self.members.iter_mut() {
            if m.status == InstanceStatus::Live && now - m.last_heartbeat > self.failure_timeout {
                m.status = InstanceStatus::Failed;
                failed.push(id);
            }
        }
        failed
    }

    pub fn status(&self, id: InstanceId) -> Option<InstanceStatus> {
        self.members.get(&id).map(|m| m.status)
    }

    pub fn is_live(&self, id: InstanceId) -> bool {
        self.status(id) == Some(InstanceStatus::Live)
    }

    pub fn live_ids(&self) -> Vec<InstanceId> {
        self.members
            .iter()
            .filter(|(_, m)| m.status == InstanceStatus::Live)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn members(&self) -> impl Iterator<Item = (&InstanceId, &Member)> {
        self.members.iter()
    }
}

/// Blocks reclaimed on each surviving instance after a failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanupReport {
    pub instance: InstanceId,
    /// Peer id -> number of blocks the failed instance had allocated there.
    pub freed_on_peers: BTreeMap<InstanceId, usize>,
}

/// Release, on every surviving pool, the blocks `failed` had allocated for
/// its in-flight transfers, and drop its advisory routing state. The failed
/// instance's own pool is left untouched (its memory died with it).
pub fn cleanup_after_failure(
    failed: InstanceId,
    pools: &mut BTreeMap<InstanceId, MemPool>,
    scheduler: &mut GlobalScheduler,
) -> CleanupReport {
    let mut report = CleanupReport { instance: failed, freed_on_peers: BTreeMap::new() };
    for (&id, pool) in pools.iter_mut() {
        if id == failed {
            continue;
        }
        let freed = pool.free_by_allocator(failed);
        if !freed.is_empty() {
            report.freed_on_peers.insert(id, freed.len());
        }
    }
    scheduler.purge_instance(failed);
    report
}
