//! Collective-communication interface the schedules are written against.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::ledger::{CommLedger, LedgerEntry, OpKind};
use crate::tensor::{split, AxisLabel, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommError {
    #[error("collective contract violated on rank {rank}: {detail}")]
    Contract { rank: usize, detail: String },
    #[error("rank {rank} lost contact with rank {peer}")]
    PeerGone { rank: usize, peer: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which axis of the global activation is partitioned, and over how many ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShardSpec {
    pub axis: AxisLabel,
    pub n_ranks: usize,
}

impl ShardSpec {
    pub fn new(axis: AxisLabel, n_ranks: usize) -> Self {
        ShardSpec { axis, n_ranks }
    }

    /// Chunk `rank` of `global` under this spec.
    pub fn shard_of(&self, global: &Tensor, rank: usize) -> Result<Tensor, TensorError> {
        Ok(split(global, self.axis, self.n_ranks)?.swap_remove(rank))
    }
}

/// One rank's handle onto an N-rank group.
///
/// Every collective must be entered by all ranks, in the same order, with
/// the same op, tag and compatible shapes.
pub trait Communicator {
    fn rank(&self) -> usize;
    fn n_ranks(&self) -> usize;

    /// Concatenation of all ranks' shards along `axis`, in rank order.
    fn all_gather(&mut self, shard: &Tensor, axis: AxisLabel, tag: &str) -> Result<Tensor, CommError>;

    /// Element-wise sum over ranks (ascending rank order), then chunk `rank`
    /// along `axis`.
    fn reduce_scatter(&mut self, full: &Tensor, axis: AxisLabel, tag: &str)
        -> Result<Tensor, CommError>;

    /// Moves a `gather`-sharded layout to a `scatter`-sharded one: afterwards
    /// this rank holds the full `gather` extent and chunk `rank` of `scatter`.
    fn all_to_all(
        &mut self,
        shard: &Tensor,
        scatter: AxisLabel,
        gather: AxisLabel,
        tag: &str,
    ) -> Result<Tensor, CommError>;

    /// Reports the live activation element count at a checkpoint.
    fn record_live(&mut self, elements: usize);
}

/// Single-rank group. Collectives are identities that still log a
/// zero-byte entry, so op counts match multi-rank runs.
#[derive(Debug, Default)]
pub struct SoloComm {
    entries: Vec<LedgerEntry>,
    peak: usize,
    bytes_per_element: usize,
}

impl SoloComm {
    pub fn new(bytes_per_element: usize) -> Self {
        SoloComm { entries: Vec::new(), peak: 0, bytes_per_element }
    }

    fn log(&mut self, op: OpKind, tag: &str) {
        let instance = self.entries.len();
        self.entries.push(LedgerEntry {
            rank: 0,
            instance,
            op,
            tag: tag.into(),
            elements_sent: 0,
            elements_recv: 0,
            bytes_sent: 0,
            bytes_recv: 0,
        });
    }

    pub fn into_ledger(self) -> CommLedger {
        CommLedger::merge(self.bytes_per_element, alloc::vec![(self.entries, self.peak)])
    }
}

impl Communicator for SoloComm {
    fn rank(&self) -> usize {
        0
    }

    fn n_ranks(&self) -> usize {
        1
    }

    fn all_gather(&mut self, shard: &Tensor, axis: AxisLabel, tag: &str) -> Result<Tensor, CommError> {
        shard.position(axis)?;
        self.log(OpKind::AllGather, tag);
        Ok(shard.clone())
    }

    fn reduce_scatter(&mut self, full: &Tensor, axis: AxisLabel, tag: &str) -> Result<Tensor, CommError> {
        full.position(axis)?;
        self.log(OpKind::ReduceScatter, tag);
        Ok(full.clone())
    }

    fn all_to_all(
        &mut self,
        shard: &Tensor,
        scatter: AxisLabel,
        gather: AxisLabel,
        tag: &str,
    ) -> Result<Tensor, CommError> {
        shard.position(scatter)?;
        shard.position(gather)?;
        self.log(OpKind::AllToAll, tag);
        Ok(shard.clone())
    }

    fn record_live(&mut self, elements: usize) {
        self.peak = self.peak.max(elements);
    }
}
