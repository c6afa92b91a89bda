//! Per-rank record of every collective call.
//!
//! Tags name the stage that issued the collective (`block3.attn.q`,
//! `block1.switch_in`, ...). The block index in the tag determines the
//! spatial/temporal pair an entry is charged to; entries tagged
//! [`EPILOGUE_TAG`] are the oracle-only output gather and are excluded from
//! steady-state totals.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

pub const EPILOGUE_TAG: &str = "epilogue";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OpKind {
    AllGather,
    ReduceScatter,
    AllToAll,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::AllGather => "allgather",
            OpKind::ReduceScatter => "reducescatter",
            OpKind::AllToAll => "alltoall",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LedgerEntry {
    pub rank: usize,
    /// Position of this collective in the rank's call sequence. All ranks
    /// share the same numbering for the same collective instance.
    pub instance: usize,
    pub op: OpKind,
    pub tag: String,
    pub elements_sent: usize,
    pub elements_recv: usize,
    pub bytes_sent: usize,
    pub bytes_recv: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("collective #{instance} ({tag}): {sent} elements sent but {recv} received")]
    Conservation {
        instance: usize,
        tag: String,
        sent: usize,
        recv: usize,
    },
    #[error("rank {rank} entry {tag}: bytes {bytes} != elements {elements} x {bytes_per_element}")]
    ByteCount {
        rank: usize,
        tag: String,
        bytes: usize,
        elements: usize,
        bytes_per_element: usize,
    },
    #[error("collective #{instance}: ranks disagree on op or tag")]
    Disagreement { instance: usize },
}

/// Block index encoded in a tag of the form `block{i}.…`.
pub fn tag_block(tag: &str) -> Option<usize> {
    let rest = tag.strip_prefix("block")?;
    let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    rest[..end].parse().ok()
}

pub fn block_tag(block: usize, stage: &str) -> String {
    format!("block{block}.{stage}")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CommLedger {
    pub n_ranks: usize,
    pub bytes_per_element: usize,
    /// Sorted by `(instance, rank)`.
    pub entries: Vec<LedgerEntry>,
    /// High-water mark of reported live activation elements, per rank.
    pub peak_live: Vec<usize>,
}

impl CommLedger {
    pub fn new(n_ranks: usize, bytes_per_element: usize) -> Self {
        CommLedger { n_ranks, bytes_per_element, entries: Vec::new(), peak_live: vec![0; n_ranks] }
    }

    /// Merges per-rank entry lists and peaks into one ledger.
    pub fn merge(
        bytes_per_element: usize,
        per_rank: Vec<(Vec<LedgerEntry>, usize)>,
    ) -> Self {
        let n_ranks = per_rank.len();
        let mut entries = Vec::new();
        let mut peak_live = Vec::with_capacity(n_ranks);
        for (e, peak) in per_rank {
            entries.extend(e);
            peak_live.push(peak);
        }
        entries.sort_by_key(|e| (e.instance, e.rank));
        CommLedger { n_ranks, bytes_per_element, entries, peak_live }
    }

    pub fn rank_entries(&self, rank: usize) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.iter().filter(move |e| e.rank == rank)
    }

    fn steady(&self, rank: usize) -> impl Iterator<Item = &LedgerEntry> {
        self.rank_entries(rank).filter(|e| e.tag != EPILOGUE_TAG)
    }

    pub fn sent_elements(&self, rank: usize, include_epilogue: bool) -> usize {
        self.rank_entries(rank)
            .filter(|e| include_epilogue || e.tag != EPILOGUE_TAG)
            .map(|e| e.elements_sent)
            .sum()
    }

    pub fn sent_bytes(&self, rank: usize, include_epilogue: bool) -> usize {
        self.rank_entries(rank)
            .filter(|e| include_epilogue || e.tag != EPILOGUE_TAG)
            .map(|e| e.bytes_sent)
            .sum()
    }

    /// Steady-state elements sent by `rank`, charged to pair `block / 2`.
    pub fn sent_per_pair(&self, rank: usize, pairs: usize) -> Vec<usize> {
        let mut out = vec![0; pairs];
        for e in self.steady(rank) {
            if let Some(p) = tag_block(&e.tag).map(|b| b / 2).filter(|&p| p < pairs) {
                out[p] += e.elements_sent;
            }
        }
        out
    }

    /// Steady-state collective count per pair for `rank`.
    pub fn ops_per_pair(&self, rank: usize, pairs: usize) -> Vec<usize> {
        let mut out = vec![0; pairs];
        for e in self.steady(rank) {
            if let Some(p) = tag_block(&e.tag).map(|b| b / 2).filter(|&p| p < pairs) {
                out[p] += 1;
            }
        }
        out
    }

    pub fn count_ops(&self, rank: usize, op: OpKind, include_epilogue: bool) -> usize {
        self.rank_entries(rank)
            .filter(|e| e.op == op && (include_epilogue || e.tag != EPILOGUE_TAG))
            .count()
    }

    /// Steady-state tags issued by `rank`, in call order.
    pub fn tags(&self, rank: usize) -> Vec<&str> {
        self.steady(rank).map(|e| e.tag.as_str()).collect()
    }

    pub fn peak_live(&self, rank: usize) -> usize {
        self.peak_live.get(rank).copied().unwrap_or(0)
    }

    /// Every collective instance moves as many elements out as in, all ranks
    /// agree on its op and tag, and byte counts equal elements times width.
    pub fn check_consistency(&self) -> Result<(), LedgerError> {
        for e in &self.entries {
            for (bytes, elements) in [(e.bytes_sent, e.elements_sent), (e.bytes_recv, e.elements_recv)] {
                if bytes != elements * self.bytes_per_element {
                    return Err(LedgerError::ByteCount {
                        rank: e.rank,
                        tag: e.tag.clone(),
                        bytes,
                        elements,
                        bytes_per_element: self.bytes_per_element,
                    });
                }
            }
        }
        let mut i = 0;
        while i < self.entries.len() {
            let instance = self.entries[i].instance;
            let group: Vec<&LedgerEntry> =
                self.entries[i..].iter().take_while(|e| e.instance == instance).collect();
            let head = group[0];
            if group.iter().any(|e| e.op != head.op || e.tag != head.tag) {
                return Err(LedgerError::Disagreement { instance });
            }
            let sent: usize = group.iter().map(|e| e.elements_sent).sum();
            let recv: usize = group.iter().map(|e| e.elements_recv).sum();
            if sent != recv {
                return Err(LedgerError::Conservation { instance, tag: head.tag.clone(), sent, recv });
            }
            i += group.len();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(rank: usize, instance: usize, tag: &str, sent: usize, recv: usize) -> LedgerEntry {
        LedgerEntry {
            rank,
            instance,
            op: OpKind::AllToAll,
            tag: tag.into(),
            elements_sent: sent,
            elements_recv: recv,
            bytes_sent: sent * 8,
            bytes_recv: recv * 8,
        }
    }

    #[test]
    fn parses_block_tags() {
        assert_eq!(tag_block("block3.attn.q"), Some(3));
        assert_eq!(tag_block("block12.switch_in"), Some(12));
        assert_eq!(tag_block("epilogue"), None);
        assert_eq!(tag_block("block.x"), None);
    }

    #[test]
    fn per_pair_totals_skip_epilogue() {
        let ledger = CommLedger::merge(
            8,
            vec![
                (vec![entry(0, 0, "block1.switch_in", 4, 4), entry(0, 1, "block2.x", 5, 5), entry(0, 2, EPILOGUE_TAG, 9, 9)], 10),
                (vec![entry(1, 0, "block1.switch_in", 4, 4), entry(1, 1, "block2.x", 5, 5), entry(1, 2, EPILOGUE_TAG, 9, 9)], 12),
            ],
        );
        assert_eq!(ledger.sent_per_pair(0, 2), vec![4, 5]);
        assert_eq!(ledger.ops_per_pair(1, 2), vec![1, 1]);
        assert_eq!(ledger.sent_elements(0, false), 9);
        assert_eq!(ledger.sent_elements(0, true), 18);
        assert_eq!(ledger.peak_live(1), 12);
        assert!(ledger.check_consistency().is_ok());
    }

    #[test]
    fn detects_conservation_break() {
        let mut ledger = CommLedger::merge(
            8,
            vec![(vec![entry(0, 0, "block0.a", 4, 4)], 0), (vec![entry(1, 0, "block0.a", 4, 4)], 0)],
        );
        ledger.entries[1].elements_sent += 1;
        ledger.entries[1].bytes_sent += 8;
        assert!(matches!(ledger.check_consistency(), Err(LedgerError::Conservation { .. })));
        ledger.entries[1].bytes_sent += 1;
        assert!(matches!(ledger.check_consistency(), Err(LedgerError::ByteCount { .. })));
    }
}
