//! Simulated N-rank process group.
//!
//! Each rank runs on its own OS thread. Ranks are connected by one unbounded
//! channel per ordered pair; every collective is a real exchange of tensor
//! chunks over those channels, and the ledger counts exactly the elements
//! that crossed them. A rank's own chunk never touches a channel and is not
//! counted.
//!
//! A collective returns only after a message from every peer has arrived,
//! so no rank leaves a collective before all ranks have entered it.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;

use dspsim_core::comm::{CommError, Communicator};
use dspsim_core::ledger::{CommLedger, LedgerEntry, OpKind};
use dspsim_core::tensor::{add_assign, concat, format_dims, split, AxisLabel, Tensor};
use thiserror::Error;

#[derive(Debug)]
struct Message {
    op: OpKind,
    tag: String,
    instance: usize,
    axes: (AxisLabel, Option<AxisLabel>),
    payload: Tensor,
}

/// One rank's endpoint in a [`run_group`] group.
#[derive(Debug)]
pub struct RankComm {
    rank: usize,
    n_ranks: usize,
    bytes_per_element: usize,
    /// Indexed by destination rank; `None` at our own index.
    outboxes: Vec<Option<Sender<Message>>>,
    /// Indexed by source rank; `None` at our own index.
    inboxes: Vec<Option<Receiver<Message>>>,
    instance: usize,
    entries: Vec<LedgerEntry>,
    peak_live: usize,
    peer_lost: bool,
}

impl RankComm {
    fn contract(&self, detail: String) -> CommError {
        CommError::Contract { rank: self.rank, detail }
    }

    /// Sends `outgoing[j]` to rank `j` and returns the chunks received,
    /// indexed by source rank. Our own slot passes straight through.
    fn exchange(
        &mut self,
        op: OpKind,
        tag: &str,
        axes: (AxisLabel, Option<AxisLabel>),
        outgoing: Vec<Tensor>,
    ) -> Result<Vec<Tensor>, CommError> {
        debug_assert_eq!(outgoing.len(), self.n_ranks);
        let instance = self.instance;
        self.instance += 1;
        let mut sent = 0;
        let mut incoming: Vec<Option<Tensor>> = vec![None; self.n_ranks];
        for (dest, chunk) in outgoing.into_iter().enumerate() {
            match &self.outboxes[dest] {
                None => incoming[dest] = Some(chunk),
                Some(tx) => {
                    sent += chunk.len();
                    let msg = Message { op, tag: tag.to_string(), instance, axes, payload: chunk };
                    if tx.send(msg).is_err() {
                        self.peer_lost = true;
                        return Err(CommError::PeerGone { rank: self.rank, peer: dest });
                    }
                }
            }
        }
        let mut recv = 0;
        for (src, slot) in incoming.iter_mut().enumerate() {
            let Some(rx) = &self.inboxes[src] else { continue };
            let Ok(msg) = rx.recv() else {
                self.peer_lost = true;
                return Err(CommError::PeerGone { rank: self.rank, peer: src });
            };
            if msg.op != op || msg.tag != tag || msg.instance != instance || msg.axes != axes {
                return Err(self.contract(format!(
                    "collective #{instance}: this rank entered {op} '{tag}' {axes:?}, rank {src} entered {} '{}' {:?} (#{})",
                    msg.op, msg.tag, msg.axes, msg.instance
                )));
            }
            recv += msg.payload.len();
            *slot = Some(msg.payload);
        }
        self.entries.push(LedgerEntry {
            rank: self.rank,
            instance,
            op,
            tag: tag.to_string(),
            elements_sent: sent,
            elements_recv: recv,
            bytes_sent: sent * self.bytes_per_element,
            bytes_recv: recv * self.bytes_per_element,
        });
        Ok(incoming.into_iter().map(|t| t.expect("every slot filled")).collect())
    }

    fn check_same_dims(&self, parts: &[Tensor], expected: &Tensor, what: &str) -> Result<(), CommError> {
        for (src, p) in parts.iter().enumerate() {
            if p.dims() != expected.dims() {
                return Err(self.contract(format!(
                    "{what}: rank {src} supplied {} but rank {} expects {}",
                    format_dims(p.dims()),
                    self.rank,
                    format_dims(expected.dims())
                )));
            }
        }
        Ok(())
    }

    fn chunks(&self, t: &Tensor, axis: AxisLabel) -> Result<Vec<Tensor>, CommError> {
        split(t, axis, self.n_ranks).map_err(|e| self.contract(format!("{e}")))
    }
}

impl Communicator for RankComm {
    fn rank(&self) -> usize {
        self.rank
    }

    fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    fn all_gather(&mut self, shard: &Tensor, axis: AxisLabel, tag: &str) -> Result<Tensor, CommError> {
        shard.position(axis)?;
        let parts = self.exchange(OpKind::AllGather, tag, (axis, None), vec![shard.clone(); self.n_ranks])?;
        self.check_same_dims(&parts, shard, "all_gather")?;
        Ok(concat(&parts, axis)?)
    }

    fn reduce_scatter(&mut self, full: &Tensor, axis: AxisLabel, tag: &str) -> Result<Tensor, CommError> {
        let chunks = self.chunks(full, axis)?;
        let mine = chunks[self.rank].clone();
        let parts = self.exchange(OpKind::ReduceScatter, tag, (axis, None), chunks)?;
        self.check_same_dims(&parts, &mine, "reduce_scatter")?;
        let mut iter = parts.into_iter();
        let mut acc = iter.next().expect("n_ranks >= 1");
        for p in iter {
            add_assign(&mut acc, &p)?;
        }
        Ok(acc)
    }

    fn all_to_all(
        &mut self,
        shard: &Tensor,
        scatter: AxisLabel,
        gather: AxisLabel,
        tag: &str,
    ) -> Result<Tensor, CommError> {
        if scatter == gather {
            return Err(self.contract(format!("all_to_all scatter and gather axes are both {scatter}")));
        }
        shard.position(gather)?;
        let chunks = self.chunks(shard, scatter)?;
        let mine = chunks[self.rank].clone();
        let parts = self.exchange(OpKind::AllToAll, tag, (scatter, Some(gather)), chunks)?;
        self.check_same_dims(&parts, &mine, "all_to_all")?;
        Ok(concat(&parts, gather)?)
    }

    fn record_live(&mut self, elements: usize) {
        self.peak_live = self.peak_live.max(elements);
    }
}

#[derive(Debug, Error)]
pub enum GroupError<E> {
    #[error("a process group needs at least one rank")]
    NoRanks,
    #[error("rank {rank} failed: {error}")]
    RankFailed { rank: usize, error: E },
    #[error("rank {rank} panicked")]
    Panicked { rank: usize },
}

#[derive(Debug)]
pub struct GroupOutput<R> {
    /// Per-rank results, in rank order.
    pub results: Vec<R>,
    pub ledger: CommLedger,
}

/// What a rank thread hands back: its result, ledger entries, peak live
/// elements and whether it saw a peer disappear.
type RankOutcome<R, E> = (Result<R, E>, Vec<LedgerEntry>, usize, bool);

/// Runs `body` once per rank, each on its own thread, and merges the ledger.
///
/// If any rank fails, the group fails with the error of the lowest rank that
/// failed on its own account; ranks that only failed because a peer went
/// away are reported only if nothing else is.
pub fn run_group<R, E, F>(n_ranks: usize, bytes_per_element: usize, body: F) -> Result<GroupOutput<R>, GroupError<E>>
where
    R: Send,
    E: Send,
    F: Fn(&mut RankComm) -> Result<R, E> + Sync,
{
    if n_ranks == 0 {
        return Err(GroupError::NoRanks);
    }
    let mut outboxes: Vec<Vec<Option<Sender<Message>>>> = (0..n_ranks).map(|_| Vec::new()).collect();
    let mut inboxes: Vec<Vec<Option<Receiver<Message>>>> =
        (0..n_ranks).map(|_| (0..n_ranks).map(|_| None).collect()).collect();
    for (src, out) in outboxes.iter_mut().enumerate() {
        for (dst, inbox) in inboxes.iter_mut().enumerate() {
            if src == dst {
                out.push(None);
            } else {
                let (tx, rx) = channel();
                out.push(Some(tx));
                inbox[src] = Some(rx);
            }
        }
    }
    let comms: Vec<RankComm> = outboxes
        .into_iter()
        .zip(inboxes)
        .enumerate()
        .map(|(rank, (outboxes, inboxes))| RankComm {
            rank,
            n_ranks,
            bytes_per_element,
            outboxes,
            inboxes,
            instance: 0,
            entries: Vec::new(),
            peak_live: 0,
            peer_lost: false,
        })
        .collect();

    let body = &body;
    let joined: Vec<thread::Result<RankOutcome<R, E>>> = thread::scope(|s| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|mut comm| {
                thread::Builder::new()
                    .name(format!("rank-{}", comm.rank))
                    .spawn_scoped(s, move || {
                        let result = body(&mut comm);
                        let RankComm { entries, peak_live, peer_lost, .. } = comm;
                        (result, entries, peak_live, peer_lost)
                    })
                    .expect("spawn rank thread")
            })
            .collect();
        handles.into_iter().map(|h| h.join()).collect()
    });

    let mut results = Vec::with_capacity(n_ranks);
    let mut per_rank = Vec::with_capacity(n_ranks);
    let mut primary: Option<GroupError<E>> = None;
    let mut secondary: Option<GroupError<E>> = None;
    for (rank, j) in joined.into_iter().enumerate() {
        match j {
            Err(_) => {
                primary.get_or_insert(GroupError::Panicked { rank });
            }
            Ok((Ok(r), entries, peak, _)) => {
                results.push(r);
                per_rank.push((entries, peak));
            }
            Ok((Err(error), _, _, peer_lost)) => {
                let slot = if peer_lost { &mut secondary } else { &mut primary };
                slot.get_or_insert(GroupError::RankFailed { rank, error });
            }
        }
    }
    if let Some(e) = primary.or(secondary) {
        return Err(e);
    }
    Ok(GroupOutput { results, ledger: CommLedger::merge(bytes_per_element, per_rank) })
}
