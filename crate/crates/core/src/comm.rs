//! Simulated message passing between rank workers, with a per-rank traffic ledger.
//!
//! Every rank runs as its own thread. Sends never block; `recv` blocks the
//! calling worker until a message from the named source is queued. Messages
//! between a fixed (source, destination) pair are delivered in FIFO order, so
//! results never depend on thread interleaving.
//!
//! Under [`Schedule::Sequential`] only one worker runs at a time: the running
//! worker keeps the turn until it blocks or finishes, then the turn passes to
//! the next runnable rank in round-robin order.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};

use crate::error::{Error, Result};
use crate::grid::ProcessGrid;

/// Anything that can travel between ranks. Element counts feed the ledger.
pub trait Payload: Send {
    /// Matrix elements carried (8-byte doubles).
    fn elements(&self) -> usize;
    /// Index metadata entries carried; tracked in a separate ledger column.
    fn index_entries(&self) -> usize {
        0
    }
}

impl Payload for Vec<f64> {
    fn elements(&self) -> usize {
        self.len()
    }
}

/// What a message is for. Cost-model comparisons use [`RankTraffic::volume`],
/// which sums only the phases the closed-form model accounts for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    /// Steady-state ring shifts (Cannon ticks, the B ring of the virtual-grid algorithm).
    Shift,
    /// Layout changes that are part of a multiplication algorithm.
    Redistribute,
    /// Accumulation of partial results.
    Reduce,
    /// Initial Cannon skew.
    Align,
    /// Tensor layout conversions and subgroup moves done before an algorithm runs.
    Remap,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Shift, Phase::Redistribute, Phase::Reduce, Phase::Align, Phase::Remap];
    const MODELED: [Phase; 3] = [Phase::Shift, Phase::Redistribute, Phase::Reduce];

    fn idx(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RankTraffic {
    sent: [u64; 5],
    received: [u64; 5],
    pub index_sent: u64,
    pub index_received: u64,
    pub messages_sent: u64,
}

impl RankTraffic {
    pub fn sent(&self) -> u64 {
        self.sent.iter().sum()
    }

    pub fn received(&self) -> u64 {
        self.received.iter().sum()
    }

    pub fn sent_in(&self, phase: Phase) -> u64 {
        self.sent[phase.idx()]
    }

    pub fn received_in(&self, phase: Phase) -> u64 {
        self.received[phase.idx()]
    }

    /// Elements sent in the phases covered by the volume model
    /// (shift, redistribute, reduce).
    pub fn volume(&self) -> u64 {
        Phase::MODELED.iter().map(|&p| self.sent_in(p)).sum()
    }

    fn add(&mut self, other: &RankTraffic) {
        for i in 0..5 {
            self.sent[i] += other.sent[i];
            self.received[i] += other.received[i];
        }
        self.index_sent += other.index_sent;
        self.index_received += other.index_received;
        self.messages_sent += other.messages_sent;
    }
}

/// Per-rank communication counters, in matrix elements.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ledger {
    ranks: Vec<RankTraffic>,
}

impl Ledger {
    pub fn new(nranks: usize) -> Self {
        Self { ranks: vec![RankTraffic::default(); nranks] }
    }

    pub fn nranks(&self) -> usize {
        self.ranks.len()
    }

    pub fn rank(&self, r: usize) -> &RankTraffic {
        &self.ranks[r]
    }

    pub fn iter(&self) -> impl Iterator<Item = &RankTraffic> {
        self.ranks.iter()
    }

    pub fn total_sent(&self) -> u64 {
        self.ranks.iter().map(RankTraffic::sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.ranks.iter().map(RankTraffic::received).sum()
    }

    pub fn total_sent_in(&self, phase: Phase) -> u64 {
        self.ranks.iter().map(|r| r.sent_in(phase)).sum()
    }

    pub fn mean_volume(&self) -> f64 {
        if self.ranks.is_empty() {
            return 0.0;
        }
        self.ranks.iter().map(|r| r.volume() as f64).sum::<f64>() / self.ranks.len() as f64
    }

    pub fn max_volume(&self) -> u64 {
        self.ranks.iter().map(RankTraffic::volume).max().unwrap_or(0)
    }

    pub fn mean_sent_in(&self, phase: Phase) -> f64 {
        if self.ranks.is_empty() {
            return 0.0;
        }
        self.total_sent_in(phase) as f64 / self.ranks.len() as f64
    }

    /// Adds another ledger rank-by-rank (same rank numbering).
    pub fn merge(&mut self, other: &Ledger) {
        self.absorb(other, &(0..other.nranks()).collect::<Vec<_>>());
    }

    /// Adds `other`, whose rank `k` is rank `map[k]` here.
    pub fn absorb(&mut self, other: &Ledger, map: &[usize]) {
        assert_eq!(other.nranks(), map.len(), "rank map length mismatch");
        for (traffic, &to) in other.ranks.iter().zip(map) {
            self.ranks[to].add(traffic);
        }
    }

    fn record_send(&mut self, from: usize, phase: Phase, elements: usize, index: usize) {
        let r = &mut self.ranks[from];
        r.sent[phase.idx()] += elements as u64;
        r.index_sent += index as u64;
        r.messages_sent += 1;
    }

    fn record_recv(&mut self, at: usize, phase: Phase, elements: usize, index: usize) {
        let r = &mut self.ranks[at];
        r.received[phase.idx()] += elements as u64;
        r.index_received += index as u64;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    /// All rank workers run concurrently.
    #[default]
    Parallel,
    /// Workers run one at a time, round-robin at blocking points.
    Sequential,
}

static DEFAULT_SCHEDULE: AtomicU8 = AtomicU8::new(0);

/// Schedule used by the library's internal SPMD runs.
pub fn default_schedule() -> Schedule {
    match DEFAULT_SCHEDULE.load(Ordering::Relaxed) {
        1 => Schedule::Sequential,
        _ => Schedule::Parallel,
    }
}

pub fn set_default_schedule(s: Schedule) {
    DEFAULT_SCHEDULE.store(
        match s {
            Schedule::Parallel => 0,
            Schedule::Sequential => 1,
        },
        Ordering::Relaxed,
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Running,
    Waiting(usize),
    Done,
}

struct Envelope<M> {
    msg: M,
    phase: Phase,
    elements: usize,
    index: usize,
    counted: bool,
}

struct State<M> {
    queues: HashMap<(usize, usize), VecDeque<Envelope<M>>>,
    ledger: Ledger,
    in_flight: u64,
    status: Vec<Status>,
    turn: usize,
    deadlock: Option<Vec<usize>>,
}

impl<M> State<M> {
    fn has_message(&self, from: usize, to: usize) -> bool {
        self.queues.get(&(from, to)).is_some_and(|q| !q.is_empty())
    }

    fn runnable(&self, r: usize) -> bool {
        match self.status[r] {
            Status::Running => true,
            Status::Waiting(f) => self.has_message(f, r),
            Status::Done => false,
        }
    }

    fn detect_deadlock(&mut self) {
        if self.deadlock.is_some() {
            return;
        }
        let n = self.status.len();
        if (0..n).any(|r| self.runnable(r)) {
            return;
        }
        let blocked: Vec<usize> = (0..n).filter(|&r| matches!(self.status[r], Status::Waiting(_))).collect();
        if !blocked.is_empty() {
            self.deadlock = Some(blocked);
        }
    }

    fn pass_turn(&mut self, from: usize) {
        let n = self.status.len();
        for step in 1..=n {
            let r = (from + step) % n;
            if self.runnable(r) {
                self.turn = r;
                return;
            }
        }
        self.detect_deadlock();
    }
}

/// The shared message fabric of one SPMD run.
pub struct SimComm<M> {
    size: usize,
    sequential: bool,
    state: Mutex<State<M>>,
    cv: Condvar,
}

impl<M: Payload> SimComm<M> {
    fn new(size: usize, schedule: Schedule) -> Self {
        Self {
            size,
            sequential: schedule == Schedule::Sequential,
            state: Mutex::new(State {
                queues: HashMap::new(),
                ledger: Ledger::new(size),
                in_flight: 0,
                status: vec![Status::Running; size],
                turn: 0,
                deadlock: None,
            }),
            cv: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State<M>> {
        // a panicking worker must not wedge the others
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn check_rank(&self, r: usize) -> Result<()> {
        if r >= self.size {
            return Err(Error::InvalidArgument(format!("rank {r} out of range for {} ranks", self.size)));
        }
        Ok(())
    }

    fn wait_for_turn(&self, rank: usize) -> Result<()> {
        if !self.sequential {
            return Ok(());
        }
        let mut st = self.lock();
        while st.turn != rank {
            if let Some(blocked) = &st.deadlock {
                return Err(Error::Deadlock { blocked: blocked.clone() });
            }
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        Ok(())
    }

    pub fn send(&self, from: usize, to: usize, phase: Phase, msg: M) -> Result<()> {
        self.check_rank(from)?;
        self.check_rank(to)?;
        let elements = msg.elements();
        let index = msg.index_entries();
        let counted = from != to;
        let mut st = self.lock();
        if counted {
            st.ledger.record_send(from, phase, elements, index);
            st.in_flight += elements as u64;
        }
        st.queues.entry((from, to)).or_default().push_back(Envelope { msg, phase, elements, index, counted });
        drop(st);
        self.cv.notify_all();
        Ok(())
    }

    pub fn recv(&self, at: usize, from: usize) -> Result<M> {
        self.check_rank(at)?;
        self.check_rank(from)?;
        let mut st = self.lock();
        loop {
            if let Some(blocked) = &st.deadlock {
                return Err(Error::Deadlock { blocked: blocked.clone() });
            }
            let my_turn = !self.sequential || st.turn == at;
            if my_turn && st.has_message(from, at) {
                let env = st.queues.get_mut(&(from, at)).and_then(VecDeque::pop_front).expect("checked non-empty");
                if env.counted {
                    st.ledger.record_recv(at, env.phase, env.elements, env.index);
                    st.in_flight -= env.elements as u64;
                }
                st.status[at] = Status::Running;
                return Ok(env.msg);
            }
            if st.status[at] != Status::Waiting(from) {
                st.status[at] = Status::Waiting(from);
                if self.sequential && st.turn == at {
                    st.pass_turn(at);
                } else {
                    st.detect_deadlock();
                }
                self.cv.notify_all();
                continue;
            }
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn finish(&self, rank: usize) {
        let mut st = self.lock();
        st.status[rank] = Status::Done;
        if self.sequential && st.turn == rank {
            st.pass_turn(rank);
        } else {
            st.detect_deadlock();
        }
        drop(st);
        self.cv.notify_all();
    }
}

/// A rank worker's handle on the fabric.
pub struct RankCtx<'a, M> {
    rank: usize,
    phase: Phase,
    comm: &'a SimComm<M>,
}

impl<M: Payload> RankCtx<'_, M> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.comm.size
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Sets the ledger phase charged by subsequent sends.
    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn send(&self, to: usize, msg: M) -> Result<()> {
        self.comm.send(self.rank, to, self.phase, msg)
    }

    pub fn recv(&self, from: usize) -> Result<M> {
        self.comm.recv(self.rank, from)
    }
}

pub struct SpmdOutput<R> {
    pub results: Vec<R>,
    pub ledger: Ledger,
}

struct FinishGuard<'a, M: Payload> {
    comm: &'a SimComm<M>,
    rank: usize,
}

impl<M: Payload> Drop for FinishGuard<'_, M> {
    fn drop(&mut self) {
        self.comm.finish(self.rank);
    }
}

/// Runs `program` once per rank of `grid` and collects the results and ledger.
///
/// A deadlock (every unfinished worker blocked in `recv` with nothing queued
/// for it) is reported as [`Error::Deadlock`]. A worker's own error takes
/// precedence over the deadlock it causes in its peers.
pub fn run_spmd<M, R, F>(grid: &ProcessGrid, schedule: Schedule, program: F) -> Result<SpmdOutput<R>>
where
    M: Payload,
    R: Send,
    F: Fn(&mut RankCtx<'_, M>) -> Result<R> + Sync,
{
    let size = grid.size();
    let comm = SimComm::<M>::new(size, schedule);
    let outcomes: Vec<std::thread::Result<Result<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..size)
            .map(|rank| {
                let comm = &comm;
                let program = &program;
                scope.spawn(move || {
                    let _guard = FinishGuard { comm, rank };
                    comm.wait_for_turn(rank)?;
                    let mut ctx = RankCtx { rank, phase: Phase::Shift, comm };
                    program(&mut ctx)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join()).collect()
    });

    let mut results = Vec::with_capacity(size);
    let mut first_err: Option<Error> = None;
    let mut deadlock: Option<Error> = None;
    for (rank, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(Ok(r)) => results.push(r),
            Ok(Err(e @ Error::Deadlock { .. })) => {
                deadlock.get_or_insert(e);
            }
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(Error::WorkerPanic(rank));
            }
        }
    }
    if let Some(e) = first_err.or(deadlock) {
        return Err(e);
    }
    let st = comm.state.into_inner().unwrap_or_else(|e| e.into_inner());
    debug_assert_eq!(st.in_flight, 0);
    Ok(SpmdOutput { results, ledger: st.ledger })
}
