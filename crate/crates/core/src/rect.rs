//! Rectangular multiplications for strongly non-square shapes, plus the
//! dispatcher that picks an algorithm from the volume model.
//!
//! Both algorithms run on the linear grid formed by every rank that holds
//! part of A, B or C (`P` is the size of that rank set).
//!
//! * Reduce (case 1, large K): A and B are cut into K slabs, slab `k` on
//!   worker `k mod P`; A blocks travel transposed. Each worker forms a
//!   partial C̃ and a `P`-step ring reduction delivers the reduced blocks
//!   straight to C's owners.
//! * Virtual grid (case 2, small K·N): A is cut by block rows, B by K slabs.
//!   A never moves again; the B slabs ring-shift `P` times, so each worker
//!   meets every slab once. The row-distributed result goes back to C.

use std::sync::Arc;

use crate::blocks::{multiply_local, multiply_local_with, BlockMap, DenseBlock};
use crate::cannon::{check_cannon, check_conformal, multiply_cannon};
use crate::comm::{default_schedule, run_spmd, Ledger, Phase, RankCtx};
use crate::cost::{estimate_result_occupancy, select_among, Algorithm, MultiplySpec};
use crate::error::Result;
use crate::exchange::{bucketize, personalized_exchange, ring_reduce, BlockBatch};
use crate::grid::ProcessGrid;
use crate::matrix::{DistMatrix, Layout};

fn union_ranks(layouts: &[&Arc<Layout>]) -> (Vec<usize>, usize) {
    let mut set: Vec<usize> = layouts.iter().flat_map(|l| l.rank_set()).collect();
    set.sort_unstable();
    set.dedup();
    let world = layouts.iter().map(|l| l.world()).max().unwrap_or(0);
    (set, world)
}

fn worker_index(set: &[usize], world: usize) -> Vec<usize> {
    let mut of = vec![usize::MAX; world];
    for (w, &r) in set.iter().enumerate() {
        of[r] = w;
    }
    of
}

/// Histogram over shifts `s` of the dense elements that would stay put if
/// block `(i, j)` of `m` went to worker `(slab(i, j) + s) mod n`. Uses only
/// distribution metadata, never the sparsity pattern.
pub(crate) fn stay_histogram(
    m: &DistMatrix,
    worker_of: &[usize],
    n: usize,
    slab: impl Fn(usize, usize) -> usize,
) -> Vec<u64> {
    let mut hist = vec![0u64; n];
    let (rows, cols) = (m.rows(), m.cols());
    for i in 0..rows.n_blocks() {
        for j in 0..cols.n_blocks() {
            let w = worker_of[m.layout().owner_world(i, j)];
            let s = (w + n - slab(i, j) % n) % n;
            hist[s] += (rows.block_size(i) * cols.block_size(j)) as u64;
        }
    }
    hist
}

/// Shift of the slab placement that moves the most data off its 2D owner,
/// so the 1D layout is not accidentally aligned with the 2D one. Lowest
/// shift wins ties.
pub(crate) fn decorrelating_shift(hists: &[Vec<u64>]) -> usize {
    let n = hists[0].len();
    (0..n).min_by_key(|&s| hists.iter().map(|h| h[s]).sum::<u64>()).unwrap_or(0)
}

fn merge_batches(batches: Vec<BlockBatch>) -> BlockMap {
    let mut map = BlockMap::new();
    for b in batches {
        map.extend(b.into_map());
    }
    map
}

fn take(slots: &[std::sync::Mutex<Option<BlockMap>>], w: usize) -> BlockMap {
    slots[w].lock().unwrap().take().unwrap_or_default()
}

/// `C ← C + A·B` with K-slab redistribution and a ring reduction of C̃.
pub fn multiply_reduce_case1(a: &DistMatrix, b: &DistMatrix, c: &mut DistMatrix) -> Result<Ledger> {
    check_conformal(a, b, c)?;
    let (set, world) = union_ranks(&[a.layout(), b.layout(), c.layout()]);
    let n = set.len();
    let worker_of = worker_index(&set, world);
    let a_in = a.take_inputs(&set);
    let b_in = b.take_inputs(&set);
    let c_layout = c.layout().clone();
    let shift =
        decorrelating_shift(&[stay_histogram(a, &worker_of, n, |_, k| k), stay_histogram(b, &worker_of, n, |k, _| k)]);
    let slab_of = |k: usize| (k + shift) % n;

    let out = run_spmd(&ProcessGrid::linear(n)?, default_schedule(), |ctx: &mut RankCtx<'_, BlockBatch>| {
        let w = ctx.rank();
        ctx.set_phase(Phase::Redistribute);
        // A(i,k) travels as Aᵀ(k,i)
        let a_t = take(&a_in, w).into_iter().map(|((i, k), blk)| (k, i, blk.transpose()));
        let a_slab = merge_batches(personalized_exchange(ctx, bucketize(n, a_t, |k, _| slab_of(k)))?);
        let b_mine = take(&b_in, w).into_iter().map(|((k, j), blk)| (k, j, blk));
        let b_slab = merge_batches(personalized_exchange(ctx, bucketize(n, b_mine, |k, _| slab_of(k)))?);

        let a_local: Vec<(usize, usize, DenseBlock)> =
            a_slab.into_iter().map(|((k, i), blk)| (i, k, blk.transpose())).collect();
        let mut partial = BlockMap::new();
        multiply_local_with(a_local.iter().map(|(i, k, blk)| (*i, *k, blk)), &b_slab, &mut partial)?;

        ctx.set_phase(Phase::Reduce);
        ring_reduce(ctx, partial, |i, j| worker_of[c_layout.owner_world(i, j)])
    })?;

    c.accumulate_from_workers(&set, out.results)?;
    let mut ledger = Ledger::new(world);
    ledger.absorb(&out.ledger, &set);
    Ok(ledger)
}

/// `C ← C + A·B` on a virtual column grid: only B circulates.
pub fn multiply_virtual_case2(a: &DistMatrix, b: &DistMatrix, c: &mut DistMatrix) -> Result<Ledger> {
    check_conformal(a, b, c)?;
    let (set, world) = union_ranks(&[a.layout(), b.layout(), c.layout()]);
    let n = set.len();
    let worker_of = worker_index(&set, world);
    let a_in = a.take_inputs(&set);
    let b_in = b.take_inputs(&set);
    let c_layout = c.layout().clone();
    let row_shift =
        decorrelating_shift(&[stay_histogram(a, &worker_of, n, |i, _| i), stay_histogram(c, &worker_of, n, |i, _| i)]);
    let slab_shift = decorrelating_shift(&[stay_histogram(b, &worker_of, n, |k, _| k)]);

    let out = run_spmd(&ProcessGrid::linear(n)?, default_schedule(), |ctx: &mut RankCtx<'_, BlockBatch>| {
        let w = ctx.rank();
        ctx.set_phase(Phase::Redistribute);
        let a_mine = take(&a_in, w).into_iter().map(|((i, k), blk)| (i, k, blk));
        let a_rows = merge_batches(personalized_exchange(ctx, bucketize(n, a_mine, |i, _| (i + row_shift) % n))?);
        let b_mine = take(&b_in, w).into_iter().map(|((k, j), blk)| (k, j, blk));
        let mut slab = merge_batches(personalized_exchange(ctx, bucketize(n, b_mine, |k, _| (k + slab_shift) % n))?);

        ctx.set_phase(Phase::Shift);
        let mut c_rows = BlockMap::new();
        for _ in 0..n {
            ctx.send((w + n - 1) % n, BlockBatch::from_map(slab.clone()))?;
            multiply_local(&a_rows, &slab, &mut c_rows)?;
            slab = ctx.recv((w + 1) % n)?.into_map();
        }

        ctx.set_phase(Phase::Redistribute);
        let c_blocks = c_rows.into_iter().map(|((i, j), blk)| (i, j, blk));
        let back = bucketize(n, c_blocks, |i, j| worker_of[c_layout.owner_world(i, j)]);
        Ok(merge_batches(personalized_exchange(ctx, back)?))
    })?;

    c.accumulate_from_workers(&set, out.results)?;
    let mut ledger = Ledger::new(world);
    ledger.absorb(&out.ledger, &set);
    Ok(ledger)
}

/// Model inputs measured from the operands: stored element counts and the
/// size of the rank set the rectangular algorithms would use.
pub fn measured_spec(a: &DistMatrix, b: &DistMatrix, c: &DistMatrix) -> MultiplySpec {
    let (set, _) = union_ranks(&[a.layout(), b.layout(), c.layout()]);
    MultiplySpec::from_sizes(
        a.nrows(),
        b.ncols(),
        a.ncols(),
        a.stored_elements(),
        b.stored_elements(),
        c.stored_elements(),
        set.len(),
    )
}

/// Picks the algorithm with the least predicted volume. C's occupancy is
/// estimated from A and B; Cannon is a candidate only when its layout
/// preconditions hold.
pub fn choose_algorithm(a: &DistMatrix, b: &DistMatrix, c: &DistMatrix) -> Algorithm {
    let mut spec = measured_spec(a, b, c);
    spec.o_c = estimate_result_occupancy(&spec, a.cols().n_blocks()).max(spec.o_c);
    if check_cannon(a, b, c).is_ok() {
        select_among(&spec, &[Algorithm::Cannon, Algorithm::Case1, Algorithm::Case2])
    } else {
        select_among(&spec, &[Algorithm::Case1, Algorithm::Case2])
    }
}

/// `C ← C + A·B` with the given algorithm.
pub fn multiply_with(algo: Algorithm, a: &DistMatrix, b: &DistMatrix, c: &mut DistMatrix) -> Result<Ledger> {
    match algo {
        Algorithm::Cannon => multiply_cannon(a, b, c),
        Algorithm::Case1 => multiply_reduce_case1(a, b, c),
        Algorithm::Case2 => multiply_virtual_case2(a, b, c),
    }
}

/// `C ← C + A·B` with the algorithm the model prefers.
pub fn multiply(a: &DistMatrix, b: &DistMatrix, c: &mut DistMatrix) -> Result<(Algorithm, Ledger)> {
    let algo = choose_algorithm(a, b, c);
    Ok((algo, multiply_with(algo, a, b, c)?))
}
