//! Collective block-exchange patterns used inside rank workers.

use crate::blocks::{BlockMap, DenseBlock};
use crate::comm::{Payload, RankCtx};
use crate::error::Result;

/// A batch of blocks tagged with global block coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockBatch(pub Vec<(usize, usize, DenseBlock)>);

impl Payload for BlockBatch {
    fn elements(&self) -> usize {
        self.0.iter().map(|(_, _, b)| b.len()).sum()
    }

    fn index_entries(&self) -> usize {
        2 * self.0.len()
    }
}

impl BlockBatch {
    pub fn from_map(map: BlockMap) -> Self {
        Self(map.into_iter().map(|((i, j), b)| (i, j, b)).collect())
    }

    pub fn into_map(self) -> BlockMap {
        self.0.into_iter().map(|(i, j, b)| ((i, j), b)).collect()
    }
}

/// Adds every block of `src` into `dst`, inserting absent blocks.
pub fn accumulate(dst: &mut BlockMap, src: BlockMap) -> Result<()> {
    for (key, blk) in src {
        match dst.get_mut(&key) {
            Some(d) => d.axpy(1.0, &blk)?,
            None => {
                dst.insert(key, blk);
            }
        }
    }
    Ok(())
}

/// Personalized all-to-all in `n` deterministic steps: at step `t` worker `w`
/// sends bucket `(w+t) mod n` and receives from `(w−t) mod n`. Every worker
/// sends exactly one message per destination; the self-bucket is free.
pub fn personalized_exchange(ctx: &RankCtx<'_, BlockBatch>, mut buckets: Vec<BlockBatch>) -> Result<Vec<BlockBatch>> {
    let n = ctx.size();
    let w = ctx.rank();
    assert_eq!(buckets.len(), n, "one bucket per worker");
    let mut received = Vec::with_capacity(n);
    for t in 0..n {
        let to = (w + t) % n;
        ctx.send(to, std::mem::take(&mut buckets[to]))?;
        let from = (w + n - t) % n;
        received.push(ctx.recv(from)?);
    }
    Ok(received)
}

/// Buckets `blocks` by destination worker.
pub fn bucketize(
    n: usize,
    blocks: impl IntoIterator<Item = (usize, usize, DenseBlock)>,
    dest: impl Fn(usize, usize) -> usize,
) -> Vec<BlockBatch> {
    let mut buckets = vec![BlockBatch::default(); n];
    for (i, j, b) in blocks {
        buckets[dest(i, j)].0.push((i, j, b));
    }
    buckets
}

/// Ring reduction of partial results into their owners.
///
/// Segment `s` holds the blocks owned by worker `s`. At step `t` worker `w`
/// adds its own contribution to segment `(w−t) mod n` and passes it to
/// `w+1`. After `n` steps every segment has visited all workers and arrived
/// at its owner fully reduced. Returns this worker's segment.
pub fn ring_reduce(
    ctx: &RankCtx<'_, BlockBatch>,
    partial: BlockMap,
    owner: impl Fn(usize, usize) -> usize,
) -> Result<BlockMap> {
    let n = ctx.size();
    let w = ctx.rank();
    let mut segments = vec![BlockMap::new(); n];
    for ((i, j), b) in partial {
        segments[owner(i, j)].insert((i, j), b);
    }
    let mut carried = BlockMap::new();
    for t in 0..n {
        let seg = (w + n - t % n) % n;
        let mut outgoing = std::mem::take(&mut carried);
        accumulate(&mut outgoing, std::mem::take(&mut segments[seg]))?;
        ctx.send((w + 1) % n, BlockBatch::from_map(outgoing))?;
        carried = ctx.recv((w + n - 1) % n)?.into_map();
    }
    Ok(carried)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{run_spmd, Schedule};
    use crate::grid::ProcessGrid;

    fn blk(v: f64) -> DenseBlock {
        DenseBlock::new(1, 2, vec![v, v]).unwrap()
    }

    #[test]
    fn ring_reduce_sums_and_delivers() {
        for s in [Schedule::Parallel, Schedule::Sequential] {
            let g = ProcessGrid::linear(4).unwrap();
            let out = run_spmd(&g, s, |ctx: &mut RankCtx<'_, BlockBatch>| {
                // every worker contributes (w+1) to each of 4 blocks (b, 0)
                let partial: BlockMap = (0..4).map(|b| ((b, 0), blk((ctx.rank() + 1) as f64))).collect();
                ring_reduce(ctx, partial, |i, _| i)
            })
            .unwrap();
            for (w, seg) in out.results.iter().enumerate() {
                assert_eq!(seg.len(), 1);
                assert_eq!(seg[&(w, 0)].data(), &[10.0, 10.0]);
            }
            // each full segment (2 elements) passes every worker once: 4 segments x 2
            for r in 0..4 {
                assert_eq!(out.ledger.rank(r).sent(), 8);
            }
        }
    }

    #[test]
    fn exchange_delivers_buckets() {
        let g = ProcessGrid::linear(3).unwrap();
        let out = run_spmd(&g, Schedule::Parallel, |ctx: &mut RankCtx<'_, BlockBatch>| {
            let w = ctx.rank();
            let blocks = (0..3).map(|d| (w, d, blk(w as f64)));
            let buckets = bucketize(3, blocks, |_, j| j);
            let got = personalized_exchange(ctx, buckets)?;
            let mut rows: Vec<usize> = got.into_iter().flat_map(|b| b.0).map(|(i, _, _)| i).collect();
            rows.sort_unstable();
            Ok(rows)
        })
        .unwrap();
        for rows in out.results {
            assert_eq!(rows, vec![0, 1, 2]);
        }
        // two non-self blocks of 2 elements each
        assert_eq!(out.ledger.rank(0).sent(), 4);
        assert_eq!(out.ledger.rank(0).index_sent, 4);
    }
}
