//! Tall-and-skinny matrices: the long dimension is cut into `f` contiguous
//! block ranges, each held by an ordinary [`DistMatrix`] on one subgroup of
//! the grid, so every submatrix is roughly square.
//!
//! Block sizes and owners come from [`IndexFuncs`]; no rank keeps an array
//! whose length is the full block count of the split dimension.

use std::sync::Arc;

use crate::blocks::multiply_local_with;
use crate::blocks::{BlockMap, DenseBlock};
use crate::comm::{default_schedule, run_spmd, Ledger, Phase, RankCtx};
use crate::dense::DenseMatrix;
use crate::error::{invalid, Error, Result};
use crate::exchange::{personalized_exchange, ring_reduce, BlockBatch};
use crate::grid::{split_grid, ProcessGrid, Subgroup};
use crate::index::{Axis, IndexFuncs};
use crate::matrix::{DistMatrix, Layout, LocalStore};
use crate::rect;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Rows,
    Cols,
}

impl Split {
    fn grid_dim(self) -> usize {
        match self {
            Split::Rows => 0,
            Split::Cols => 1,
        }
    }
}

/// One submatrix: global block range `[start, start+len)` of the split
/// dimension, held on `group`.
#[derive(Clone, Debug)]
pub struct Part {
    pub start: usize,
    pub len: usize,
    pub group: Subgroup,
    pub matrix: DistMatrix,
}

#[derive(Clone, Debug)]
pub struct TallSkinnyMatrix {
    rows: IndexFuncs,
    cols: IndexFuncs,
    grid: ProcessGrid,
    ranks: Vec<usize>,
    world: usize,
    split: Split,
    factor: usize,
    chunk: usize,
    parts: Vec<Part>,
}

/// `f` in `1..=p` making `long/f` closest to `short`; ties go to the smaller `f`.
pub fn choose_split_factor(long: usize, short: usize, p: usize) -> usize {
    let (long, short) = (long as f64, short as f64);
    let mut best = 1;
    let mut best_gap = f64::INFINITY;
    for f in 1..=p.max(1) {
        let gap = (long / f as f64 - short).abs();
        if gap < best_gap {
            best = f;
            best_gap = gap;
        }
    }
    best
}

impl TallSkinnyMatrix {
    /// Empty matrix on `grid` (grid rank = world rank), split into `factor` parts.
    pub fn new(rows: IndexFuncs, cols: IndexFuncs, grid: ProcessGrid, split: Split, factor: usize) -> Result<Self> {
        let p = grid.size();
        Self::with_placement(rows, cols, grid, (0..p).collect(), p, split, factor)
    }

    /// Like [`TallSkinnyMatrix::new`] with grid rank `g` running on world rank `ranks[g]`.
    pub fn with_placement(
        rows: IndexFuncs,
        cols: IndexFuncs,
        grid: ProcessGrid,
        ranks: Vec<usize>,
        world: usize,
        split: Split,
        factor: usize,
    ) -> Result<Self> {
        if grid.ndims() != 2 {
            return invalid(format!("matrix grid must be 2D, got {:?}", grid.dims()));
        }
        rows.validate(grid.dims()[0])?;
        cols.validate(grid.dims()[1])?;
        let n = match split {
            Split::Rows => rows.n_blocks,
            Split::Cols => cols.n_blocks,
        };
        let extent = grid.dims()[split.grid_dim()];
        if factor == 0 || factor > extent {
            return invalid(format!("split factor {factor} must be in 1..={extent}"));
        }
        // ceiling partition; trailing ranges may be short or empty
        let chunk = n.div_ceil(factor).max(1);
        let groups = split_grid(&grid, split.grid_dim(), factor)?;
        let mut parts = Vec::with_capacity(factor);
        for group in groups {
            let start = (group.index * chunk).min(n);
            let len = chunk.min(n - start);
            let count = group.local.dims()[split.grid_dim()];
            let (r, c) = match split {
                Split::Rows => {
                    (Axis::window(&rows, start, len, group.offset, count)?, Axis::from_funcs(&cols, grid.dims()[1])?)
                }
                Split::Cols => {
                    (Axis::from_funcs(&rows, grid.dims()[0])?, Axis::window(&cols, start, len, group.offset, count)?)
                }
            };
            let part_ranks = group.members.iter().map(|&m| ranks[m]).collect();
            let layout = Layout::new(r, c, group.local.clone(), part_ranks, world)?;
            parts.push(Part { start, len, group, matrix: DistMatrix::with_layout(Arc::new(layout)) });
        }
        Ok(Self { rows, cols, grid, ranks, world, split, factor, chunk, parts })
    }

    pub fn empty_like(&self) -> Self {
        let mut m = self.clone();
        for p in &mut m.parts {
            p.matrix = p.matrix.empty_like();
        }
        m
    }

    pub fn rows_funcs(&self) -> &IndexFuncs {
        &self.rows
    }

    pub fn cols_funcs(&self) -> &IndexFuncs {
        &self.cols
    }

    pub fn grid(&self) -> &ProcessGrid {
        &self.grid
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn world(&self) -> usize {
        self.world
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn n_block_rows(&self) -> usize {
        self.rows.n_blocks
    }

    pub fn n_block_cols(&self) -> usize {
        self.cols.n_blocks
    }

    /// Global block index along the split dimension → (part, local index).
    pub fn locate(&self, g: usize) -> (usize, usize) {
        (g / self.chunk, g % self.chunk)
    }

    /// Inverse of [`TallSkinnyMatrix::locate`].
    pub fn global_index(&self, part: usize, local: usize) -> usize {
        self.parts[part].start + local
    }

    fn to_local(&self, i: usize, j: usize) -> Result<(usize, usize, usize)> {
        if i >= self.rows.n_blocks || j >= self.cols.n_blocks {
            return invalid(format!("block ({i}, {j}) outside {}x{} blocks", self.rows.n_blocks, self.cols.n_blocks));
        }
        Ok(match self.split {
            Split::Rows => {
                let (s, li) = self.locate(i);
                (s, li, j)
            }
            Split::Cols => {
                let (s, lj) = self.locate(j);
                (s, i, lj)
            }
        })
    }

    fn to_global(&self, part: usize, li: usize, lj: usize) -> (usize, usize) {
        match self.split {
            Split::Rows => (self.global_index(part, li), lj),
            Split::Cols => (li, self.global_index(part, lj)),
        }
    }

    /// World rank owning global block `(i, j)`.
    pub fn owner_world(&self, i: usize, j: usize) -> Result<usize> {
        let (s, li, lj) = self.to_local(i, j)?;
        Ok(self.parts[s].matrix.layout().owner_world(li, lj))
    }

    pub fn set_block(&mut self, i: usize, j: usize, block: DenseBlock) -> Result<()> {
        let (s, li, lj) = self.to_local(i, j)?;
        self.parts[s].matrix.set_block(li, lj, block)
    }

    pub fn add_block(&mut self, i: usize, j: usize, block: DenseBlock) -> Result<()> {
        let (s, li, lj) = self.to_local(i, j)?;
        self.parts[s].matrix.add_block(li, lj, block)
    }

    pub fn block(&self, i: usize, j: usize) -> Option<&DenseBlock> {
        let (s, li, lj) = self.to_local(i, j).ok()?;
        self.parts[s].matrix.block(li, lj)
    }

    /// Stored blocks with global coordinates.
    pub fn iter_blocks(&self) -> impl Iterator<Item = (usize, usize, &DenseBlock)> + '_ {
        self.parts.iter().enumerate().flat_map(move |(s, p)| {
            p.matrix.iter_blocks().map(move |(li, lj, b)| {
                let (i, j) = self.to_global(s, li, lj);
                (i, j, b)
            })
        })
    }

    pub fn stored_blocks(&self) -> usize {
        self.parts.iter().map(|p| p.matrix.stored_blocks()).sum()
    }

    pub fn stored_elements(&self) -> usize {
        self.parts.iter().map(|p| p.matrix.stored_elements()).sum()
    }

    pub fn is_well_formed(&self) -> bool {
        self.parts.iter().all(|p| p.matrix.is_well_formed())
    }

    fn stores_on(&self, world_rank: usize) -> impl Iterator<Item = (&DistMatrix, &LocalStore)> + '_ {
        self.parts.iter().filter_map(move |p| {
            let g = p.matrix.layout().ranks().iter().position(|&r| r == world_rank)?;
            Some((&p.matrix, p.matrix.store(g)))
        })
    }

    /// Blocks stored on `world_rank`.
    pub fn blocks_on(&self, world_rank: usize) -> usize {
        self.stores_on(world_rank).map(|(_, s)| s.n_blocks()).sum()
    }

    /// Index entries along the split dimension resident on `world_rank`:
    /// stored axis arrays (none for function-backed axes) plus the local
    /// CSR row structure (or column indices when columns are split).
    pub fn split_index_entries_on(&self, world_rank: usize) -> usize {
        self.stores_on(world_rank)
            .map(|(m, store)| match self.split {
                Split::Rows => m.rows().resident_entries() + store.row_index_entries(),
                Split::Cols => m.cols().resident_entries() + store.index_entries() - store.row_index_entries(),
            })
            .sum()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let ro = offsets(&self.rows);
        let co = offsets(&self.cols);
        let mut d = DenseMatrix::zeros(ro[self.rows.n_blocks], co[self.cols.n_blocks]);
        for (i, j, b) in self.iter_blocks() {
            for r in 0..b.rows() {
                for c in 0..b.cols() {
                    d.set(ro[i] + r, co[j] + c, b.get(r, c));
                }
            }
        }
        d
    }

    /// Moves every block into `target` (an empty matrix of any layout),
    /// rewriting coordinates and contents with `f` at the sender. Traffic is
    /// charged to `phase`.
    pub fn remap<F>(&self, target: TallSkinnyMatrix, phase: Phase, f: F) -> Result<(TallSkinnyMatrix, Ledger)>
    where
        F: Fn(usize, usize, DenseBlock) -> (usize, usize, DenseBlock) + Sync,
    {
        let mut set: Vec<usize> = self.rank_set();
        set.extend(target.rank_set());
        set.sort_unstable();
        set.dedup();
        let world = self.world.max(target.world);
        let worker_of = worker_index(&set, world);
        let inputs: Vec<_> = self.worker_inputs(&set).into_iter().map(|m| std::sync::Mutex::new(Some(m))).collect();
        let n = set.len();
        let out = run_spmd(&ProcessGrid::linear(n)?, default_schedule(), |ctx: &mut RankCtx<'_, BlockBatch>| {
            ctx.set_phase(phase);
            let mine = inputs[ctx.rank()].lock().unwrap().take().unwrap_or_default();
            let mut buckets = vec![BlockBatch::default(); n];
            for ((i, j), b) in mine {
                let (i2, j2, b2) = f(i, j, b);
                let w = worker_of[target.owner_world(i2, j2)?];
                buckets[w].0.push((i2, j2, b2));
            }
            Ok(merge(personalized_exchange(ctx, buckets)?))
        })?;
        let mut result = target;
        for map in out.results {
            for ((i, j), b) in map {
                result.add_block(i, j, b)?;
            }
        }
        let mut ledger = Ledger::new(world);
        ledger.absorb(&out.ledger, &set);
        Ok((result, ledger))
    }

    fn rank_set(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.parts.iter().flat_map(|p| p.matrix.layout().rank_set()).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Blocks per worker of `set`, in global coordinates.
    fn worker_inputs(&self, set: &[usize]) -> Vec<BlockMap> {
        let mut maps = vec![BlockMap::new(); set.len()];
        for (s, p) in self.parts.iter().enumerate() {
            let ranks = p.matrix.layout().ranks();
            for (g, store) in p.matrix.stores().iter().enumerate() {
                let w = set.binary_search(&ranks[g]).expect("rank set covers the parts");
                for (li, lj, b) in store.iter() {
                    maps[w].insert(self.to_global(s, li, lj), b.clone());
                }
            }
        }
        maps
    }
}

fn offsets(f: &IndexFuncs) -> Vec<usize> {
    let mut off = Vec::with_capacity(f.n_blocks + 1);
    off.push(0);
    for i in 0..f.n_blocks {
        off.push(off[i] + (f.block_size)(i));
    }
    off
}

fn worker_index(set: &[usize], world: usize) -> Vec<usize> {
    let mut of = vec![usize::MAX; world];
    for (w, &r) in set.iter().enumerate() {
        of[r] = w;
    }
    of
}

fn merge(batches: Vec<BlockBatch>) -> BlockMap {
    let mut map = BlockMap::new();
    for b in batches {
        map.extend(b.into_map());
    }
    map
}

/// `axis` with owners folded onto `extent` coordinates when its extent differs.
fn fit(axis: &Axis, extent: usize) -> Axis {
    if axis.extent() == extent {
        return axis.clone();
    }
    let orig = axis.clone();
    axis.with_owner(extent, move |i| orig.owner(i) % extent)
}

fn same_sizes(a: &IndexFuncs, b: &IndexFuncs) -> bool {
    a.n_blocks == b.n_blocks && (0..a.n_blocks).all(|i| (a.block_size)(i) == (b.block_size)(i))
}

fn layout_error(dimension: &'static str, detail: impl Into<String>) -> Error {
    Error::Layout { dimension, detail: detail.into() }
}

/// `C ← C + A·B` on tall-and-skinny operands.
///
/// Supported split patterns (anything else is a layout error naming the
/// offending dimension, so the caller can remap and retry):
/// * no split anywhere: one plain multiply;
/// * K split (A by columns, B by rows, same factor; C unsplit): each
///   subgroup forms a partial C̃ₛ, then a ring reduction adds them into C;
/// * M split (A and C by rows on the same subgroups; B unsplit): B is
///   replicated into every subgroup;
/// * N split (B and C by columns on the same subgroups; A unsplit).
pub fn multiply_tall_skinny(a: &TallSkinnyMatrix, b: &TallSkinnyMatrix, c: &mut TallSkinnyMatrix) -> Result<Ledger> {
    if !same_sizes(&a.cols, &b.rows) {
        return invalid("inner block sizes of A and B differ");
    }
    if !same_sizes(&a.rows, &c.rows) || !same_sizes(&b.cols, &c.cols) {
        return invalid("C block sizes must equal A's rows and B's columns");
    }
    let kind = |m: &TallSkinnyMatrix| (m.factor > 1).then_some(m.split);
    let world = a.world.max(b.world).max(c.world);
    let mut ledger = Ledger::new(world);
    match (kind(a), kind(b), kind(c)) {
        (None, None, None) => {
            let (_, l) = rect::multiply(&a.parts[0].matrix, &b.parts[0].matrix, &mut c.parts[0].matrix)?;
            ledger.merge(&widen(l, world));
        }
        (Some(Split::Cols), Some(Split::Rows), None) if a.factor == b.factor => {
            ledger.merge(&k_split(a, b, c, world)?);
        }
        (Some(Split::Rows), None, Some(Split::Rows)) if a.factor == c.factor => {
            check_same_groups(a, c, "M")?;
            let bm = &b.parts[0].matrix;
            for (ap, cp) in a.parts.iter().zip(c.parts.iter_mut()) {
                let am = &ap.matrix;
                let target = Layout::new(
                    fit(am.cols(), am.grid().dims()[0]),
                    cp.matrix.cols().clone(),
                    am.grid().clone(),
                    am.layout().ranks().to_vec(),
                    world,
                )?;
                let (bs, l) = bm.redistribute_in(Arc::new(target), Phase::Redistribute)?;
                ledger.merge(&widen(l, world));
                let (_, l) = rect::multiply(am, &bs, &mut cp.matrix)?;
                ledger.merge(&widen(l, world));
            }
        }
        (None, Some(Split::Cols), Some(Split::Cols)) if b.factor == c.factor => {
            check_same_groups(b, c, "N")?;
            let am = &a.parts[0].matrix;
            for (bp, cp) in b.parts.iter().zip(c.parts.iter_mut()) {
                let bm = &bp.matrix;
                let target = Layout::new(
                    cp.matrix.rows().clone(),
                    fit(bm.rows(), bm.grid().dims()[1]),
                    bm.grid().clone(),
                    bm.layout().ranks().to_vec(),
                    world,
                )?;
                let (as_, l) = am.redistribute_in(Arc::new(target), Phase::Redistribute)?;
                ledger.merge(&widen(l, world));
                let (_, l) = rect::multiply(&as_, bm, &mut cp.matrix)?;
                ledger.merge(&widen(l, world));
            }
        }
        (ka, kb, kc) => return Err(mismatch(ka, kb, kc, a, b, c)),
    }
    Ok(ledger)
}

fn mismatch(
    ka: Option<Split>,
    kb: Option<Split>,
    kc: Option<Split>,
    a: &TallSkinnyMatrix,
    b: &TallSkinnyMatrix,
    c: &TallSkinnyMatrix,
) -> Error {
    let k_split = ka == Some(Split::Cols) || kb == Some(Split::Rows);
    let m_split = ka == Some(Split::Rows) || kc == Some(Split::Rows);
    let n_split = kb == Some(Split::Cols) || kc == Some(Split::Cols);
    let detail = format!(
        "A split {:?}/{}, B split {:?}/{}, C split {:?}/{}",
        a.split, a.factor, b.split, b.factor, c.split, c.factor
    );
    let dimension = match (k_split, m_split, n_split) {
        (true, _, _) => "K",
        (false, true, _) => "M",
        _ => "N",
    };
    layout_error(dimension, detail)
}

fn check_same_groups(x: &TallSkinnyMatrix, c: &TallSkinnyMatrix, dimension: &'static str) -> Result<()> {
    for (px, pc) in x.parts.iter().zip(&c.parts) {
        if px.start != pc.start || px.len != pc.len {
            return Err(layout_error(dimension, "submatrix block ranges differ"));
        }
        if px.matrix.layout().ranks() != pc.matrix.layout().ranks() || px.matrix.grid() != pc.matrix.grid() {
            return Err(layout_error(dimension, "submatrices live on different subgroups"));
        }
    }
    Ok(())
}

fn widen(l: Ledger, world: usize) -> Ledger {
    if l.nranks() == world {
        return l;
    }
    let mut w = Ledger::new(world);
    w.absorb(&l, &(0..l.nranks()).collect::<Vec<_>>());
    w
}

/// K split: subgroup `s` cuts its K range into slabs over the ranks holding
/// `A_s` or `B_s` (A travels transposed) and forms partial products there;
/// one ring reduction over every rank then adds all partials into C.
fn k_split(a: &TallSkinnyMatrix, b: &TallSkinnyMatrix, c: &mut TallSkinnyMatrix, world: usize) -> Result<Ledger> {
    let mut set: Vec<usize> = a.rank_set();
    set.extend(b.rank_set());
    set.extend(c.rank_set());
    set.sort_unstable();
    set.dedup();
    let worker_of = worker_index(&set, world);
    // per subgroup: slab k (local) → global worker
    let mut slabs: Vec<Vec<usize>> = Vec::with_capacity(a.factor);
    for (ap, bp) in a.parts.iter().zip(&b.parts) {
        let mut members = ap.matrix.layout().rank_set();
        members.extend(bp.matrix.layout().rank_set());
        members.sort_unstable();
        members.dedup();
        let local_of = worker_index(&members, world);
        let n = members.len();
        let shift = rect::decorrelating_shift(&[
            rect::stay_histogram(&ap.matrix, &local_of, n, |_, k| k),
            rect::stay_histogram(&bp.matrix, &local_of, n, |k, _| k),
        ]);
        slabs.push((0..ap.len).map(|k| worker_of[members[(k + shift) % n]]).collect());
    }
    let slab_of = |k: usize| {
        let (s, lk) = a.locate(k);
        slabs[s][lk]
    };
    let slots = |maps: Vec<BlockMap>| -> Vec<_> { maps.into_iter().map(|m| std::sync::Mutex::new(Some(m))).collect() };
    let a_in = slots(a.worker_inputs(&set));
    let b_in = slots(b.worker_inputs(&set));
    let c_mat = &c.parts[0].matrix;
    let c_layout = c_mat.layout().clone();
    let n = set.len();
    let out = run_spmd(&ProcessGrid::linear(n)?, default_schedule(), |ctx: &mut RankCtx<'_, BlockBatch>| {
        let w = ctx.rank();
        ctx.set_phase(Phase::Redistribute);
        let mut buckets = vec![BlockBatch::default(); n];
        for ((i, k), blk) in a_in[w].lock().unwrap().take().unwrap_or_default() {
            buckets[slab_of(k)].0.push((k, i, blk.transpose()));
        }
        let a_slab = merge(personalized_exchange(ctx, buckets)?);
        let mut buckets = vec![BlockBatch::default(); n];
        for ((k, j), blk) in b_in[w].lock().unwrap().take().unwrap_or_default() {
            buckets[slab_of(k)].0.push((k, j, blk));
        }
        let b_slab = merge(personalized_exchange(ctx, buckets)?);

        let a_local: Vec<(usize, usize, DenseBlock)> =
            a_slab.into_iter().map(|((k, i), blk)| (i, k, blk.transpose())).collect();
        let mut partial = BlockMap::new();
        multiply_local_with(a_local.iter().map(|(i, k, blk)| (*i, *k, blk)), &b_slab, &mut partial)?;

        ctx.set_phase(Phase::Reduce);
        ring_reduce(ctx, partial, |i, j| worker_of[c_layout.owner_world(i, j)])
    })?;
    let c = &mut c.parts[0].matrix;
    c.accumulate_from_workers(&set, out.results)?;
    let mut ledger = Ledger::new(world);
    ledger.absorb(&out.ledger, &set);
    Ok(ledger)
}
