//! Distributed blocked-CSR sparse matrices.
//!
//! A [`DistMatrix`] is the global view of a matrix whose blocks live on the
//! ranks of a 2D process grid. Block `(i, j)` belongs to the grid rank at
//! coordinates `(rows.owner(i), cols.owner(j))`. Each rank keeps its blocks in
//! a [`LocalStore`]: compressed sparse rows over the block-rows that hold at
//! least one block.
//!
//! Grid ranks are mapped onto world ranks through [`Layout::ranks`], so a
//! matrix can live on a subset of a larger simulated machine.

use std::sync::{Arc, Mutex};

use crate::blocks::{BlockMap, Blocking, DenseBlock};
use crate::comm::{default_schedule, run_spmd, Ledger, Phase, RankCtx};
use crate::dense::DenseMatrix;
use crate::error::{invalid, Error, Result};
use crate::exchange::{bucketize, personalized_exchange, BlockBatch};
use crate::grid::ProcessGrid;
use crate::index::{Axis, Distribution};

/// Blockings, distributions and rank placement of a matrix.
#[derive(Clone, Debug)]
pub struct Layout {
    rows: Axis,
    cols: Axis,
    grid: ProcessGrid,
    ranks: Vec<usize>,
    world: usize,
}

impl Layout {
    pub fn new(rows: Axis, cols: Axis, grid: ProcessGrid, ranks: Vec<usize>, world: usize) -> Result<Self> {
        if grid.ndims() != 2 {
            return invalid(format!("matrix grid must be 2D, got {:?}", grid.dims()));
        }
        if rows.extent() != grid.dims()[0] || cols.extent() != grid.dims()[1] {
            return invalid(format!(
                "distribution extents ({}, {}) do not match grid {:?}",
                rows.extent(),
                cols.extent(),
                grid.dims()
            ));
        }
        for (name, ax) in [("row", &rows), ("column", &cols)] {
            if let Some(i) = (0..ax.n_blocks()).find(|&i| ax.owner(i) >= ax.extent()) {
                return invalid(format!("{name} block {i} mapped outside the grid"));
            }
        }
        if ranks.len() != grid.size() {
            return invalid("rank map length must equal the grid size");
        }
        let mut seen = vec![false; world];
        for &r in &ranks {
            if r >= world || seen[r] {
                return invalid(format!("rank map entry {r} duplicated or >= world size {world}"));
            }
            seen[r] = true;
        }
        Ok(Self { rows, cols, grid, ranks, world })
    }

    /// Layout whose grid ranks are the world ranks.
    pub fn on_grid(rows: Axis, cols: Axis, grid: ProcessGrid) -> Result<Self> {
        let p = grid.size();
        Self::new(rows, cols, grid, (0..p).collect(), p)
    }

    /// Round-robin distribution of the given blockings over `grid`.
    pub fn round_robin(row_blocking: Blocking, col_blocking: Blocking, grid: ProcessGrid) -> Result<Self> {
        if grid.ndims() != 2 {
            return invalid("matrix grid must be 2D");
        }
        let rd = Distribution::round_robin(row_blocking.len(), grid.dims()[0])?;
        let cd = Distribution::round_robin(col_blocking.len(), grid.dims()[1])?;
        Self::on_grid(Axis::stored(row_blocking, rd)?, Axis::stored(col_blocking, cd)?, grid)
    }

    pub fn rows(&self) -> &Axis {
        &self.rows
    }

    pub fn cols(&self) -> &Axis {
        &self.cols
    }

    pub fn grid(&self) -> &ProcessGrid {
        &self.grid
    }

    /// World rank of each grid rank.
    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn world(&self) -> usize {
        self.world
    }

    /// Grid rank owning block `(i, j)`.
    pub fn owner(&self, i: usize, j: usize) -> usize {
        let dims = self.grid.dims();
        self.rows.owner(i) * dims[1] + self.cols.owner(j)
    }

    pub fn owner_world(&self, i: usize, j: usize) -> usize {
        self.ranks[self.owner(i, j)]
    }

    /// World ranks of this layout, sorted.
    pub fn rank_set(&self) -> Vec<usize> {
        let mut s = self.ranks.clone();
        s.sort_unstable();
        s
    }

    pub fn same_blockings(&self, other: &Layout) -> bool {
        self.rows.same_blocking(&other.rows) && self.cols.same_blocking(&other.cols)
    }

    /// Identical placement of every block on the same world ranks.
    pub fn same_placement(&self, other: &Layout) -> bool {
        self.same_blockings(other)
            && self.world == other.world
            && (0..self.rows.n_blocks())
                .all(|i| (0..self.cols.n_blocks()).all(|j| self.owner_world(i, j) == other.owner_world(i, j)))
    }

    /// Axes swapped, grid transposed; every block keeps its world rank.
    pub fn transposed(&self) -> Layout {
        let dims = self.grid.dims();
        let (pr, pc) = (dims[0], dims[1]);
        let grid = ProcessGrid::new(vec![pc, pr]).expect("valid dims");
        let mut ranks = vec![0; pr * pc];
        for r in 0..pr {
            for c in 0..pc {
                ranks[c * pr + r] = self.ranks[r * pc + c];
            }
        }
        Layout { rows: self.cols.clone(), cols: self.rows.clone(), grid, ranks, world: self.world }
    }

    pub(crate) fn world_to_grid(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.world];
        for (g, &w) in self.ranks.iter().enumerate() {
            map[w] = Some(g);
        }
        map
    }
}

/// One rank's blocks in compressed sparse row form.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalStore {
    /// Global block-row indices that hold at least one block, increasing.
    rows: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    blocks: Vec<DenseBlock>,
}

impl Default for LocalStore {
    fn default() -> Self {
        Self { rows: Vec::new(), row_ptr: vec![0], cols: Vec::new(), blocks: Vec::new() }
    }
}

impl LocalStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the CSR arrays from a sorted block map.
    pub fn from_map(map: BlockMap) -> Self {
        let mut s = Self::default();
        for ((i, j), b) in map {
            if s.rows.last() != Some(&i) {
                s.rows.push(i);
                s.row_ptr.push(s.cols.len());
            }
            s.cols.push(j);
            s.blocks.push(b);
            *s.row_ptr.last_mut().unwrap() = s.cols.len();
        }
        s
    }

    pub fn into_map(self) -> BlockMap {
        let mut map = BlockMap::new();
        let mut blocks = self.blocks.into_iter();
        for (r, &i) in self.rows.iter().enumerate() {
            for &j in &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]] {
                map.insert((i, j), blocks.next().expect("csr consistent"));
            }
        }
        map
    }

    fn find(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.rows.binary_search(&i).ok()?;
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.cols[lo..hi].binary_search(&j).ok().map(|p| lo + p)
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&DenseBlock> {
        self.find(i, j).map(|p| &self.blocks[p])
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> Option<&mut DenseBlock> {
        self.find(i, j).map(|p| &mut self.blocks[p])
    }

    /// Inserts `block` at `(i, j)`, or adds it into an existing block when
    /// `accumulate` is set (replaces otherwise).
    pub fn insert(&mut self, i: usize, j: usize, block: DenseBlock, accumulate: bool) -> Result<()> {
        if let Some(p) = self.find(i, j) {
            if accumulate {
                self.blocks[p].axpy(1.0, &block)?;
            } else {
                self.blocks[p] = block;
            }
            return Ok(());
        }
        let r = match self.rows.binary_search(&i) {
            Ok(r) => r,
            Err(r) => {
                self.rows.insert(r, i);
                let start = self.row_ptr[r];
                self.row_ptr.insert(r, start);
                r
            }
        };
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        let pos = lo + self.cols[lo..hi].binary_search(&j).unwrap_err();
        self.cols.insert(pos, j);
        self.blocks.insert(pos, block);
        for p in &mut self.row_ptr[r + 1..] {
            *p += 1;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &DenseBlock)> + '_ {
        self.rows.iter().enumerate().flat_map(move |(r, &i)| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |p| (i, self.cols[p], &self.blocks[p]))
        })
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut DenseBlock> {
        self.blocks.iter_mut()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn elements(&self) -> usize {
        self.blocks.iter().map(DenseBlock::len).sum()
    }

    /// Entries held in the CSR index arrays.
    pub fn index_entries(&self) -> usize {
        self.rows.len() + self.row_ptr.len() + self.cols.len()
    }

    /// Entries held in the row-direction arrays only.
    pub fn row_index_entries(&self) -> usize {
        self.rows.len() + self.row_ptr.len()
    }

    pub fn is_well_formed(&self) -> bool {
        self.row_ptr.len() == self.rows.len() + 1
            && self.row_ptr[0] == 0
            && *self.row_ptr.last().unwrap() == self.cols.len()
            && self.cols.len() == self.blocks.len()
            && self.rows.windows(2).all(|w| w[0] < w[1])
            && (0..self.rows.len()).all(|r| {
                let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
                lo < hi && self.cols[lo..hi].windows(2).all(|w| w[0] < w[1])
            })
    }
}

/// A blocked sparse matrix distributed over a 2D grid.
#[derive(Clone, Debug)]
pub struct DistMatrix {
    layout: Arc<Layout>,
    stores: Vec<LocalStore>,
}

impl DistMatrix {
    /// Empty matrix with stored blockings and distributions on `grid`.
    pub fn new(
        row_blocking: Blocking,
        col_blocking: Blocking,
        grid: ProcessGrid,
        row_dist: Distribution,
        col_dist: Distribution,
    ) -> Result<Self> {
        let layout =
            Layout::on_grid(Axis::stored(row_blocking, row_dist)?, Axis::stored(col_blocking, col_dist)?, grid)?;
        Ok(Self::with_layout(Arc::new(layout)))
    }

    /// Empty matrix on `grid` with round-robin distributions.
    pub fn round_robin(row_blocking: Blocking, col_blocking: Blocking, grid: ProcessGrid) -> Result<Self> {
        Ok(Self::with_layout(Arc::new(Layout::round_robin(row_blocking, col_blocking, grid)?)))
    }

    pub fn with_layout(layout: Arc<Layout>) -> Self {
        let p = layout.grid.size();
        Self { layout, stores: vec![LocalStore::default(); p] }
    }

    /// Empty matrix with the same layout.
    pub fn empty_like(&self) -> Self {
        Self::with_layout(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn rows(&self) -> &Axis {
        &self.layout.rows
    }

    pub fn cols(&self) -> &Axis {
        &self.layout.cols
    }

    pub fn grid(&self) -> &ProcessGrid {
        &self.layout.grid
    }

    /// Total row count in elements.
    pub fn nrows(&self) -> usize {
        self.layout.rows.total()
    }

    pub fn ncols(&self) -> usize {
        self.layout.cols.total()
    }

    pub fn store(&self, grid_rank: usize) -> &LocalStore {
        &self.stores[grid_rank]
    }

    pub(crate) fn store_mut(&mut self, grid_rank: usize) -> &mut LocalStore {
        &mut self.stores[grid_rank]
    }

    pub fn stores(&self) -> &[LocalStore] {
        &self.stores
    }

    fn check_block(&self, i: usize, j: usize, block: &DenseBlock) -> Result<()> {
        self.check_index(i, j)?;
        let (m, n) = (self.rows().block_size(i), self.cols().block_size(j));
        if (block.rows(), block.cols()) != (m, n) {
            return invalid(format!("block ({i}, {j}) must be {m}x{n}, got {}x{}", block.rows(), block.cols()));
        }
        Ok(())
    }

    fn check_index(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.rows().n_blocks() || j >= self.cols().n_blocks() {
            return invalid(format!("block ({i}, {j}) out of range"));
        }
        Ok(())
    }

    fn check_owner(&self, rank: usize, i: usize, j: usize) -> Result<()> {
        let owner = self.layout.owner(i, j);
        if rank != owner {
            return Err(Error::Ownership { rank, row: i, col: j, owner });
        }
        Ok(())
    }

    /// Stores `block` at `(i, j)` on behalf of grid rank `rank`, which must own it.
    pub fn put_block(&mut self, rank: usize, i: usize, j: usize, block: DenseBlock, accumulate: bool) -> Result<()> {
        self.check_block(i, j, &block)?;
        self.check_owner(rank, i, j)?;
        self.stores[rank].insert(i, j, block, accumulate)
    }

    pub fn get_block(&self, rank: usize, i: usize, j: usize) -> Result<Option<&DenseBlock>> {
        self.check_index(i, j)?;
        self.check_owner(rank, i, j)?;
        Ok(self.stores[rank].get(i, j))
    }

    /// Stores `block` at its owner.
    pub fn set_block(&mut self, i: usize, j: usize, block: DenseBlock) -> Result<()> {
        self.check_index(i, j)?;
        let owner = self.layout.owner(i, j);
        self.put_block(owner, i, j, block, false)
    }

    /// Adds `block` into `(i, j)` at its owner.
    pub fn add_block(&mut self, i: usize, j: usize, block: DenseBlock) -> Result<()> {
        self.check_index(i, j)?;
        let owner = self.layout.owner(i, j);
        self.put_block(owner, i, j, block, true)
    }

    /// Looks a block up at its owner.
    pub fn block(&self, i: usize, j: usize) -> Option<&DenseBlock> {
        if i >= self.rows().n_blocks() || j >= self.cols().n_blocks() {
            return None;
        }
        self.stores[self.layout.owner(i, j)].get(i, j)
    }

    /// All stored blocks as `(row, col, block)`, grouped by grid rank.
    pub fn iter_blocks(&self) -> impl Iterator<Item = (usize, usize, &DenseBlock)> + '_ {
        self.stores.iter().flat_map(LocalStore::iter)
    }

    pub fn stored_blocks(&self) -> usize {
        self.stores.iter().map(LocalStore::n_blocks).sum()
    }

    /// Elements in stored blocks (explicit zero blocks included).
    pub fn stored_elements(&self) -> usize {
        self.stores.iter().map(LocalStore::elements).sum()
    }

    /// Stored elements over `M·N`.
    pub fn occupancy(&self) -> f64 {
        let dense = self.nrows() as f64 * self.ncols() as f64;
        if dense == 0.0 {
            return 0.0;
        }
        self.stored_elements() as f64 / dense
    }

    /// Index entries resident on a world rank: axis arrays plus its CSR arrays.
    pub fn index_entries_on(&self, world_rank: usize) -> usize {
        let axes = self.rows().resident_entries() + self.cols().resident_entries();
        match self.layout.ranks.iter().position(|&r| r == world_rank) {
            Some(g) => axes + self.stores[g].index_entries(),
            None => 0,
        }
    }

    /// Index entries along the row dimension resident on a world rank.
    pub fn row_index_entries_on(&self, world_rank: usize) -> usize {
        match self.layout.ranks.iter().position(|&r| r == world_rank) {
            Some(g) => self.rows().resident_entries() + self.stores[g].row_index_entries(),
            None => 0,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.stores.iter().enumerate().all(|(g, s)| {
            s.is_well_formed()
                && s.iter().all(|(i, j, b)| {
                    self.layout.owner(i, j) == g
                        && b.rows() == self.rows().block_size(i)
                        && b.cols() == self.cols().block_size(j)
                })
        })
    }

    /// Transposed matrix. Every block stays on its world rank, so no traffic.
    pub fn transpose(&self) -> DistMatrix {
        let layout = Arc::new(self.layout.transposed());
        let mut out = DistMatrix::with_layout(layout.clone());
        for s in &self.stores {
            for (i, j, b) in s.iter() {
                let g = layout.owner(j, i);
                out.stores[g].insert(j, i, b.transpose(), false).expect("fresh insert");
            }
        }
        out
    }

    /// `self ← alpha·self + beta·other`; layouts must place blocks identically.
    pub fn add(&mut self, other: &DistMatrix, alpha: f64, beta: f64) -> Result<()> {
        if !self.layout.same_placement(&other.layout) {
            return invalid("add needs conformal blockings and identical distributions");
        }
        let other_g = other.layout.world_to_grid();
        for g in 0..self.stores.len() {
            for b in self.stores[g].iter_mut() {
                b.scale(alpha);
            }
            let og = other_g[self.layout.ranks[g]].expect("same placement");
            for (i, j, b) in other.stores[og].iter() {
                let mut scaled = b.clone();
                scaled.scale(beta);
                self.stores[g].insert(i, j, scaled, true)?;
            }
        }
        Ok(())
    }

    /// Sum of diagonal elements; needs identical row and column blockings.
    pub fn trace(&self) -> Result<f64> {
        if !self.rows().same_blocking(self.cols()) {
            return invalid("trace needs a square matrix with equal row and column blockings");
        }
        let mut t = 0.0;
        for s in &self.stores {
            for (i, j, b) in s.iter() {
                if i == j {
                    t += (0..b.rows()).map(|d| b.get(d, d)).sum::<f64>();
                }
            }
        }
        Ok(t)
    }

    /// Gathers the matrix into a dense array.
    pub fn to_dense(&self) -> DenseMatrix {
        let ro = self.rows().offsets();
        let co = self.cols().offsets();
        let mut d = DenseMatrix::zeros(self.nrows(), self.ncols());
        for (i, j, b) in self.iter_blocks() {
            for r in 0..b.rows() {
                for c in 0..b.cols() {
                    d.set(ro[i] + r, co[j] + c, b.get(r, c));
                }
            }
        }
        d
    }

    /// Moves this matrix onto `target`, which must have the same blockings.
    pub fn redistribute(&self, target: Arc<Layout>) -> Result<(DistMatrix, Ledger)> {
        self.redistribute_in(target, Phase::Redistribute)
    }

    /// [`Self::redistribute`] onto a stored layout built from the given grid and distributions.
    pub fn redistribute_to(
        &self,
        grid: ProcessGrid,
        row_dist: Distribution,
        col_dist: Distribution,
    ) -> Result<(DistMatrix, Ledger)> {
        let layout = Layout::on_grid(
            Axis::stored(self.rows().blocking(), row_dist)?,
            Axis::stored(self.cols().blocking(), col_dist)?,
            grid,
        )?;
        self.redistribute(Arc::new(layout))
    }

    /// Redistribution with traffic charged to `phase`.
    pub fn redistribute_in(&self, target: Arc<Layout>, phase: Phase) -> Result<(DistMatrix, Ledger)> {
        if !self.layout.same_blockings(&target) {
            return invalid("redistribute needs identical blockings");
        }
        let mut set = self.layout.rank_set();
        set.extend(target.rank_set());
        set.sort_unstable();
        set.dedup();
        let n = set.len();
        let world = self.layout.world.max(target.world);
        let mut worker_of = vec![usize::MAX; world];
        for (w, &r) in set.iter().enumerate() {
            worker_of[r] = w;
        }
        let inputs = self.take_inputs(&set);
        let dest = |i: usize, j: usize| worker_of[target.owner_world(i, j)];
        let out = run_spmd(&ProcessGrid::linear(n)?, default_schedule(), |ctx: &mut RankCtx<'_, BlockBatch>| {
            ctx.set_phase(phase);
            let mine = inputs[ctx.rank()].lock().unwrap().take().unwrap_or_default();
            let buckets = bucketize(n, mine.into_iter().map(|((i, j), b)| (i, j, b)), dest);
            let got = personalized_exchange(ctx, buckets)?;
            let mut map = BlockMap::new();
            for batch in got {
                map.extend(batch.into_map());
            }
            Ok(map)
        })?;
        let mut result = DistMatrix::with_layout(target.clone());
        let tg = target.world_to_grid();
        for (w, map) in out.results.into_iter().enumerate() {
            if let Some(&Some(g)) = tg.get(set[w]) {
                result.stores[g] = LocalStore::from_map(map);
            } else {
                debug_assert!(map.is_empty());
            }
        }
        let mut ledger = Ledger::new(world);
        ledger.absorb(&out.ledger, &set);
        Ok((result, ledger))
    }

    /// Copies each grid rank's blocks into a slot indexed by grid rank.
    pub(crate) fn grid_inputs(&self) -> Vec<Mutex<Option<BlockMap>>> {
        self.stores.iter().map(|s| Mutex::new(Some(s.iter().map(|(i, j, b)| ((i, j), b.clone())).collect()))).collect()
    }

    /// Copies each grid rank's blocks into the slot of its worker in `set`.
    pub(crate) fn take_inputs(&self, set: &[usize]) -> Vec<Mutex<Option<BlockMap>>> {
        let mut slots: Vec<Mutex<Option<BlockMap>>> = (0..set.len()).map(|_| Mutex::new(None)).collect();
        for (g, s) in self.stores.iter().enumerate() {
            let w = set.binary_search(&self.layout.ranks[g]).expect("rank set covers the layout");
            let map: BlockMap = s.iter().map(|(i, j, b)| ((i, j), b.clone())).collect();
            *slots[w].get_mut().unwrap() = Some(map);
        }
        slots
    }

    /// Adds per-world-rank block maps into this matrix. Every block must sit
    /// on its owner's world rank.
    pub(crate) fn accumulate_from_workers(&mut self, set: &[usize], maps: Vec<BlockMap>) -> Result<()> {
        let wg = self.layout.world_to_grid();
        for (w, map) in maps.into_iter().enumerate() {
            if map.is_empty() {
                continue;
            }
            let Some(g) = wg[set[w]] else {
                return invalid("result block delivered to a rank outside the matrix layout");
            };
            for ((i, j), b) in map {
                self.check_owner(g, i, j)?;
                self.stores[g].insert(i, j, b, true)?;
            }
        }
        Ok(())
    }
}
