//! Block-sparse tensors of rank 2–4 on n-dimensional grids, stored as
//! matricized tall-and-skinny matrices, and contraction by delegation to
//! the matrix multiply.
//!
//! A matricization map sends some tensor dimensions to matrix rows and the
//! rest to columns. Inside each group the coordinates are mixed-radix
//! encoded with the later-listed dimension varying fastest, for block
//! indices, grid coordinates and the elements inside a block alike.

use std::sync::Arc;

use crate::blocks::{Blocking, DenseBlock};
use crate::comm::{Ledger, Phase};
use crate::error::{invalid, Error, Result};
use crate::grid::ProcessGrid;
use crate::index::IndexFuncs;
use crate::tall_skinny::{choose_split_factor, multiply_tall_skinny, Split, TallSkinnyMatrix};

pub const MAX_RANK: usize = 4;

/// Which tensor dimensions become matrix rows and which become columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatricizationMap {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl MatricizationMap {
    pub fn new(rows: Vec<usize>, cols: Vec<usize>) -> Self {
        Self { rows, cols }
    }

    fn validate(&self, rank: usize) -> Result<()> {
        if self.rows.is_empty() || self.cols.is_empty() {
            return invalid("both matricization groups must be non-empty");
        }
        let mut seen = vec![false; rank];
        for &d in self.rows.iter().chain(&self.cols) {
            if d >= rank || seen[d] {
                return invalid(format!("map {self:?} is not a partition of 0..{rank}"));
            }
            seen[d] = true;
        }
        if seen.iter().any(|&s| !s) {
            return invalid(format!("map {self:?} is not a partition of 0..{rank}"));
        }
        Ok(())
    }
}

/// One dense tensor block, row-major over the tensor dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBlock {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorBlock {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return invalid(format!("block of shape {shape:?} needs {} values", shape.iter().product::<usize>()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut x = vec![0; shape.len()];
        for _ in 0..n {
            data.push(f(&x));
            increment(&mut x, &shape);
        }
        Self { shape, data }
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn get(&self, x: &[usize]) -> f64 {
        self.data[encode(x.iter().copied(), self.shape.iter().copied())]
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute norm when `other` is 0.
    pub fn relative_error(&self, other: &DenseTensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        let diff: f64 = self.data.iter().zip(&other.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = other.data.iter().map(|y| y * y).sum::<f64>().sqrt();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }
}

/// Advances a row-major multi-index; wraps to all zeros after the last one.
fn increment(x: &mut [usize], shape: &[usize]) {
    for d in (0..x.len()).rev() {
        x[d] += 1;
        if x[d] < shape[d] {
            return;
        }
        x[d] = 0;
    }
}

/// Mixed-radix value of `digits` (first digit most significant).
fn encode(digits: impl Iterator<Item = usize>, radices: impl Iterator<Item = usize>) -> usize {
    digits.zip(radices).fold(0, |acc, (x, r)| acc * r + x)
}

/// Inverse of [`encode`]: fills `out[dims[t]]` from `value`.
fn decode(mut value: usize, dims: &[usize], radix: impl Fn(usize) -> usize, out: &mut [usize]) {
    for &d in dims.iter().rev() {
        let r = radix(d);
        out[d] = value % r;
        value /= r;
    }
}

#[derive(Clone, Debug)]
pub struct SparseTensor {
    blockings: Arc<Vec<Blocking>>,
    grid: ProcessGrid,
    map: MatricizationMap,
    matrix: TallSkinnyMatrix,
}

impl SparseTensor {
    /// Empty tensor; the long matricized dimension is split by
    /// [`choose_split_factor`] (capped by the grid extent along it).
    pub fn new(blockings: Vec<Blocking>, grid: ProcessGrid, map: MatricizationMap) -> Result<Self> {
        Self::build(blockings, grid, map, None)
    }

    /// Empty tensor with an explicit split of the matricized form.
    pub fn with_split(
        blockings: Vec<Blocking>,
        grid: ProcessGrid,
        map: MatricizationMap,
        split: Split,
        factor: usize,
    ) -> Result<Self> {
        Self::build(blockings, grid, map, Some((split, factor)))
    }

    /// Empty tensor on the most balanced `n`-dimensional grid of `p` ranks.
    pub fn balanced(blockings: Vec<Blocking>, p: usize, map: MatricizationMap) -> Result<Self> {
        let grid = ProcessGrid::balanced(p, blockings.len())?;
        Self::new(blockings, grid, map)
    }

    fn build(
        blockings: Vec<Blocking>,
        grid: ProcessGrid,
        map: MatricizationMap,
        split: Option<(Split, usize)>,
    ) -> Result<Self> {
        let n = blockings.len();
        if !(2..=MAX_RANK).contains(&n) {
            return invalid(format!("tensor rank {n} outside 2..={MAX_RANK}"));
        }
        if grid.ndims() != n {
            return invalid(format!("grid has {} dimensions, tensor rank is {n}", grid.ndims()));
        }
        if blockings.iter().any(|b| b.is_empty()) {
            return invalid("every tensor dimension needs at least one block");
        }
        map.validate(n)?;
        let blockings = Arc::new(blockings);
        let gdims = grid.dims().to_vec();
        let rows = group_funcs(&blockings, &gdims, &map.rows);
        let cols = group_funcs(&blockings, &gdims, &map.cols);
        let gr: usize = map.rows.iter().map(|&d| gdims[d]).product();
        let gc: usize = map.cols.iter().map(|&d| gdims[d]).product();
        let mgrid = ProcessGrid::new(vec![gr, gc])?;
        let mut ranks = Vec::with_capacity(gr * gc);
        let mut tc = vec![0; n];
        for r in 0..gr {
            for c in 0..gc {
                decode(r, &map.rows, |d| gdims[d], &mut tc);
                decode(c, &map.cols, |d| gdims[d], &mut tc);
                ranks.push(grid.rank_of(&tc)?);
            }
        }
        let (split, factor) = match split {
            Some(s) => s,
            None => {
                let total = |dims: &[usize]| dims.iter().map(|&d| blockings[d].total()).product::<usize>();
                let (rt, ct) = (total(&map.rows), total(&map.cols));
                let (split, long, short, extent) =
                    if rt >= ct { (Split::Rows, rt, ct, gr) } else { (Split::Cols, ct, rt, gc) };
                let f = choose_split_factor(long, short, grid.size()).min(extent);
                (split, f)
            }
        };
        let matrix = TallSkinnyMatrix::with_placement(rows, cols, mgrid, ranks, grid.size(), split, factor)?;
        Ok(Self { blockings, grid, map, matrix })
    }

    pub fn rank(&self) -> usize {
        self.blockings.len()
    }

    pub fn blockings(&self) -> &[Blocking] {
        &self.blockings
    }

    pub fn grid(&self) -> &ProcessGrid {
        &self.grid
    }

    pub fn map(&self) -> &MatricizationMap {
        &self.map
    }

    pub fn matrix(&self) -> &TallSkinnyMatrix {
        &self.matrix
    }

    pub fn empty_like(&self) -> Self {
        Self { matrix: self.matrix.empty_like(), ..self.clone() }
    }

    /// Block counts per dimension.
    pub fn block_dims(&self) -> Vec<usize> {
        self.blockings.iter().map(Blocking::len).collect()
    }

    /// Element extents per dimension.
    pub fn shape(&self) -> Vec<usize> {
        self.blockings.iter().map(Blocking::total).collect()
    }

    fn check_coords(&self, coords: &[usize]) -> Result<()> {
        if coords.len() != self.rank() || coords.iter().zip(self.blockings.iter()).any(|(&x, b)| x >= b.len()) {
            return invalid(format!("block coordinates {coords:?} outside {:?}", self.block_dims()));
        }
        Ok(())
    }

    /// Tensor block coordinates → matrix block (row, col).
    pub fn to_matrix_index(&self, coords: &[usize]) -> Result<(usize, usize)> {
        self.check_coords(coords)?;
        let nb = |d: usize| self.blockings[d].len();
        Ok((
            encode(self.map.rows.iter().map(|&d| coords[d]), self.map.rows.iter().map(|&d| nb(d))),
            encode(self.map.cols.iter().map(|&d| coords[d]), self.map.cols.iter().map(|&d| nb(d))),
        ))
    }

    /// Matrix block (row, col) → tensor block coordinates.
    pub fn to_tensor_index(&self, row: usize, col: usize) -> Result<Vec<usize>> {
        if row >= self.matrix.n_block_rows() || col >= self.matrix.n_block_cols() {
            return invalid(format!("matrix block ({row}, {col}) out of range"));
        }
        let mut x = vec![0; self.rank()];
        decode(row, &self.map.rows, |d| self.blockings[d].len(), &mut x);
        decode(col, &self.map.cols, |d| self.blockings[d].len(), &mut x);
        Ok(x)
    }

    fn block_shape(&self, coords: &[usize]) -> Vec<usize> {
        coords.iter().enumerate().map(|(d, &x)| self.blockings[d].size(x)).collect()
    }

    /// Reshapes a tensor block into its matricized form under this map.
    fn matricize(&self, tb: &TensorBlock) -> DenseBlock {
        let s = &tb.shape;
        let rows: usize = self.map.rows.iter().map(|&d| s[d]).product();
        let cols: usize = self.map.cols.iter().map(|&d| s[d]).product();
        let mut out = vec![0.0; rows * cols];
        let mut x = vec![0; s.len()];
        for &v in &tb.data {
            let r = encode(self.map.rows.iter().map(|&d| x[d]), self.map.rows.iter().map(|&d| s[d]));
            let c = encode(self.map.cols.iter().map(|&d| x[d]), self.map.cols.iter().map(|&d| s[d]));
            out[r * cols + c] = v;
            increment(&mut x, s);
        }
        DenseBlock::new(rows, cols, out).expect("sizes match by construction")
    }

    fn tensorize(&self, shape: Vec<usize>, blk: &DenseBlock) -> TensorBlock {
        let mut data = Vec::with_capacity(blk.len());
        let mut x = vec![0; shape.len()];
        for _ in 0..blk.len() {
            let r = encode(self.map.rows.iter().map(|&d| x[d]), self.map.rows.iter().map(|&d| shape[d]));
            let c = encode(self.map.cols.iter().map(|&d| x[d]), self.map.cols.iter().map(|&d| shape[d]));
            data.push(blk.get(r, c));
            increment(&mut x, &shape);
        }
        TensorBlock { shape, data }
    }

    pub fn put_block(&mut self, coords: &[usize], block: TensorBlock) -> Result<()> {
        let (i, j) = self.to_matrix_index(coords)?;
        let want = self.block_shape(coords);
        if block.shape != want {
            return invalid(format!("block at {coords:?} must have shape {want:?}, got {:?}", block.shape));
        }
        let m = self.matricize(&block);
        self.matrix.set_block(i, j, m)
    }

    pub fn get_block(&self, coords: &[usize]) -> Result<Option<TensorBlock>> {
        let (i, j) = self.to_matrix_index(coords)?;
        Ok(self.matrix.block(i, j).map(|b| self.tensorize(self.block_shape(coords), b)))
    }

    /// Stored blocks as (coordinates, block).
    pub fn iter_blocks(&self) -> impl Iterator<Item = (Vec<usize>, TensorBlock)> + '_ {
        self.matrix.iter_blocks().map(move |(i, j, b)| {
            let x = self.to_tensor_index(i, j).expect("stored blocks are in range");
            let shape = self.block_shape(&x);
            (x, self.tensorize(shape, b))
        })
    }

    pub fn stored_blocks(&self) -> usize {
        self.matrix.stored_blocks()
    }

    pub fn stored_elements(&self) -> usize {
        self.matrix.stored_elements()
    }

    pub fn to_dense(&self) -> DenseTensor {
        let shape = self.shape();
        let mut data = vec![0.0; shape.iter().product()];
        let offsets: Vec<Vec<usize>> = self.blockings.iter().map(|b| b.offsets().to_vec()).collect();
        for (x, tb) in self.iter_blocks() {
            let mut e = vec![0; tb.shape.len()];
            for &v in &tb.data {
                let at = encode((0..e.len()).map(|d| offsets[d][x[d]] + e[d]), shape.iter().copied());
                data[at] = v;
                increment(&mut e, &tb.shape);
            }
        }
        DenseTensor { shape, data }
    }

    /// The same tensor under another map and split, moved with traffic
    /// charged to [`Phase::Remap`].
    pub fn remapped(&self, map: MatricizationMap, split: Option<(Split, usize)>) -> Result<(SparseTensor, Ledger)> {
        let target = Self::build(self.blockings.to_vec(), self.grid.clone(), map, split)?;
        self.remap_into(target)
    }

    /// Adds this tensor's blocks into `target` (same blockings and world).
    fn remap_into(&self, target: SparseTensor) -> Result<(SparseTensor, Ledger)> {
        let SparseTensor { blockings, grid, map, matrix } = target;
        let shell = SparseTensor { blockings, grid, map, matrix: matrix.empty_like() };
        let (matrix, ledger) = self.matrix.remap(matrix, Phase::Remap, |i, j, b| {
            let x = self.to_tensor_index(i, j).expect("stored blocks are in range");
            let tb = self.tensorize(self.block_shape(&x), &b);
            let (ti, tj) = shell.to_matrix_index(&x).expect("same block dims");
            (ti, tj, shell.matricize(&tb))
        })?;
        Ok((SparseTensor { matrix, ..shell }, ledger))
    }
}

/// Index functions of one matricized dimension group, computed on the fly
/// from the per-dimension blockings.
fn group_funcs(blockings: &Arc<Vec<Blocking>>, gdims: &[usize], dims: &[usize]) -> IndexFuncs {
    let n_blocks = dims.iter().map(|&d| blockings[d].len()).product();
    let rank = blockings.len();
    let (b1, d1) = (blockings.clone(), dims.to_vec());
    let (b2, d2, g2) = (blockings.clone(), dims.to_vec(), gdims.to_vec());
    IndexFuncs::new(
        n_blocks,
        move |i| {
            let mut x = vec![0; rank];
            decode(i, &d1, |d| b1[d].len(), &mut x);
            d1.iter().map(|&d| b1[d].size(x[d])).product()
        },
        move |i| {
            let mut x = vec![0; rank];
            decode(i, &d2, |d| b2[d].len(), &mut x);
            encode(d2.iter().map(|&d| x[d] % g2[d]), d2.iter().map(|&d| g2[d]))
        },
    )
}

/// Where an output dimension of a contraction comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    A(usize),
    B(usize),
}

/// `C[output] = Σ A·B` over the paired dimensions `a_contracted[t] ↔ b_contracted[t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractionSpec {
    pub a_contracted: Vec<usize>,
    pub b_contracted: Vec<usize>,
    /// Source of each dimension of C, in C's dimension order.
    pub output: Vec<Source>,
}

impl ContractionSpec {
    fn validate(&self, a: &SparseTensor, b: &SparseTensor, c: &SparseTensor) -> Result<()> {
        if self.a_contracted.is_empty() || self.a_contracted.len() != self.b_contracted.len() {
            return invalid("contracted index lists must be non-empty and of equal length");
        }
        let distinct = |v: &[usize], n: usize| {
            let mut seen = vec![false; n];
            v.iter().all(|&d| d < n && !std::mem::replace(&mut seen[d], true))
        };
        if !distinct(&self.a_contracted, a.rank()) || !distinct(&self.b_contracted, b.rank()) {
            return invalid("contracted indices must be distinct and in range");
        }
        for (&da, &db) in self.a_contracted.iter().zip(&self.b_contracted) {
            if a.blockings[da] != b.blockings[db] {
                return invalid(format!("blockings of A dimension {da} and B dimension {db} differ"));
            }
        }
        let retained_a: Vec<usize> = (0..a.rank()).filter(|d| !self.a_contracted.contains(d)).collect();
        let retained_b: Vec<usize> = (0..b.rank()).filter(|d| !self.b_contracted.contains(d)).collect();
        if retained_a.is_empty() || retained_b.is_empty() {
            return invalid("each operand must keep at least one index");
        }
        if self.output.len() != c.rank() || self.output.len() != retained_a.len() + retained_b.len() {
            return invalid(format!(
                "C has rank {}, contraction keeps {} indices",
                c.rank(),
                retained_a.len() + retained_b.len()
            ));
        }
        for (pos, src) in self.output.iter().enumerate() {
            let (blk, ok) = match *src {
                Source::A(d) => (a.blockings.get(d), retained_a.contains(&d)),
                Source::B(d) => (b.blockings.get(d), retained_b.contains(&d)),
            };
            if !ok || self.output.iter().filter(|s| *s == src).count() != 1 {
                return invalid(format!("output index {pos} ({src:?}) is not a retained index used once"));
            }
            if blk != Some(&c.blockings[pos]) {
                return invalid(format!("blocking of C dimension {pos} differs from its source"));
            }
        }
        if a.grid.size() != b.grid.size() || a.grid.size() != c.grid.size() {
            return invalid("A, B and C must live on the same number of ranks");
        }
        Ok(())
    }

    fn position(&self, src: Source) -> usize {
        self.output.iter().position(|&s| s == src).expect("validated")
    }

    fn partner(&self, da: usize) -> Option<usize> {
        self.a_contracted.iter().position(|&d| d == da).map(|t| self.b_contracted[t])
    }

    /// True when the matricized forms already multiply as `C = A·B`.
    fn aligned(&self, a: &SparseTensor, b: &SparseTensor, c: &SparseTensor) -> bool {
        let am = &a.map;
        let bm = &b.map;
        am.cols.len() == self.a_contracted.len()
            && bm.rows.len() == self.b_contracted.len()
            && am.cols.iter().zip(&bm.rows).all(|(&da, &db)| self.partner(da) == Some(db))
            && c.map.rows == am.rows.iter().map(|&d| self.position(Source::A(d))).collect::<Vec<_>>()
            && c.map.cols == bm.cols.iter().map(|&d| self.position(Source::B(d))).collect::<Vec<_>>()
    }

    /// Maps for the remapped operands: retained indices in C's order.
    pub fn aligned_maps(&self) -> (MatricizationMap, MatricizationMap, MatricizationMap) {
        let mut a_rows = Vec::new();
        let mut b_cols = Vec::new();
        let mut c_rows = Vec::new();
        let mut c_cols = Vec::new();
        for (pos, src) in self.output.iter().enumerate() {
            match *src {
                Source::A(d) => {
                    a_rows.push(d);
                    c_rows.push(pos);
                }
                Source::B(d) => {
                    b_cols.push(d);
                    c_cols.push(pos);
                }
            }
        }
        (
            MatricizationMap::new(a_rows, self.a_contracted.clone()),
            MatricizationMap::new(self.b_contracted.clone(), b_cols),
            MatricizationMap::new(c_rows, c_cols),
        )
    }
}

/// Reference contraction by nested loops over C's indices and the
/// contracted indices.
pub fn contract_dense(a: &DenseTensor, b: &DenseTensor, spec: &ContractionSpec) -> Result<DenseTensor> {
    let in_range = |d: usize, n: usize| d < n;
    let sources_ok = spec.output.iter().all(|s| match *s {
        Source::A(d) => in_range(d, a.shape.len()),
        Source::B(d) => in_range(d, b.shape.len()),
    });
    if spec.a_contracted.len() != spec.b_contracted.len()
        || !sources_ok
        || spec.a_contracted.iter().zip(&spec.b_contracted).any(|(&da, &db)| {
            !in_range(da, a.shape.len()) || !in_range(db, b.shape.len()) || a.shape[da] != b.shape[db]
        })
    {
        return invalid("contraction does not fit the operand shapes");
    }
    let c_shape: Vec<usize> = spec
        .output
        .iter()
        .map(|s| match *s {
            Source::A(d) => a.shape[d],
            Source::B(d) => b.shape[d],
        })
        .collect();
    let k_shape: Vec<usize> = spec.a_contracted.iter().map(|&d| a.shape[d]).collect();
    let mut data = Vec::new();
    let mut z = vec![0; c_shape.len()];
    for _ in 0..c_shape.iter().product::<usize>() {
        let mut xa = vec![0; a.shape.len()];
        let mut xb = vec![0; b.shape.len()];
        for (pos, s) in spec.output.iter().enumerate() {
            match *s {
                Source::A(d) => xa[d] = z[pos],
                Source::B(d) => xb[d] = z[pos],
            }
        }
        let mut sum = 0.0;
        let mut k = vec![0; k_shape.len()];
        for _ in 0..k_shape.iter().product::<usize>() {
            for (t, &kv) in k.iter().enumerate() {
                xa[spec.a_contracted[t]] = kv;
                xb[spec.b_contracted[t]] = kv;
            }
            sum += a.get(&xa) * b.get(&xb);
            increment(&mut k, &k_shape);
        }
        data.push(sum);
        increment(&mut z, &c_shape);
    }
    Ok(DenseTensor { shape: c_shape, data })
}

/// `C ← C + contraction(A, B)`.
///
/// When the maps already line up and the tall-and-skinny multiply accepts
/// the splits, nothing is redistributed. Otherwise A, B and C are remapped
/// to aligned, unsplit layouts first (and C back afterwards), with that
/// traffic charged to [`Phase::Remap`].
pub fn contract(a: &SparseTensor, b: &SparseTensor, spec: &ContractionSpec, c: &mut SparseTensor) -> Result<Ledger> {
    spec.validate(a, b, c)?;
    if spec.aligned(a, b, c) {
        match multiply_tall_skinny(&a.matrix, &b.matrix, &mut c.matrix) {
            Err(Error::Layout { .. }) => {}
            other => return other,
        }
    }
    let (am, bm, cm) = spec.aligned_maps();
    let unsplit = Some((Split::Rows, 1));
    let (a2, mut ledger) = a.remapped(am, unsplit)?;
    let (b2, l) = b.remapped(bm, unsplit)?;
    ledger.merge(&l);
    let mut c2 = SparseTensor::build(c.blockings.to_vec(), c.grid.clone(), cm, unsplit)?;
    let l = multiply_tall_skinny(&a2.matrix, &b2.matrix, &mut c2.matrix)?;
    ledger.merge(&l);
    let (c_new, l) = c2.remap_into(c.clone())?;
    ledger.merge(&l);
    *c = c_new;
    Ok(ledger)
}
