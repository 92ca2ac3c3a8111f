//! Dense block tiles, block sizes along one matrix dimension, and the
//! batch-ordered local multiplication.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};

/// A small dense row-major tile of doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseBlock {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return invalid(format!("block dims must be positive, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return invalid(format!("block {rows}x{cols} needs {} values, got {}", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "block dims must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut b = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                b.data[i * cols + j] = f(i, j);
            }
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self ← self + beta·other`.
    pub fn axpy(&mut self, beta: f64, other: &DenseBlock) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return invalid(format!("cannot add {}x{} block into {}x{}", other.rows, other.cols, self.rows, self.cols));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += beta * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> DenseBlock {
        transpose_block(self)
    }
}

/// `c ← c + a·b`. Each output element accumulates its products with `k`
/// innermost, so results are bit-reproducible.
pub fn block_gemm_acc(c: &mut DenseBlock, a: &DenseBlock, b: &DenseBlock) -> Result<()> {
    if a.rows != c.rows || a.cols != b.rows || b.cols != c.cols {
        return invalid(format!(
            "gemm shape mismatch: c {}x{}, a {}x{}, b {}x{}",
            c.rows, c.cols, a.rows, a.cols, b.rows, b.cols
        ));
    }
    let (m, n, k) = (c.rows, c.cols, a.cols);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = c.data[i * n + j];
            for (l, &av) in arow.iter().enumerate() {
                acc += av * b.data[l * n + j];
            }
            c.data[i * n + j] = acc;
        }
    }
    Ok(())
}

pub fn transpose_block(a: &DenseBlock) -> DenseBlock {
    DenseBlock::from_fn(a.cols, a.rows, |i, j| a.get(j, i))
}

/// Block sizes along one matrix dimension, with prefix-sum offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blocking {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl Blocking {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return invalid(format!("block size {i} is zero"));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for &s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        Ok(Self { sizes, offsets })
    }

    pub fn uniform(nblocks: usize, size: usize) -> Result<Self> {
        Self::new(vec![size; nblocks])
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn size(&self, i: usize) -> usize {
        self.sizes[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Total element count along the dimension.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }
}

/// One block product `c(row, col) += a · b` waiting to be executed.
/// `a` and `b` are handles into the caller's block arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub row: usize,
    pub col: usize,
    pub k: usize,
    pub a: usize,
    pub b: usize,
}

/// Sorts items by (row-block, col-block, k-block). Items sharing a target
/// row-block end up contiguous, so row-block runs can be handed to separate
/// workers without write conflicts.
pub fn order_batches(mut items: Vec<BatchItem>) -> Vec<BatchItem> {
    items.sort_by_key(|it| (it.row, it.col, it.k, it.a, it.b));
    items
}

/// Working set of blocks keyed by (block-row, block-col).
pub type BlockMap = BTreeMap<(usize, usize), DenseBlock>;

/// `c += a·b` over local block sets, traversing A row-blocks then B column-blocks.
pub fn multiply_local(a: &BlockMap, b: &BlockMap, c: &mut BlockMap) -> Result<()> {
    multiply_local_with(a.iter().map(|(&(i, k), blk)| (i, k, blk)), b, c)
}

/// Same as [`multiply_local`], with A supplied as `(row, k, block)` triples.
pub fn multiply_local_with<'a>(
    a: impl Iterator<Item = (usize, usize, &'a DenseBlock)>,
    b: &BlockMap,
    c: &mut BlockMap,
) -> Result<()> {
    let a_blocks: Vec<(usize, usize, &DenseBlock)> = a.collect();
    let b_blocks: Vec<(&(usize, usize), &DenseBlock)> = b.iter().collect();
    // B row k -> range in b_blocks (BTreeMap is sorted by (k, j))
    let mut b_rows: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (idx, ((k, _), _)) in b_blocks.iter().enumerate() {
        b_rows.entry(*k).and_modify(|r| r.1 = idx + 1).or_insert((idx, idx + 1));
    }
    let mut items = Vec::new();
    for (ai, &(i, k, _)) in a_blocks.iter().enumerate() {
        if let Some(&(lo, hi)) = b_rows.get(&k) {
            for (bi, ((_, j), _)) in b_blocks.iter().enumerate().take(hi).skip(lo) {
                items.push(BatchItem { row: i, col: *j, k, a: ai, b: bi });
            }
        }
    }
    for it in order_batches(items) {
        let ablk = a_blocks[it.a].2;
        let bblk = b_blocks[it.b].1;
        let cblk = c.entry((it.row, it.col)).or_insert_with(|| DenseBlock::zeros(ablk.rows, bblk.cols));
        block_gemm_acc(cblk, ablk, bblk)?;
    }
    Ok(())
}
