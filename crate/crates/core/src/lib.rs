//! Blocked sparse matrix and tensor algebra over a simulated process grid.
//!
//! Every rank of the simulated machine runs as its own worker and talks to
//! the others only through counted messages, so each algorithm reports the
//! exact number of matrix elements it moved per rank.

pub mod blocks;
pub mod cannon;
pub mod comm;
pub mod cost;
pub mod dense;
pub mod error;
pub mod exchange;
pub mod grid;
pub mod index;
pub mod io;
pub mod matrix;
pub mod random;
pub mod rect;
pub mod tall_skinny;
pub mod tensor;

pub use blocks::{block_gemm_acc, order_batches, transpose_block, BatchItem, BlockMap, Blocking, DenseBlock};
pub use cannon::multiply_cannon;
pub use comm::{run_spmd, Ledger, Phase, RankCtx, Schedule};
pub use cost::{select_algorithm, Algorithm, MultiplySpec};
pub use dense::DenseMatrix;
pub use error::{Error, Result};
pub use grid::{split_grid, ProcessGrid, Subgroup};
pub use index::{Axis, Distribution, IndexFuncs};
pub use matrix::{DistMatrix, Layout, LocalStore};
pub use rect::{choose_algorithm, multiply, multiply_reduce_case1, multiply_virtual_case2, multiply_with};
pub use tall_skinny::{choose_split_factor, multiply_tall_skinny, Split, TallSkinnyMatrix};
pub use tensor::{
    contract, contract_dense, ContractionSpec, DenseTensor, MatricizationMap, Source, SparseTensor, TensorBlock,
};
