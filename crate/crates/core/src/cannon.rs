//! Cannon multiplication `C ← C + A·B` on a square q×q grid.
//!
//! Tiles are first skewed (row `i` of A left by `i`, column `j` of B up by
//! `j`), charged to [`Phase::Align`]. Then `q` ticks follow; each tick posts
//! the sends of the current A and B tiles to the left and upper neighbours,
//! multiplies the tiles locally, and receives the next ones. C never moves.

use crate::blocks::{multiply_local, BlockMap};
use crate::comm::{default_schedule, run_spmd, Ledger, Phase, RankCtx};
use crate::error::{invalid, Error, Result};
use crate::exchange::BlockBatch;
use crate::matrix::{DistMatrix, LocalStore};

/// Checks every Cannon precondition.
pub fn check_cannon(a: &DistMatrix, b: &DistMatrix, c: &DistMatrix) -> Result<usize> {
    check_conformal(a, b, c)?;
    let Some(q) = a.grid().square_side() else {
        return Err(Error::UnsupportedGrid(format!("Cannon needs a square 2D grid, got {:?}", a.grid().dims())));
    };
    if b.grid() != a.grid() || c.grid() != a.grid() {
        return Err(Error::UnsupportedGrid("A, B and C must share one grid".into()));
    }
    if a.layout().ranks() != b.layout().ranks() || a.layout().ranks() != c.layout().ranks() {
        return invalid("A, B and C must map the grid onto the same ranks");
    }
    if !a.cols().same_distribution(b.rows()) {
        return invalid("A's column distribution must match B's row distribution");
    }
    if !a.rows().same_distribution(c.rows()) || !b.cols().same_distribution(c.cols()) {
        return invalid("C must be distributed like A's rows and B's columns");
    }
    Ok(q)
}

pub(crate) fn check_conformal(a: &DistMatrix, b: &DistMatrix, c: &DistMatrix) -> Result<()> {
    if !a.cols().same_blocking(b.rows()) {
        return invalid(format!(
            "inner dimensions differ: A has {} columns, B has {} rows (or blockings differ)",
            a.ncols(),
            b.nrows()
        ));
    }
    if !a.rows().same_blocking(c.rows()) || !b.cols().same_blocking(c.cols()) {
        return invalid("C blockings must equal A's rows and B's columns");
    }
    Ok(())
}

/// `C ← C + A·B` by Cannon's algorithm. Returns the traffic ledger.
pub fn multiply_cannon(a: &DistMatrix, b: &DistMatrix, c: &mut DistMatrix) -> Result<Ledger> {
    let q = check_cannon(a, b, c)?;
    let grid = a.grid().clone();
    let ranks = a.layout().ranks().to_vec();
    let a_in = a.grid_inputs();
    let b_in = b.grid_inputs();
    let c_in = c.grid_inputs();
    let at = |r: usize, col: usize| (r % q) * q + (col % q);

    let out = run_spmd(&grid, default_schedule(), |ctx: &mut RankCtx<'_, BlockBatch>| {
        let g = ctx.rank();
        let (i, j) = (g / q, g % q);
        let take =
            |slots: &Vec<std::sync::Mutex<Option<BlockMap>>>| slots[g].lock().unwrap().take().unwrap_or_default();
        let mut a_tile = take(&a_in);
        let mut b_tile = take(&b_in);
        let mut c_local = take(&c_in);

        ctx.set_phase(Phase::Align);
        ctx.send(at(i, j + q - i), BlockBatch::from_map(a_tile))?;
        ctx.send(at(i + q - j, j), BlockBatch::from_map(b_tile))?;
        a_tile = ctx.recv(at(i, j + i))?.into_map();
        b_tile = ctx.recv(at(i + j, j))?.into_map();

        ctx.set_phase(Phase::Shift);
        for _ in 0..q {
            ctx.send(at(i, j + q - 1), BlockBatch::from_map(a_tile.clone()))?;
            ctx.send(at(i + q - 1, j), BlockBatch::from_map(b_tile.clone()))?;
            multiply_local(&a_tile, &b_tile, &mut c_local)?;
            a_tile = ctx.recv(at(i, j + 1))?.into_map();
            b_tile = ctx.recv(at(i + 1, j))?.into_map();
        }
        Ok(c_local)
    })?;

    for (g, map) in out.results.into_iter().enumerate() {
        *c.store_mut(g) = LocalStore::from_map(map);
    }
    let mut ledger = Ledger::new(a.layout().world());
    ledger.absorb(&out.ledger, &ranks);
    Ok(ledger)
}
