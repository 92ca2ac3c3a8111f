//! Per-dimension index data: block sizes and block-to-grid-coordinate maps.
//!
//! An [`Axis`] answers index queries through function objects. Axes built
//! from a [`Blocking`] and a [`Distribution`] hold their arrays in memory;
//! axes built from [`IndexFuncs`] compute everything on the fly and hold
//! nothing, which is what lets very long matrix dimensions avoid a
//! replicated index.

use std::fmt;
use std::sync::Arc;

use crate::blocks::Blocking;
use crate::error::{invalid, Result};

/// Block-index → grid coordinate along one grid dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Distribution {
    coords: Vec<usize>,
    extent: usize,
}

impl Distribution {
    pub fn new(coords: Vec<usize>, extent: usize) -> Result<Self> {
        if extent == 0 {
            return invalid("distribution extent must be positive");
        }
        if let Some((i, &c)) = coords.iter().enumerate().find(|(_, &c)| c >= extent) {
            return invalid(format!("block {i} mapped to coordinate {c} >= extent {extent}"));
        }
        Ok(Self { coords, extent })
    }

    /// `block mod extent`.
    pub fn round_robin(nblocks: usize, extent: usize) -> Result<Self> {
        if extent == 0 {
            return invalid("distribution extent must be positive");
        }
        Ok(Self { coords: (0..nblocks).map(|i| i % extent).collect(), extent })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coord(&self, i: usize) -> usize {
        self.coords[i]
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }
}

pub type IndexFn = Arc<dyn Fn(usize) -> usize + Send + Sync>;

/// Index data supplied by function objects instead of stored arrays.
#[derive(Clone)]
pub struct IndexFuncs {
    pub n_blocks: usize,
    pub block_size: IndexFn,
    /// Block → coordinate along the owning grid dimension (full, unsplit extent).
    pub dist: IndexFn,
}

impl fmt::Debug for IndexFuncs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IndexFuncs").field("n_blocks", &self.n_blocks).finish_non_exhaustive()
    }
}

impl IndexFuncs {
    pub fn new(
        n_blocks: usize,
        block_size: impl Fn(usize) -> usize + Send + Sync + 'static,
        dist: impl Fn(usize) -> usize + Send + Sync + 'static,
    ) -> Self {
        Self { n_blocks, block_size: Arc::new(block_size), dist: Arc::new(dist) }
    }

    /// Uniform blocks of `size`, distributed round-robin over `extent`.
    pub fn uniform(n_blocks: usize, size: usize, extent: usize) -> Self {
        Self::new(n_blocks, move |_| size, move |i| i % extent)
    }

    /// Checks sizes and coordinates for every block. O(n) time, O(1) memory.
    pub fn validate(&self, extent: usize) -> Result<()> {
        for i in 0..self.n_blocks {
            if (self.block_size)(i) == 0 {
                return invalid(format!("block {i} has zero size"));
            }
            let c = (self.dist)(i);
            if c >= extent {
                return invalid(format!("block {i} mapped to coordinate {c} >= extent {extent}"));
            }
        }
        Ok(())
    }
}

/// One matrix dimension: block count, sizes, owners along one grid dimension.
#[derive(Clone)]
pub struct Axis {
    n_blocks: usize,
    extent: usize,
    total: usize,
    size_fn: IndexFn,
    owner_fn: IndexFn,
    resident: usize,
}

impl fmt::Debug for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Axis")
            .field("n_blocks", &self.n_blocks)
            .field("extent", &self.extent)
            .field("total", &self.total)
            .field("resident", &self.resident)
            .finish_non_exhaustive()
    }
}

impl Axis {
    /// Axis backed by stored arrays.
    pub fn stored(blocking: Blocking, dist: Distribution) -> Result<Self> {
        if blocking.len() != dist.len() {
            return invalid(format!("distribution covers {} blocks, blocking has {}", dist.len(), blocking.len()));
        }
        let resident = blocking.sizes().len() + blocking.offsets().len() + dist.len();
        let total = blocking.total();
        let extent = dist.extent();
        let blocking = Arc::new(blocking);
        let dist = Arc::new(dist);
        Ok(Self {
            n_blocks: blocking.len(),
            extent,
            total,
            size_fn: Arc::new(move |i| blocking.size(i)),
            owner_fn: Arc::new(move |i| dist.coord(i)),
            resident,
        })
    }

    /// Axis whose index data is computed by `funcs`; holds no arrays.
    pub fn from_funcs(funcs: &IndexFuncs, extent: usize) -> Result<Self> {
        Self::window(funcs, 0, funcs.n_blocks, 0, extent)
    }

    /// Blocks `[start, start+len)` of `funcs`, re-based to 0. Global coordinates
    /// `[coord_offset, coord_offset+extent)` map to local `0..extent`; coordinates
    /// outside that range wrap modulo `extent`.
    pub fn window(funcs: &IndexFuncs, start: usize, len: usize, coord_offset: usize, extent: usize) -> Result<Self> {
        if extent == 0 {
            return invalid("axis extent must be positive");
        }
        if start + len > funcs.n_blocks {
            return invalid(format!("window [{start}, {}) exceeds {} blocks", start + len, funcs.n_blocks));
        }
        let size = funcs.block_size.clone();
        let dist = funcs.dist.clone();
        let mut total = 0;
        for i in start..start + len {
            let s = size(i);
            if s == 0 {
                return invalid(format!("block {i} has zero size"));
            }
            total += s;
        }
        Ok(Self {
            n_blocks: len,
            extent,
            total,
            size_fn: Arc::new(move |i| size(start + i)),
            owner_fn: Arc::new(move |i| {
                let c = dist(start + i);
                if c >= coord_offset && c < coord_offset + extent {
                    c - coord_offset
                } else {
                    c % extent
                }
            }),
            resident: 0,
        })
    }

    /// Same block sizes, owners assigned round-robin over `extent`.
    pub fn with_round_robin(&self, extent: usize) -> Result<Self> {
        if extent == 0 {
            return invalid("axis extent must be positive");
        }
        Ok(Self { extent, owner_fn: Arc::new(move |i| i % extent), resident: 0, ..self.clone() })
    }

    /// Same block sizes, owners from an arbitrary function.
    pub fn with_owner(&self, extent: usize, owner: impl Fn(usize) -> usize + Send + Sync + 'static) -> Self {
        Self { extent, owner_fn: Arc::new(owner), resident: 0, ..self.clone() }
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    /// Total elements along the dimension.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn block_size(&self, i: usize) -> usize {
        (self.size_fn)(i)
    }

    pub fn owner(&self, i: usize) -> usize {
        (self.owner_fn)(i)
    }

    /// Index entries this axis keeps in memory.
    pub fn resident_entries(&self) -> usize {
        self.resident
    }

    /// Element offsets of every block; a temporary for gathering utilities.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.n_blocks + 1);
        off.push(0);
        for i in 0..self.n_blocks {
            off.push(off[i] + self.block_size(i));
        }
        off
    }

    pub fn same_blocking(&self, other: &Axis) -> bool {
        self.n_blocks == other.n_blocks
            && self.total == other.total
            && (0..self.n_blocks).all(|i| self.block_size(i) == other.block_size(i))
    }

    pub fn same_distribution(&self, other: &Axis) -> bool {
        self.extent == other.extent && (0..self.n_blocks).all(|i| self.owner(i) == other.owner(i))
    }

    pub fn blocking(&self) -> Blocking {
        Blocking::new((0..self.n_blocks).map(|i| self.block_size(i)).collect())
            .expect("axis sizes are validated positive")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_rule() {
        let d = Distribution::round_robin(4, 2).unwrap();
        let on_zero: Vec<usize> = (0..4).filter(|&i| d.coord(i) == 0).collect();
        assert_eq!(on_zero, vec![0, 2]);
        assert!(Distribution::new(vec![0, 2], 2).is_err());
    }

    #[test]
    fn stored_axis_rejects_length_mismatch() {
        let b = Blocking::uniform(3, 2).unwrap();
        let d = Distribution::round_robin(4, 2).unwrap();
        assert!(Axis::stored(b, d).is_err());
    }

    #[test]
    fn window_rebases() {
        let f = IndexFuncs::new(10, |i| i + 1, |i| i % 4);
        let ax = Axis::window(&f, 4, 3, 2, 2).unwrap();
        assert_eq!(ax.n_blocks(), 3);
        assert_eq!(ax.block_size(0), 5);
        assert_eq!(ax.total(), 5 + 6 + 7);
        // coords 0,1,2 -> 0 wraps, 1 wraps, 2 maps to 0
        assert_eq!((0..3).map(|i| ax.owner(i)).collect::<Vec<_>>(), vec![0, 1, 0]);
        assert_eq!(ax.resident_entries(), 0);
    }

    #[test]
    fn funcs_validate() {
        let f = IndexFuncs::new(3, |_| 2, |i| i);
        assert!(f.validate(3).is_ok());
        assert!(f.validate(2).is_err());
    }
}
