//! N-dimensional process grids and subgroup splitting.
//!
//! Ranks are enumerated row-major: the last grid dimension varies fastest.

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProcessGrid {
    dims: Vec<usize>,
}

impl ProcessGrid {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return invalid("process grid needs at least one dimension");
        }
        if let Some(d) = dims.iter().position(|&e| e == 0) {
            return invalid(format!("grid dimension {d} has zero extent"));
        }
        Ok(Self { dims })
    }

    /// One-dimensional grid of `p` ranks.
    pub fn linear(p: usize) -> Result<Self> {
        Self::new(vec![p])
    }

    /// The most balanced factorization of `p` into `ndims` extents,
    /// sorted in non-increasing order.
    pub fn balanced(p: usize, ndims: usize) -> Result<Self> {
        if p == 0 || ndims == 0 {
            return invalid("balanced grid needs p >= 1 and ndims >= 1");
        }
        Self::new(balanced_factors(p, ndims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndims(&self) -> usize {
        self.dims.len()
    }

    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn coords_of(&self, rank: usize) -> Result<Vec<usize>> {
        if rank >= self.size() {
            return invalid(format!("rank {rank} out of range for grid {:?}", self.dims));
        }
        let mut coords = vec![0; self.dims.len()];
        let mut rem = rank;
        for (c, &d) in coords.iter_mut().zip(&self.dims).rev() {
            *c = rem % d;
            rem /= d;
        }
        Ok(coords)
    }

    pub fn rank_of(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.dims.len() {
            return invalid(format!("coordinate rank {} does not match grid rank {}", coords.len(), self.dims.len()));
        }
        let mut rank = 0;
        for (&c, &d) in coords.iter().zip(&self.dims) {
            if c >= d {
                return invalid(format!("coords {coords:?} out of range for grid {:?}", self.dims));
            }
            rank = rank * d + c;
        }
        Ok(rank)
    }

    /// Square side length when the grid is a 2D q×q grid.
    pub fn square_side(&self) -> Option<usize> {
        match self.dims.as_slice() {
            [r, c] if r == c => Some(*r),
            _ => None,
        }
    }
}

fn balanced_factors(p: usize, ndims: usize) -> Vec<usize> {
    fn search(p: usize, slots: usize, max: usize, cur: &mut Vec<usize>, best: &mut Option<Vec<usize>>) {
        if slots == 1 {
            if p <= max {
                cur.push(p);
                let spread = cur[0] - cur[cur.len() - 1];
                let better = match best {
                    None => true,
                    Some(b) => spread < b[0] - b[b.len() - 1],
                };
                if better {
                    *best = Some(cur.clone());
                }
                cur.pop();
            }
            return;
        }
        for f in (1..=max.min(p)).rev() {
            if p.is_multiple_of(f) {
                cur.push(f);
                search(p / f, slots - 1, f, cur, best);
                cur.pop();
            }
        }
    }
    let mut best = None;
    search(p, ndims, p, &mut Vec::new(), &mut best);
    best.expect("p = p * 1 * ... * 1 is always a factorization")
}

/// One part of a grid split along a single dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subgroup {
    pub parent: ProcessGrid,
    pub dim: usize,
    pub factor: usize,
    pub index: usize,
    /// First parent coordinate along `dim` covered by this subgroup.
    pub offset: usize,
    /// Parent ranks, indexed by local rank.
    pub members: Vec<usize>,
    pub local: ProcessGrid,
}

impl Subgroup {
    pub fn local_to_parent(&self, local_rank: usize) -> usize {
        self.members[local_rank]
    }

    pub fn parent_to_local(&self, parent_rank: usize) -> Option<usize> {
        self.members.iter().position(|&m| m == parent_rank)
    }
}

/// Splits `grid` along `dim` into `factor` subgroups of contiguous coordinates.
/// When the extent does not divide evenly the lowest-indexed subgroups get one
/// extra coordinate each.
pub fn split_grid(grid: &ProcessGrid, dim: usize, factor: usize) -> Result<Vec<Subgroup>> {
    let Some(&extent) = grid.dims.get(dim) else {
        return invalid(format!("split dimension {dim} out of range"));
    };
    if factor == 0 || factor > extent {
        return invalid(format!("split factor {factor} must be in 1..={extent}"));
    }
    let base = extent / factor;
    let extra = extent % factor;
    let mut groups = Vec::with_capacity(factor);
    let mut offset = 0;
    for index in 0..factor {
        let count = base + usize::from(index < extra);
        let mut local_dims = grid.dims.clone();
        local_dims[dim] = count;
        let local = ProcessGrid::new(local_dims)?;
        let members = (0..local.size())
            .map(|lr| {
                let mut c = local.coords_of(lr).expect("in range");
                c[dim] += offset;
                grid.rank_of(&c).expect("in range")
            })
            .collect();
        groups.push(Subgroup { parent: grid.clone(), dim, factor, index, offset, members, local });
        offset += count;
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_rank(dims: &[usize], coords: &[usize]) -> usize {
        // enumerate row-major until the coords match
        let p: usize = dims.iter().product();
        let mut cur = vec![0; dims.len()];
        for r in 0..p {
            if cur == coords {
                return r;
            }
            for d in (0..dims.len()).rev() {
                cur[d] += 1;
                if cur[d] < dims[d] {
                    break;
                }
                cur[d] = 0;
            }
        }
        panic!("coords not found");
    }

    #[test]
    fn create_examples() {
        let g = ProcessGrid::new(vec![1]).unwrap();
        assert_eq!(g.size(), 1);
        assert_eq!(g.coords_of(0).unwrap(), vec![0]);
        let g = ProcessGrid::new(vec![2, 2]).unwrap();
        assert_eq!(g.size(), 4);
        assert_eq!(g.coords_of(3).unwrap(), vec![1, 1]);
        let g = ProcessGrid::new(vec![3, 4]).unwrap();
        assert_eq!(brute_rank(&[3, 4], &[2, 1]), 9);
        assert_eq!(g.rank_of(&[2, 1]).unwrap(), 9);
    }

    #[test]
    fn create_rejects_bad_dims() {
        assert!(ProcessGrid::new(vec![]).is_err());
        assert!(ProcessGrid::new(vec![2, 0]).is_err());
    }

    #[test]
    fn coords_examples() {
        let g = ProcessGrid::new(vec![2, 3]).unwrap();
        assert_eq!(g.coords_of(5).unwrap(), vec![1, 2]);
        assert_eq!(ProcessGrid::linear(4).unwrap().rank_of(&[2]).unwrap(), 2);
        let g = ProcessGrid::new(vec![2, 2, 2]).unwrap();
        let expect = (0..8).find(|&r| brute_rank(&[2, 2, 2], &[1, 1, 0]) == r).unwrap();
        assert_eq!(expect, 6);
        assert_eq!(g.coords_of(6).unwrap(), vec![1, 1, 0]);
    }

    #[test]
    fn out_of_range_errors() {
        let g = ProcessGrid::new(vec![2, 3]).unwrap();
        assert!(g.coords_of(6).is_err());
        assert!(g.rank_of(&[2, 0]).is_err());
        assert!(g.rank_of(&[0]).is_err());
    }

    #[test]
    fn balanced_factorizations() {
        assert_eq!(ProcessGrid::balanced(4, 2).unwrap().dims(), &[2, 2]);
        assert_eq!(ProcessGrid::balanced(8, 2).unwrap().dims(), &[4, 2]);
        assert_eq!(ProcessGrid::balanced(8, 3).unwrap().dims(), &[2, 2, 2]);
        assert_eq!(ProcessGrid::balanced(7, 2).unwrap().dims(), &[7, 1]);
        assert_eq!(ProcessGrid::balanced(12, 3).unwrap().dims(), &[3, 2, 2]);
    }

    #[test]
    fn split_examples() {
        let g = ProcessGrid::linear(4).unwrap();
        let s = split_grid(&g, 0, 1).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].members, vec![0, 1, 2, 3]);
        let s = split_grid(&g, 0, 2).unwrap();
        assert_eq!(s[0].members, vec![0, 1]);
        assert_eq!(s[1].members, vec![2, 3]);

        let g = ProcessGrid::new(vec![6, 2]).unwrap();
        let s = split_grid(&g, 0, 4).unwrap();
        let rows: Vec<usize> = s.iter().map(|sg| sg.local.dims()[0]).collect();
        assert_eq!(rows, vec![2, 2, 1, 1]);
        assert_eq!(s[2].members, vec![8, 9]);
        assert!(split_grid(&g, 0, 7).is_err());
        assert!(split_grid(&g, 2, 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn rank_coords_bijection(dims in proptest::collection::vec(1usize..5, 1..4)) {
            let g = ProcessGrid::new(dims).unwrap();
            for r in 0..g.size() {
                let c = g.coords_of(r).unwrap();
                proptest::prop_assert_eq!(g.rank_of(&c).unwrap(), r);
            }
        }

        #[test]
        fn split_partitions_ranks(dims in proptest::collection::vec(1usize..6, 1..4), dim_sel in 0usize..3, f_sel in 0usize..6) {
            let g = ProcessGrid::new(dims.clone()).unwrap();
            let dim = dim_sel % dims.len();
            let factor = 1 + f_sel % dims[dim];
            let groups = split_grid(&g, dim, factor).unwrap();
            proptest::prop_assert_eq!(groups.len(), factor);
            let mut all: Vec<usize> = groups.iter().flat_map(|s| s.members.clone()).collect();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (0..g.size()).collect::<Vec<_>>());
            let counts: Vec<usize> = groups.iter().map(|s| s.local.dims()[dim]).collect();
            let (mx, mn) = (*counts.iter().max().unwrap(), *counts.iter().min().unwrap());
            proptest::prop_assert!(mx - mn <= 1);
        }
    }
}
