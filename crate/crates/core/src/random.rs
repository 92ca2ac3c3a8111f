//! Seeded random fixtures: blockings with random sizes, blocks present with
//! a given probability, standard-normal values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::blocks::DenseBlock;
use crate::error::{invalid, Result};
use crate::io::{MatrixFile, TensorFile};
use crate::tensor::TensorBlock;

/// Block sizes drawn uniformly from `[min, max]` until `total` is covered;
/// the last block is cut short to fit.
pub fn random_sizes(total: usize, min: usize, max: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if min == 0 || min > max {
        return invalid(format!("block size range [{min}, {max}] is empty or contains 0"));
    }
    let mut sizes = Vec::new();
    let mut left = total;
    while left > 0 {
        let s = rng.random_range(min..=max).min(left);
        sizes.push(s);
        left -= s;
    }
    Ok(sizes)
}

fn check_occupancy(occupancy: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&occupancy) {
        return invalid(format!("occupancy {occupancy} outside [0, 1]"));
    }
    Ok(())
}

/// Fixture generator parameters.
#[derive(Clone, Copy, Debug)]
pub struct GenSpec {
    pub block_min: usize,
    pub block_max: usize,
    pub occupancy: f64,
    pub seed: u64,
}

pub fn random_matrix(rows: usize, cols: usize, spec: GenSpec) -> Result<MatrixFile> {
    check_occupancy(spec.occupancy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let row_sizes = random_sizes(rows, spec.block_min, spec.block_max, &mut rng)?;
    let col_sizes = random_sizes(cols, spec.block_min, spec.block_max, &mut rng)?;
    let mut blocks = Vec::new();
    for (i, &m) in row_sizes.iter().enumerate() {
        for (j, &n) in col_sizes.iter().enumerate() {
            if spec.occupancy > 0.0 && rng.random::<f64>() < spec.occupancy {
                let data = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();
                blocks.push((i, j, DenseBlock::new(m, n, data)?));
            }
        }
    }
    Ok(MatrixFile { row_sizes, col_sizes, blocks })
}

/// Like [`random_matrix`] with given blockings.
pub fn random_blocks(row_sizes: &[usize], col_sizes: &[usize], occupancy: f64, seed: u64) -> Result<MatrixFile> {
    check_occupancy(occupancy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    for (i, &m) in row_sizes.iter().enumerate() {
        for (j, &n) in col_sizes.iter().enumerate() {
            if occupancy > 0.0 && rng.random::<f64>() < occupancy {
                let data = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();
                blocks.push((i, j, DenseBlock::new(m, n, data)?));
            }
        }
    }
    Ok(MatrixFile { row_sizes: row_sizes.to_vec(), col_sizes: col_sizes.to_vec(), blocks })
}

/// Random tensor with element extents `dims`.
pub fn random_tensor(dims: &[usize], spec: GenSpec) -> Result<TensorFile> {
    check_occupancy(spec.occupancy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sizes: Vec<Vec<usize>> =
        dims.iter().map(|&d| random_sizes(d, spec.block_min, spec.block_max, &mut rng)).collect::<Result<_>>()?;
    let counts: Vec<usize> = sizes.iter().map(Vec::len).collect();
    let mut blocks = Vec::new();
    let mut x = vec![0; dims.len()];
    for _ in 0..counts.iter().product::<usize>() {
        if spec.occupancy > 0.0 && rng.random::<f64>() < spec.occupancy {
            let shape: Vec<usize> = x.iter().enumerate().map(|(d, &i)| sizes[d][i]).collect();
            let data = (0..shape.iter().product()).map(|_| rng.sample(StandardNormal)).collect();
            blocks.push((x.clone(), TensorBlock::new(shape, data)?));
        }
        for d in (0..x.len()).rev() {
            x[d] += 1;
            if x[d] < counts[d] {
                break;
            }
            x[d] = 0;
        }
    }
    Ok(TensorFile { sizes, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(occupancy: f64, seed: u64) -> GenSpec {
        GenSpec { block_min: 1, block_max: 5, occupancy, seed }
    }

    #[test]
    fn sizes_cover_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for total in [0, 1, 7, 100] {
            let s = random_sizes(total, 2, 4, &mut rng).unwrap();
            assert_eq!(s.iter().sum::<usize>(), total);
            assert!(s.iter().all(|&x| (1..=4).contains(&x)));
        }
        assert!(random_sizes(5, 0, 3, &mut rng).is_err());
        assert!(random_sizes(5, 4, 3, &mut rng).is_err());
    }

    #[test]
    fn occupancy_extremes_and_determinism() {
        assert!(random_matrix(20, 20, spec(0.0, 3)).unwrap().blocks.is_empty());
        let full = random_matrix(20, 20, spec(1.0, 3)).unwrap();
        assert_eq!(full.blocks.len(), full.row_sizes.len() * full.col_sizes.len());
        assert_eq!(random_matrix(20, 20, spec(0.3, 42)).unwrap(), random_matrix(20, 20, spec(0.3, 42)).unwrap());
        assert_ne!(random_matrix(20, 20, spec(0.3, 42)).unwrap(), random_matrix(20, 20, spec(0.3, 43)).unwrap());
        assert!(random_matrix(4, 4, spec(1.5, 1)).is_err());
        assert!(random_matrix(4, 4, spec(-0.1, 1)).is_err());
    }

    #[test]
    fn values_look_standard_normal() {
        let m = random_matrix(200, 200, spec(1.0, 9)).unwrap();
        let v: Vec<f64> = m.blocks.iter().flat_map(|(_, _, b)| b.data().to_vec()).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "{mean} {var}");
    }
}
