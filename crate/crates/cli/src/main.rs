//! `blocktensor`: random fixtures, simulated multiplications and
//! contractions, and CSV reports comparing measured traffic to the model.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use blocktensor::cost::{cannon_volume, case1_volume, case2_volume, select_among};
use blocktensor::dense::relative_error;
use blocktensor::io::{MatrixFile, TensorFile};
use blocktensor::random::{random_blocks, random_matrix, random_sizes, random_tensor, GenSpec};
use blocktensor::rect::{choose_algorithm, measured_spec};
use blocktensor::{
    contract, contract_dense, multiply_with, Algorithm, Blocking, ContractionSpec, DistMatrix, MatricizationMap,
    MultiplySpec, ProcessGrid, Schedule, Source, SparseTensor,
};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use report::{MultiplyRow, SweepRow};

/// Largest extent for which `--verify` runs the dense oracle.
const VERIFY_MAX_DIM: usize = 512;
const VERIFY_TOL: f64 = 1e-12;

#[derive(Parser)]
#[command(
    name = "blocktensor",
    version,
    about = "Blocked sparse matrix and tensor algebra on a simulated process grid"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random blocked-sparse matrix (or tensor, with --dims).
    Gen(GenArgs),
    /// Multiply two matrix files on a simulated grid.
    Multiply(MultiplyArgs),
    /// Compare a rectangular algorithm against Cannon over a parameter sweep.
    Sweep(SweepArgs),
    /// Contract two tensor files on a simulated grid.
    Contract(ContractArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Rows in elements.
    #[arg(long, required_unless_present = "dims", conflicts_with = "dims")]
    rows: Option<usize>,
    /// Columns in elements.
    #[arg(long, required_unless_present = "dims", conflicts_with = "dims")]
    cols: Option<usize>,
    /// Tensor extents in elements, comma separated (writes a tensor file).
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    block_min: usize,
    #[arg(long, default_value_t = 9)]
    block_max: usize,
    /// Probability that a block is present.
    #[arg(long, value_parser = parse_occupancy)]
    occupancy: f64,
    #[arg(long, env = "BLOCKTENSOR_SEED", default_value_t = 0)]
    seed: u64,
    /// Output file; a `.bin` extension selects the binary format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AlgoArg {
    Cannon,
    Case1,
    Case2,
    Auto,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    #[default]
    Parallel,
    Sequential,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Parallel => Schedule::Parallel,
            ScheduleArg::Sequential => Schedule::Sequential,
        }
    }
}

/// `RxC` for an explicit 2D grid, or a rank count `P`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GridArg {
    Dims(usize, usize),
    Count(usize),
}

impl FromStr for GridArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| match t.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("'{s}' is not a grid: expected P or RxC with positive integers")),
        };
        match s.split_once(['x', 'X']) {
            Some((r, c)) => Ok(GridArg::Dims(num(r)?, num(c)?)),
            None => Ok(GridArg::Count(num(s)?)),
        }
    }
}

impl GridArg {
    fn size(self) -> usize {
        match self {
            GridArg::Dims(r, c) => r * c,
            GridArg::Count(p) => p,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Worker scheduling of the simulated ranks.
    #[arg(long, value_enum, default_value_t = ScheduleArg::Parallel)]
    schedule: ScheduleArg,
    /// Check the result against a dense reference (extents up to 512).
    #[arg(long)]
    verify: bool,
    /// CSV report file; standard output when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct MultiplyArgs {
    #[arg(long, value_enum, default_value_t = AlgoArg::Auto)]
    algo: AlgoArg,
    /// Process grid: `QxQ`, `RxC` or a rank count `P`.
    #[arg(long, default_value = "1")]
    grid: GridArg,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Result matrix file.
    #[arg(long)]
    c_out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

/// `MxNxK` problem size in elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Size {
    m: usize,
    n: usize,
    k: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let dims: Vec<usize> = parts.iter().filter_map(|t| t.trim().parse().ok()).filter(|&v| v > 0).collect();
        match dims[..] {
            [m, n, k] if parts.len() == 3 => Ok(Size { m, n, k }),
            _ => Err(format!("'{s}' is not a size: expected MxNxK with positive integers")),
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    /// 1: K much larger than M and N; 2: M much larger than N and K.
    #[arg(long, value_enum)]
    case: CaseArg,
    /// Target occupancies of A and B.
    #[arg(long, value_delimiter = ',', value_parser = parse_occupancy, default_value = "0.1,0.25,0.5,1")]
    occupancies: Vec<f64>,
    /// Rank counts; each must be a perfect square.
    #[arg(long, value_delimiter = ',', default_value = "4,16")]
    grids: Vec<usize>,
    /// Problem sizes `MxNxK`; defaults to 16x16x256 (case 1) or 256x16x16 (case 2).
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<Size>,
    #[arg(long, default_value_t = 2)]
    block_min: usize,
    #[arg(long, default_value_t = 2)]
    block_max: usize,
    #[arg(long, env = "BLOCKTENSOR_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Parallel)]
    schedule: ScheduleArg,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ContractArgs {
    /// JSON contraction spec.
    #[arg(long)]
    spec: PathBuf,
    /// Rank count `P`; the tensor grid is as square as possible.
    #[arg(long, default_value = "1")]
    grid: GridArg,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Result tensor file.
    #[arg(long)]
    c_out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_occupancy(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        Ok(v) => Err(format!("occupancy {v} is outside [0, 1]")),
        Err(_) => Err(format!("'{s}' is not a number")),
    }
}

fn usage(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, msg).exit()
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Gen(args) => gen(args),
        Command::Multiply(args) => multiply(args),
        Command::Sweep(args) => sweep(args),
        Command::Contract(args) => contract_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn gen(args: GenArgs) -> Result<()> {
    if args.block_min == 0 || args.block_min > args.block_max {
        usage(format!("block size range [{}, {}] must satisfy 1 <= min <= max", args.block_min, args.block_max));
    }
    let spec =
        GenSpec { block_min: args.block_min, block_max: args.block_max, occupancy: args.occupancy, seed: args.seed };
    match args.dims {
        Some(dims) => {
            if dims.is_empty() || dims.len() > blocktensor::tensor::MAX_RANK {
                usage(format!("--dims needs 1 to {} extents", blocktensor::tensor::MAX_RANK));
            }
            random_tensor(&dims, spec)?.write(&args.out)
        }
        None => random_matrix(args.rows.unwrap_or(0), args.cols.unwrap_or(0), spec)?.write(&args.out),
    }
    .with_context(|| format!("writing {}", args.out.display()))
}

fn read_matrix(path: &Path) -> Result<MatrixFile> {
    MatrixFile::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_tensor(path: &Path) -> Result<TensorFile> {
    TensorFile::read(path).with_context(|| format!("reading {}", path.display()))
}

/// 2D grid for `algo`; Cannon needs a square one.
fn matrix_grid(grid: GridArg, algo: AlgoArg) -> Result<ProcessGrid> {
    if algo == AlgoArg::Cannon {
        let square = match grid {
            GridArg::Dims(r, c) => r == c,
            GridArg::Count(p) => isqrt(p).pow(2) == p,
        };
        if !square {
            let q = isqrt(grid.size());
            usage(format!(
                "cannon needs a square grid, but P = {} is not square; the largest square that fits is {q}x{q} (P = {})",
                grid.size(),
                q * q
            ));
        }
    }
    Ok(match grid {
        GridArg::Dims(r, c) => ProcessGrid::new(vec![r, c])?,
        GridArg::Count(p) => ProcessGrid::balanced(p, 2)?,
    })
}

fn isqrt(p: usize) -> usize {
    let mut q = (p as f64).sqrt() as usize;
    while q * q > p {
        q -= 1;
    }
    while (q + 1) * (q + 1) <= p {
        q += 1;
    }
    q
}

fn check_verify_dims(dims: &[usize]) {
    if let Some(d) = dims.iter().find(|&&d| d > VERIFY_MAX_DIM) {
        usage(format!("--verify supports extents up to {VERIFY_MAX_DIM}, got {d}"));
    }
}

fn empty_product(a: &DistMatrix, b: &DistMatrix, grid: &ProcessGrid) -> Result<DistMatrix> {
    Ok(DistMatrix::round_robin(a.rows().blocking(), b.cols().blocking(), grid.clone())?)
}

fn multiply(args: MultiplyArgs) -> Result<()> {
    blocktensor::comm::set_default_schedule(args.run.schedule.into());
    let grid = matrix_grid(args.grid, args.algo)?;
    let a = read_matrix(&args.a)?.to_dist(grid.clone())?;
    let b = read_matrix(&args.b)?.to_dist(grid.clone())?;
    if args.run.verify {
        check_verify_dims(&[a.nrows(), a.ncols(), b.ncols()]);
    }
    let mut c = empty_product(&a, &b, &grid)?;
    let algo = match args.algo {
        AlgoArg::Cannon => Algorithm::Cannon,
        AlgoArg::Case1 => Algorithm::Case1,
        AlgoArg::Case2 => Algorithm::Case2,
        AlgoArg::Auto => choose_algorithm(&a, &b, &c),
    };
    let ledger = multiply_with(algo, &a, &b, &mut c)?;
    if args.run.verify {
        let expect = a.to_dense().matmul(&b.to_dense())?;
        let err = relative_error(&c.to_dense(), &expect);
        if err.is_nan() || err > VERIFY_TOL {
            bail!("verification failed: relative error {err:e} exceeds {VERIFY_TOL:e}");
        }
        eprintln!("verify: ok (relative error {err:e})");
    }
    if let Some(path) = &args.c_out {
        MatrixFile::from_dist(&c).write(path).with_context(|| format!("writing {}", path.display()))?;
    }
    let spec = measured_spec(&a, &b, &c);
    let row = MultiplyRow::new(algo.name(), &spec, algo.predicted_volume(&spec), &ledger);
    report::write(args.run.report.as_deref(), MultiplyRow::HEADER, &[row])
}

fn sweep(args: SweepArgs) -> Result<()> {
    blocktensor::comm::set_default_schedule(args.schedule.into());
    if args.block_min == 0 || args.block_min > args.block_max {
        usage(format!("block size range [{}, {}] must satisfy 1 <= min <= max", args.block_min, args.block_max));
    }
    if let Some(p) = args.grids.iter().find(|&&p| p == 0 || isqrt(p).pow(2) != p) {
        let q = isqrt(*p);
        usage(format!(
            "grid P = {p} is not a positive square; the largest square that fits is {q}x{q} (P = {})",
            q * q
        ));
    }
    let (rect, case) = match args.case {
        CaseArg::One => (Algorithm::Case1, 1),
        CaseArg::Two => (Algorithm::Case2, 2),
    };
    let sizes = if args.sizes.is_empty() {
        vec![match args.case {
            CaseArg::One => Size { m: 16, n: 16, k: 256 },
            CaseArg::Two => Size { m: 256, n: 16, k: 16 },
        }]
    } else {
        args.sizes.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut rows = Vec::new();
    for size in &sizes {
        let m_sizes = random_sizes(size.m, args.block_min, args.block_max, &mut rng)?;
        let n_sizes = random_sizes(size.n, args.block_min, args.block_max, &mut rng)?;
        let k_sizes = random_sizes(size.k, args.block_min, args.block_max, &mut rng)?;
        for &p in &args.grids {
            let q = isqrt(p);
            let grid = ProcessGrid::new(vec![q, q])?;
            for &occ in &args.occupancies {
                let a = random_blocks(&m_sizes, &k_sizes, occ, rng.random())?.to_dist(grid.clone())?;
                let b = random_blocks(&k_sizes, &n_sizes, occ, rng.random())?.to_dist(grid.clone())?;
                let mut c_cannon = empty_product(&a, &b, &grid)?;
                let cannon = multiply_with(Algorithm::Cannon, &a, &b, &mut c_cannon)?;
                let mut c_rect = empty_product(&a, &b, &grid)?;
                let measured = multiply_with(rect, &a, &b, &mut c_rect)?;
                let spec = measured_spec(&a, &b, &c_rect);
                let rect_predicted = match rect {
                    Algorithm::Case1 => case1_volume(&spec),
                    _ => case2_volume(&spec),
                };
                rows.push(SweepRow::new(case, &spec, cannon_volume(&spec), &cannon, rect_predicted, &measured));
            }
        }
    }
    report::write(args.report.as_deref(), SweepRow::HEADER, &rows)
}

/// JSON form of a contraction. Output sources are written `a<d>` / `b<d>`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    a_contracted: Vec<usize>,
    b_contracted: Vec<usize>,
    output: Vec<String>,
    #[serde(default)]
    maps: Option<MapsFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MapsFile {
    a: MapFile,
    b: MapFile,
    c: MapFile,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl From<MapFile> for MatricizationMap {
    fn from(m: MapFile) -> Self {
        MatricizationMap::new(m.rows, m.cols)
    }
}

fn parse_source(s: &str) -> Result<Source> {
    let (tag, d) = s.split_at(s.len().min(1));
    let d: usize = d.parse().with_context(|| format!("bad output source '{s}'"))?;
    match tag {
        "a" | "A" => Ok(Source::A(d)),
        "b" | "B" => Ok(Source::B(d)),
        _ => bail!("bad output source '{s}': expected a<d> or b<d>"),
    }
}

fn contract_cmd(args: ContractArgs) -> Result<()> {
    blocktensor::comm::set_default_schedule(args.run.schedule.into());
    let text = std::fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let file: SpecFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.spec.display()))?;
    let spec = ContractionSpec {
        a_contracted: file.a_contracted,
        b_contracted: file.b_contracted,
        output: file.output.iter().map(|s| parse_source(s)).collect::<Result<_>>()?,
    };
    let (am, bm, cm) = match file.maps {
        Some(m) => (m.a.into(), m.b.into(), m.c.into()),
        None => spec.aligned_maps(),
    };
    let af = read_tensor(&args.a)?;
    let bf = read_tensor(&args.b)?;
    let p = args.grid.size();
    let mut c_blockings = Vec::new();
    for src in &spec.output {
        let sizes = match *src {
            Source::A(d) => af.sizes.get(d),
            Source::B(d) => bf.sizes.get(d),
        }
        .with_context(|| format!("output source {src:?} is out of range"))?;
        c_blockings.push(Blocking::new(sizes.clone())?);
    }
    let a = fill(SparseTensor::balanced(af.blockings()?, p, am)?, &af)?;
    let b = fill(SparseTensor::balanced(bf.blockings()?, p, bm)?, &bf)?;
    let mut c = SparseTensor::balanced(c_blockings, p, cm)?;
    if args.run.verify {
        check_verify_dims(&[a.shape(), b.shape()].concat());
    }
    let ledger = contract(&a, &b, &spec, &mut c)?;
    if args.run.verify {
        let expect = contract_dense(&a.to_dense(), &b.to_dense(), &spec)?;
        let err = c.to_dense().relative_error(&expect);
        if err.is_nan() || err > VERIFY_TOL {
            bail!("verification failed: relative error {err:e} exceeds {VERIFY_TOL:e}");
        }
        eprintln!("verify: ok (relative error {err:e})");
    }
    if let Some(path) = &args.c_out {
        TensorFile::from_tensor(&c).write(path).with_context(|| format!("writing {}", path.display()))?;
    }
    let (a_shape, b_shape) = (a.shape(), b.shape());
    let extent = |src: Source| match src {
        Source::A(d) => a_shape[d],
        Source::B(d) => b_shape[d],
    };
    let m: usize = spec.output.iter().filter(|s| matches!(s, Source::A(_))).map(|&s| extent(s)).product();
    let n: usize = spec.output.iter().filter(|s| matches!(s, Source::B(_))).map(|&s| extent(s)).product();
    let k: usize = spec.a_contracted.iter().map(|&d| a_shape[d]).product();
    let model = MultiplySpec::from_sizes(m, n, k, a.stored_elements(), b.stored_elements(), c.stored_elements(), p);
    let candidates: &[Algorithm] =
        if isqrt(p).pow(2) == p { &Algorithm::ALL } else { &[Algorithm::Case1, Algorithm::Case2] };
    let best = select_among(&model, candidates);
    let row = MultiplyRow::new("contract", &model, best.predicted_volume(&model), &ledger);
    report::write(args.run.report.as_deref(), MultiplyRow::HEADER, &[row])
}

fn fill(mut t: SparseTensor, f: &TensorFile) -> Result<SparseTensor> {
    for (x, blk) in &f.blocks {
        t.put_block(x, blk.clone())?;
    }
    Ok(t)
}
