//! Matrix and tensor fixture files.
//!
//! Text matrix: a header `rows cols nblkrows nblkcols`, one line of row
//! block sizes, one line of column block sizes, then one line per block:
//! `i j` followed by its values in row-major order.
//!
//! Text tensor: a header `n d1 .. dn` (rank and element extents), a line of
//! block counts, one line of block sizes per dimension, then one line per
//! block: `x1 .. xn` followed by its values, row-major over the dimensions.
//!
//! The binary variants carry the same fields in the same order as
//! little-endian `u64` integers and `f64` values, and end at end-of-file.
//! Files whose name ends in `.bin` are binary.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::blocks::{Blocking, DenseBlock};
use crate::error::{Error, Result};
use crate::grid::ProcessGrid;
use crate::matrix::DistMatrix;
use crate::tensor::{MatricizationMap, SparseTensor, TensorBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Binary,
}

impl Format {
    pub fn for_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => Format::Binary,
            _ => Format::Text,
        }
    }
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

/// A matrix as stored in a file: blockings plus blocks sorted by `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixFile {
    pub row_sizes: Vec<usize>,
    pub col_sizes: Vec<usize>,
    pub blocks: Vec<(usize, usize, DenseBlock)>,
}

impl MatrixFile {
    pub fn from_dist(m: &DistMatrix) -> Self {
        let mut blocks: Vec<_> = m.iter_blocks().map(|(i, j, b)| (i, j, b.clone())).collect();
        blocks.sort_by_key(|(i, j, _)| (*i, *j));
        Self {
            row_sizes: m.rows().blocking().sizes().to_vec(),
            col_sizes: m.cols().blocking().sizes().to_vec(),
            blocks,
        }
    }

    pub fn rows(&self) -> usize {
        self.row_sizes.iter().sum()
    }

    pub fn cols(&self) -> usize {
        self.col_sizes.iter().sum()
    }

    /// Round-robin distributed matrix on `grid`.
    pub fn to_dist(&self, grid: ProcessGrid) -> Result<DistMatrix> {
        let mut m = DistMatrix::round_robin(
            Blocking::new(self.row_sizes.clone())?,
            Blocking::new(self.col_sizes.clone())?,
            grid,
        )?;
        for (i, j, b) in &self.blocks {
            m.set_block(*i, *j, b.clone())?;
        }
        Ok(m)
    }

    pub fn write_to(&self, w: &mut impl Write, format: Format) -> Result<()> {
        let header = [self.rows(), self.cols(), self.row_sizes.len(), self.col_sizes.len()];
        match format {
            Format::Text => {
                writeln!(w, "{}", join(header.iter()))?;
                writeln!(w, "{}", join(self.row_sizes.iter()))?;
                writeln!(w, "{}", join(self.col_sizes.iter()))?;
                for (i, j, b) in &self.blocks {
                    writeln!(w, "{i} {j} {}", join_f(b.data()))?;
                }
            }
            Format::Binary => {
                for v in header.iter().chain(&self.row_sizes).chain(&self.col_sizes) {
                    put_u64(w, *v)?;
                }
                for (i, j, b) in &self.blocks {
                    put_u64(w, *i)?;
                    put_u64(w, *j)?;
                    for v in b.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, format: Format) -> Result<Self> {
        let mut src: Box<dyn Source + '_> = match format {
            Format::Text => Box::new(TextSource::new(r)),
            Format::Binary => Box::new(BinSource(r)),
        };
        let header = src.ints(4)?.ok_or_else(|| parse_err("missing header"))?;
        let (rows, cols, nbr, nbc) = (header[0], header[1], header[2], header[3]);
        let row_sizes = src.ints(nbr)?.ok_or_else(|| parse_err("missing row block sizes"))?;
        let col_sizes = src.ints(nbc)?.ok_or_else(|| parse_err("missing column block sizes"))?;
        if row_sizes.iter().sum::<usize>() != rows || col_sizes.iter().sum::<usize>() != cols {
            return Err(parse_err("block sizes do not add up to the header dimensions"));
        }
        let mut blocks = Vec::new();
        while let Some(ij) = src.ints(2)? {
            let (i, j) = (ij[0], ij[1]);
            if i >= nbr || j >= nbc {
                return Err(parse_err(format!("block ({i}, {j}) out of range")));
            }
            let (m, n) = (row_sizes[i], col_sizes[j]);
            let data = src.floats(m * n)?;
            blocks.push((i, j, DenseBlock::new(m, n, data)?));
        }
        Ok(Self { row_sizes, col_sizes, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f, Format::for_path(path))?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f, Format::for_path(path))
    }
}

/// A tensor as stored in a file.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub sizes: Vec<Vec<usize>>,
    pub blocks: Vec<(Vec<usize>, TensorBlock)>,
}

impl TensorFile {
    pub fn from_tensor(t: &SparseTensor) -> Self {
        let mut blocks: Vec<_> = t.iter_blocks().collect();
        blocks.sort_by(|a, b| a.0.cmp(&b.0));
        Self { sizes: t.blockings().iter().map(|b| b.sizes().to_vec()).collect(), blocks }
    }

    pub fn blockings(&self) -> Result<Vec<Blocking>> {
        self.sizes.iter().map(|s| Blocking::new(s.clone())).collect()
    }

    pub fn to_tensor(&self, grid: ProcessGrid, map: MatricizationMap) -> Result<SparseTensor> {
        let mut t = SparseTensor::new(self.blockings()?, grid, map)?;
        for (x, b) in &self.blocks {
            t.put_block(x, b.clone())?;
        }
        Ok(t)
    }

    pub fn write_to(&self, w: &mut impl Write, format: Format) -> Result<()> {
        let n = self.sizes.len();
        let mut header = vec![n];
        header.extend(self.sizes.iter().map(|s| s.iter().sum::<usize>()));
        let counts: Vec<usize> = self.sizes.iter().map(Vec::len).collect();
        match format {
            Format::Text => {
                writeln!(w, "{}", join(header.iter()))?;
                writeln!(w, "{}", join(counts.iter()))?;
                for s in &self.sizes {
                    writeln!(w, "{}", join(s.iter()))?;
                }
                for (x, b) in &self.blocks {
                    writeln!(w, "{} {}", join(x.iter()), join_f(&b.data))?;
                }
            }
            Format::Binary => {
                for v in header.iter().chain(&counts).chain(self.sizes.iter().flatten()) {
                    put_u64(w, *v)?;
                }
                for (x, b) in &self.blocks {
                    for v in x {
                        put_u64(w, *v)?;
                    }
                    for v in &b.data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, format: Format) -> Result<Self> {
        let mut src: Box<dyn Source + '_> = match format {
            Format::Text => Box::new(TextSource::new(r)),
            Format::Binary => Box::new(BinSource(r)),
        };
        let n = src.ints(1)?.ok_or_else(|| parse_err("missing header"))?[0];
        if n == 0 {
            return Err(parse_err("tensor rank must be positive"));
        }
        let dims = src.ints(n)?.ok_or_else(|| parse_err("missing extents"))?;
        let counts = src.ints(n)?.ok_or_else(|| parse_err("missing block counts"))?;
        let mut sizes = Vec::with_capacity(n);
        for d in 0..n {
            let s = src.ints(counts[d])?.ok_or_else(|| parse_err(format!("missing sizes of dimension {d}")))?;
            if s.iter().sum::<usize>() != dims[d] {
                return Err(parse_err(format!("block sizes of dimension {d} do not add up to {}", dims[d])));
            }
            sizes.push(s);
        }
        let mut blocks = Vec::new();
        while let Some(x) = src.ints(n)? {
            if x.iter().zip(&counts).any(|(a, c)| a >= c) {
                return Err(parse_err(format!("block {x:?} out of range")));
            }
            let shape: Vec<usize> = x.iter().enumerate().map(|(d, &i)| sizes[d][i]).collect();
            let data = src.floats(shape.iter().product())?;
            blocks.push((x, TensorBlock::new(shape, data)?));
        }
        Ok(Self { sizes, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f, Format::for_path(path))?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f, Format::for_path(path))
    }
}

fn join<T: std::fmt::Display>(it: impl Iterator<Item = T>) -> String {
    it.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Shortest round-tripping form, with exponents for extreme magnitudes.
fn join_f(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn put_u64(w: &mut impl Write, v: usize) -> Result<()> {
    w.write_all(&(v as u64).to_le_bytes())?;
    Ok(())
}

/// Token stream shared by the text and binary readers. `ints` returns
/// `None` only on a clean end of input.
trait Source {
    fn ints(&mut self, n: usize) -> Result<Option<Vec<usize>>>;
    fn floats(&mut self, n: usize) -> Result<Vec<f64>>;
}

struct TextSource<R> {
    reader: BufReader<R>,
    tokens: std::collections::VecDeque<String>,
}

impl<R: Read> TextSource<R> {
    fn new(r: R) -> Self {
        Self { reader: BufReader::new(r), tokens: Default::default() }
    }

    fn token(&mut self) -> Result<Option<String>> {
        while self.tokens.is_empty() {
            let mut line = String::new();
            if self.reader.read_line(&mut line)? == 0 {
                return Ok(None);
            }
            self.tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        Ok(self.tokens.pop_front())
    }
}

impl<R: Read> Source for TextSource<R> {
    fn ints(&mut self, n: usize) -> Result<Option<Vec<usize>>> {
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            match self.token()? {
                Some(t) => out.push(t.parse().map_err(|_| parse_err(format!("expected an integer, got {t:?}")))?),
                None if k == 0 => return Ok(None),
                None => return Err(parse_err("unexpected end of file")),
            }
        }
        Ok(Some(out))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| {
                let t = self.token()?.ok_or_else(|| parse_err("unexpected end of file"))?;
                t.parse().map_err(|_| parse_err(format!("expected a number, got {t:?}")))
            })
            .collect()
    }
}

struct BinSource<R>(R);

impl<R: Read> BinSource<R> {
    /// Reads 8 bytes; `None` on a clean end of input.
    fn word(&mut self) -> Result<Option<[u8; 8]>> {
        let mut buf = [0u8; 8];
        let mut got = 0;
        while got < 8 {
            let k = self.0.read(&mut buf[got..])?;
            if k == 0 {
                return if got == 0 { Ok(None) } else { Err(parse_err("truncated binary file")) };
            }
            got += k;
        }
        Ok(Some(buf))
    }
}

impl<R: Read> Source for BinSource<R> {
    fn ints(&mut self, n: usize) -> Result<Option<Vec<usize>>> {
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            match self.word()? {
                Some(b) => out.push(u64::from_le_bytes(b) as usize),
                None if k == 0 => return Ok(None),
                None => return Err(parse_err("truncated binary file")),
            }
        }
        Ok(Some(out))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| {
                let b = self.word()?.ok_or_else(|| parse_err("truncated binary file"))?;
                Ok(f64::from_le_bytes(b))
            })
            .collect()
    }
}
