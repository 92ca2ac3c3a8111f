//! CSV reports: one header line, fixed column order, `.` decimal separator.
//! Floats use Rust's shortest round-tripping form, which is locale free.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use blocktensor::{Ledger, MultiplySpec};

pub trait Row {
    fn fields(&self) -> Vec<String>;
}

fn ratio(measured: f64, predicted: f64) -> f64 {
    if predicted == 0.0 {
        if measured == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        measured / predicted
    }
}

fn spec_fields(spec: &MultiplySpec) -> Vec<String> {
    [spec.m, spec.n, spec.k, spec.o_a, spec.o_b, spec.o_c, spec.p].iter().map(|v| v.to_string()).collect()
}

/// One multiplication or contraction. `ratio` is measured mean over predicted.
pub struct MultiplyRow {
    algo: String,
    spec: MultiplySpec,
    predicted: f64,
    mean: f64,
    max: u64,
}

impl MultiplyRow {
    pub const HEADER: &'static str =
        "algo,M,N,K,O_A,O_B,O_C,P,predicted_volume,measured_mean_volume,measured_max_volume,ratio";

    pub fn new(algo: &str, spec: &MultiplySpec, predicted: f64, ledger: &Ledger) -> Self {
        Self { algo: algo.to_owned(), spec: *spec, predicted, mean: ledger.mean_volume(), max: ledger.max_volume() }
    }
}

impl Row for MultiplyRow {
    fn fields(&self) -> Vec<String> {
        let mut f = vec![self.algo.clone()];
        f.extend(spec_fields(&self.spec));
        f.extend([
            self.predicted.to_string(),
            self.mean.to_string(),
            self.max.to_string(),
            ratio(self.mean, self.predicted).to_string(),
        ]);
        f
    }
}

/// One sweep point: Cannon against a rectangular algorithm on the same operands.
pub struct SweepRow {
    case: u8,
    spec: MultiplySpec,
    cannon_predicted: f64,
    cannon_measured: f64,
    rect_predicted: f64,
    rect_measured: f64,
}

impl SweepRow {
    pub const HEADER: &'static str = "case,M,N,K,O_A,O_B,O_C,P,cannon_predicted,cannon_measured,rect_predicted,rect_measured,predicted_ratio,measured_ratio";

    pub fn new(
        case: u8,
        spec: &MultiplySpec,
        cannon_predicted: f64,
        cannon: &Ledger,
        rect_predicted: f64,
        rect: &Ledger,
    ) -> Self {
        Self {
            case,
            spec: *spec,
            cannon_predicted,
            cannon_measured: cannon.mean_volume(),
            rect_predicted,
            rect_measured: rect.mean_volume(),
        }
    }
}

impl Row for SweepRow {
    fn fields(&self) -> Vec<String> {
        let mut f = vec![self.case.to_string()];
        f.extend(spec_fields(&self.spec));
        f.extend([
            self.cannon_predicted.to_string(),
            self.cannon_measured.to_string(),
            self.rect_predicted.to_string(),
            self.rect_measured.to_string(),
            ratio(self.rect_predicted, self.cannon_predicted).to_string(),
            ratio(self.rect_measured, self.cannon_measured).to_string(),
        ]);
        f
    }
}

pub fn render(header: &str, rows: &[impl Row]) -> String {
    let mut out = String::new();
    writeln!(out, "{header}").unwrap();
    for r in rows {
        writeln!(out, "{}", r.fields().join(",")).unwrap();
    }
    out
}

/// Writes the table to `path`, or to standard output.
pub fn write(path: Option<&Path>, header: &str, rows: &[impl Row]) -> Result<()> {
    let text = render(header, rows);
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).context("writing report"),
    }
}
