//! Wall-clock sweeps of both designs and their CSV records.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::{flop_model, CostDims, CostModel, Design};
use crate::error::{Error, Result};
use crate::instance::{normal_vec, substream};
use crate::moe::{mixed_forward_fused, separated_forward_fused, ExpertParams};
use crate::router::{route, RouterParams};
use crate::tensor::Matrix;
use crate::types::{SequenceBatch, Transition, TransitionKind};

/// Cells whose working set would exceed this many bytes are refused.
pub const MAX_CELL_BYTES: u128 = 8 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub t: Vec<usize>,
    pub n: Vec<usize>,
    pub p: Vec<usize>,
    pub e: Vec<usize>,
    pub k: Vec<usize>,
    pub designs: Vec<Design>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub transition: TransitionKind,
    pub parallel: bool,
}

impl SweepConfig {
    /// One cell, both designs, diagonal transition, single-threaded.
    pub fn single(t: usize, n: usize, p: usize, e: usize, k: usize) -> Self {
        Self {
            t: vec![t],
            n: vec![n],
            p: vec![p],
            e: vec![e],
            k: vec![k],
            designs: vec![Design::Mixed, Design::Separated],
            repeats: 3,
            warmup: 1,
            seed: 0,
            transition: TransitionKind::Diagonal,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [
            ("T", &self.t),
            ("N", &self.n),
            ("P", &self.p),
            ("E", &self.e),
            ("k", &self.k),
        ] {
            if axis.is_empty() {
                return Err(Error::InvalidInput(format!("axis {name} is empty")));
            }
            if axis.contains(&0) {
                return Err(Error::InvalidInput(format!("axis {name} contains 0")));
            }
        }
        if self.designs.is_empty() {
            return Err(Error::InvalidInput("no designs selected".into()));
        }
        if self.repeats < 3 {
            return Err(Error::InvalidInput(format!(
                "repeats must be at least 3, got {}",
                self.repeats
            )));
        }
        if self.warmup < 1 {
            return Err(Error::InvalidInput("warmup must be at least 1".into()));
        }
        let kmax = self.k.iter().max().copied().unwrap_or(0);
        let emin = self.e.iter().min().copied().unwrap_or(0);
        if kmax > emin {
            return Err(Error::InvalidInput(format!("k = {kmax} exceeds E = {emin}")));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<[usize; 5]> {
        let mut out = Vec::new();
        for &t in &self.t {
            for &n in &self.n {
                for &p in &self.p {
                    for &e in &self.e {
                        for &k in &self.k {
                            out.push([t, n, p, e, k]);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Serial,
    Parallel,
}

/// One CSV row per (cell, design).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub design: Design,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "E")]
    pub e: usize,
    pub k: usize,
    pub transition: String,
    pub mode: Mode,
    pub flops_recurrence: u64,
    pub flops_total: u64,
    pub wall_ns_median: u64,
    pub wall_ns_iqr: u64,
    /// Sum of the outputs; equal across repeats of a cell.
    pub checksum: f64,
}

/// Fixed inputs of one cell, shared by both designs.
struct Cell {
    x: SequenceBatch,
    params: ExpertParams,
    router: RouterParams,
    transition: Transition,
    k: usize,
}

fn working_set_bytes(t: usize, n: usize, p: usize, e: usize) -> u128 {
    let (t, n, p, e) = (t as u128, n as u128, p as u128, e as u128);
    8 * (t * p * (2 + e) + e * (2 * n * p + p * p) + (e + 3) * n * p)
}

fn build_cell(seed: u64, [t, n, p, e, k]: [usize; 5], kind: TransitionKind) -> Result<Cell> {
    let bytes = working_set_bytes(t, n, p, e);
    if bytes > MAX_CELL_BYTES {
        return Err(Error::Size(format!(
            "cell T={t} N={n} P={p} E={e} k={k} needs about {bytes} bytes"
        )));
    }
    let mut rng = substream(seed, 0xB0);
    let x = SequenceBatch::from_vec(t, p, normal_vec(&mut rng, t * p, 1.0))?;
    let params = ExpertParams::random(seed, n, p, e, 1.0)?;
    let mut rng = substream(seed, 0xB1);
    let router = RouterParams::new(
        Matrix::from_vec(e, p, normal_vec(&mut rng, e * p, 1.0 / (p as f64).sqrt()))?,
        None,
    )?;
    let mut rng = substream(seed, 0xB2);
    let transition = match kind {
        TransitionKind::Dense => {
            let mut a = Matrix::from_vec(n, n, normal_vec(&mut rng, n * n, 1.0))?;
            let norm = crate::spectral::spectral_norm(&a, 1e-10)?;
            a.scale(0.9 / norm);
            Transition::Dense(a)
        }
        TransitionKind::Diagonal => {
            Transition::Diagonal((0..n).map(|i| 0.5 + 0.4 * (i as f64 + 0.5) / n as f64).collect())
        }
        TransitionKind::ScalarPerStep => {
            Transition::ScalarPerStep((0..t).map(|s| 0.9 - 0.2 * ((s % 7) as f64 / 7.0)).collect())
        }
    };
    Ok(Cell {
        x,
        params,
        router,
        transition,
        k,
    })
}

/// Routing is part of the timed pass.
fn forward(cell: &Cell, design: Design, parallel: bool) -> Result<Matrix> {
    let plan = route(&cell.router, &cell.x, cell.k)?;
    match design {
        Design::Mixed => mixed_forward_fused(&cell.params, &cell.transition, &plan, &cell.x, None),
        Design::Separated => separated_forward_fused(&cell.params, &cell.transition, &plan, &cell.x, parallel),
    }
}

/// Median and interquartile range (linear interpolation) of the samples.
pub fn median_iqr(samples: &[u64]) -> (u64, u64) {
    let mut s = samples.to_vec();
    s.sort_unstable();
    let q = |f: f64| -> f64 {
        let pos = f * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] as f64 + (s[hi] as f64 - s[lo] as f64) * (pos - lo as f64)
    };
    (q(0.5).round() as u64, (q(0.75) - q(0.25)).round() as u64)
}

pub fn run_sweep(config: &SweepConfig) -> Result<Vec<BenchRecord>> {
    config.validate()?;
    let model = CostModel::new(config.transition);
    let mode = if config.parallel { Mode::Parallel } else { Mode::Serial };
    let mut records = Vec::new();
    for dims in config.cells() {
        let [t, n, p, e, k] = dims;
        let cell = build_cell(config.seed, dims, config.transition)?;
        for &design in &config.designs {
            for _ in 0..config.warmup {
                forward(&cell, design, config.parallel)?;
            }
            let mut times = Vec::with_capacity(config.repeats);
            let mut checksum = None;
            for _ in 0..config.repeats {
                let start = Instant::now();
                let y = forward(&cell, design, config.parallel)?;
                times.push((start.elapsed().as_nanos() as u64).max(1));
                let sum: f64 = y.as_slice().iter().sum();
                match checksum {
                    None => checksum = Some(sum),
                    Some(prev) if prev.to_bits() != sum.to_bits() => {
                        return Err(Error::Precondition(format!(
                            "non-deterministic output for {design} at T={t} N={n} P={p} E={e} k={k}"
                        )));
                    }
                    Some(_) => {}
                }
            }
            let cost_dims = CostDims {
                t: t as u64,
                n: n as u64,
                p: p as u64,
                e: e as u64,
                k: k as u64,
            };
            let flops = flop_model(design, cost_dims, model)?;
            let (median, iqr) = median_iqr(&times);
            records.push(BenchRecord {
                design,
                t,
                n,
                p,
                e,
                k,
                transition: config.transition.to_string(),
                mode,
                flops_recurrence: flops.recurrence,
                flops_total: flops.total,
                wall_ns_median: median,
                wall_ns_iqr: iqr,
                checksum: checksum.unwrap_or(0.0),
            });
        }
    }
    Ok(records)
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// Comma separated, header row, LF endings, no quoting.
pub fn write_csv<W: Write, R: Serialize>(out: W, records: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(csv::QuoteStyle::Never)
        .from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("csv: {e}")))
}

pub fn read_csv<Rd: Read, R: for<'de> Deserialize<'de>>(input: Rd) -> Result<Vec<R>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

pub fn records_to_string<R: Serialize>(records: &[R]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, records)?;
    String::from_utf8(buf).map_err(|e| Error::InvalidInput(format!("csv: {e}")))
}
