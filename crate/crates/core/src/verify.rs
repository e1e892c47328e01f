//! Seeded verification suite: runs every property check over generated
//! instances and collects one record per (check, instance).
//!
//! Each record carries its metric, the tolerance and the direction of the
//! comparison, so a report is self-describing and can be re-checked from the
//! CSV alone.

use serde::{Deserialize, Serialize};

use crate::cost::{flop_model, CostDims, CostModel, Design};
use crate::error::Result;
use crate::grad::{dot_product_test, finite_diff_check, FdConfig, Loss, MoeLayer, ParamGroup};
use crate::instance::{generate_instance, normal_vec, substream, Dims, RngInstanceSpec};
use crate::router::{softmax_row, topk_indices, RoutingPlan};
use crate::ssd::{apply_materialized, semiseparable_materialize, ssd_chunked, ChunkPlan, DecayMode};
use crate::ssm::{selective_ssm, ScanOptions};
use crate::tensor::{max_abs, Matrix};
use crate::theory::{
    check_delta_recursion, check_equality_regime, check_mismatch_bound, check_stability, check_structure,
    equality_regime_case, expressivity_demo, max_slice_norm, mismatch_identity_residual, routed_case,
    stability_witness, uniform_grid, DELTA_TOLERANCE, EQUALITY_TOLERANCE, POLYNOMIAL_GAP_THRESHOLD, SIGMOID_TOLERANCE,
    SLACK_TOLERANCE, STRUCTURE_TOLERANCE,
};
use crate::types::{SequenceBatch, TransitionKind};

/// Chunked vs sequential scan, relative to the output scale.
pub const SSD_TOLERANCE: f64 = 1e-8;
/// Materialized semiseparable product vs sequential scan.
pub const MATERIALIZE_TOLERANCE: f64 = 1e-12;
/// Finite-difference relative error per parameter group.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Dot-product adjoint test, relative.
pub const ADJOINT_TOLERANCE: f64 = 1e-10;
/// Minimum probed coordinates per parameter group.
pub const FD_MIN_PROBES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    /// Passes when `metric ≤ tolerance`.
    Le,
    /// Passes when `metric ≥ tolerance`.
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check: String,
    pub seed: u64,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "E")]
    pub e: usize,
    pub k: usize,
    pub metric: f64,
    pub sense: Sense,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRecord {
    fn new(check: &str, seed: u64, d: Dims, metric: f64, sense: Sense, tolerance: f64) -> Self {
        let passed = match sense {
            Sense::Le => metric <= tolerance,
            Sense::Ge => metric >= tolerance,
        };
        Self {
            check: check.to_string(),
            seed,
            t: d.t,
            n: d.n,
            p: d.p,
            e: d.e,
            k: d.k,
            metric,
            sense,
            tolerance,
            passed,
        }
    }

    /// A check that could not be evaluated.
    fn errored(check: &str, seed: u64, d: Dims, sense: Sense, tolerance: f64) -> Self {
        let metric = match sense {
            Sense::Le => f64::INFINITY,
            Sense::Ge => f64::NEG_INFINITY,
        };
        Self::new(check, seed, d, metric, sense, tolerance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Instances for the structure, equality, mismatch and stability suites.
    pub instances: usize,
    /// Instances for the chunked-scan suite.
    pub ssd_instances: usize,
    /// Sequence length of the long stability runs.
    pub long_steps: usize,
    /// Rows for the router contract suite.
    pub router_rows: usize,
}

impl VerifyConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            instances: 100,
            ssd_instances: 20,
            long_steps: 10_000,
            router_rows: 1_000,
        }
    }
}

/// Seed of instance `i` under base seed `seed`.
pub fn instance_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Identity of a record: check name, instance seed, dimensions.
type Key<'a> = (&'a str, u64, Dims);

fn record<T>(
    out: &mut Vec<CheckRecord>,
    (check, seed, d): Key,
    (sense, tol): (Sense, f64),
    metric: Result<T>,
    f: impl FnOnce(T) -> f64,
) {
    out.push(match metric {
        Ok(v) => CheckRecord::new(check, seed, d, f(v), sense, tol),
        Err(_) => CheckRecord::errored(check, seed, d, sense, tol),
    });
}

/// Dense and top-1 mixed layers against one generic scan.
pub fn structure_suite(cfg: &VerifyConfig, out: &mut Vec<CheckRecord>) {
    for (name, k) in [("structure_dense", 4), ("structure_top1", 1)] {
        let d = Dims::new(64, 8, 4, 4, k);
        for i in 0..cfg.instances {
            let s = instance_seed(cfg.seed, i);
            let r = routed_case(s, d, 0.9, TransitionKind::Dense).and_then(|c| check_structure(&c));
            record(out, (name, s, d), (Sense::Le, STRUCTURE_TOLERANCE), r, |r| {
                r.scan_deviation.max(r.reference_deviation)
            });
        }
    }
}

/// Time-invariant routing with a shared readout.
pub fn equality_suite(cfg: &VerifyConfig, out: &mut Vec<CheckRecord>) {
    let d = Dims::new(64, 8, 4, 4, 4);
    for i in 0..cfg.instances {
        let s = instance_seed(cfg.seed, i);
        let r = equality_regime_case(s, d, TransitionKind::Dense).and_then(|c| check_equality_regime(&c));
        let (output, state) = match r {
            Ok(r) => (Ok(r.output_deviation), Ok(r.state_deviation)),
            Err(e) => (Err(e.clone()), Err(e)),
        };
        record(
            out,
            ("equality_output", s, d),
            (Sense::Le, EQUALITY_TOLERANCE),
            output,
            |v| v,
        );
        record(
            out,
            ("equality_avg_state", s, d),
            (Sense::Le, EQUALITY_TOLERANCE),
            state,
            |v| v,
        );
    }
}

/// Time-varying top-1 routing: mismatch bound and deviation recursion.
pub fn mismatch_suite(cfg: &VerifyConfig, out: &mut Vec<CheckRecord>) {
    let d = Dims::new(64, 8, 4, 4, 1);
    for i in 0..cfg.instances {
        let s = instance_seed(cfg.seed, i);
        let case = routed_case(s, d, 0.9, TransitionKind::Dense);
        match case {
            Ok(case) => {
                record(
                    out,
                    ("mismatch_bound", s, d),
                    (Sense::Ge, -SLACK_TOLERANCE),
                    check_mismatch_bound(&case),
                    |r| r.min_slack(),
                );
                record(
                    out,
                    ("mismatch_identity", s, d),
                    (Sense::Le, DELTA_TOLERANCE),
                    mismatch_identity_residual(&case),
                    |v| v,
                );
                record(
                    out,
                    ("delta_recursion", s, d),
                    (Sense::Le, DELTA_TOLERANCE),
                    check_delta_recursion(&case),
                    |v| v,
                );
            }
            Err(_) => {
                out.push(CheckRecord::errored(
                    "mismatch_bound",
                    s,
                    d,
                    Sense::Ge,
                    -SLACK_TOLERANCE,
                ));
                out.push(CheckRecord::errored(
                    "mismatch_identity",
                    s,
                    d,
                    Sense::Le,
                    DELTA_TOLERANCE,
                ));
                out.push(CheckRecord::errored(
                    "delta_recursion",
                    s,
                    d,
                    Sense::Le,
                    DELTA_TOLERANCE,
                ));
            }
        }
    }
}

fn stability_record(out: &mut Vec<CheckRecord>, name: &str, seed: u64, d: Dims, rho: f64) {
    let r = routed_case(seed, d, rho, TransitionKind::Dense).and_then(|case| {
        let mixed = case.mixed()?;
        let u = max_slice_norm(&mixed.mixed.u);
        let c = max_slice_norm(&mixed.mixed.c);
        check_stability(&case, rho, u, c)
    });
    record(out, (name, seed, d), (Sense::Ge, -SLACK_TOLERANCE), r, |r| {
        r.min_slack()
    });
}

/// Per-step state and output bounds; long runs; the tight witness.
pub fn stability_suite(cfg: &VerifyConfig, out: &mut Vec<CheckRecord>) {
    let d = Dims::new(64, 8, 4, 4, 1);
    for i in 0..cfg.instances {
        let s = instance_seed(cfg.seed, i);
        stability_record(out, "stability", s, d, 0.9);
    }
    let long = Dims::new(cfg.long_steps, 8, 4, 4, 1);
    stability_record(out, "stability_long_rho0.9", cfg.seed, long, 0.9);
    stability_record(out, "stability_long_rho0.99", cfg.seed, long, 0.99);
    for (name, rho) in [("stability_witness_rho0.9", 0.9), ("stability_witness_rho0.99", 0.99)] {
        let wd = Dims::new(cfg.long_steps, 1, 1, 1, 1);
        let r = stability_witness(rho, 1.0, cfg.long_steps);
        record(out, (name, cfg.seed, wd), (Sense::Le, SLACK_TOLERANCE), r, |r| {
            r.state.slack.iter().fold(0.0f64, |m, s| m.max(s.abs()))
        });
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Chunked scan at several chunk sizes, and the materialized oracle.
pub fn ssd_suite(cfg: &VerifyConfig, out: &mut Vec<CheckRecord>) {
    for (t, with_oracle) in [(256usize, false), (64, true)] {
        let d = Dims::new(t, 8, 4, 1, 1);
        for i in 0..cfg.ssd_instances {
            let s = instance_seed(cfg.seed, i);
            let inst = generate_instance(&RngInstanceSpec::new(s, d).with_transition(TransitionKind::ScalarPerStep));
            let Ok(inst) = inst else {
                out.push(CheckRecord::errored("ssd_chunked", s, d, Sense::Le, SSD_TOLERANCE));
                continue;
            };
            let streams = &inst.streams[0];
            let seq = match selective_ssm(&inst.transition, streams, &inst.x, None, ScanOptions { record: false }) {
                Ok(o) => o.y,
                Err(_) => {
                    out.push(CheckRecord::errored("ssd_chunked", s, d, Sense::Le, SSD_TOLERANCE));
                    continue;
                }
            };
            let scale = max_abs(seq.as_slice()).max(f64::MIN_POSITIVE);
            if !with_oracle {
                for q in [1usize, 8, 32, 256] {
                    for (mode, tag) in [(DecayMode::Linear, "linear"), (DecayMode::Log, "log")] {
                        let r = ChunkPlan::new(t, q)
                            .and_then(|plan| ssd_chunked(&inst.transition, streams, &inst.x, &plan, None, mode));
                        let name = format!("ssd_chunked_q{q}_{tag}");
                        record(out, (&name, s, d), (Sense::Le, SSD_TOLERANCE), r, |o| {
                            max_abs_diff(o.y.as_slice(), seq.as_slice()) / scale
                        });
                    }
                }
            } else {
                let r = semiseparable_materialize(&inst.transition, streams)
                    .map(|ms| apply_materialized(&ms, inst.x.matrix()));
                record(
                    out,
                    ("ssd_materialized", s, d),
                    (Sense::Le, MATERIALIZE_TOLERANCE),
                    r,
                    |m| max_abs_diff(m.as_slice(), seq.as_slice()),
                );
            }
        }
    }
}

/// Sigmoid reproduction and the cubic gap on 161 points over [−8, 8].
pub fn expressivity_suite(cfg: &VerifyConfig, out: &mut Vec<CheckRecord>) {
    let d = Dims::new(1, 1, 1, 2, 2);
    let r = expressivity_demo(&uniform_grid(-8.0, 8.0, 161));
    let (a, b) = match r {
        Ok(r) => (Ok(r.sigmoid_error), Ok(r.poly_gap)),
        Err(e) => (Err(e.clone()), Err(e)),
    };
    record(
        out,
        ("expressivity_sigmoid", cfg.seed, d),
        (Sense::Le, SIGMOID_TOLERANCE),
        a,
        |v| v,
    );
    record(
        out,
        ("expressivity_cubic_gap", cfg.seed, d),
        (Sense::Ge, POLYNOMIAL_GAP_THRESHOLD),
        b,
        |v| v,
    );
}

/// Finite differences per parameter group and the dot-product test.
pub fn gradient_suite(cfg: &VerifyConfig, out: &mut Vec<CheckRecord>) {
    let d = Dims::new(16, 8, 16, 4, 4);
    let s = cfg.seed;
    let fd = MoeLayer::random(s, d.n, d.p, d.e, d.k, 0.9).and_then(|layer| {
        let x = SequenceBatch::from_vec(d.t, d.p, normal_vec(&mut substream(s, 0xF0), d.t * d.p, 1.0))?;
        finite_diff_check(
            &layer,
            &x,
            &Loss::HalfSquared,
            &ParamGroup::ALL,
            FdConfig {
                seed: s,
                ..FdConfig::default()
            },
        )
    });
    match fd {
        Ok(groups) => {
            for g in groups {
                let name = format!("grad_fd_{}", g.group.name());
                let metric = if g.probed >= FD_MIN_PROBES {
                    g.max_rel_error
                } else {
                    f64::INFINITY
                };
                out.push(CheckRecord::new(&name, s, d, metric, Sense::Le, FD_TOLERANCE));
            }
        }
        Err(_) => {
            for g in ParamGroup::ALL {
                let name = format!("grad_fd_{}", g.name());
                out.push(CheckRecord::errored(&name, s, d, Sense::Le, FD_TOLERANCE));
            }
        }
    }

    let dd = Dims::new(16, 4, 3, 3, 3);
    let mut tangent = Vec::new();
    let mut stencil = Vec::new();
    for i in 0..4 {
        let cs = instance_seed(s, i);
        let r = routed_case(cs, dd, 0.9, TransitionKind::Dense).and_then(|mut case| {
            case.h0 = Some(normal_vec(&mut substream(cs, 0xA0), dd.n * dd.p, 0.5));
            dot_product_test(&case, cs, 1e-3)
        });
        match r {
            Ok(c) => {
                tangent.push(c.rel_error_tangent());
                stencil.push(c.rel_error_stencil());
            }
            Err(_) => {
                tangent.push(f64::INFINITY);
                stencil.push(f64::INFINITY);
            }
        }
    }
    let worst = |v: &[f64]| v.iter().copied().fold(0.0f64, f64::max);
    out.push(CheckRecord::new(
        "grad_adjoint_tangent",
        s,
        dd,
        worst(&tangent),
        Sense::Le,
        ADJOINT_TOLERANCE,
    ));
    out.push(CheckRecord::new(
        "grad_adjoint_stencil",
        s,
        dd,
        worst(&stencil),
        Sense::Le,
        ADJOINT_TOLERANCE,
    ));
}

/// Violations of the top-k contract over random dense rows: retained count,
/// no renormalization, shift invariance of the active set.
pub fn router_violations(seed: u64, rows: usize, experts: usize) -> usize {
    let mut rng = substream(seed, 0xC0);
    let mut violations = 0;
    for _ in 0..rows {
        let logits = normal_vec(&mut rng, experts, 3.0);
        let shift = normal_vec(&mut rng, 1, 50.0)[0];
        let mut pi = logits.clone();
        softmax_row(&mut pi);
        let mut shifted: Vec<f64> = logits.iter().map(|g| g + shift).collect();
        softmax_row(&mut shifted);
        for k in 1..=experts + 2 {
            let kk = k.min(experts);
            let idx = topk_indices(&pi, kk);
            let Ok(plan) = RoutingPlan::from_parts(
                Matrix::from_vec(1, experts, pi.clone()).expect("row shape"),
                vec![idx.clone()],
            ) else {
                violations += 1;
                continue;
            };
            let row = plan.weights().row(0);
            let kept = row.iter().filter(|&&w| w != 0.0).count();
            if kept != kk || plan.active(0).len() != kk {
                violations += 1;
            }
            if idx.iter().any(|&i| row[i] != pi[i]) {
                violations += 1;
            }
            let sum: f64 = row.iter().sum();
            if kk < experts && sum >= 1.0 {
                violations += 1;
            }
            if topk_indices(&shifted, kk) != idx {
                violations += 1;
            }
        }
    }
    violations
}

pub fn router_suite(cfg: &VerifyConfig, out: &mut Vec<CheckRecord>) {
    let d = Dims::new(1, 1, 1, 8, 8);
    let v = router_violations(cfg.seed, cfg.router_rows, d.e);
    out.push(CheckRecord::new(
        "router_contracts",
        cfg.seed,
        d,
        v as f64,
        Sense::Le,
        0.0,
    ));
}

/// Grid of dims tuples used for the recurrence-ratio check.
pub fn flop_grid() -> Vec<CostDims> {
    let mut grid = Vec::new();
    for &t in &[0u64, 1, 1024, 4096] {
        for &(n, p) in &[(16u64, 64u64), (64, 256)] {
            for &(e, k) in &[(2u64, 1u64), (4, 2), (8, 1), (64, 4)] {
                grid.push(CostDims { t, n, p, e, k });
            }
        }
    }
    grid
}

/// Dims tuples where `recurrence(separated) ≠ E · recurrence(mixed)`.
pub fn flop_ratio_violations() -> usize {
    let mut bad = 0;
    for kind in [
        TransitionKind::Dense,
        TransitionKind::Diagonal,
        TransitionKind::ScalarPerStep,
    ] {
        let model = CostModel::new(kind);
        for d in flop_grid() {
            let ok = match (
                flop_model(Design::Mixed, d, model),
                flop_model(Design::Separated, d, model),
            ) {
                (Ok(m), Ok(s)) => s.recurrence == d.e * m.recurrence,
                _ => false,
            };
            if !ok {
                bad += 1;
            }
        }
    }
    bad
}

pub fn flop_suite(cfg: &VerifyConfig, out: &mut Vec<CheckRecord>) {
    let d = Dims::new(0, 0, 0, 0, 0);
    out.push(CheckRecord::new(
        "flop_ratio",
        cfg.seed,
        d,
        flop_ratio_violations() as f64,
        Sense::Le,
        0.0,
    ));
}

/// Every suite, in a fixed order.
pub fn run_verification(cfg: &VerifyConfig) -> Vec<CheckRecord> {
    let mut out = Vec::new();
    structure_suite(cfg, &mut out);
    equality_suite(cfg, &mut out);
    mismatch_suite(cfg, &mut out);
    stability_suite(cfg, &mut out);
    ssd_suite(cfg, &mut out);
    expressivity_suite(cfg, &mut out);
    gradient_suite(cfg, &mut out);
    router_suite(cfg, &mut out);
    flop_suite(cfg, &mut out);
    out
}

/// One line per check name, in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub check: String,
    pub runs: usize,
    pub passed: usize,
    /// Largest metric for `Le` checks, smallest for `Ge` checks.
    pub worst: f64,
    pub sense: Sense,
    pub tolerance: f64,
}

impl SummaryRow {
    pub fn ok(&self) -> bool {
        self.runs == self.passed
    }
}

pub fn summarize(records: &[CheckRecord]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for r in records {
        let row = match rows.iter_mut().position(|s| s.check == r.check) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(SummaryRow {
                    check: r.check.clone(),
                    runs: 0,
                    passed: 0,
                    worst: match r.sense {
                        Sense::Le => f64::NEG_INFINITY,
                        Sense::Ge => f64::INFINITY,
                    },
                    sense: r.sense,
                    tolerance: r.tolerance,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.runs += 1;
        row.passed += r.passed as usize;
        row.worst = match r.sense {
            Sense::Le => row.worst.max(r.metric),
            Sense::Ge => row.worst.min(r.metric),
        };
    }
    rows
}

pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<28} {:>6} {:>6} {:>13} {:>4} {:>10}  {}\n",
        "check", "runs", "pass", "worst", "", "tolerance", "status"
    );
    for r in rows {
        let op = match r.sense {
            Sense::Le => "<=",
            Sense::Ge => ">=",
        };
        s.push_str(&format!(
            "{:<28} {:>6} {:>6} {:>13.4e} {:>4} {:>10.1e}  {}\n",
            r.check,
            r.runs,
            r.passed,
            r.worst,
            op,
            r.tolerance,
            if r.ok() { "PASS" } else { "FAIL" }
        ));
    }
    s
}
