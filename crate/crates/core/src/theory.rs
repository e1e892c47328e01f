//! Executable checks of the mixed layer's structural, stability and
//! equivalence properties, plus the sigmoid expressivity construction.
//!
//! Norm conventions: states and stream slices use the Frobenius norm over
//! `N × P`, outputs the Euclidean norm over `P`, transitions the induced
//! 2-norm. With these, `‖A H‖_F ≤ ‖A‖₂ ‖H‖_F` and `‖Y_t‖ ≤ ‖C_t‖_F ‖h_t‖_F`,
//! so every bound below is provable as evaluated.

use crate::error::{Error, Result};
use crate::instance::{generate_instance, normal_vec, substream, Dims, Instance, RngInstanceSpec};
use crate::moe::{
    moe_param_forward, moe_param_forward_streams, moe_separated_forward_streams, Evaluator, ExpertParams,
    ExpertProjection, MixedOutput, SeparatedOutput,
};
use crate::router::{route, softmax_row, RouterParams, RoutingPlan};
use crate::ssm::{ssm_scan_sequential, ScanOptions};
use crate::tensor::{max_abs, norm2, Matrix, Tensor3};
use crate::types::{SequenceBatch, StreamSet, Transition, TransitionKind};

/// Slack floor for bound comparisons on unit-scale data.
pub const SLACK_TOLERANCE: f64 = 1e-9;
/// Agreement required between the mixed layer and a generic scan.
pub const STRUCTURE_TOLERANCE: f64 = 1e-14;
/// Output and averaged-state agreement in the equality regime.
pub const EQUALITY_TOLERANCE: f64 = 1e-10;
/// Residual of the deviation recursion.
pub const DELTA_TOLERANCE: f64 = 1e-10;
/// Sup-error floor of the best cubic fit to the sigmoid on [−8, 8].
pub const POLYNOMIAL_GAP_THRESHOLD: f64 = 0.02;
/// Sigmoid reproduction tolerance of the expressivity construction.
pub const SIGMOID_TOLERANCE: f64 = 1e-12;

const NORM_TOL: f64 = 1e-12;

/// A mixed-vs-separated problem: shared transition, expert streams, routing.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeCase {
    pub transition: Transition,
    pub streams: Vec<StreamSet>,
    pub plan: RoutingPlan,
    /// Initial state of the mixed model (zero when `None`).
    pub h0: Option<Vec<f64>>,
}

impl MoeCase {
    pub fn from_instance(inst: &Instance) -> Result<Self> {
        Ok(Self {
            transition: inst.transition.clone(),
            streams: inst.streams.clone(),
            plan: inst.plan()?,
            h0: None,
        })
    }

    pub fn mixed(&self) -> Result<MixedOutput> {
        moe_param_forward_streams(
            &self.streams,
            &self.transition,
            &self.plan,
            self.h0.as_deref(),
            Evaluator::Sequential,
        )
    }

    /// Separated design, every expert started from zero.
    pub fn separated(&self) -> Result<SeparatedOutput> {
        moe_separated_forward_streams(&self.streams, &self.transition, &self.plan, None, false)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let (t, n, p) = self.streams[0].dims();
        (t, n, p, self.streams.len())
    }
}

/// Per-step comparison `lhs_t ≤ rhs_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub slack: Vec<f64>,
    pub holds: bool,
    /// Step (1-based) with the smallest slack.
    pub worst_step: usize,
}

impl BoundReport {
    pub fn new(lhs: Vec<f64>, rhs: Vec<f64>, eps: f64) -> Self {
        let slack: Vec<f64> = rhs.iter().zip(&lhs).map(|(r, l)| r - l).collect();
        let (worst, min) = slack.iter().enumerate().fold(
            (0, f64::INFINITY),
            |(wi, wv), (i, &s)| if s < wv { (i, s) } else { (wi, wv) },
        );
        Self {
            holds: slack.iter().all(|s| !s.is_nan()) && min >= -eps,
            lhs,
            rhs,
            slack,
            worst_step: worst + 1,
        }
    }

    pub fn min_slack(&self) -> f64 {
        self.slack.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Literal evaluation of the routed update and readout, one expert term at
/// a time, without forming mixed streams.
pub fn moe_reference_output(case: &MoeCase) -> Result<Matrix> {
    let (steps, n, p, _) = case.dims();
    let mut h = case.h0.clone().unwrap_or_else(|| vec![0.0; n * p]);
    let mut next = vec![0.0; n * p];
    let mut y = Matrix::zeros(steps, p);
    for t in 0..steps {
        case.transition.apply(t, &h, p, &mut next);
        for &e in case.plan.active(t) {
            let w = case.plan.weight(t, e);
            let s = &case.streams[e];
            for r in 0..n {
                for c in 0..p {
                    next[r * p + c] += w * (s.b.get(t, r, c) * s.x[(t, c)]);
                }
            }
        }
        std::mem::swap(&mut h, &mut next);
        for c in 0..p {
            let mut acc = 0.0;
            for r in 0..n {
                let mut ct = 0.0;
                for &e in case.plan.active(t) {
                    ct += case.plan.weight(t, e) * case.streams[e].c.get(t, r, c);
                }
                acc += ct * h[r * p + c];
            }
            y[(t, c)] = acc;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureReport {
    /// Mixed layer vs generic scan over its mixed streams.
    pub scan_deviation: f64,
    /// Mixed layer vs literal evaluation of the routed recurrence.
    pub reference_deviation: f64,
    pub holds: bool,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// The mixed layer is one selective SSM over `(Ũ, C̃)`.
pub fn check_structure(case: &MoeCase) -> Result<StructureReport> {
    let out = case.mixed()?;
    let generic = ssm_scan_sequential(
        &case.transition,
        &out.mixed.u,
        &out.mixed.c,
        case.h0.as_deref(),
        ScanOptions { record: true },
    )?;
    let reference = moe_reference_output(case)?;
    let scan_deviation = max_abs_diff(out.y().as_slice(), generic.y.as_slice()).max(max_abs_diff(
        out.scan.trajectory()?.tensor().as_slice(),
        generic.trajectory()?.tensor().as_slice(),
    ));
    let reference_deviation = max_abs_diff(out.y().as_slice(), reference.as_slice());
    Ok(StructureReport {
        scan_deviation,
        reference_deviation,
        holds: scan_deviation <= STRUCTURE_TOLERANCE && reference_deviation <= STRUCTURE_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub state: BoundReport,
    pub output: BoundReport,
}

impl StabilityReport {
    pub fn holds(&self) -> bool {
        self.state.holds && self.output.holds
    }

    pub fn min_slack(&self) -> f64 {
        self.state.min_slack().min(self.output.min_slack())
    }
}

/// Largest Frobenius norm of any slice.
pub fn max_slice_norm(t: &Tensor3) -> f64 {
    (0..t.steps()).map(|s| t.slice_norm(s)).fold(0.0, f64::max)
}

/// `‖h_t‖ ≤ ρᵗ‖h₀‖ + (1−ρᵗ)/(1−ρ)·U` and `‖Y_t‖ ≤ C·(same)` at every step.
pub fn check_stability(case: &MoeCase, rho: f64, u_bound: f64, c_bound: f64) -> Result<StabilityReport> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Precondition(format!(
            "contraction factor must lie in [0, 1), got {rho}"
        )));
    }
    let norm = case.transition.operator_norm(NORM_TOL)?;
    if norm > rho * (1.0 + 1e-9) {
        return Err(Error::Precondition(format!("‖A‖ = {norm} exceeds rho = {rho}")));
    }
    let out = case.mixed()?;
    let u_max = max_slice_norm(&out.mixed.u);
    let c_max = max_slice_norm(&out.mixed.c);
    if u_max > u_bound * (1.0 + 1e-12) || c_max > c_bound * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "stream norms ({u_max}, {c_max}) exceed bounds ({u_bound}, {c_bound})"
        )));
    }
    Ok(stability_report(&out, rho, u_bound, c_bound))
}

fn stability_report(out: &MixedOutput, rho: f64, u_bound: f64, c_bound: f64) -> StabilityReport {
    let traj = out.scan.trajectory().expect("mixed forward records its trajectory");
    let steps = traj.steps();
    let h0_norm = norm2(traj.state(0));
    let mut state_lhs = Vec::with_capacity(steps);
    let mut state_rhs = Vec::with_capacity(steps);
    let mut out_lhs = Vec::with_capacity(steps);
    let mut out_rhs = Vec::with_capacity(steps);
    for t in 1..=steps {
        let rt = rho.powi(t as i32);
        let bound = rt * h0_norm + (1.0 - rt) / (1.0 - rho) * u_bound;
        state_lhs.push(norm2(traj.state(t)));
        state_rhs.push(bound);
        out_lhs.push(norm2(out.y().row(t - 1)));
        out_rhs.push(c_bound * bound);
    }
    StabilityReport {
        state: BoundReport::new(state_lhs, state_rhs, SLACK_TOLERANCE),
        output: BoundReport::new(out_lhs, out_rhs, SLACK_TOLERANCE),
    }
}

/// Stability check with `U`, `C` and `ρ` measured from the case itself.
pub fn check_stability_measured(case: &MoeCase) -> Result<StabilityReport> {
    let rho = case.transition.operator_norm(NORM_TOL)?;
    let out = case.mixed()?;
    let u = max_slice_norm(&out.mixed.u);
    let c = max_slice_norm(&out.mixed.c);
    if rho >= 1.0 {
        return Err(Error::Precondition(format!(
            "transition is not contractive: ‖A‖ = {rho}"
        )));
    }
    Ok(stability_report(&out, rho, u, c))
}

/// `N = P = 1`, `a = ρ`, constant drive `U`, `h₀ = 0`: the state bound is
/// attained with equality at every step.
pub fn stability_witness(rho: f64, u: f64, steps: usize) -> Result<StabilityReport> {
    let stream = StreamSet::new(
        Tensor3::from_vec(steps, 1, 1, vec![u; steps])?,
        Tensor3::from_vec(steps, 1, 1, vec![1.0; steps])?,
        Matrix::from_vec(steps, 1, vec![1.0; steps])?,
    )?;
    let case = MoeCase {
        transition: Transition::Diagonal(vec![rho]),
        streams: vec![stream],
        plan: RoutingPlan::time_invariant(&[1.0], steps)?,
        h0: None,
    };
    check_stability(&case, rho, u, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EqualityReport {
    /// `max_t ‖Y^sep_t − Y^mix_t‖∞`
    pub output_deviation: f64,
    /// `max_t ‖Σ_e π_e h^{(e)}_t − h_t‖∞`
    pub state_deviation: f64,
}

impl EqualityReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.output_deviation <= tol && self.state_deviation <= tol
    }
}

/// Time-invariant routing with a shared readout: both designs agree.
pub fn check_equality_regime(case: &MoeCase) -> Result<EqualityReport> {
    if !case.plan.is_time_invariant() {
        return Err(Error::Precondition("routing weights vary over time".into()));
    }
    if case.streams.iter().any(|s| s.c != case.streams[0].c) {
        return Err(Error::Precondition("experts do not share the readout stream".into()));
    }
    if case.h0.as_ref().is_some_and(|h| h.iter().any(|&v| v != 0.0)) {
        return Err(Error::Precondition("equality regime needs h0 = 0".into()));
    }
    let mix = case.mixed()?;
    let sep = case.separated()?;
    let output_deviation = max_abs_diff(mix.y().as_slice(), sep.y.as_slice());

    let (steps, n, p, experts) = case.dims();
    let mix_traj = mix.scan.trajectory()?;
    let mut state_deviation = 0.0f64;
    let mut avg = vec![0.0; n * p];
    for t in 0..=steps {
        avg.iter_mut().for_each(|v| *v = 0.0);
        for e in 0..experts {
            let w = case.plan.weight(0, e);
            crate::tensor::axpy(w, sep.trajectory(e)?.state(t), &mut avg);
        }
        state_deviation = state_deviation.max(max_abs_diff(&avg, mix_traj.state(t)));
    }
    Ok(EqualityReport {
        output_deviation,
        state_deviation,
    })
}

/// `‖Y^sep_t − Y^mix_t‖ ≤ C Σ_e π_{t,e} ‖h^{(e)}_t − h_t‖` with
/// `C = max_{t,e} ‖C^{(e)}_t‖_F`.
pub fn check_mismatch_bound(case: &MoeCase) -> Result<BoundReport> {
    let (steps, _, _, _) = case.dims();
    let c_bound = case.streams.iter().map(|s| max_slice_norm(&s.c)).fold(0.0, f64::max);
    let mix = case.mixed()?;
    let sep = case.separated()?;
    let mix_traj = mix.scan.trajectory()?;
    let mut lhs = Vec::with_capacity(steps);
    let mut rhs = Vec::with_capacity(steps);
    for t in 1..=steps {
        let diff: Vec<f64> = sep
            .y
            .row(t - 1)
            .iter()
            .zip(mix.y().row(t - 1))
            .map(|(a, b)| a - b)
            .collect();
        lhs.push(norm2(&diff));
        let mut sum = 0.0;
        for &e in case.plan.active(t - 1) {
            let d: Vec<f64> = sep
                .trajectory(e)?
                .state(t)
                .iter()
                .zip(mix_traj.state(t))
                .map(|(a, b)| a - b)
                .collect();
            sum += case.plan.weight(t - 1, e) * norm2(&d);
        }
        rhs.push(c_bound * sum);
    }
    Ok(BoundReport::new(lhs, rhs, SLACK_TOLERANCE))
}

/// Residual of `Y^sep_t − Y^mix_t = Σ_e π_{t,e} C_t^{(e)ᵀ}(h^{(e)}_t − h_t)`,
/// the exact identity the mismatch bound is derived from.
pub fn mismatch_identity_residual(case: &MoeCase) -> Result<f64> {
    let (steps, n, p, _) = case.dims();
    let mix = case.mixed()?;
    let sep = case.separated()?;
    let mix_traj = mix.scan.trajectory()?;
    let mut worst = 0.0f64;
    for t in 1..=steps {
        let mut rewritten = vec![0.0; p];
        for &e in case.plan.active(t - 1) {
            let w = case.plan.weight(t - 1, e);
            let he = sep.trajectory(e)?.state(t);
            let c = case.streams[e].c.slice(t - 1);
            for r in 0..n {
                for ch in 0..p {
                    let i = r * p + ch;
                    rewritten[ch] += w * c[i] * (he[i] - mix_traj.state(t)[i]);
                }
            }
        }
        for ch in 0..p {
            let direct = sep.y[(t - 1, ch)] - mix.y()[(t - 1, ch)];
            worst = worst.max((direct - rewritten[ch]).abs());
        }
    }
    Ok(worst)
}

/// `max_{t,e} ‖δ^{(e)}_t − A δ^{(e)}_{t−1} − (B^{(e)}_t X^{(e)}_t − Ũ_t)‖_F`
/// with `δ^{(e)}_t = h^{(e)}_t − h_t`.
pub fn check_delta_recursion(case: &MoeCase) -> Result<f64> {
    if case.h0.as_ref().is_some_and(|h| h.iter().any(|&v| v != 0.0)) {
        return Err(Error::Precondition("deviation recursion check needs h0 = 0".into()));
    }
    let (steps, n, p, experts) = case.dims();
    let mix = case.mixed()?;
    let sep = case.separated()?;
    let mix_traj = mix.scan.trajectory()?;
    let mut worst = 0.0f64;
    let mut prev = vec![0.0; n * p];
    let mut cur = vec![0.0; n * p];
    let mut prop = vec![0.0; n * p];
    let mut inj = vec![0.0; n * p];
    for e in 0..experts {
        let traj = sep.trajectory(e)?;
        for t in 1..=steps {
            for i in 0..n * p {
                prev[i] = traj.state(t - 1)[i] - mix_traj.state(t - 1)[i];
                cur[i] = traj.state(t)[i] - mix_traj.state(t)[i];
            }
            case.transition.apply(t - 1, &prev, p, &mut prop);
            case.streams[e].injection_into(t - 1, &mut inj);
            let u = mix.mixed.u.slice(t - 1);
            let res: Vec<f64> = (0..n * p).map(|i| cur[i] - prop[i] - (inj[i] - u[i])).collect();
            worst = worst.max(norm2(&res));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressivityReport {
    pub grid: Vec<f64>,
    pub outputs: Vec<f64>,
    /// `max_x |Y(x) − σ(x)|`
    pub sigmoid_error: f64,
    /// Cubic least-squares coefficients, constant term first.
    pub poly_coeffs: [f64; 4],
    /// `max_x |p(x) − σ(x)|` for the least-squares cubic.
    pub poly_gap: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-expert layer with `T = N = P = 1`, `A = 0`, injections 0 and 1 from
/// bias-only projections, unit readouts and router logits `(0, x)`.
pub fn sigmoid_construction() -> Result<(ExpertParams, RouterParams, Transition)> {
    let zero = || Matrix::zeros(1, 1);
    let expert = |inj: f64| ExpertProjection {
        wb: zero(),
        bias_b: vec![inj],
        wc: zero(),
        bias_c: vec![1.0],
        wx: zero(),
        bias_x: vec![1.0],
    };
    let params = ExpertParams::new(vec![expert(0.0), expert(1.0)])?;
    let router = RouterParams::new(Matrix::from_rows(&[&[0.0], &[1.0]])?, None)?;
    Ok((params, router, Transition::Dense(Matrix::zeros(1, 1))))
}

pub fn expressivity_demo(grid: &[f64]) -> Result<ExpressivityReport> {
    if grid.len() < 4 {
        return Err(Error::InvalidInput("cubic fit needs at least four grid points".into()));
    }
    let (params, router, transition) = sigmoid_construction()?;
    let mut outputs = Vec::with_capacity(grid.len());
    for &x in grid {
        let batch = SequenceBatch::from_vec(1, 1, vec![x])?;
        let plan = route(&router, &batch, 2)?;
        let out = moe_param_forward(&params, &transition, &plan, &batch, None, Evaluator::Sequential)?;
        outputs.push(out.y()[(0, 0)]);
    }
    let sig: Vec<f64> = grid.iter().map(|&x| sigmoid(x)).collect();
    let sigmoid_error = max_abs_diff(&outputs, &sig);
    let poly_coeffs = cubic_least_squares(grid, &sig)?;
    let poly_gap = grid
        .iter()
        .zip(&sig)
        .map(|(&x, &s)| (eval_poly(&poly_coeffs, x) - s).abs())
        .fold(0.0, f64::max);
    Ok(ExpressivityReport {
        grid: grid.to_vec(),
        outputs,
        sigmoid_error,
        poly_coeffs,
        poly_gap,
    })
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn eval_poly(c: &[f64; 4], x: f64) -> f64 {
    c[0] + x * (c[1] + x * (c[2] + x * c[3]))
}

/// Least-squares cubic through `(xs, ys)`. Normal equations are formed on
/// `x / max|x|` and solved with partial pivoting, then unscaled.
pub fn cubic_least_squares(xs: &[f64], ys: &[f64]) -> Result<[f64; 4]> {
    if xs.len() != ys.len() {
        return Err(Error::Shape {
            what: "fit samples",
            expected: xs.len().to_string(),
            got: ys.len().to_string(),
        });
    }
    let mut distinct = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::InvalidInput(
            "a cubic fit needs at least 4 distinct abscissae".into(),
        ));
    }
    let scale = max_abs(xs).max(f64::MIN_POSITIVE);
    let mut g = [[0.0f64; 5]; 4];
    for (&x, &y) in xs.iter().zip(ys) {
        let s = x / scale;
        let pw = [1.0, s, s * s, s * s * s];
        for i in 0..4 {
            for j in 0..4 {
                g[i][j] += pw[i] * pw[j];
            }
            g[i][4] += pw[i] * y;
        }
    }
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&a, &b| g[a][col].abs().total_cmp(&g[b][col].abs()))
            .unwrap();
        if g[piv][col].abs() < 1e-300 {
            return Err(Error::InvalidInput("degenerate grid for cubic fit".into()));
        }
        g.swap(col, piv);
        for r in col + 1..4 {
            let f = g[r][col] / g[col][col];
            for c in col..5 {
                g[r][c] -= f * g[col][c];
            }
        }
    }
    let mut sol = [0.0; 4];
    for r in (0..4).rev() {
        let mut acc = g[r][4];
        for c in r + 1..4 {
            acc -= g[r][c] * sol[c];
        }
        sol[r] = acc / g[r][r];
    }
    Ok([sol[0], sol[1] / scale, sol[2] / scale.powi(2), sol[3] / scale.powi(3)])
}

/// Instance whose experts share expert 0's readout, routed with one
/// fixed dense weight row drawn from a seeded softmax.
pub fn equality_regime_case(seed: u64, dims: Dims, kind: TransitionKind) -> Result<MoeCase> {
    let inst = generate_instance(&RngInstanceSpec::new(seed, dims).with_transition(kind))?;
    let mut streams = inst.streams;
    let shared = streams[0].c.clone();
    for s in streams.iter_mut().skip(1) {
        s.c = shared.clone();
    }
    let mut w = normal_vec(&mut substream(seed, 0xE0), dims.e, 1.0);
    softmax_row(&mut w);
    Ok(MoeCase {
        transition: inst.transition,
        streams,
        plan: RoutingPlan::time_invariant(&w, dims.t)?,
        h0: None,
    })
}

/// Seeded instance with its router plan (top-`k` from `dims.k`).
pub fn routed_case(seed: u64, dims: Dims, rho: f64, kind: TransitionKind) -> Result<MoeCase> {
    let inst = generate_instance(
        &RngInstanceSpec::new(seed, dims)
            .with_transition(kind)
            .with_rho(Some(rho)),
    )?;
    MoeCase::from_instance(&inst)
}
