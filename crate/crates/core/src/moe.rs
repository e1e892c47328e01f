//! The two MoE–SSM designs.
//!
//! * Mixed (parameter-space) design: expert injections and readouts are
//!   combined with the routing weights into one `(Ũ_t, C̃_t)` stream that
//!   drives a single recurrence with state `N × P`.
//! * Separated design: every expert advances its own state with its own
//!   injection; only the readout is routed. State is `E × N × P`.
//!
//! Both designs share one transition across experts and steps.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::router::RoutingPlan;
use crate::ssd::{ssd_chunked, ChunkPlan, DecayMode};
use crate::ssm::{check_h0, ssm_scan_sequential, ScanOptions, ScanOutput};
use crate::tensor::{check_finite, Matrix, Tensor3};
use crate::types::{SequenceBatch, StateTrajectory, StreamSet, Transition};

/// Linear projections of one expert.
///
/// `B_t` and `C_t` are produced as length-`N` vectors and shared by every
/// channel (one group, as in Mamba-2); `X_t^{(e)}` is a full `P → P` map.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertProjection {
    /// `N × P`
    pub wb: Matrix,
    pub bias_b: Vec<f64>,
    /// `N × P`
    pub wc: Matrix,
    pub bias_c: Vec<f64>,
    /// `P × P`
    pub wx: Matrix,
    pub bias_x: Vec<f64>,
}

impl ExpertProjection {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            wb: Matrix::zeros(n, p),
            bias_b: vec![0.0; n],
            wc: Matrix::zeros(n, p),
            bias_c: vec![0.0; n],
            wx: Matrix::zeros(p, p),
            bias_x: vec![0.0; p],
        }
    }

    #[inline]
    pub fn project_b(&self, token: &[f64], out: &mut [f64]) {
        affine(&self.wb, &self.bias_b, token, out)
    }

    #[inline]
    pub fn project_c(&self, token: &[f64], out: &mut [f64]) {
        affine(&self.wc, &self.bias_c, token, out)
    }

    #[inline]
    pub fn project_x(&self, token: &[f64], out: &mut [f64]) {
        affine(&self.wx, &self.bias_x, token, out)
    }
}

#[inline]
fn affine(w: &Matrix, bias: &[f64], v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = crate::tensor::dot(w.row(i), v) + bias[i];
    }
}

/// Per-expert projections sharing the layer's state size and width.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    experts: Vec<ExpertProjection>,
    n: usize,
    p: usize,
}

impl ExpertParams {
    pub fn new(experts: Vec<ExpertProjection>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::InvalidInput("at least one expert is required".into()))?;
        let (n, p) = (first.wb.rows(), first.wb.cols());
        for (e, ex) in experts.iter().enumerate() {
            let ok = ex.wb.rows() == n
                && ex.wb.cols() == p
                && ex.wc.rows() == n
                && ex.wc.cols() == p
                && ex.wx.rows() == p
                && ex.wx.cols() == p
                && ex.bias_b.len() == n
                && ex.bias_c.len() == n
                && ex.bias_x.len() == p;
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "expert {e} projections do not match N = {n}, P = {p}"
                )));
            }
            for m in [&ex.wb, &ex.wc, &ex.wx] {
                check_finite("expert projection", m.as_slice())?;
            }
            for b in [&ex.bias_b, &ex.bias_c, &ex.bias_x] {
                check_finite("expert bias", b)?;
            }
        }
        Ok(Self { experts, n, p })
    }

    /// Seeded Gaussian projections, weights scaled by `1/√P`, zero biases.
    pub fn random(seed: u64, n: usize, p: usize, e: usize, scale: f64) -> Result<Self> {
        use crate::instance::{normal_vec, substream};
        let s = scale / (p as f64).sqrt();
        let experts = (0..e)
            .map(|ex| {
                let mut rng = substream(seed, (1 << 32) + ex as u64);
                Ok(ExpertProjection {
                    wb: Matrix::from_vec(n, p, normal_vec(&mut rng, n * p, s))?,
                    bias_b: vec![0.0; n],
                    wc: Matrix::from_vec(n, p, normal_vec(&mut rng, n * p, s))?,
                    bias_c: vec![0.0; n],
                    wx: Matrix::from_vec(p, p, normal_vec(&mut rng, p * p, s))?,
                    bias_x: vec![0.0; p],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(experts)
    }

    #[inline]
    pub fn experts(&self) -> &[ExpertProjection] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [ExpertProjection] {
        &mut self.experts
    }

    #[inline]
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    #[inline]
    pub fn state_size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.p
    }

    fn check_batch(&self, x: &SequenceBatch) -> Result<()> {
        if x.channels() != self.p {
            return Err(shape_err("sequence channels", self.p, x.channels()));
        }
        Ok(())
    }
}

/// Writes one expert's streams for step `t` into `out` (slices of `StreamSet`).
fn fill_expert_step(ex: &ExpertProjection, token: &[f64], t: usize, out: &mut StreamSet, scratch: &mut [f64]) {
    let p = token.len();
    ex.project_b(token, scratch);
    for (row, &bv) in out.b.slice_mut(t).chunks_exact_mut(p).zip(scratch.iter()) {
        row.iter_mut().for_each(|v| *v = bv);
    }
    ex.project_c(token, scratch);
    for (row, &cv) in out.c.slice_mut(t).chunks_exact_mut(p).zip(scratch.iter()) {
        row.iter_mut().for_each(|v| *v = cv);
    }
    ex.project_x(token, out.x.row_mut(t));
}

/// Streams `(B_t^{(e)}, C_t^{(e)}, X_t^{(e)})` of every expert at every step.
pub fn expert_streams(params: &ExpertParams, x: &SequenceBatch) -> Result<Vec<StreamSet>> {
    params.check_batch(x)?;
    let (n, p) = (params.n, params.p);
    let mut scratch = vec![0.0; n];
    Ok(params
        .experts
        .iter()
        .map(|ex| {
            let mut s = StreamSet::zeros(x.steps(), n, p);
            for t in 0..x.steps() {
                fill_expert_step(ex, x.token(t), t, &mut s, &mut scratch);
            }
            s
        })
        .collect())
}

/// Like [`expert_streams`], but only projects `(t, e)` pairs with `e ∈ K_t`;
/// all other entries stay zero.
pub fn expert_streams_active(params: &ExpertParams, x: &SequenceBatch, plan: &RoutingPlan) -> Result<Vec<StreamSet>> {
    params.check_batch(x)?;
    check_plan(plan, x.steps(), params.num_experts())?;
    let (n, p) = (params.n, params.p);
    let mut out = vec![StreamSet::zeros(x.steps(), n, p); params.num_experts()];
    let mut scratch = vec![0.0; n];
    for t in 0..x.steps() {
        for &e in plan.active(t) {
            fill_expert_step(&params.experts[e], x.token(t), t, &mut out[e], &mut scratch);
        }
    }
    Ok(out)
}

fn check_plan(plan: &RoutingPlan, steps: usize, experts: usize) -> Result<()> {
    if plan.experts() != experts {
        return Err(shape_err("routing plan experts", experts, plan.experts()));
    }
    if plan.steps() != steps {
        return Err(shape_err("routing plan steps", steps, plan.steps()));
    }
    Ok(())
}

fn check_stream_list(streams: &[StreamSet]) -> Result<(usize, usize, usize)> {
    let first = streams
        .first()
        .ok_or_else(|| Error::InvalidInput("at least one expert stream is required".into()))?;
    let dims = first.dims();
    for s in streams {
        if s.dims() != dims {
            return Err(shape_err(
                "expert stream dims",
                format!("{dims:?}"),
                format!("{:?}", s.dims()),
            ));
        }
    }
    Ok(dims)
}

/// Effective single-SSM streams after parameter-space mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedStreams {
    /// `Ũ_t = Σ_{e∈K_t} π_{t,e} B_t^{(e)} X_t^{(e)}`
    pub u: Tensor3,
    /// `C̃_t = Σ_{e∈K_t} π_{t,e} C_t^{(e)}`
    pub c: Tensor3,
}

/// Mixes expert injections and readouts with the routing weights.
pub fn mix_streams(streams: &[StreamSet], plan: &RoutingPlan) -> Result<MixedStreams> {
    let (steps, n, p) = check_stream_list(streams)?;
    check_plan(plan, steps, streams.len())?;
    let mut u = Tensor3::zeros(steps, n, p);
    let mut c = Tensor3::zeros(steps, n, p);
    let mut inj = vec![0.0; n * p];
    for t in 0..steps {
        for &e in plan.active(t) {
            let w = plan.weight(t, e);
            streams[e].injection_into(t, &mut inj);
            crate::tensor::axpy(w, &inj, u.slice_mut(t));
            crate::tensor::axpy(w, streams[e].c.slice(t), c.slice_mut(t));
        }
    }
    Ok(MixedStreams { u, c })
}

/// Which evaluator runs the single mixed recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Evaluator {
    #[default]
    Sequential,
    /// Chunked semiseparable scan; scalar-per-step transitions only and no
    /// trajectory is recorded.
    Chunked(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedOutput {
    pub scan: ScanOutput,
    pub mixed: MixedStreams,
}

impl MixedOutput {
    pub fn y(&self) -> &Matrix {
        &self.scan.y
    }
}

/// Mixed design from precomputed expert streams: mix once, scan once.
pub fn moe_param_forward_streams(
    streams: &[StreamSet],
    transition: &Transition,
    plan: &RoutingPlan,
    h0: Option<&[f64]>,
    evaluator: Evaluator,
) -> Result<MixedOutput> {
    let mixed = mix_streams(streams, plan)?;
    let scan = match evaluator {
        Evaluator::Sequential => ssm_scan_sequential(transition, &mixed.u, &mixed.c, h0, ScanOptions { record: true })?,
        Evaluator::Chunked(q) => {
            let (steps, _, p) = mixed.u.dims();
            // Ũ is already the injection: drive a unit input through B = Ũ.
            let set = StreamSet::new(mixed.u.clone(), mixed.c.clone(), Matrix::zeros(steps, p))?;
            let ones = SequenceBatch::from_vec(steps, p, vec![1.0; steps * p])?;
            let plan = ChunkPlan::new(steps, q.min(steps))?;
            let out = ssd_chunked(transition, &set, &ones, &plan, h0, DecayMode::Linear)?;
            ScanOutput {
                y: out.y,
                final_state: out.final_state,
                trajectory: None,
            }
        }
    };
    Ok(MixedOutput { scan, mixed })
}

/// Mixed design from token features: projects only active experts, mixes,
/// and evaluates one recurrence.
pub fn moe_param_forward(
    params: &ExpertParams,
    transition: &Transition,
    plan: &RoutingPlan,
    x: &SequenceBatch,
    h0: Option<&[f64]>,
    evaluator: Evaluator,
) -> Result<MixedOutput> {
    let streams = expert_streams_active(params, x, plan)?;
    moe_param_forward_streams(&streams, transition, plan, h0, evaluator)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedOutput {
    pub y: Matrix,
    /// One scan per expert, trajectories recorded.
    pub experts: Vec<ScanOutput>,
}

impl SeparatedOutput {
    pub fn trajectory(&self, e: usize) -> Result<&StateTrajectory> {
        self.experts[e].trajectory()
    }
}

/// Separated design from precomputed streams. Every expert's state advances
/// every step; only the readout is restricted to `K_t`.
pub fn moe_separated_forward_streams(
    streams: &[StreamSet],
    transition: &Transition,
    plan: &RoutingPlan,
    h0s: Option<&[Vec<f64>]>,
    parallel: bool,
) -> Result<SeparatedOutput> {
    let (steps, _, p) = check_stream_list(streams)?;
    check_plan(plan, steps, streams.len())?;
    if let Some(h) = h0s {
        if h.len() != streams.len() {
            return Err(shape_err("initial states", streams.len(), h.len()));
        }
    }
    let run = |e: usize| -> Result<ScanOutput> {
        let h0 = h0s.map(|h| h[e].as_slice());
        ssm_scan_sequential(
            transition,
            &streams[e].injection(),
            &streams[e].c,
            h0,
            ScanOptions { record: true },
        )
    };
    let experts: Vec<ScanOutput> = if parallel {
        (0..streams.len()).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..streams.len()).map(run).collect::<Result<_>>()?
    };
    let mut y = Matrix::zeros(steps, p);
    for t in 0..steps {
        for &e in plan.active(t) {
            crate::tensor::axpy(plan.weight(t, e), experts[e].y.row(t), y.row_mut(t));
        }
    }
    Ok(SeparatedOutput { y, experts })
}

/// Separated design from token features.
pub fn moe_separated_forward(
    params: &ExpertParams,
    transition: &Transition,
    plan: &RoutingPlan,
    x: &SequenceBatch,
    h0s: Option<&[Vec<f64>]>,
) -> Result<SeparatedOutput> {
    let streams = expert_streams(params, x)?;
    moe_separated_forward_streams(&streams, transition, plan, h0s, false)
}

/// Streaming mixed forward: routes, projects the active experts, mixes and
/// advances one `N × P` state per step without materializing any stream
/// tensor. Work per step is independent of `E` apart from routing.
pub fn mixed_forward_fused(
    params: &ExpertParams,
    transition: &Transition,
    plan: &RoutingPlan,
    x: &SequenceBatch,
    h0: Option<&[f64]>,
) -> Result<Matrix> {
    params.check_batch(x)?;
    check_plan(plan, x.steps(), params.num_experts())?;
    let (n, p) = (params.n, params.p);
    transition.validate(x.steps(), n)?;
    let mut h = check_h0(h0, n, p)?;
    let mut next = vec![0.0; n * p];
    let mut u = vec![0.0; n * p];
    let mut c_mix = vec![0.0; n];
    let mut bvec = vec![0.0; n];
    let mut cvec = vec![0.0; n];
    let mut xe = vec![0.0; p];
    let mut y = Matrix::zeros(x.steps(), p);

    for t in 0..x.steps() {
        let token = x.token(t);
        u.iter_mut().for_each(|v| *v = 0.0);
        c_mix.iter_mut().for_each(|v| *v = 0.0);
        for &e in plan.active(t) {
            let w = plan.weight(t, e);
            let ex = &params.experts[e];
            ex.project_b(token, &mut bvec);
            ex.project_c(token, &mut cvec);
            ex.project_x(token, &mut xe);
            for (row, &bv) in u.chunks_exact_mut(p).zip(&bvec) {
                let s = w * bv;
                for (o, &xv) in row.iter_mut().zip(&xe) {
                    *o += s * xv;
                }
            }
            crate::tensor::axpy(w, &cvec, &mut c_mix);
        }
        transition.apply(t, &h, p, &mut next);
        for (hv, &uv) in next.iter_mut().zip(&u) {
            *hv += uv;
        }
        std::mem::swap(&mut h, &mut next);
        broadcast_readout(&c_mix, &h, p, y.row_mut(t));
    }
    check_finite("mixed output", y.as_slice())?;
    Ok(y)
}

#[inline]
fn broadcast_readout(c: &[f64], h: &[f64], p: usize, y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    for (&cv, hrow) in c.iter().zip(h.chunks_exact(p)) {
        for (yv, &hv) in y.iter_mut().zip(hrow) {
            *yv += cv * hv;
        }
    }
}

/// Streaming separated forward: `E` independent recurrences, each projecting
/// its own injection every step, readout only for active experts. With
/// `parallel`, experts run on the rayon pool.
pub fn separated_forward_fused(
    params: &ExpertParams,
    transition: &Transition,
    plan: &RoutingPlan,
    x: &SequenceBatch,
    parallel: bool,
) -> Result<Matrix> {
    params.check_batch(x)?;
    check_plan(plan, x.steps(), params.num_experts())?;
    let (n, p) = (params.n, params.p);
    transition.validate(x.steps(), n)?;
    let steps = x.steps();

    let run = |e: usize| -> Matrix {
        let ex = &params.experts[e];
        let mut h = vec![0.0; n * p];
        let mut next = vec![0.0; n * p];
        let mut bvec = vec![0.0; n];
        let mut cvec = vec![0.0; n];
        let mut xe = vec![0.0; p];
        let mut ye = vec![0.0; p];
        let mut y = Matrix::zeros(steps, p);
        for t in 0..steps {
            let token = x.token(t);
            ex.project_b(token, &mut bvec);
            ex.project_x(token, &mut xe);
            transition.apply(t, &h, p, &mut next);
            for (row, &bv) in next.chunks_exact_mut(p).zip(&bvec) {
                for (o, &xv) in row.iter_mut().zip(&xe) {
                    *o += bv * xv;
                }
            }
            std::mem::swap(&mut h, &mut next);
            let w = plan.weight(t, e);
            if plan.active(t).binary_search(&e).is_ok() {
                ex.project_c(token, &mut cvec);
                broadcast_readout(&cvec, &h, p, &mut ye);
                crate::tensor::axpy(w, &ye, y.row_mut(t));
            }
        }
        y
    };

    let partials: Vec<Matrix> = if parallel {
        (0..params.num_experts()).into_par_iter().map(run).collect()
    } else {
        (0..params.num_experts()).map(run).collect()
    };
    let mut y = Matrix::zeros(steps, p);
    for part in &partials {
        crate::tensor::axpy(1.0, part.as_slice(), y.as_mut_slice());
    }
    check_finite("separated output", y.as_slice())?;
    Ok(y)
}
