//! Reverse-mode gradients of the mixed layer and their numerical checks.
//!
//! The top-k selection is held fixed while differentiating: gradients flow
//! through the retained softmax values only. Finite-difference probes that
//! flip an active set are rejected and resampled.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::instance::{normal_vec, substream};
use crate::moe::{expert_streams_active, mix_streams, ExpertParams, ExpertProjection, MixedStreams};
use crate::router::{router_logits, softmax_row, topk_mask, RouterParams, RoutingPlan};
use crate::ssm::{ssm_scan_sequential, ScanOptions, ScanOutput};
use crate::tensor::{axpy, dot, Matrix, Tensor3};
use crate::theory::MoeCase;
use crate::types::{SequenceBatch, StateTrajectory, StreamSet, Transition};

/// Gradients of the recurrence with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrads {
    pub d_u: Tensor3,
    pub d_c: Tensor3,
    /// Same layout as [`Transition::params`].
    pub d_transition: Vec<f64>,
    pub d_h0: Vec<f64>,
}

/// Adjoint of `h_t = A_t h_{t−1} + U_t`, `Y_t = C_tᵀ h_t` (channelwise).
pub fn backward_ssm(
    trajectory: Option<&StateTrajectory>,
    transition: &Transition,
    c: &Tensor3,
    dy: &Matrix,
) -> Result<ScanGrads> {
    let traj = trajectory.ok_or_else(|| Error::Precondition("backward pass needs a recorded trajectory".into()))?;
    let (steps, n, p) = c.dims();
    if traj.steps() != steps || traj.state_len() != n * p {
        return Err(shape_err(
            "trajectory",
            format!("{steps} steps of {n}x{p}"),
            traj.steps(),
        ));
    }
    if dy.rows() != steps || dy.cols() != p {
        return Err(shape_err(
            "output cotangent",
            format!("{steps}x{p}"),
            format!("{}x{}", dy.rows(), dy.cols()),
        ));
    }
    crate::tensor::check_finite("output cotangent", dy.as_slice())?;

    let mut d_u = Tensor3::zeros(steps, n, p);
    let mut d_c = Tensor3::zeros(steps, n, p);
    let mut d_transition = vec![0.0; transition.params().len()];
    let mut lambda = vec![0.0; n * p];
    let mut carried = vec![0.0; n * p];

    for t in (0..steps).rev() {
        // λ_t = C_t ⊙ dY_t + A_{t+1}ᵀ λ_{t+1}; `carried` holds the second term.
        let dyt = dy.row(t);
        let ct = c.slice(t);
        let h = traj.state(t + 1);
        for r in 0..n {
            for ch in 0..p {
                let i = r * p + ch;
                lambda[i] = ct[i] * dyt[ch] + carried[i];
                d_c.slice_mut(t)[i] = h[i] * dyt[ch];
            }
        }
        d_u.slice_mut(t).copy_from_slice(&lambda);
        accumulate_transition_grad(transition, t, &lambda, traj.state(t), n, p, &mut d_transition);
        transition.apply_transpose(t, &lambda, p, &mut carried);
    }

    Ok(ScanGrads {
        d_u,
        d_c,
        d_transition,
        d_h0: carried,
    })
}

fn accumulate_transition_grad(
    transition: &Transition,
    t: usize,
    lambda: &[f64],
    h_prev: &[f64],
    n: usize,
    p: usize,
    out: &mut [f64],
) {
    match transition {
        Transition::Dense(_) => {
            for i in 0..n {
                let li = &lambda[i * p..(i + 1) * p];
                for j in 0..n {
                    out[i * n + j] += dot(li, &h_prev[j * p..(j + 1) * p]);
                }
            }
        }
        Transition::Diagonal(_) => {
            for i in 0..n {
                out[i] += dot(&lambda[i * p..(i + 1) * p], &h_prev[i * p..(i + 1) * p]);
            }
        }
        Transition::ScalarPerStep(_) => out[t] += dot(lambda, h_prev),
    }
}

/// Cotangents of one expert's streams.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamGrads {
    pub d_b: Tensor3,
    pub d_c: Tensor3,
    pub d_x: Matrix,
}

/// Adjoint of the parameter-space mixing.
pub fn backward_mixing(
    streams: &[StreamSet],
    plan: &RoutingPlan,
    d_u: &Tensor3,
    d_c: &Tensor3,
) -> Result<(Matrix, Vec<StreamGrads>)> {
    let first = streams
        .first()
        .ok_or_else(|| Error::InvalidInput("at least one expert stream is required".into()))?;
    let (steps, n, p) = first.dims();
    if plan.experts() != streams.len() || plan.steps() != steps {
        return Err(shape_err(
            "routing plan",
            format!("{steps}x{}", streams.len()),
            format!("{}x{}", plan.steps(), plan.experts()),
        ));
    }
    if d_u.dims() != (steps, n, p) || d_c.dims() != (steps, n, p) {
        return Err(shape_err(
            "mixed cotangents",
            format!("{:?}", (steps, n, p)),
            format!("{:?}", d_u.dims()),
        ));
    }
    let mut d_pi = Matrix::zeros(steps, streams.len());
    let mut grads: Vec<StreamGrads> = streams
        .iter()
        .map(|_| StreamGrads {
            d_b: Tensor3::zeros(steps, n, p),
            d_c: Tensor3::zeros(steps, n, p),
            d_x: Matrix::zeros(steps, p),
        })
        .collect();
    let mut inj = vec![0.0; n * p];
    for t in 0..steps {
        let du = d_u.slice(t);
        let dc = d_c.slice(t);
        for &e in plan.active(t) {
            let s = &streams[e];
            let w = plan.weight(t, e);
            s.injection_into(t, &mut inj);
            d_pi[(t, e)] = dot(&inj, du) + dot(s.c.slice(t), dc);

            let g = &mut grads[e];
            let xt = s.x.row(t);
            let bt = s.b.slice(t);
            for r in 0..n {
                for ch in 0..p {
                    let i = r * p + ch;
                    g.d_b.slice_mut(t)[i] = w * du[i] * xt[ch];
                    g.d_x[(t, ch)] += w * du[i] * bt[i];
                }
            }
            for (o, &v) in g.d_c.slice_mut(t).iter_mut().zip(dc) {
                *o = w * v;
            }
        }
    }
    Ok((d_pi, grads))
}

/// Trainable pieces of the mixed layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub experts: ExpertParams,
    pub router: RouterParams,
    pub transition: Transition,
    pub h0: Vec<f64>,
    pub k: usize,
}

impl MoeLayer {
    /// Seeded layer with a contractive transition (`‖A‖ = rho`).
    pub fn random(seed: u64, n: usize, p: usize, e: usize, k: usize, rho: f64) -> Result<Self> {
        let experts = ExpertParams::random(seed, n, p, e, 1.0)?;
        let mut rng = substream(seed, 0x7A);
        let weight = Matrix::from_vec(e, p, normal_vec(&mut rng, e * p, 1.0 / (p as f64).sqrt()))?;
        let bias = normal_vec(&mut rng, e, 0.1);
        let router = RouterParams::new(weight, Some(bias))?;
        let mut a = Matrix::from_vec(n, n, normal_vec(&mut rng, n * n, 1.0))?;
        let norm = crate::spectral::spectral_norm(&a, 1e-12)?;
        a.scale(rho / norm);
        let h0 = normal_vec(&mut rng, n * p, 0.5);
        Ok(Self {
            experts,
            router,
            transition: Transition::Dense(a),
            h0,
            k,
        })
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerForward {
    pub logits: Matrix,
    pub plan: RoutingPlan,
    pub streams: Vec<StreamSet>,
    pub mixed: MixedStreams,
    pub scan: ScanOutput,
}

impl LayerForward {
    pub fn y(&self) -> &Matrix {
        &self.scan.y
    }
}

pub fn layer_forward(layer: &MoeLayer, x: &SequenceBatch) -> Result<LayerForward> {
    let logits = router_logits(&layer.router, x)?;
    let plan = topk_mask(&crate::router::softmax_route(&logits)?, layer.k)?;
    let streams = expert_streams_active(&layer.experts, x, &plan)?;
    let mixed = mix_streams(&streams, &plan)?;
    let scan = ssm_scan_sequential(
        &layer.transition,
        &mixed.u,
        &mixed.c,
        Some(&layer.h0),
        ScanOptions { record: true },
    )?;
    Ok(LayerForward {
        logits,
        plan,
        streams,
        mixed,
        scan,
    })
}

/// Every gradient of a scalar loss through the mixed layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_u_tilde: Tensor3,
    pub d_c_tilde: Tensor3,
    pub d_transition: Vec<f64>,
    pub d_pi: Matrix,
    pub d_logits: Matrix,
    pub d_router: RouterParams,
    pub d_experts: Vec<ExpertProjection>,
    pub d_h0: Vec<f64>,
}

/// Full backward pass given `dL/dY`.
pub fn layer_backward(layer: &MoeLayer, x: &SequenceBatch, fwd: &LayerForward, dy: &Matrix) -> Result<GradBundle> {
    let scan = backward_ssm(fwd.scan.trajectory.as_ref(), &layer.transition, &fwd.mixed.c, dy)?;
    let (d_pi, stream_grads) = backward_mixing(&fwd.streams, &fwd.plan, &scan.d_u, &scan.d_c)?;

    let (steps, e) = (x.steps(), layer.experts.num_experts());
    let (n, p) = (layer.experts.state_size(), layer.experts.channels());

    // Softmax adjoint restricted to the retained entries.
    let mut d_logits = Matrix::zeros(steps, e);
    let mut probs = vec![0.0; e];
    for t in 0..steps {
        probs.copy_from_slice(fwd.logits.row(t));
        softmax_row(&mut probs);
        let row = d_pi.row(t);
        let inner: f64 = fwd.plan.active(t).iter().map(|&j| row[j] * probs[j]).sum();
        for &j in fwd.plan.active(t) {
            d_logits[(t, j)] += probs[j] * row[j];
        }
        for j in 0..e {
            d_logits[(t, j)] -= probs[j] * inner;
        }
    }
    let mut d_router = RouterParams {
        weight: Matrix::zeros(e, p),
        bias: vec![0.0; e],
    };
    for t in 0..steps {
        for j in 0..e {
            let g = d_logits[(t, j)];
            axpy(g, x.token(t), d_router.weight.row_mut(j));
            d_router.bias[j] += g;
        }
    }

    let mut d_experts = vec![ExpertProjection::zeros(n, p); e];
    let mut db = vec![0.0; n];
    let mut dc = vec![0.0; n];
    for (ex, g) in stream_grads.iter().enumerate() {
        let d = &mut d_experts[ex];
        for t in 0..steps {
            if fwd.plan.active(t).binary_search(&ex).is_err() {
                continue;
            }
            // B and C are broadcast over channels: sum their cotangents over p.
            for r in 0..n {
                db[r] = g.d_b.slice(t)[r * p..(r + 1) * p].iter().sum();
                dc[r] = g.d_c.slice(t)[r * p..(r + 1) * p].iter().sum();
            }
            let token = x.token(t);
            for r in 0..n {
                axpy(db[r], token, d.wb.row_mut(r));
                d.bias_b[r] += db[r];
                axpy(dc[r], token, d.wc.row_mut(r));
                d.bias_c[r] += dc[r];
            }
            let dx = g.d_x.row(t);
            for q in 0..p {
                axpy(dx[q], token, d.wx.row_mut(q));
                d.bias_x[q] += dx[q];
            }
        }
    }

    Ok(GradBundle {
        d_u_tilde: scan.d_u,
        d_c_tilde: scan.d_c,
        d_transition: scan.d_transition,
        d_pi,
        d_logits,
        d_router,
        d_experts,
        d_h0: scan.d_h0,
    })
}

/// Scalar reductions of the layer output.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// `½ Σ Y²`
    HalfSquared,
    /// Ignores `Y`.
    Constant(f64),
    /// `⟨W, Y⟩`
    Linear(Matrix),
}

impl Loss {
    pub fn value(&self, y: &Matrix) -> f64 {
        match self {
            Loss::HalfSquared => 0.5 * y.as_slice().iter().map(|v| v * v).sum::<f64>(),
            Loss::Constant(c) => *c,
            Loss::Linear(w) => dot(w.as_slice(), y.as_slice()),
        }
    }

    pub fn grad(&self, y: &Matrix) -> Matrix {
        match self {
            Loss::HalfSquared => y.clone(),
            Loss::Constant(_) => Matrix::zeros(y.rows(), y.cols()),
            Loss::Linear(w) => w.clone(),
        }
    }
}

/// Parameter groups probed by the finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Transition,
    InitialState,
    /// Router weight then bias.
    Router,
    /// Every expert's `W_b` then bias, expert-major.
    ProjB,
    ProjC,
    ProjX,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Transition,
        ParamGroup::InitialState,
        ParamGroup::Router,
        ParamGroup::ProjB,
        ParamGroup::ProjC,
        ParamGroup::ProjX,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Transition => "transition",
            ParamGroup::InitialState => "h0",
            ParamGroup::Router => "router",
            ParamGroup::ProjB => "proj_b",
            ParamGroup::ProjC => "proj_c",
            ParamGroup::ProjX => "proj_x",
        }
    }
}

fn expert_slots(ex: &mut ExpertProjection, group: ParamGroup) -> [&mut [f64]; 2] {
    match group {
        ParamGroup::ProjB => [ex.wb.as_mut_slice(), &mut ex.bias_b],
        ParamGroup::ProjC => [ex.wc.as_mut_slice(), &mut ex.bias_c],
        ParamGroup::ProjX => [ex.wx.as_mut_slice(), &mut ex.bias_x],
        _ => unreachable!("not an expert group"),
    }
}

/// Mutable flat view of a parameter group.
fn group_slots(layer: &mut MoeLayer, group: ParamGroup) -> Vec<&mut [f64]> {
    match group {
        ParamGroup::Transition => vec![layer.transition.params_mut()],
        ParamGroup::InitialState => vec![&mut layer.h0],
        ParamGroup::Router => vec![layer.router.weight.as_mut_slice(), &mut layer.router.bias],
        g => layer
            .experts
            .experts_mut()
            .iter_mut()
            .flat_map(|ex| expert_slots(ex, g))
            .collect(),
    }
}

fn group_len(layer: &mut MoeLayer, group: ParamGroup) -> usize {
    group_slots(layer, group).iter().map(|s| s.len()).sum()
}

fn group_entry(layer: &mut MoeLayer, group: ParamGroup, mut idx: usize) -> &mut f64 {
    for slot in group_slots(layer, group) {
        if idx < slot.len() {
            return &mut slot[idx];
        }
        idx -= slot.len();
    }
    panic!("parameter index out of range")
}

/// Analytic gradient of a group, flattened in the same order.
pub fn group_gradient(grads: &GradBundle, group: ParamGroup) -> Vec<f64> {
    match group {
        ParamGroup::Transition => grads.d_transition.clone(),
        ParamGroup::InitialState => grads.d_h0.clone(),
        ParamGroup::Router => {
            let mut v = grads.d_router.weight.as_slice().to_vec();
            v.extend_from_slice(&grads.d_router.bias);
            v
        }
        g => {
            let mut v = Vec::new();
            for ex in &grads.d_experts {
                let mut ex = ex.clone();
                for s in expert_slots(&mut ex, g) {
                    v.extend_from_slice(s);
                }
            }
            v
        }
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub probed: usize,
    pub rejected: usize,
    pub max_rel_error: f64,
    pub max_abs_numeric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_FD_STEP,
            samples: 50,
            seed: 0,
        }
    }
}

fn active_sets(plan: &RoutingPlan) -> Vec<Vec<usize>> {
    (0..plan.steps()).map(|t| plan.active(t).to_vec()).collect()
}

/// Central-difference check of every requested group against
/// [`layer_backward`]. Up to `samples` distinct coordinates per group are
/// probed (every coordinate when the group is smaller).
pub fn finite_diff_check(
    layer: &MoeLayer,
    x: &SequenceBatch,
    loss: &Loss,
    groups: &[ParamGroup],
    cfg: FdConfig,
) -> Result<Vec<GroupCheck>> {
    if !(cfg.step > 0.0) {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let fwd = layer_forward(layer, x)?;
    let grads = layer_backward(layer, x, &fwd, &loss.grad(fwd.y()))?;
    let base_sets = active_sets(&fwd.plan);
    let mut rng = substream(cfg.seed, 0xFD);
    let mut work = layer.clone();

    let eval = |work: &MoeLayer| -> Result<Option<f64>> {
        let f = layer_forward(work, x)?;
        if active_sets(&f.plan) != base_sets {
            return Ok(None);
        }
        Ok(Some(loss.value(f.y())))
    };

    let mut out = Vec::with_capacity(groups.len());
    for &group in groups {
        let analytic = group_gradient(&grads, group);
        let len = group_len(&mut work, group);
        debug_assert_eq!(len, analytic.len());
        let mut order: Vec<usize> = sample(&mut rng, len, len).into_vec();
        let want = cfg.samples.min(len);
        let (mut probed, mut rejected) = (0, 0);
        let (mut max_rel, mut max_num) = (0.0f64, 0.0f64);
        while probed < want {
            let Some(idx) = order.pop() else { break };
            let orig = *group_entry(&mut work, group, idx);
            *group_entry(&mut work, group, idx) = orig + cfg.step;
            let plus = eval(&work)?;
            *group_entry(&mut work, group, idx) = orig - cfg.step;
            let minus = eval(&work)?;
            *group_entry(&mut work, group, idx) = orig;
            match (plus, minus) {
                (Some(fp), Some(fm)) => {
                    let numeric = (fp - fm) / (2.0 * cfg.step);
                    max_rel = max_rel.max(relative_error(analytic[idx], numeric));
                    max_num = max_num.max(numeric.abs());
                    probed += 1;
                }
                _ => rejected += 1,
            }
        }
        out.push(GroupCheck {
            group,
            probed,
            rejected,
            max_rel_error: max_rel,
            max_abs_numeric: max_num,
        });
    }
    Ok(out)
}

/// Central-difference check of `dL/dπ` from [`backward_mixing`], with the
/// expert streams held fixed and `π` treated as free (dense plan).
pub fn finite_diff_mixing(case: &MoeCase, loss: &Loss, step: f64) -> Result<f64> {
    let base = case.mixed()?;
    let scan = backward_ssm(
        base.scan.trajectory.as_ref(),
        &case.transition,
        &base.mixed.c,
        &loss.grad(base.y()),
    )?;
    let (d_pi, _) = backward_mixing(&case.streams, &case.plan, &scan.d_u, &scan.d_c)?;
    let sets = active_sets(&case.plan);
    let mut worst = 0.0f64;
    for t in 0..case.plan.steps() {
        for &e in case.plan.active(t) {
            let probe = |s: f64| -> Result<f64> {
                let mut pi = case.plan.weights().clone();
                pi[(t, e)] += s;
                let plan = RoutingPlan::from_parts_signed(pi, sets.clone())?;
                let c = MoeCase { plan, ..case.clone() };
                Ok(loss.value(c.mixed()?.y()))
            };
            let numeric = (probe(step)? - probe(-step)?) / (2.0 * step);
            worst = worst.max(relative_error(d_pi[(t, e)], numeric));
        }
    }
    Ok(worst)
}

/// Direction in the primal space of the mixing-plus-scan map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    pub pi: Matrix,
    pub streams: Vec<StreamGrads>,
    pub transition: Vec<f64>,
    pub h0: Vec<f64>,
}

impl Tangent {
    /// Seeded direction; `π` is perturbed relative to its own value so that
    /// small steps keep it nonnegative, and only on active entries.
    pub fn random(case: &MoeCase, seed: u64) -> Self {
        let (steps, n, p, e) = case.dims();
        let mut rng = substream(seed, 0xD0);
        let mut pi = Matrix::zeros(steps, e);
        for t in 0..steps {
            for &j in case.plan.active(t) {
                pi[(t, j)] = case.plan.weight(t, j) * (rng.random::<f64>() - 0.5);
            }
        }
        let streams = (0..e)
            .map(|_| StreamGrads {
                d_b: Tensor3::from_vec(steps, n, p, normal_vec(&mut rng, steps * n * p, 1.0)).unwrap(),
                d_c: Tensor3::from_vec(steps, n, p, normal_vec(&mut rng, steps * n * p, 1.0)).unwrap(),
                d_x: Matrix::from_vec(steps, p, normal_vec(&mut rng, steps * p, 1.0)).unwrap(),
            })
            .collect();
        let transition = normal_vec(&mut rng, case.transition.params().len(), 0.1);
        let h0 = normal_vec(&mut rng, n * p, 1.0);
        Self {
            pi,
            streams,
            transition,
            h0,
        }
    }

    /// `case + s · self`.
    pub fn apply(&self, case: &MoeCase, s: f64) -> Result<MoeCase> {
        let mut pi = case.plan.weights().clone();
        axpy(s, self.pi.as_slice(), pi.as_mut_slice());
        let plan = RoutingPlan::from_parts_signed(pi, active_sets(&case.plan))?;
        let streams = case
            .streams
            .iter()
            .zip(&self.streams)
            .map(|(st, d)| {
                let mut st = st.clone();
                axpy(s, d.d_b.as_slice(), st.b.as_mut_slice());
                axpy(s, d.d_c.as_slice(), st.c.as_mut_slice());
                axpy(s, d.d_x.as_slice(), st.x.as_mut_slice());
                st
            })
            .collect();
        let mut transition = case.transition.clone();
        axpy(s, &self.transition, transition.params_mut());
        let (_, n, p, _) = case.dims();
        let mut h0 = case.h0.clone().unwrap_or_else(|| vec![0.0; n * p]);
        axpy(s, &self.h0, &mut h0);
        Ok(MoeCase {
            transition,
            streams,
            plan,
            h0: Some(h0),
        })
    }

    /// `⟨self, g⟩` against reverse-mode cotangents.
    pub fn inner(&self, d_pi: &Matrix, streams: &[StreamGrads], scan: &ScanGrads) -> f64 {
        let mut acc = dot(self.pi.as_slice(), d_pi.as_slice());
        for (v, g) in self.streams.iter().zip(streams) {
            acc += dot(v.d_b.as_slice(), g.d_b.as_slice());
            acc += dot(v.d_c.as_slice(), g.d_c.as_slice());
            acc += dot(v.d_x.as_slice(), g.d_x.as_slice());
        }
        acc + dot(&self.transition, &scan.d_transition) + dot(&self.h0, &scan.d_h0)
    }
}

/// Directional derivative `J·v` of `Y` by the fourth-order central stencil
/// `[8(f(h) − f(−h)) − (f(2h) − f(−2h))] / 12h`.
pub fn directional_derivative(case: &MoeCase, v: &Tangent, step: f64) -> Result<Matrix> {
    let f = |s: f64| -> Result<Matrix> { Ok(v.apply(case, s)?.mixed()?.scan.y) };
    let (p1, m1, p2, m2) = (f(step)?, f(-step)?, f(2.0 * step)?, f(-2.0 * step)?);
    let data = (0..p1.as_slice().len())
        .map(|i| (8.0 * (p1.as_slice()[i] - m1.as_slice()[i]) - (p2.as_slice()[i] - m2.as_slice()[i])) / (12.0 * step))
        .collect();
    Matrix::from_vec(p1.rows(), p1.cols(), data)
}

/// Forward-mode tangent of `Y` along `v`, propagated exactly through mixing
/// and the recurrence.
pub fn jvp(case: &MoeCase, v: &Tangent) -> Result<Matrix> {
    let (steps, n, p, _) = case.dims();
    let base = case.mixed()?;
    let traj = base.scan.trajectory()?;
    let mut dtr = case.transition.clone();
    dtr.params_mut().copy_from_slice(&v.transition);

    let mut dh = v.h0.clone();
    let mut next = vec![0.0; n * p];
    let mut tmp = vec![0.0; n * p];
    let mut dy = Matrix::zeros(steps, p);
    let mut du = vec![0.0; n * p];
    let mut dc = vec![0.0; n * p];
    for t in 0..steps {
        du.iter_mut().for_each(|x| *x = 0.0);
        dc.iter_mut().for_each(|x| *x = 0.0);
        for &e in case.plan.active(t) {
            let s = &case.streams[e];
            let ds = &v.streams[e];
            let (w, dw) = (case.plan.weight(t, e), v.pi[(t, e)]);
            for r in 0..n {
                for ch in 0..p {
                    let i = r * p + ch;
                    let (b, x) = (s.b.slice(t)[i], s.x[(t, ch)]);
                    du[i] += dw * b * x + w * (ds.d_b.slice(t)[i] * x + b * ds.d_x[(t, ch)]);
                    dc[i] += dw * s.c.slice(t)[i] + w * ds.d_c.slice(t)[i];
                }
            }
        }
        case.transition.apply(t, &dh, p, &mut next);
        dtr.apply(t, traj.state(t), p, &mut tmp);
        for i in 0..n * p {
            next[i] += tmp[i] + du[i];
        }
        std::mem::swap(&mut dh, &mut next);
        let h = traj.state(t + 1);
        let ct = base.mixed.c.slice(t);
        for r in 0..n {
            for ch in 0..p {
                let i = r * p + ch;
                dy[(t, ch)] += dc[i] * h[i] + ct[i] * dh[i];
            }
        }
    }
    Ok(dy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DotProductCheck {
    /// `⟨J v, w⟩` with `J v` from the tangent pass.
    pub forward_tangent: f64,
    /// `⟨J v, w⟩` with `J v` from the directional stencil.
    pub forward_stencil: f64,
    /// `⟨v, Jᵀ w⟩` from the reverse pass.
    pub reverse: f64,
}

impl DotProductCheck {
    pub fn rel_error_tangent(&self) -> f64 {
        rel_gap(self.forward_tangent, self.reverse)
    }

    pub fn rel_error_stencil(&self) -> f64 {
        rel_gap(self.forward_stencil, self.reverse)
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Adjoint consistency `⟨J v, w⟩ = ⟨v, Jᵀ w⟩` for seeded `v`, `w`.
pub fn dot_product_test(case: &MoeCase, seed: u64, stencil_step: f64) -> Result<DotProductCheck> {
    let (steps, _, p, _) = case.dims();
    let v = Tangent::random(case, seed);
    let w = Matrix::from_vec(steps, p, normal_vec(&mut substream(seed, 0xD1), steps * p, 1.0))?;

    let base = case.mixed()?;
    let scan = backward_ssm(base.scan.trajectory.as_ref(), &case.transition, &base.mixed.c, &w)?;
    let (d_pi, sg) = backward_mixing(&case.streams, &case.plan, &scan.d_u, &scan.d_c)?;
    Ok(DotProductCheck {
        forward_tangent: dot(jvp(case, &v)?.as_slice(), w.as_slice()),
        forward_stencil: dot(directional_derivative(case, &v, stencil_step)?.as_slice(), w.as_slice()),
        reverse: v.inner(&d_pi, &sg, &scan),
    })
}

/// `dL/dπ_e` for a shared time-invariant weight vector, through the mixed
/// design (summing per-step adjoints) and through the separated design.
pub fn time_invariant_pi_gradients(case: &MoeCase, loss: &Loss) -> Result<(Vec<f64>, Vec<f64>)> {
    let (steps, _, _, e) = case.dims();
    let mix = case.mixed()?;
    let scan = backward_ssm(
        mix.scan.trajectory.as_ref(),
        &case.transition,
        &mix.mixed.c,
        &loss.grad(mix.y()),
    )?;
    let (d_pi, _) = backward_mixing(&case.streams, &case.plan, &scan.d_u, &scan.d_c)?;
    let mixed: Vec<f64> = (0..e).map(|j| (0..steps).map(|t| d_pi[(t, j)]).sum()).collect();

    let sep = case.separated()?;
    let dy = loss.grad(&sep.y);
    let separated = (0..e)
        .map(|j| dot(sep.experts[j].y.as_slice(), dy.as_slice()))
        .collect();
    Ok((mixed, separated))
}

/// Component of `g` along the sum-zero subspace, i.e. the part seen by
/// perturbations that keep `Σ_e π_e` fixed.
///
/// In the equality regime the mixed readout `C̃ = (Σ_e π_e) C` also depends
/// on `π`, so the unconstrained mixed gradient exceeds the separated one by
/// `⟨dY, Y⟩` in every coordinate. The two agree after this projection.
pub fn project_sum_zero(g: &[f64]) -> Vec<f64> {
    let mean = g.iter().sum::<f64>() / g.len().max(1) as f64;
    g.iter().map(|v| v - mean).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_traj(states: &[f64]) -> StateTrajectory {
        StateTrajectory::from_tensor(Tensor3::from_vec(states.len(), 1, 1, states.to_vec()).unwrap())
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let traj = scalar_traj(&[0.3, 1.0, 2.0]);
        let c = Tensor3::from_vec(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let g = backward_ssm(Some(&traj), &Transition::Diagonal(vec![0.5]), &c, &Matrix::zeros(2, 1)).unwrap();
        assert!(g.d_u.as_slice().iter().chain(g.d_c.as_slice()).all(|&v| v == 0.0));
        assert_eq!(g.d_transition, vec![0.0]);
        assert_eq!(g.d_h0, vec![0.0]);
    }

    #[test]
    fn memoryless_adjoint() {
        let traj = StateTrajectory::from_tensor(Tensor3::zeros(3, 2, 1));
        let c = Tensor3::from_vec(2, 2, 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let dy = Matrix::from_vec(2, 1, vec![2.0, -1.0]).unwrap();
        let g = backward_ssm(Some(&traj), &Transition::Dense(Matrix::zeros(2, 2)), &c, &dy).unwrap();
        assert_eq!(g.d_u.as_slice(), &[2.0, -4.0, -0.5, -3.0]);
    }

    #[test]
    fn two_step_scalar_chain_rule() {
        // h1 = a h0 + u1, h2 = a h1 + u2, L = c1 y1 ... with y_t = c_t h_t, dY = (g1, g2).
        let (a, h0, u1, u2, c1, c2, g1, g2) = (0.7, 0.4, 1.0, -0.5, 2.0, 3.0, 1.5, -2.0);
        let h1 = a * h0 + u1;
        let h2 = a * h1 + u2;
        let traj = scalar_traj(&[h0, h1, h2]);
        let c = Tensor3::from_vec(2, 1, 1, vec![c1, c2]).unwrap();
        let dy = Matrix::from_vec(2, 1, vec![g1, g2]).unwrap();
        let g = backward_ssm(Some(&traj), &Transition::Diagonal(vec![a]), &c, &dy).unwrap();
        // L = g1 c1 h1 + g2 c2 (a h1 + u2)
        let dl_dh2 = g2 * c2;
        let dl_dh1 = g1 * c1 + a * dl_dh2;
        assert!((g.d_u.as_slice()[1] - dl_dh2).abs() < 1e-15);
        assert!((g.d_u.as_slice()[0] - dl_dh1).abs() < 1e-15);
        assert!((g.d_h0[0] - a * dl_dh1).abs() < 1e-15);
        let dl_da = dl_dh2 * h1 + dl_dh1 * h0;
        assert!((g.d_transition[0] - dl_da).abs() < 1e-15);
        assert_eq!(g.d_c.as_slice(), &[h1 * g1, h2 * g2]);
    }

    #[test]
    fn missing_trajectory_is_rejected() {
        let c = Tensor3::zeros(1, 1, 1);
        assert!(matches!(
            backward_ssm(None, &Transition::Diagonal(vec![0.5]), &c, &Matrix::zeros(1, 1)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn single_expert_identity_mixing_passes_cotangents_through() {
        let s = StreamSet::new(
            Tensor3::from_vec(1, 2, 1, vec![1.0, 2.0]).unwrap(),
            Tensor3::from_vec(1, 2, 1, vec![3.0, 4.0]).unwrap(),
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        )
        .unwrap();
        let plan = RoutingPlan::time_invariant(&[1.0], 1).unwrap();
        let du = Tensor3::from_vec(1, 2, 1, vec![0.5, -1.0]).unwrap();
        let dc = Tensor3::from_vec(1, 2, 1, vec![2.0, 0.25]).unwrap();
        let (d_pi, g) = backward_mixing(&[s], &plan, &du, &dc).unwrap();
        assert_eq!(g[0].d_b, du);
        assert_eq!(g[0].d_c, dc);
        assert_eq!(d_pi[(0, 0)], 0.5 - 2.0 + 6.0 + 1.0);
    }

    #[test]
    fn zero_cotangents_in_mixing() {
        let s = StreamSet::zeros(2, 1, 1);
        let plan = RoutingPlan::time_invariant(&[0.3, 0.7], 2).unwrap();
        let z = Tensor3::zeros(2, 1, 1);
        let (d_pi, g) = backward_mixing(&[s.clone(), s], &plan, &z, &z).unwrap();
        assert!(d_pi.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.iter().all(|g| g.d_x.as_slice().iter().all(|&v| v == 0.0)));
    }
}
