//! Deterministic random test instances.
//!
//! Every stream is drawn from its own ChaCha sub-stream keyed by
//! `(seed, stream id)`, so instances do not depend on generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::router::{route, RouterParams, RoutingPlan};
use crate::spectral::spectral_norm;
use crate::tensor::{Matrix, Tensor3};
use crate::types::{SequenceBatch, StreamSet, Transition, TransitionKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub t: usize,
    pub n: usize,
    pub p: usize,
    pub e: usize,
    pub k: usize,
}

impl Dims {
    pub fn new(t: usize, n: usize, p: usize, e: usize, k: usize) -> Self {
        Self { t, n, p, e, k }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.n == 0 || self.p == 0 || self.e == 0 {
            return Err(Error::InvalidInput(format!("dimensions must be positive: {self:?}")));
        }
        if self.k == 0 || self.k > self.e {
            return Err(Error::InvalidInput(format!("k must be in 1..=E: {self:?}")));
        }
        Ok(())
    }
}

/// Standard deviations of the generated streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamScales {
    pub x: f64,
    pub transition: f64,
    pub b: f64,
    pub c: f64,
    pub x_inj: f64,
    pub router: f64,
}

impl StreamScales {
    pub fn unit() -> Self {
        Self::uniform(1.0)
    }

    pub fn uniform(s: f64) -> Self {
        Self {
            x: s,
            transition: s,
            b: s,
            c: s,
            x_inj: s,
            router: s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngInstanceSpec {
    pub seed: u64,
    pub dims: Dims,
    pub scales: StreamScales,
    /// Target induced 2-norm of the generated transition, in `(0, 1)`.
    pub rho_target: Option<f64>,
    pub transition: TransitionKind,
}

impl RngInstanceSpec {
    pub fn new(seed: u64, dims: Dims) -> Self {
        Self {
            seed,
            dims,
            scales: StreamScales::unit(),
            rho_target: Some(0.9),
            transition: TransitionKind::Dense,
        }
    }

    pub fn with_transition(mut self, kind: TransitionKind) -> Self {
        self.transition = kind;
        self
    }

    pub fn with_rho(mut self, rho: Option<f64>) -> Self {
        self.rho_target = rho;
        self
    }

    pub fn with_scales(mut self, scales: StreamScales) -> Self {
        self.scales = scales;
        self
    }
}

/// A full MoE–SSM problem: tokens, shared transition, per-expert streams and
/// router weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub x: SequenceBatch,
    pub transition: Transition,
    pub streams: Vec<StreamSet>,
    pub router: RouterParams,
    pub k: usize,
}

impl Instance {
    pub fn dims(&self) -> Dims {
        let (t, n, p) = self.streams[0].dims();
        Dims::new(t, n, p, self.streams.len(), self.k)
    }

    /// Router softmax with top-`k` masking (`k = E` is dense).
    pub fn plan(&self) -> Result<RoutingPlan> {
        route(&self.router, &self.x, self.k)
    }
}

const STREAM_X: u64 = 1;
const STREAM_TRANSITION: u64 = 2;
const STREAM_ROUTER: u64 = 3;
const STREAM_EXPERT_BASE: u64 = 1 << 16;

/// Independent generator for sub-stream `id` of `seed`.
pub fn substream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn normal_vec(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn expert_stream(seed: u64, e: usize, which: u64) -> ChaCha8Rng {
    substream(seed, STREAM_EXPERT_BASE + 4 * e as u64 + which)
}

pub fn generate_instance(spec: &RngInstanceSpec) -> Result<Instance> {
    let d = spec.dims;
    d.validate()?;
    if let Some(rho) = spec.rho_target {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidInput(format!("rho_target must lie in (0, 1), got {rho}")));
        }
    }
    let s = spec.scales;
    if [s.x, s.transition, s.b, s.c, s.x_inj, s.router]
        .iter()
        .any(|v| !(v.is_finite() && *v >= 0.0))
    {
        return Err(Error::InvalidInput("scales must be finite and nonnegative".into()));
    }

    let x = SequenceBatch::from_vec(
        d.t,
        d.p,
        normal_vec(&mut substream(spec.seed, STREAM_X), d.t * d.p, s.x),
    )?;

    let transition = generate_transition(spec)?;

    let streams = (0..d.e)
        .map(|e| {
            let b = normal_vec(&mut expert_stream(spec.seed, e, 0), d.t * d.n * d.p, s.b);
            let c = normal_vec(&mut expert_stream(spec.seed, e, 1), d.t * d.n * d.p, s.c);
            let xi = normal_vec(&mut expert_stream(spec.seed, e, 2), d.t * d.p, s.x_inj);
            StreamSet::new(
                Tensor3::from_vec(d.t, d.n, d.p, b)?,
                Tensor3::from_vec(d.t, d.n, d.p, c)?,
                Matrix::from_vec(d.t, d.p, xi)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = substream(spec.seed, STREAM_ROUTER);
    let weight = Matrix::from_vec(d.e, d.p, normal_vec(&mut rng, d.e * d.p, s.router))?;
    let router = RouterParams::new(weight, None)?;

    Ok(Instance {
        x,
        transition,
        streams,
        router,
        k: d.k,
    })
}

fn generate_transition(spec: &RngInstanceSpec) -> Result<Transition> {
    let d = spec.dims;
    let scale = spec.scales.transition;
    let mut rng = substream(spec.seed, STREAM_TRANSITION);
    Ok(match spec.transition {
        TransitionKind::Dense => {
            let mut a = Matrix::from_vec(d.n, d.n, normal_vec(&mut rng, d.n * d.n, scale))?;
            if let Some(rho) = spec.rho_target {
                let norm = spectral_norm(&a, 1e-12)?;
                if norm > 0.0 {
                    a.scale(rho / norm);
                }
            }
            Transition::Dense(a)
        }
        TransitionKind::Diagonal => {
            let mut a = normal_vec(&mut rng, d.n, scale);
            if let Some(rho) = spec.rho_target {
                let norm = crate::tensor::max_abs(&a);
                if norm > 0.0 {
                    a.iter_mut().for_each(|v| *v *= rho / norm);
                }
            }
            Transition::Diagonal(a)
        }
        TransitionKind::ScalarPerStep => {
            // Decays in (0, rho]; scale is unused for per-step decays.
            let rho = spec.rho_target.unwrap_or(1.0);
            Transition::ScalarPerStep((0..d.t).map(|_| rho * (1.0 - rng.random::<f64>())).collect())
        }
    })
}
