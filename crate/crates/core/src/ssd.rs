//! Chunked semiseparable evaluation for per-step scalar decays.
//!
//! For `A_t = a_t I` the sequence map is a lower-triangular matrix per channel,
//! `M_{ij} = c_iᵀ b_j ∏_{k=j+1}^{i} a_k`. The chunked kernel evaluates the
//! diagonal blocks of `M` as masked matmuls and carries the state across
//! chunk boundaries with a short linear recurrence.

use crate::error::{shape_err, Error, Result};
use crate::ssm::{check_h0, injection_tensor, ssm_scan_sequential, ScanOptions};
use crate::tensor::{dot, Matrix};
use crate::types::{SequenceBatch, StreamSet, Transition};

pub const DEFAULT_CHUNK: usize = 32;
pub const MATERIALIZE_LIMIT: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    chunk: usize,
    starts: Vec<usize>,
    steps: usize,
}

impl ChunkPlan {
    pub fn new(steps: usize, chunk: usize) -> Result<Self> {
        if chunk == 0 || chunk > steps {
            return Err(Error::InvalidInput(format!(
                "chunk length must be in 1..={steps}, got {chunk}"
            )));
        }
        Ok(Self {
            chunk,
            starts: (0..steps).step_by(chunk).collect(),
            steps,
        })
    }

    #[inline]
    pub fn chunk_len(&self) -> usize {
        self.chunk
    }

    #[inline]
    pub fn num_chunks(&self) -> usize {
        self.starts.len()
    }

    /// Zero-based start index of each chunk.
    pub fn boundaries(&self) -> &[usize] {
        &self.starts
    }

    pub fn range(&self, m: usize) -> std::ops::Range<usize> {
        let s = self.starts[m];
        s..(s + self.chunk).min(self.steps)
    }
}

/// How decay products inside a chunk are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecayMode {
    /// Running products in linear space.
    #[default]
    Linear,
    /// `exp(Σ ln a)`; requires strictly positive decays.
    Log,
}

fn scalar_decays(transition: &Transition) -> Result<&[f64]> {
    match transition {
        Transition::ScalarPerStep(a) => Ok(a),
        _ => Err(Error::UnsupportedTransition(
            "chunked evaluation needs a per-step scalar transition",
        )),
    }
}

fn check_streams(a: &[f64], streams: &StreamSet) -> Result<()> {
    streams.validate()?;
    let (steps, _, _) = streams.dims();
    if a.len() != steps {
        return Err(shape_err("per-step decays", steps, a.len()));
    }
    crate::tensor::check_finite("decays", a)
}

/// Per-channel `T × T` lower-triangular sequence matrices.
pub fn semiseparable_materialize(transition: &Transition, streams: &StreamSet) -> Result<Vec<Matrix>> {
    let a = scalar_decays(transition)?;
    check_streams(a, streams)?;
    let (steps, n, p) = streams.dims();
    if steps > MATERIALIZE_LIMIT {
        return Err(Error::Size(format!(
            "T = {steps} exceeds the materialization limit {MATERIALIZE_LIMIT}"
        )));
    }
    let mut out = vec![Matrix::zeros(steps, steps); p];
    let mut ci = vec![0.0; n];
    let mut bj = vec![0.0; n];
    for i in 0..steps {
        let mut decay = 1.0;
        for j in (0..=i).rev() {
            if j < i {
                decay *= a[j + 1];
            }
            for (ch, m) in out.iter_mut().enumerate() {
                for s in 0..n {
                    ci[s] = streams.c.get(i, s, ch);
                    bj[s] = streams.b.get(j, s, ch);
                }
                m[(i, j)] = dot(&ci, &bj) * decay;
            }
        }
    }
    Ok(out)
}

/// Applies per-channel sequence matrices to `x`: `Y_{·,p} = M_p x_{·,p}`.
pub fn apply_materialized(ms: &[Matrix], x: &Matrix) -> Matrix {
    let steps = x.rows();
    let mut y = Matrix::zeros(steps, ms.len());
    for (ch, m) in ms.iter().enumerate() {
        let col: Vec<f64> = (0..steps).map(|t| x[(t, ch)]).collect();
        for (t, v) in m.matvec(&col).into_iter().enumerate() {
            y[(t, ch)] = v;
        }
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsdOutput {
    pub y: Matrix,
    pub final_state: Vec<f64>,
    /// State after each chunk (`N × P`, one per chunk).
    pub chunk_states: Vec<Vec<f64>>,
}

/// Chunked scan over `(a, B, C)` driven by `x`; matches the sequential scan.
pub fn ssd_chunked(
    transition: &Transition,
    streams: &StreamSet,
    x: &SequenceBatch,
    plan: &ChunkPlan,
    h0: Option<&[f64]>,
    mode: DecayMode,
) -> Result<SsdOutput> {
    let a = scalar_decays(transition)?;
    check_streams(a, streams)?;
    let (steps, n, p) = streams.dims();
    if x.steps() != steps || x.channels() != p {
        return Err(shape_err(
            "sequence batch",
            format!("{steps}x{p}"),
            format!("{}x{}", x.steps(), x.channels()),
        ));
    }
    if plan.steps != steps {
        return Err(shape_err("chunk plan length", steps, plan.steps));
    }
    if mode == DecayMode::Log && a.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidInput("log-space decays need a_t > 0".into()));
    }
    if plan.chunk_len() == 1 {
        // Unit chunks have no intra-chunk block: this is the plain recurrence.
        let u = injection_tensor(&streams.b, x.matrix());
        let out = ssm_scan_sequential(transition, &u, &streams.c, h0, ScanOptions { record: true })?;
        let traj = out.trajectory()?;
        let chunk_states = (1..=steps).map(|t| traj.state(t).to_vec()).collect();
        return Ok(SsdOutput {
            y: out.y,
            final_state: out.final_state,
            chunk_states,
        });
    }
    let mut h = check_h0(h0, n, p)?;
    let mut y = Matrix::zeros(steps, p);
    let mut chunk_states = Vec::with_capacity(plan.num_chunks());

    let q = plan.chunk_len();
    // seg[i][j] = ∏_{k=j+1}^{i} a_k within a chunk (local indices), lower-triangular.
    let mut seg = vec![0.0; q * q];
    // lead[i] = ∏_{k=s}^{i} a_k: decay from the incoming state to local step i.
    let mut lead = vec![0.0; q];
    let mut gram = vec![0.0; q * q];
    let mut next = vec![0.0; n * p];

    for m in 0..plan.num_chunks() {
        let range = plan.range(m);
        let s = range.start;
        let len = range.len();
        decay_products(&a[range.clone()], mode, &mut seg, &mut lead, q);

        for ch in 0..p {
            // Gram block G_{ij} = c_iᵀ b_j for the channel.
            for i in 0..len {
                for j in 0..=i {
                    let mut g = 0.0;
                    for r in 0..n {
                        g += streams.c.get(s + i, r, ch) * streams.b.get(s + j, r, ch);
                    }
                    gram[i * q + j] = g;
                }
            }
            for i in 0..len {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += gram[i * q + j] * seg[i * q + j] * x.token(s + j)[ch];
                }
                let mut carried = 0.0;
                for r in 0..n {
                    carried += streams.c.get(s + i, r, ch) * h[r * p + ch];
                }
                y[(s + i, ch)] = acc + lead[i] * carried;
            }
        }

        // State handoff: h_end = lead_end · h + Σ_j seg(end, j) b_j x_j.
        let last = len - 1;
        for (v, hv) in next.iter_mut().zip(&h) {
            *v = lead[last] * hv;
        }
        for j in 0..len {
            let w = seg[last * q + j];
            let xt = x.token(s + j);
            let bslice = streams.b.slice(s + j);
            for r in 0..n {
                for ch in 0..p {
                    next[r * p + ch] += w * bslice[r * p + ch] * xt[ch];
                }
            }
        }
        std::mem::swap(&mut h, &mut next);
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: range.end - 1 });
        }
        chunk_states.push(h.clone());
    }

    Ok(SsdOutput {
        y,
        final_state: h,
        chunk_states,
    })
}

fn decay_products(a: &[f64], mode: DecayMode, seg: &mut [f64], lead: &mut [f64], q: usize) {
    let len = a.len();
    match mode {
        DecayMode::Linear => {
            for i in 0..len {
                let mut d = 1.0;
                seg[i * q + i] = 1.0;
                for j in (0..i).rev() {
                    d *= a[j + 1];
                    seg[i * q + j] = d;
                }
                lead[i] = if i == 0 { a[0] } else { lead[i - 1] * a[i] };
            }
        }
        DecayMode::Log => {
            let mut cum = Vec::with_capacity(len);
            let mut acc = 0.0;
            for &v in a {
                acc += v.ln();
                cum.push(acc);
            }
            for i in 0..len {
                for j in 0..=i {
                    seg[i * q + j] = (cum[i] - cum[j]).exp();
                }
                lead[i] = cum[i].exp();
            }
        }
    }
}
