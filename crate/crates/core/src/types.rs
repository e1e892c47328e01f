//! Domain containers: token batches, structured transitions, expert streams
//! and recorded state trajectories.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{check_finite, Matrix, Tensor3};

/// Token features `X` of shape `T × P`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    x: Matrix,
}

impl SequenceBatch {
    pub fn new(x: Matrix) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::InvalidInput(format!(
                "sequence batch needs T >= 1 and P >= 1, got {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        check_finite("sequence batch", x.as_slice())?;
        Ok(Self { x })
    }

    pub fn from_vec(steps: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Matrix::from_vec(steps, channels, data)?)
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.x.rows()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.x.cols()
    }

    /// `X_t`, the feature vector of step `t`.
    #[inline]
    pub fn token(&self, t: usize) -> &[f64] {
        self.x.row(t)
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix {
        &self.x
    }
}

/// The state transition `A`, in one of the supported structured forms.
#[derive(Debug, Clone, PartialEq)]
pub enum Transition {
    /// Static dense `N × N` matrix shared by every step.
    Dense(Matrix),
    /// Static diagonal, one decay per state coordinate.
    Diagonal(Vec<f64>),
    /// One scalar per step multiplying the whole state (`A_t = a_t I`).
    ScalarPerStep(Vec<f64>),
}

impl Transition {
    /// State size fixed by the transition, if any.
    pub fn state_size(&self) -> Option<usize> {
        match self {
            Transition::Dense(a) => Some(a.rows()),
            Transition::Diagonal(a) => Some(a.len()),
            Transition::ScalarPerStep(_) => None,
        }
    }

    pub fn kind(&self) -> TransitionKind {
        match self {
            Transition::Dense(_) => TransitionKind::Dense,
            Transition::Diagonal(_) => TransitionKind::Diagonal,
            Transition::ScalarPerStep(_) => TransitionKind::ScalarPerStep,
        }
    }

    /// Checks compatibility with a `T`-step recurrence of state size `n`.
    pub fn validate(&self, steps: usize, n: usize) -> Result<()> {
        match self {
            Transition::Dense(a) => {
                if a.rows() != n || a.cols() != n {
                    return Err(shape_err(
                        "dense transition",
                        format!("{n}x{n}"),
                        format!("{}x{}", a.rows(), a.cols()),
                    ));
                }
                check_finite("transition", a.as_slice())
            }
            Transition::Diagonal(a) => {
                if a.len() != n {
                    return Err(shape_err("diagonal transition", n, a.len()));
                }
                check_finite("transition", a)
            }
            Transition::ScalarPerStep(a) => {
                if a.len() != steps {
                    return Err(shape_err("per-step transition", steps, a.len()));
                }
                check_finite("transition", a)
            }
        }
    }

    /// `out = A_t · h` for an `N × P` state stored row-major.
    #[inline]
    pub fn apply(&self, step: usize, h: &[f64], p: usize, out: &mut [f64]) {
        match self {
            Transition::Dense(a) => {
                let n = a.rows();
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    let orow = &mut out[i * p..(i + 1) * p];
                    let arow = a.row(i);
                    for (j, &aij) in arow.iter().enumerate() {
                        if aij != 0.0 {
                            let hrow = &h[j * p..(j + 1) * p];
                            for (o, &hv) in orow.iter_mut().zip(hrow) {
                                *o += aij * hv;
                            }
                        }
                    }
                }
            }
            Transition::Diagonal(a) => {
                for (i, &ai) in a.iter().enumerate() {
                    for (o, &hv) in out[i * p..(i + 1) * p].iter_mut().zip(&h[i * p..(i + 1) * p]) {
                        *o = ai * hv;
                    }
                }
            }
            Transition::ScalarPerStep(a) => {
                let at = a[step];
                for (o, &hv) in out.iter_mut().zip(h) {
                    *o = at * hv;
                }
            }
        }
    }

    /// `out = A_tᵀ · h`.
    #[inline]
    pub fn apply_transpose(&self, step: usize, h: &[f64], p: usize, out: &mut [f64]) {
        match self {
            Transition::Dense(a) => {
                let n = a.rows();
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    let hrow = &h[i * p..(i + 1) * p];
                    for (j, &aij) in a.row(i).iter().enumerate() {
                        if aij != 0.0 {
                            for (o, &hv) in out[j * p..(j + 1) * p].iter_mut().zip(hrow) {
                                *o += aij * hv;
                            }
                        }
                    }
                }
            }
            // Diagonal and scalar transitions are symmetric.
            _ => self.apply(step, h, p, out),
        }
    }

    /// Dense `N × N` matrix of `A_t`.
    pub fn to_dense(&self, step: usize, n: usize) -> Matrix {
        match self {
            Transition::Dense(a) => a.clone(),
            Transition::Diagonal(a) => Matrix::from_diagonal(a),
            Transition::ScalarPerStep(a) => {
                let mut m = Matrix::identity(n);
                m.scale(a[step]);
                m
            }
        }
    }

    /// Induced 2-norm bound `max_t ‖A_t‖₂`.
    pub fn operator_norm(&self, tol: f64) -> Result<f64> {
        match self {
            Transition::Dense(a) => crate::spectral::spectral_norm(a, tol),
            Transition::Diagonal(a) | Transition::ScalarPerStep(a) => {
                check_finite("transition", a)?;
                Ok(crate::tensor::max_abs(a))
            }
        }
    }

    /// Same structure with every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Transition {
        match self {
            Transition::Dense(a) => {
                let mut a = a.clone();
                a.scale(c);
                Transition::Dense(a)
            }
            Transition::Diagonal(a) => Transition::Diagonal(a.iter().map(|v| v * c).collect()),
            Transition::ScalarPerStep(a) => Transition::ScalarPerStep(a.iter().map(|v| v * c).collect()),
        }
    }

    /// Flat parameter view, used by gradient checks.
    pub fn params(&self) -> &[f64] {
        match self {
            Transition::Dense(a) => a.as_slice(),
            Transition::Diagonal(a) | Transition::ScalarPerStep(a) => a,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Transition::Dense(a) => a.as_mut_slice(),
            Transition::Diagonal(a) | Transition::ScalarPerStep(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransitionKind {
    Dense,
    Diagonal,
    ScalarPerStep,
}

impl std::str::FromStr for TransitionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(TransitionKind::Dense),
            "diagonal" | "diag" => Ok(TransitionKind::Diagonal),
            "scalar" => Ok(TransitionKind::ScalarPerStep),
            other => Err(Error::InvalidInput(format!("unknown transition kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for TransitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransitionKind::Dense => "dense",
            TransitionKind::Diagonal => "diagonal",
            TransitionKind::ScalarPerStep => "scalar",
        })
    }
}

/// Per-expert selective streams: injection `B_t`, readout `C_t` (both
/// `N × P` per step) and the injected input `X_t^{(e)}` (length `P`).
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSet {
    pub b: Tensor3,
    pub c: Tensor3,
    pub x: Matrix,
}

impl StreamSet {
    pub fn new(b: Tensor3, c: Tensor3, x: Matrix) -> Result<Self> {
        let s = Self { b, c, x };
        s.validate()?;
        Ok(s)
    }

    pub fn zeros(steps: usize, n: usize, p: usize) -> Self {
        Self {
            b: Tensor3::zeros(steps, n, p),
            c: Tensor3::zeros(steps, n, p),
            x: Matrix::zeros(steps, p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b.dims() != self.c.dims() {
            return Err(shape_err(
                "readout stream",
                format!("{:?}", self.b.dims()),
                format!("{:?}", self.c.dims()),
            ));
        }
        let (t, _, p) = self.b.dims();
        if self.x.rows() != t || self.x.cols() != p {
            return Err(shape_err(
                "injected input",
                format!("{t}x{p}"),
                format!("{}x{}", self.x.rows(), self.x.cols()),
            ));
        }
        check_finite("injection stream", self.b.as_slice())?;
        check_finite("readout stream", self.c.as_slice())?;
        check_finite("injected input", self.x.as_slice())
    }

    /// `(T, N, P)`.
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        self.b.dims()
    }

    /// Writes the injection `u_{t,·,p} = B_{t,·,p} · x_{t,p}` into `out`.
    #[inline]
    pub fn injection_into(&self, t: usize, out: &mut [f64]) {
        let p = self.b.p();
        let xt = self.x.row(t);
        for (row_out, row_b) in out.chunks_exact_mut(p).zip(self.b.slice(t).chunks_exact(p)) {
            for ((o, &b), &x) in row_out.iter_mut().zip(row_b).zip(xt) {
                *o = b * x;
            }
        }
    }

    /// Materialized injection tensor `U_t = B_t X_t` (channelwise).
    pub fn injection(&self) -> Tensor3 {
        let (t, n, p) = self.dims();
        let mut u = Tensor3::zeros(t, n, p);
        for s in 0..t {
            self.injection_into(s, u.slice_mut(s));
        }
        u
    }
}

/// Recorded states `h_0 .. h_T`, each an `N × P` slice.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    states: Tensor3,
}

impl StateTrajectory {
    pub(crate) fn from_tensor(states: Tensor3) -> Self {
        Self { states }
    }

    /// Number of recurrence steps `T` (the tensor holds `T + 1` states).
    #[inline]
    pub fn steps(&self) -> usize {
        self.states.steps() - 1
    }

    /// `h_t`; `t = 0` is the initial state.
    #[inline]
    pub fn state(&self, t: usize) -> &[f64] {
        self.states.slice(t)
    }

    #[inline]
    pub fn tensor(&self) -> &Tensor3 {
        &self.states
    }

    /// Scalars stored per recorded step (`N · P`).
    #[inline]
    pub fn state_len(&self) -> usize {
        self.states.slice_len()
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.steps())
    }
}
