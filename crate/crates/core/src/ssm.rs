//! Reference sequential selective-SSM recurrence and zero-order-hold
//! discretization.
//!
//! Channels follow the channelwise convention: every channel `p` carries its
//! own `N`-dimensional state column, all columns share the transition.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{check_finite, Matrix, Tensor3};
use crate::types::{SequenceBatch, StateTrajectory, StreamSet, Transition};

/// Continuous-time diagonal system and the hold interval `Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationInput {
    pub a: Vec<f64>,
    /// `N × P`.
    pub b: Matrix,
    pub delta: f64,
}

/// Below this `|Δ·a|` the series of `(e^z − 1)/z` replaces the closed form.
pub const ZOH_TAYLOR_THRESHOLD: f64 = 1e-4;

/// `(e^z − 1) / z` with the removable singularity at zero handled.
pub fn expm1_over_z(z: f64) -> f64 {
    if z.abs() > ZOH_TAYLOR_THRESHOLD {
        z.exp_m1() / z
    } else {
        1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0))
    }
}

/// Zero-order hold: `ā_i = exp(Δ a_i)`, `b̄_{i,p} = ((exp(Δ a_i) − 1)/a_i) b_{i,p}`.
pub fn zoh_discretize(inp: &DiscretizationInput) -> Result<(Vec<f64>, Matrix)> {
    if !(inp.delta > 0.0) || !inp.delta.is_finite() {
        return Err(Error::InvalidInput(format!(
            "delta must be positive, got {}",
            inp.delta
        )));
    }
    if inp.b.rows() != inp.a.len() {
        return Err(shape_err("continuous B rows", inp.a.len(), inp.b.rows()));
    }
    check_finite("continuous A", &inp.a)?;
    check_finite("continuous B", inp.b.as_slice())?;

    let mut a_bar = Vec::with_capacity(inp.a.len());
    let mut b_bar = inp.b.clone();
    for (i, &ai) in inp.a.iter().enumerate() {
        let z = inp.delta * ai;
        let decay = z.exp();
        let gain = inp.delta * expm1_over_z(z);
        if !decay.is_finite() || !gain.is_finite() {
            return Err(Error::Overflow { index: i });
        }
        a_bar.push(decay);
        b_bar.row_mut(i).iter_mut().for_each(|v| *v *= gain);
    }
    Ok((a_bar, b_bar))
}

/// Output of a scan: `Y` (`T × P`), the final state and, optionally, the
/// full trajectory `h_0 .. h_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput {
    pub y: Matrix,
    pub final_state: Vec<f64>,
    pub trajectory: Option<StateTrajectory>,
}

impl ScanOutput {
    /// The trajectory, which must have been recorded.
    pub fn trajectory(&self) -> Result<&StateTrajectory> {
        self.trajectory
            .as_ref()
            .ok_or_else(|| Error::Precondition("trajectory was not recorded".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanOptions {
    pub record: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self { record: true }
    }
}

pub(crate) fn check_h0(h0: Option<&[f64]>, n: usize, p: usize) -> Result<Vec<f64>> {
    match h0 {
        None => Ok(vec![0.0; n * p]),
        Some(h) if h.len() == n * p => {
            check_finite("initial state", h)?;
            Ok(h.to_vec())
        }
        Some(h) => Err(shape_err("initial state", n * p, h.len())),
    }
}

/// `h_t = A_t h_{t−1} + U_t`, `Y_{t,p} = ⟨Cs_{t,·,p}, h_{t,·,p}⟩`.
pub fn ssm_scan_sequential(
    transition: &Transition,
    u: &Tensor3,
    cs: &Tensor3,
    h0: Option<&[f64]>,
    opts: ScanOptions,
) -> Result<ScanOutput> {
    let (steps, n, p) = u.dims();
    if cs.dims() != u.dims() {
        return Err(shape_err(
            "readout tensor",
            format!("{:?}", u.dims()),
            format!("{:?}", cs.dims()),
        ));
    }
    if steps == 0 || n == 0 || p == 0 {
        return Err(Error::InvalidInput("scan needs T, N, P >= 1".into()));
    }
    transition.validate(steps, n)?;
    let mut h = check_h0(h0, n, p)?;
    let mut next = vec![0.0; n * p];

    let mut traj = opts.record.then(|| {
        let mut t = Tensor3::zeros(steps + 1, n, p);
        t.slice_mut(0).copy_from_slice(&h);
        t
    });
    let mut y = Matrix::zeros(steps, p);

    for t in 0..steps {
        transition.apply(t, &h, p, &mut next);
        for (hv, &uv) in next.iter_mut().zip(u.slice(t)) {
            *hv += uv;
        }
        std::mem::swap(&mut h, &mut next);
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: t });
        }
        readout(cs.slice(t), &h, p, y.row_mut(t));
        if let Some(tr) = traj.as_mut() {
            tr.slice_mut(t + 1).copy_from_slice(&h);
        }
    }

    Ok(ScanOutput {
        y,
        final_state: h,
        trajectory: traj.map(StateTrajectory::from_tensor),
    })
}

/// `y_p = Σ_n c_{n,p} h_{n,p}` for one step.
#[inline]
pub(crate) fn readout(c: &[f64], h: &[f64], p: usize, y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    for (crow, hrow) in c.chunks_exact(p).zip(h.chunks_exact(p)) {
        for ((yv, &cv), &hv) in y.iter_mut().zip(crow).zip(hrow) {
            *yv += cv * hv;
        }
    }
}

/// Selective SSM: builds `U_{t,·,p} = B_{t,·,p} x_{t,p}` from the token
/// features `x`, then scans with readout `C` from `streams`.
pub fn selective_ssm(
    transition: &Transition,
    streams: &StreamSet,
    x: &SequenceBatch,
    h0: Option<&[f64]>,
    opts: ScanOptions,
) -> Result<ScanOutput> {
    streams.validate()?;
    let (steps, _, p) = streams.dims();
    if x.steps() != steps || x.channels() != p {
        return Err(shape_err(
            "sequence batch",
            format!("{steps}x{p}"),
            format!("{}x{}", x.steps(), x.channels()),
        ));
    }
    let u = injection_tensor(&streams.b, x.matrix());
    ssm_scan_sequential(transition, &u, &streams.c, h0, opts)
}

/// `U_{t,n,p} = B_{t,n,p} · x_{t,p}`.
pub fn injection_tensor(b: &Tensor3, x: &Matrix) -> Tensor3 {
    let (steps, _, p) = b.dims();
    debug_assert_eq!((x.rows(), x.cols()), (steps, p));
    let mut u = b.clone();
    for t in 0..steps {
        let xt = x.row(t);
        for row in u.slice_mut(t).chunks_exact_mut(p) {
            row.iter_mut().zip(xt).for_each(|(v, &xv)| *v *= xv);
        }
    }
    u
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(t: &[f64]) -> Tensor3 {
        Tensor3::from_vec(t.len(), 1, 1, t.to_vec()).unwrap()
    }

    #[test]
    fn zoh_zero_transition_limit() {
        let inp = DiscretizationInput {
            a: vec![0.0],
            b: Matrix::from_rows(&[&[2.0]]).unwrap(),
            delta: 1.0,
        };
        let (a, b) = zoh_discretize(&inp).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(b.as_slice(), &[2.0]);
    }

    #[test]
    fn zoh_matches_integral_oracle() {
        // ∫₀¹ e^{-s ln 2} ds = (1 − e^{-ln 2}) / ln 2 = 0.5 / ln 2.
        let inp = DiscretizationInput {
            a: vec![-(2f64.ln())],
            b: Matrix::from_rows(&[&[1.0]]).unwrap(),
            delta: 1.0,
        };
        let (a, b) = zoh_discretize(&inp).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15);
        assert!((b[(0, 0)] - 0.5 / 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zoh_tiny_delta_uses_series() {
        let inp = DiscretizationInput {
            a: vec![-1.0],
            b: Matrix::from_rows(&[&[1.0]]).unwrap(),
            delta: 1e-8,
        };
        let (_, b) = zoh_discretize(&inp).unwrap();
        // (1 − e^{-Δ}) = Δ − Δ²/2 + ...
        let oracle = 1e-8 - 0.5e-16;
        assert!(((b[(0, 0)] - oracle) / oracle).abs() < 1e-12);
    }

    #[test]
    fn zoh_errors() {
        let mut inp = DiscretizationInput {
            a: vec![1.0, 800.0],
            b: Matrix::zeros(2, 1),
            delta: 1.0,
        };
        assert_eq!(zoh_discretize(&inp), Err(Error::Overflow { index: 1 }));
        inp.delta = 0.0;
        assert!(matches!(zoh_discretize(&inp), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn expm1_series_is_continuous_at_threshold() {
        let z = ZOH_TAYLOR_THRESHOLD;
        let closed = z.exp_m1() / z;
        let series = 1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0));
        assert!((closed - series).abs() < 1e-15);
    }

    #[test]
    fn two_step_hand_unrolled() {
        let out = ssm_scan_sequential(
            &Transition::Diagonal(vec![0.5]),
            &scalar(&[1.0, 1.0]),
            &scalar(&[1.0, 1.0]),
            None,
            ScanOptions::default(),
        )
        .unwrap();
        let traj = out.trajectory().unwrap();
        assert_eq!(traj.state(1), &[1.0]);
        assert_eq!(traj.state(2), &[1.5]);
        assert_eq!(out.y.as_slice(), &[1.0, 1.5]);
    }

    #[test]
    fn zero_drive_gives_zero_output() {
        let u = Tensor3::zeros(5, 3, 2);
        let c = Tensor3::from_vec(5, 3, 2, (0..30).map(|i| i as f64).collect()).unwrap();
        let out = ssm_scan_sequential(
            &Transition::Dense(Matrix::identity(3)),
            &u,
            &c,
            None,
            ScanOptions::default(),
        )
        .unwrap();
        assert!(out.y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_transition_is_memoryless() {
        let u = Tensor3::from_vec(3, 2, 1, vec![1.0, 2.0, -1.0, 0.5, 3.0, 0.0]).unwrap();
        let c = Tensor3::from_vec(3, 2, 1, vec![0.5, 1.0, 2.0, 2.0, -1.0, 4.0]).unwrap();
        let out = ssm_scan_sequential(
            &Transition::Dense(Matrix::zeros(2, 2)),
            &u,
            &c,
            None,
            ScanOptions::default(),
        )
        .unwrap();
        assert_eq!(out.y.as_slice(), &[2.5, -1.0, -3.0]);
    }

    #[test]
    fn scan_shape_and_finiteness_errors() {
        let u = Tensor3::zeros(2, 1, 1);
        assert!(ssm_scan_sequential(
            &Transition::Diagonal(vec![0.5]),
            &u,
            &Tensor3::zeros(2, 2, 1),
            None,
            ScanOptions::default()
        )
        .is_err());
        assert!(ssm_scan_sequential(
            &Transition::Diagonal(vec![0.5]),
            &u,
            &u,
            Some(&[0.0, 0.0]),
            ScanOptions::default()
        )
        .is_err());
        let big = scalar(&[f64::MAX, f64::MAX]);
        assert_eq!(
            ssm_scan_sequential(
                &Transition::Diagonal(vec![1.0]),
                &big,
                &big,
                None,
                ScanOptions::default()
            ),
            Err(Error::NonFinite { step: 1 })
        );
    }

    #[test]
    fn unrecorded_scan_has_no_trajectory() {
        let u = scalar(&[1.0]);
        let out = ssm_scan_sequential(
            &Transition::Diagonal(vec![0.5]),
            &u,
            &u,
            None,
            ScanOptions { record: false },
        )
        .unwrap();
        assert!(out.trajectory().is_err());
        assert_eq!(out.final_state, vec![1.0]);
    }

    #[test]
    fn scalar_per_step_transition_multiplies_whole_state() {
        let u = Tensor3::from_vec(2, 2, 1, vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let c = Tensor3::from_vec(2, 2, 1, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let out = ssm_scan_sequential(
            &Transition::ScalarPerStep(vec![0.3, 0.5]),
            &u,
            &c,
            None,
            ScanOptions::default(),
        )
        .unwrap();
        assert_eq!(out.final_state, vec![0.5, 1.0]);
    }
}
