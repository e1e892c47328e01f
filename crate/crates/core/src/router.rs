//! Token-level routing: linear logits, stable softmax, top-k masking.
//!
//! Top-k keeps the softmax values of the selected experts as they are. The
//! retained mass is not renormalized, so a sparse row sums to less than one.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{check_finite, Matrix};
use crate::types::SequenceBatch;

/// Linear router `g_t = W_g X_t + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    /// `E × P`.
    pub weight: Matrix,
    /// Length `E`.
    pub bias: Vec<f64>,
}

impl RouterParams {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        let bias = bias.unwrap_or_else(|| vec![0.0; weight.rows()]);
        if bias.len() != weight.rows() {
            return Err(shape_err("router bias", weight.rows(), bias.len()));
        }
        check_finite("router weight", weight.as_slice())?;
        check_finite("router bias", &bias)?;
        Ok(Self { weight, bias })
    }

    #[inline]
    pub fn experts(&self) -> usize {
        self.weight.rows()
    }

    /// Logits for a single token.
    pub fn logits_for(&self, token: &[f64], out: &mut [f64]) {
        for (e, o) in out.iter_mut().enumerate() {
            *o = crate::tensor::dot(self.weight.row(e), token) + self.bias[e];
        }
    }
}

/// Mixture weights `π` (`T × E`) with per-step active sets.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    pi: Matrix,
    active: Vec<Vec<usize>>,
    k: usize,
}

impl RoutingPlan {
    /// Dense plan from explicit weights: every expert active. Weights only
    /// need to be nonnegative; they are not required to sum to one.
    pub fn dense(pi: Matrix) -> Result<Self> {
        let e = pi.cols();
        let active = (0..pi.rows()).map(|_| (0..e).collect()).collect();
        Self::from_parts(pi, active)
    }

    /// Plan from explicit weights and active sets. Weights outside the
    /// active set are forced to zero.
    pub fn from_parts(pi: Matrix, active: Vec<Vec<usize>>) -> Result<Self> {
        if pi.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("routing weights must be nonnegative".into()));
        }
        Self::from_parts_signed(pi, active)
    }

    /// As [`RoutingPlan::from_parts`] without the sign check; used for
    /// perturbed weights in derivative checks.
    pub(crate) fn from_parts_signed(mut pi: Matrix, mut active: Vec<Vec<usize>>) -> Result<Self> {
        if active.len() != pi.rows() {
            return Err(shape_err("active sets", pi.rows(), active.len()));
        }
        check_finite("routing weights", pi.as_slice())?;
        let e = pi.cols();
        let mut k = 0;
        for (t, set) in active.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.iter().any(|&i| i >= e) {
                return Err(Error::InvalidInput(format!("active expert out of range at step {t}")));
            }
            k = k.max(set.len());
            let row = pi.row_mut(t);
            for (i, w) in row.iter_mut().enumerate() {
                if set.binary_search(&i).is_err() {
                    *w = 0.0;
                }
            }
        }
        Ok(Self { pi, active, k })
    }

    /// The same weight row at every step.
    pub fn time_invariant(weights: &[f64], steps: usize) -> Result<Self> {
        let mut pi = Matrix::zeros(steps, weights.len());
        for t in 0..steps {
            pi.row_mut(t).copy_from_slice(weights);
        }
        Self::dense(pi)
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.pi.rows()
    }

    #[inline]
    pub fn experts(&self) -> usize {
        self.pi.cols()
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn weights(&self) -> &Matrix {
        &self.pi
    }

    #[inline]
    pub fn weight(&self, t: usize, e: usize) -> f64 {
        self.pi[(t, e)]
    }

    /// Sorted active set `K_t`.
    #[inline]
    pub fn active(&self, t: usize) -> &[usize] {
        &self.active[t]
    }

    /// Whether every row equals the first one.
    pub fn is_time_invariant(&self) -> bool {
        let first = self.pi.row(0);
        (1..self.steps()).all(|t| self.pi.row(t) == first && self.active[t] == self.active[0])
    }
}

/// `g_t = W_g X_t + bias` for every step.
pub fn router_logits(params: &RouterParams, x: &SequenceBatch) -> Result<Matrix> {
    if params.weight.cols() != x.channels() {
        return Err(shape_err("router weight columns", x.channels(), params.weight.cols()));
    }
    let mut out = Matrix::zeros(x.steps(), params.experts());
    for t in 0..x.steps() {
        params.logits_for(x.token(t), out.row_mut(t));
    }
    Ok(out)
}

/// In-place max-subtracted softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Rowwise softmax; every expert active.
pub fn softmax_route(logits: &Matrix) -> Result<RoutingPlan> {
    check_finite("router logits", logits.as_slice())?;
    if logits.cols() == 0 {
        return Err(Error::InvalidInput("router needs at least one expert".into()));
    }
    let mut pi = logits.clone();
    for t in 0..pi.rows() {
        softmax_row(pi.row_mut(t));
    }
    RoutingPlan::dense(pi)
}

/// Indices of the `k` largest entries, ties toward the lower index, sorted.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Keeps the `k` largest weights per step unchanged and zeroes the rest.
pub fn topk_mask(plan: &RoutingPlan, k: usize) -> Result<RoutingPlan> {
    let e = plan.experts();
    if k == 0 || k > e {
        return Err(Error::InvalidInput(format!("k must be in 1..={e}, got {k}")));
    }
    let active = (0..plan.steps()).map(|t| topk_indices(plan.pi.row(t), k)).collect();
    RoutingPlan::from_parts(plan.pi.clone(), active)
}

/// Logits → softmax → top-k in one call. `k = E` yields the dense plan.
pub fn route(params: &RouterParams, x: &SequenceBatch, k: usize) -> Result<RoutingPlan> {
    let dense = softmax_route(&router_logits(params, x)?)?;
    topk_mask(&dense, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan_of(rows: &[&[f64]]) -> RoutingPlan {
        RoutingPlan::dense(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn zero_router_gives_zero_logits() {
        let params = RouterParams::new(Matrix::zeros(3, 2), None).unwrap();
        let x = SequenceBatch::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let g = router_logits(&params, &x).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coordinate_readout_logits() {
        let params = RouterParams::new(Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap(), None).unwrap();
        let x = SequenceBatch::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(router_logits(&params, &x).unwrap().as_slice(), &[0.0, 3.0]);
    }

    #[test]
    fn logits_shape_mismatch() {
        let params = RouterParams::new(Matrix::zeros(2, 3), None).unwrap();
        let x = SequenceBatch::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(router_logits(&params, &x).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let g = Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 3f64.ln()]]).unwrap();
        let plan = softmax_route(&g).unwrap();
        assert_eq!(plan.weights().row(0), &[0.5, 0.5]);
        assert!((plan.weight(1, 0) - 0.25).abs() < 1e-15);
        assert!((plan.weight(1, 1) - 0.75).abs() < 1e-15);
        assert_eq!(plan.active(1), &[0, 1]);
    }

    #[test]
    fn softmax_is_shift_invariant_and_overflow_safe() {
        let g = Matrix::from_rows(&[&[1.0, 2.0, -0.5]]).unwrap();
        let shifted = Matrix::from_rows(&[&[801.0, 802.0, 799.5]]).unwrap();
        let a = softmax_route(&g).unwrap();
        let b = softmax_route(&shifted).unwrap();
        for e in 0..3 {
            assert!((a.weight(0, e) - b.weight(0, e)).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nonfinite() {
        let g = Matrix::from_rows(&[&[0.0, f64::NAN]]).unwrap();
        assert!(softmax_route(&g).is_err());
    }

    #[test]
    fn topk_does_not_renormalize() {
        let plan = plan_of(&[&[0.5, 0.3, 0.2]]);
        let top1 = topk_mask(&plan, 1).unwrap();
        assert_eq!(top1.weights().row(0), &[0.5, 0.0, 0.0]);
        assert_eq!(top1.weights().row(0).iter().sum::<f64>(), 0.5);
        assert_eq!(top1.active(0), &[0]);
    }

    #[test]
    fn topk_tie_goes_to_lowest_index() {
        let plan = plan_of(&[&[0.5, 0.5]]);
        let top1 = topk_mask(&plan, 1).unwrap();
        assert_eq!(top1.weights().row(0), &[0.5, 0.0]);
    }

    #[test]
    fn topk_full_set_is_identity() {
        let plan = plan_of(&[&[0.2, 0.5, 0.3], &[0.1, 0.1, 0.8]]);
        assert_eq!(topk_mask(&plan, 3).unwrap(), plan);
    }

    #[test]
    fn topk_range_checked() {
        let plan = plan_of(&[&[0.5, 0.5]]);
        assert!(topk_mask(&plan, 0).is_err());
        assert!(topk_mask(&plan, 3).is_err());
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(RoutingPlan::dense(Matrix::from_rows(&[&[-0.1, 1.0]]).unwrap()).is_err());
    }
}
