//! Analytic FLOP model of the two designs.
//!
//! One multiply-add counts as two FLOPs. Per step:
//!
//! | term | dense `A` | diagonal / scalar `A` |
//! |------|-----------|-----------------------|
//! | `c_step(N, P)` state update | `P(2N² + N)` | `3NP` |
//!
//! `c_mix(k, P, N) = k(2NP + NP) + kNP`: form each active injection
//! `B x` (NP), scale-and-accumulate it (2NP), scale-and-accumulate its
//! readout (NP). `c_route(E, P) = 2EP + 3E`: logits plus softmax.
//! Readouts: the mixed design reads one state (`2NP`), the separated design
//! reads `k` states and accumulates their weighted outputs (`k(2NP + 2P)`).
//! Readouts are booked in the mixing column so the recurrence column holds
//! state updates only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TransitionKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Mixed,
    Separated,
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Design::Mixed),
            "separated" => Ok(Design::Separated),
            other => Err(Error::InvalidInput(format!("unknown design {other:?}"))),
        }
    }
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Design::Mixed => "mixed",
            Design::Separated => "separated",
        })
    }
}

/// Dimensions for the cost model; `T = 0` is allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostDims {
    pub t: u64,
    pub n: u64,
    pub p: u64,
    pub e: u64,
    pub k: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub transition: TransitionKind,
}

impl CostModel {
    pub fn new(transition: TransitionKind) -> Self {
        Self { transition }
    }

    pub fn c_step(&self, n: u64, p: u64) -> u64 {
        match self.transition {
            TransitionKind::Dense => p * (2 * n * n + n),
            TransitionKind::Diagonal => p * (2 * n + n),
            TransitionKind::ScalarPerStep => p * 3 * n,
        }
    }

    pub fn c_mix(&self, k: u64, p: u64, n: u64) -> u64 {
        k * (2 * n * p + n * p) + k * n * p
    }

    pub fn c_route(&self, e: u64, p: u64) -> u64 {
        2 * e * p + 3 * e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCounts {
    pub recurrence: u64,
    pub mixing: u64,
    pub routing: u64,
    pub total: u64,
}

pub fn flop_model(design: Design, dims: CostDims, model: CostModel) -> Result<FlopCounts> {
    let CostDims { t, n, p, e, k } = dims;
    if e == 0 || k == 0 || n == 0 || p == 0 {
        return Err(Error::InvalidInput(format!("N, P, E, k must be positive: {dims:?}")));
    }
    if k > e {
        return Err(Error::InvalidInput(format!("k = {k} exceeds E = {e}")));
    }
    let step = model.c_step(n, p);
    let (recurrence, mixing) = match design {
        Design::Mixed => (t * step, t * (model.c_mix(k, p, n) + 2 * n * p)),
        Design::Separated => (t * e * step, t * k * (2 * n * p + 2 * p)),
    };
    let routing = t * model.c_route(e, p);
    Ok(FlopCounts {
        recurrence,
        mixing,
        routing,
        total: recurrence + mixing + routing,
    })
}
