//! Selective state space model kernels and two mixture-of-experts SSM
//! designs, with executable checks of their structural, stability and
//! equivalence properties.
//!
//! * [`ssm`], [`ssd`]: sequential and chunked recurrences.
//! * [`router`]: softmax routing with top-k masking (no renormalization).
//! * [`moe`]: the parameter-mixed single-recurrence layer and the
//!   separated per-expert baseline.
//! * [`theory`]: bound and identity checks over seeded instances.
//! * [`grad`]: adjoint of the mixed layer and finite-difference checks.
//! * [`cost`], [`bench`]: FLOP model and wall-clock sweeps.
//! * [`verify`]: the seeded suite behind the `verify` command.

pub mod bench;
pub mod cost;
pub mod error;
pub mod grad;
pub mod instance;
pub mod moe;
pub mod router;
pub mod spectral;
pub mod ssd;
pub mod ssm;
pub mod tensor;
pub mod theory;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
pub use instance::{generate_instance, Dims, Instance, RngInstanceSpec, StreamScales};
pub use router::{route, router_logits, softmax_route, topk_mask, RouterParams, RoutingPlan};
pub use spectral::spectral_norm;
pub use tensor::{Matrix, Tensor3};
pub use types::{SequenceBatch, StateTrajectory, StreamSet, Transition, TransitionKind};
