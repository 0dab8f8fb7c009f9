//! Case-study environments.

pub(crate) mod cstr;
mod lq;

pub use cstr::{
    constraint_violation_count, cstr_integrate, cstr_integrate_with_jacobian, cstr_rhs, cstr_rhs_jacobian, cstr_step,
    BoxBounds, CstrConfig, CstrEnv, CstrParams, RewardWeights, N_INPUT as CSTR_N_INPUT, N_STATE as CSTR_N_STATE,
};
pub use lq::{lq_step, LqEnv, LqEnvConfig};
