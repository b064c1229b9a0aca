use serde::Serialize;

use crate::error::{Error, Result};

const PARAM_COEF: f64 = 0.1915;
const PARAM_EXP: f64 = 0.5095;
const TOKEN_COEF: f64 = 5.2232;
const TOKEN_EXP: f64 = 0.4905;

/// Compute-optimal model size and token count for a compute budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TokenBudget {
    pub params: f64,
    pub tokens: f64,
    pub tokens_per_param: f64,
}

/// `M = 0.1915·C^0.5095`, `D = 5.2232·C^0.4905`, `D/M`.
pub fn compute_token_budget(compute: f64) -> Result<TokenBudget> {
    if !(compute > 0.0 && compute.is_finite()) {
        return Err(Error::InvalidParameter(format!("compute must be positive, got {compute}")));
    }
    let params = PARAM_COEF * compute.powf(PARAM_EXP);
    let tokens = TOKEN_COEF * compute.powf(TOKEN_EXP);
    Ok(TokenBudget {
        params,
        tokens,
        tokens_per_param: tokens / params,
    })
}
