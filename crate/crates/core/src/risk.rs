//! Monte-Carlo risk measures over cost samples.
//!
//! The central one is conditional value at risk. For samples c_1..c_N and
//! risk level sigma in [0, 1], the estimator sorts costs descending and
//! averages the top ceil((1 - sigma) * N), clamped to at least one sample.
//! This is the sample version of
//!
//!   cvar_sigma(C) = inf_t { t + E[max(0, C - t)] / (1 - sigma) },
//!
//! whose objective is piecewise linear in t with kinks at the sample values;
//! sigma = 0 gives the mean, sigma = 1 the maximum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    Mean,
    Cvar,
    Entropic,
}

/// A risk measure plus its level parameter.
///
/// `sigma` is the risk level for `Cvar` (in [0, 1]) and the exponential
/// tilt for `Entropic` (any nonzero value); `Mean` ignores it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub kind: RiskKind,
    pub sigma: f64,
}

impl RiskSpec {
    pub fn mean() -> Self {
        RiskSpec { kind: RiskKind::Mean, sigma: 0.0 }
    }

    pub fn cvar(sigma: f64) -> Self {
        RiskSpec { kind: RiskKind::Cvar, sigma }
    }

    pub fn entropic(sigma: f64) -> Self {
        RiskSpec { kind: RiskKind::Entropic, sigma }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() {
            return Err(Error::Domain(format!("risk sigma must be finite, got {}", self.sigma)));
        }
        match self.kind {
            RiskKind::Mean => Ok(()),
            RiskKind::Cvar => {
                if (0.0..=1.0).contains(&self.sigma) {
                    Ok(())
                } else {
                    Err(Error::Domain(format!(
                        "cvar sigma must lie in [0, 1], got {}",
                        self.sigma
                    )))
                }
            }
            RiskKind::Entropic => {
                if self.sigma != 0.0 {
                    Ok(())
                } else {
                    Err(Error::Domain("entropic sigma must be nonzero".into()))
                }
            }
        }
    }
}

fn check_costs(costs: &[f64]) -> Result<()> {
    if costs.is_empty() {
        return Err(Error::Usage("risk of an empty cost sample".into()));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain("cost samples must be finite".into()));
    }
    Ok(())
}

/// Monte-Carlo CVaR: mean of the top ceil((1 - sigma) * N) samples.
pub fn cvar_mc(costs: &[f64], sigma: f64) -> Result<f64> {
    check_costs(costs)?;
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Domain(format!("cvar sigma must lie in [0, 1], got {sigma}")));
    }
    let n = costs.len();
    // The tiny downward nudge makes the ceil behave as in exact arithmetic
    // when (1 - sigma) * n lands on an integer up to f64 rounding; real tail
    // boundaries are at least 1 apart so no other level is affected.
    let tail = ((((1.0 - sigma) * n as f64) - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = costs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finiteness checked above"));
    Ok(sorted[..tail].iter().sum::<f64>() / tail as f64)
}

/// Entropic risk ln(E[exp(sigma * C)]) / sigma with a max-shift so the
/// exponentials cannot overflow. Guards |sigma * max cost| < 700, the f64
/// exp overflow threshold.
pub fn entropic_risk(costs: &[f64], sigma: f64) -> Result<f64> {
    check_costs(costs)?;
    if sigma == 0.0 {
        return Err(Error::Domain("entropic sigma must be nonzero".into()));
    }
    if !sigma.is_finite() {
        return Err(Error::Domain(format!("entropic sigma must be finite, got {sigma}")));
    }
    // Only the largest cost matters: with the max-shift below, exponents of
    // smaller costs can only underflow to zero, which is harmless.
    let max_cost = costs.iter().fold(f64::NEG_INFINITY, |m, &c| m.max(c));
    if (sigma * max_cost).abs() >= 700.0 {
        return Err(Error::Numeric(format!(
            "entropic risk overflow: |sigma * max cost| = {} >= 700",
            (sigma * max_cost).abs()
        )));
    }
    let shift = costs
        .iter()
        .map(|&c| sigma * c)
        .fold(f64::NEG_INFINITY, f64::max);
    let mean_exp =
        costs.iter().map(|&c| (sigma * c - shift).exp()).sum::<f64>() / costs.len() as f64;
    Ok((shift + mean_exp.ln()) / sigma)
}

/// Dispatch on a [`RiskSpec`].
pub fn estimate_risk(costs: &[f64], spec: &RiskSpec) -> Result<f64> {
    spec.validate()?;
    match spec.kind {
        RiskKind::Mean => {
            check_costs(costs)?;
            Ok(costs.iter().sum::<f64>() / costs.len() as f64)
        }
        RiskKind::Cvar => cvar_mc(costs, spec.sigma),
        RiskKind::Entropic => entropic_risk(costs, spec.sigma),
    }
}
