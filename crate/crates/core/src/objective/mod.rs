//! Classification heads, the classification loss, the joint objective and
//! the optimizer with its learning-rate schedule.

mod classifier;
mod optim;

pub use classifier::{bce_loss, Classifier};
pub use optim::{AdamW, AdamWConfig, OneCycle, OptimError};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("training aborted: {component} is not finite ({value})")]
pub struct NonFiniteLoss {
    pub component: &'static str,
    pub value: f64,
}

/// One iteration's loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub iteration: u64,
    pub learning_rate: f64,
    pub l_bce: f64,
    pub l_s2s: f64,
    pub l_p2s: f64,
    pub l_total: f64,
}

/// Which contrastive terms enter the joint objective, and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSwitches {
    pub sscl: bool,
    pub pscl: bool,
    pub sscl_weight: f64,
    pub pscl_weight: f64,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            sscl: true,
            pscl: true,
            sscl_weight: 1.0,
            pscl_weight: 1.0,
        }
    }
}

/// Unweighted (by default) sum of the three terms. Disabled terms are
/// reported as exactly zero.
pub fn total_loss(
    l_bce: f64,
    l_s2s: f64,
    l_p2s: f64,
    switches: &LossSwitches,
) -> Result<(f64, f64, f64, f64), NonFiniteLoss> {
    for (component, value) in [("l_bce", l_bce), ("l_s2s", l_s2s), ("l_p2s", l_p2s)] {
        if !value.is_finite() {
            return Err(NonFiniteLoss { component, value });
        }
    }
    let s2s = if switches.sscl { switches.sscl_weight * l_s2s } else { 0.0 };
    let p2s = if switches.pscl { switches.pscl_weight * l_p2s } else { 0.0 };
    Ok((l_bce, s2s, p2s, l_bce + s2s + p2s))
}
