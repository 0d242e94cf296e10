//! Classification and adversarial losses, and the schedules that weight them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor applied inside every log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Mean of `-log p[i, y_i]` over the batch.
pub fn ce_loss(g: &mut Graph, p: Tensor, labels: &[usize]) -> Result<Tensor> {
    let picked = g.select_cols(p, labels)?;
    let logs = g.clamped_log(picked, LOG_FLOOR);
    let mean = g.mean(logs)?;
    Ok(g.neg(mean))
}

/// `-mean(w_s log D_s) - mean(w_t log(1 - D_t))`.
///
/// Source rows carry domain label 1 and target rows label 0. Optional
/// per-row weights are rescaled to mean one within their domain.
pub fn adv_loss(
    g: &mut Graph,
    d_source: Tensor,
    d_target: Tensor,
    w_source: Option<&Matrix>,
    w_target: Option<&Matrix>,
) -> Result<Tensor> {
    let log_s = g.clamped_log(d_source, LOG_FLOOR);
    let flipped = g.neg(d_target);
    let one_minus = g.add_scalar(flipped, 1.0);
    let log_t = g.clamped_log(one_minus, LOG_FLOOR);

    let weighted_mean = |g: &mut Graph, x: Tensor, w: Option<&Matrix>| -> Result<Tensor> {
        match w {
            None => g.mean(x),
            Some(w) => {
                let w = mean_normalized(w, x.shape())?;
                let wt = g.constant(w);
                let prod = g.mul(x, wt)?;
                g.mean(prod)
            }
        }
    };
    let term_s = weighted_mean(g, log_s, w_source)?;
    let term_t = weighted_mean(g, log_t, w_target)?;
    let total = g.add(term_s, term_t)?;
    Ok(g.neg(total))
}

fn mean_normalized(w: &Matrix, shape: (usize, usize)) -> Result<Matrix> {
    if w.shape() != shape {
        return Err(Error::Shape {
            op: "adv_loss weights",
            lhs: shape,
            rhs: w.shape(),
        });
    }
    let mean = w.sum() / w.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::Data("adversarial weights must have positive mean".into()));
    }
    Ok(w.map(|v| v / mean))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaKind {
    Constant,
    DannRamp,
}

/// Weight of the adversarial term as a function of training progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub kind: LambdaKind,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_lambda_max() -> f64 {
    1.0
}

fn default_gamma() -> f64 {
    10.0
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self::dann_ramp(1.0)
    }
}

impl LambdaSchedule {
    pub fn constant(value: f64) -> Self {
        LambdaSchedule {
            kind: LambdaKind::Constant,
            lambda_max: value,
            gamma: default_gamma(),
        }
    }

    pub fn dann_ramp(lambda_max: f64) -> Self {
        LambdaSchedule {
            kind: LambdaKind::DannRamp,
            lambda_max,
            gamma: default_gamma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_max must be finite and >= 0, got {}",
                self.lambda_max
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Progress outside `[0, 1]` is clamped.
    pub fn at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        match self.kind {
            LambdaKind::Constant => self.lambda_max,
            LambdaKind::DannRamp => {
                self.lambda_max * (2.0 / (1.0 + (-self.gamma * p).exp()) - 1.0)
            }
        }
    }
}

/// Learning-rate multiplier over training progress.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `1 / (1 + alpha p)^beta`
    InverseDecay { alpha: f64, beta: f64 },
}

impl LrSchedule {
    pub fn inverse_decay() -> Self {
        LrSchedule::InverseDecay {
            alpha: 10.0,
            beta: 0.75,
        }
    }

    pub fn factor(&self, progress: f64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::InverseDecay { alpha, beta } => {
                (1.0 + alpha * progress.clamp(0.0, 1.0)).powf(-beta)
            }
        }
    }
}
