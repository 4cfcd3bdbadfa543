//! Hybrid adaptive logarithmic segmentation loss.
//!
//! ```text
//! BaCE   = -mean[ Ω p ln(q) + (1 - Ω)(1 - p) ln(1 - q) ]
//! TI     = TP / (TP + α FP + β FN)        soft counts over the whole batch
//! TL     = 1 - TI                          single foreground class
//! HL     = k BaCE + (1 - k) TL
//! ALL-HL = ω ln(1 + |HL| / ε)              |HL| < γ
//!        = |HL| - C                        otherwise
//! C      = γ - ω ln(1 + γ / ε)
//! ```
//! `p` is the binary ground truth, `q` the predicted probability. Inside the
//! logarithms `q` is clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWrapper {
    /// Adaptive logarithmic wrapper around the hybrid loss.
    All,
    /// Plain hybrid loss.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub k: f64,
    pub omega_bace: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub omega_all: f64,
    pub epsilon: f64,
    pub wrapper: LossWrapper,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            k: 0.5,
            omega_bace: 0.7,
            alpha: 0.3,
            beta: 0.7,
            gamma: 0.1,
            omega_all: 10.0,
            epsilon: 0.5,
            wrapper: LossWrapper::All,
        }
    }
}

impl LossConfig {
    /// Continuity constant of the adaptive logarithmic wrapper.
    pub fn c(&self) -> f64 {
        self.gamma - self.omega_all * (1.0 + self.gamma / self.epsilon).ln()
    }

    pub fn validate(&self) -> Result<()> {
        let open01 = |v: f64| v > 0.0 && v < 1.0;
        if !open01(self.k) || !open01(self.omega_bace) {
            return Err(config_err!("k and omega_bace must lie in (0, 1)"));
        }
        if [
            self.alpha,
            self.beta,
            self.gamma,
            self.omega_all,
            self.epsilon,
        ]
        .iter()
        .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err(config_err!(
                "alpha, beta, gamma, omega_all, epsilon must be > 0"
            ));
        }
        Ok(())
    }
}

fn clamp_prob(q: f64) -> f64 {
    q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn in_clamp_range(q: f64) -> bool {
    (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&q)
}

fn check_pair(target: &[f64], pred: &[f64]) -> Result<()> {
    if target.len() != pred.len() || target.is_empty() {
        return Err(shape_err!(
            "loss target has {} values, prediction {}",
            target.len(),
            pred.len()
        ));
    }
    if let Some(v) = target.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!(
            "ground truth must be binary, found {v}"
        )));
    }
    if let Some(v) = pred.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("prediction value {v}")));
    }
    Ok(())
}

/// Balanced cross entropy, negated and averaged so it is a non-negative loss.
pub fn bace(target: &[f64], pred: &[f64], omega: f64) -> f64 {
    let sum: f64 = target
        .iter()
        .zip(pred)
        .map(|(&p, &q)| {
            let q = clamp_prob(q);
            omega * p * q.ln() + (1.0 - omega) * (1.0 - p) * (1.0 - q).ln()
        })
        .sum();
    -sum / target.len() as f64
}

pub fn bace_grad(target: &[f64], pred: &[f64], omega: f64) -> Vec<f64> {
    let n = target.len() as f64;
    target
        .iter()
        .zip(pred)
        .map(|(&p, &q)| {
            if !in_clamp_range(q) {
                return 0.0;
            }
            -(omega * p / q - (1.0 - omega) * (1.0 - p) / (1.0 - q)) / n
        })
        .collect()
}

/// Soft (or, for binary predictions, hard) overlap counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SoftCounts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

impl SoftCounts {
    pub fn from_probs(target: &[f64], pred: &[f64]) -> Self {
        let mut c = SoftCounts::default();
        for (&p, &q) in target.iter().zip(pred) {
            c.tp += p * q;
            c.fp += (1.0 - p) * q;
            c.fn_ += p * (1.0 - q);
        }
        c
    }
}

/// Tversky index; both masks empty counts as perfect agreement.
pub fn tversky_index(c: SoftCounts, alpha: f64, beta: f64) -> f64 {
    let denom = c.tp + alpha * c.fp + beta * c.fn_;
    if denom == 0.0 {
        1.0
    } else {
        c.tp / denom
    }
}

pub fn tversky_loss(target: &[f64], pred: &[f64], alpha: f64, beta: f64) -> f64 {
    1.0 - tversky_index(SoftCounts::from_probs(target, pred), alpha, beta)
}

pub fn tversky_loss_grad(target: &[f64], pred: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    let c = SoftCounts::from_probs(target, pred);
    let denom = c.tp + alpha * c.fp + beta * c.fn_;
    if denom == 0.0 {
        return vec![0.0; target.len()];
    }
    let d2 = denom * denom;
    target
        .iter()
        .map(|&p| {
            let dtp = p;
            let dden = p + alpha * (1.0 - p) - beta * p;
            -(dtp * denom - c.tp * dden) / d2
        })
        .collect()
}

pub fn hybrid(target: &[f64], pred: &[f64], cfg: &LossConfig) -> f64 {
    cfg.k * bace(target, pred, cfg.omega_bace)
        + (1.0 - cfg.k) * tversky_loss(target, pred, cfg.alpha, cfg.beta)
}

/// Adaptive logarithmic wrapper.
pub fn all_wrap(hl: f64, cfg: &LossConfig) -> f64 {
    let a = hl.abs();
    if a < cfg.gamma {
        cfg.omega_all * (1.0 + a / cfg.epsilon).ln()
    } else {
        a - cfg.c()
    }
}

/// Derivative of [`all_wrap`]. At `|hl| = γ` the logarithmic branch's slope
/// is used.
pub fn all_wrap_derivative(hl: f64, cfg: &LossConfig) -> f64 {
    let a = hl.abs();
    let sign = if hl < 0.0 { -1.0 } else { 1.0 };
    if a <= cfg.gamma {
        sign * cfg.omega_all / (cfg.epsilon + a)
    } else {
        sign
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// The optimised value (ALL-HL or HL per the wrapper).
    pub value: f64,
    pub hybrid: f64,
    pub bace: f64,
    pub tversky_index: f64,
}

/// Loss value and its gradient with respect to every prediction value.
pub fn evaluate(
    target: &[f64],
    pred: &[f64],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_pair(target, pred)?;
    let b = bace(target, pred, cfg.omega_bace);
    let ti = tversky_index(SoftCounts::from_probs(target, pred), cfg.alpha, cfg.beta);
    let hl = cfg.k * b + (1.0 - cfg.k) * (1.0 - ti);
    let (value, outer) = match cfg.wrapper {
        LossWrapper::All => (all_wrap(hl, cfg), all_wrap_derivative(hl, cfg)),
        LossWrapper::None => (hl, 1.0),
    };
    let gb = bace_grad(target, pred, cfg.omega_bace);
    let gt = tversky_loss_grad(target, pred, cfg.alpha, cfg.beta);
    let grad = gb
        .iter()
        .zip(&gt)
        .map(|(a, t)| outer * (cfg.k * a + (1.0 - cfg.k) * t))
        .collect();
    Ok((
        LossBreakdown {
            value,
            hybrid: hl,
            bace: b,
            tversky_index: ti,
        },
        grad,
    ))
}

/// Records the loss of `pred` against `target` on the graph.
pub fn loss_node(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if g.shape(pred) != target.shape() {
        return Err(shape_err!(
            "prediction {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        ));
    }
    let (breakdown, grad) = evaluate(target.data(), g.value(pred).data(), cfg)?;
    if !breakdown.value.is_finite() {
        return Err(Error::NonFinite(format!("loss value {}", breakdown.value)));
    }
    let grad = Tensor::new(target.shape(), grad)?;
    let v = g.scalar_fn(pred, breakdown.value, grad)?;
    Ok((v, breakdown))
}
