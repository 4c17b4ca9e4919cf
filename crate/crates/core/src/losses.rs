//! Contrastive objectives between 3D and text embeddings.
//!
//! The similarity kernel is `f(a, b) = exp(cos(a, b) / τ)` in
//! [`KernelMode::Standard`]. [`KernelMode::Literal`] uses `exp(cos(a, b))`
//! and divides every kernel value by τ afterwards; since each loss is a ratio
//! of sums of kernel values that division cancels, so literal-mode losses do
//! not depend on τ at all and τ is simply not applied.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_similarity, Tape, Tensor, Var};
use crate::blocks::{NUM_BLOCKS, NUM_LOCAL_LABELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    #[default]
    Standard,
    Literal,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalMode {
    #[default]
    Hard,
    Soft,
    /// Global loss only.
    Off,
}

impl std::str::FromStr for KernelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::Config(format!("unknown kernel {s:?} (standard|literal)"))),
        }
    }
}

impl std::str::FromStr for LocalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("unknown local loss {s:?} (hard|soft|off)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub kernel: KernelMode,
    pub local_mode: LocalMode,
    pub min_points: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            kernel: KernelMode::Standard,
            local_mode: LocalMode::Hard,
            min_points: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.min_points == 0 {
            return Err(Error::Config("min_points must be at least 1".into()));
        }
        Ok(())
    }

    /// Multiplier applied to cosines inside the exponent.
    pub fn logit_scale(&self) -> f64 {
        match self.kernel {
            KernelMode::Standard => 1.0 / self.tau,
            KernelMode::Literal => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub global: f64,
    pub local: f64,
    pub total: f64,
}

impl LossValue {
    pub fn new(global: f64, local: f64) -> Self {
        Self {
            global,
            local,
            total: total_loss(global, local),
        }
    }
}

pub fn total_loss(global: f64, local: f64) -> f64 {
    global + local
}

/// Kernel value before the (ratio-canceling) literal-mode `/τ`.
pub fn similarity_kernel(a: &[f64], b: &[f64], cfg: &LossConfig) -> Result<f64> {
    Ok((cosine_similarity(a, b)? * cfg.logit_scale()).exp())
}

/// `scale · cos` between every row of `a` and every row of `b`.
pub fn cosine_logits(tape: &mut Tape, a: Var, b: Var, scale: f64) -> Result<Var> {
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let bt = tape.transpose(bn);
    let c = tape.matmul(an, bt)?;
    Ok(if scale == 1.0 { c } else { tape.scale(c, scale) })
}

/// In-batch InfoNCE with object `l` paired to text `l`; `1×1` node.
pub fn global_loss_node(tape: &mut Tape, objects: Var, texts: Var, cfg: &LossConfig) -> Result<Var> {
    let n = tape.value(objects).rows();
    if n == 0 || tape.value(texts).rows() != n {
        return Err(Error::shape(
            "global_loss",
            format!("{} objects vs {} texts", n, tape.value(texts).rows()),
        ));
    }
    let logits = cosine_logits(tape, objects, texts, cfg.logit_scale())?;
    tape.log_ratio(logits, &Tensor::identity(n), &vec![true; n], false)
}

/// Pooled local ratio for one object: `-log(Σ w·f / Σ f)` over valid blocks
/// and all nine labels; `1×1` node.
pub fn local_loss_node(
    tape: &mut Tape,
    local: Var,
    local_text: Var,
    weights: &[[f64; NUM_LOCAL_LABELS]; NUM_BLOCKS],
    valid: &[bool; NUM_BLOCKS],
    cfg: &LossConfig,
) -> Result<Var> {
    if tape.value(local).rows() != NUM_BLOCKS || tape.value(local_text).rows() != NUM_LOCAL_LABELS {
        return Err(Error::shape(
            "local_loss",
            format!(
                "local {:?}, text {:?}",
                tape.value(local).shape(),
                tape.value(local_text).shape()
            ),
        ));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::AllBlocksInvalid);
    }
    let logits = cosine_logits(tape, local, local_text, cfg.logit_scale())?;
    let w = Tensor::from_vec(NUM_BLOCKS, NUM_LOCAL_LABELS, weights.concat())?;
    tape.log_ratio(logits, &w, valid, true)
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

/// Value-only global loss.
pub fn global_loss(objects: &[Vec<f64>], texts: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let o = tape.constant(rows_tensor(objects)?);
    let t = tape.constant(rows_tensor(texts)?);
    let l = global_loss_node(&mut tape, o, t, cfg)?;
    Ok(tape.value(l).scalar())
}

fn local_loss_with(
    local: &[Vec<f64>],
    valid: &[bool; NUM_BLOCKS],
    text: &[Vec<f64>],
    weights: &[[f64; NUM_LOCAL_LABELS]; NUM_BLOCKS],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(rows_tensor(local)?);
    let t = tape.constant(rows_tensor(text)?);
    let out = local_loss_node(&mut tape, l, t, weights, valid, cfg)?;
    Ok(tape.value(out).scalar())
}

/// Value-only local loss with the binary pair indicator.
pub fn local_loss_hard(
    local: &[Vec<f64>],
    valid: &[bool; NUM_BLOCKS],
    projected_text: &[Vec<f64>],
    indicator: &crate::blocks::PairIndicator,
    cfg: &LossConfig,
) -> Result<f64> {
    local_loss_with(local, valid, projected_text, &indicator.table, cfg)
}

/// Value-only local loss with the similarity-weighted indicator.
pub fn local_loss_soft(
    local: &[Vec<f64>],
    valid: &[bool; NUM_BLOCKS],
    projected_text: &[Vec<f64>],
    soft: &crate::blocks::SoftIndicator,
    cfg: &LossConfig,
) -> Result<f64> {
    local_loss_with(local, valid, projected_text, &soft.table, cfg)
}
