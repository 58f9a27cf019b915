//! Analytic FLOPs accounting for dynamic activation.
//!
//! Per transformer block at an activated step with sequence length L, hidden
//! width H, token saving rate η and weight saving rate μ, the dynamic scheme
//! removes `8·η·L·H²·(1 + 2μ)` FLOPs and adds a gating/routing overhead of
//! `2·L·H·(1 + (1−η)·N)`. Net saving sums `reduction − overhead` over the
//! activated steps and all blocks.
//!
//! Baseline convention (the saving formula does not define one, so the
//! percentage depends on it and is printed with every report): each block
//! costs `8·L·H²` for the FFN (4× expansion, one FLOP per multiply-accumulate)
//! plus `2·L²·H` for attention score/value mixing; attention input/output
//! projections are excluded. Percentages against published numbers are
//! best-effort under this convention.

use serde::{Deserialize, Serialize};

use crate::backbone::ScaleSchedule;
use crate::error::{Error, Result};

/// Human-readable statement of the baseline convention, included in reports.
pub const BASELINE_CONVENTION: &str = "baseline per block per step: 8*L*H^2 (FFN, 4x expansion, \
     1 FLOP per multiply-accumulate) + 2*L^2*H (attention score/value mixing); attention \
     projections excluded";

/// FLOPs removed in one block: 8·η·L·H²·(1 + 2μ).
pub fn block_reduction(l: usize, h: usize, eta: f64, mu: f64) -> Result<f64> {
    check_rate("eta", eta)?;
    check_rate("mu", mu)?;
    Ok(8.0 * eta * l as f64 * (h * h) as f64 * (1.0 + 2.0 * mu))
}

/// Gating and routing overhead in one block: 2·L·H·(1 + (1−η)·N).
pub fn block_overhead(l: usize, h: usize, eta: f64, n_experts: usize) -> Result<f64> {
    check_rate("eta", eta)?;
    Ok(2.0 * (l * h) as f64 * (1.0 + (1.0 - eta) * n_experts as f64))
}

/// Dense per-block cost under the report's baseline convention.
pub fn block_baseline(l: usize, h: usize) -> f64 {
    8.0 * l as f64 * (h * h) as f64 + 2.0 * (l * l) as f64 * h as f64
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) || !v.is_finite() {
        return Err(Error::Argument(format!("{name}={v} outside [0, 1]")));
    }
    Ok(())
}

/// Saving rates for one activated step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRates {
    /// Step index into the schedule (0-based scale index).
    pub step: usize,
    /// Token saving rate η = 1 − token activation ratio.
    pub eta: f64,
    /// Weight saving rate μ = 1 − weight activation ratio.
    pub mu: f64,
}

/// Cost model inputs: architecture plus the activated steps' saving rates.
#[derive(Debug, Clone)]
pub struct CostConfig {
    pub hidden: usize,
    pub depth: usize,
    pub schedule: ScaleSchedule,
    pub n_experts: usize,
    /// Rates for activated steps; steps not listed save nothing.
    pub steps: Vec<StepRates>,
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        for s in &self.steps {
            if s.step >= self.schedule.num_scales() {
                return Err(Error::Argument(format!(
                    "activated step {} outside schedule of {} steps",
                    s.step,
                    self.schedule.num_scales()
                )));
            }
            check_rate("eta", s.eta)?;
            check_rate("mu", s.mu)?;
        }
        Ok(())
    }
}

/// Per-step line item of a cost report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepCost {
    pub step: usize,
    pub tokens: usize,
    pub eta: f64,
    pub mu: f64,
    /// Over all blocks.
    pub reduction: f64,
    pub overhead: f64,
    pub net: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub baseline_convention: String,
    pub hidden: usize,
    pub depth: usize,
    pub n_experts: usize,
    /// Dense cost of the full generation pass (all steps, all blocks).
    pub baseline_total: f64,
    pub per_step: Vec<StepCost>,
    pub reduction_total: f64,
    pub overhead_total: f64,
    /// reduction − overhead, exactly.
    pub net_saving: f64,
    /// net_saving / baseline_total, in percent.
    pub saving_percent: f64,
    /// Set when some activated step costs more than it saves.
    pub warning: Option<String>,
}

/// Evaluates the saving formula over the activated steps and all blocks.
pub fn net_saving(config: &CostConfig) -> Result<CostReport> {
    config.validate()?;
    let d = config.depth as f64;
    let h = config.hidden;
    let baseline_total: f64 = config
        .schedule
        .token_counts()
        .iter()
        .map(|&l| block_baseline(l, h))
        .sum::<f64>()
        * d;
    let mut per_step = Vec::with_capacity(config.steps.len());
    let mut warning = None;
    for s in &config.steps {
        let l = config.schedule.token_count(s.step);
        let reduction = block_reduction(l, h, s.eta, s.mu)? * d;
        let overhead = block_overhead(l, h, s.eta, config.n_experts)? * d;
        let net = reduction - overhead;
        if net <= 0.0 && warning.is_none() {
            warning = Some(format!(
                "step {} net saving is non-positive ({net:.0} FLOPs): gating overhead exceeds the reduction",
                s.step
            ));
        }
        per_step.push(StepCost {
            step: s.step,
            tokens: l,
            eta: s.eta,
            mu: s.mu,
            reduction,
            overhead,
            net,
        });
    }
    let reduction_total: f64 = per_step.iter().map(|s| s.reduction).sum();
    let overhead_total: f64 = per_step.iter().map(|s| s.overhead).sum();
    let net = reduction_total - overhead_total;
    Ok(CostReport {
        baseline_convention: BASELINE_CONVENTION.to_string(),
        hidden: h,
        depth: config.depth,
        n_experts: config.n_experts,
        baseline_total,
        per_step,
        reduction_total,
        overhead_total,
        net_saving: net,
        saving_percent: if baseline_total > 0.0 {
            100.0 * net / baseline_total
        } else {
            0.0
        },
        warning,
    })
}

impl CostReport {
    /// Aligned-column text rendering.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.baseline_convention));
        out.push_str(&format!(
            "# H={} D={} N={} baseline_total={:.0}\n",
            self.hidden, self.depth, self.n_experts, self.baseline_total
        ));
        out.push_str(&format!(
            "{:>5} {:>7} {:>6} {:>6} {:>16} {:>14} {:>16}\n",
            "step", "tokens", "eta", "mu", "reduction", "overhead", "net"
        ));
        for s in &self.per_step {
            out.push_str(&format!(
                "{:>5} {:>7} {:>6.3} {:>6.3} {:>16.0} {:>14.0} {:>16.0}\n",
                s.step, s.tokens, s.eta, s.mu, s.reduction, s.overhead, s.net
            ));
        }
        out.push_str(&format!(
            "net saving: {:.0} FLOPs ({:.2}% of baseline)\n",
            self.net_saving, self.saving_percent
        ));
        if let Some(w) = &self.warning {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// Reconstructed architectures from the published model family: width follows
/// the 64·depth convention. These widths are an assumption for percentage
/// comparisons, not reported facts.
pub fn family_config(depth: usize, schedule: ScaleSchedule, n_experts: usize) -> CostConfig {
    CostConfig {
        hidden: 64 * depth,
        depth,
        schedule,
        n_experts,
        steps: Vec::new(),
    }
}
