//! Layer-adaptive token activation: a gated selector scores the tokens of one
//! scale, the top-K subsequence flows through the block, and the full
//! sequence is reconstructed with unselected tokens passed through unchanged.

use rand::Rng;

use crate::backbone::block::Block;
use crate::error::{Error, Result};
use crate::moe::masked_softmax_target;
use crate::tensor::{
    add_bias_row, gather_rows, kl_div, matmul, mul, reshape, scale, scatter_rows, softmax,
    sum_all, topk_indices, Tensor,
};

/// Single linear scoring layer `H → 1`.
#[derive(Clone)]
pub struct SelectorParams {
    pub w: Tensor, // [H × 1]
    pub b: Tensor, // [1]
}

impl SelectorParams {
    pub fn init(hidden: usize, rng: &mut impl Rng) -> SelectorParams {
        let w: Vec<f64> = (0..hidden).map(|_| rng.gen_range(-0.05..0.05)).collect();
        SelectorParams {
            w: Tensor::param(vec![hidden, 1], w),
            b: Tensor::param(vec![1], vec![0.0]),
        }
    }

    /// Token probabilities: softmax over the sequence of per-token logits.
    pub fn probabilities(&self, x: &Tensor) -> Tensor {
        let logits = add_bias_row(&matmul(x, &self.w).expect("selector"), &self.b);
        softmax(&reshape(&logits, vec![x.rows()]), 0)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}w"), self.w.clone()),
            (format!("{prefix}b"), self.b.clone()),
        ]
    }
}

/// Which tokens of a scale pass through the block.
#[derive(Clone)]
pub struct SelectionDecision {
    /// [L], sums to 1 over the sequence. Carries gradient when the selector
    /// does.
    pub probs: Tensor,
    /// [L] binary, exactly `k` ones. Detached.
    pub indicator: Tensor,
    /// Gather map, compact index → original position, strictly increasing.
    pub kept: Vec<usize>,
    pub k: usize,
}

impl SelectionDecision {
    /// All-token decision (identity gating).
    pub fn full(probs: Tensor) -> SelectionDecision {
        let l = probs.numel();
        SelectionDecision {
            probs,
            indicator: Tensor::constant(vec![l], vec![1.0; l]),
            kept: (0..l).collect(),
            k: l,
        }
    }
}

/// Scores each token of `x` and keeps the top `k`; the gather map is sorted
/// so extraction is order-preserving.
pub fn select(selector: &SelectorParams, x: &Tensor, k: usize) -> Result<SelectionDecision> {
    let l = x.rows();
    if k == 0 || k > l {
        return Err(Error::Argument(format!("selection k={k} out of range 1..={l}")));
    }
    let probs = selector.probabilities(x);
    let mut kept = probs.with_data(|p| topk_indices(p, k));
    kept.sort_unstable();
    let mut indicator = vec![0.0; l];
    for &i in &kept {
        indicator[i] = 1.0;
    }
    Ok(SelectionDecision {
        probs,
        indicator: Tensor::constant(vec![l], indicator),
        kept,
        k,
    })
}

/// The compact subsequence of selected rows, in original order.
pub fn extract(x: &Tensor, decision: &SelectionDecision) -> Tensor {
    gather_rows(x, &decision.kept)
}

/// Updated compact rows scattered back to their positions; unselected
/// positions reuse the block input. Output length is always L.
pub fn reconstruct(
    q_prev: &Tensor,
    q_hat: &Tensor,
    decision: &SelectionDecision,
) -> Result<Tensor> {
    if q_hat.rows() != decision.kept.len() {
        return Err(Error::Dimension(format!(
            "reconstruct: {} updated rows for {} selected positions",
            q_hat.rows(),
            decision.kept.len()
        )));
    }
    scatter_rows(q_prev, q_hat, &decision.kept)
}

/// One scale segment through a block as its selected-token subsequence:
/// extraction, attention over earlier-scale KV plus the selected rows only,
/// the block FFN, and the residual structure of the dense block. Returns the
/// compact updated rows (K_t × H).
pub fn compact_block_forward(
    block: &Block,
    q_prev: &Tensor,
    decision: &SelectionDecision,
    ctx_k: Option<&Tensor>,
    ctx_v: Option<&Tensor>,
) -> Result<Tensor> {
    block.compact_rows_forward(q_prev, &decision.kept, ctx_k, ctx_v)
}

/// Teacher-derived token pseudo-labels for one scale: the full segment runs
/// through the block, each token's update distance ‖q*ᵢ − qᵢ‖₂ is ranked, and
/// the top-k distances are softmaxed (zeros elsewhere). Detached.
pub fn token_pseudo_labels(
    block: &Block,
    q_prev: &Tensor,
    ctx_k: Option<&Tensor>,
    ctx_v: Option<&Tensor>,
    k: usize,
) -> Result<Tensor> {
    let l = q_prev.rows();
    if k == 0 || k > l {
        return Err(Error::Argument(format!("k={k} out of range 1..={l}")));
    }
    crate::tensor::no_grad(|| {
        let full = SelectionDecision::full(Tensor::constant(vec![l], vec![1.0 / l as f64; l]));
        let q_star = block.compact_rows_forward(q_prev, &full.kept, ctx_k, ctx_v)?;
        Ok(token_pseudo_labels_from_update(q_prev, &q_star, k))
    })
}

/// Same labels computed from an already-available full-pass output.
pub fn token_pseudo_labels_from_update(q_prev: &Tensor, q_star: &Tensor, k: usize) -> Tensor {
    let l = q_prev.rows();
    let h = q_prev.cols();
    let mut dist = vec![0.0; l];
    q_prev.with_data(|a| {
        q_star.with_data(|b| {
            for i in 0..l {
                let mut acc = 0.0;
                for c in 0..h {
                    let d = b[i * h + c] - a[i * h + c];
                    acc += d * d;
                }
                dist[i] = acc.sqrt();
            }
        })
    });
    let keep = vec![topk_indices(&dist, k)];
    reshape(&masked_softmax_target(&dist, 1, l, &keep), vec![l])
}

/// KL(p_t ‖ σ(𝒜_t)) with the same top-k-masked softmax convention as the
/// router loss.
pub fn selector_distill_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if probs.shape() != labels.shape() {
        return Err(Error::Dimension(format!(
            "selector loss shapes {:?} vs {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    let l = labels.numel();
    let target = labels.with_data(|ld| {
        let keep = vec![(0..l).filter(|&i| ld[i] != 0.0).collect::<Vec<_>>()];
        reshape(&masked_softmax_target(ld, 1, l, &keep), vec![l])
    });
    kl_div(probs, &target)
}

/// Token analog of the expert balance penalty: (K_t/L)·Σᵢ ℐ[i]·p[i].
pub fn token_balance_loss(decision: &SelectionDecision) -> Tensor {
    let l = decision.indicator.numel() as f64;
    let picked = mul(&decision.probs, &decision.indicator).expect("balance shapes");
    scale(&sum_all(&picked), decision.k as f64 / l)
}
