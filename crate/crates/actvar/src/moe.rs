//! FFN weight decomposition into equal experts, token-to-expert routing, and
//! the router's distillation / load-balance losses.
//!
//! A dense two-layer FFN `F(x) = gelu(x·W1 + b1)·W2 + b2` is sliced into N
//! equal sub-networks along the hidden dimension: expert j owns hidden units
//! `[j·d_e, (j+1)·d_e)` with `d_e = d_h / N`. The second bias `b2` is stored
//! once and shared. Activating all N experts reproduces the dense FFN.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    add, add_bias_row, concat_cols, concat_rows, gelu, kl_div, matmul, mul, scale, scale_rows,
    softmax, sum_all, topk_indices, Tensor,
};

/// Dense two-layer FFN parameters.
#[derive(Clone)]
pub struct DenseFfn {
    pub w1: Tensor, // [d_p × d_h]
    pub b1: Tensor, // [d_h]
    pub w2: Tensor, // [d_h × d_p]
    pub b2: Tensor, // [d_p]
}

impl DenseFfn {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = gelu(&add_bias_row(&matmul(x, &self.w1).expect("ffn w1"), &self.b1));
        add_bias_row(&matmul(&h, &self.w2).expect("ffn w2"), &self.b2)
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.cols()
    }
}

/// One FFN sub-network produced by weight decomposition.
#[derive(Clone)]
pub struct Expert {
    pub w1: Tensor, // [d_p × d_e]
    pub b1: Tensor, // [d_e]
    pub w2: Tensor, // [d_e × d_p]
}

/// The N equal experts of a decomposed FFN plus the shared output bias.
#[derive(Clone)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
    pub b2: Tensor, // [d_p], shared, added once per token
}

/// Where the shared bias lands in the selected-expert sum. The once-per-token
/// reading reproduces the dense FFN exactly when every expert is active; the
/// per-expert reading adds `K_w · b2` and exists for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SharedBiasMode {
    #[default]
    OncePerToken,
    PerSelectedExpert,
}

/// Slices a dense FFN into `n` equally sized experts.
pub fn split_ffn(ffn: &DenseFfn, n: usize) -> Result<ExpertBank> {
    let d_p = ffn.d_model();
    let d_h = ffn.d_hidden();
    if n == 0 || !d_h.is_multiple_of(n) {
        return Err(Error::Argument(format!(
            "expert count {n} must divide ffn hidden size {d_h}"
        )));
    }
    let d_e = d_h / n;
    let w1 = ffn.w1.to_vec();
    let b1 = ffn.b1.to_vec();
    let w2 = ffn.w2.to_vec();
    let mut experts = Vec::with_capacity(n);
    for j in 0..n {
        let c0 = j * d_e;
        let mut w1j = Vec::with_capacity(d_p * d_e);
        for row in 0..d_p {
            w1j.extend_from_slice(&w1[row * d_h + c0..row * d_h + c0 + d_e]);
        }
        let b1j = b1[c0..c0 + d_e].to_vec();
        let w2j = w2[c0 * d_p..(c0 + d_e) * d_p].to_vec();
        experts.push(Expert {
            w1: Tensor::param(vec![d_p, d_e], w1j),
            b1: Tensor::param(vec![d_e], b1j),
            w2: Tensor::param(vec![d_e, d_p], w2j),
        });
    }
    Ok(ExpertBank {
        experts,
        b2: Tensor::param(vec![d_p], ffn.b2.to_vec()),
    })
}

impl ExpertBank {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.experts[0].w1.rows()
    }

    pub fn d_expert(&self) -> usize {
        self.experts[0].w1.cols()
    }

    /// Reassembles the dense FFN weights by concatenating the expert slices.
    /// Differentiable: gradients flow back to the per-expert parameters.
    pub fn reassemble(&self) -> DenseFfn {
        let w1 = concat_cols(&self.experts.iter().map(|e| e.w1.clone()).collect::<Vec<_>>());
        let b1s: Vec<Tensor> = self
            .experts
            .iter()
            .map(|e| crate::tensor::reshape(&e.b1, vec![1, e.b1.numel()]))
            .collect();
        let b1 = crate::tensor::reshape(&concat_cols(&b1s), vec![w1.cols()]);
        let w2 = concat_rows(&self.experts.iter().map(|e| e.w2.clone()).collect::<Vec<_>>());
        DenseFfn {
            w1,
            b1,
            w2,
            b2: self.b2.clone(),
        }
    }

    /// Single-expert evaluation with the shared bias:
    /// `gelu(x·W1ʲ + b1ʲ)·W2ʲ + b2`.
    pub fn expert_forward(&self, j: usize, x: &Tensor) -> Tensor {
        let e = &self.experts[j];
        let h = gelu(&add_bias_row(&matmul(x, &e.w1).expect("expert w1"), &e.b1));
        add_bias_row(&matmul(&h, &e.w2).expect("expert w2"), &self.b2)
    }

    /// Same but without the shared output bias.
    fn expert_forward_no_b2(&self, j: usize, x: &Tensor) -> Tensor {
        let e = &self.experts[j];
        let h = gelu(&add_bias_row(&matmul(x, &e.w1).expect("expert w1"), &e.b1));
        matmul(&h, &e.w2).expect("expert w2")
    }

    /// Parameter entries using the bank's canonical checkpoint names
    /// (`exp{j}.w1|b1|w2`, shared `b2`).
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (j, e) in self.experts.iter().enumerate() {
            out.push((format!("{prefix}exp{j}.w1"), e.w1.clone()));
            out.push((format!("{prefix}exp{j}.b1"), e.b1.clone()));
            out.push((format!("{prefix}exp{j}.w2"), e.w2.clone()));
        }
        out.push((format!("{prefix}b2"), self.b2.clone()));
        out
    }
}

/// Single linear routing layer `d_p → N`.
#[derive(Clone)]
pub struct RouterParams {
    pub w: Tensor, // [d_p × N]
    pub b: Tensor, // [N]
}

impl RouterParams {
    pub fn init(d_p: usize, n: usize, rng: &mut impl Rng) -> RouterParams {
        let w: Vec<f64> = (0..d_p * n).map(|_| rng.gen_range(-0.05..0.05)).collect();
        RouterParams {
            w: Tensor::param(vec![d_p, n], w),
            b: Tensor::param(vec![n], vec![0.0; n]),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.b.numel()
    }

    pub fn probabilities(&self, x: &Tensor) -> Tensor {
        softmax(&add_bias_row(&matmul(x, &self.w).expect("router"), &self.b), 1)
    }
}

/// Per-token expert probabilities, top-k indicator, and selected expert sets.
#[derive(Clone)]
pub struct RoutingDecision {
    /// [L × N], rows sum to 1. Carries gradient when the router does.
    pub probs: Tensor,
    /// [L × N] binary, exactly `k` ones per row. Detached.
    pub indicator: Tensor,
    /// Selected expert indices per token, descending probability.
    pub selected: Vec<Vec<usize>>,
    pub k: usize,
}

/// Routes each token of `x` to its top-`k` experts by probability.
pub fn route(router: &RouterParams, x: &Tensor, k: usize) -> Result<RoutingDecision> {
    let n = router.num_experts();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("routing k={k} out of range 1..={n}")));
    }
    let probs = router.probabilities(x);
    let rows = probs.rows();
    let mut indicator = vec![0.0; rows * n];
    let mut selected = Vec::with_capacity(rows);
    probs.with_data(|pd| {
        for i in 0..rows {
            let idx = topk_indices(&pd[i * n..(i + 1) * n], k);
            for &j in &idx {
                indicator[i * n + j] = 1.0;
            }
            selected.push(idx);
        }
    });
    Ok(RoutingDecision {
        probs,
        indicator: Tensor::constant(vec![rows, n], indicator),
        selected,
        k,
    })
}

/// Sum of the selected experts' outputs per token (unweighted — routing
/// probabilities never scale the expert outputs), with the shared bias added
/// according to `bias_mode`. Experts are summed in ascending index order.
pub fn moe_forward(
    bank: &ExpertBank,
    decision: &RoutingDecision,
    x: &Tensor,
    bias_mode: SharedBiasMode,
) -> Result<Tensor> {
    let n = bank.num_experts();
    if decision.indicator.cols() != n {
        return Err(Error::Argument(format!(
            "routing decision covers {} experts, bank has {n}",
            decision.indicator.cols()
        )));
    }
    if decision.indicator.rows() != x.rows() {
        return Err(Error::Dimension(format!(
            "routing decision for {} tokens applied to {} tokens",
            decision.indicator.rows(),
            x.rows()
        )));
    }
    let rows = x.rows();
    // Evaluate each used expert on the whole batch and mask the unselected
    // rows to exact zeros; numerically identical to per-token dispatch.
    let mut acc: Option<Tensor> = None;
    for j in 0..n {
        let mask: Vec<f64> =
            decision.indicator.with_data(|ind| (0..rows).map(|i| ind[i * n + j]).collect());
        if mask.iter().all(|&m| m == 0.0) {
            continue;
        }
        let yj = bank.expert_forward_no_b2(j, x);
        let masked = scale_rows(&yj, &Tensor::constant(vec![rows], mask));
        acc = Some(match acc {
            Some(a) => add(&a, &masked)?,
            None => masked,
        });
    }
    let summed = acc.unwrap_or_else(|| Tensor::zeros(vec![rows, bank.d_model()]));
    let out = match bias_mode {
        SharedBiasMode::OncePerToken => add_bias_row(&summed, &bank.b2),
        SharedBiasMode::PerSelectedExpert => {
            let counts: Vec<f64> = decision.selected.iter().map(|s| s.len() as f64).collect();
            let b2_rows = scale_rows(
                &crate::tensor::gather_rows(
                    &crate::tensor::reshape(&bank.b2, vec![1, bank.d_model()]),
                    &vec![0; rows],
                ),
                &Tensor::constant(vec![rows], counts),
            );
            add(&summed, &b2_rows)?
        }
    };
    Ok(out)
}

/// Softmax over the retained entries of a top-k-masked score matrix: kept
/// entries behave as logits, dropped entries as −∞ (exact zeros in the
/// output). Detached.
pub fn masked_softmax_target(
    scores: &[f64],
    rows: usize,
    cols: usize,
    keep: &[Vec<usize>],
) -> Tensor {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let kept = &keep[i];
        let m = kept
            .iter()
            .map(|&j| scores[i * cols + j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &j in kept {
            let e = (scores[i * cols + j] - m).exp();
            out[i * cols + j] = e;
            z += e;
        }
        for &j in kept {
            out[i * cols + j] /= z;
        }
    }
    Tensor::constant(vec![rows, cols], out)
}

/// Teacher-derived routing pseudo-labels: per token, the MSE distance of each
/// expert's output to the dense teacher output, negated, top-k truncated and
/// softmaxed over the survivors. Rows have exactly `k` nonzero entries summing
/// to 1. Detached.
pub fn weight_pseudo_labels(
    bank: &ExpertBank,
    teacher: &DenseFfn,
    x: &Tensor,
    k: usize,
) -> Result<Tensor> {
    let n = bank.num_experts();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k={k} out of range 1..={n}")));
    }
    let rows = x.rows();
    let d_p = bank.d_model();
    crate::tensor::no_grad(|| {
        let teacher_out = teacher.forward(x);
        // negated per-token distances, [L × N]
        let mut neg_dist = vec![0.0; rows * n];
        teacher_out.with_data(|td| {
            for j in 0..n {
                let ej = bank.expert_forward(j, x);
                ej.with_data(|ed| {
                    for i in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..d_p {
                            let d = ed[i * d_p + c] - td[i * d_p + c];
                            acc += d * d;
                        }
                        neg_dist[i * n + j] = -(acc / d_p as f64);
                    }
                });
            }
        });
        let keep: Vec<Vec<usize>> = (0..rows)
            .map(|i| topk_indices(&neg_dist[i * n..(i + 1) * n], k))
            .collect();
        Ok(masked_softmax_target(&neg_dist, rows, n, &keep))
    })
}

/// Mean over tokens of KL(p_w ‖ σ(𝒜_w)), where σ re-softmaxes each
/// pseudo-label row over its top-k support (entries outside the support act
/// as −∞ logits and stay exactly zero).
pub fn router_distill_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if probs.shape() != labels.shape() {
        return Err(Error::Dimension(format!(
            "router loss shapes {:?} vs {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    let (rows, cols) = (labels.rows(), labels.cols());
    let target = labels.with_data(|ld| {
        let keep: Vec<Vec<usize>> = (0..rows)
            .map(|i| (0..cols).filter(|&j| ld[i * cols + j] != 0.0).collect())
            .collect();
        masked_softmax_target(ld, rows, cols, &keep)
    });
    Ok(scale(&kl_div(probs, &target)?, 1.0 / rows as f64))
}

/// Load-balance penalty: (K/N)·Σᵢ Σⱼ 𝕀ⱼ(xᵢ)·p[i,j], summed over every routed
/// token.
pub fn load_balance_loss(decision: &RoutingDecision) -> Tensor {
    let n = decision.indicator.cols() as f64;
    let picked = mul(&decision.probs, &decision.indicator).expect("balance shapes");
    scale(&sum_all(&picked), decision.k as f64 / n)
}
