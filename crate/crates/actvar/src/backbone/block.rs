//! One pre-norm transformer block, processed scale segment by scale segment.
//!
//! Dense path:  x + Attn(LN1(x)), then + FFN(LN2(·)). The current scale's
//! tokens attend to the projected keys/values of all earlier scales (the
//! context) plus the whole current segment.
//!
//! Gated path: only the selected tokens flow through attention and the FFN
//! (attending to the context plus the selected subset only) and the updated
//! rows are scattered back, unselected positions passing through unchanged.

use rand::Rng;

use super::attention::{AttentionParams, KvCache};
use crate::error::{Error, Result};
use crate::gate::{select, SelectionDecision, SelectorParams};
use crate::moe::{moe_forward, route, DenseFfn, ExpertBank, RouterParams, RoutingDecision, SharedBiasMode};
use crate::tensor::{add, concat_rows, gather_rows, layer_norm, scatter_rows, Tensor};

#[derive(Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn init(width: usize) -> LayerNormParams {
        LayerNormParams {
            gain: Tensor::param(vec![width], vec![1.0; width]),
            bias: Tensor::param(vec![width], vec![0.0; width]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        layer_norm(x, &self.gain, &self.bias)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}g"), self.gain.clone()),
            (format!("{prefix}b"), self.bias.clone()),
        ]
    }
}

/// The block FFN: dense weights, or an expert bank with its router.
#[derive(Clone)]
pub enum FfnParams {
    Dense(DenseFfn),
    Experts { bank: ExpertBank, router: RouterParams },
}

impl FfnParams {
    /// Dense weights for unrouted evaluation. For an expert bank this is the
    /// (bitwise) reassembly of the slices, so gradients still reach the
    /// per-expert parameters.
    pub fn dense(&self) -> DenseFfn {
        match self {
            FfnParams::Dense(f) => f.clone(),
            FfnParams::Experts { bank, .. } => bank.reassemble(),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        match self {
            FfnParams::Dense(f) => vec![
                (format!("{prefix}ffn.w1"), f.w1.clone()),
                (format!("{prefix}ffn.b1"), f.b1.clone()),
                (format!("{prefix}ffn.w2"), f.w2.clone()),
                (format!("{prefix}ffn.b2"), f.b2.clone()),
            ],
            FfnParams::Experts { bank, router } => {
                let mut v = bank.named_params(prefix);
                v.push((format!("{prefix}router.w"), router.w.clone()));
                v.push((format!("{prefix}router.b"), router.b.clone()));
                v
            }
        }
    }
}

/// Per-scale record of what the dynamic machinery decided.
#[derive(Clone)]
pub struct ScaleDetail {
    pub scale: usize,
    pub selection: Option<SelectionDecision>,
    pub routing: Option<RoutingDecision>,
}

/// Result of pushing one scale segment through a block.
pub struct SegmentOutcome {
    /// [L_s × H] output rows for the scale (full length, reconstructed).
    pub out: Tensor,
    /// Projected keys/values for all rows of the segment; these feed the
    /// context of later scales.
    pub k_all: Tensor,
    pub v_all: Tensor,
    /// Dense path only: the FFN input (LN2 output) for the whole segment.
    pub ffn_input: Option<Tensor>,
    pub detail: Option<ScaleDetail>,
}

#[derive(Clone)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
    pub selector: Option<SelectorParams>,
}

impl Block {
    pub fn init_dense(hidden: usize, heads: usize, ffn_hidden: usize, rng: &mut impl Rng) -> Block {
        let u = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect()
        };
        let ffn = DenseFfn {
            w1: Tensor::param(vec![hidden, ffn_hidden], u(rng, hidden * ffn_hidden)),
            b1: Tensor::param(vec![ffn_hidden], vec![0.0; ffn_hidden]),
            w2: Tensor::param(vec![ffn_hidden, hidden], u(rng, ffn_hidden * hidden)),
            b2: Tensor::param(vec![hidden], vec![0.0; hidden]),
        };
        Block {
            ln1: LayerNormParams::init(hidden),
            attn: AttentionParams::init(hidden, heads, rng),
            ln2: LayerNormParams::init(hidden),
            ffn: FfnParams::Dense(ffn),
            selector: None,
        }
    }

    /// One scale segment through the block. `ctx_k`/`ctx_v` carry the
    /// projected keys/values of all earlier scales (`None` for the first).
    /// `k_t = Some(K_t)` activates token gating, `k_w = Some(K_w)` expert
    /// routing; `dense_ffn` is the precomputed unrouted FFN.
    #[allow(clippy::too_many_arguments)]
    pub fn segment_forward(
        &self,
        seg_x: &Tensor,
        ctx_k: Option<&Tensor>,
        ctx_v: Option<&Tensor>,
        k_t: Option<usize>,
        k_w: Option<usize>,
        dense_ffn: &DenseFfn,
        bias_mode: SharedBiasMode,
        scale_index: usize,
    ) -> Result<SegmentOutcome> {
        let h = self.ln1.apply(seg_x);
        let k_all = self.attn.project_k(&h);
        let v_all = self.attn.project_v(&h);

        let with_ctx = |own_k: Tensor, own_v: Tensor| -> (Tensor, Tensor) {
            match (ctx_k, ctx_v) {
                (Some(ck), Some(cv)) => (
                    concat_rows(&[ck.clone(), own_k]),
                    concat_rows(&[cv.clone(), own_v]),
                ),
                _ => (own_k, own_v),
            }
        };

        match k_t {
            None => {
                let q = self.attn.project_q(&h);
                let (keys, values) = with_ctx(k_all.clone(), v_all.clone());
                let a = add(seg_x, &self.attn.mix(&q, &keys, &values)?)?;
                let h2 = self.ln2.apply(&a);
                let (f, routing) = self.ffn_eval(&h2, k_w, dense_ffn, bias_mode)?;
                let out = add(&a, &f)?;
                let detail = routing.map(|r| ScaleDetail {
                    scale: scale_index,
                    selection: None,
                    routing: Some(r),
                });
                Ok(SegmentOutcome {
                    out,
                    k_all,
                    v_all,
                    ffn_input: Some(h2),
                    detail,
                })
            }
            Some(kt) => {
                let selector = self.selector.as_ref().ok_or_else(|| {
                    Error::State("token gating requested but no selector installed".into())
                })?;
                // Selection reads a detached copy: defining property of the
                // design is that no gradient reaches the selector through the
                // forward path.
                let sel = select(selector, &seg_x.detach(), kt)?;
                let xc = gather_rows(seg_x, &sel.kept);
                let hc = gather_rows(&h, &sel.kept);
                let q = self.attn.project_q(&hc);
                let (keys, values) = with_ctx(
                    gather_rows(&k_all, &sel.kept),
                    gather_rows(&v_all, &sel.kept),
                );
                let a = add(&xc, &self.attn.mix(&q, &keys, &values)?)?;
                let h2 = self.ln2.apply(&a);
                let (f, routing) = self.ffn_eval(&h2, k_w, dense_ffn, bias_mode)?;
                let compact = add(&a, &f)?;
                let out = scatter_rows(seg_x, &compact, &sel.kept)?;
                Ok(SegmentOutcome {
                    out,
                    k_all,
                    v_all,
                    ffn_input: None,
                    detail: Some(ScaleDetail {
                        scale: scale_index,
                        selection: Some(sel),
                        routing,
                    }),
                })
            }
        }
    }

    fn ffn_eval(
        &self,
        h2: &Tensor,
        k_w: Option<usize>,
        dense_ffn: &DenseFfn,
        bias_mode: SharedBiasMode,
    ) -> Result<(Tensor, Option<RoutingDecision>)> {
        match (k_w, &self.ffn) {
            (Some(kw), FfnParams::Experts { bank, router }) => {
                let decision = route(router, &h2.detach(), kw)?;
                let f = moe_forward(bank, &decision, h2, bias_mode)?;
                Ok((f, Some(decision)))
            }
            (Some(_), FfnParams::Dense(_)) => Err(Error::State(
                "weight routing requested but the block has a dense FFN".into(),
            )),
            (None, _) => Ok((dense_ffn.forward(h2), None)),
        }
    }

    /// Generation-time step: checks that the cache covers exactly the earlier
    /// scales, runs the segment, and appends this scale's keys/values.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_step(
        &self,
        cache: &mut KvCache,
        seg_x: &Tensor,
        expected_ctx: usize,
        k_t: Option<usize>,
        k_w: Option<usize>,
        dense_ffn: &DenseFfn,
        bias_mode: SharedBiasMode,
        scale_index: usize,
    ) -> Result<SegmentOutcome> {
        if cache.len() != expected_ctx {
            return Err(Error::State(format!(
                "kv cache holds {} positions, scale {scale_index} expects {expected_ctx}",
                cache.len()
            )));
        }
        let outcome = self.segment_forward(
            seg_x,
            cache.k(),
            cache.v(),
            k_t,
            k_w,
            dense_ffn,
            bias_mode,
            scale_index,
        )?;
        cache.append(&outcome.k_all, &outcome.v_all);
        Ok(outcome)
    }

    /// Compact forward of an explicit row subset (the token-gate primitive):
    /// the selected rows attend to the context plus themselves and pass
    /// through the block's unrouted FFN. Returns the K × H compact update.
    pub fn compact_rows_forward(
        &self,
        q_prev: &Tensor,
        kept: &[usize],
        ctx_k: Option<&Tensor>,
        ctx_v: Option<&Tensor>,
    ) -> Result<Tensor> {
        if ctx_k.is_some() != ctx_v.is_some() {
            return Err(Error::State("kv cache must provide both keys and values".into()));
        }
        let xc = gather_rows(q_prev, kept);
        let hc = self.ln1.apply(&xc);
        let own_k = self.attn.project_k(&hc);
        let own_v = self.attn.project_v(&hc);
        let (keys, values) = match (ctx_k, ctx_v) {
            (Some(ck), Some(cv)) => (
                concat_rows(&[ck.clone(), own_k]),
                concat_rows(&[cv.clone(), own_v]),
            ),
            _ => (own_k, own_v),
        };
        let q = self.attn.project_q(&hc);
        let a = add(&xc, &self.attn.mix(&q, &keys, &values)?)?;
        let h2 = self.ln2.apply(&a);
        let f = self.ffn.dense().forward(&h2);
        add(&a, &f)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut v = self.ln1.named_params(&format!("{prefix}ln1."));
        v.extend(self.attn.named_params(&format!("{prefix}attn.")));
        v.extend(self.ln2.named_params(&format!("{prefix}ln2.")));
        v.extend(self.ffn.named_params(prefix));
        if let Some(sel) = &self.selector {
            v.extend(sel.named_params(&format!("{prefix}selector.")));
        }
        v
    }
}
