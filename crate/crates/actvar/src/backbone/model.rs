//! The full backbone model: embeddings, block stack, head, teacher-forcing
//! forward, and seeded scale-by-scale generation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::KvCache;
use super::block::{Block, FfnParams, LayerNormParams, ScaleDetail};
use super::{BackboneConfig, ScaleSchedule, TokenMap};
use crate::error::{Error, Result};
use crate::gate::SelectorParams;
use crate::moe::{split_ffn, RouterParams, SharedBiasMode};
use crate::tensor::{
    add, add_bias_row, concat_rows, cross_entropy, embedding, gather_rows, matmul, read_checkpoint,
    slice_rows, softmax, topk_indices, upsample_bilinear, write_checkpoint, Tensor,
};

/// Resolved per-scale activation policy installed on a model. Scales with a
/// token ratio run gated (and expert-routed when the FFN is an expert bank);
/// all other scales run dense.
#[derive(Debug, Clone)]
pub struct ActivationPolicy {
    /// Token activation ratio per scale, `None` = dense.
    pub token_ratio: Vec<Option<f64>>,
    /// Weight (expert) activation ratio γ at activated scales.
    pub weight_ratio: f64,
    pub bias_mode: SharedBiasMode,
}

/// Round-half-up count with a floor of one.
pub fn activation_count(ratio: f64, n: usize) -> usize {
    (((ratio * n as f64) + 0.5).floor() as usize).clamp(1, n)
}

impl ActivationPolicy {
    pub fn dense(num_scales: usize) -> ActivationPolicy {
        ActivationPolicy {
            token_ratio: vec![None; num_scales],
            weight_ratio: 1.0,
            bias_mode: SharedBiasMode::OncePerToken,
        }
    }

    pub fn k_t(&self, scale: usize, len: usize) -> Option<usize> {
        self.token_ratio
            .get(scale)
            .copied()
            .flatten()
            .map(|r| activation_count(r, len))
    }

    pub fn k_w(&self, num_experts: usize) -> usize {
        activation_count(self.weight_ratio, num_experts)
    }

    pub fn activated_scales(&self) -> Vec<usize> {
        self.token_ratio
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|_| i))
            .collect()
    }
}

/// What one block saw and produced during a teacher-forcing pass.
pub struct BlockTrace {
    pub input: Tensor,
    pub output: Tensor,
    /// Dense-path FFN inputs per scale (scale index, LN2 output rows).
    pub ffn_inputs: Vec<(usize, Tensor)>,
    pub details: Vec<ScaleDetail>,
}

pub struct ForwardTrace {
    pub logits: Tensor,
    pub blocks: Vec<BlockTrace>,
}

pub struct VarModel {
    pub cfg: BackboneConfig,
    pub schedule: ScaleSchedule,
    pub class_emb: Tensor,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub scale_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNormParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub activation: Option<ActivationPolicy>,
}

impl VarModel {
    /// Fresh dense model, deterministic in the seed.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<VarModel> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let emb = |rows: usize, rng: &mut ChaCha8Rng| -> Tensor {
            let data: Vec<f64> = (0..rows * h).map(|_| rng.gen_range(-0.05..0.05)).collect();
            Tensor::param(vec![rows, h], data)
        };
        let class_emb = emb(cfg.classes, &mut rng);
        let token_emb = emb(cfg.vocab, &mut rng);
        let pos_emb = emb(schedule.total_length(), &mut rng);
        let scale_emb = emb(schedule.num_scales(), &mut rng);
        let blocks = (0..cfg.depth)
            .map(|_| Block::init_dense(h, cfg.heads, cfg.ffn_hidden, &mut rng))
            .collect();
        let head_w: Vec<f64> = (0..h * cfg.vocab).map(|_| rng.gen_range(-0.05..0.05)).collect();
        Ok(VarModel {
            cfg: cfg.clone(),
            schedule,
            class_emb,
            token_emb,
            pos_emb,
            scale_emb,
            blocks,
            final_ln: LayerNormParams::init(h),
            head_w: Tensor::param(vec![h, cfg.vocab], head_w),
            head_b: Tensor::param(vec![cfg.vocab], vec![0.0; cfg.vocab]),
            activation: None,
        })
    }

    /// Student copy: identical parameter values, each block's FFN decomposed
    /// into `n_experts` equal experts, and fresh routers/selectors.
    pub fn to_student(&self, n_experts: usize, seed: u64) -> Result<VarModel> {
        if n_experts == 0 || !self.cfg.ffn_hidden.is_multiple_of(n_experts) {
            return Err(Error::Argument(format!(
                "expert count {n_experts} must divide ffn hidden {}",
                self.cfg.ffn_hidden
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let copy = |t: &Tensor| Tensor::param(t.shape().to_vec(), t.to_vec());
        let copy_ln = |ln: &LayerNormParams| LayerNormParams {
            gain: copy(&ln.gain),
            bias: copy(&ln.bias),
        };
        let h = self.cfg.hidden;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let dense = b.ffn.dense();
            let dense_copy = crate::moe::DenseFfn {
                w1: copy(&dense.w1),
                b1: copy(&dense.b1),
                w2: copy(&dense.w2),
                b2: copy(&dense.b2),
            };
            let bank = if n_experts == 1 {
                split_ffn(&dense_copy, 1)?
            } else {
                split_ffn(&dense_copy, n_experts)?
            };
            blocks.push(Block {
                ln1: copy_ln(&b.ln1),
                attn: crate::backbone::attention::AttentionParams {
                    wq: copy(&b.attn.wq),
                    bq: copy(&b.attn.bq),
                    wk: copy(&b.attn.wk),
                    bk: copy(&b.attn.bk),
                    wv: copy(&b.attn.wv),
                    bv: copy(&b.attn.bv),
                    wo: copy(&b.attn.wo),
                    bo: copy(&b.attn.bo),
                    heads: b.attn.heads,
                },
                ln2: copy_ln(&b.ln2),
                ffn: FfnParams::Experts {
                    bank,
                    router: RouterParams::init(h, n_experts, &mut rng),
                },
                selector: Some(SelectorParams::init(h, &mut rng)),
            });
        }
        Ok(VarModel {
            cfg: self.cfg.clone(),
            schedule: self.schedule.clone(),
            class_emb: copy(&self.class_emb),
            token_emb: copy(&self.token_emb),
            pos_emb: copy(&self.pos_emb),
            scale_emb: copy(&self.scale_emb),
            blocks,
            final_ln: copy_ln(&self.final_ln),
            head_w: copy(&self.head_w),
            head_b: copy(&self.head_b),
            activation: None,
        })
    }

    pub fn set_activation(&mut self, policy: Option<ActivationPolicy>) {
        self.activation = policy;
    }

    pub fn num_experts(&self) -> Option<usize> {
        match &self.blocks[0].ffn {
            FfnParams::Dense(_) => None,
            FfnParams::Experts { bank, .. } => Some(bank.num_experts()),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut v = vec![
            ("class_emb".to_string(), self.class_emb.clone()),
            ("token_emb".to_string(), self.token_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
            ("scale_emb".to_string(), self.scale_emb.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.named_params(&format!("blk{i}.")));
        }
        v.extend(self.final_ln.named_params("final_ln."));
        v.push(("head.w".to_string(), self.head_w.clone()));
        v.push(("head.b".to_string(), self.head_b.clone()));
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.named_params())
    }

    /// Loads parameter values by name; the checkpoint must cover exactly this
    /// model's parameter set with matching shapes.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        let mut by_name: std::collections::BTreeMap<String, _> =
            entries.into_iter().map(|e| (e.name.clone(), e)).collect();
        for (name, t) in self.named_params() {
            let e = by_name.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {name} missing from checkpoint"))
            })?;
            if e.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} vs model {:?}",
                    e.shape,
                    t.shape()
                )));
            }
            t.update_data(|d| d.copy_from_slice(&e.data));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has unknown parameter {extra}"
            )));
        }
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.cfg.classes {
            return Err(Error::Argument(format!(
                "class {class} out of {}",
                self.cfg.classes
            )));
        }
        Ok(())
    }

    /// Input rows for one scale: the class embedding at scale 0, otherwise
    /// the bilinear upsampling of the previous scale's embedded token grid;
    /// plus scale and positional embeddings.
    fn scale_input(&self, scale: usize, prev_tokens: Option<&[usize]>, class: usize) -> Result<Tensor> {
        let content = if scale == 0 {
            gather_rows(&self.class_emb, &[class])
        } else {
            let prev = prev_tokens.expect("previous tokens required after scale 0");
            let emb = embedding(&self.token_emb, prev);
            upsample_bilinear(&emb, self.schedule.side(scale - 1), self.schedule.side(scale))?
        };
        let l = self.schedule.token_count(scale);
        let o = self.schedule.offset(scale);
        let scale_rows = gather_rows(&self.scale_emb, &vec![scale; l]);
        let pos = slice_rows(&self.pos_emb, o, o + l);
        add(&add(&content, &scale_rows)?, &pos)
    }

    fn validate_maps(&self, maps: &[TokenMap]) -> Result<()> {
        if maps.len() != self.schedule.num_scales() {
            return Err(Error::Argument(format!(
                "{} token maps for {} scales",
                maps.len(),
                self.schedule.num_scales()
            )));
        }
        for (i, m) in maps.iter().enumerate() {
            if m.scale_index != i {
                return Err(Error::Argument(format!(
                    "token map {i} labelled scale {}",
                    m.scale_index
                )));
            }
            m.validate(&self.schedule, self.cfg.vocab)?;
        }
        Ok(())
    }

    /// Teacher-forcing forward: every scale's logits are computed from the
    /// class embedding and the ground-truth maps of earlier scales only.
    pub fn forward_teacher_forcing(&self, maps: &[TokenMap], class: usize) -> Result<ForwardTrace> {
        self.check_class(class)?;
        self.validate_maps(maps)?;
        let mut scale_inputs = Vec::with_capacity(self.schedule.num_scales());
        for s in 0..self.schedule.num_scales() {
            let prev = if s == 0 { None } else { Some(maps[s - 1].ids()) };
            scale_inputs.push(self.scale_input(s, prev.as_deref(), class)?);
        }
        let mut x = concat_rows(&scale_inputs);

        let dense_policy = ActivationPolicy::dense(self.schedule.num_scales());
        let policy = self.activation.as_ref().unwrap_or(&dense_policy);
        let n_experts = self.num_experts();

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = x.clone();
            let dense_ffn = block.ffn.dense();
            let mut ctx_k: Option<Tensor> = None;
            let mut ctx_v: Option<Tensor> = None;
            let mut outs = Vec::with_capacity(self.schedule.num_scales());
            let mut ffn_inputs = Vec::new();
            let mut details = Vec::new();
            for s in 0..self.schedule.num_scales() {
                let o = self.schedule.offset(s);
                let l = self.schedule.token_count(s);
                let seg = slice_rows(&x, o, o + l);
                let k_t = policy.k_t(s, l);
                let k_w = match (k_t, n_experts) {
                    (Some(_), Some(n)) => Some(policy.k_w(n)),
                    _ => None,
                };
                let outcome = block.segment_forward(
                    &seg,
                    ctx_k.as_ref(),
                    ctx_v.as_ref(),
                    k_t,
                    k_w,
                    &dense_ffn,
                    policy.bias_mode,
                    s,
                )?;
                if let Some(f) = &outcome.ffn_input {
                    ffn_inputs.push((s, f.clone()));
                }
                if let Some(d) = outcome.detail {
                    details.push(d);
                }
                ctx_k = Some(match ctx_k {
                    Some(c) => concat_rows(&[c, outcome.k_all.clone()]),
                    None => outcome.k_all.clone(),
                });
                ctx_v = Some(match ctx_v {
                    Some(c) => concat_rows(&[c, outcome.v_all.clone()]),
                    None => outcome.v_all.clone(),
                });
                outs.push(outcome.out);
            }
            x = concat_rows(&outs);
            blocks.push(BlockTrace {
                input,
                output: x.clone(),
                ffn_inputs,
                details,
            });
        }

        let h = self.final_ln.apply(&x);
        let logits = add_bias_row(&matmul(&h, &self.head_w)?, &self.head_b);
        Ok(ForwardTrace { logits, blocks })
    }

    /// Mean token cross-entropy of a trace's logits against the ground-truth
    /// maps.
    pub fn class_loss(&self, trace: &ForwardTrace, maps: &[TokenMap]) -> Result<Tensor> {
        let mut targets = Vec::with_capacity(self.schedule.total_length());
        for m in maps {
            targets.extend(m.ids());
        }
        cross_entropy(&trace.logits, &targets)
    }

    /// Scale-by-scale sampling with per-block KV caches. Deterministic given
    /// the seed; `temperature = 0` is argmax decoding.
    pub fn generate(&self, class: usize, seed: u64, temperature: f64) -> Result<Vec<TokenMap>> {
        self.check_class(class)?;
        crate::tensor::no_grad(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dense_policy = ActivationPolicy::dense(self.schedule.num_scales());
            let policy = self.activation.as_ref().unwrap_or(&dense_policy);
            let n_experts = self.num_experts();
            let dense_ffns: Vec<_> = self.blocks.iter().map(|b| b.ffn.dense()).collect();
            let mut caches: Vec<KvCache> = self.blocks.iter().map(|_| KvCache::new()).collect();
            let mut maps: Vec<TokenMap> = Vec::with_capacity(self.schedule.num_scales());
            for s in 0..self.schedule.num_scales() {
                let prev = if s == 0 { None } else { Some(maps[s - 1].ids()) };
                let mut x = self.scale_input(s, prev.as_deref(), class)?;
                let o = self.schedule.offset(s);
                let l = self.schedule.token_count(s);
                let k_t = policy.k_t(s, l);
                let k_w = match (k_t, n_experts) {
                    (Some(_), Some(n)) => Some(policy.k_w(n)),
                    _ => None,
                };
                for (b, block) in self.blocks.iter().enumerate() {
                    let outcome = block.forward_step(
                        &mut caches[b],
                        &x,
                        o,
                        k_t,
                        k_w,
                        &dense_ffns[b],
                        policy.bias_mode,
                        s,
                    )?;
                    x = outcome.out;
                }
                let h = self.final_ln.apply(&x);
                let logits = add_bias_row(&matmul(&h, &self.head_w)?, &self.head_b);
                let tokens = sample_rows(&logits, temperature, &mut rng);
                maps.push(TokenMap::new(s, self.schedule.side(s), tokens)?);
            }
            Ok(maps)
        })
    }
}

/// One token per logits row. Temperature 0 is argmax with lowest-index ties;
/// otherwise inverse-CDF sampling from softmax(logits / temperature).
fn sample_rows(logits: &Tensor, temperature: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let (rows, vocab) = (logits.rows(), logits.cols());
    if temperature <= 0.0 {
        return logits.with_data(|d| {
            (0..rows)
                .map(|i| topk_indices(&d[i * vocab..(i + 1) * vocab], 1)[0] as u32)
                .collect()
        });
    }
    let probs = softmax(&crate::tensor::scale(logits, 1.0 / temperature), 1);
    probs.with_data(|p| {
        (0..rows)
            .map(|i| {
                let row = &p[i * vocab..(i + 1) * vocab];
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (j, &pj) in row.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        return j as u32;
                    }
                }
                (vocab - 1) as u32
            })
            .collect()
    })
}
