//! Two-stage distillation training.
//!
//! Stage 1 trains the routers and gated selectors against teacher-derived
//! pseudo-labels with every other parameter frozen. Stage 2 freezes routers
//! and selectors and fine-tunes the experts, attention and head with
//! block-level MSE and output-level KL distillation from the dense teacher.
//!
//! All teacher-side quantities (pseudo-label inputs, hidden-state targets,
//! output distributions) come from the frozen teacher's dense forward pass on
//! the same batch.

use serde::{Deserialize, Serialize};

use crate::backbone::block::FfnParams as BlockFfn;
use crate::backbone::{ActivationPolicy, BlockTrace, VarModel};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::gate::{
    select, selector_distill_loss, token_balance_loss, token_pseudo_labels_from_update,
};
use crate::moe::{load_balance_loss, route, router_distill_loss, weight_pseudo_labels};
use crate::tensor::{add, concat_rows, kl_div, mse, scale, slice_rows, softmax, Tensor};

pub use crate::moe::SharedBiasMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageId {
    One,
    Two,
}

/// Hyperparameters for one training stage. The published-scale values
/// (batch 512, lr 2e-4) are kept as the documented defaults; the `toy_*`
/// constructors scale them down for desk-size runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageId,
    /// Distillation loss weight α.
    pub alpha: f64,
    /// Balance loss weight β.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Linear warmup steps; 0 disables warmup.
    #[serde(default)]
    pub warmup_steps: usize,
}

impl StageConfig {
    pub fn paper_defaults(stage: StageId) -> StageConfig {
        StageConfig {
            stage,
            alpha: 0.05,
            beta: 0.01,
            lr: 2e-4,
            batch_size: 512,
            epochs: if stage == StageId::One { 2 } else { 10 },
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            warmup_steps: 0,
        }
    }

    /// Desk-scale stage 1. The routers and selectors are single linear
    /// layers, so a larger step size is stable and needed for the loss to
    /// move within two epochs over a few hundred samples.
    pub fn toy_stage1() -> StageConfig {
        StageConfig {
            lr: 5e-2,
            batch_size: 32,
            ..StageConfig::paper_defaults(StageId::One)
        }
    }

    pub fn toy_stage2() -> StageConfig {
        StageConfig {
            lr: 1e-3,
            batch_size: 32,
            ..StageConfig::paper_defaults(StageId::Two)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

/// Adam with decoupled weight decay.
pub struct AdamW {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    eps: f64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, cfg: &StageConfig) -> AdamW {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW {
            params,
            m,
            v,
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            warmup_steps: cfg.warmup_steps,
            eps: 1e-8,
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update from the gradients currently accumulated on the parameters.
    pub fn step(&mut self) {
        self.t += 1;
        let lr = if self.warmup_steps > 0 && (self.t as usize) < self.warmup_steps {
            self.lr * self.t as f64 / self.warmup_steps as f64
        } else {
            self.lr
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|data| {
                for j in 0..data.len() {
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -=
                        lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[j]);
                }
            });
        }
    }
}

// ── loss combinators ─────────────────────────────────────────────────────

/// Per-block stage-1 loss components.
pub struct BlockLossTerms {
    pub dis_w: Tensor,
    pub dis_t: Tensor,
    pub bl_w: Tensor,
    pub bl_t: Tensor,
}

/// L_cls + Σ_blocks [α·(L_dis^w + L_dis^t) + β·(L_bl^w + L_bl^t)].
pub fn stage1_loss(
    l_cls: &Tensor,
    blocks: &[BlockLossTerms],
    alpha: f64,
    beta: f64,
) -> Result<Tensor> {
    let mut total = l_cls.clone();
    for b in blocks {
        let dis = scale(&add(&b.dis_w, &b.dis_t)?, alpha);
        let bal = scale(&add(&b.bl_w, &b.bl_t)?, beta);
        total = add(&total, &add(&dis, &bal)?)?;
    }
    Ok(total)
}

/// L_cls + L_f + (1/D)·Σ_blocks L_b.
pub fn stage2_loss(l_cls: &Tensor, l_f: &Tensor, l_b: &[Tensor]) -> Result<Tensor> {
    let mut block_sum = Tensor::scalar(0.0);
    for b in l_b {
        block_sum = add(&block_sum, b)?;
    }
    let mean_b = scale(&block_sum, 1.0 / l_b.len().max(1) as f64);
    add(&add(l_cls, l_f)?, &mean_b)
}

// ── policy installation ──────────────────────────────────────────────────

/// Installs an activation policy on a model after validating it against the
/// model's schedule and blocks.
pub fn apply_activation_policy(model: &mut VarModel, policy: ActivationPolicy) -> Result<()> {
    if policy.token_ratio.len() != model.schedule.num_scales() {
        return Err(Error::Argument(format!(
            "policy covers {} scales, schedule has {}",
            policy.token_ratio.len(),
            model.schedule.num_scales()
        )));
    }
    for r in policy.token_ratio.iter().flatten() {
        if !(*r > 0.0 && *r <= 1.0) {
            return Err(Error::Argument(format!("token ratio {r} outside (0, 1]")));
        }
    }
    if !(policy.weight_ratio > 0.0 && policy.weight_ratio <= 1.0) {
        return Err(Error::Argument(format!(
            "weight ratio {} outside (0, 1]",
            policy.weight_ratio
        )));
    }
    if !policy.activated_scales().is_empty() {
        for b in &model.blocks {
            if b.selector.is_none() {
                return Err(Error::State(
                    "activation policy needs selectors; build the model with to_student".into(),
                ));
            }
        }
    }
    model.set_activation(Some(policy));
    Ok(())
}

// ── parameter partitioning ───────────────────────────────────────────────

fn is_router_or_selector(name: &str) -> bool {
    name.contains(".router.") || name.contains(".selector.")
}

fn is_embedding(name: &str) -> bool {
    matches!(name, "class_emb" | "token_emb" | "pos_emb" | "scale_emb")
}

/// Names and tensors the given stage trains; everything else stays frozen.
/// Stage 1: routers and selectors only. Stage 2: experts, attention, norms
/// and head (routers, selectors and embeddings stay fixed).
pub fn trainable_params(model: &VarModel, stage: StageId) -> Vec<(String, Tensor)> {
    model
        .named_params()
        .into_iter()
        .filter(|(name, _)| match stage {
            StageId::One => is_router_or_selector(name),
            StageId::Two => !is_router_or_selector(name) && !is_embedding(name),
        })
        .collect()
}

// ── reports ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_dis_w: f64,
    pub l_dis_t: f64,
    pub l_bl_w: f64,
    pub l_bl_t: f64,
    pub l_b: f64,
    pub l_f: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: StageId,
    pub epochs: Vec<EpochStats>,
    /// Token→expert assignment counts per expert, pooled over blocks, from
    /// the final epoch.
    pub expert_usage: Vec<u64>,
    /// Σ expert_usage; every routed token contributes K_w assignments.
    pub total_assignments: u64,
    /// Per-block fraction of activated-scale positions selected at least
    /// once during the final epoch.
    pub token_coverage: Vec<f64>,
    pub trainable: Vec<String>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_cls,l_dis_w,l_dis_t,l_bl_w,l_bl_t,l_b,l_f,total\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}\n",
                e.epoch, e.l_cls, e.l_dis_w, e.l_dis_t, e.l_bl_w, e.l_bl_t, e.l_b, e.l_f, e.total
            ));
        }
        out
    }

    /// Shannon entropy (nats) of the normalized expert-usage histogram.
    pub fn expert_usage_entropy(&self) -> f64 {
        entropy(&self.expert_usage)
    }
}

pub fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum()
}

// ── training loops ───────────────────────────────────────────────────────

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

fn expert_count(model: &VarModel) -> Result<usize> {
    model
        .num_experts()
        .ok_or_else(|| Error::State("student model has no expert bank".into()))
}

#[derive(Default)]
struct StatsAcc {
    l_cls: f64,
    l_dis_w: f64,
    l_dis_t: f64,
    l_bl_w: f64,
    l_bl_t: f64,
    l_b: f64,
    l_f: f64,
    total: f64,
    n: usize,
}

impl StatsAcc {
    fn finish(self, epoch: usize) -> EpochStats {
        let n = self.n.max(1) as f64;
        EpochStats {
            epoch,
            l_cls: self.l_cls / n,
            l_dis_w: self.l_dis_w / n,
            l_dis_t: self.l_dis_t / n,
            l_bl_w: self.l_bl_w / n,
            l_bl_t: self.l_bl_t / n,
            l_b: self.l_b / n,
            l_f: self.l_f / n,
            total: self.total / n,
        }
    }
}

struct UsageAcc {
    expert_counts: Vec<u64>,
    /// Per block: (scale, position) pairs selected at least once.
    selected: Vec<std::collections::BTreeSet<(usize, usize)>>,
    activated_positions: usize,
}

impl UsageAcc {
    fn new(n_experts: usize, depth: usize) -> UsageAcc {
        UsageAcc {
            expert_counts: vec![0; n_experts],
            selected: (0..depth).map(|_| Default::default()).collect(),
            activated_positions: 0,
        }
    }

    fn record_routing(&mut self, selected: &[Vec<usize>]) {
        for sel in selected {
            for &j in sel {
                self.expert_counts[j] += 1;
            }
        }
    }
}

/// Per-sample teacher-side quantities for stage 1, computed once: the FFN
/// inputs of all activated scales pooled per block, the routing pseudo-labels
/// on them, and per activated scale the block input rows with their token
/// pseudo-labels.
struct Stage1Cache {
    per_block: Vec<Stage1BlockCache>,
}

struct Stage1BlockCache {
    x_pool: Tensor,
    labels_w: Tensor,
    scales: Vec<Stage1ScaleCache>,
}

struct Stage1ScaleCache {
    scale: usize,
    k_t: usize,
    q_prev: Tensor,
    labels_t: Tensor,
}

/// Per-sample teacher-side quantities for stage 2: hidden-state targets per
/// block and the teacher's output distribution.
struct Stage2Cache {
    block_outputs: Vec<Tensor>,
    probs: Tensor,
}

enum TeacherSide {
    One(Stage1Cache),
    Two(Stage2Cache),
}

fn build_teacher_cache(
    config: &StageConfig,
    teacher: &VarModel,
    student: &VarModel,
    policy: &ActivationPolicy,
    n_experts: usize,
    sample: &Sample,
) -> Result<TeacherSide> {
    let trace =
        crate::tensor::no_grad(|| teacher.forward_teacher_forcing(&sample.maps, sample.class))?;
    match config.stage {
        StageId::One => {
            let activated = policy.activated_scales();
            if activated.is_empty() {
                return Err(Error::State("stage 1 needs at least one activated scale".into()));
            }
            let k_w = policy.k_w(n_experts);
            let mut per_block = Vec::with_capacity(student.blocks.len());
            for (m, sblock) in student.blocks.iter().enumerate() {
                let ttrace: &BlockTrace = &trace.blocks[m];
                let bank = match &sblock.ffn {
                    BlockFfn::Experts { bank, .. } => bank,
                    BlockFfn::Dense(_) => {
                        return Err(Error::State("stage 1 needs an expert-bank student".into()))
                    }
                };
                let teacher_ffn = teacher.blocks[m].ffn.dense();
                let ffn_inputs: Vec<Tensor> = ttrace
                    .ffn_inputs
                    .iter()
                    .filter(|(s, _)| activated.contains(s))
                    .map(|(_, t)| t.clone())
                    .collect();
                if ffn_inputs.is_empty() {
                    return Err(Error::State(
                        "no activated-scale activations recorded in the teacher trace".into(),
                    ));
                }
                let x_pool = concat_rows(&ffn_inputs);
                let labels_w = weight_pseudo_labels(bank, &teacher_ffn, &x_pool, k_w)?;
                let mut scales = Vec::with_capacity(activated.len());
                for &s in &activated {
                    let o = student.schedule.offset(s);
                    let l = student.schedule.token_count(s);
                    let k_t = policy.k_t(s, l).expect("activated scale has a ratio");
                    let q_prev = slice_rows(&ttrace.input, o, o + l);
                    let q_out = slice_rows(&ttrace.output, o, o + l);
                    let labels_t = token_pseudo_labels_from_update(&q_prev, &q_out, k_t);
                    scales.push(Stage1ScaleCache {
                        scale: s,
                        k_t,
                        q_prev,
                        labels_t,
                    });
                }
                per_block.push(Stage1BlockCache {
                    x_pool,
                    labels_w,
                    scales,
                });
            }
            Ok(TeacherSide::One(Stage1Cache { per_block }))
        }
        StageId::Two => Ok(TeacherSide::Two(Stage2Cache {
            block_outputs: trace.blocks.iter().map(|b| b.output.clone()).collect(),
            probs: crate::tensor::no_grad(|| softmax(&trace.logits, 1)),
        })),
    }
}

/// Runs one training stage. The teacher provides the distillation signal and
/// is never modified; the student's stage-appropriate parameters are updated
/// in place and everything else is left bit-identical. Teacher-side
/// quantities are precomputed once per sample (the teacher is frozen, so they
/// are constant across epochs) and held in memory for the whole stage.
pub fn run_stage(
    config: &StageConfig,
    teacher: &VarModel,
    student: &mut VarModel,
    train: &[Sample],
    seed: u64,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let policy = student
        .activation
        .clone()
        .ok_or_else(|| Error::State("student has no activation policy installed".into()))?;
    let n_experts = expert_count(student)?;
    let trainable = trainable_params(student, config.stage);
    let mut opt = AdamW::new(trainable.iter().map(|(_, t)| t.clone()).collect(), config);
    let trainable_names: Vec<String> = trainable.iter().map(|(n, _)| n.clone()).collect();

    let caches: Vec<TeacherSide> = train
        .iter()
        .map(|s| build_teacher_cache(config, teacher, student, &policy, n_experts, s))
        .collect::<Result<_>>()?;

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut usage = UsageAcc::new(n_experts, student.blocks.len());
    for epoch in 0..config.epochs {
        let order =
            shuffled_indices(train.len(), seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        let mut stats = StatsAcc::default();
        let last_epoch = epoch + 1 == config.epochs;
        if last_epoch {
            usage = UsageAcc::new(n_experts, student.blocks.len());
        }
        for batch in order.chunks(config.batch_size) {
            opt.zero_grads();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let sample = &train[i];
                let loss = match (&config.stage, &caches[i]) {
                    (StageId::One, TeacherSide::One(cache)) => stage1_sample_loss(
                        config,
                        student,
                        &policy,
                        sample,
                        cache,
                        &mut stats,
                        if last_epoch { Some(&mut usage) } else { None },
                    )?,
                    (StageId::Two, TeacherSide::Two(cache)) => stage2_sample_loss(
                        student,
                        sample,
                        cache,
                        &mut stats,
                        if last_epoch { Some(&mut usage) } else { None },
                    )?,
                    _ => unreachable!("cache kind matches stage"),
                };
                loss.validate_finite(&format!("stage {:?} epoch {epoch} loss", config.stage))?;
                scale(&loss, inv).backward()?;
            }
            opt.step();
        }
        epochs.push(stats.finish(epoch));
    }

    let total_assignments: u64 = usage.expert_counts.iter().sum();
    let token_coverage = usage
        .selected
        .iter()
        .map(|s| {
            if usage.activated_positions == 0 {
                0.0
            } else {
                s.len() as f64 / usage.activated_positions as f64
            }
        })
        .collect();
    Ok(TrainReport {
        stage: config.stage,
        epochs,
        expert_usage: usage.expert_counts,
        total_assignments,
        token_coverage,
        trainable: trainable_names,
    })
}

/// Stage-1 loss for one sample: the classification loss of the gated student
/// (constant with respect to routers/selectors) plus per-block distillation
/// and balance terms against the cached teacher-side activations and labels.
fn stage1_sample_loss(
    config: &StageConfig,
    student: &VarModel,
    policy: &ActivationPolicy,
    sample: &Sample,
    cache: &Stage1Cache,
    stats: &mut StatsAcc,
    mut usage: Option<&mut UsageAcc>,
) -> Result<Tensor> {
    let l_cls_value = crate::tensor::no_grad(|| -> Result<f64> {
        let t = student.forward_teacher_forcing(&sample.maps, sample.class)?;
        Ok(student.class_loss(&t, &sample.maps)?.item())
    })?;
    let l_cls = Tensor::scalar(l_cls_value);

    let activated = policy.activated_scales();
    if let Some(u) = usage.as_deref_mut() {
        u.activated_positions += activated
            .iter()
            .map(|&s| student.schedule.token_count(s))
            .sum::<usize>();
    }
    let n_experts = student.num_experts().expect("expert-bank student");
    let k_w = policy.k_w(n_experts);
    let mut blocks = Vec::with_capacity(student.blocks.len());
    for (m, sblock) in student.blocks.iter().enumerate() {
        let bc = &cache.per_block[m];
        let router = match &sblock.ffn {
            BlockFfn::Experts { router, .. } => router,
            BlockFfn::Dense(_) => {
                return Err(Error::State("stage 1 needs an expert-bank student".into()))
            }
        };
        let decision = route(router, &bc.x_pool, k_w)?;
        let dis_w = router_distill_loss(&decision.probs, &bc.labels_w)?;
        let bl_w = load_balance_loss(&decision);
        if let Some(u) = usage.as_deref_mut() {
            u.record_routing(&decision.selected);
        }

        // token selection: one distribution per activated scale
        let mut dis_t = Tensor::scalar(0.0);
        let mut bl_t = Tensor::scalar(0.0);
        for sc in &bc.scales {
            let sel = select(
                sblock.selector.as_ref().expect("student selector"),
                &sc.q_prev,
                sc.k_t,
            )?;
            dis_t = add(&dis_t, &selector_distill_loss(&sel.probs, &sc.labels_t)?)?;
            bl_t = add(&bl_t, &token_balance_loss(&sel))?;
            if let Some(u) = usage.as_deref_mut() {
                for &pos in &sel.kept {
                    u.selected[m].insert((sc.scale, pos));
                }
            }
        }
        let dis_t = scale(&dis_t, 1.0 / bc.scales.len().max(1) as f64);

        stats.l_dis_w += dis_w.item();
        stats.l_dis_t += dis_t.item();
        stats.l_bl_w += bl_w.item();
        stats.l_bl_t += bl_t.item();
        blocks.push(BlockLossTerms {
            dis_w,
            dis_t,
            bl_w,
            bl_t,
        });
    }
    let total = stage1_loss(&l_cls, &blocks, config.alpha, config.beta)?;
    stats.l_cls += l_cls_value;
    stats.total += total.item();
    stats.n += 1;
    Ok(total)
}

/// Stage-2 loss for one sample: gated-student classification loss, block-wise
/// MSE against the teacher's cached hidden states, and output-distribution KL
/// against the teacher's cached probabilities.
fn stage2_sample_loss(
    student: &VarModel,
    sample: &Sample,
    cache: &Stage2Cache,
    stats: &mut StatsAcc,
    usage: Option<&mut UsageAcc>,
) -> Result<Tensor> {
    let student_trace = student.forward_teacher_forcing(&sample.maps, sample.class)?;
    let l_cls = student.class_loss(&student_trace, &sample.maps)?;

    let mut l_b = Vec::with_capacity(student.blocks.len());
    for (st, tt) in student_trace.blocks.iter().zip(&cache.block_outputs) {
        l_b.push(mse(&st.output, tt)?);
    }
    if let Some(u) = usage {
        let mut positions = 0;
        for (m, st) in student_trace.blocks.iter().enumerate() {
            for d in &st.details {
                if let Some(r) = &d.routing {
                    u.record_routing(&r.selected);
                }
                if let Some(sel) = &d.selection {
                    positions += sel.indicator.numel();
                    for &pos in &sel.kept {
                        u.selected[m].insert((d.scale, pos));
                    }
                }
            }
        }
        // positions are shared across blocks; count each scale's once
        u.activated_positions += positions / student.blocks.len().max(1);
    }

    let l_sum: f64 = l_b.iter().map(|t| t.item()).sum();
    let p = softmax(&student_trace.logits, 1);
    let tokens = p.rows() as f64;
    let l_f = scale(&kl_div(&p, &cache.probs)?, 1.0 / tokens);

    let total = stage2_loss(&l_cls, &l_f, &l_b)?;
    stats.l_cls += l_cls.item();
    stats.l_b += l_sum / l_b.len().max(1) as f64;
    stats.l_f += l_f.item();
    stats.total += total.item();
    stats.n += 1;
    Ok(total)
}

// ── plain teacher training and evaluation ────────────────────────────────

/// Standard teacher-forcing cross-entropy training of the dense model.
/// Returns the per-epoch mean training loss.
pub fn train_teacher(
    model: &mut VarModel,
    train: &[Sample],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let cfg = StageConfig {
        stage: StageId::Two,
        alpha: 0.05,
        beta: 0.01,
        lr,
        batch_size,
        epochs,
        beta1: 0.9,
        beta2: 0.95,
        weight_decay: 0.05,
        warmup_steps: 0,
    };
    let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let mut opt = AdamW::new(params, &cfg);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = shuffled_indices(train.len(), seed ^ (epoch as u64).wrapping_mul(0x51_7C_C1));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            opt.zero_grads();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let sample = &train[i];
                let trace = model.forward_teacher_forcing(&sample.maps, sample.class)?;
                let loss = model.class_loss(&trace, &sample.maps)?;
                loss.validate_finite(&format!("teacher epoch {epoch} loss"))?;
                epoch_loss += loss.item();
                scale(&loss, inv).backward()?;
            }
            opt.step();
        }
        losses.push(epoch_loss / train.len() as f64);
    }
    Ok(losses)
}

/// Mean teacher-forcing cross-entropy over a sample set.
pub fn eval_cross_entropy(model: &VarModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    crate::tensor::no_grad(|| {
        let mut total = 0.0;
        for s in samples {
            let trace = model.forward_teacher_forcing(&s.maps, s.class)?;
            total += model.class_loss(&trace, &s.maps)?.item();
        }
        Ok(total / samples.len() as f64)
    })
}

/// Expert-usage entropy per block on an evaluation set, from the model's own
/// routing decisions.
pub fn per_block_usage_entropy(model: &VarModel, samples: &[Sample]) -> Result<Vec<f64>> {
    let n = expert_count(model)?;
    crate::tensor::no_grad(|| {
        let mut counts: Vec<Vec<u64>> = vec![vec![0; n]; model.blocks.len()];
        for s in samples {
            let trace = model.forward_teacher_forcing(&s.maps, s.class)?;
            for (m, bt) in trace.blocks.iter().enumerate() {
                for d in &bt.details {
                    if let Some(r) = &d.routing {
                        for sel in &r.selected {
                            for &j in sel {
                                counts[m][j] += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(counts.iter().map(|c| entropy(c)).collect())
    })
}
