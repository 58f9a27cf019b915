//! End-to-end experiment orchestration: synthetic data, teacher training,
//! two-stage distillation, evaluation, FLOPs reports, activation-map export
//! and ablation sweeps. Every artifact a run produces lands in its own output
//! directory and is byte-reproducible from the spec and seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ActivationPolicy, BackboneConfig, ScaleSchedule, VarModel};
use crate::data::{gen_dataset, DatasetSpec, Sample};
use crate::distill::{
    apply_activation_policy, eval_cross_entropy, per_block_usage_entropy, run_stage,
    train_teacher, SharedBiasMode, StageConfig, StageId,
};
use crate::error::{Error, Result};
use crate::flops::{net_saving, CostConfig, StepRates};
use crate::tensor::no_grad;

/// Dynamic-activation settings: which generation steps run sparse and how
/// sparse. `scales` uses 1-based step numbers (step 1 is the coarsest scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationConfig {
    /// Token activation ratio per activated scale, matching `scales`.
    pub token_ratios: Vec<f64>,
    /// Weight (expert) activation ratio γ.
    pub weight_ratio: f64,
    /// Expert count N.
    pub experts: usize,
    /// 1-based activated step numbers.
    pub scales: Vec<usize>,
}

impl ActivationConfig {
    /// The published default: both token ratios and the weight ratio at 75%
    /// on the final two steps, 16 experts.
    pub fn default_75(num_scales: usize) -> ActivationConfig {
        ActivationConfig {
            token_ratios: vec![0.75, 0.75],
            weight_ratio: 0.75,
            experts: 16,
            scales: vec![num_scales - 1, num_scales],
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let schedule = backbone.schedule()?;
        if self.experts == 0 || !backbone.ffn_hidden.is_multiple_of(self.experts) {
            return Err(Error::Config(format!(
                "expert count {} must divide ffn_hidden {}",
                self.experts, backbone.ffn_hidden
            )));
        }
        if self.token_ratios.len() != self.scales.len() {
            return Err(Error::Config(format!(
                "{} token ratios for {} activated scales",
                self.token_ratios.len(),
                self.scales.len()
            )));
        }
        for &s in &self.scales {
            if s == 0 || s > schedule.num_scales() {
                return Err(Error::Config(format!(
                    "activated scale {s} outside schedule steps 1..={}",
                    schedule.num_scales()
                )));
            }
        }
        let mut sorted = self.scales.clone();
        sorted.dedup();
        if sorted.len() != self.scales.len() {
            return Err(Error::Config("duplicate activated scales".into()));
        }
        for r in self.token_ratios.iter().chain([&self.weight_ratio]) {
            if !(*r > 0.0 && *r <= 1.0) {
                return Err(Error::Config(format!("activation ratio {r} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_policy(&self, schedule: &ScaleSchedule) -> ActivationPolicy {
        let mut token_ratio = vec![None; schedule.num_scales()];
        for (&step, &ratio) in self.scales.iter().zip(&self.token_ratios) {
            token_ratio[step - 1] = Some(ratio);
        }
        ActivationPolicy {
            token_ratio,
            weight_ratio: self.weight_ratio,
            bias_mode: SharedBiasMode::OncePerToken,
        }
    }

    pub fn to_cost_config(&self, backbone: &BackboneConfig) -> Result<CostConfig> {
        let schedule = backbone.schedule()?;
        let steps = self
            .scales
            .iter()
            .zip(&self.token_ratios)
            .map(|(&step, &ratio)| StepRates {
                step: step - 1,
                eta: 1.0 - ratio,
                mu: 1.0 - self.weight_ratio,
            })
            .collect();
        Ok(CostConfig {
            hidden: backbone.hidden,
            depth: backbone.depth,
            schedule,
            n_experts: self.experts,
            steps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub samples_per_class: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Everything a run needs; serialized as `config.json` into the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub backbone: BackboneConfig,
    pub activation: ActivationConfig,
    pub dataset: DatasetParams,
    pub teacher: TeacherConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub seed: u64,
}

impl ExperimentSpec {
    /// The reference benchmark: toy backbone on the 680-token schedule,
    /// published activation defaults, seed 42. Sized so the full pipeline
    /// finishes in minutes on one core.
    pub fn default_benchmark() -> ExperimentSpec {
        let backbone = BackboneConfig::toy(&[1, 2, 3, 4, 5, 6, 8, 10, 13, 16]);
        ExperimentSpec {
            activation: ActivationConfig::default_75(backbone.sides.len()),
            backbone,
            dataset: DatasetParams {
                samples_per_class: 10,
                noise: 0.1,
            },
            teacher: TeacherConfig {
                epochs: 10,
                lr: 4e-3,
                batch_size: 8,
            },
            stage1: StageConfig {
                batch_size: 4,
                lr: 0.1,
                ..StageConfig::toy_stage1()
            },
            stage2: StageConfig {
                batch_size: 8,
                ..StageConfig::toy_stage2()
            },
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.activation.validate(&self.backbone)?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.stage != StageId::One || self.stage2.stage != StageId::Two {
            return Err(Error::Config("stage configs are swapped".into()));
        }
        if self.dataset.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.backbone.classes,
            samples_per_class: self.dataset.samples_per_class,
            sides: self.backbone.sides.clone(),
            vocab: self.backbone.vocab,
            noise: self.dataset.noise,
            seed: self.seed,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<ExperimentSpec> {
        let spec: ExperimentSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Machine-readable digest of a finished run; also written as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub teacher_val_ce: f64,
    pub student_val_ce: f64,
    /// student / teacher validation cross-entropy.
    pub ce_ratio: f64,
    pub net_saving: f64,
    pub saving_percent: f64,
    /// Per-block coverage fraction of activated positions (final epoch).
    pub per_block_coverage: Vec<f64>,
    /// Per-block expert-usage entropy on validation data, in nats.
    pub usage_entropy: Vec<f64>,
    /// 0.8·ln N, the calibrated balance floor.
    pub entropy_floor: f64,
    /// Stage-1 router distillation loss, first and last epoch.
    pub router_loss_first: f64,
    pub router_loss_last: f64,
    /// Minimum pairwise Jaccard overlap of per-block activation maps on the
    /// largest activated scale of the first validation sample.
    pub min_pairwise_jaccard: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Derived seeds for the independent random streams of one experiment.
fn subseed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

/// Runs the full pipeline into `out`: dataset, dense teacher, two-stage
/// student, evaluation, cost report, activation maps. Returns the summary.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentSummary> {
    spec.validate()?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), spec)?;

    let dataset = gen_dataset(&spec.dataset_spec())?;
    dataset.save(&out.join("dataset"))?;

    // dense teacher
    let mut teacher = VarModel::init(&spec.backbone, subseed(spec.seed, 1))?;
    let teacher_losses = train_teacher(
        &mut teacher,
        &dataset.train,
        spec.teacher.epochs,
        spec.teacher.lr,
        spec.teacher.batch_size,
        subseed(spec.seed, 2),
    )?;
    write_json(&out.join("teacher_losses.json"), &teacher_losses)?;
    teacher.save(&out.join("teacher.ckpt"))?;
    let teacher_val_ce = eval_cross_entropy(&teacher, &dataset.val)?;

    // student with routers/selectors and the activation policy installed
    let mut student = teacher.to_student(spec.activation.experts, subseed(spec.seed, 3))?;
    let policy = spec.activation.to_policy(&student.schedule);
    apply_activation_policy(&mut student, policy)?;

    let report1 = run_stage(
        &spec.stage1,
        &teacher,
        &mut student,
        &dataset.train,
        subseed(spec.seed, 4),
    )?;
    write_json(&out.join("stage1_report.json"), &report1)?;
    std::fs::write(out.join("stage1_report.csv"), report1.to_csv())?;

    let report2 = run_stage(
        &spec.stage2,
        &teacher,
        &mut student,
        &dataset.train,
        subseed(spec.seed, 5),
    )?;
    write_json(&out.join("stage2_report.json"), &report2)?;
    std::fs::write(out.join("stage2_report.csv"), report2.to_csv())?;
    student.save(&out.join("student.ckpt"))?;

    let student_val_ce = eval_cross_entropy(&student, &dataset.val)?;

    // analytic cost report
    let cost = net_saving(&spec.activation.to_cost_config(&spec.backbone)?)?;
    write_json(&out.join("cost_report.json"), &cost)?;
    std::fs::write(out.join("cost_report.txt"), cost.render_table())?;

    // activation maps for the largest activated scale on the first val sample
    let top_scale = *spec.activation.scales.iter().max().unwrap() - 1;
    let maps_dir = out.join("maps");
    let min_jaccard = export_activation_maps(
        &student,
        &dataset.val[0],
        0..student.blocks.len(),
        top_scale,
        &maps_dir,
    )?;

    let usage_entropy = per_block_usage_entropy(&student, &dataset.val)?;
    let summary = ExperimentSummary {
        teacher_val_ce,
        student_val_ce,
        ce_ratio: student_val_ce / teacher_val_ce,
        net_saving: cost.net_saving,
        saving_percent: cost.saving_percent,
        per_block_coverage: report2.token_coverage.clone(),
        usage_entropy,
        entropy_floor: 0.8 * (spec.activation.experts as f64).ln(),
        router_loss_first: report1.epochs.first().map(|e| e.l_dis_w).unwrap_or(0.0),
        router_loss_last: report1.epochs.last().map(|e| e.l_dis_w).unwrap_or(0.0),
        min_pairwise_jaccard: min_jaccard,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

// ── activation-map export ────────────────────────────────────────────────

fn write_pgm(path: &Path, side: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), side * side);
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)?;
    Ok(())
}

fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Exports one sample's per-block activation heatmaps for `scale` (0-based):
/// `block{b}_scale{s}.pgm` (255 = selected), a union map, a per-block
/// top-expert map, and `indicators.csv` with the raw indicator bits. Returns
/// the minimum pairwise Jaccard overlap between the per-block maps.
pub fn export_activation_maps(
    model: &VarModel,
    sample: &Sample,
    block_range: std::ops::Range<usize>,
    scale: usize,
    out: &Path,
) -> Result<f64> {
    let policy = model
        .activation
        .as_ref()
        .ok_or_else(|| Error::State("model has no activation policy; no indicators to export".into()))?;
    if policy.token_ratio.get(scale).copied().flatten().is_none() {
        return Err(Error::State(format!(
            "scale {scale} is not an activated scale"
        )));
    }
    std::fs::create_dir_all(out)?;
    let side = model.schedule.side(scale);
    let l = side * side;
    let n_experts = model.num_experts().unwrap_or(1);

    let trace = no_grad(|| model.forward_teacher_forcing(&sample.maps, sample.class))?;
    let mut per_block: Vec<Vec<bool>> = Vec::new();
    let mut csv = String::from("block_id,scale,length,indicator\n");
    let mut union = vec![false; l];
    for b in block_range.clone() {
        let detail = trace.blocks[b]
            .details
            .iter()
            .find(|d| d.scale == scale)
            .ok_or_else(|| Error::State(format!("block {b} recorded no decision at scale {scale}")))?;
        let sel = detail
            .selection
            .as_ref()
            .ok_or_else(|| Error::State(format!("block {b} has no selection at scale {scale}")))?;
        let mask: Vec<bool> = sel.indicator.with_data(|d| d.iter().map(|&v| v == 1.0).collect());
        let bits: String = mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
        csv.push_str(&format!("{b},{scale},{l},{bits}\n"));
        let pixels: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        write_pgm(&out.join(format!("block{b}_scale{scale}.pgm")), side, &pixels)?;
        for (u, &m) in union.iter_mut().zip(&mask) {
            *u |= m;
        }

        // top-expert map: gray level encodes the strongest expert per
        // selected token, 0 where the token was not activated
        if let Some(routing) = &detail.routing {
            let mut expert_pixels = vec![0u8; l];
            for (compact, &pos) in sel.kept.iter().enumerate() {
                let top = routing.selected[compact][0];
                expert_pixels[pos] = (((top + 1) * 255) / n_experts) as u8;
            }
            write_pgm(
                &out.join(format!("experts_block{b}_scale{scale}.pgm")),
                side,
                &expert_pixels,
            )?;
        }
        per_block.push(mask);
    }
    let union_pixels: Vec<u8> = union.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pgm(&out.join(format!("union_scale{scale}.pgm")), side, &union_pixels)?;
    std::fs::write(out.join("indicators.csv"), csv)?;

    let mut min_j = 1.0f64;
    for i in 0..per_block.len() {
        for j in i + 1..per_block.len() {
            min_j = min_j.min(jaccard(&per_block[i], &per_block[j]));
        }
    }
    Ok(min_j)
}

// ── sweeps ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub experts: usize,
    pub teacher_val_ce: f64,
    pub student_val_ce: f64,
    pub net_saving: f64,
    pub saving_percent: f64,
}

/// Maximum worker threads for sweeps, from `ACTVAR_THREADS` (default 1).
pub fn max_threads() -> usize {
    std::env::var("ACTVAR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs the base experiment once per expert count, each into
/// `out/experts{N}/`. `N = 1` degenerates to the dense FFN, so its weight
/// ratio is forced to 1. Experiments run in parallel up to `ACTVAR_THREADS`.
pub fn sweep_experts(
    base: &ExperimentSpec,
    expert_counts: &[usize],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    for &n in expert_counts {
        if n == 0 || !base.backbone.ffn_hidden.is_multiple_of(n) {
            return Err(Error::Argument(format!(
                "expert count {n} does not divide ffn_hidden {}",
                base.backbone.ffn_hidden
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    let mut rows: Vec<Option<SweepRow>> = vec![None; expert_counts.len()];
    let threads = max_threads();
    for chunk_start in (0..expert_counts.len()).step_by(threads) {
        let chunk_end = (chunk_start + threads).min(expert_counts.len());
        let results: Vec<Result<SweepRow>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (chunk_start..chunk_end)
                .map(|i| {
                    let n = expert_counts[i];
                    let mut spec = base.clone();
                    spec.activation.experts = n;
                    if n == 1 {
                        spec.activation.weight_ratio = 1.0;
                    }
                    let dir = out.join(format!("experts{n}"));
                    scope.spawn(move || -> Result<SweepRow> {
                        let summary = run_experiment(&spec, &dir)?;
                        Ok(SweepRow {
                            experts: n,
                            teacher_val_ce: summary.teacher_val_ce,
                            student_val_ce: summary.student_val_ce,
                            net_saving: summary.net_saving,
                            saving_percent: summary.saving_percent,
                        })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        for (i, r) in (chunk_start..chunk_end).zip(results) {
            rows[i] = Some(r?);
        }
    }
    let rows: Vec<SweepRow> = rows.into_iter().map(|r| r.unwrap()).collect();
    let mut csv = String::from("experts,teacher_val_ce,student_val_ce,net_saving,saving_percent\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.12},{:.12},{:.0},{:.6}\n",
            r.experts, r.teacher_val_ce, r.student_val_ce, r.net_saving, r.saving_percent
        ));
    }
    std::fs::write(out.join("sweep.csv"), csv)?;
    write_json(&out.join("sweep.json"), &rows)?;
    Ok(rows)
}
