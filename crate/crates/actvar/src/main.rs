//! Command-line front end: dataset generation, teacher training, two-stage
//! student training, evaluation, FLOPs reports, activation-map export and
//! expert-count sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use actvar::backbone::VarModel;
use actvar::data::{gen_dataset, Dataset};
use actvar::distill::{apply_activation_policy, eval_cross_entropy, train_teacher};
use actvar::error::{Error, Result};
use actvar::flops::net_saving;
use actvar::harness::{export_activation_maps, run_experiment, sweep_experts, ExperimentSpec};

#[derive(Parser)]
#[command(
    name = "actvar",
    version,
    about = "Dynamic dual-sparsity for next-scale transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment spec JSON; the built-in benchmark spec when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Activation ratios `A,B,G`: token ratios for the activated scales,
    /// then the weight ratio. Values above 1 are read as percentages.
    #[arg(long)]
    ratios: Option<String>,
    /// Expert count N (`sweep` accepts a comma list).
    #[arg(long)]
    experts: Option<String>,
    /// Activated scale steps (1-based), comma separated.
    #[arg(long)]
    scales: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-scale dataset.
    GenData(CommonOpts),
    /// Train the dense teacher and report validation cross-entropy.
    TrainTeacher(CommonOpts),
    /// Run the full pipeline: teacher, stage 1, stage 2, reports, maps.
    TrainActvar(CommonOpts),
    /// Evaluate the checkpoints of a finished run directory.
    Eval(CommonOpts),
    /// Print the analytic FLOPs saving report.
    Flops(CommonOpts),
    /// Export per-block activation maps from a finished run.
    ExportMaps(CommonOpts),
    /// Run the experiment once per expert count (comma list in --experts).
    Sweep(CommonOpts),
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Argument(format!("bad number {p:?}: {e}")))
        })
        .collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::Argument(format!("bad integer {p:?}: {e}")))
        })
        .collect()
}

fn as_ratio(v: f64) -> f64 {
    if v > 1.0 {
        v / 100.0
    } else {
        v
    }
}

/// Loads the spec and applies command-line overrides.
fn resolve_spec(opts: &CommonOpts) -> Result<ExperimentSpec> {
    let mut spec = match &opts.config {
        Some(path) => ExperimentSpec::from_json_file(path)?,
        None => ExperimentSpec::default_benchmark(),
    };
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    if let Some(scales) = &opts.scales {
        spec.activation.scales = parse_usize_list(scales)?;
        let last = *spec.activation.token_ratios.last().unwrap_or(&0.75);
        spec.activation
            .token_ratios
            .resize(spec.activation.scales.len(), last);
    }
    if let Some(ratios) = &opts.ratios {
        let vals = parse_f64_list(ratios)?;
        if vals.len() != spec.activation.scales.len() + 1 {
            return Err(Error::Argument(format!(
                "--ratios needs {} token ratios plus the weight ratio",
                spec.activation.scales.len()
            )));
        }
        spec.activation.token_ratios =
            vals[..vals.len() - 1].iter().map(|&v| as_ratio(v)).collect();
        spec.activation.weight_ratio = as_ratio(*vals.last().unwrap());
    }
    if let Some(experts) = &opts.experts {
        let list = parse_usize_list(experts)?;
        if list.len() != 1 {
            return Err(Error::Argument(
                "--experts takes a single count here; the comma list is for sweep".into(),
            ));
        }
        spec.activation.experts = list[0];
    }
    spec.validate()?;
    Ok(spec)
}

fn load_run(out: &Path) -> Result<(ExperimentSpec, Dataset, VarModel, VarModel)> {
    let spec = ExperimentSpec::from_json_file(&out.join("config.json"))?;
    let dataset = Dataset::load(&out.join("dataset"))?;
    let mut teacher = VarModel::init(&spec.backbone, 0)?;
    teacher.load(&out.join("teacher.ckpt"))?;
    let mut student = teacher.to_student(spec.activation.experts, 0)?;
    student.load(&out.join("student.ckpt"))?;
    let policy = spec.activation.to_policy(&student.schedule);
    apply_activation_policy(&mut student, policy)?;
    Ok((spec, dataset, teacher, student))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(opts) => {
            let spec = resolve_spec(&opts)?;
            let ds = gen_dataset(&spec.dataset_spec())?;
            let dir = opts.out.join("dataset");
            ds.save(&dir)?;
            println!(
                "wrote {} train / {} val samples to {}",
                ds.train.len(),
                ds.val.len(),
                dir.display()
            );
        }
        Command::TrainTeacher(opts) => {
            let spec = resolve_spec(&opts)?;
            std::fs::create_dir_all(&opts.out)?;
            std::fs::write(
                opts.out.join("config.json"),
                serde_json::to_string_pretty(&spec).map_err(Error::Json)?,
            )?;
            let ds = gen_dataset(&spec.dataset_spec())?;
            ds.save(&opts.out.join("dataset"))?;
            let mut teacher = VarModel::init(&spec.backbone, spec.seed.wrapping_add(1))?;
            let losses = train_teacher(
                &mut teacher,
                &ds.train,
                spec.teacher.epochs,
                spec.teacher.lr,
                spec.teacher.batch_size,
                spec.seed.wrapping_add(2),
            )?;
            teacher.save(&opts.out.join("teacher.ckpt"))?;
            let val_ce = eval_cross_entropy(&teacher, &ds.val)?;
            println!("teacher train losses: {losses:?}");
            println!("teacher validation cross-entropy: {val_ce:.6}");
        }
        Command::TrainActvar(opts) => {
            let spec = resolve_spec(&opts)?;
            let summary = run_experiment(&spec, &opts.out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).map_err(Error::Json)?
            );
        }
        Command::Eval(opts) => {
            let (_, dataset, teacher, student) = load_run(&opts.out)?;
            let t = eval_cross_entropy(&teacher, &dataset.val)?;
            let s = eval_cross_entropy(&student, &dataset.val)?;
            println!("teacher validation cross-entropy: {t:.6}");
            println!("student validation cross-entropy: {s:.6}");
            println!("ratio: {:.4}", s / t);
        }
        Command::Flops(opts) => {
            let spec = resolve_spec(&opts)?;
            let report = net_saving(&spec.activation.to_cost_config(&spec.backbone)?)?;
            print!("{}", report.render_table());
            std::fs::create_dir_all(&opts.out)?;
            std::fs::write(
                opts.out.join("cost_report.json"),
                serde_json::to_string_pretty(&report).map_err(Error::Json)?,
            )?;
        }
        Command::ExportMaps(opts) => {
            let (spec, dataset, _, student) = load_run(&opts.out)?;
            let scales: Vec<usize> = match &opts.scales {
                Some(s) => parse_usize_list(s)?,
                None => spec.activation.scales.clone(),
            };
            for step in scales {
                let dir = opts.out.join("maps");
                let min_j = export_activation_maps(
                    &student,
                    &dataset.val[0],
                    0..student.blocks.len(),
                    step - 1,
                    &dir,
                )?;
                println!(
                    "scale step {step}: maps in {} (min pairwise jaccard {min_j:.3})",
                    dir.display()
                );
            }
        }
        Command::Sweep(opts) => {
            let spec = resolve_spec(&CommonOpts {
                experts: None,
                ..opts.clone()
            })?;
            let counts = match &opts.experts {
                Some(list) => parse_usize_list(list)?,
                None => vec![4, 8, 16, 32],
            };
            let rows = sweep_experts(&spec, &counts, &opts.out)?;
            for r in rows {
                println!(
                    "N={:<3} teacher_ce={:.4} student_ce={:.4} saving={:.2}%",
                    r.experts, r.teacher_val_ce, r.student_val_ce, r.saving_percent
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
