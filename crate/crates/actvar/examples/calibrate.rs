// Reference-run calibration: mirrors the acceptance benchmark exactly
// (same spec, same seeds) and prints the values to freeze as goldens.
use actvar::backbone::VarModel;
use actvar::data::gen_dataset;
use actvar::distill::*;
use actvar::harness::{ActivationConfig, ExperimentSpec};
use std::time::Instant;

fn main() {
    let t_start = Instant::now();
    let spec = ExperimentSpec::default_benchmark();
    let ds = gen_dataset(&spec.dataset_spec()).unwrap();
    println!("train {} / val {}", ds.train.len(), ds.val.len());

    let mut teacher = VarModel::init(&spec.backbone, 1).unwrap();
    let losses = train_teacher(
        &mut teacher, &ds.train, spec.teacher.epochs, spec.teacher.lr,
        spec.teacher.batch_size, 2,
    ).unwrap();
    println!("teacher losses: {losses:?}");
    let t_ce = eval_cross_entropy(&teacher, &ds.val).unwrap();
    println!("teacher val CE: {t_ce:.12}  [{:.0}s]", t_start.elapsed().as_secs_f64());

    for (tag, act) in [
        ("75", spec.activation.clone()),
        ("100", ActivationConfig {
            token_ratios: vec![1.0, 1.0],
            weight_ratio: 1.0,
            experts: 16,
            scales: vec![9, 10],
        }),
    ] {
        let mut student = teacher.to_student(act.experts, 3).unwrap();
        let policy = act.to_policy(&student.schedule);
        apply_activation_policy(&mut student, policy).unwrap();
        let ce_init = eval_cross_entropy(&student, &ds.val).unwrap();
        println!("[{tag}] init val CE {ce_init:.6} ratio {:.6}", ce_init / t_ce);
        let r1 = run_stage(&spec.stage1, &teacher, &mut student, &ds.train, 4).unwrap();
        println!(
            "[{tag}] stage1 dis_w {:.4} -> {:.4} (x{:.3}) dis_t {:.4} -> {:.4}",
            r1.epochs[0].l_dis_w, r1.epochs.last().unwrap().l_dis_w,
            r1.epochs.last().unwrap().l_dis_w / r1.epochs[0].l_dis_w,
            r1.epochs[0].l_dis_t, r1.epochs.last().unwrap().l_dis_t,
        );
        let ce_p1 = eval_cross_entropy(&student, &ds.val).unwrap();
        println!("[{tag}] post-stage1 CE {ce_p1:.6} ratio {:.6}  [{:.0}s]", ce_p1 / t_ce, t_start.elapsed().as_secs_f64());
        let _r2 = run_stage(&spec.stage2, &teacher, &mut student, &ds.train, 5).unwrap();
        let ce_p2 = eval_cross_entropy(&student, &ds.val).unwrap();
        println!("[{tag}] post-stage2 CE {ce_p2:.12} ratio {:.6}  [{:.0}s]", ce_p2 / t_ce, t_start.elapsed().as_secs_f64());
        if tag == "75" {
            let ent = per_block_usage_entropy(&student, &ds.val).unwrap();
            println!("[75] usage entropy per block: {ent:?} floor {:.4}", 0.8f64 * (16f64).ln());
        }
    }
    println!("teacher golden: {t_ce:.15e}");
    println!("TOTAL {:.0}s", t_start.elapsed().as_secs_f64());
}
