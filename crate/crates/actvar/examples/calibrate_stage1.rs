// Stage-1 hyperparameter sweep against a cached teacher checkpoint.
use actvar::backbone::VarModel;
use actvar::data::gen_dataset;
use actvar::distill::*;
use actvar::harness::ExperimentSpec;
use std::path::Path;

fn main() {
    let spec = ExperimentSpec::default_benchmark();
    let ds = gen_dataset(&spec.dataset_spec()).unwrap();
    let ckpt = Path::new("/tmp/ref_teacher.ckpt");
    let mut teacher = VarModel::init(&spec.backbone, 1).unwrap();
    if ckpt.exists() {
        teacher.load(ckpt).unwrap();
        println!("loaded cached teacher");
    } else {
        train_teacher(&mut teacher, &ds.train, spec.teacher.epochs, spec.teacher.lr, spec.teacher.batch_size, 2).unwrap();
        teacher.save(ckpt).unwrap();
        println!("trained + saved teacher");
    }
    let t_ce = eval_cross_entropy(&teacher, &ds.val).unwrap();
    println!("teacher val CE {t_ce:.6}");

    for (lr, batch) in [(0.02, 2usize), (0.02, 4), (0.03, 4), (0.01, 2), (0.05, 8)] {
        let mut student = teacher.to_student(16, 3).unwrap();
        let policy = spec.activation.to_policy(&student.schedule);
        apply_activation_policy(&mut student, policy).unwrap();
        let cfg = StageConfig { lr, batch_size: batch, ..StageConfig::toy_stage1() };
        let r = run_stage(&cfg, &teacher, &mut student, &ds.train, 4).unwrap();
        let (f, l) = (r.epochs[0].l_dis_w, r.epochs.last().unwrap().l_dis_w);
        println!(
            "lr {lr} batch {batch}: dis_w {f:.4} -> {l:.4} (x{:.3}) dis_t {:.4} -> {:.4} (x{:.3})",
            l / f,
            r.epochs[0].l_dis_t,
            r.epochs.last().unwrap().l_dis_t,
            r.epochs.last().unwrap().l_dis_t / r.epochs[0].l_dis_t,
        );
    }
}
