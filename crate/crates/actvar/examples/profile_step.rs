use actvar::backbone::{BackboneConfig, VarModel};
use actvar::data::{gen_dataset, DatasetSpec};
use actvar::distill::*;
use actvar::tensor::scale;
use std::time::Instant;

fn main() {
    let cfg = BackboneConfig::toy(&[1, 2, 3, 4, 5, 6, 8, 10, 13, 16]);
    let teacher = VarModel::init(&cfg, 1).unwrap();
    let ds = gen_dataset(&DatasetSpec {
        classes: 8, samples_per_class: 2, sides: cfg.sides.clone(),
        vocab: 64, noise: 0.1, seed: 0,
    }).unwrap();
    let sample = &ds.train[0];

    // no-grad forward
    let t0 = Instant::now();
    for _ in 0..5 {
        actvar::tensor::no_grad(|| teacher.forward_teacher_forcing(&sample.maps, sample.class)).unwrap();
    }
    println!("teacher fwd (no-grad): {:.0} ms", t0.elapsed().as_secs_f64() * 200.0);

    // fwd+bwd
    let t0 = Instant::now();
    for _ in 0..5 {
        let trace = teacher.forward_teacher_forcing(&sample.maps, sample.class).unwrap();
        let loss = teacher.class_loss(&trace, &sample.maps).unwrap();
        scale(&loss, 0.2).backward().unwrap();
    }
    println!("teacher fwd+bwd: {:.0} ms", t0.elapsed().as_secs_f64() * 200.0);

    // student gated fwd+bwd with stage-2 losses
    let mut student = teacher.to_student(16, 2).unwrap();
    let policy = actvar::harness::ActivationConfig::default_75(10).to_policy(&student.schedule);
    apply_activation_policy(&mut student, policy).unwrap();
    let t0 = Instant::now();
    for _ in 0..5 {
        let ttrace = actvar::tensor::no_grad(|| teacher.forward_teacher_forcing(&sample.maps, sample.class)).unwrap();
        let strace = student.forward_teacher_forcing(&sample.maps, sample.class).unwrap();
        let l_cls = student.class_loss(&strace, &sample.maps).unwrap();
        let mut l_b = Vec::new();
        for (s, t) in strace.blocks.iter().zip(&ttrace.blocks) {
            l_b.push(actvar::tensor::mse(&s.output, &t.output).unwrap());
        }
        let p = actvar::tensor::softmax(&strace.logits, 1);
        let pt = actvar::tensor::softmax(&ttrace.logits, 1);
        let l_f = scale(&actvar::tensor::kl_div(&p, &pt).unwrap(), 1.0 / 680.0);
        let total = stage2_loss(&l_cls, &l_f, &l_b).unwrap();
        scale(&total, 0.2).backward().unwrap();
    }
    println!("stage2 sample step (teacher fwd + student fwd+bwd): {:.0} ms", t0.elapsed().as_secs_f64() * 200.0);
}
