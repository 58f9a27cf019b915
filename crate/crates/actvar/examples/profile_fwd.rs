use actvar::backbone::{BackboneConfig, VarModel};
use actvar::data::{gen_dataset, DatasetSpec};
use std::time::Instant;

fn main() {
    for depth in [0usize, 1, 2, 4] {
        let mut cfg = BackboneConfig::toy(&[1, 2, 3, 4, 5, 6, 8, 10, 13, 16]);
        cfg.depth = depth.max(1);
        let model = VarModel::init(&cfg, 1).unwrap();
        let ds = gen_dataset(&DatasetSpec {
            classes: 8, samples_per_class: 1, sides: cfg.sides.clone(),
            vocab: 64, noise: 0.1, seed: 0,
        }).unwrap();
        let s = &ds.train[0];
        // warmup
        actvar::tensor::no_grad(|| model.forward_teacher_forcing(&s.maps, s.class)).unwrap();
        let t0 = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            actvar::tensor::no_grad(|| model.forward_teacher_forcing(&s.maps, s.class)).unwrap();
        }
        println!("depth {}: {:.1} ms/fwd", cfg.depth, t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    }
}
