use actvar::tensor::*;
use std::time::Instant;

fn main() {
    no_grad(|| {
        let q = Tensor::constant(vec![256, 64], vec![0.1; 256 * 64]);
        let k = Tensor::constant(vec![680, 64], vec![0.1; 680 * 64]);
        let v = Tensor::constant(vec![680, 64], vec![0.1; 680 * 64]);
        let t0 = Instant::now();
        let mut reps = 0;
        while t0.elapsed().as_secs_f64() < 1.0 {
            let _ = multi_head_attention(&q, &k, &v, 4).unwrap();
            reps += 1;
        }
        println!("fused mha 256q/680kv: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

        let t0 = Instant::now();
        let mut reps = 0;
        while t0.elapsed().as_secs_f64() < 1.0 {
            let mut parts = Vec::new();
            for h in 0..4 {
                let qh = scale(&slice_cols(&q, h * 16, (h + 1) * 16), 0.25);
                let kh = slice_cols(&k, h * 16, (h + 1) * 16);
                let vh = slice_cols(&v, h * 16, (h + 1) * 16);
                let probs = softmax(&matmul_nt(&qh, &kh).unwrap(), 1);
                parts.push(matmul(&probs, &vh).unwrap());
            }
            let _ = concat_cols(&parts);
            reps += 1;
        }
        println!("composed 256q/680kv: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    });
}
