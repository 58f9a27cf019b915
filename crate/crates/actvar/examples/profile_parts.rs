use actvar::tensor::*;
use std::time::Instant;

fn timeit(name: &str, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let mut reps = 0;
    while t0.elapsed().as_secs_f64() < 0.3 {
        f();
        reps += 1;
    }
    println!("{name}: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    no_grad(|| {
        let h = 64;
        // scale-10 work: Lq=256, ctx=680
        let q = Tensor::constant(vec![256, h], vec![0.1; 256 * h]);
        let kv = Tensor::constant(vec![680, h], vec![0.1; 680 * h]);
        let w = Tensor::constant(vec![h, h], vec![0.01; h * h]);
        let b = Tensor::constant(vec![h], vec![0.0; h]);
        timeit("project 680xH * HxH", || { let _ = add_bias_row(&matmul(&kv, &w).unwrap(), &b); });
        let qh = slice_cols(&q, 0, 16);
        let kh = slice_cols(&kv, 0, 16);
        timeit("slice_cols 680x64->16", || { let _ = slice_cols(&kv, 0, 16); });
        timeit("scores 256x16 * 680x16^T", || { let _ = matmul_nt(&qh, &kh).unwrap(); });
        let scores = matmul_nt(&qh, &kh).unwrap();
        timeit("softmax 256x680", || { let _ = softmax(&scores, 1); });
        let probs = softmax(&scores, 1);
        let vh = slice_cols(&kv, 0, 16);
        timeit("mix 256x680 * 680x16", || { let _ = matmul(&probs, &vh).unwrap(); });
        timeit("gelu 680x128", || {
            let x = Tensor::constant(vec![680, 128], vec![0.3; 680 * 128]);
            let _ = gelu(&x);
        });
        let g = Tensor::constant(vec![h], vec![1.0; h]);
        timeit("layernorm 680x64", || { let _ = layer_norm(&kv, &g, &b); });
        let big1 = Tensor::constant(vec![680, 64], vec![0.1; 680*64]);
        let w1 = Tensor::constant(vec![64, 128], vec![0.01; 64*128]);
        timeit("ffn matmul 680x64x128", || { let _ = matmul(&big1, &w1).unwrap(); });
        timeit("concat_rows 10 segs", || {
            let segs: Vec<Tensor> = (0..10).map(|_| Tensor::constant(vec![68, 64], vec![0.1; 68*64])).collect();
            let _ = concat_rows(&segs);
        });
        timeit("gather 680 rows", || { let _ = gather_rows(&kv, &(0..680).collect::<Vec<_>>()); });
    });
}
