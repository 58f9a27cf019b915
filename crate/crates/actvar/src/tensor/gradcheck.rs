//! Central finite-difference gradient checking.
//!
//! Used by the test suites as an oracle that is independent of the recorded
//! backward rules: a loss function is re-evaluated at `x ± h` per coordinate
//! and the slope compared against the accumulated analytic gradient.

use super::Tensor;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero gradients compare
/// against the step scale rather than blowing up.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Check the analytic gradient of `loss_fn` with respect to `param`.
///
/// `loss_fn` must rebuild the forward pass from current leaf values on every
/// call (so perturbing `param` in place is observed). `coords` selects which
/// flat coordinates to probe; pass an empty slice to probe all of them.
pub fn check_param_grad(
    param: &Tensor,
    coords: &[usize],
    h: f64,
    mut loss_fn: impl FnMut() -> Tensor,
) -> FdReport {
    let loss = loss_fn();
    param.zero_grad();
    loss.backward().expect("gradcheck backward");
    let analytic = param
        .grad()
        .unwrap_or_else(|| vec![0.0; param.numel()]);

    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..param.numel()).collect();
        &all
    } else {
        coords
    };

    let mut max_rel = 0.0f64;
    for &i in coords {
        let orig = param.with_data(|d| d[i]);
        param.update_data(|d| d[i] = orig + h);
        let plus = loss_fn().item();
        param.update_data(|d| d[i] = orig - h);
        let minus = loss_fn().item();
        param.update_data(|d| d[i] = orig);
        let numeric = (plus - minus) / (2.0 * h);
        max_rel = max_rel.max(rel_err(analytic[i], numeric));
    }
    param.zero_grad();
    FdReport {
        max_rel_err: max_rel,
        checked: coords.len(),
    }
}

/// Convenience wrapper: probe every coordinate of every listed parameter and
/// return the worst relative error seen.
pub fn check_all(params: &[Tensor], h: f64, mut loss_fn: impl FnMut() -> Tensor) -> FdReport {
    let mut worst = FdReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    for p in params {
        for q in params {
            q.zero_grad();
        }
        let r = check_param_grad(p, &[], h, &mut loss_fn);
        worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
        worst.checked += r.checked;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    const H: f64 = 1e-5;


    #[test]
    fn fd_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = Tensor::param(vec![4, 6], rand_vec(&mut rng, 24));
            let b = Tensor::param(vec![6, 3], rand_vec(&mut rng, 18));
            let w = Tensor::constant(vec![4 * 3], rand_vec(&mut rng, 12));
            let loss = || {
                let prod = matmul(&a, &b).unwrap();
                sum_all(&mul(&reshape(&prod, vec![12]), &w).unwrap())
            };
            let r = check_all(&[a.clone(), b.clone()], H, loss);
            assert!(r.max_rel_err < 1e-6, "matmul fd rel err {}", r.max_rel_err);
        }
    }

    #[test]
    fn fd_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = Tensor::param(vec![8], rand_vec(&mut rng, 8));
            let w = Tensor::constant(vec![8], rand_vec(&mut rng, 8));
            let r = check_all(std::slice::from_ref(&x), H, || sum_all(&mul(&gelu(&x), &w).unwrap()));
            assert!(r.max_rel_err < 1e-6, "gelu fd rel err {}", r.max_rel_err);
        }
    }

    #[test]
    fn fd_softmax_layernorm_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = Tensor::param(vec![3, 8], rand_vec(&mut rng, 24));
            let g = Tensor::param(vec![8], rand_vec(&mut rng, 8));
            let b = Tensor::param(vec![8], rand_vec(&mut rng, 8));
            let w = Tensor::constant(vec![3 * 8], rand_vec(&mut rng, 24));
            let loss = || {
                let ln = layer_norm(&x, &g, &b);
                let sm = softmax(&ln, 1);
                sum_all(&mul(&reshape(&sm, vec![24]), &w).unwrap())
            };
            let r = check_all(&[x.clone(), g.clone(), b.clone()], H, loss);
            assert!(r.max_rel_err < 1e-5, "ln/softmax fd rel err {}", r.max_rel_err);
        }
    }

    #[test]
    fn fd_multi_head_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q = Tensor::param(vec![3, 8], rand_vec(&mut rng, 24));
            let k = Tensor::param(vec![5, 8], rand_vec(&mut rng, 40));
            let v = Tensor::param(vec![5, 8], rand_vec(&mut rng, 40));
            let w = Tensor::constant(vec![3 * 8], rand_vec(&mut rng, 24));
            let r = check_all(&[q.clone(), k.clone(), v.clone()], H, || {
                let o = multi_head_attention(&q, &k, &v, 2).unwrap();
                sum_all(&mul(&reshape(&o, vec![24]), &w).unwrap())
            });
            assert!(r.max_rel_err < 1e-5, "attention fd rel err {}", r.max_rel_err);
        }
    }

    #[test]
    fn fused_attention_matches_composed_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let heads = 2;
        let dh = 4;
        let q = Tensor::constant(vec![3, 8], rand_vec(&mut rng, 24));
        let k = Tensor::constant(vec![6, 8], rand_vec(&mut rng, 48));
        let v = Tensor::constant(vec![6, 8], rand_vec(&mut rng, 48));
        let fused = multi_head_attention(&q, &k, &v, heads).unwrap();
        let mut parts = Vec::new();
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = slice_cols(&q, c0, c1);
            let kh = slice_cols(&k, c0, c1);
            let vh = slice_cols(&v, c0, c1);
            let scores = scale(&matmul_nt(&qh, &kh).unwrap(), 1.0 / (dh as f64).sqrt());
            parts.push(matmul(&softmax(&scores, 1), &vh).unwrap());
        }
        let composed = concat_cols(&parts);
        for (a, b) in fused.to_vec().iter().zip(&composed.to_vec()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn fd_mse_of_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::param(vec![5, 4], rand_vec(&mut rng, 20));
        let x = Tensor::constant(vec![3, 5], rand_vec(&mut rng, 15));
        let y = Tensor::constant(vec![3, 4], rand_vec(&mut rng, 12));
        let r = check_all(std::slice::from_ref(&w), H, || {
            mse(&matmul(&x, &w).unwrap(), &y).unwrap()
        });
        assert!(r.max_rel_err < 1e-5, "mse fd rel err {}", r.max_rel_err);
    }

    #[test]
    fn fd_kl_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let logits = Tensor::param(vec![4, 6], rand_vec(&mut rng, 24));
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
            let t = targets.clone();
            let r = check_all(&[logits.clone()], H, move || {
                cross_entropy(&logits, &t).unwrap()
            });
            assert!(r.max_rel_err < 1e-5, "ce fd rel err {}", r.max_rel_err);
        }
        let p_logits = Tensor::param(vec![6], rand_vec(&mut rng, 6));
        let mut q: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..1.0)).collect();
        let qs: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= qs);
        let qt = Tensor::constant(vec![6], q);
        let r = check_all(std::slice::from_ref(&p_logits), H, || {
            kl_div(&softmax(&p_logits, 0), &qt).unwrap()
        });
        assert!(r.max_rel_err < 1e-5, "kl fd rel err {}", r.max_rel_err);
    }
}
