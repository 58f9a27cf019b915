//! Differentiable operations.
//!
//! Contract-level ops (`matmul`, `kl_div`, `mse`, `topk`, `cross_entropy`,
//! `upsample_bilinear`) validate shapes and return `Result`; internal plumbing
//! ops assert their preconditions.

use super::{Inner, Tensor};
use crate::error::{Error, Result};

pub const KL_EPS: f64 = 1e-8;
pub const LAYERNORM_EPS: f64 = 1e-5;

// ── raw matmul kernels (shared by forward and backward passes) ──────────

/// c[m×n] += a[m×k] · b[k×n], k-unrolled so the inner loop vectorizes over
/// contiguous rows of `b` and `c`.
pub(crate) fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            kk += 4;
        }
        while kk < k {
            let av = arow[kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
            kk += 1;
        }
    }
}

/// c[m×k] += a[m×n] · b[k×n]ᵀ  (rows of `a` dotted with rows of `b`).
/// Four output columns share each pass over `arow` so short dot products
/// (attention head widths) still keep the vector units busy.
fn matmul_bt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        let mut kk = 0;
        while kk + 4 <= k {
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            let mut acc0 = 0.0;
            let mut acc1 = 0.0;
            let mut acc2 = 0.0;
            let mut acc3 = 0.0;
            for (j, &av) in arow.iter().enumerate() {
                acc0 += av * b0[j];
                acc1 += av * b1[j];
                acc2 += av * b2[j];
                acc3 += av * b3[j];
            }
            crow[kk] += acc0;
            crow[kk + 1] += acc1;
            crow[kk + 2] += acc2;
            crow[kk + 3] += acc3;
            kk += 4;
        }
        while kk < k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            crow[kk] += acc;
            kk += 1;
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_at_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn require_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!(
            "{what} must be rank 2, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn require_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ── linear algebra ───────────────────────────────────────────────────────

/// a[m×k] · b[k×n] → [m×n]
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "matmul lhs")?;
    let (k2, n) = require_2d(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    a.with_data(|ad| b.with_data(|bd| matmul_acc(&mut out, ad, bd, m, k, n)));
    Ok(Tensor::op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        move |g, node: &Inner| {
            let pa = &node.parents()[0];
            let pb = &node.parents()[1];
            if pa.requires_grad() {
                let mut da = vec![0.0; m * k];
                pb.with_data(|bd| matmul_bt_acc(&mut da, g, bd, m, n, k));
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let mut db = vec![0.0; k * n];
                pa.with_data(|ad| matmul_at_acc(&mut db, ad, g, m, k, n));
                pb.accumulate_grad(&db);
            }
        },
    ))
}

/// a[m×d] · b[n×d]ᵀ → [m×n], without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d) = require_2d(a, "matmul_nt lhs")?;
    let (n, d2) = require_2d(b, "matmul_nt rhs")?;
    if d != d2 {
        return Err(Error::Dimension(format!(
            "matmul_nt inner dimensions disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    a.with_data(|ad| b.with_data(|bd| matmul_bt_acc(&mut out, ad, bd, m, d, n)));
    Ok(Tensor::op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        move |g, node: &Inner| {
            let pa = &node.parents()[0];
            let pb = &node.parents()[1];
            if pa.requires_grad() {
                // da = g · b
                let mut da = vec![0.0; m * d];
                pb.with_data(|bd| matmul_acc(&mut da, g, bd, m, n, d));
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                // db = gᵀ · a
                let mut db = vec![0.0; n * d];
                pa.with_data(|ad| matmul_at_acc(&mut db, g, ad, m, n, d));
                pb.accumulate_grad(&db);
            }
        },
    ))
}

// ── elementwise ──────────────────────────────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same_shape(a, b, "add")?;
    let out = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| x + y).collect()));
    Ok(Tensor::op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        |g, node: &Inner| {
            node.parents()[0].accumulate_grad(g);
            node.parents()[1].accumulate_grad(g);
        },
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same_shape(a, b, "sub")?;
    let out = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| x - y).collect()));
    Ok(Tensor::op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        |g, node: &Inner| {
            node.parents()[0].accumulate_grad(g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            node.parents()[1].accumulate_grad(&neg);
        },
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same_shape(a, b, "mul")?;
    let out = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| x * y).collect()));
    Ok(Tensor::op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        |g, node: &Inner| {
            let pa = &node.parents()[0];
            let pb = &node.parents()[1];
            if pa.requires_grad() {
                let da: Vec<f64> = pb.with_data(|bd| g.iter().zip(bd).map(|(gv, y)| gv * y).collect());
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let db: Vec<f64> = pa.with_data(|ad| g.iter().zip(ad).map(|(gv, x)| gv * x).collect());
                pb.accumulate_grad(&db);
            }
        },
    ))
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let out = x.with_data(|d| d.iter().map(|v| v * c).collect());
    Tensor::op(x.shape().to_vec(), out, vec![x.clone()], move |g, node: &Inner| {
        let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
        node.parents()[0].accumulate_grad(&dx);
    })
}

/// x[r×c] + bias[c], broadcast over rows.
pub fn add_bias_row(x: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 2);
    assert_eq!(bias.rank(), 1);
    let (r, c) = (x.rows(), x.cols());
    assert_eq!(bias.shape()[0], c, "bias length must match columns");
    let out = x.with_data(|xd| {
        bias.with_data(|bd| {
            let mut v = xd.to_vec();
            for row in v.chunks_exact_mut(c) {
                for (o, b) in row.iter_mut().zip(bd) {
                    *o += b;
                }
            }
            v
        })
    });
    Tensor::op(
        vec![r, c],
        out,
        vec![x.clone(), bias.clone()],
        move |g, node: &Inner| {
            node.parents()[0].accumulate_grad(g);
            let pb = &node.parents()[1];
            if pb.requires_grad() {
                let mut db = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                pb.accumulate_grad(&db);
            }
        },
    )
}

/// Row-wise scaling: out[i, :] = x[i, :] * s[i].
pub fn scale_rows(x: &Tensor, s: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 2);
    assert_eq!(s.rank(), 1);
    let (r, c) = (x.rows(), x.cols());
    assert_eq!(s.shape()[0], r);
    let out = x.with_data(|xd| {
        s.with_data(|sd| {
            let mut v = xd.to_vec();
            for (i, row) in v.chunks_exact_mut(c).enumerate() {
                for o in row.iter_mut() {
                    *o *= sd[i];
                }
            }
            v
        })
    });
    Tensor::op(
        vec![r, c],
        out,
        vec![x.clone(), s.clone()],
        move |g, node: &Inner| {
            let px = &node.parents()[0];
            let ps = &node.parents()[1];
            if px.requires_grad() {
                let dx: Vec<f64> = ps.with_data(|sd| {
                    g.chunks_exact(c)
                        .enumerate()
                        .flat_map(|(i, row)| row.iter().map(move |v| v * sd[i]).collect::<Vec<_>>())
                        .collect()
                });
                px.accumulate_grad(&dx);
            }
            if ps.requires_grad() {
                let ds: Vec<f64> = px.with_data(|xd| {
                    g.chunks_exact(c)
                        .zip(xd.chunks_exact(c))
                        .map(|(grow, xrow)| grow.iter().zip(xrow).map(|(a, b)| a * b).sum())
                        .collect()
                });
                ps.accumulate_grad(&ds);
            }
        },
    )
}

// ── reductions ───────────────────────────────────────────────────────────

/// Same data, new shape (element count preserved). Gradient passes through.
pub fn reshape(x: &Tensor, shape: Vec<usize>) -> Tensor {
    assert_eq!(
        shape.iter().product::<usize>(),
        x.numel(),
        "reshape {:?} -> {shape:?} changes element count",
        x.shape()
    );
    Tensor::op(shape, x.to_vec(), vec![x.clone()], |g, node: &Inner| {
        node.parents()[0].accumulate_grad(g);
    })
}

pub fn sum_all(x: &Tensor) -> Tensor {
    let s = x.with_data(|d| d.iter().sum());
    let n = x.numel();
    Tensor::op(vec![], vec![s], vec![x.clone()], move |g, node: &Inner| {
        node.parents()[0].accumulate_grad(&vec![g[0]; n]);
    })
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel() as f64;
    scale(&sum_all(x), 1.0 / n)
}

// ── activations and normalization ────────────────────────────────────────

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_small = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_big + x * phi_small
}

/// Exact erf-based GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let out = x.with_data(|d| d.iter().copied().map(gelu_scalar).collect());
    Tensor::op(x.shape().to_vec(), out, vec![x.clone()], |g, node: &Inner| {
        let px = &node.parents()[0];
        let dx: Vec<f64> =
            px.with_data(|xd| g.iter().zip(xd).map(|(gv, &xv)| gv * gelu_grad_scalar(xv)).collect());
        px.accumulate_grad(&dx);
    })
}

fn softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for (orow, xrow) in out.chunks_exact_mut(cols).zip(data.chunks_exact(cols)) {
        let m = xrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &x) in orow.iter_mut().zip(xrow) {
            *o = (x - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    out
}

/// Numerically stabilized softmax along `axis` (rank 1: axis 0; rank 2: 0 or 1).
pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape().to_vec();
    assert!(axis < shape.len().max(1), "softmax axis {axis} out of range for {shape:?}");
    let (rows, cols, by_row) = match shape.as_slice() {
        [n] => (1usize, *n, true),
        [r, c] => {
            if axis == 1 {
                (*r, *c, true)
            } else {
                (*c, *r, false)
            }
        }
        _ => panic!("softmax supports rank 1 or 2, got {shape:?}"),
    };
    let out = if by_row {
        x.with_data(|d| softmax_rows(d, rows, cols))
    } else {
        // column softmax via a transposed staging buffer
        let (r, c) = (shape[0], shape[1]);
        let staged = x.with_data(|d| {
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = d[i * c + j];
                }
            }
            t
        });
        let sm = softmax_rows(&staged, rows, cols);
        let mut u = vec![0.0; r * c];
        for j in 0..c {
            for i in 0..r {
                u[i * c + j] = sm[j * r + i];
            }
        }
        u
    };
    Tensor::op(shape.clone(), out, vec![x.clone()], move |g, node: &Inner| {
        // dx = y ⊙ (g − ⟨g, y⟩ per slice), applied along the softmax axis
        let y = node.with_data(|d| d.to_vec());
        let mut dx = vec![0.0; y.len()];
        let apply = |dx: &mut [f64], g: &[f64], y: &[f64]| {
            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                *d = yv * (gv - dot);
            }
        };
        if by_row {
            for i in 0..rows {
                let lo = i * cols;
                apply(&mut dx[lo..lo + cols], &g[lo..lo + cols], &y[lo..lo + cols]);
            }
        } else {
            let (r, c) = (shape[0], shape[1]);
            for j in 0..c {
                let gcol: Vec<f64> = (0..r).map(|i| g[i * c + j]).collect();
                let ycol: Vec<f64> = (0..r).map(|i| y[i * c + j]).collect();
                let mut dcol = vec![0.0; r];
                apply(&mut dcol, &gcol, &ycol);
                for i in 0..r {
                    dx[i * c + j] = dcol[i];
                }
            }
        }
        node.parents()[0].accumulate_grad(&dx);
    })
}

/// Layer normalization over the last axis of a rank-2 tensor, with affine
/// gain and bias. Population variance, ε = 1e-5.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 2);
    let (r, c) = (x.rows(), x.cols());
    assert_eq!(gain.shape(), &[c]);
    assert_eq!(bias.shape(), &[c]);
    let cf = c as f64;
    let mut out = vec![0.0; r * c];
    let mut xhat = vec![0.0; r * c];
    let mut inv_std = vec![0.0; r];
    x.with_data(|xd| {
        gain.with_data(|gd| {
            bias.with_data(|bd| {
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let istd = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    inv_std[i] = istd;
                    for j in 0..c {
                        let xh = (row[j] - mean) * istd;
                        xhat[i * c + j] = xh;
                        out[i * c + j] = xh * gd[j] + bd[j];
                    }
                }
            })
        })
    });
    Tensor::op(
        vec![r, c],
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        move |g, node: &Inner| {
            let px = &node.parents()[0];
            let pg = &node.parents()[1];
            let pb = &node.parents()[2];
            if pg.requires_grad() {
                let mut dg = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dg[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
                pg.accumulate_grad(&dg);
            }
            if pb.requires_grad() {
                let mut db = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                pb.accumulate_grad(&db);
            }
            if px.requires_grad() {
                let mut dx = vec![0.0; r * c];
                pg.with_data(|gd| {
                    for i in 0..r {
                        let istd = inv_std[i];
                        let grow = &g[i * c..(i + 1) * c];
                        let xrow = &xhat[i * c..(i + 1) * c];
                        // dl/dxhat
                        let dxh: Vec<f64> = grow.iter().zip(gd).map(|(gv, gg)| gv * gg).collect();
                        let sum_dxh: f64 = dxh.iter().sum();
                        let sum_dxh_xh: f64 = dxh.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] =
                                istd * (dxh[j] - sum_dxh / cf - xrow[j] * sum_dxh_xh / cf);
                        }
                    }
                });
                px.accumulate_grad(&dx);
            }
        },
    )
}

// ── losses ───────────────────────────────────────────────────────────────

/// Σ p·log(p/q) with 0·log 0 := 0 and q clamped below at 1e-8.
pub fn kl_div(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    require_same_shape(p, q, "kl_div")?;
    let v = p.with_data(|pd| {
        q.with_data(|qd| {
            pd.iter()
                .zip(qd)
                .map(|(&pi, &qi)| {
                    if pi <= 0.0 {
                        0.0
                    } else {
                        pi * (pi.ln() - qi.max(KL_EPS).ln())
                    }
                })
                .sum::<f64>()
        })
    });
    Ok(Tensor::op(
        vec![],
        vec![v],
        vec![p.clone(), q.clone()],
        |g, node: &Inner| {
            let pp = &node.parents()[0];
            let pq = &node.parents()[1];
            let g0 = g[0];
            if pp.requires_grad() {
                let dp: Vec<f64> = pp.with_data(|pd| {
                    pq.with_data(|qd| {
                        pd.iter()
                            .zip(qd)
                            .map(|(&pi, &qi)| {
                                if pi <= 0.0 {
                                    0.0
                                } else {
                                    g0 * (pi.ln() - qi.max(KL_EPS).ln() + 1.0)
                                }
                            })
                            .collect()
                    })
                });
                pp.accumulate_grad(&dp);
            }
            if pq.requires_grad() {
                let dq: Vec<f64> = pp.with_data(|pd| {
                    pq.with_data(|qd| {
                        pd.iter()
                            .zip(qd)
                            .map(|(&pi, &qi)| {
                                if pi <= 0.0 || qi < KL_EPS {
                                    0.0
                                } else {
                                    -g0 * pi / qi
                                }
                            })
                            .collect()
                    })
                });
                pq.accumulate_grad(&dq);
            }
        },
    ))
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same_shape(a, b, "mse")?;
    let n = a.numel() as f64;
    let v = a.with_data(|ad| {
        b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
    });
    Ok(Tensor::op(
        vec![],
        vec![v],
        vec![a.clone(), b.clone()],
        move |g, node: &Inner| {
            let pa = &node.parents()[0];
            let pb = &node.parents()[1];
            let c = 2.0 * g[0] / n;
            let diff: Vec<f64> =
                pa.with_data(|ad| pb.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| x - y).collect()));
            if pa.requires_grad() {
                let da: Vec<f64> = diff.iter().map(|d| c * d).collect();
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                let db: Vec<f64> = diff.iter().map(|d| -c * d).collect();
                pb.accumulate_grad(&db);
            }
        },
    ))
}

/// Mean token-level cross-entropy of row logits against integer targets.
/// Fused log-softmax for stability.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (r, c) = require_2d(logits, "cross_entropy logits")?;
    if targets.len() != r {
        return Err(Error::Dimension(format!(
            "cross_entropy: {} targets for {} rows",
            targets.len(),
            r
        )));
    }
    for &t in targets {
        if t >= c {
            return Err(Error::Argument(format!("target {t} out of vocab {c}")));
        }
    }
    let v = logits.with_data(|ld| {
        let mut total = 0.0;
        for (row, &t) in ld.chunks_exact(c).zip(targets) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            total += m + z.ln() - row[t];
        }
        total / r as f64
    });
    let targets = targets.to_vec();
    Ok(Tensor::op(
        vec![],
        vec![v],
        vec![logits.clone()],
        move |g, node: &Inner| {
            let pl = &node.parents()[0];
            let scale = g[0] / r as f64;
            let mut dl = pl.with_data(|ld| softmax_rows(ld, r, c));
            for (i, &t) in targets.iter().enumerate() {
                dl[i * c + t] -= 1.0;
            }
            for d in dl.iter_mut() {
                *d *= scale;
            }
            pl.accumulate_grad(&dl);
        },
    ))
}

// ── selection ────────────────────────────────────────────────────────────

/// Indices of the k largest entries of a rank-1 tensor, ties broken by lowest
/// index, plus a {0,1} indicator. Both outputs are detached from the graph.
pub fn topk(x: &Tensor, k: usize) -> Result<(Vec<usize>, Tensor)> {
    assert_eq!(x.rank(), 1, "topk expects a rank-1 tensor");
    let n = x.shape()[0];
    if k == 0 || k > n {
        return Err(Error::Argument(format!("topk k={k} out of range 1..={n}")));
    }
    let idx = x.with_data(|d| topk_indices(d, k));
    let mut ind = vec![0.0; n];
    for &i in &idx {
        ind[i] = 1.0;
    }
    Ok((idx, Tensor::constant(vec![n], ind)))
}

/// Top-k on a raw slice: descending by value, ascending index on ties.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

// ── row/column restructuring ─────────────────────────────────────────────

/// Vertical concatenation of rank-2 tensors with equal column counts.
pub fn concat_rows(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let c = parts[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        assert_eq!(p.rank(), 2);
        assert_eq!(p.cols(), c, "concat_rows: column mismatch");
        rows += p.rows();
        p.with_data(|d| data.extend_from_slice(d));
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.rows() * c).collect();
    Tensor::op(
        vec![rows, c],
        data,
        parts.to_vec(),
        move |g, node: &Inner| {
            let mut off = 0;
            for (p, &sz) in node.parents().iter().zip(&sizes) {
                p.accumulate_grad(&g[off..off + sz]);
                off += sz;
            }
        },
    )
}

/// Rows `r0..r1` of a rank-2 tensor.
pub fn slice_rows(x: &Tensor, r0: usize, r1: usize) -> Tensor {
    assert_eq!(x.rank(), 2);
    let (r, c) = (x.rows(), x.cols());
    assert!(r0 <= r1 && r1 <= r, "slice_rows {r0}..{r1} out of {r}");
    let out = x.with_data(|d| d[r0 * c..r1 * c].to_vec());
    Tensor::op(
        vec![r1 - r0, c],
        out,
        vec![x.clone()],
        move |g, node: &Inner| {
            let mut dx = vec![0.0; r * c];
            dx[r0 * c..r1 * c].copy_from_slice(g);
            node.parents()[0].accumulate_grad(&dx);
        },
    )
}

/// Gather rows by index (duplicates allowed; backward scatter-adds).
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    assert_eq!(x.rank(), 2);
    let (r, c) = (x.rows(), x.cols());
    for &i in idx {
        assert!(i < r, "gather_rows index {i} out of {r}");
    }
    let out = x.with_data(|d| {
        let mut v = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            v.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        v
    });
    let idx = idx.to_vec();
    Tensor::op(
        vec![idx.len(), c],
        out,
        vec![x.clone()],
        move |g, node: &Inner| {
            let mut dx = vec![0.0; r * c];
            for (pos, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    dx[i * c + j] += g[pos * c + j];
                }
            }
            node.parents()[0].accumulate_grad(&dx);
        },
    )
}

/// out[i] = rows[p] where idx[p] == i, otherwise base[i]. Indices must be
/// unique. Gradient reaches `rows` at scattered positions and `base` at the
/// untouched ones.
pub fn scatter_rows(base: &Tensor, rows: &Tensor, idx: &[usize]) -> Result<Tensor> {
    assert_eq!(base.rank(), 2);
    let (r, c) = (base.rows(), base.cols());
    if rows.numel() > 0 || !idx.is_empty() {
        if rows.rank() != 2 || rows.cols() != c {
            return Err(Error::Dimension(format!(
                "scatter_rows: rows shape {:?} incompatible with base {:?}",
                rows.shape(),
                base.shape()
            )));
        }
        if rows.rows() != idx.len() {
            return Err(Error::Dimension(format!(
                "scatter_rows: {} rows for {} indices",
                rows.rows(),
                idx.len()
            )));
        }
    }
    let mut mask = vec![false; r];
    for &i in idx {
        if i >= r {
            return Err(Error::Argument(format!("scatter index {i} out of {r}")));
        }
        if mask[i] {
            return Err(Error::Argument(format!("duplicate scatter index {i}")));
        }
        mask[i] = true;
    }
    let out = base.with_data(|bd| {
        rows.with_data(|rd| {
            let mut v = bd.to_vec();
            for (pos, &i) in idx.iter().enumerate() {
                v[i * c..(i + 1) * c].copy_from_slice(&rd[pos * c..(pos + 1) * c]);
            }
            v
        })
    });
    let idx = idx.to_vec();
    Ok(Tensor::op(
        vec![r, c],
        out,
        vec![base.clone(), rows.clone()],
        move |g, node: &Inner| {
            let pb = &node.parents()[0];
            let pr = &node.parents()[1];
            if pb.requires_grad() {
                let mut db = g.to_vec();
                for &i in &idx {
                    db[i * c..(i + 1) * c].fill(0.0);
                }
                pb.accumulate_grad(&db);
            }
            if pr.requires_grad() {
                let mut dr = vec![0.0; idx.len() * c];
                for (pos, &i) in idx.iter().enumerate() {
                    dr[pos * c..(pos + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                pr.accumulate_grad(&dr);
            }
        },
    ))
}

/// Columns `c0..c1` of a rank-2 tensor.
pub fn slice_cols(x: &Tensor, c0: usize, c1: usize) -> Tensor {
    assert_eq!(x.rank(), 2);
    let (r, c) = (x.rows(), x.cols());
    assert!(c0 <= c1 && c1 <= c, "slice_cols {c0}..{c1} out of {c}");
    let w = c1 - c0;
    let out = x.with_data(|d| {
        let mut v = Vec::with_capacity(r * w);
        for row in d.chunks_exact(c) {
            v.extend_from_slice(&row[c0..c1]);
        }
        v
    });
    Tensor::op(vec![r, w], out, vec![x.clone()], move |g, node: &Inner| {
        let mut dx = vec![0.0; r * c];
        for i in 0..r {
            dx[i * c + c0..i * c + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
        }
        node.parents()[0].accumulate_grad(&dx);
    })
}

/// Horizontal concatenation of rank-2 tensors with equal row counts.
pub fn concat_cols(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let r = parts[0].rows();
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            assert_eq!(p.rank(), 2);
            assert_eq!(p.rows(), r, "concat_cols: row mismatch");
            p.cols()
        })
        .collect();
    let c: usize = widths.iter().sum();
    let mut out = vec![0.0; r * c];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        p.with_data(|d| {
            for i in 0..r {
                out[i * c + off..i * c + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
        });
        off += w;
    }
    Tensor::op(vec![r, c], out, parts.to_vec(), move |g, node: &Inner| {
        let mut off = 0;
        for (p, &w) in node.parents().iter().zip(&widths) {
            if p.requires_grad() {
                let mut dp = vec![0.0; r * w];
                for i in 0..r {
                    dp[i * w..(i + 1) * w].copy_from_slice(&g[i * c + off..i * c + off + w]);
                }
                p.accumulate_grad(&dp);
            }
            off += w;
        }
    })
}

/// Rows of an embedding table selected by token id.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Tensor {
    gather_rows(table, ids)
}

// ── fused multi-head attention ───────────────────────────────────────────

fn head_slice(src: &[f64], rows: usize, width: usize, c0: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for i in 0..rows {
        out.extend_from_slice(&src[i * width + c0..i * width + c0 + dh]);
    }
    out
}

fn head_unslice(dst: &mut [f64], src: &[f64], rows: usize, width: usize, c0: usize, dh: usize) {
    for i in 0..rows {
        for j in 0..dh {
            dst[i * width + c0 + j] += src[i * dh + j];
        }
    }
}

/// Softmax attention of projected queries over projected keys/values, all
/// heads in one node: per head, `softmax(q_h·k_hᵀ/√d_h)·v_h`, concatenated
/// back along the feature axis. The per-head attention probabilities are
/// kept for the backward pass.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (lq, h) = require_2d(q, "attention queries")?;
    let (lk, hk) = require_2d(k, "attention keys")?;
    let (lv, hv) = require_2d(v, "attention values")?;
    if h != hk || h != hv || lk != lv {
        return Err(Error::Dimension(format!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || h % heads != 0 {
        return Err(Error::Argument(format!(
            "{heads} heads do not divide width {h}"
        )));
    }
    let dh = h / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut out = vec![0.0; lq * h];
    let mut probs_per_head: Vec<Vec<f64>> = Vec::with_capacity(heads);
    q.with_data(|qd| {
        k.with_data(|kd| {
            v.with_data(|vd| {
                for head in 0..heads {
                    let c0 = head * dh;
                    let qh = head_slice(qd, lq, h, c0, dh);
                    let kh = head_slice(kd, lk, h, c0, dh);
                    let vh = head_slice(vd, lk, h, c0, dh);
                    let mut scores = vec![0.0; lq * lk];
                    matmul_bt_acc(&mut scores, &qh, &kh, lq, dh, lk);
                    for s in scores.iter_mut() {
                        *s *= inv_sqrt;
                    }
                    let probs = softmax_rows(&scores, lq, lk);
                    let mut oh = vec![0.0; lq * dh];
                    matmul_acc(&mut oh, &probs, &vh, lq, lk, dh);
                    head_unslice(&mut out, &oh, lq, h, c0, dh);
                    probs_per_head.push(probs);
                }
            })
        })
    });
    Ok(Tensor::op(
        vec![lq, h],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        move |g, node: &Inner| {
            let pq = &node.parents()[0];
            let pk = &node.parents()[1];
            let pv = &node.parents()[2];
            let need_q = pq.requires_grad();
            let need_k = pk.requires_grad();
            let need_v = pv.requires_grad();
            let mut dq = vec![0.0; lq * h];
            let mut dk = vec![0.0; lk * h];
            let mut dv = vec![0.0; lk * h];
            pq.with_data(|qd| {
                pk.with_data(|kd| {
                    pv.with_data(|vd| {
                        for (head, probs) in probs_per_head.iter().enumerate() {
                            let c0 = head * dh;
                            let gh = head_slice(g, lq, h, c0, dh);
                            if need_v {
                                let mut dvh = vec![0.0; lk * dh];
                                matmul_at_acc(&mut dvh, probs, &gh, lq, lk, dh);
                                head_unslice(&mut dv, &dvh, lk, h, c0, dh);
                            }
                            if need_q || need_k {
                                let vh = head_slice(vd, lk, h, c0, dh);
                                // dP = gh · vhᵀ, then the softmax VJP row-wise
                                let mut dp = vec![0.0; lq * lk];
                                matmul_bt_acc(&mut dp, &gh, &vh, lq, dh, lk);
                                for i in 0..lq {
                                    let prow = &probs[i * lk..(i + 1) * lk];
                                    let drow = &mut dp[i * lk..(i + 1) * lk];
                                    let dot: f64 =
                                        drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                                    for (d, p) in drow.iter_mut().zip(prow) {
                                        *d = p * (*d - dot) * inv_sqrt;
                                    }
                                }
                                if need_q {
                                    let kh = head_slice(kd, lk, h, c0, dh);
                                    let mut dqh = vec![0.0; lq * dh];
                                    matmul_acc(&mut dqh, &dp, &kh, lq, lk, dh);
                                    head_unslice(&mut dq, &dqh, lq, h, c0, dh);
                                }
                                if need_k {
                                    let qh = head_slice(qd, lq, h, c0, dh);
                                    let mut dkh = vec![0.0; lk * dh];
                                    matmul_at_acc(&mut dkh, &dp, &qh, lq, lk, dh);
                                    head_unslice(&mut dk, &dkh, lk, h, c0, dh);
                                }
                            }
                        }
                    })
                })
            });
            if need_q {
                pq.accumulate_grad(&dq);
            }
            if need_k {
                pk.accumulate_grad(&dk);
            }
            if need_v {
                pv.accumulate_grad(&dv);
            }
        },
    ))
}

// ── bilinear upsampling ──────────────────────────────────────────────────

/// Interpolation taps for one output axis position (align-corners mapping).
fn bilinear_taps(dst: usize, src_side: usize, dst_side: usize) -> [(usize, f64); 2] {
    if src_side == 1 || dst_side == 1 {
        return [(0, 1.0), (0, 0.0)];
    }
    let pos = dst as f64 * (src_side - 1) as f64 / (dst_side - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_side - 1);
    let w = pos - lo as f64;
    [(lo, 1.0 - w), (hi, w)]
}

/// Bilinear upsampling of an s×s grid of feature vectors (flattened row-major
/// to [s²×H]) to t×t, align-corners convention. Constant grids are preserved
/// exactly; s = 1 broadcasts.
pub fn upsample_bilinear(x: &Tensor, src_side: usize, dst_side: usize) -> Result<Tensor> {
    let (r, h) = require_2d(x, "upsample input")?;
    if r != src_side * src_side {
        return Err(Error::Dimension(format!(
            "upsample input has {r} rows, expected {src_side}²"
        )));
    }
    if dst_side <= src_side {
        return Err(Error::Argument(format!(
            "upsample target side {dst_side} must exceed source side {src_side}"
        )));
    }
    // (dst_row, src_row, weight) taps, fixed by the two side lengths
    let mut taps: Vec<(usize, usize, f64)> = Vec::new();
    for dy in 0..dst_side {
        let ys = bilinear_taps(dy, src_side, dst_side);
        for dx in 0..dst_side {
            let xs = bilinear_taps(dx, src_side, dst_side);
            let d = dy * dst_side + dx;
            for &(sy, wy) in &ys {
                for &(sx, wx) in &xs {
                    let w = wy * wx;
                    if w != 0.0 {
                        taps.push((d, sy * src_side + sx, w));
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; dst_side * dst_side * h];
    x.with_data(|xd| {
        for &(d, s, w) in &taps {
            let src = &xd[s * h..(s + 1) * h];
            let dst = &mut out[d * h..(d + 1) * h];
            for (o, v) in dst.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    });
    Ok(Tensor::op(
        vec![dst_side * dst_side, h],
        out,
        vec![x.clone()],
        move |g, node: &Inner| {
            let mut dx = vec![0.0; src_side * src_side * h];
            for &(d, s, w) in &taps {
                let grow = &g[d * h..(d + 1) * h];
                let drow = &mut dx[s * h..(s + 1) * h];
                for (o, v) in drow.iter_mut().zip(grow) {
                    *o += w * v;
                }
            }
            node.parents()[0].accumulate_grad(&dx);
        },
    ))
}
