//! Multi-head softmax attention over explicit key/value matrices, plus the
//! per-block KV cache used during scale-by-scale generation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{add_bias_row, concat_rows, matmul, multi_head_attention, Tensor};

#[derive(Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(hidden: usize, heads: usize, rng: &mut impl Rng) -> AttentionParams {
        assert_eq!(hidden % heads, 0, "hidden must be divisible by heads");
        let mut w = || -> Tensor {
            let data: Vec<f64> =
                (0..hidden * hidden).map(|_| rng.gen_range(-0.05..0.05)).collect();
            Tensor::param(vec![hidden, hidden], data)
        };
        let wq = w();
        let wk = w();
        let wv = w();
        let wo = w();
        AttentionParams {
            wq,
            bq: Tensor::param(vec![hidden], vec![0.0; hidden]),
            wk,
            bk: Tensor::param(vec![hidden], vec![0.0; hidden]),
            wv,
            bv: Tensor::param(vec![hidden], vec![0.0; hidden]),
            wo,
            bo: Tensor::param(vec![hidden], vec![0.0; hidden]),
            heads,
        }
    }

    pub fn hidden(&self) -> usize {
        self.wq.rows()
    }

    pub fn project_q(&self, x: &Tensor) -> Tensor {
        add_bias_row(&matmul(x, &self.wq).expect("q proj"), &self.bq)
    }

    pub fn project_k(&self, x: &Tensor) -> Tensor {
        add_bias_row(&matmul(x, &self.wk).expect("k proj"), &self.bk)
    }

    pub fn project_v(&self, x: &Tensor) -> Tensor {
        add_bias_row(&matmul(x, &self.wv).expect("v proj"), &self.bv)
    }

    /// Softmax attention of projected queries over projected keys/values,
    /// all heads at once, followed by the output projection. No masking: the
    /// caller controls visibility by choosing which rows enter `k`/`v`.
    pub fn mix(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        if k.rows() != v.rows() {
            return Err(Error::Dimension(format!(
                "{} keys vs {} values",
                k.rows(),
                v.rows()
            )));
        }
        let mixed = multi_head_attention(q, k, v, self.heads)?;
        Ok(add_bias_row(&matmul(&mixed, &self.wo)?, &self.bo))
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}wq"), self.wq.clone()),
            (format!("{prefix}bq"), self.bq.clone()),
            (format!("{prefix}wk"), self.wk.clone()),
            (format!("{prefix}bk"), self.bk.clone()),
            (format!("{prefix}wv"), self.wv.clone()),
            (format!("{prefix}bv"), self.bv.clone()),
            (format!("{prefix}wo"), self.wo.clone()),
            (format!("{prefix}bo"), self.bo.clone()),
        ]
    }
}

/// Projected keys/values of all earlier scales for one block.
#[derive(Clone, Default)]
pub struct KvCache {
    k: Option<Tensor>,
    v: Option<Tensor>,
    len: usize,
}

impl KvCache {
    pub fn new() -> KvCache {
        KvCache::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn k(&self) -> Option<&Tensor> {
        self.k.as_ref()
    }

    pub fn v(&self) -> Option<&Tensor> {
        self.v.as_ref()
    }

    /// Appends one scale's projected keys/values (all rows of the scale).
    pub fn append(&mut self, k_new: &Tensor, v_new: &Tensor) {
        assert_eq!(k_new.rows(), v_new.rows());
        self.len += k_new.rows();
        self.k = Some(match &self.k {
            Some(old) => concat_rows(&[old.clone(), k_new.clone()]),
            None => k_new.clone(),
        });
        self.v = Some(match &self.v {
            Some(old) => concat_rows(&[old.clone(), v_new.clone()]),
            None => v_new.clone(),
        });
    }
}
