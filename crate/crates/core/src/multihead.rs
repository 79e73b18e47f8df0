//! Multi-head, grouped-query and multi-query attention.
//!
//! Query head `h` reads key/value head `h / group_size`: contiguous blocks
//! of query heads share one KV head. `n_kv_heads == n_heads` is plain MHA,
//! `n_kv_heads == 1` is MQA.

use crate::attention::{attend_projected, Kernel, MaskPolicy};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{concat_cols, matmul, Matrix};
use crate::rng::SeededRng;
use crate::tokenizer::{apply_rope, RopeParams};

#[derive(Debug, Clone, PartialEq)]
pub struct MhaSpec {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_in: usize,
    pub d_qk: usize,
    pub d_head: usize,
    pub d_out: usize,
    pub kernel: Kernel,
    /// Rotary embedding applied to every query and key head.
    pub rope: Option<RopeParams>,
}

impl MhaSpec {
    /// Scaled-exponential kernel, no RoPE.
    pub fn new(
        n_heads: usize,
        n_kv_heads: usize,
        d_in: usize,
        d_qk: usize,
        d_head: usize,
        d_out: usize,
    ) -> Result<Self> {
        let spec = MhaSpec {
            n_heads,
            n_kv_heads,
            d_in,
            d_qk,
            d_head,
            d_out,
            kernel: Kernel::scaled_exp(d_qk.max(1))?,
            rope: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Plain MHA with `d_qk = d_head`.
    pub fn mha(n_heads: usize, d_in: usize, d_head: usize, d_out: usize) -> Result<Self> {
        Self::new(n_heads, n_heads, d_in, d_head, d_head, d_out)
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Result<Self> {
        self.kernel = kernel;
        self.validate()?;
        Ok(self)
    }

    pub fn with_rope(mut self, rope: RopeParams) -> Result<Self> {
        self.rope = Some(rope);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_in", self.d_in),
            ("d_qk", self.d_qk),
            ("d_head", self.d_head),
            ("d_out", self.d_out),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be positive")));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Spec(format!(
                "n_kv_heads {} does not divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        if let Kernel::ScaledExp { d_qk } = self.kernel {
            if d_qk != self.d_qk {
                return Err(Error::Spec(format!(
                    "kernel scaled for d_qk {d_qk}, spec has {}",
                    self.d_qk
                )));
            }
        }
        if let Some(rope) = &self.rope {
            if rope.head_dim() != self.d_qk {
                return Err(Error::Spec(format!(
                    "RoPE head_dim {} differs from d_qk {}",
                    rope.head_dim(),
                    self.d_qk
                )));
            }
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// KV head read by query head `h`.
    pub fn kv_head_for(&self, h: usize) -> usize {
        h / self.group_size()
    }
}

/// Per-head projections plus the output projection `W^O`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaWeights {
    /// `n_heads` matrices `d_in x d_qk`.
    pub wq: Vec<Matrix>,
    /// `n_kv_heads` matrices `d_in x d_qk`.
    pub wk: Vec<Matrix>,
    /// `n_kv_heads` matrices `d_in x d_head`.
    pub wv: Vec<Matrix>,
    /// `(n_heads * d_head) x d_out`.
    pub wo: Matrix,
}

impl MhaWeights {
    pub fn new(wq: Vec<Matrix>, wk: Vec<Matrix>, wv: Vec<Matrix>, wo: Matrix) -> Result<Self> {
        let w = MhaWeights { wq, wk, wv, wo };
        w.validate(&w.infer_spec()?)?;
        Ok(w)
    }

    /// Uniform `[-1, 1)` entries, scaled by `1/sqrt(d_in)` so logits stay moderate.
    pub fn random(spec: &MhaSpec, rng: &mut SeededRng) -> Self {
        let s = 1.0 / (spec.d_in as f64).sqrt();
        let mut draw = |r, c| rng.uniform_matrix(r, c).scale(s);
        let wq = (0..spec.n_heads)
            .map(|_| draw(spec.d_in, spec.d_qk))
            .collect();
        let wk = (0..spec.n_kv_heads)
            .map(|_| draw(spec.d_in, spec.d_qk))
            .collect();
        let wv = (0..spec.n_kv_heads)
            .map(|_| draw(spec.d_in, spec.d_head))
            .collect();
        let wo = draw(spec.n_heads * spec.d_head, spec.d_out);
        MhaWeights { wq, wk, wv, wo }
    }

    pub fn n_heads(&self) -> usize {
        self.wq.len()
    }

    pub fn n_kv_heads(&self) -> usize {
        self.wk.len()
    }

    /// Spec implied by the weight shapes (scaled-exponential kernel).
    pub fn infer_spec(&self) -> Result<MhaSpec> {
        let first = |v: &[Matrix], what: &str| -> Result<(usize, usize)> {
            v.first()
                .map(Matrix::shape)
                .ok_or_else(|| Error::Spec(format!("{what} list is empty")))
        };
        let (d_in, d_qk) = first(&self.wq, "W^Q")?;
        let (_, d_head) = first(&self.wv, "W^V")?;
        MhaSpec::new(
            self.n_heads(),
            self.n_kv_heads(),
            d_in,
            d_qk,
            d_head,
            self.wo.cols(),
        )
    }

    pub fn validate(&self, spec: &MhaSpec) -> Result<()> {
        if self.wq.len() != spec.n_heads
            || self.wk.len() != spec.n_kv_heads
            || self.wv.len() != spec.n_kv_heads
        {
            return Err(Error::Spec(format!(
                "weight lists ({}, {}, {}) do not match n_heads {} / n_kv_heads {}",
                self.wq.len(),
                self.wk.len(),
                self.wv.len(),
                spec.n_heads,
                spec.n_kv_heads
            )));
        }
        let check = |m: &Matrix, shape: (usize, usize), what: &'static str| {
            if m.shape() != shape {
                Err(shape_err(
                    what,
                    m.shape_str(),
                    format!("{}x{}", shape.0, shape.1),
                ))
            } else {
                Ok(())
            }
        };
        for m in &self.wq {
            check(m, (spec.d_in, spec.d_qk), "W^Q_h")?;
        }
        for m in &self.wk {
            check(m, (spec.d_in, spec.d_qk), "W^K_h")?;
        }
        for m in &self.wv {
            check(m, (spec.d_in, spec.d_head), "W^V_h")?;
        }
        check(&self.wo, (spec.n_heads * spec.d_head, spec.d_out), "W^O")
    }
}

/// Column-wise concatenations `(W^Q, W^K, W^V)` of the per-head matrices.
pub fn stacked_weights(w: &MhaWeights) -> Result<(Matrix, Matrix, Matrix)> {
    Ok((
        concat_cols(&w.wq)?,
        concat_cols(&w.wk)?,
        concat_cols(&w.wv)?,
    ))
}

fn check_input(x: &Matrix, spec: &MhaSpec, what: &'static str) -> Result<()> {
    if x.cols() != spec.d_in {
        return Err(shape_err(
            what,
            x.shape_str(),
            format!("d_in {}", spec.d_in),
        ));
    }
    Ok(())
}

/// Per-head queries `X W^Q_h`, rotated from `start_pos` when RoPE is on.
pub fn project_queries(
    x: &Matrix,
    w: &MhaWeights,
    spec: &MhaSpec,
    start_pos: usize,
) -> Result<Vec<Matrix>> {
    check_input(x, spec, "query input")?;
    w.wq.iter()
        .map(|wq| {
            let q = matmul(x, wq)?;
            match &spec.rope {
                Some(p) => apply_rope(&q, start_pos, p),
                None => Ok(q),
            }
        })
        .collect()
}

/// Per-KV-head keys and values; keys rotated from `start_pos` when RoPE is on.
pub fn project_keys_values(
    x: &Matrix,
    w: &MhaWeights,
    spec: &MhaSpec,
    start_pos: usize,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    check_input(x, spec, "key/value input")?;
    let mut keys = Vec::with_capacity(spec.n_kv_heads);
    let mut values = Vec::with_capacity(spec.n_kv_heads);
    for (wk, wv) in w.wk.iter().zip(&w.wv) {
        let k = matmul(x, wk)?;
        keys.push(match &spec.rope {
            Some(p) => apply_rope(&k, start_pos, p)?,
            None => k,
        });
        values.push(matmul(x, wv)?);
    }
    Ok((keys, values))
}

/// Attends every query head against its KV head, concatenates the head
/// outputs and applies `W^O`.
pub fn combine_heads(
    queries: &[Matrix],
    keys: &[Matrix],
    values: &[Matrix],
    w: &MhaWeights,
    spec: &MhaSpec,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    let heads = queries
        .iter()
        .enumerate()
        .map(|(h, q)| {
            let g = spec.kv_head_for(h);
            attend_projected(q, &keys[g], &values[g], &spec.kernel, mask)
        })
        .collect::<Result<Vec<_>>>()?;
    matmul(&concat_cols(&heads)?, &w.wo)
}

/// `concat_col(Y_h) W^O` with `Y_h = Z_h⁻¹ A_h V_h`, keys and values from `xkv`.
///
/// With RoPE, keys sit at positions `0..` and queries at `offset..` for a
/// causal mask with that offset (`0..` otherwise).
pub fn mha_forward(
    xq: &Matrix,
    xkv: &Matrix,
    w: &MhaWeights,
    spec: &MhaSpec,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    spec.validate()?;
    w.validate(spec)?;
    let q_start = match mask {
        MaskPolicy::Causal { offset } => *offset,
        _ => 0,
    };
    let queries = project_queries(xq, w, spec, q_start)?;
    let (keys, values) = project_keys_values(xkv, w, spec, 0)?;
    combine_heads(&queries, &keys, &values, w, spec, mask)
}

/// `mha_forward(x, x, ...)`.
pub fn self_attention(
    x: &Matrix,
    w: &MhaWeights,
    spec: &MhaSpec,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    mha_forward(x, x, w, spec, mask)
}
