//! Multi-head latent attention (MLA).
//!
//! Keys and values of every head are read from one shared latent
//! `L = X W^L` (`d_L` columns) and queries from a query latent
//! `L_Q = X W^{L_Q}`:
//!
//! ```text
//! Q_h = L_Q W^{L_Q Q}_h    K_h = L W^{LK}_h    V_h = L W^{LV}_h
//! ```
//!
//! Two merges remove the per-head key and value maps from the forward pass:
//! `W^{LQK}_h = W^{L_Q Q}_h (W^{LK}_h)ᵀ` turns scores into
//! `L_Q W^{LQK}_h Lᵀ`, and `W^{LO} = blockdiag(W^{LV}_h) W^O` lets every head
//! average the latent rows directly. Only `L` has to be cached.
//!
//! Scores use `exp(x / sqrt(d_head))`, the same scaled exponential as the
//! per-head formulation, so merged and expanded paths agree exactly.
//!
//! RoPE does not commute with the merge: rotating `Q_h` and `K_h` puts a
//! position-dependent `R_i R_jᵀ` between `W^{L_Q Q}_h` and `(W^{LK}_h)ᵀ`.
//! [`mla_forward_decoupled_rope`] instead appends a separate rotated part to
//! every query and key and leaves the latent path unrotated.

use crate::attention::{
    attend_projected, normalize_scores, normalizer, scores_from_logits, Kernel, MaskPolicy,
};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{
    block_diag, concat_cols, matmul, matmul_transpose_b, split_cols, truncated_svd, Matrix,
};
use crate::multihead::{stacked_weights, MhaSpec, MhaWeights};
use crate::rng::SeededRng;
use crate::tokenizer::{apply_rope, RopeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlaSpec {
    pub n_heads: usize,
    pub d_in: usize,
    /// Per-head query/key/value width.
    pub d_head: usize,
    /// `d_L`, shared key/value latent width.
    pub d_latent: usize,
    /// `d_{L_Q}`, query latent width.
    pub d_latent_q: usize,
    pub d_out: usize,
}

impl MlaSpec {
    pub fn new(
        n_heads: usize,
        d_in: usize,
        d_head: usize,
        d_latent: usize,
        d_latent_q: usize,
        d_out: usize,
    ) -> Result<Self> {
        let spec = MlaSpec {
            n_heads,
            d_in,
            d_head,
            d_latent,
            d_latent_q,
            d_out,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_heads", self.n_heads),
            ("d_in", self.d_in),
            ("d_head", self.d_head),
            ("d_latent", self.d_latent),
            ("d_latent_q", self.d_latent_q),
            ("d_out", self.d_out),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be positive")));
        }
        if self.d_latent > self.d_in || self.d_latent_q > self.d_in {
            return Err(Error::Spec(format!(
                "latent widths d_L={} and d_LQ={} must not exceed d_in={}",
                self.d_latent, self.d_latent_q, self.d_in
            )));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Kernel {
        Kernel::ScaledExp { d_qk: self.d_head }
    }

    /// Spec of the equivalent per-head model.
    pub fn mha_spec(&self) -> Result<MhaSpec> {
        MhaSpec::mha(self.n_heads, self.d_in, self.d_head, self.d_out)
    }
}

fn expect_shape(m: &Matrix, shape: (usize, usize), what: &'static str) -> Result<()> {
    if m.shape() != shape {
        return Err(shape_err(
            what,
            m.shape_str(),
            format!("{}x{}", shape.0, shape.1),
        ));
    }
    Ok(())
}

fn expect_heads(list: &[Matrix], n: usize, what: &str) -> Result<()> {
    if list.len() != n {
        return Err(Error::Spec(format!(
            "{what} has {} heads, expected {n}",
            list.len()
        )));
    }
    Ok(())
}

/// Unmerged latent weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MlaWeights {
    /// `W^L`, `d_in x d_L`.
    pub w_l: Matrix,
    /// `W^{L_Q}`, `d_in x d_LQ`.
    pub w_lq: Matrix,
    /// `W^{L_Q Q}_h`, `d_LQ x d_head` each.
    pub w_lqq: Vec<Matrix>,
    /// `W^{LK}_h`, `d_L x d_head` each.
    pub w_lk: Vec<Matrix>,
    /// `W^{LV}_h`, `d_L x d_head` each.
    pub w_lv: Vec<Matrix>,
    /// `W^O`, `(n_heads * d_head) x d_out`.
    pub wo: Matrix,
}

impl MlaWeights {
    pub fn random(spec: &MlaSpec, rng: &mut SeededRng) -> Self {
        let mut draw = |r: usize, c: usize| rng.uniform_matrix(r, c).scale(1.0 / (r as f64).sqrt());
        let w_l = draw(spec.d_in, spec.d_latent);
        let w_lq = draw(spec.d_in, spec.d_latent_q);
        let w_lqq = (0..spec.n_heads)
            .map(|_| draw(spec.d_latent_q, spec.d_head))
            .collect();
        let w_lk = (0..spec.n_heads)
            .map(|_| draw(spec.d_latent, spec.d_head))
            .collect();
        let w_lv = (0..spec.n_heads)
            .map(|_| draw(spec.d_latent, spec.d_head))
            .collect();
        let wo = draw(spec.n_heads * spec.d_head, spec.d_out);
        MlaWeights {
            w_l,
            w_lq,
            w_lqq,
            w_lk,
            w_lv,
            wo,
        }
    }

    pub fn validate(&self, spec: &MlaSpec) -> Result<()> {
        spec.validate()?;
        expect_shape(&self.w_l, (spec.d_in, spec.d_latent), "W^L")?;
        expect_shape(&self.w_lq, (spec.d_in, spec.d_latent_q), "W^{L_Q}")?;
        expect_heads(&self.w_lqq, spec.n_heads, "W^{L_Q Q}")?;
        expect_heads(&self.w_lk, spec.n_heads, "W^{LK}")?;
        expect_heads(&self.w_lv, spec.n_heads, "W^{LV}")?;
        for m in &self.w_lqq {
            expect_shape(m, (spec.d_latent_q, spec.d_head), "W^{L_Q Q}_h")?;
        }
        for m in self.w_lk.iter().chain(&self.w_lv) {
            expect_shape(m, (spec.d_latent, spec.d_head), "W^{LK}_h / W^{LV}_h")?;
        }
        expect_shape(&self.wo, (spec.n_heads * spec.d_head, spec.d_out), "W^O")
    }

    pub fn infer_spec(&self) -> Result<MlaSpec> {
        let d_head = self
            .w_lk
            .first()
            .ok_or_else(|| Error::Spec("no heads".into()))?
            .cols();
        let spec = MlaSpec::new(
            self.w_lk.len(),
            self.w_l.rows(),
            d_head,
            self.w_l.cols(),
            self.w_lq.cols(),
            self.wo.cols(),
        )?;
        self.validate(&spec)?;
        Ok(spec)
    }

    /// The per-head model these weights factorize:
    /// `W^Q_h = W^{L_Q} W^{L_Q Q}_h`, `W^K_h = W^L W^{LK}_h`, `W^V_h = W^L W^{LV}_h`.
    pub fn expand_to_mha(&self) -> Result<(MhaWeights, MhaSpec)> {
        let spec = self.infer_spec()?;
        let product =
            |a: &Matrix, bs: &[Matrix]| bs.iter().map(|b| matmul(a, b)).collect::<Result<Vec<_>>>();
        let w = MhaWeights {
            wq: product(&self.w_lq, &self.w_lqq)?,
            wk: product(&self.w_l, &self.w_lk)?,
            wv: product(&self.w_l, &self.w_lv)?,
            wo: self.wo.clone(),
        };
        Ok((w, spec.mha_spec()?))
    }
}

/// The weights an MLA layer keeps after merging.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedMlaWeights {
    /// `W^L`, `d_in x d_L`.
    pub w_l: Matrix,
    /// `W^{L_Q}`, `d_in x d_LQ`.
    pub w_lq: Matrix,
    /// `W^{LQK}_h`, `d_LQ x d_L` each.
    pub w_lqk: Vec<Matrix>,
    /// `W^{LO}`, `(n_heads * d_L) x d_out`.
    pub w_lo: Matrix,
}

impl MergedMlaWeights {
    pub fn validate(&self, spec: &MlaSpec) -> Result<()> {
        spec.validate()?;
        expect_shape(&self.w_l, (spec.d_in, spec.d_latent), "W^L")?;
        expect_shape(&self.w_lq, (spec.d_in, spec.d_latent_q), "W^{L_Q}")?;
        expect_heads(&self.w_lqk, spec.n_heads, "W^{LQK}")?;
        for m in &self.w_lqk {
            expect_shape(m, (spec.d_latent_q, spec.d_latent), "W^{LQK}_h")?;
        }
        expect_shape(
            &self.w_lo,
            (spec.n_heads * spec.d_latent, spec.d_out),
            "W^{LO}",
        )
    }
}

/// `W^{LQK}_h = W^{L_Q Q}_h (W^{LK}_h)ᵀ` and `W^{LO} = blockdiag(W^{LV}_h) W^O`.
pub fn merge_weights(w: &MlaWeights) -> Result<MergedMlaWeights> {
    w.infer_spec()?;
    let w_lqk = w
        .w_lqq
        .iter()
        .zip(&w.w_lk)
        .map(|(q, k)| matmul_transpose_b(q, k))
        .collect::<Result<Vec<_>>>()?;
    let w_lo = matmul(&block_diag(&w.w_lv)?, &w.wo)?;
    Ok(MergedMlaWeights {
        w_l: w.w_l.clone(),
        w_lq: w.w_lq.clone(),
        w_lqk,
        w_lo,
    })
}

/// Attention from query latents `lq` over cached latents `l` with merged
/// weights. `extra_logits[h]`, when given, is added to head `h`'s latent
/// logits, and `kernel` supplies the scaling.
pub(crate) fn attend_latent(
    lq: &Matrix,
    l: &Matrix,
    w: &MergedMlaWeights,
    kernel: &Kernel,
    mask: &MaskPolicy,
    extra_logits: Option<&[Matrix]>,
) -> Result<Matrix> {
    let heads = w
        .w_lqk
        .iter()
        .enumerate()
        .map(|(h, w_lqk)| {
            let mut logits = matmul_transpose_b(&matmul(lq, w_lqk)?, l)?;
            if let Some(extra) = extra_logits {
                logits = logits.add(&extra[h])?;
            }
            let scores = scores_from_logits(&logits, kernel, mask)?;
            let z = normalizer(&scores)?;
            matmul(&normalize_scores(&scores, &z), l)
        })
        .collect::<Result<Vec<_>>>()?;
    matmul(&concat_cols(&heads)?, &w.w_lo)
}

/// Latent self-attention with merged weights.
pub fn mla_forward(
    x: &Matrix,
    w: &MergedMlaWeights,
    spec: &MlaSpec,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    mla_forward_cross(x, x, w, spec, mask)
}

/// Queries from `xq`, shared latent from `xkv`.
pub fn mla_forward_cross(
    xq: &Matrix,
    xkv: &Matrix,
    w: &MergedMlaWeights,
    spec: &MlaSpec,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    w.validate(spec)?;
    let lq = matmul(xq, &w.w_lq)?;
    let l = matmul(xkv, &w.w_l)?;
    attend_latent(&lq, &l, w, &spec.kernel(), mask, None)
}

/// Two-stage latent computation without merging: per-head `Q_h`, `K_h`,
/// `V_h` are formed from the latents, attended, concatenated and projected
/// by `W^O`.
pub fn mla_forward_unmerged(
    x: &Matrix,
    w: &MlaWeights,
    spec: &MlaSpec,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    w.validate(spec)?;
    let lq = matmul(x, &w.w_lq)?;
    let l = matmul(x, &w.w_l)?;
    let kernel = spec.kernel();
    let heads = (0..spec.n_heads)
        .map(|h| {
            let q = matmul(&lq, &w.w_lqq[h])?;
            let k = matmul(&l, &w.w_lk[h])?;
            let v = matmul(&l, &w.w_lv[h])?;
            attend_projected(&q, &k, &v, &kernel, mask)
        })
        .collect::<Result<Vec<_>>>()?;
    matmul(&concat_cols(&heads)?, &w.wo)
}

/// Frobenius errors of the two low-rank factorizations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionError {
    /// `|[W^K | W^V] - W^L [W^{LK} | W^{LV}]|_F`.
    pub key_value: f64,
    /// `|W^Q - W^{L_Q} W^{L_Q Q}|_F`.
    pub query: f64,
}

impl ReconstructionError {
    pub fn total(&self) -> f64 {
        self.key_value.hypot(self.query)
    }
}

/// Rank-`rank` factorization `m ≈ left · right` with orthonormal `left`.
/// Ranks above `min(m.rows, m.cols)` pad with zero columns/rows and are exact.
fn low_rank(m: &Matrix, rank: usize) -> Result<(Matrix, Matrix, f64)> {
    let usable = rank.min(m.rows().min(m.cols()));
    let svd = truncated_svd(m, usable)?;
    let mut left = svd.u.clone();
    let mut right = svd.scaled_vt();
    if usable < rank {
        left = concat_cols(&[left, Matrix::zeros(m.rows(), rank - usable)])?;
        right = Matrix::vstack(&[right, Matrix::zeros(rank - usable, m.cols())])?;
    }
    let err = m.sub(&matmul(&left, &right)?)?.frobenius_norm();
    Ok((left, right, err))
}

/// Converts per-head weights into latent form by truncated SVD.
///
/// `[W^K | W^V]` (all heads, column-stacked) is factorized at rank `d_latent`
/// so one `W^L` serves keys and values; `W^Q` is factorized at rank
/// `d_latent_q`. The conversion is exact when those matrices have rank at
/// most the latent widths.
pub fn factorize_mha_to_mla(
    w: &MhaWeights,
    d_latent: usize,
    d_latent_q: usize,
) -> Result<(MlaWeights, ReconstructionError)> {
    let mha = w.infer_spec()?;
    if mha.n_kv_heads != mha.n_heads {
        return Err(Error::Spec(format!(
            "conversion needs one KV head per query head, got {} / {}",
            mha.n_kv_heads, mha.n_heads
        )));
    }
    if mha.d_qk != mha.d_head {
        return Err(Error::Spec(format!(
            "conversion needs d_qk == d_head, got {} / {}",
            mha.d_qk, mha.d_head
        )));
    }
    for (name, r) in [("d_latent", d_latent), ("d_latent_q", d_latent_q)] {
        if r == 0 || r > mha.d_in {
            return Err(Error::Argument(format!(
                "{name} = {r} out of range 1..={}",
                mha.d_in
            )));
        }
    }

    let (wq, wk, wv) = stacked_weights(w)?;
    let n = mha.n_heads;
    let widths = vec![mha.d_head; n];

    let (w_l, kv_right, kv_err) = low_rank(&concat_cols(&[wk, wv])?, d_latent)?;
    let mut kv_blocks = split_cols(&kv_right, &vec![mha.d_head; 2 * n])?;
    let w_lv = kv_blocks.split_off(n);
    let w_lk = kv_blocks;

    let (w_lq, q_right, q_err) = low_rank(&wq, d_latent_q)?;
    let w_lqq = split_cols(&q_right, &widths)?;

    Ok((
        MlaWeights {
            w_l,
            w_lq,
            w_lqq,
            w_lk,
            w_lv,
            wo: w.wo.clone(),
        },
        ReconstructionError {
            key_value: kv_err,
            query: q_err,
        },
    ))
}

/// Position-carrying projections appended to the latent queries and keys.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledRope {
    /// Per head, `d_LQ x d_rope`, applied to the query latent.
    pub query: Vec<Matrix>,
    /// Shared by all heads, `d_in x d_rope`, applied to the input; its
    /// rotated output is cached next to `L`.
    pub key: Matrix,
}

impl DecoupledRope {
    pub fn random(spec: &MlaSpec, d_rope: usize, rng: &mut SeededRng) -> Self {
        let query = (0..spec.n_heads)
            .map(|_| {
                rng.uniform_matrix(spec.d_latent_q, d_rope)
                    .scale(1.0 / (spec.d_latent_q as f64).sqrt())
            })
            .collect();
        let key = rng
            .uniform_matrix(spec.d_in, d_rope)
            .scale(1.0 / (spec.d_in as f64).sqrt());
        DecoupledRope { query, key }
    }

    pub fn zeros(spec: &MlaSpec, d_rope: usize) -> Self {
        DecoupledRope {
            query: vec![Matrix::zeros(spec.d_latent_q, d_rope); spec.n_heads],
            key: Matrix::zeros(spec.d_in, d_rope),
        }
    }

    pub fn d_rope(&self) -> usize {
        self.key.cols()
    }

    pub fn validate(&self, spec: &MlaSpec, params: &RopeParams) -> Result<()> {
        let d_rope = self.d_rope();
        if params.head_dim() != d_rope {
            return Err(Error::Spec(format!(
                "RoPE head_dim {} differs from d_rope {d_rope}",
                params.head_dim()
            )));
        }
        expect_heads(&self.query, spec.n_heads, "rope query projections")?;
        for m in &self.query {
            expect_shape(m, (spec.d_latent_q, d_rope), "rope query projection")?;
        }
        expect_shape(&self.key, (spec.d_in, d_rope), "rope key projection")
    }

    /// Scaled exponential over the concatenated latent + rope widths.
    pub fn kernel(&self, spec: &MlaSpec) -> Kernel {
        Kernel::ScaledExp {
            d_qk: spec.d_head + self.d_rope(),
        }
    }

    /// Rotated shared key part for rows of `x` starting at `start_pos`.
    pub fn rotated_keys(
        &self,
        x: &Matrix,
        params: &RopeParams,
        start_pos: usize,
    ) -> Result<Matrix> {
        apply_rope(&matmul(x, &self.key)?, start_pos, params)
    }

    /// Position logits `RoPE(L_Q W^{QR}_h) RoPE(X W^{KR})ᵀ` for every head.
    pub(crate) fn position_logits(
        &self,
        lq: &Matrix,
        rotated_keys: &Matrix,
        params: &RopeParams,
        q_start: usize,
    ) -> Result<Vec<Matrix>> {
        self.query
            .iter()
            .map(|wq| {
                let rq = apply_rope(&matmul(lq, wq)?, q_start, params)?;
                matmul_transpose_b(&rq, rotated_keys)
            })
            .collect()
    }
}

/// Latent self-attention with a decoupled rotary part.
///
/// Per-head logits are the latent logits plus the dot products of the
/// rotated query and key parts, scaled by `1/sqrt(d_head + d_rope)`. Row `t`
/// of `x` sits at position `start_pos + t`.
pub fn mla_forward_decoupled_rope(
    x: &Matrix,
    w: &MergedMlaWeights,
    rope: &DecoupledRope,
    params: &RopeParams,
    spec: &MlaSpec,
    mask: &MaskPolicy,
    start_pos: usize,
) -> Result<Matrix> {
    w.validate(spec)?;
    rope.validate(spec, params)?;
    let q_offset = match mask {
        MaskPolicy::Causal { offset } => *offset,
        _ => 0,
    };
    let lq = matmul(x, &w.w_lq)?;
    let l = matmul(x, &w.w_l)?;
    let keys = rope.rotated_keys(x, params, start_pos)?;
    let extra = rope.position_logits(&lq, &keys, params, start_pos + q_offset)?;
    attend_latent(&lq, &l, w, &rope.kernel(spec), mask, Some(&extra))
}

/// RoPE applied the standard way on the unmerged per-head queries and keys
/// (`R_i` on `Q_h[i]`, `R_j` on `K_h[j]`). `params.head_dim()` must equal `d_head`.
pub fn mla_forward_rope_unmerged(
    x: &Matrix,
    w: &MlaWeights,
    params: &RopeParams,
    spec: &MlaSpec,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    w.validate(spec)?;
    let lq = matmul(x, &w.w_lq)?;
    let l = matmul(x, &w.w_l)?;
    let kernel = spec.kernel();
    let heads = (0..spec.n_heads)
        .map(|h| {
            let q = apply_rope(&matmul(&lq, &w.w_lqq[h])?, 0, params)?;
            let k = apply_rope(&matmul(&l, &w.w_lk[h])?, 0, params)?;
            let v = matmul(&l, &w.w_lv[h])?;
            attend_projected(&q, &k, &v, &kernel, mask)
        })
        .collect::<Result<Vec<_>>>()?;
    matmul(&concat_cols(&heads)?, &w.wo)
}

/// The tempting but wrong way to add RoPE to merged weights: rotate the
/// `d_L`-wide merged query `L_Q W^{LQK}_h` and the latent `L` themselves.
/// `params.head_dim()` must equal `d_L`. Disagrees with
/// [`mla_forward_rope_unmerged`] in general.
pub fn mla_forward_rope_naive_merged(
    x: &Matrix,
    w: &MergedMlaWeights,
    params: &RopeParams,
    spec: &MlaSpec,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    w.validate(spec)?;
    let lq = matmul(x, &w.w_lq)?;
    let l = matmul(x, &w.w_l)?;
    let rotated_l = apply_rope(&l, 0, params)?;
    let kernel = spec.kernel();
    let heads = w
        .w_lqk
        .iter()
        .map(|w_lqk| {
            let q = apply_rope(&matmul(&lq, w_lqk)?, 0, params)?;
            let scores = scores_from_logits(&matmul_transpose_b(&q, &rotated_l)?, &kernel, mask)?;
            let z = normalizer(&scores)?;
            matmul(&normalize_scores(&scores, &z), &l)
        })
        .collect::<Result<Vec<_>>>()?;
    matmul(&concat_cols(&heads)?, &w.w_lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multihead::{mha_forward, self_attention};

    fn spec() -> MlaSpec {
        MlaSpec::new(3, 8, 4, 4, 6, 5).unwrap()
    }

    #[test]
    fn spec_limits_latent_width() {
        assert!(MlaSpec::new(2, 4, 2, 5, 2, 4).is_err());
        assert!(MlaSpec::new(2, 4, 2, 2, 5, 4).is_err());
        assert!(MlaSpec::new(2, 4, 2, 4, 4, 4).is_ok());
    }

    #[test]
    fn merge_identity_cases() {
        let s = MlaSpec::new(1, 3, 3, 3, 3, 3).unwrap();
        let mut rng = SeededRng::new(1);
        let mut w = MlaWeights::random(&s, &mut rng);
        w.w_lqq = vec![Matrix::identity(3)];
        w.w_lk = vec![Matrix::identity(3)];
        w.wo = Matrix::identity(3);
        let m = merge_weights(&w).unwrap();
        assert_eq!(m.w_lqk[0], Matrix::identity(3));
        assert_eq!(m.w_lo, w.w_lv[0]);
    }

    #[test]
    fn merged_weight_invariants() {
        let mut rng = SeededRng::new(2);
        let w = MlaWeights::random(&spec(), &mut rng);
        let m = merge_weights(&w).unwrap();
        for h in 0..3 {
            let expected = matmul(&w.w_lqq[h], &w.w_lk[h].transpose()).unwrap();
            assert!(m.w_lqk[h].max_abs_diff(&expected).unwrap() < 1e-12);
        }
        // W^{LO} row block h is W^{LV}_h times row block h of W^O
        for h in 0..3 {
            let block = m.w_lo.slice_rows(4 * h, 4 * h + 4);
            let expected = matmul(&w.w_lv[h], &w.wo.slice_rows(4 * h, 4 * h + 4)).unwrap();
            assert!(block.max_abs_diff(&expected).unwrap() < 1e-12);
        }
    }

    #[test]
    fn merged_equals_unmerged() {
        let mut rng = SeededRng::new(3);
        let s = spec();
        let w = MlaWeights::random(&s, &mut rng);
        let m = merge_weights(&w).unwrap();
        let x = rng.uniform_matrix(6, 8);
        for mask in [MaskPolicy::None, MaskPolicy::causal()] {
            let a = mla_forward(&x, &m, &s, &mask).unwrap();
            let b = mla_forward_unmerged(&x, &w, &s, &mask).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        }
    }

    #[test]
    fn lifted_mha_weights_reproduce_mha() {
        let mut rng = SeededRng::new(4);
        let ms = MhaSpec::mha(2, 5, 3, 4).unwrap();
        let mw = MhaWeights::random(&ms, &mut rng);
        let s = MlaSpec::new(2, 5, 3, 5, 5, 4).unwrap();
        let w = MlaWeights {
            w_l: Matrix::identity(5),
            w_lq: Matrix::identity(5),
            w_lqq: mw.wq.clone(),
            w_lk: mw.wk.clone(),
            w_lv: mw.wv.clone(),
            wo: mw.wo.clone(),
        };
        let x = rng.uniform_matrix(4, 5);
        let a = mla_forward(&x, &merge_weights(&w).unwrap(), &s, &MaskPolicy::causal()).unwrap();
        let b = self_attention(&x, &mw, &ms, &MaskPolicy::causal()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn single_token_uses_latent_value_path() {
        let mut rng = SeededRng::new(5);
        let s = spec();
        let w = MlaWeights::random(&s, &mut rng);
        let x = rng.uniform_matrix(1, 8);
        let y = mla_forward(&x, &merge_weights(&w).unwrap(), &s, &MaskPolicy::None).unwrap();
        let l = matmul(&x, &w.w_l).unwrap();
        let heads: Vec<Matrix> = w.w_lv.iter().map(|v| matmul(&l, v).unwrap()).collect();
        let expected = matmul(&concat_cols(&heads).unwrap(), &w.wo).unwrap();
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn matches_expanded_mha_causal() {
        let mut rng = SeededRng::new(6);
        let s = spec();
        let w = MlaWeights::random(&s, &mut rng);
        let (mw, ms) = w.expand_to_mha().unwrap();
        let x = rng.uniform_matrix(5, 8);
        let a = mla_forward(&x, &merge_weights(&w).unwrap(), &s, &MaskPolicy::causal()).unwrap();
        let b = self_attention(&x, &mw, &ms, &MaskPolicy::causal()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn output_depends_on_kv_rows_only_through_latent() {
        let mut rng = SeededRng::new(7);
        let s = MlaSpec::new(2, 6, 3, 2, 4, 3).unwrap();
        let w = merge_weights(&MlaWeights::random(&s, &mut rng)).unwrap();
        // a direction v with v W^L = 0
        let basis = truncated_svd(&w.w_l, 2).unwrap().u;
        let e = Matrix::from_fn(1, 6, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let coeffs = matmul(&e, &basis).unwrap();
        let v = e
            .sub(&matmul(&coeffs, &basis.transpose()).unwrap())
            .unwrap();
        assert!(matmul(&v, &w.w_l).unwrap().frobenius_norm() < 1e-12);

        let xq = rng.uniform_matrix(3, 6);
        let xkv = rng.uniform_matrix(4, 6);
        let bumped = Matrix::from_fn(4, 6, |i, j| xkv.get(i, j) + (i as f64 + 1.0) * v.get(0, j));
        let a = mla_forward_cross(&xq, &xkv, &w, &s, &MaskPolicy::None).unwrap();
        let b = mla_forward_cross(&xq, &bumped, &w, &s, &MaskPolicy::None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn factorization_of_planted_weights_is_exact() {
        let mut rng = SeededRng::new(8);
        let (d_in, d_l, d_lq, n, d_head) = (8, 3, 4, 2, 3);
        let g = rng.uniform_matrix(d_in, d_l);
        let gq = rng.uniform_matrix(d_in, d_lq);
        let mw = MhaWeights {
            wq: (0..n)
                .map(|_| matmul(&gq, &rng.uniform_matrix(d_lq, d_head)).unwrap())
                .collect(),
            wk: (0..n)
                .map(|_| matmul(&g, &rng.uniform_matrix(d_l, d_head)).unwrap())
                .collect(),
            wv: (0..n)
                .map(|_| matmul(&g, &rng.uniform_matrix(d_l, d_head)).unwrap())
                .collect(),
            wo: rng.uniform_matrix(n * d_head, d_in),
        };
        let (w, err) = factorize_mha_to_mla(&mw, d_l, d_lq).unwrap();
        assert!(err.total() < 1e-8, "{err:?}");
        let s = w.infer_spec().unwrap();
        let x = rng.uniform_matrix(5, d_in);
        let a = mla_forward(&x, &merge_weights(&w).unwrap(), &s, &MaskPolicy::causal()).unwrap();
        let b = self_attention(&x, &mw, &mw.infer_spec().unwrap(), &MaskPolicy::causal()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-8);
    }

    #[test]
    fn full_width_latent_is_exact_even_past_stacked_rank() {
        let mut rng = SeededRng::new(9);
        // 2 * n * d_head = 4 < d_in = 6: padding path
        let ms = MhaSpec::mha(1, 6, 2, 6).unwrap();
        let mw = MhaWeights::random(&ms, &mut rng);
        let (w, err) = factorize_mha_to_mla(&mw, 6, 6).unwrap();
        assert!(err.total() < 1e-8);
        let x = rng.uniform_matrix(3, 6);
        let a = mla_forward(
            &x,
            &merge_weights(&w).unwrap(),
            &w.infer_spec().unwrap(),
            &MaskPolicy::None,
        )
        .unwrap();
        let b = self_attention(&x, &mw, &ms, &MaskPolicy::None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-8);
    }

    #[test]
    fn truncated_factorization_reports_svd_tail() {
        let mut rng = SeededRng::new(10);
        let ms = MhaSpec::mha(2, 8, 4, 8).unwrap();
        let mw = MhaWeights::random(&ms, &mut rng);
        let (w, err) = factorize_mha_to_mla(&mw, 4, 8).unwrap();
        let (_, wk, wv) = stacked_weights(&mw).unwrap();
        let kv = concat_cols(&[wk, wv]).unwrap();
        let na = nalgebra::DMatrix::from_row_slice(kv.rows(), kv.cols(), kv.data());
        let mut sv: Vec<f64> = na.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let tail = sv[4..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!(err.key_value > 0.1);
        assert!((err.key_value - tail).abs() < 1e-8);
        assert!(err.query < 1e-8);

        let x = rng.uniform_matrix(4, 8);
        let a = mla_forward(
            &x,
            &merge_weights(&w).unwrap(),
            &w.infer_spec().unwrap(),
            &MaskPolicy::None,
        )
        .unwrap();
        let b = self_attention(&x, &mw, &ms, &MaskPolicy::None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
    }

    #[test]
    fn factorization_argument_errors() {
        let mut rng = SeededRng::new(11);
        let gqa = MhaSpec::new(2, 1, 4, 2, 2, 4).unwrap();
        assert!(matches!(
            factorize_mha_to_mla(&MhaWeights::random(&gqa, &mut rng), 2, 2),
            Err(Error::Spec(_))
        ));
        let mha = MhaSpec::mha(2, 4, 2, 4).unwrap();
        let w = MhaWeights::random(&mha, &mut rng);
        assert!(matches!(
            factorize_mha_to_mla(&w, 5, 2),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            factorize_mha_to_mla(&w, 2, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn decoupled_rope_degenerate_cases() {
        let mut rng = SeededRng::new(12);
        let s = spec();
        let m = merge_weights(&MlaWeights::random(&s, &mut rng)).unwrap();
        let x = rng.uniform_matrix(5, 8);
        let plain = mla_forward(&x, &m, &s, &MaskPolicy::causal()).unwrap();

        let none = DecoupledRope::zeros(&s, 0);
        let p0 = RopeParams::with_default_base(0).unwrap();
        let y =
            mla_forward_decoupled_rope(&x, &m, &none, &p0, &s, &MaskPolicy::causal(), 0).unwrap();
        assert!(y.max_abs_diff(&plain).unwrap() < 1e-12);

        // zero rope projections: only the scaling changes
        let zeros = DecoupledRope::zeros(&s, 2);
        let p2 = RopeParams::with_default_base(2).unwrap();
        let y =
            mla_forward_decoupled_rope(&x, &m, &zeros, &p2, &s, &MaskPolicy::causal(), 0).unwrap();
        let rescaled = attend_latent(
            &matmul(&x, &m.w_lq).unwrap(),
            &matmul(&x, &m.w_l).unwrap(),
            &m,
            &Kernel::ScaledExp { d_qk: 6 },
            &MaskPolicy::causal(),
            None,
        )
        .unwrap();
        assert!(y.max_abs_diff(&rescaled).unwrap() < 1e-12);
        assert!(y.max_abs_diff(&plain).unwrap() > 1e-9);
    }

    #[test]
    fn decoupled_rope_is_shift_invariant() {
        let mut rng = SeededRng::new(13);
        let s = spec();
        let m = merge_weights(&MlaWeights::random(&s, &mut rng)).unwrap();
        let rope = DecoupledRope::random(&s, 2, &mut rng);
        let p = RopeParams::with_default_base(2).unwrap();
        let x = rng.uniform_matrix(6, 8);
        let a =
            mla_forward_decoupled_rope(&x, &m, &rope, &p, &s, &MaskPolicy::causal(), 0).unwrap();
        let b =
            mla_forward_decoupled_rope(&x, &m, &rope, &p, &s, &MaskPolicy::causal(), 37).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn naive_rope_breaks_merging() {
        let mut rng = SeededRng::new(14);
        let s = spec();
        let w = MlaWeights::random(&s, &mut rng);
        let m = merge_weights(&w).unwrap();
        let x = rng.uniform_matrix(6, 8).scale(3.0);
        let head = RopeParams::new(4, 10.0).unwrap();
        let latent = RopeParams::new(4, 10.0).unwrap();
        let good = mla_forward_rope_unmerged(&x, &w, &head, &s, &MaskPolicy::causal()).unwrap();
        let naive =
            mla_forward_rope_naive_merged(&x, &m, &latent, &s, &MaskPolicy::causal()).unwrap();
        assert!(good.max_abs_diff(&naive).unwrap() > 1e-6);
        // without rotation both collapse to the plain latent forward
        let plain = mla_forward(&x, &m, &s, &MaskPolicy::causal()).unwrap();
        assert!(good.max_abs_diff(&plain).unwrap() > 1e-6);
    }

    #[test]
    fn gqa_input_via_mha_spec_round_trip() {
        let mut rng = SeededRng::new(15);
        let s = spec();
        let w = MlaWeights::random(&s, &mut rng);
        let (mw, ms) = w.expand_to_mha().unwrap();
        let xq = rng.uniform_matrix(2, 8);
        let xkv = rng.uniform_matrix(5, 8);
        let a = mla_forward_cross(
            &xq,
            &xkv,
            &merge_weights(&w).unwrap(),
            &s,
            &MaskPolicy::None,
        )
        .unwrap();
        let b = mha_forward(&xq, &xkv, &mw, &ms, &MaskPolicy::None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }
}
