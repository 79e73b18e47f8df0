//! Append-only key/value and latent caches for streaming decode.
//!
//! A decode step appends the new tokens' entries, then attends only the new
//! query rows against everything cached with a causal mask offset by the
//! previous cache length. Queries are discarded afterwards.

use crate::attention::MaskPolicy;
use crate::error::{shape_err, Result};
use crate::latent::{attend_latent, DecoupledRope, MergedMlaWeights, MlaSpec};
use crate::linalg::{matmul, Matrix};
use crate::multihead::{combine_heads, project_keys_values, project_queries, MhaSpec, MhaWeights};
use crate::tokenizer::RopeParams;

/// Per-KV-head keys (rotated at their absolute positions when RoPE is on)
/// and values.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    len: usize,
}

impl KvCache {
    pub fn new(spec: &MhaSpec) -> Self {
        KvCache {
            keys: vec![Matrix::zeros(0, spec.d_qk); spec.n_kv_heads],
            values: vec![Matrix::zeros(0, spec.d_head); spec.n_kv_heads],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keys(&self) -> &[Matrix] {
        &self.keys
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    /// Computes and stores K/V rows for `x` at positions `len..len + x.rows`.
    pub fn append(&mut self, x: &Matrix, w: &MhaWeights, spec: &MhaSpec) -> Result<()> {
        if self.keys.len() != spec.n_kv_heads {
            return Err(shape_err(
                "KvCache::append",
                format!("{} cached heads", self.keys.len()),
                format!("{} KV heads", spec.n_kv_heads),
            ));
        }
        let (k, v) = project_keys_values(x, w, spec, self.len)?;
        for (store, new) in self.keys.iter_mut().zip(&k) {
            store.append_rows(new)?;
        }
        for (store, new) in self.values.iter_mut().zip(&v) {
            store.append_rows(new)?;
        }
        self.len += x.rows();
        Ok(())
    }
}

/// One latent row per token shared by all heads, plus the shared rotated
/// key part when decoupled RoPE is used.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCache {
    latent: Matrix,
    rope_keys: Option<Matrix>,
    len: usize,
}

impl LatentCache {
    pub fn new(spec: &MlaSpec) -> Self {
        LatentCache {
            latent: Matrix::zeros(0, spec.d_latent),
            rope_keys: None,
            len: 0,
        }
    }

    pub fn with_rope(spec: &MlaSpec, d_rope: usize) -> Self {
        LatentCache {
            rope_keys: Some(Matrix::zeros(0, d_rope)),
            ..LatentCache::new(spec)
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn latent(&self) -> &Matrix {
        &self.latent
    }

    pub fn rope_keys(&self) -> Option<&Matrix> {
        self.rope_keys.as_ref()
    }

    pub fn append(
        &mut self,
        x: &Matrix,
        w: &MergedMlaWeights,
        rope: Option<(&DecoupledRope, &RopeParams)>,
    ) -> Result<()> {
        let l = matmul(x, &w.w_l)?;
        let r = match (rope, &self.rope_keys) {
            (Some((rope, params)), Some(_)) => Some(rope.rotated_keys(x, params, self.len)?),
            (None, None) => None,
            _ => {
                return Err(shape_err(
                    "LatentCache::append",
                    if self.rope_keys.is_some() {
                        "cache with rope keys"
                    } else {
                        "cache without rope keys"
                    }
                    .to_string(),
                    if rope.is_some() {
                        "decoupled rope weights"
                    } else {
                        "no rope weights"
                    }
                    .to_string(),
                ))
            }
        };
        self.latent.append_rows(&l)?;
        if let (Some(store), Some(r)) = (self.rope_keys.as_mut(), r) {
            store.append_rows(&r)?;
        }
        self.len += x.rows();
        Ok(())
    }
}

/// Appends `x_new` to the cache and returns attention outputs for its rows.
pub fn streaming_decode_step(
    cache: &mut KvCache,
    x_new: &Matrix,
    w: &MhaWeights,
    spec: &MhaSpec,
) -> Result<Matrix> {
    spec.validate()?;
    w.validate(spec)?;
    let start = cache.len;
    let queries = project_queries(x_new, w, spec, start)?;
    cache.append(x_new, w, spec)?;
    combine_heads(
        &queries,
        &cache.keys,
        &cache.values,
        w,
        spec,
        &MaskPolicy::Causal { offset: start },
    )
}

/// Latent counterpart of [`streaming_decode_step`]. `rope` must be given
/// exactly when the cache was built [`LatentCache::with_rope`].
pub fn latent_decode_step(
    cache: &mut LatentCache,
    x_new: &Matrix,
    w: &MergedMlaWeights,
    spec: &MlaSpec,
    rope: Option<(&DecoupledRope, &RopeParams)>,
) -> Result<Matrix> {
    w.validate(spec)?;
    if let Some((r, p)) = rope {
        r.validate(spec, p)?;
    }
    let start = cache.len;
    cache.append(x_new, w, rope)?;
    let mask = MaskPolicy::Causal { offset: start };
    let lq = matmul(x_new, &w.w_lq)?;
    match (rope, &cache.rope_keys) {
        (Some((r, p)), Some(keys)) => {
            let extra = r.position_logits(&lq, keys, p, start)?;
            attend_latent(&lq, &cache.latent, w, &r.kernel(spec), &mask, Some(&extra))
        }
        _ => attend_latent(&lq, &cache.latent, w, &spec.kernel(), &mask, None),
    }
}
