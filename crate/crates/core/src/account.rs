//! Cost and memory accounting.
//!
//! Counts are exact integers. Arithmetic is checked and overflow is reported
//! as an argument error. FLOP counts are in multiply units of score plus
//! combine, not hardware operations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::MlaSpec;
use crate::multihead::MhaSpec;

fn checked_product(factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| Error::Argument(format!("count overflows u64: product of {factors:?}")))
}

fn checked_sum(terms: &[u64]) -> Result<u64> {
    terms
        .iter()
        .try_fold(0u64, |acc, &t| acc.checked_add(t))
        .ok_or_else(|| Error::Argument("count overflows u64".into()))
}

fn u(x: usize) -> u64 {
    x as u64
}

/// `N_Q · N_KV · (d_QK + d_V)`.
pub fn attention_flops(n_q: usize, n_kv: usize, d_qk: usize, d_v: usize) -> Result<u64> {
    let width = u(d_qk)
        .checked_add(u(d_v))
        .ok_or_else(|| Error::Argument("width overflows".into()))?;
    checked_product(&[u(n_q), u(n_kv), width])
}

/// Attention cost of a `steps`-token conversation where every step reruns
/// attention over the whole history: `Σ_t attention_flops(t, t, d, d)`.
pub fn recompute_conversation_flops(steps: usize, d: usize) -> Result<u64> {
    let per_step = (1..=steps)
        .map(|t| attention_flops(t, t, d, d))
        .collect::<Result<Vec<_>>>()?;
    checked_sum(&per_step)
}

/// Same conversation with a KV cache: one new query per step,
/// `Σ_t attention_flops(1, t, d, d)`.
pub fn cached_conversation_flops(steps: usize, d: usize) -> Result<u64> {
    let per_step = (1..=steps)
        .map(|t| attention_flops(1, t, d, d))
        .collect::<Result<Vec<_>>>()?;
    checked_sum(&per_step)
}

/// Dimensions entering the per-head memory count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhaDims {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_in: usize,
    pub d_qk: usize,
    pub d_head: usize,
    pub d_out: usize,
}

impl From<&MhaSpec> for MhaDims {
    fn from(s: &MhaSpec) -> Self {
        MhaDims {
            n_heads: s.n_heads,
            n_kv_heads: s.n_kv_heads,
            d_in: s.d_in,
            d_qk: s.d_qk,
            d_head: s.d_head,
            d_out: s.d_out,
        }
    }
}

/// Dimensions entering the latent memory count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlaDims {
    pub n_heads: usize,
    pub d_in: usize,
    pub d_latent: usize,
    pub d_out: usize,
}

impl From<&MlaSpec> for MlaDims {
    fn from(s: &MlaSpec) -> Self {
        MlaDims {
            n_heads: s.n_heads,
            d_in: s.d_in,
            d_latent: s.d_latent,
            d_out: s.d_out,
        }
    }
}

/// KV cache floats for one layer: `n_kv_heads · N_KV · (d_QK + d_head)`.
pub fn mha_cache_floats(d: &MhaDims, n_kv_tokens: usize) -> Result<u64> {
    checked_product(&[u(d.n_kv_heads), u(n_kv_tokens), u(d.d_qk) + u(d.d_head)])
}

/// `W^Q`, `W^K`, `W^V`, `W^O` floats; key and value maps exist once per KV head.
pub fn mha_weight_floats(d: &MhaDims) -> Result<u64> {
    checked_sum(&[
        checked_product(&[u(d.n_heads), u(d.d_in), u(d.d_qk)])?,
        checked_product(&[u(d.n_kv_heads), u(d.d_in), u(d.d_qk)])?,
        checked_product(&[u(d.n_kv_heads), u(d.d_in), u(d.d_head)])?,
        checked_product(&[u(d.n_heads), u(d.d_head), u(d.d_out)])?,
    ])
}

/// Floats stored by one attention layer:
/// `N_h N_KV (d_QK + d_head) + 2 N_h d_in d_QK + N_h d_head (d_in + d_out)`,
/// with the cache, `W^K` and `W^V` terms counted over KV heads.
pub fn mha_memory_floats(d: &MhaDims, n_kv_tokens: usize) -> Result<u64> {
    checked_sum(&[mha_cache_floats(d, n_kv_tokens)?, mha_weight_floats(d)?])
}

/// Latent cache floats for one layer: `N_KV · d_L`.
pub fn mla_cache_floats(d: &MlaDims, n_kv_tokens: usize) -> Result<u64> {
    checked_product(&[u(n_kv_tokens), u(d.d_latent)])
}

/// `d_in d_L + N_h d_L (d_in + d_out)`: `W^L`, a per-head `d_in x d_L` query
/// map into latent space and `W^{LO}`.
///
/// The query term folds the query latent into the merged map
/// (`d_LQ = d_in`). Weights built by [`crate::latent`] store `W^{L_Q}` and
/// `d_LQ x d_L` maps instead; [`mla_layout_floats`] counts that layout.
pub fn mla_weight_floats(d: &MlaDims) -> Result<u64> {
    checked_sum(&[
        checked_product(&[u(d.d_in), u(d.d_latent)])?,
        checked_product(&[u(d.n_heads), u(d.d_latent), u(d.d_in) + u(d.d_out)])?,
    ])
}

/// `N_KV d_L + d_in d_L + N_h d_L (d_in + d_out)`.
pub fn mla_memory_floats(d: &MlaDims, n_kv_tokens: usize) -> Result<u64> {
    checked_sum(&[mla_cache_floats(d, n_kv_tokens)?, mla_weight_floats(d)?])
}

/// Floats held by [`crate::latent::MergedMlaWeights`] plus the latent cache:
/// `N_KV d_L + d_in d_L + d_in d_LQ + N_h d_LQ d_L + N_h d_L d_out`.
pub fn mla_layout_floats(s: &MlaSpec, n_kv_tokens: usize) -> Result<u64> {
    checked_sum(&[
        checked_product(&[u(n_kv_tokens), u(s.d_latent)])?,
        checked_product(&[u(s.d_in), u(s.d_latent)])?,
        checked_product(&[u(s.d_in), u(s.d_latent_q)])?,
        checked_product(&[u(s.n_heads), u(s.d_latent_q), u(s.d_latent)])?,
        checked_product(&[u(s.n_heads), u(s.d_latent), u(s.d_out)])?,
    ])
}

/// Per-token latent cache size relative to a KV cache:
/// `d_L / (n_kv_heads (d_QK + d_head))`. Below 1 the latent cache is smaller.
pub fn latent_cache_ratio(d_latent: usize, n_kv_heads: usize, d_qk: usize, d_head: usize) -> f64 {
    d_latent as f64 / (n_kv_heads as f64 * (d_qk + d_head) as f64)
}

fn bits_to_bytes(bits: u64) -> u64 {
    bits.div_ceil(8)
}

/// `2 · N_L · N_h · N_KV · d · bits / 8`, rounded up to whole bytes. `d` is
/// the per-head width and `n_heads` the number of heads that own a cache.
pub fn kv_cache_bytes(
    n_layers: usize,
    n_heads: usize,
    n_kv_tokens: usize,
    d: usize,
    bits_per_float: usize,
) -> Result<u64> {
    Ok(bits_to_bytes(checked_product(&[
        2,
        u(n_layers),
        u(n_heads),
        u(n_kv_tokens),
        u(d),
        u(bits_per_float),
    ])?))
}

/// `N_L · N_KV · d_L · bits / 8`, rounded up to whole bytes.
pub fn latent_cache_bytes(
    n_layers: usize,
    n_kv_tokens: usize,
    d_latent: usize,
    bits_per_float: usize,
) -> Result<u64> {
    Ok(bits_to_bytes(checked_product(&[
        u(n_layers),
        u(n_kv_tokens),
        u(d_latent),
        u(bits_per_float),
    ])?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Mha,
    Gqa,
    Mla,
}

impl AttentionKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttentionKind::Mha => "MHA",
            AttentionKind::Gqa => "GQA",
            AttentionKind::Mla => "MLA",
        }
    }
}

/// Architecture numbers of a published model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub name: String,
    #[serde(rename = "layers")]
    pub n_layers: usize,
    #[serde(rename = "heads")]
    pub n_heads: usize,
    /// Not applicable to latent attention.
    #[serde(rename = "kv_heads", default)]
    pub n_kv_heads: Option<usize>,
    /// `d_in = d_out`.
    pub d_model: usize,
    /// `d_head = d_QK`, or `d_L` for latent attention.
    #[serde(rename = "d_head")]
    pub d_head_or_latent: usize,
    pub kind: AttentionKind,
}

pub const BUILTIN_PRESET_NAMES: [&str; 3] = ["llama3-70b", "gemma3-27b", "deepseek-v2"];

fn builtin(
    name: &str,
    n_layers: usize,
    n_heads: usize,
    n_kv_heads: Option<usize>,
    d_model: usize,
    d: usize,
    kind: AttentionKind,
) -> ModelPreset {
    ModelPreset {
        name: name.to_string(),
        n_layers,
        n_heads,
        n_kv_heads,
        d_model,
        d_head_or_latent: d,
        kind,
    }
}

impl ModelPreset {
    pub fn builtins() -> Vec<ModelPreset> {
        vec![
            builtin("llama3-70b", 80, 64, Some(8), 8192, 128, AttentionKind::Gqa),
            builtin(
                "gemma3-27b",
                62,
                32,
                Some(16),
                5376,
                128,
                AttentionKind::Gqa,
            ),
            builtin("deepseek-v2", 60, 128, None, 5120, 512, AttentionKind::Mla),
        ]
    }

    pub fn builtin(name: &str) -> Option<ModelPreset> {
        Self::builtins().into_iter().find(|p| p.name == name)
    }

    pub fn from_json(json: &str) -> Result<ModelPreset> {
        let p: ModelPreset =
            serde_json::from_str(json).map_err(|e| Error::Format(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("layers", self.n_layers),
            ("heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head_or_latent),
        ] {
            if v == 0 {
                return Err(Error::Spec(format!(
                    "preset {}: {field} must be positive",
                    self.name
                )));
            }
        }
        match (self.kind, self.n_kv_heads) {
            (AttentionKind::Mla, _) => Ok(()),
            (_, None) => Err(Error::Spec(format!(
                "preset {}: kv_heads required for {}",
                self.name,
                self.kind.label()
            ))),
            (_, Some(0)) => Err(Error::Spec(format!(
                "preset {}: kv_heads must be positive",
                self.name
            ))),
            (_, Some(kv)) if !self.n_heads.is_multiple_of(kv) => Err(Error::Spec(format!(
                "preset {}: {} heads not divisible by {kv} kv_heads",
                self.name, self.n_heads
            ))),
            (AttentionKind::Mha, Some(kv)) if kv != self.n_heads => Err(Error::Spec(format!(
                "preset {}: MHA needs kv_heads == heads",
                self.name
            ))),
            _ => Ok(()),
        }
    }

    /// Per-head dims with `d_QK = d_head`; `None` for latent presets.
    pub fn mha_dims(&self) -> Option<MhaDims> {
        (self.kind != AttentionKind::Mla).then(|| MhaDims {
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads.unwrap_or(self.n_heads),
            d_in: self.d_model,
            d_qk: self.d_head_or_latent,
            d_head: self.d_head_or_latent,
            d_out: self.d_model,
        })
    }

    pub fn mla_dims(&self) -> Option<MlaDims> {
        (self.kind == AttentionKind::Mla).then_some(MlaDims {
            n_heads: self.n_heads,
            d_in: self.d_model,
            d_latent: self.d_head_or_latent,
            d_out: self.d_model,
        })
    }
}

/// Accounting of one preset at a given context length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: ModelPreset,
    pub context: usize,
    pub bits_per_float: usize,
    pub cache_floats_per_layer: u64,
    pub weight_floats_per_layer: u64,
    pub memory_floats_per_layer: u64,
    pub cache_bytes_per_layer: u64,
    pub cache_bytes_total: u64,
    pub weight_floats_total: u64,
    /// One new query token attending `context` cached tokens, all heads and layers.
    pub decode_step_flops: u64,
}

pub fn account_preset(
    preset: &ModelPreset,
    context: usize,
    bits_per_float: usize,
) -> Result<PresetReport> {
    preset.validate()?;
    let layers = preset.n_layers;
    let d = preset.d_head_or_latent;
    let (cache_floats, weight_floats, cache_bytes_layer, cache_bytes_total) =
        match (preset.mha_dims(), preset.mla_dims()) {
            (Some(m), _) => (
                mha_cache_floats(&m, context)?,
                mha_weight_floats(&m)?,
                kv_cache_bytes(1, m.n_kv_heads, context, d, bits_per_float)?,
                kv_cache_bytes(layers, m.n_kv_heads, context, d, bits_per_float)?,
            ),
            (None, Some(l)) => (
                mla_cache_floats(&l, context)?,
                mla_weight_floats(&l)?,
                latent_cache_bytes(1, context, d, bits_per_float)?,
                latent_cache_bytes(layers, context, d, bits_per_float)?,
            ),
            (None, None) => unreachable!("every kind has dims"),
        };
    let per_head = attention_flops(1, context, d, d)?;
    Ok(PresetReport {
        preset: preset.clone(),
        context,
        bits_per_float,
        cache_floats_per_layer: cache_floats,
        weight_floats_per_layer: weight_floats,
        memory_floats_per_layer: checked_sum(&[cache_floats, weight_floats])?,
        cache_bytes_per_layer: cache_bytes_layer,
        cache_bytes_total,
        weight_floats_total: checked_product(&[weight_floats, u(layers)])?,
        decode_step_flops: checked_product(&[per_head, u(preset.n_heads), u(layers)])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flops_examples() {
        assert_eq!(attention_flops(1, 1, 1, 1).unwrap(), 2);
        assert_eq!(attention_flops(2, 3, 4, 5).unwrap(), 54);
    }

    #[test]
    fn conversation_costs_match_closed_forms() {
        let (t, d) = (10u64, 3usize);
        let c = 2 * d as u64;
        assert_eq!(
            recompute_conversation_flops(10, d).unwrap(),
            t * (t + 1) * (2 * t + 1) / 6 * c
        );
        assert_eq!(
            cached_conversation_flops(10, d).unwrap(),
            t * (t + 1) / 2 * c
        );
        assert_eq!(recompute_conversation_flops(10, d).unwrap(), 385 * c);
        assert_eq!(cached_conversation_flops(10, d).unwrap(), 55 * c);
    }

    fn dims(
        n_heads: usize,
        n_kv_heads: usize,
        d_in: usize,
        d_qk: usize,
        d_head: usize,
        d_out: usize,
    ) -> MhaDims {
        MhaDims {
            n_heads,
            n_kv_heads,
            d_in,
            d_qk,
            d_head,
            d_out,
        }
    }

    #[test]
    fn mha_memory_examples() {
        assert_eq!(mha_memory_floats(&dims(1, 1, 1, 1, 1, 1), 1).unwrap(), 6);
        assert_eq!(mha_memory_floats(&dims(2, 2, 8, 4, 4, 8), 3).unwrap(), 304);
        let llama = ModelPreset::builtin("llama3-70b")
            .unwrap()
            .mha_dims()
            .unwrap();
        assert_eq!(mha_cache_floats(&llama, 8192).unwrap(), 16_777_216);
    }

    #[test]
    fn mla_memory_examples() {
        let one = MlaDims {
            n_heads: 1,
            d_in: 1,
            d_latent: 1,
            d_out: 1,
        };
        assert_eq!(mla_memory_floats(&one, 1).unwrap(), 4);
        let ds = ModelPreset::builtin("deepseek-v2")
            .unwrap()
            .mla_dims()
            .unwrap();
        assert_eq!(mla_cache_floats(&ds, 8192).unwrap(), 4_194_304);
    }

    #[test]
    fn latent_ratio() {
        assert!(latent_cache_ratio(512, 8, 128, 128) < 1.0);
        assert_eq!(latent_cache_ratio(256, 1, 64, 64), 2.0);
    }

    #[test]
    fn layout_floats_of_merged_weights() {
        let s = MlaSpec::new(2, 6, 3, 4, 5, 7).unwrap();
        // L cache + W^L + W^{L_Q} + W^{LQK} + W^{LO}
        assert_eq!(mla_layout_floats(&s, 10).unwrap(), 40 + 24 + 30 + 40 + 56);
    }

    #[test]
    fn cache_bytes_examples() {
        assert_eq!(kv_cache_bytes(1, 1, 1, 1, 8).unwrap(), 2);
        assert_eq!(kv_cache_bytes(80, 8, 8192, 128, 16).unwrap(), 2_684_354_560);
        assert_eq!(
            kv_cache_bytes(80, 8, 16384, 128, 16).unwrap(),
            2 * 2_684_354_560
        );
        assert_eq!(kv_cache_bytes(1, 1, 1, 1, 1).unwrap(), 1);
        assert_eq!(
            latent_cache_bytes(60, 8192, 512, 16).unwrap(),
            60 * 8192 * 512 * 2
        );
    }

    #[test]
    fn overflow_is_reported() {
        assert!(kv_cache_bytes(usize::MAX, 2, 2, 2, 16).is_err());
    }

    #[test]
    fn builtin_presets_hold_published_numbers() {
        let cells: Vec<_> = ModelPreset::builtins()
            .iter()
            .map(|p| {
                (
                    p.n_layers,
                    p.n_heads,
                    p.n_kv_heads,
                    p.d_model,
                    p.d_head_or_latent,
                    p.kind,
                )
            })
            .collect();
        assert_eq!(
            cells,
            vec![
                (80, 64, Some(8), 8192, 128, AttentionKind::Gqa),
                (62, 32, Some(16), 5376, 128, AttentionKind::Gqa),
                (60, 128, None, 5120, 512, AttentionKind::Mla),
            ]
        );
        for p in ModelPreset::builtins() {
            p.validate().unwrap();
        }
    }

    #[test]
    fn preset_json() {
        let p = ModelPreset::from_json(
            r#"{"name":"toy","layers":2,"heads":4,"kv_heads":2,"d_model":16,"d_head":4,"kind":"gqa"}"#,
        )
        .unwrap();
        assert_eq!(p.n_kv_heads, Some(2));
        let m = ModelPreset::from_json(
            r#"{"name":"lat","layers":1,"heads":2,"d_model":8,"d_head":4,"kind":"mla"}"#,
        )
        .unwrap();
        assert_eq!(m.n_kv_heads, None);
        assert!(ModelPreset::from_json(r#"{"name":"bad","layers":1,"heads":3,"kv_heads":2,"d_model":8,"d_head":4,"kind":"gqa"}"#).is_err());
        assert!(ModelPreset::from_json(
            r#"{"name":"bad","layers":1,"heads":2,"d_model":8,"d_head":4,"kind":"mha"}"#
        )
        .is_err());
        assert!(matches!(ModelPreset::from_json("{"), Err(Error::Format(_))));
        let back: ModelPreset = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn preset_reports() {
        let llama = account_preset(&ModelPreset::builtin("llama3-70b").unwrap(), 8192, 16).unwrap();
        assert_eq!(llama.cache_bytes_total, 2_684_354_560);
        assert_eq!(llama.cache_floats_per_layer, 16_777_216);
        let empty = account_preset(&ModelPreset::builtin("llama3-70b").unwrap(), 0, 16).unwrap();
        assert_eq!(empty.cache_bytes_total, 0);
        assert!(empty.weight_floats_total > 0);
        let ds = account_preset(&ModelPreset::builtin("deepseek-v2").unwrap(), 8192, 16).unwrap();
        assert_eq!(ds.cache_floats_per_layer, 4_194_304);
    }

    proptest! {
        #[test]
        fn memory_counts_increase_in_every_argument(
            v in proptest::collection::vec(1usize..50, 7),
            which in 0usize..7,
        ) {
            let base = dims(v[0], v[1], v[2], v[3], v[4], v[5]);
            let n = v[6];
            let mut bumped = v.clone();
            bumped[which] += 1;
            let next = dims(bumped[0], bumped[1], bumped[2], bumped[3], bumped[4], bumped[5]);
            prop_assert!(mha_memory_floats(&next, bumped[6]).unwrap() > mha_memory_floats(&base, n).unwrap());

            let l = MlaDims { n_heads: v[0], d_in: v[1], d_latent: v[2], d_out: v[3] };
            let w = which % 5;
            let mut b = [v[0], v[1], v[2], v[3], v[6]];
            b[w] += 1;
            let l2 = MlaDims { n_heads: b[0], d_in: b[1], d_latent: b[2], d_out: b[3] };
            prop_assert!(mla_memory_floats(&l2, b[4]).unwrap() > mla_memory_floats(&l, v[6]).unwrap());
        }
    }
}
