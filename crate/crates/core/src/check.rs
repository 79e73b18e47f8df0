//! Seeded equivalence suite behind `attnlab check`.
//!
//! Each property compares an optimized path with an oracle over random
//! instances and records the worst deviation seen. Every property draws from
//! its own generator, so results do not depend on which others ran.

use serde::{Deserialize, Serialize};

use crate::account::{
    account_preset, mha_memory_floats, mla_memory_floats, MhaDims, MlaDims, ModelPreset,
};
use crate::attention::{
    attend, normalize_scores, normalizer, scores_additive, scores_multiplicative, softmax_attend,
    HeadWeights, Kernel, MaskPolicy,
};
use crate::blocks::{
    gpt_forward, layer_norm, rms_norm, GptModel, LayerShape, NormParams, NormPlacement,
};
use crate::cache::{latent_decode_step, streaming_decode_step, KvCache, LatentCache};
use crate::error::{Error, Result};
use crate::latent::{
    factorize_mha_to_mla, merge_weights, mla_forward, mla_forward_decoupled_rope,
    mla_forward_rope_naive_merged, mla_forward_rope_unmerged, mla_forward_unmerged, DecoupledRope,
    MlaSpec, MlaWeights,
};
use crate::linalg::{matmul, Matrix};
use crate::multihead::{mha_forward, self_attention, MhaSpec, MhaWeights};
use crate::reference;
use crate::rng::SeededRng;
use crate::tokenizer::RopeParams;

/// Longest sequence the streaming property uses by default.
pub const DEFAULT_SIZES: usize = 32;

/// Deliberate faults for demonstrating a failing property.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BreakMode {
    /// Treat RoPE applied inside the merged latent path as exact.
    MlaRope,
}

impl BreakMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mla-rope" => Some(BreakMode::MlaRope),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BreakMode::MlaRope => "mla-rope",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Maximum number of tokens in any sequence.
    pub sizes: usize,
    pub break_mode: Option<BreakMode>,
}

impl CheckOptions {
    pub fn new(seed: u64) -> Self {
        CheckOptions {
            seed,
            sizes: DEFAULT_SIZES,
            break_mode: None,
        }
    }
}

/// How the observed deviation is judged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// Largest deviation must stay below the value.
    Below(f64),
    /// Smallest deviation must exceed the value.
    Above(f64),
    /// Count of mismatches must be zero.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub criterion: u8,
    pub name: String,
    pub cases: usize,
    /// Worst deviation (max for `Below`/`Exact`, min for `Above`); absent on error.
    pub deviation: Option<f64>,
    pub bound: Bound,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub seed: u64,
    pub sizes: usize,
    #[serde(rename = "break")]
    pub break_mode: Option<BreakMode>,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

impl CheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.properties.iter().filter(|p| !p.passed)
    }

    pub fn render_text(&self) -> String {
        let mut out = format!("attnlab check: seed {}, sizes {}", self.seed, self.sizes);
        if let Some(b) = self.break_mode {
            out.push_str(&format!(", break {}", b.name()));
        }
        out.push('\n');
        let width = self
            .properties
            .iter()
            .map(|p| p.name.len())
            .max()
            .unwrap_or(0);
        for p in &self.properties {
            let status = if p.passed { "PASS" } else { "FAIL" };
            let (label, rel, bound) = match p.bound {
                Bound::Below(b) => ("max", "<", format!("{b:.0e}")),
                Bound::Above(b) => ("min", ">", format!("{b:.0e}")),
                Bound::Exact => ("mismatches", "=", "0".to_string()),
            };
            let observed = match (p.deviation, p.bound) {
                (Some(d), Bound::Exact) => format!("{d}"),
                (Some(d), _) => format!("{d:.2e}"),
                (None, _) => "n/a".to_string(),
            };
            out.push_str(&format!(
                "{status}  [{:>2}] {:<width$}  {label} {observed} {rel} {bound}  ({} {})",
                p.criterion,
                p.name,
                p.cases,
                if p.cases == 1 { "case" } else { "cases" }
            ));
            if let Some(e) = &p.error {
                out.push_str(&format!("  error: {e}"));
            }
            out.push('\n');
        }
        let n_pass = self.properties.iter().filter(|p| p.passed).count();
        out.push_str(&format!(
            "{n_pass}/{} properties passed\n",
            self.properties.len()
        ));
        out
    }
}

/// Runs every property. Fails only on invalid options; property errors are
/// reported as failures.
pub fn run_checks(opts: &CheckOptions) -> Result<CheckReport> {
    if opts.sizes == 0 {
        return Err(Error::Argument("sizes must be at least 1".into()));
    }
    let mut s = Suite {
        opts: *opts,
        results: Vec::new(),
    };
    s.run(1, "softmax-identity", Bound::Below(1e-12), softmax_identity);
    s.run(
        2,
        "mask-formulations",
        Bound::Below(1e-12),
        mask_formulations,
    );
    s.run(
        3,
        "causal-prefix-layer",
        Bound::Below(1e-10),
        causal_prefix_layer,
    );
    s.run(
        3,
        "causal-prefix-gpt",
        Bound::Below(1e-10),
        causal_prefix_gpt,
    );
    s.run(4, "gqa-duplication", Bound::Below(1e-12), gqa_duplication);
    s.run(5, "streaming-mha", Bound::Below(1e-10), |r, n| {
        streaming_grouped(r, n, 4, 4)
    });
    s.run(5, "streaming-gqa", Bound::Below(1e-10), |r, n| {
        Ok(streaming_grouped(r, n, 4, 2)?.merge(streaming_grouped(r, n, 4, 1)?))
    });
    s.run(5, "streaming-mla", Bound::Below(1e-10), streaming_latent);
    s.run(6, "mla-expanded-mha", Bound::Below(1e-10), mla_expanded);
    s.run(
        6,
        "mla-planted-reconstruction",
        Bound::Below(1e-8),
        |r, n| planted(r, n).map(|p| p.0),
    );
    s.run(6, "mla-planted-forward", Bound::Below(1e-8), |r, n| {
        planted(r, n).map(|p| p.1)
    });
    s.run(7, "merge-soundness", Bound::Below(1e-10), merge_soundness);
    s.run(8, "rope-naive-disagreement", Bound::Above(1e-6), rope_naive);
    s.run(
        8,
        "rope-decoupled-shift",
        Bound::Below(1e-10),
        rope_decoupled_shift,
    );
    if opts.break_mode == Some(BreakMode::MlaRope) {
        s.run(
            8,
            "rope-merged-equivalence",
            Bound::Below(1e-10),
            rope_naive,
        );
    }
    s.run(9, "memory-formulas", Bound::Exact, memory_formulas);
    s.run(9, "cache-bytes-llama3-70b", Bound::Exact, cache_bytes);
    s.run(9, "preset-cells", Bound::Exact, preset_cells);
    s.run(10, "layer-norm-mean", Bound::Below(1e-12), |r, _| {
        norm_stats(r).map(|n| n.0)
    });
    s.run(10, "layer-norm-variance", Bound::Below(1e-4), |r, _| {
        norm_stats(r).map(|n| n.1)
    });
    s.run(10, "rms-norm-scale", Bound::Below(1e-6), rms_scale);
    let passed = s.results.iter().all(|p| p.passed);
    Ok(CheckReport {
        seed: opts.seed,
        sizes: opts.sizes,
        break_mode: opts.break_mode,
        passed,
        properties: s.results,
    })
}

/// Worst deviation over some cases, plus the smallest for `Above` bounds.
#[derive(Debug, Clone, Copy)]
struct Observed {
    cases: usize,
    max: f64,
    min: f64,
}

impl Observed {
    fn new() -> Self {
        Observed {
            cases: 0,
            max: 0.0,
            min: f64::INFINITY,
        }
    }

    fn add(&mut self, d: f64) {
        self.cases += 1;
        self.max = self.max.max(d);
        self.min = self.min.min(d);
    }

    fn merge(mut self, other: Observed) -> Observed {
        self.cases += other.cases;
        self.max = self.max.max(other.max);
        self.min = self.min.min(other.min);
        self
    }
}

struct Suite {
    opts: CheckOptions,
    results: Vec<PropertyResult>,
}

impl Suite {
    fn run(
        &mut self,
        criterion: u8,
        name: &str,
        bound: Bound,
        f: impl FnOnce(&mut SeededRng, usize) -> Result<Observed>,
    ) {
        let salt = self.results.len() as u64 + 1;
        let mut rng = SeededRng::new(
            self.opts
                .seed
                .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let (cases, deviation, error) = match f(&mut rng, self.opts.sizes) {
            Ok(o) => {
                let d = match bound {
                    Bound::Above(_) => o.min,
                    _ => o.max,
                };
                (o.cases, Some(d), None)
            }
            Err(e) => (0, None, Some(e.to_string())),
        };
        let passed = match (deviation, bound) {
            (Some(d), Bound::Below(b)) => d < b,
            (Some(d), Bound::Above(b)) => d > b,
            (Some(d), Bound::Exact) => d == 0.0,
            (None, _) => false,
        };
        self.results.push(PropertyResult {
            criterion,
            name: name.to_string(),
            cases,
            deviation,
            bound,
            passed,
            error,
        });
    }
}

fn diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.max_abs_diff(b)
}

fn tokens(rng: &mut SeededRng, sizes: usize, cap: usize) -> usize {
    rng.int(1, sizes.min(cap))
}

/// Random allowed sets with at least one key per query.
fn random_subset_mask(rng: &mut SeededRng, n_q: usize, n_kv: usize) -> MaskPolicy {
    MaskPolicy::Explicit(
        (0..n_q)
            .map(|_| {
                let mut set: Vec<usize> = (0..n_kv).filter(|_| rng.coin(0.5)).collect();
                if set.is_empty() {
                    set.push(rng.int(0, n_kv - 1));
                }
                set
            })
            .collect(),
    )
}

fn softmax_identity(rng: &mut SeededRng, sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for case in 0..100 {
        let (n_q, n_kv) = (tokens(rng, sizes, 16), tokens(rng, sizes, 16));
        let (d_in, d_qk, d_v) = (rng.int(1, 16), rng.int(1, 16), rng.int(1, 16));
        let w = HeadWeights::new(
            rng.uniform_matrix(d_in, d_qk),
            rng.uniform_matrix(d_in, d_qk),
            rng.uniform_matrix(d_in, d_v),
        )?;
        let xq = rng.uniform_matrix(n_q, d_in);
        let xkv = rng.uniform_matrix(n_kv, d_in);
        let mask = if case % 2 == 1 && n_q <= n_kv {
            MaskPolicy::Causal { offset: n_kv - n_q }
        } else {
            MaskPolicy::None
        };
        let a = attend(&xq, &xkv, &xkv, &w, &Kernel::scaled_exp(d_qk)?, &mask)?;
        let b = softmax_attend(&xq, &xkv, &xkv, &w, &mask)?;
        o.add(diff(&a, &b)?);
    }
    Ok(o)
}

fn mask_formulations(rng: &mut SeededRng, sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for case in 0..100 {
        let n_kv = tokens(rng, sizes, 16);
        let n_q = rng.int(1, n_kv);
        let d = rng.int(1, 16);
        let q = rng.uniform_matrix(n_q, d).scale(2.0);
        let k = rng.uniform_matrix(n_kv, d).scale(2.0);
        let d_v = rng.int(1, 8);
        let v = rng.uniform_matrix(n_kv, d_v);
        let mask = if case % 2 == 0 {
            MaskPolicy::Causal {
                offset: rng.int(0, n_kv - n_q),
            }
        } else {
            random_subset_mask(rng, n_q, n_kv)
        };
        let kernel = Kernel::scaled_exp(d)?;
        let logits = crate::attention::logits(&q, &k)?;
        let add = scores_additive(&logits, &kernel, &mask)?;
        let mul = scores_multiplicative(&logits, &kernel, &mask)?;
        let out =
            |s: &Matrix| -> Result<Matrix> { matmul(&normalize_scores(s, &normalizer(s)?), &v) };
        o.add(diff(&add, &mul)?.max(diff(&out(&add)?, &out(&mul)?)?));
    }
    Ok(o)
}

fn prefix_deviation(
    full: &Matrix,
    n: usize,
    mut part: impl FnMut(usize) -> Result<Matrix>,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for m in 1..n {
        worst = worst.max(diff(&part(m)?, &full.slice_rows(0, m))?);
    }
    Ok(worst)
}

fn causal_prefix_layer(rng: &mut SeededRng, sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for rope in [false, true] {
        let mut spec = MhaSpec::new(4, 2, 8, 4, 3, 8)?;
        if rope {
            spec = spec.with_rope(RopeParams::with_default_base(4)?)?;
        }
        let w = MhaWeights::random(&spec, rng);
        let n = sizes;
        let x = rng.uniform_matrix(n, 8);
        let full = self_attention(&x, &w, &spec, &MaskPolicy::causal())?;
        o.add(prefix_deviation(&full, n, |m| {
            self_attention(&x.slice_rows(0, m), &w, &spec, &MaskPolicy::causal())
        })?);
    }
    Ok(o)
}

fn causal_prefix_gpt(rng: &mut SeededRng, sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for placement in [NormPlacement::PostLn, NormPlacement::PreLn] {
        let shape = LayerShape {
            placement,
            rope: Some(RopeParams::with_default_base(4)?),
            n_kv_heads: 1,
            ..LayerShape::new(8, 2)?
        };
        let model = GptModel::random(&shape, 2, 11, rng)?;
        let toks: Vec<usize> = (0..sizes).map(|_| rng.int(0, 10)).collect();
        let full = gpt_forward(&toks, &model)?;
        o.add(prefix_deviation(&full, sizes, |m| {
            gpt_forward(&toks[..m], &model)
        })?);
    }
    Ok(o)
}

fn gqa_duplication(rng: &mut SeededRng, sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for (n, n_kv) in [(4, 4), (4, 2), (4, 1)] {
        for causal in [false, true] {
            let spec = MhaSpec::new(n, n_kv, 8, 3, 2, 6)?;
            let w = MhaWeights::random(&spec, rng);
            let n_kv_tok = tokens(rng, sizes, 16);
            let (xq, mask) = if causal {
                (rng.uniform_matrix(n_kv_tok, 8), MaskPolicy::causal())
            } else {
                {
                    let n_q = tokens(rng, sizes, 16);
                    (rng.uniform_matrix(n_q, 8), MaskPolicy::None)
                }
            };
            let xkv = if causal {
                xq.clone()
            } else {
                rng.uniform_matrix(n_kv_tok, 8)
            };
            let got = mha_forward(&xq, &xkv, &w, &spec, &mask)?;
            let oracle =
                reference::grouped_attention_by_duplication(&xq, &xkv, &w, &spec, |i, j| {
                    !causal || j <= i
                });
            o.add(diff(&got, &oracle)?);
        }
    }
    Ok(o)
}

fn stacked<T>(steps: impl IntoIterator<Item = Result<T>>) -> Result<Vec<T>> {
    steps.into_iter().collect()
}

fn streaming_grouped(rng: &mut SeededRng, sizes: usize, n: usize, n_kv: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for rope in [false, true] {
        let mut spec = MhaSpec::new(n, n_kv, 8, 4, 3, 8)?;
        if rope {
            spec = spec.with_rope(RopeParams::with_default_base(4)?)?;
        }
        let w = MhaWeights::random(&spec, rng);
        let x = rng.uniform_matrix(sizes, 8);
        let full = self_attention(&x, &w, &spec, &MaskPolicy::causal())?;
        let mut cache = KvCache::new(&spec);
        let rows = stacked(
            (0..sizes)
                .map(|t| streaming_decode_step(&mut cache, &x.slice_rows(t, t + 1), &w, &spec)),
        )?;
        o.add(diff(&Matrix::vstack(&rows)?, &full)?);
    }
    Ok(o)
}

fn streaming_latent(rng: &mut SeededRng, sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    let spec = MlaSpec::new(4, 8, 4, 3, 5, 8)?;
    let w = merge_weights(&MlaWeights::random(&spec, rng))?;
    let x = rng.uniform_matrix(sizes, 8);
    let full = mla_forward(&x, &w, &spec, &MaskPolicy::causal())?;
    let mut cache = LatentCache::new(&spec);
    let rows = stacked(
        (0..sizes)
            .map(|t| latent_decode_step(&mut cache, &x.slice_rows(t, t + 1), &w, &spec, None)),
    )?;
    o.add(diff(&Matrix::vstack(&rows)?, &full)?);

    let rope = DecoupledRope::random(&spec, 2, rng);
    let p = RopeParams::with_default_base(2)?;
    let full = mla_forward_decoupled_rope(&x, &w, &rope, &p, &spec, &MaskPolicy::causal(), 0)?;
    let mut cache = LatentCache::with_rope(&spec, 2);
    let rows = stacked((0..sizes).map(|t| {
        latent_decode_step(
            &mut cache,
            &x.slice_rows(t, t + 1),
            &w,
            &spec,
            Some((&rope, &p)),
        )
    }))?;
    o.add(diff(&Matrix::vstack(&rows)?, &full)?);
    Ok(o)
}

fn random_mla(rng: &mut SeededRng) -> Result<(MlaSpec, MlaWeights)> {
    let n_heads = rng.int(1, 4);
    let d_in = rng.int(2, 12);
    let spec = MlaSpec::new(
        n_heads,
        d_in,
        rng.int(1, 6),
        rng.int(1, d_in),
        rng.int(1, d_in),
        rng.int(1, 10),
    )?;
    let w = MlaWeights::random(&spec, rng);
    Ok((spec, w))
}

fn mla_expanded(rng: &mut SeededRng, sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for _ in 0..20 {
        let (spec, w) = random_mla(rng)?;
        let mha_spec = spec.mha_spec()?;
        let expanded = MhaWeights {
            wq: w
                .w_lqq
                .iter()
                .map(|m| reference::matmul_loops(&w.w_lq, m))
                .collect(),
            wk: w
                .w_lk
                .iter()
                .map(|m| reference::matmul_loops(&w.w_l, m))
                .collect(),
            wv: w
                .w_lv
                .iter()
                .map(|m| reference::matmul_loops(&w.w_l, m))
                .collect(),
            wo: w.wo.clone(),
        };
        let n_tok = tokens(rng, sizes, 16);
        let x = rng.uniform_matrix(n_tok, spec.d_in);
        let got = mla_forward(&x, &merge_weights(&w)?, &spec, &MaskPolicy::causal())?;
        let oracle =
            reference::grouped_attention_by_duplication(&x, &x, &expanded, &mha_spec, |i, j| {
                j <= i
            });
        o.add(diff(&got, &oracle)?);
    }
    Ok(o)
}

/// `(reconstruction errors, forward deviations)` on planted low-rank weights.
fn planted(rng: &mut SeededRng, sizes: usize) -> Result<(Observed, Observed)> {
    let (mut rec, mut fwd) = (Observed::new(), Observed::new());
    for _ in 0..10 {
        let n = rng.int(1, 4);
        let d_head = rng.int(1, 4);
        let d_in = rng.int(4, 12);
        let d_l = rng.int(1, d_in.min(2 * n * d_head));
        let d_lq = rng.int(1, d_in.min(n * d_head));
        let g = rng.uniform_matrix(d_in, d_l);
        let gq = rng.uniform_matrix(d_in, d_lq);
        let heads = |basis: &Matrix, r: usize, rng: &mut SeededRng| -> Result<Vec<Matrix>> {
            (0..n)
                .map(|_| matmul(basis, &rng.uniform_matrix(r, d_head)))
                .collect()
        };
        let w = MhaWeights {
            wq: heads(&gq, d_lq, rng)?,
            wk: heads(&g, d_l, rng)?,
            wv: heads(&g, d_l, rng)?,
            wo: rng.uniform_matrix(n * d_head, d_in),
        };
        let (mla, err) = factorize_mha_to_mla(&w, d_l, d_lq)?;
        rec.add(err.total());
        let n_tok = tokens(rng, sizes, 16);
        let x = rng.uniform_matrix(n_tok, d_in).scale(0.3);
        let spec = mla.infer_spec()?;
        let got = mla_forward(&x, &merge_weights(&mla)?, &spec, &MaskPolicy::causal())?;
        let want = self_attention(&x, &w, &w.infer_spec()?, &MaskPolicy::causal())?;
        fwd.add(diff(&got, &want)?);
    }
    Ok((rec, fwd))
}

fn merge_soundness(rng: &mut SeededRng, sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for case in 0..20 {
        let (spec, w) = random_mla(rng)?;
        let n_tok = tokens(rng, sizes, 16);
        let x = rng.uniform_matrix(n_tok, spec.d_in);
        let mask = if case % 2 == 0 {
            MaskPolicy::causal()
        } else {
            MaskPolicy::None
        };
        let merged = mla_forward(&x, &merge_weights(&w)?, &spec, &mask)?;
        let unmerged = mla_forward_unmerged(&x, &w, &spec, &mask)?;
        o.add(diff(&merged, &unmerged)?);
    }
    Ok(o)
}

/// RoPE needs two positions to have any effect, so at least two tokens are used.
fn rope_naive(rng: &mut SeededRng, sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    let spec = MlaSpec::new(2, 8, 4, 4, 6, 8)?;
    let head = RopeParams::with_default_base(spec.d_head)?;
    let latent = RopeParams::with_default_base(spec.d_latent)?;
    for _ in 0..10 {
        let w = MlaWeights::random(&spec, rng);
        let n_tok = rng.int(2, sizes.clamp(2, 16));
        let x = rng.uniform_matrix(n_tok, spec.d_in);
        let unmerged = mla_forward_rope_unmerged(&x, &w, &head, &spec, &MaskPolicy::causal())?;
        let naive = mla_forward_rope_naive_merged(
            &x,
            &merge_weights(&w)?,
            &latent,
            &spec,
            &MaskPolicy::causal(),
        )?;
        o.add(diff(&unmerged, &naive)?);
    }
    Ok(o)
}

fn rope_decoupled_shift(rng: &mut SeededRng, sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    let spec = MlaSpec::new(3, 8, 4, 3, 5, 8)?;
    let p = RopeParams::with_default_base(4)?;
    for _ in 0..10 {
        let w = merge_weights(&MlaWeights::random(&spec, rng))?;
        let rope = DecoupledRope::random(&spec, 4, rng);
        let n_tok = tokens(rng, sizes, 16);
        let x = rng.uniform_matrix(n_tok, spec.d_in);
        let shift = rng.int(1, 1000);
        let a = mla_forward_decoupled_rope(&x, &w, &rope, &p, &spec, &MaskPolicy::causal(), 0)?;
        let b = mla_forward_decoupled_rope(&x, &w, &rope, &p, &spec, &MaskPolicy::causal(), shift)?;
        o.add(diff(&a, &b)?);
    }
    Ok(o)
}

fn memory_formulas(rng: &mut SeededRng, _sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for _ in 0..20 {
        let n_kv = rng.int(1, 16);
        let d = MhaDims {
            n_heads: n_kv * rng.int(1, 8),
            n_kv_heads: n_kv,
            d_in: rng.int(1, 8192),
            d_qk: rng.int(1, 256),
            d_head: rng.int(1, 256),
            d_out: rng.int(1, 8192),
        };
        let l = MlaDims {
            n_heads: rng.int(1, 128),
            d_in: rng.int(1, 8192),
            d_latent: rng.int(1, 1024),
            d_out: rng.int(1, 8192),
        };
        let n_tok = rng.int(0, 131_072);
        let mha_ok = mha_memory_floats(&d, n_tok)? as u128
            == reference::table_floats(&reference::mha_table_rows(&d, n_tok));
        let mla_ok = mla_memory_floats(&l, n_tok)? as u128
            == reference::table_floats(&reference::mla_table_rows(&l, n_tok));
        o.add(f64::from(u8::from(!mha_ok) + u8::from(!mla_ok)));
    }
    Ok(o)
}

fn cache_bytes(_rng: &mut SeededRng, _sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    let preset = ModelPreset::builtin("llama3-70b")
        .ok_or_else(|| Error::Spec("missing built-in preset".into()))?;
    let report = account_preset(&preset, 8192, 16)?;
    let oracle = reference::kv_cache_bytes_oracle(80, 8, 8192, 128, 16);
    let mismatches = u8::from(report.cache_bytes_total != 2_684_354_560)
        + u8::from(report.cache_bytes_total as u128 != oracle);
    o.add(f64::from(mismatches));
    Ok(o)
}

fn preset_cells(_rng: &mut SeededRng, _sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for (name, layers, heads, kv, hidden, dim) in reference::PUBLISHED_PRESETS {
        let mismatches = match ModelPreset::builtin(name) {
            None => 6,
            Some(p) => {
                let cells = [
                    Some(p.n_layers) == reference::parse_cell(layers),
                    Some(p.n_heads) == reference::parse_cell(heads),
                    p.n_kv_heads == reference::parse_cell(kv),
                    Some(p.d_model) == reference::parse_cell(hidden),
                    Some(p.d_head_or_latent) == reference::parse_cell(dim),
                ];
                cells.iter().filter(|ok| !**ok).count()
            }
        };
        o.add(mismatches as f64);
    }
    Ok(o)
}

/// `d` entries from `[-1, 1)` rescaled to root-mean-square `target`.
fn row_with_rms(rng: &mut SeededRng, d: usize, target: f64) -> Vec<f64> {
    let x = rng.uniform_vec(d);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt();
    x.iter().map(|v| v * target / rms).collect()
}

/// `(max |mean|, max |variance - 1|)` of layer-norm outputs with `γ = 1`,
/// `β = 0`. Rows have standard deviation in `[1, 10]` and a random offset;
/// the variance shortfall is `ε / (σ² + ε)`, so smaller σ would measure ε
/// rather than the implementation.
fn norm_stats(rng: &mut SeededRng) -> Result<(Observed, Observed)> {
    let (mut mean_o, mut var_o) = (Observed::new(), Observed::new());
    for _ in 0..200 {
        let d = rng.int(4, 16);
        let sigma = rng.uniform(1.0, 10.0);
        let offset = rng.uniform(-50.0, 50.0);
        let centered = row_with_rms(rng, d, 1.0);
        let m = centered.iter().sum::<f64>() / d as f64;
        let sd = (centered.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64).sqrt();
        let row: Vec<f64> = centered
            .iter()
            .map(|v| offset + sigma * (v - m) / sd)
            .collect();
        let y = layer_norm(&row, &NormParams::layer_norm(d))?;
        let n = d as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        mean_o.add(mean.abs());
        var_o.add((var - 1.0).abs());
    }
    Ok((mean_o, var_o))
}

/// RMS-norm drift under scaling by `c` in `[1, 10]`. With fixed `ε` the drift
/// is about `ε / (2 mean(x²))` per unit of output, so rows use RMS in
/// `[10, 100]`, where that is below `5e-8`.
fn rms_scale(rng: &mut SeededRng, _sizes: usize) -> Result<Observed> {
    let mut o = Observed::new();
    for _ in 0..200 {
        let d = rng.int(4, 16);
        let target = rng.uniform(10.0, 100.0);
        let row = row_with_rms(rng, d, target);
        let p = NormParams::rms_norm(d);
        let c = rng.uniform(1.0, 10.0);
        let a = rms_norm(&row, &p)?;
        let b = rms_norm(&row.iter().map(|v| c * v).collect::<Vec<_>>(), &p)?;
        o.add(
            a.iter()
                .zip(&b)
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok(o)
}
