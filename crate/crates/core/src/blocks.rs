//! Normalization, feed-forward sublayers, encoder/decoder layers and the
//! Transformer and GPT stacks (forward pass only).

use crate::attention::MaskPolicy;
use crate::cache::{streaming_decode_step, KvCache};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::multihead::{mha_forward, MhaSpec, MhaWeights};
use crate::rng::SeededRng;
use crate::tokenizer::{embed, EmbeddingTable, RopeParams};

pub const DEFAULT_NORM_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

/// Gain `γ`, shift `β` (layer norm only) and `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub kind: NormKind,
    pub gamma: Vec<f64>,
    pub beta: Option<Vec<f64>>,
    pub epsilon: f64,
}

impl NormParams {
    /// `γ = 1`, `β = 0`, default `ε`.
    pub fn layer_norm(d: usize) -> Self {
        NormParams {
            kind: NormKind::LayerNorm,
            gamma: vec![1.0; d],
            beta: Some(vec![0.0; d]),
            epsilon: DEFAULT_NORM_EPSILON,
        }
    }

    /// `γ = 1`, default `ε`.
    pub fn rms_norm(d: usize) -> Self {
        NormParams {
            kind: NormKind::RmsNorm,
            gamma: vec![1.0; d],
            beta: None,
            epsilon: DEFAULT_NORM_EPSILON,
        }
    }

    pub fn identity_of(kind: NormKind, d: usize) -> Self {
        match kind {
            NormKind::LayerNorm => Self::layer_norm(d),
            NormKind::RmsNorm => Self::rms_norm(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Spec(format!(
                "norm epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        match (self.kind, &self.beta) {
            (NormKind::LayerNorm, Some(b)) if b.len() == self.gamma.len() => Ok(()),
            (NormKind::LayerNorm, Some(b)) => Err(shape_err(
                "NormParams",
                format!("beta of length {}", b.len()),
                format!("gamma of length {}", self.gamma.len()),
            )),
            (NormKind::LayerNorm, None) => {
                Err(Error::Spec("layer norm needs a shift vector".into()))
            }
            (NormKind::RmsNorm, None) => Ok(()),
            (NormKind::RmsNorm, Some(_)) => Err(Error::Spec("RMS norm has no shift vector".into())),
        }
    }

    fn check_row(&self, len: usize) -> Result<()> {
        self.validate()?;
        if len != self.dim() {
            return Err(shape_err(
                "norm",
                format!("row of length {len}"),
                format!("params of length {}", self.dim()),
            ));
        }
        Ok(())
    }
}

fn layer_norm_unchecked(x: &[f64], p: &NormParams) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + p.epsilon).sqrt();
    let beta = p.beta.as_deref().unwrap_or(&[]);
    x.iter()
        .enumerate()
        .map(|(i, v)| p.gamma[i] * (v - mean) * inv + beta.get(i).copied().unwrap_or(0.0))
        .collect()
}

fn rms_norm_unchecked(x: &[f64], p: &NormParams) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + p.epsilon).sqrt();
    x.iter().zip(&p.gamma).map(|(v, g)| g * v * inv).collect()
}

/// `γ ⊙ (x - μ) / sqrt(σ² + ε) + β` with population variance.
pub fn layer_norm(x: &[f64], p: &NormParams) -> Result<Vec<f64>> {
    p.check_row(x.len())?;
    Ok(layer_norm_unchecked(x, p))
}

/// `γ ⊙ x / sqrt(mean(x²) + ε)`.
pub fn rms_norm(x: &[f64], p: &NormParams) -> Result<Vec<f64>> {
    p.check_row(x.len())?;
    Ok(rms_norm_unchecked(x, p))
}

/// Applies the norm selected by `p.kind` to every row.
pub fn norm_rows(x: &Matrix, p: &NormParams) -> Result<Matrix> {
    p.check_row(x.cols())?;
    let f = match p.kind {
        NormKind::LayerNorm => layer_norm_unchecked,
        NormKind::RmsNorm => rms_norm_unchecked,
    };
    x.map_rows(|row| f(row, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation.
    Gelu,
    Silu,
    Identity,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                0.5 * x
                    * (1.0
                        + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
            }
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "gelu" => Some(Activation::Gelu),
            "silu" => Some(Activation::Silu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnKind {
    /// `f(x W1 + b1) W_out`.
    Plain,
    /// `(f(x W1 + b1) ⊙ (x W2 + b2)) W_out`.
    Glu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub kind: FfnKind,
    pub activation: Activation,
    /// `d x d_ff`.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// Gate branch, GLU only.
    pub w2: Option<Matrix>,
    pub b2: Option<Vec<f64>>,
    /// `d_ff x d`.
    pub w_out: Matrix,
}

impl FfnParams {
    pub fn plain(w1: Matrix, b1: Vec<f64>, w_out: Matrix, activation: Activation) -> Result<Self> {
        let p = FfnParams {
            kind: FfnKind::Plain,
            activation,
            w1,
            b1,
            w2: None,
            b2: None,
            w_out,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn glu(
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
        w_out: Matrix,
        activation: Activation,
    ) -> Result<Self> {
        let p = FfnParams {
            kind: FfnKind::Glu,
            activation,
            w1,
            b1,
            w2: Some(w2),
            b2: Some(b2),
            w_out,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn random(
        kind: FfnKind,
        activation: Activation,
        d: usize,
        d_ff: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let s_in = 1.0 / (d as f64).sqrt();
        let s_ff = 1.0 / (d_ff as f64).sqrt();
        let w1 = rng.uniform_matrix(d, d_ff).scale(s_in);
        let b1 = rng.uniform_vec(d_ff).iter().map(|b| 0.1 * b).collect();
        let (w2, b2) = match kind {
            FfnKind::Plain => (None, None),
            FfnKind::Glu => (
                Some(rng.uniform_matrix(d, d_ff).scale(s_in)),
                Some(rng.uniform_vec(d_ff).iter().map(|b| 0.1 * b).collect()),
            ),
        };
        let w_out = rng.uniform_matrix(d_ff, d).scale(s_ff);
        FfnParams {
            kind,
            activation,
            w1,
            b1,
            w2,
            b2,
            w_out,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, d_ff) = self.w1.shape();
        if self.b1.len() != d_ff {
            return Err(shape_err(
                "FfnParams b1",
                format!("length {}", self.b1.len()),
                format!("d_ff {d_ff}"),
            ));
        }
        if self.w_out.shape() != (d_ff, d) {
            return Err(shape_err(
                "FfnParams w_out",
                self.w_out.shape_str(),
                format!("{d_ff}x{d}"),
            ));
        }
        match (self.kind, &self.w2, &self.b2) {
            (FfnKind::Plain, None, None) => Ok(()),
            (FfnKind::Plain, _, _) => Err(Error::Spec("plain FFN has no gate branch".into())),
            (FfnKind::Glu, Some(w2), Some(b2)) => {
                if w2.shape() != (d, d_ff) {
                    return Err(shape_err(
                        "FfnParams w2",
                        w2.shape_str(),
                        format!("{d}x{d_ff}"),
                    ));
                }
                if b2.len() != d_ff {
                    return Err(shape_err(
                        "FfnParams b2",
                        format!("length {}", b2.len()),
                        format!("d_ff {d_ff}"),
                    ));
                }
                Ok(())
            }
            (FfnKind::Glu, _, _) => Err(Error::Spec("GLU FFN needs w2 and b2".into())),
        }
    }
}

/// Row-wise feed-forward sublayer.
pub fn ffn_forward(x: &Matrix, p: &FfnParams) -> Result<Matrix> {
    p.validate()?;
    let hidden = matmul(x, &p.w1)?
        .add_row_vector(&p.b1)?
        .map(|v| p.activation.apply(v));
    let hidden = match (&p.w2, &p.b2) {
        (Some(w2), Some(b2)) => hidden.hadamard(&matmul(x, w2)?.add_row_vector(b2)?)?,
        _ => hidden,
    };
    matmul(&hidden, &p.w_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPlacement {
    /// `x ← norm(x + sublayer(x))`.
    PostLn,
    /// `x ← x + sublayer(norm(x))`.
    PreLn,
}

/// Attention weights with their spec.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSublayer {
    pub spec: MhaSpec,
    pub weights: MhaWeights,
}

impl AttentionSublayer {
    pub fn new(spec: MhaSpec, weights: MhaWeights) -> Result<Self> {
        spec.validate()?;
        weights.validate(&spec)?;
        Ok(AttentionSublayer { spec, weights })
    }

    pub fn random(spec: MhaSpec, rng: &mut SeededRng) -> Self {
        let weights = MhaWeights::random(&spec, rng);
        AttentionSublayer { spec, weights }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub placement: NormPlacement,
    pub self_attention: AttentionSublayer,
    pub self_norm: NormParams,
    /// Decoder layers of an encoder-decoder model only.
    pub cross_attention: Option<(AttentionSublayer, NormParams)>,
    pub ffn: FfnParams,
    pub ffn_norm: NormParams,
}

/// Shape parameters for building layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub placement: NormPlacement,
    pub norm: NormKind,
    pub ffn: FfnKind,
    pub activation: Activation,
    pub rope: Option<RopeParams>,
}

impl LayerShape {
    /// `d_head = d_model / n_heads`, `d_ff = 4 d_model`, Post-LN, layer norm,
    /// plain ReLU FFN, no RoPE.
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Spec(format!(
                "d_model {d_model} is not a multiple of n_heads {n_heads}"
            )));
        }
        Ok(LayerShape {
            d_model,
            n_heads,
            n_kv_heads: n_heads,
            d_head: d_model / n_heads,
            d_ff: 4 * d_model,
            placement: NormPlacement::PostLn,
            norm: NormKind::LayerNorm,
            ffn: FfnKind::Plain,
            activation: Activation::Relu,
            rope: None,
        })
    }

    pub fn attention_spec(&self) -> Result<MhaSpec> {
        let spec = MhaSpec::new(
            self.n_heads,
            self.n_kv_heads,
            self.d_model,
            self.d_head,
            self.d_head,
            self.d_model,
        )?;
        match self.rope {
            Some(r) => spec.with_rope(r),
            None => Ok(spec),
        }
    }
}

impl LayerConfig {
    /// Random weights, identity norms. `cross` adds a cross-attention
    /// sublayer (without RoPE).
    pub fn random(shape: &LayerShape, cross: bool, rng: &mut SeededRng) -> Result<Self> {
        let spec = shape.attention_spec()?;
        let d = shape.d_model;
        let self_attention = AttentionSublayer::random(spec.clone(), rng);
        let cross_attention = if cross {
            let mut cross_spec = spec;
            cross_spec.rope = None;
            Some((
                AttentionSublayer::random(cross_spec, rng),
                NormParams::identity_of(shape.norm, d),
            ))
        } else {
            None
        };
        let ffn = FfnParams::random(shape.ffn, shape.activation, d, shape.d_ff, rng);
        Ok(LayerConfig {
            placement: shape.placement,
            self_attention,
            self_norm: NormParams::identity_of(shape.norm, d),
            cross_attention,
            ffn,
            ffn_norm: NormParams::identity_of(shape.norm, d),
        })
    }

    pub fn d_model(&self) -> usize {
        self.self_norm.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let check_attn = |a: &AttentionSublayer, what: &str| -> Result<()> {
            a.spec.validate()?;
            a.weights.validate(&a.spec)?;
            if a.spec.d_in != d || a.spec.d_out != d {
                return Err(Error::Spec(format!(
                    "{what} maps {} -> {}, layer width is {d}",
                    a.spec.d_in, a.spec.d_out
                )));
            }
            Ok(())
        };
        let check_norm = |n: &NormParams| -> Result<()> {
            n.validate()?;
            if n.dim() != d {
                return Err(Error::Spec(format!(
                    "norm width {} differs from layer width {d}",
                    n.dim()
                )));
            }
            Ok(())
        };
        check_attn(&self.self_attention, "self-attention")?;
        check_norm(&self.self_norm)?;
        if let Some((a, n)) = &self.cross_attention {
            check_attn(a, "cross-attention")?;
            check_norm(n)?;
        }
        self.ffn.validate()?;
        if self.ffn.d_model() != d {
            return Err(Error::Spec(format!(
                "FFN width {} differs from layer width {d}",
                self.ffn.d_model()
            )));
        }
        check_norm(&self.ffn_norm)
    }
}

/// One residual sublayer with the configured norm placement.
fn residual(
    x: &Matrix,
    norm: &NormParams,
    placement: NormPlacement,
    f: impl FnOnce(&Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    match placement {
        NormPlacement::PostLn => norm_rows(&x.add(&f(x)?)?, norm),
        NormPlacement::PreLn => x.add(&f(&norm_rows(x, norm)?)?),
    }
}

/// Shared layer body: self-attention (supplied by the caller), optional
/// cross-attention, FFN.
fn layer_body(
    x: &Matrix,
    enc_out: Option<&Matrix>,
    cfg: &LayerConfig,
    self_attn: impl FnOnce(&Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    cfg.validate()?;
    let mut h = residual(x, &cfg.self_norm, cfg.placement, self_attn)?;
    match (&cfg.cross_attention, enc_out) {
        (Some((a, norm)), Some(enc)) => {
            h = residual(&h, norm, cfg.placement, |q| {
                mha_forward(q, enc, &a.weights, &a.spec, &MaskPolicy::None)
            })?;
        }
        (None, None) => {}
        (Some(_), None) => {
            return Err(Error::Argument(
                "layer has cross-attention but no encoder output was given".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::Argument(
                "encoder output given to a layer without cross-attention".into(),
            ))
        }
    }
    residual(&h, &cfg.ffn_norm, cfg.placement, |y| {
        ffn_forward(y, &cfg.ffn)
    })
}

/// Unmasked self-attention layer.
pub fn encoder_layer(x: &Matrix, cfg: &LayerConfig) -> Result<Matrix> {
    let a = &cfg.self_attention;
    layer_body(x, None, cfg, |y| {
        mha_forward(y, y, &a.weights, &a.spec, &MaskPolicy::None)
    })
}

/// Causal self-attention, then cross-attention to `enc_out` when the layer
/// has it, then FFN.
pub fn decoder_layer(x: &Matrix, enc_out: Option<&Matrix>, cfg: &LayerConfig) -> Result<Matrix> {
    let a = &cfg.self_attention;
    layer_body(x, enc_out, cfg, |y| {
        mha_forward(y, y, &a.weights, &a.spec, &MaskPolicy::causal())
    })
}

/// Encoder-decoder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub src_embedding: EmbeddingTable,
    pub tgt_embedding: EmbeddingTable,
    pub encoder: Vec<LayerConfig>,
    pub decoder: Vec<LayerConfig>,
}

impl TransformerModel {
    pub fn random(
        shape: &LayerShape,
        n_layers: usize,
        src_vocab: usize,
        tgt_vocab: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let src_embedding =
            EmbeddingTable::new(rng.uniform_matrix(src_vocab, shape.d_model), src_vocab)?;
        let tgt_embedding =
            EmbeddingTable::new(rng.uniform_matrix(tgt_vocab, shape.d_model), tgt_vocab)?;
        let encoder = (0..n_layers)
            .map(|_| LayerConfig::random(shape, false, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..n_layers)
            .map(|_| LayerConfig::random(shape, true, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerModel {
            src_embedding,
            tgt_embedding,
            encoder,
            decoder,
        })
    }
}

/// Final decoder state for `tgt` given `src`.
pub fn transformer_forward(
    src: &[usize],
    tgt: &[usize],
    model: &TransformerModel,
) -> Result<Matrix> {
    if model.encoder.len() != model.decoder.len() {
        return Err(Error::Spec(format!(
            "{} encoder layers but {} decoder layers",
            model.encoder.len(),
            model.decoder.len()
        )));
    }
    let mut enc = embed(src, &model.src_embedding)?;
    for layer in &model.encoder {
        enc = encoder_layer(&enc, layer)?;
    }
    let mut dec = embed(tgt, &model.tgt_embedding)?;
    for layer in &model.decoder {
        dec = decoder_layer(&dec, Some(&enc), layer)?;
    }
    Ok(dec)
}

/// Decoder-only stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GptModel {
    pub embedding: EmbeddingTable,
    pub layers: Vec<LayerConfig>,
}

impl GptModel {
    pub fn random(
        shape: &LayerShape,
        n_layers: usize,
        vocab: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let embedding = EmbeddingTable::new(rng.uniform_matrix(vocab, shape.d_model), vocab)?;
        let layers = (0..n_layers)
            .map(|_| LayerConfig::random(shape, false, rng))
            .collect::<Result<_>>()?;
        Ok(GptModel { embedding, layers })
    }
}

pub fn gpt_forward(tokens: &[usize], model: &GptModel) -> Result<Matrix> {
    let mut x = embed(tokens, &model.embedding)?;
    for layer in &model.layers {
        x = decoder_layer(&x, None, layer)?;
    }
    Ok(x)
}

/// Per-layer KV caches of a GPT stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GptCache {
    layers: Vec<KvCache>,
}

impl GptCache {
    pub fn new(model: &GptModel) -> Self {
        GptCache {
            layers: model
                .layers
                .iter()
                .map(|l| KvCache::new(&l.self_attention.spec))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, KvCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, i: usize) -> &KvCache {
        &self.layers[i]
    }
}

/// Runs `tokens` through the stack reusing cached keys and values; returns
/// final states for the new tokens only.
pub fn gpt_decode_step(tokens: &[usize], model: &GptModel, cache: &mut GptCache) -> Result<Matrix> {
    if cache.layers.len() != model.layers.len() {
        return Err(Error::Argument(format!(
            "cache has {} layers, model has {}",
            cache.layers.len(),
            model.layers.len()
        )));
    }
    let mut x = embed(tokens, &model.embedding)?;
    for (layer, kv) in model.layers.iter().zip(cache.layers.iter_mut()) {
        let a = &layer.self_attention;
        x = layer_body(&x, None, layer, |y| {
            streaming_decode_step(kv, y, &a.weights, &a.spec)
        })?;
    }
    Ok(x)
}
