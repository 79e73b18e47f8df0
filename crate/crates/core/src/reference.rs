//! Slow scalar oracles used by the property suite.
//!
//! Everything here is written with explicit loops and no shared helpers from
//! the optimized paths, so agreement is evidence rather than tautology.

use crate::account::{MhaDims, MlaDims};
use crate::linalg::Matrix;
use crate::multihead::{MhaSpec, MhaWeights};

/// Plain triple-loop product.
pub fn matmul_loops(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "matmul_loops shapes");
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

/// Softmax attention over `Q`, `K`, `V` with allowed-set predicate, one
/// query row at a time.
pub fn attention_loops(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    allowed: impl Fn(usize, usize) -> bool,
) -> Matrix {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols()).to_rows();
    for (i, out_row) in out.iter_mut().enumerate() {
        let logits: Vec<Option<f64>> = (0..k.rows())
            .map(|j| {
                allowed(i, j).then(|| {
                    (0..q.cols())
                        .map(|c| q.get(i, c) * k.get(j, c))
                        .sum::<f64>()
                        * scale
                })
            })
            .collect();
        let max = logits
            .iter()
            .flatten()
            .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let weights: Vec<f64> = logits
            .iter()
            .map(|l| l.map_or(0.0, |x| (x - max).exp()))
            .collect();
        let total: f64 = weights.iter().sum();
        for (j, w) in weights.iter().enumerate() {
            for (c, o) in out_row.iter_mut().enumerate() {
                *o += w / total * v.get(j, c);
            }
        }
    }
    Matrix::from_rows(&out).unwrap_or_else(|_| Matrix::zeros(q.rows(), v.cols()))
}

/// Per-head scaled-exponential attention with every query head given its
/// own copy of its KV head's weights, computed by loops.
pub fn grouped_attention_by_duplication(
    xq: &Matrix,
    xkv: &Matrix,
    w: &MhaWeights,
    spec: &MhaSpec,
    allowed: impl Fn(usize, usize) -> bool + Copy,
) -> Matrix {
    let group = spec.n_heads / spec.n_kv_heads;
    let wk: Vec<&Matrix> = (0..spec.n_heads).map(|h| &w.wk[h / group]).collect();
    let wv: Vec<&Matrix> = (0..spec.n_heads).map(|h| &w.wv[h / group]).collect();
    let mut heads = Vec::new();
    for h in 0..spec.n_heads {
        let q = matmul_loops(xq, &w.wq[h]);
        let k = matmul_loops(xkv, wk[h]);
        let v = matmul_loops(xkv, wv[h]);
        heads.push(attention_loops(&q, &k, &v, allowed));
    }
    let concat = Matrix::from_fn(xq.rows(), spec.n_heads * spec.d_head, |i, c| {
        heads[c / spec.d_head].get(i, c % spec.d_head)
    });
    matmul_loops(&concat, &w.wo)
}

/// Multi-head memory rows: `(tensor, dimensions)`, with KV-head replacement for the
/// cache, `W^K` and `W^V`.
pub fn mha_table_rows(d: &MhaDims, n_kv_tokens: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("K cache", vec![n_kv_tokens, d.d_qk, d.n_kv_heads]),
        ("V cache", vec![n_kv_tokens, d.d_head, d.n_kv_heads]),
        ("W^Q", vec![d.d_in, d.d_qk, d.n_heads]),
        ("W^K", vec![d.d_in, d.d_qk, d.n_kv_heads]),
        ("W^V", vec![d.d_in, d.d_head, d.n_kv_heads]),
        ("W^O", vec![d.n_heads * d.d_head, d.d_out]),
    ]
}

/// Latent-attention memory rows.
pub fn mla_table_rows(d: &MlaDims, n_kv_tokens: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("L cache", vec![n_kv_tokens, d.d_latent]),
        ("W^L", vec![d.d_in, d.d_latent]),
        ("W^Q'", vec![d.d_in, d.d_latent, d.n_heads]),
        ("W^O'", vec![d.n_heads * d.d_latent, d.d_out]),
    ]
}

/// Sum of the element counts of table rows, in 128-bit arithmetic.
pub fn table_floats(rows: &[(&'static str, Vec<usize>)]) -> u128 {
    rows.iter()
        .map(|(_, dims)| dims.iter().map(|&x| x as u128).product::<u128>())
        .sum()
}

/// `2 N_L N_h N_KV d` floats times `bits / 8`, in 128-bit arithmetic.
pub fn kv_cache_bytes_oracle(
    n_layers: usize,
    n_heads: usize,
    n_kv_tokens: usize,
    d: usize,
    bits: usize,
) -> u128 {
    let floats = 2 * n_layers as u128 * n_heads as u128 * n_kv_tokens as u128 * d as u128;
    (floats * bits as u128).div_ceil(8)
}

/// Published architecture numbers as printed:
/// `(name, layers, heads, kv heads or "-", hidden, head/latent dim)`.
pub const PUBLISHED_PRESETS: [(&str, &str, &str, &str, &str, &str); 3] = [
    ("llama3-70b", "80", "64", "8", "8,192", "128"),
    ("gemma3-27b", "62", "32", "16", "5,376", "128"),
    ("deepseek-v2", "60", "128", "-", "5120", "512"),
];

/// Parses a printed count, ignoring thousands separators.
pub fn parse_cell(cell: &str) -> Option<usize> {
    cell.replace(',', "").parse().ok()
}
