//! Single-head kernel attention `Y = Z⁻¹ A V` with optional masking.
//!
//! Scores are `A[i, j] = f(<q_i, k_j>)` for an element-wise function `f`
//! of the query/key dot product. Masks come in two equivalent forms:
//! an additive mask `M` (`0` / `-inf`) added to the logits before an
//! exponential kernel, and a multiplicative mask `M̃` (`1` / `0`) applied
//! after any kernel. Only the multiplicative form is valid for kernels
//! that are not exponential, since `-inf` only maps to zero under `exp`.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{self, dot, matmul, matmul_transpose_b, Matrix};

pub type KernelFn = fn(f64) -> f64;

/// Scalar function `f` with `κ(v, w) = f(<v, w>)`.
#[derive(Clone)]
pub enum Kernel {
    /// `exp(x / sqrt(d_qk))`.
    ScaledExp { d_qk: usize },
    /// `x`.
    Linear,
    /// A named element-wise function.
    Custom { name: String, f: KernelFn },
}

impl Kernel {
    pub fn scaled_exp(d_qk: usize) -> Result<Self> {
        if d_qk == 0 {
            return Err(Error::Argument("ScaledExp kernel needs d_qk >= 1".into()));
        }
        Ok(Kernel::ScaledExp { d_qk })
    }

    pub fn custom(name: impl Into<String>, f: KernelFn) -> Self {
        Kernel::Custom {
            name: name.into(),
            f,
        }
    }

    /// `f(x)` for a dot product `x`.
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Kernel::ScaledExp { d_qk } => (x / (*d_qk as f64).sqrt()).exp(),
            Kernel::Linear => x,
            Kernel::Custom { f, .. } => f(x),
        }
    }

    pub fn is_exponential(&self) -> bool {
        matches!(self, Kernel::ScaledExp { .. })
    }

    pub fn name(&self) -> &str {
        match self {
            Kernel::ScaledExp { .. } => "scaled-exp",
            Kernel::Linear => "linear",
            Kernel::Custom { name, .. } => name,
        }
    }
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::ScaledExp { d_qk } => write!(f, "ScaledExp({d_qk})"),
            Kernel::Linear => write!(f, "Linear"),
            Kernel::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl PartialEq for Kernel {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Kernel::ScaledExp { d_qk: a }, Kernel::ScaledExp { d_qk: b }) => a == b,
            (Kernel::Linear, Kernel::Linear) => true,
            (Kernel::Custom { name: a, .. }, Kernel::Custom { name: b, .. }) => a == b,
            _ => false,
        }
    }
}

pub fn kernel_eval(kernel: &Kernel, v: &[f64], w: &[f64]) -> Result<f64> {
    if v.len() != w.len() {
        return Err(shape_err(
            "kernel_eval",
            format!("len {}", v.len()),
            format!("len {}", w.len()),
        ));
    }
    if let Kernel::ScaledExp { d_qk } = kernel {
        if v.len() != *d_qk {
            return Err(shape_err(
                "kernel_eval",
                format!("len {}", v.len()),
                format!("d_qk {d_qk}"),
            ));
        }
    }
    Ok(kernel.apply(dot(v, w)))
}

/// Which keys each query may see. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskPolicy {
    None,
    /// Query `i` sits at key position `offset + i` and sees keys `0..=offset + i`.
    Causal {
        offset: usize,
    },
    /// Allowed key set per query row.
    Explicit(Vec<Vec<usize>>),
}

impl MaskPolicy {
    /// Causal mask for self-attention (queries and keys aligned).
    pub fn causal() -> Self {
        MaskPolicy::Causal { offset: 0 }
    }

    /// `allowed[i * n_kv + j]`, after validating the policy against the shape.
    pub fn allowed(&self, n_q: usize, n_kv: usize) -> Result<Vec<bool>> {
        match self {
            MaskPolicy::None => Ok(vec![true; n_q * n_kv]),
            MaskPolicy::Causal { offset } => {
                if offset + n_q > n_kv {
                    return Err(Error::MaskAlignment {
                        offset: *offset,
                        n_q,
                        n_kv,
                    });
                }
                Ok((0..n_q)
                    .flat_map(|i| (0..n_kv).map(move |j| j <= offset + i))
                    .collect())
            }
            MaskPolicy::Explicit(sets) => {
                if sets.len() != n_q {
                    return Err(shape_err(
                        "MaskPolicy::Explicit",
                        format!("{} allowed sets", sets.len()),
                        format!("{n_q} queries"),
                    ));
                }
                let mut out = vec![false; n_q * n_kv];
                for (i, set) in sets.iter().enumerate() {
                    for &j in set {
                        if j >= n_kv {
                            return Err(Error::Argument(format!(
                                "mask row {i} allows key {j} but only {n_kv} keys exist"
                            )));
                        }
                        out[i * n_kv + j] = true;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Additive form `M`: `0` where allowed, `-inf` elsewhere.
    pub fn additive(&self, n_q: usize, n_kv: usize) -> Result<Matrix> {
        let allowed = self.allowed(n_q, n_kv)?;
        Ok(Matrix::additive_mask(n_q, n_kv, |i, j| {
            allowed[i * n_kv + j]
        }))
    }

    /// Multiplicative form `M̃`: indicator of the allowed set.
    pub fn multiplicative(&self, n_q: usize, n_kv: usize) -> Result<Matrix> {
        let allowed = self.allowed(n_q, n_kv)?;
        Ok(Matrix::from_fn(n_q, n_kv, |i, j| {
            if allowed[i * n_kv + j] {
                1.0
            } else {
                0.0
            }
        }))
    }
}

/// Raw dot products `Q Kᵀ`.
pub fn logits(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    matmul_transpose_b(q, k)
}

/// `f(logits + M)`. Exponential kernels only.
pub fn scores_additive(logits: &Matrix, kernel: &Kernel, mask: &MaskPolicy) -> Result<Matrix> {
    if !kernel.is_exponential() {
        return Err(Error::Argument(format!(
            "additive masking requires an exponential kernel, got {}",
            kernel.name()
        )));
    }
    let m = mask.additive(logits.rows(), logits.cols())?;
    let data = logits
        .data()
        .iter()
        .zip(m.data())
        .map(|(&x, &add)| kernel.apply(x + add))
        .collect();
    Ok(Matrix::from_raw(logits.rows(), logits.cols(), data))
}

/// `f(logits) ⊙ M̃`. Masked entries are exactly zero.
pub fn scores_multiplicative(
    logits: &Matrix,
    kernel: &Kernel,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    let m = mask.multiplicative(logits.rows(), logits.cols())?;
    let data = logits
        .data()
        .iter()
        .zip(m.data())
        .map(|(&x, &keep)| {
            if keep == 0.0 {
                0.0
            } else {
                kernel.apply(x) * keep
            }
        })
        .collect();
    Ok(Matrix::from_raw(logits.rows(), logits.cols(), data))
}

/// Kernel scores from precomputed logits: additive masking for exponential
/// kernels, multiplicative otherwise.
pub fn scores_from_logits(logits: &Matrix, kernel: &Kernel, mask: &MaskPolicy) -> Result<Matrix> {
    if kernel.is_exponential() {
        scores_additive(logits, kernel, mask)
    } else {
        scores_multiplicative(logits, kernel, mask)
    }
}

/// `A[i, j] = κ(q_i, k_j)` where allowed, `0` where masked.
pub fn attention_scores(
    q: &Matrix,
    k: &Matrix,
    kernel: &Kernel,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    check_kernel_width(kernel, q.cols(), "attention_scores")?;
    if q.cols() != k.cols() {
        return Err(shape_err("attention_scores", q.shape_str(), k.shape_str()));
    }
    scores_from_logits(&logits(q, k)?, kernel, mask)
}

fn check_kernel_width(kernel: &Kernel, width: usize, op: &'static str) -> Result<()> {
    match kernel {
        Kernel::ScaledExp { d_qk } if *d_qk != width => Err(shape_err(
            op,
            format!("query width {width}"),
            format!("kernel d_qk {d_qk}"),
        )),
        _ => Ok(()),
    }
}

/// Row sums of `A`. Each must be positive and finite.
pub fn normalizer(a: &Matrix) -> Result<Vec<f64>> {
    (0..a.rows())
        .map(|i| {
            let z: f64 = a.row(i).iter().sum();
            if z.is_finite() && z > 0.0 {
                Ok(z)
            } else {
                Err(Error::DegenerateRow {
                    row: i,
                    reason: format!("normalizer is {z} (fully masked row or non-positive kernel)"),
                })
            }
        })
        .collect()
}

/// `Z⁻¹ A`.
pub fn normalize_scores(a: &Matrix, z: &[f64]) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) / z[i])
}

/// Per-head projection weights `W^Q`, `W^K`, `W^V`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl HeadWeights {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        if wq.cols() != wk.cols() {
            return Err(shape_err(
                "HeadWeights: W^Q vs W^K",
                wq.shape_str(),
                wk.shape_str(),
            ));
        }
        if wq.rows() != wk.rows() || wk.rows() != wv.rows() {
            return Err(shape_err(
                "HeadWeights: input dimension",
                format!("{} / {}", wq.shape_str(), wk.shape_str()),
                wv.shape_str(),
            ));
        }
        Ok(HeadWeights { wq, wk, wv })
    }

    pub fn d_in(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_qk(&self) -> usize {
        self.wq.cols()
    }

    pub fn d_v(&self) -> usize {
        self.wv.cols()
    }
}

/// Every intermediate of one attention evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// `A`.
    pub scores: Matrix,
    /// Diagonal of `Z`.
    pub normalizer: Vec<f64>,
    /// `Z⁻¹ A`.
    pub weights: Matrix,
    /// `Y`.
    pub output: Matrix,
}

/// Attention on already projected `Q`, `K`, `V`.
pub fn attend_projected(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kernel: &Kernel,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    Ok(attend_projected_traced(q, k, v, kernel, mask)?.3)
}

fn attend_projected_traced(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    kernel: &Kernel,
    mask: &MaskPolicy,
) -> Result<(Matrix, Vec<f64>, Matrix, Matrix)> {
    if k.rows() != v.rows() {
        return Err(shape_err(
            "attend: keys vs values",
            k.shape_str(),
            v.shape_str(),
        ));
    }
    let scores = attention_scores(q, k, kernel, mask)?;
    let z = normalizer(&scores)?;
    let weights = normalize_scores(&scores, &z);
    let output = matmul(&weights, v)?;
    Ok((scores, z, weights, output))
}

fn project(
    xq: &Matrix,
    xk: &Matrix,
    xv: &Matrix,
    w: &HeadWeights,
) -> Result<(Matrix, Matrix, Matrix)> {
    if xk.rows() != xv.rows() {
        return Err(shape_err(
            "attend: X^K vs X^V",
            xk.shape_str(),
            xv.shape_str(),
        ));
    }
    let proj = |x: &Matrix, wm: &Matrix, what: &'static str| {
        if x.cols() != wm.rows() {
            Err(shape_err(what, x.shape_str(), wm.shape_str()))
        } else {
            matmul(x, wm)
        }
    };
    Ok((
        proj(xq, &w.wq, "attend: X^Q W^Q")?,
        proj(xk, &w.wk, "attend: X^K W^K")?,
        proj(xv, &w.wv, "attend: X^V W^V")?,
    ))
}

/// `Y = Z⁻¹ A V` with `Q = X^Q W^Q`, `K = X^K W^K`, `V = X^V W^V`.
pub fn attend(
    xq: &Matrix,
    xk: &Matrix,
    xv: &Matrix,
    w: &HeadWeights,
    kernel: &Kernel,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    Ok(attend_traced(xq, xk, xv, w, kernel, mask)?.output)
}

pub fn attend_traced(
    xq: &Matrix,
    xk: &Matrix,
    xv: &Matrix,
    w: &HeadWeights,
    kernel: &Kernel,
    mask: &MaskPolicy,
) -> Result<AttentionTrace> {
    let (q, k, v) = project(xq, xk, xv, w)?;
    let (scores, normalizer, weights, output) = attend_projected_traced(&q, &k, &v, kernel, mask)?;
    Ok(AttentionTrace {
        q,
        k,
        v,
        scores,
        normalizer,
        weights,
        output,
    })
}

/// Scaled-exponential attention computed as `softmax(Q Kᵀ / sqrt(d_qk) + M) V`.
pub fn softmax_attend(
    xq: &Matrix,
    xk: &Matrix,
    xv: &Matrix,
    w: &HeadWeights,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    let (q, k, v) = project(xq, xk, xv, w)?;
    softmax_attend_projected(&q, &k, &v, mask)
}

pub fn softmax_attend_projected(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &MaskPolicy,
) -> Result<Matrix> {
    if q.cols() == 0 {
        return Err(Error::Argument("softmax attention needs d_qk >= 1".into()));
    }
    if k.rows() != v.rows() {
        return Err(shape_err(
            "softmax_attend: keys vs values",
            k.shape_str(),
            v.shape_str(),
        ));
    }
    let scaled = logits(q, k)?.scale(1.0 / (q.cols() as f64).sqrt());
    let masked = scaled.add(&mask.additive(q.rows(), k.rows())?)?;
    matmul(&linalg::row_softmax(&masked)?, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Scalar double-loop attention with an explicit allowed-set predicate.
    fn scalar_attention(
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        f: impl Fn(f64) -> f64,
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Matrix {
        let mut out = Matrix::zeros(q.rows(), v.cols());
        let mut data = out.data().to_vec();
        for i in 0..q.rows() {
            let mut weights = vec![0.0; k.rows()];
            let mut z = 0.0;
            for (j, w) in weights.iter_mut().enumerate() {
                if allowed(i, j) {
                    let mut s = 0.0;
                    for c in 0..q.cols() {
                        s += q.get(i, c) * k.get(j, c);
                    }
                    *w = f(s);
                    z += *w;
                }
            }
            for c in 0..v.cols() {
                let mut acc = 0.0;
                for (j, w) in weights.iter().enumerate() {
                    acc += w / z * v.get(j, c);
                }
                data[i * v.cols() + c] = acc;
            }
        }
        out = Matrix::new(q.rows(), v.cols(), data).unwrap();
        out
    }

    fn random_head(rng: &mut SeededRng, d_in: usize, d_qk: usize, d_v: usize) -> HeadWeights {
        HeadWeights::new(
            rng.uniform_matrix(d_in, d_qk),
            rng.uniform_matrix(d_in, d_qk),
            rng.uniform_matrix(d_in, d_v),
        )
        .unwrap()
    }

    #[test]
    fn kernel_eval_examples() {
        let k4 = Kernel::scaled_exp(4).unwrap();
        assert_eq!(kernel_eval(&k4, &[0.0; 4], &[0.0; 4]).unwrap(), 1.0);
        let v = [1.0, 1.0, 0.0, 0.0];
        let e = kernel_eval(&k4, &v, &v).unwrap();
        assert!((e - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(
            kernel_eval(&Kernel::Linear, &[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            11.0
        );
        assert!(kernel_eval(&Kernel::Linear, &[1.0], &[1.0, 2.0]).is_err());
        assert!(kernel_eval(&k4, &[1.0], &[1.0]).is_err());
        assert!(Kernel::scaled_exp(0).is_err());
    }

    #[test]
    fn single_pair_scores() {
        let q = Matrix::from_rows(&[[0.5, -1.0]]).unwrap();
        let k = Matrix::from_rows(&[[2.0, 0.25]]).unwrap();
        let a =
            attention_scores(&q, &k, &Kernel::scaled_exp(2).unwrap(), &MaskPolicy::None).unwrap();
        assert_eq!(a.shape(), (1, 1));
        assert!((a.get(0, 0) - (0.75f64 / 2f64.sqrt()).exp()).abs() < 1e-15);
    }

    #[test]
    fn causal_zero_pattern() {
        let mut rng = SeededRng::new(1);
        let q = rng.uniform_matrix(3, 2);
        let a = attention_scores(
            &q,
            &q,
            &Kernel::scaled_exp(2).unwrap(),
            &MaskPolicy::causal(),
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.get(i, j) == 0.0, j > i, "({i},{j})");
            }
        }
    }

    #[test]
    fn causal_misalignment_is_an_error() {
        let q = Matrix::zeros(3, 2);
        let k = Matrix::zeros(2, 2);
        let err = attention_scores(&q, &k, &Kernel::Linear, &MaskPolicy::causal()).unwrap_err();
        assert_eq!(
            err,
            Error::MaskAlignment {
                offset: 0,
                n_q: 3,
                n_kv: 2
            }
        );
    }

    #[test]
    fn additive_matches_multiplicative_for_exp() {
        let mut rng = SeededRng::new(2);
        let q = rng.uniform_matrix(3, 3);
        let k = rng.uniform_matrix(3, 3);
        let kern = Kernel::scaled_exp(3).unwrap();
        let l = logits(&q, &k).unwrap();
        for mask in [
            MaskPolicy::causal(),
            MaskPolicy::Explicit(vec![vec![2], vec![0, 2], vec![1]]),
            MaskPolicy::None,
        ] {
            let add = scores_additive(&l, &kern, &mask).unwrap();
            let mul = scores_multiplicative(&l, &kern, &mask).unwrap();
            assert!(add.max_abs_diff(&mul).unwrap() < 1e-12);
        }
    }

    #[test]
    fn additive_mask_rejects_linear_kernel() {
        let l = Matrix::zeros(1, 1);
        assert!(scores_additive(&l, &Kernel::Linear, &MaskPolicy::None).is_err());
    }

    #[test]
    fn explicit_mask_validation() {
        let m = MaskPolicy::Explicit(vec![vec![3]]);
        assert!(m.allowed(1, 3).is_err());
        assert!(MaskPolicy::Explicit(vec![vec![0]]).allowed(2, 3).is_err());
    }

    #[test]
    fn normalizer_examples() {
        assert_eq!(
            normalizer(&Matrix::from_rows(&[[1.0, 1.0]]).unwrap()).unwrap(),
            vec![2.0]
        );
        assert_eq!(normalizer(&Matrix::identity(3)).unwrap(), vec![1.0; 3]);
        let err = normalizer(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1, .. }));

        let mut rng = SeededRng::new(8);
        let a = rng.uniform_matrix(4, 5).map(|x| x.abs() + 0.1);
        let z = normalizer(&a).unwrap();
        for (i, zi) in z.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..5 {
                s += a.get(i, j);
            }
            assert!((zi - s).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_query_is_an_error() {
        let x = Matrix::identity(2);
        let w = HeadWeights::new(
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::identity(2),
        )
        .unwrap();
        let mask = MaskPolicy::Explicit(vec![vec![0], vec![]]);
        let err = attend(&x, &x, &x, &w, &Kernel::scaled_exp(2).unwrap(), &mask).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1, .. }));
        assert!(softmax_attend(&x, &x, &x, &w, &mask).is_err());
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = SeededRng::new(3);
        let w = random_head(&mut rng, 3, 2, 4);
        let xq = rng.uniform_matrix(5, 3);
        let xkv = rng.uniform_matrix(1, 3);
        let v = matmul(&xkv, &w.wv).unwrap();
        for kern in [
            Kernel::scaled_exp(2).unwrap(),
            Kernel::custom("softplus", |x: f64| x.exp().ln_1p()),
        ] {
            let y = attend(&xq, &xkv, &xkv, &w, &kern, &MaskPolicy::None).unwrap();
            for i in 0..5 {
                for c in 0..4 {
                    assert!((y.get(i, c) - v.get(0, c)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = SeededRng::new(4);
        let w = random_head(&mut rng, 3, 3, 2);
        let xq = rng.uniform_matrix(2, 3);
        let key_row = rng.uniform_matrix(1, 3);
        let xk = Matrix::vstack(&[key_row.clone(), key_row.clone(), key_row]).unwrap();
        let xv = rng.uniform_matrix(3, 3);
        let v = matmul(&xv, &w.wv).unwrap();
        let y = attend(
            &xq,
            &xk,
            &xv,
            &w,
            &Kernel::scaled_exp(3).unwrap(),
            &MaskPolicy::None,
        )
        .unwrap();
        for c in 0..2 {
            let mean = v.column(c).iter().sum::<f64>() / 3.0;
            for i in 0..2 {
                assert!((y.get(i, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matches_scalar_oracle_on_four_tokens() {
        let mut rng = SeededRng::new(5);
        let w = random_head(&mut rng, 5, 3, 4);
        let x = rng.uniform_matrix(4, 5);
        let kern = Kernel::scaled_exp(3).unwrap();
        let y = attend(&x, &x, &x, &w, &kern, &MaskPolicy::None).unwrap();
        let (q, k, v) = project(&x, &x, &x, &w).unwrap();
        let oracle = scalar_attention(&q, &k, &v, |s| (s / 3f64.sqrt()).exp(), |_, _| true);
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-10);

        let y = attend(&x, &x, &x, &w, &kern, &MaskPolicy::causal()).unwrap();
        let oracle = scalar_attention(&q, &k, &v, |s| (s / 3f64.sqrt()).exp(), |i, j| j <= i);
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-10);
    }

    #[test]
    fn linear_kernel_matches_scalar_oracle() {
        // positive entries keep every normalizer positive
        let mut rng = SeededRng::new(6);
        let pos = |m: Matrix| m.map(|x| x.abs() + 0.05);
        let w = HeadWeights::new(
            pos(rng.uniform_matrix(3, 2)),
            pos(rng.uniform_matrix(3, 2)),
            rng.uniform_matrix(3, 2),
        )
        .unwrap();
        let x = pos(rng.uniform_matrix(3, 3));
        let y = attend(&x, &x, &x, &w, &Kernel::Linear, &MaskPolicy::causal()).unwrap();
        let (q, k, v) = project(&x, &x, &x, &w).unwrap();
        let oracle = scalar_attention(&q, &k, &v, |s| s, |i, j| j <= i);
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_route_agrees() {
        let mut rng = SeededRng::new(7);
        let w = random_head(&mut rng, 6, 4, 3);
        let x = rng.uniform_matrix(4, 6);
        let kern = Kernel::scaled_exp(4).unwrap();
        let a = attend(&x, &x, &x, &w, &kern, &MaskPolicy::None).unwrap();
        let b = softmax_attend(&x, &x, &x, &w, &MaskPolicy::None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn equal_logits_give_uniform_weights() {
        // q orthogonal to both key rows: all logits equal
        let q = Matrix::from_rows(&[[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]).unwrap();
        let k = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let v = Matrix::from_rows(&[[2.0], [4.0]]).unwrap();
        let y = softmax_attend_projected(&q, &k, &v, &MaskPolicy::None).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_is_shift_invariant_per_row() {
        // adding a constant vector c to every key row shifts logit row i by <q_i, c>
        let mut rng = SeededRng::new(12);
        let q = rng.uniform_matrix(3, 4);
        let k = rng.uniform_matrix(5, 4);
        let v = rng.uniform_matrix(5, 2);
        let c = rng.uniform_vec(4);
        let shifted = k.add_row_vector(&c).unwrap();
        let l = logits(&q, &k).unwrap();
        let l2 = logits(&q, &shifted).unwrap();
        for i in 0..3 {
            let d0 = l2.get(i, 0) - l.get(i, 0);
            for j in 1..5 {
                assert!((l2.get(i, j) - l.get(i, j) - d0).abs() < 1e-12);
            }
        }
        let y = softmax_attend_projected(&q, &k, &v, &MaskPolicy::None).unwrap();
        let y2 = softmax_attend_projected(&q, &shifted, &v, &MaskPolicy::None).unwrap();
        assert!(y.max_abs_diff(&y2).unwrap() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn weights_are_row_stochastic(seed in any::<u64>(), n in 1usize..10, d in 1usize..8, causal in any::<bool>()) {
                let mut rng = SeededRng::new(seed);
                let w = random_head(&mut rng, d, d, d);
                let x = rng.uniform_matrix(n, d);
                let mask = if causal { MaskPolicy::causal() } else { MaskPolicy::None };
                let t = attend_traced(&x, &x, &x, &w, &Kernel::scaled_exp(d).unwrap(), &mask).unwrap();
                for i in 0..n {
                    let row = t.weights.row(i);
                    prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn causal_rows_ignore_appended_tokens(seed in any::<u64>(), n in 1usize..10, extra in 1usize..5) {
                let mut rng = SeededRng::new(seed);
                let w = random_head(&mut rng, 4, 3, 2);
                let x = rng.uniform_matrix(n + extra, 4);
                let prefix = x.slice_rows(0, n);
                let kern = Kernel::scaled_exp(3).unwrap();
                let short = attend(&prefix, &prefix, &prefix, &w, &kern, &MaskPolicy::causal()).unwrap();
                let long = attend(&x, &x, &x, &w, &kern, &MaskPolicy::causal()).unwrap();
                prop_assert!(short.max_abs_diff(&long.slice_rows(0, n)).unwrap() < 1e-10);
            }

            #[test]
            fn permutation_equivariance(seed in any::<u64>(), n in 2usize..8) {
                let mut rng = SeededRng::new(seed);
                let w = random_head(&mut rng, 3, 3, 2);
                let xq = rng.uniform_matrix(n, 3);
                let xkv = rng.uniform_matrix(n, 3);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.rotate_left(1);
                perm.swap(0, n - 1);
                let kern = Kernel::scaled_exp(3).unwrap();
                let base = attend(&xq, &xkv, &xkv, &w, &kern, &MaskPolicy::None).unwrap();
                let kv_perm = xkv.select_rows(&perm);
                let same = attend(&xq, &kv_perm, &kv_perm, &w, &kern, &MaskPolicy::None).unwrap();
                prop_assert!(base.max_abs_diff(&same).unwrap() < 1e-12);
                let q_perm = attend(&xq.select_rows(&perm), &xkv, &xkv, &w, &kern, &MaskPolicy::None).unwrap();
                prop_assert!(q_perm.max_abs_diff(&base.select_rows(&perm)).unwrap() < 1e-12);
            }

            #[test]
            fn attend_equals_softmax_attend(seed in any::<u64>(), nq in 1usize..10, nkv in 1usize..10, d in 1usize..10) {
                let mut rng = SeededRng::new(seed);
                let w = random_head(&mut rng, d, d, d);
                let xq = rng.uniform_matrix(nq, d);
                let xkv = rng.uniform_matrix(nkv, d);
                let a = attend(&xq, &xkv, &xkv, &w, &Kernel::scaled_exp(d).unwrap(), &MaskPolicy::None).unwrap();
                let b = softmax_attend(&xq, &xkv, &xkv, &w, &MaskPolicy::None).unwrap();
                prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
            }
        }
    }
}
