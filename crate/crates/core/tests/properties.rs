use attnlab_core::attention::{attend, softmax_attend, HeadWeights, Kernel, MaskPolicy};
use attnlab_core::latent::{factorize_mha_to_mla, merge_weights, mla_forward};
use attnlab_core::linalg::truncated_svd;
use attnlab_core::multihead::{self_attention, MhaSpec, MhaWeights};
use attnlab_core::rng::SeededRng;
use attnlab_core::tokenizer::{apply_rope, RopeParams};
use attnlab_core::Matrix;
use proptest::prelude::*;

fn singular_values(m: &Matrix) -> Vec<f64> {
    let n = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let mut s: Vec<f64> = n.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_is_a_convex_combination(seed in any::<u64>(), n_q in 1usize..8, n_kv in 1usize..8, d in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let w = HeadWeights::new(rng.uniform_matrix(d, d), rng.uniform_matrix(d, d), rng.uniform_matrix(d, 2)).unwrap();
        let xq = rng.uniform_matrix(n_q, d);
        let xkv = rng.uniform_matrix(n_kv, d);
        let y = attend(&xq, &xkv, &xkv, &w, &Kernel::scaled_exp(d).unwrap(), &MaskPolicy::None).unwrap();
        let v = xkv.matmul(&w.wv).unwrap();
        for c in 0..2 {
            let col = v.column(c);
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            for i in 0..n_q {
                prop_assert!(y.get(i, c) >= lo - 1e-12 && y.get(i, c) <= hi + 1e-12);
            }
        }
        let s = softmax_attend(&xq, &xkv, &xkv, &w, &MaskPolicy::None).unwrap();
        prop_assert!(y.max_abs_diff(&s).unwrap() < 1e-12);
    }

    #[test]
    fn rope_keeps_norms_and_relative_dots(seed in any::<u64>(), pairs in 1usize..5, shift in 0usize..500) {
        let d = 2 * pairs;
        let p = RopeParams::with_default_base(d).unwrap();
        let mut rng = SeededRng::new(seed);
        let m = rng.uniform_matrix(3, d);
        let a = apply_rope(&m, 0, &p).unwrap();
        let b = apply_rope(&m, shift, &p).unwrap();
        for i in 0..3 {
            let n0: f64 = m.row(i).iter().map(|x| x * x).sum();
            let n1: f64 = b.row(i).iter().map(|x| x * x).sum();
            prop_assert!((n0 - n1).abs() < 1e-12);
        }
        let dot = |x: &Matrix, i: usize, j: usize| -> f64 { x.row(i).iter().zip(x.row(j)).map(|(u, v)| u * v).sum() };
        prop_assert!((dot(&a, 0, 2) - dot(&b, 0, 2)).abs() < 1e-10);
    }

    #[test]
    fn svd_matches_independent_singular_values(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..9) {
        let m = SeededRng::new(seed).uniform_matrix(rows, cols);
        let k = rows.min(cols);
        let svd = truncated_svd(&m, k).unwrap();
        let oracle = singular_values(&m);
        for (a, b) in svd.singular_values.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!(svd.reconstruct().max_abs_diff(&m).unwrap() < 1e-9);
    }

    #[test]
    fn full_latent_width_converts_exactly(seed in any::<u64>(), heads in 1usize..4, d_head in 1usize..4) {
        let d_in = 6;
        let spec = MhaSpec::mha(heads, d_in, d_head, d_in).unwrap();
        let mut rng = SeededRng::new(seed);
        let w = MhaWeights::random(&spec, &mut rng);
        let (mla, err) = factorize_mha_to_mla(&w, d_in, d_in).unwrap();
        prop_assert!(err.total() < 1e-8);
        let x = rng.uniform_matrix(5, d_in);
        let want = self_attention(&x, &w, &spec, &MaskPolicy::causal()).unwrap();
        let got = mla_forward(&x, &merge_weights(&mla).unwrap(), &mla.infer_spec().unwrap(), &MaskPolicy::causal()).unwrap();
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-8);
    }
}
