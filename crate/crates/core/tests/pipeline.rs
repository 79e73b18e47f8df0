use attnlab_core::account::{account_preset, kv_cache_bytes, ModelPreset};
use attnlab_core::attention::{attend_traced, HeadWeights, Kernel, MaskPolicy};
use attnlab_core::blocks::{
    gpt_decode_step, gpt_forward, transformer_forward, GptCache, GptModel, LayerShape,
    NormPlacement, TransformerModel,
};
use attnlab_core::io::WeightBundle;
use attnlab_core::latent::{merge_weights, MlaSpec, MlaWeights};
use attnlab_core::multihead::{MhaSpec, MhaWeights};
use attnlab_core::rng::SeededRng;
use attnlab_core::tokenizer::{embed, tokenize_words, EmbeddingTable, RopeParams, Vocabulary};
use attnlab_core::{Error, Matrix};

#[test]
fn text_to_attention_weights() {
    let vocab = Vocabulary::new(["the", "lazy", "dog", "d", "o", "g"]).unwrap();
    let ids = tokenize_words("The  lazy DOG", &vocab, vocab.max_token_chars()).unwrap();
    assert_eq!(ids, vec![0, 1, 2]);
    let table = EmbeddingTable::seeded(vocab.len(), 4, 9);
    let x = embed(&ids, &table).unwrap();
    let mut rng = SeededRng::new(1);
    let w = HeadWeights::new(
        rng.uniform_matrix(4, 4),
        rng.uniform_matrix(4, 4),
        rng.uniform_matrix(4, 3),
    )
    .unwrap();
    let t = attend_traced(
        &x,
        &x,
        &x,
        &w,
        &Kernel::scaled_exp(4).unwrap(),
        &MaskPolicy::None,
    )
    .unwrap();
    assert_eq!(t.weights.shape(), (3, 3));
    for i in 0..3 {
        let s: f64 = t.weights.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert_eq!(t.output.shape(), (3, 3));
}

#[test]
fn gpt_incremental_decode_matches_full_pass() {
    let shape = LayerShape {
        placement: NormPlacement::PreLn,
        n_kv_heads: 2,
        rope: Some(RopeParams::with_default_base(4).unwrap()),
        ..LayerShape::new(16, 4).unwrap()
    };
    let model = GptModel::random(&shape, 3, 30, &mut SeededRng::new(4)).unwrap();
    let toks = [3, 17, 0, 29, 8, 8, 1, 22, 5];
    let full = gpt_forward(&toks, &model).unwrap();
    let mut cache = GptCache::new(&model);
    let mut rows = vec![gpt_decode_step(&toks[..3], &model, &mut cache).unwrap()];
    for t in &toks[3..] {
        rows.push(gpt_decode_step(std::slice::from_ref(t), &model, &mut cache).unwrap());
    }
    assert_eq!(cache.len(), toks.len());
    assert!(Matrix::vstack(&rows).unwrap().max_abs_diff(&full).unwrap() < 1e-10);
}

#[test]
fn encoder_decoder_shapes_and_causality() {
    let shape = LayerShape::new(8, 2).unwrap();
    let model = TransformerModel::random(&shape, 2, 12, 15, &mut SeededRng::new(2)).unwrap();
    let src = [1, 4, 7, 11, 0];
    let out = transformer_forward(&src, &[2, 9, 14], &model).unwrap();
    assert_eq!(out.shape(), (3, 8));
    let longer = transformer_forward(&src, &[2, 9, 14, 3], &model).unwrap();
    assert!(longer.slice_rows(0, 3).max_abs_diff(&out).unwrap() < 1e-10);
    let other_src = transformer_forward(&[1, 4, 7, 11, 1], &[2, 9, 14], &model).unwrap();
    assert!(other_src.max_abs_diff(&out).unwrap() > 1e-9);
}

#[test]
fn bundles_survive_disk() {
    let dir = std::env::temp_dir().join(format!("attnlab-core-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = SeededRng::new(6);
    let gqa = MhaWeights::random(&MhaSpec::new(4, 2, 6, 3, 3, 6).unwrap(), &mut rng);
    let mla = MlaWeights::random(&MlaSpec::new(2, 6, 3, 2, 4, 6).unwrap(), &mut rng);
    let bundles = [
        WeightBundle::from_mha(gqa),
        WeightBundle::MlaMerged {
            weights: merge_weights(&mla).unwrap(),
            d_head: 3,
        },
        WeightBundle::Mla(mla),
    ];
    for (i, b) in bundles.iter().enumerate() {
        let path = dir.join(format!("bundle{i}.json"));
        b.save(&path).unwrap();
        assert_eq!(&WeightBundle::load(&path).unwrap(), b);
    }
    assert!(matches!(
        WeightBundle::load(&dir.join("missing.json")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn preset_accounting() {
    let llama = ModelPreset::builtin("llama3-70b").unwrap();
    assert_eq!(
        account_preset(&llama, 8192, 16).unwrap().cache_bytes_total,
        2_684_354_560
    );
    let deepseek = account_preset(&ModelPreset::builtin("deepseek-v2").unwrap(), 8192, 16).unwrap();
    assert_eq!(deepseek.cache_floats_per_layer, 4_194_304);
    assert_eq!(account_preset(&llama, 0, 16).unwrap().cache_bytes_total, 0);
    assert_eq!(kv_cache_bytes(1, 1, 1, 1, 1).unwrap(), 1);
    assert!(kv_cache_bytes(usize::MAX, 2, 2, 2, 16).is_err());
}
