use anchorseg::agmd::upsample_bilinear;
use anchorseg::encoders::{Encoders, DEFAULT_ENCODER_SEED, PIXEL_GRID};
use anchorseg::instruct::{corpus_vocabulary, TemplateLibrary, DEFAULT_INSTRUCTION, DIRECT_RESPONSE};
use anchorseg::model::{AgModel, Dialogue, ImageFeatures, ModelConfig, Variant, UPSAMPLE};
use anchorseg::params::ParamStore;
use anchorseg::synth::{generate_sample, Category, Split, IMAGE_SIZE};
use anchorseg::Graph;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(variant: Variant, seed: u64) -> (AgModel, ParamStore) {
    let vocab = corpus_vocabulary(&TemplateLibrary::builtin());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        variant,
        ..ModelConfig::default()
    };
    let model = AgModel::new(&mut store, &mut rng, cfg, vocab).unwrap();
    (model, store)
}

fn features(cat: usize, index: usize, seed: u64) -> ImageFeatures {
    let s = generate_sample(Category::ALL[cat % Category::ALL.len()], Split::Seen, index, seed);
    ImageFeatures::encode(&Encoders::new(DEFAULT_ENCODER_SEED, IMAGE_SIZE), &s.image).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn full_model_maps_are_normalised(cat in 0usize..6, index in 0usize..40, seed in 0u64..1000) {
        let (model, store) = build(Variant::Full, seed);
        let feats = features(cat, index, seed);
        let d = Dialogue::new(&model.vocab, DEFAULT_INSTRUCTION, DIRECT_RESPONSE);
        let maps = model.maps_for(&store, &feats, &d, 0.5).unwrap();
        let (nor, ano, seg) = (maps.nor.unwrap(), maps.ano.unwrap(), maps.seg.unwrap());
        for i in 0..nor.len() {
            prop_assert!((nor[i] + ano[i] - 1.0).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(&seg[i]));
            prop_assert!((maps.fused[i] - 0.5 * (seg[i] + ano[i])).abs() <= 1e-12);
        }
        for (p, &m) in maps.prob.iter().zip(maps.mask.bits()) {
            prop_assert_eq!(m, *p > 0.5);
        }
    }

    #[test]
    fn without_relative_anchors_the_map_is_the_seg_head(index in 0usize..40, seed in 0u64..1000) {
        let (model, store) = build(Variant::NoRelativeAnchors, seed);
        let feats = features(2, index, seed);
        let d = Dialogue::new(&model.vocab, DEFAULT_INSTRUCTION, DIRECT_RESPONSE);
        let maps = model.maps_for(&store, &feats, &d, 0.5).unwrap();
        prop_assert!(maps.nor.is_none() && maps.ano.is_none());
        let seg = maps.seg.unwrap();
        prop_assert_eq!(&maps.fused, &seg);
        prop_assert_eq!(maps.prob, upsample_bilinear(&seg, PIXEL_GRID, UPSAMPLE));
    }
}

#[test]
fn removing_alignment_shortens_the_input_by_64_tokens() {
    let feats = features(0, 1, 3);
    let mut lens = Vec::new();
    for v in [Variant::Full, Variant::NoSpam] {
        let (model, store) = build(v, 3);
        let d = Dialogue::new(&model.vocab, DEFAULT_INSTRUCTION, DIRECT_RESPONSE);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &feats, &d.ids, false).unwrap();
        lens.push(out.prefix + d.ids.len());
    }
    assert_eq!(lens[0] - lens[1], 64);
}

#[test]
fn greedy_responses_are_deterministic_and_bounded() {
    let (model, store) = build(Variant::Full, 8);
    let feats = features(3, 5, 8);
    let a = model.respond(&store, &feats, DEFAULT_INSTRUCTION, 20, 0.5).unwrap();
    let b = model.respond(&store, &feats, DEFAULT_INSTRUCTION, 20, 0.5).unwrap();
    assert_eq!(a.ids, b.ids);
    assert!(a.ids.len() <= 20);
    if a.anchors_missing() {
        assert!(a.mask(IMAGE_SIZE).is_empty());
    }
}
