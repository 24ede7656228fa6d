//! Fixtures shared by the benchmarks.

use anchorseg::encoders::{Encoders, DEFAULT_ENCODER_SEED};
use anchorseg::instruct::{corpus_vocabulary, TemplateLibrary, DEFAULT_INSTRUCTION, DIRECT_RESPONSE};
use anchorseg::model::{AgModel, Dialogue, ImageFeatures, ModelConfig};
use anchorseg::params::ParamStore;
use anchorseg::seed;
use anchorseg::synth::{generate_sample, Category, Split, IMAGE_SIZE};

pub struct ModelFixture {
    pub model: AgModel,
    pub store: ParamStore,
    pub features: ImageFeatures,
    pub dialogue: Dialogue,
    pub encoders: Encoders,
}

/// Default-sized model over one anomalous sample with the direct
/// segmentation dialogue.
pub fn model_fixture() -> ModelFixture {
    let vocab = corpus_vocabulary(&TemplateLibrary::builtin());
    let mut store = ParamStore::new();
    let mut rng = seed::rng(9, &[]);
    let model = AgModel::new(&mut store, &mut rng, ModelConfig::default(), vocab).expect("model");
    let encoders = Encoders::new(DEFAULT_ENCODER_SEED, IMAGE_SIZE);
    let sample = generate_sample(Category::Checker, Split::Seen, 1, 9);
    let features = ImageFeatures::encode(&encoders, &sample.image).expect("features");
    let dialogue = Dialogue::new(&model.vocab, DEFAULT_INSTRUCTION, DIRECT_RESPONSE);
    ModelFixture {
        model,
        store,
        features,
        dialogue,
        encoders,
    }
}
