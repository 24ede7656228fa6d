//! Training configuration, the optimisation loop and checkpoints. Run
//! directories, evaluation and the ablation harness live in [`run`].

pub mod optim;
pub mod run;

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoders::{EncoderError, Encoders, PIXEL_GRID, DEFAULT_ENCODER_SEED};
use crate::image::ImageError;
use crate::instruct::{InstructError, InstructionSample, MixerConfig, RejectionMode};
use crate::kernel::{Graph, KernelError, Tensor};
use crate::loss::{response_targets, seg_loss, text_loss, total_loss, Anchor, LossConfig, LossError, SupervisionTriple};
use crate::model::{AgModel, Dialogue, ImageFeatures, ModelConfig, ModelError};
use crate::params::{Checkpoint, ParamError, ParamStore};
use crate::seed;
use crate::synth::{DatasetSpec, SynthError, SynthSample};
use crate::vocab::{VocabError, Vocabulary};

pub use optim::{lr_at, AdamConfig, AdamW};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("frozen encoder outputs changed by iteration {0}")]
    EncoderDrift(u64),
    #[error("corpus record {0}")]
    Corpus(String),
    #[error("checkpoint belongs to config {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Instruct(#[from] InstructError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("metrics: {0}")]
    Metric(String),
    #[error("config file: {0}")]
    Toml(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Freeze the language model's transformer blocks and train only their
    /// low-rank adapters (plus every non-LM module).
    pub adapter_only: bool,
    /// Model initialisation and training-stream seed.
    pub seed: u64,
    pub encoder_seed: u64,
    pub max_new_tokens: usize,
    pub rejection: RejectionMode,
    pub loss: LossConfig,
    pub mixer: MixerConfig,
    pub data: DatasetSpec,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_iters: 100,
            total_iters: 2000,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            adapter_only: false,
            seed: 1,
            encoder_seed: DEFAULT_ENCODER_SEED,
            max_new_tokens: 32,
            rejection: RejectionMode::Both,
            loss: LossConfig::default(),
            mixer: MixerConfig::default(),
            data: DatasetSpec::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.warmup_iters > self.total_iters {
            return bad("warmup_iters exceeds total_iters");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.adapter_only && self.model.adapter_rank.is_none() {
            return bad("adapter_only needs model.adapter_rank");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("optimizer moments out of range");
        }
        if self.data.seen.is_empty() {
            return bad("no seen categories");
        }
        self.loss.validate()?;
        self.mixer.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn to_toml(&self) -> Result<String, TrainError> {
        toml::to_string(self).map_err(|e| TrainError::Toml(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// First 12 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String, TrainError> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }
}

/// Loss breakdown of one optimisation step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub iteration: u64,
    pub lr: f64,
    pub text: f64,
    pub seg: f64,
    pub total: f64,
}

/// Training images with their frozen features and downsampled supervision.
pub struct TrainSet {
    pub samples: Vec<SynthSample>,
    pub features: Vec<ImageFeatures>,
    pub triples: Vec<SupervisionTriple>,
}

impl TrainSet {
    pub fn new(samples: Vec<SynthSample>, enc: &Encoders) -> Result<Self, TrainError> {
        let features = samples
            .iter()
            .map(|s| ImageFeatures::encode(enc, &s.image))
            .collect::<Result<Vec<_>, _>>()?;
        let triples = samples
            .iter()
            .map(|s| SupervisionTriple::from_mask(&s.mask, PIXEL_GRID))
            .collect();
        Ok(Self {
            samples,
            features,
            triples,
        })
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }
}

fn feature_digest<'a>(feats: impl IntoIterator<Item = &'a ImageFeatures>) -> Vec<u8> {
    let mut h = Sha256::new();
    for f in feats {
        for v in f.semantic.data().iter().chain(f.pixel.data()) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().to_vec()
}

const PROBE_IMAGES: usize = 8;
const DRIFT_CHECK_EVERY: u64 = 100;

/// Heads to supervise for `sample` under the model's layout. When the task
/// names only heads the variant removed, the surviving heads take the mask.
pub fn supervised_heads(model: &AgModel, sample: &InstructionSample) -> Vec<Anchor> {
    let wanted = sample.supervised_anchors();
    if wanted.is_empty() {
        return Vec::new();
    }
    let layout = model.cfg.variant.layout();
    let available = |a: &Anchor| match a {
        Anchor::Seg => layout.absolute,
        Anchor::Nor | Anchor::Ano => layout.relative,
    };
    let kept: Vec<Anchor> = wanted.iter().copied().filter(available).collect();
    if kept.is_empty() {
        Anchor::ALL.into_iter().filter(available).collect()
    } else {
        kept
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: AgModel,
    pub store: ParamStore,
    pub opt: AdamW,
    pub encoders: Encoders,
    pub set: TrainSet,
    /// Training stream: pool index and composed sample, consumed in order.
    pub schedule: Vec<(usize, InstructionSample)>,
    pub iteration: u64,
    probe_digest: Vec<u8>,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        vocab: Vocabulary,
        set: TrainSet,
        encoders: Encoders,
        schedule: Vec<(usize, InstructionSample)>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if schedule.is_empty() {
            return Err(TrainError::Config("empty training schedule".into()));
        }
        if let Some((i, _)) = schedule.iter().find(|(i, _)| *i >= set.samples.len()) {
            return Err(TrainError::Corpus(format!("pool index {i} out of range")));
        }
        let mut store = ParamStore::new();
        let mut rng = seed::rng(cfg.seed, &[0x1417]);
        let model = AgModel::new(&mut store, &mut rng, cfg.model, vocab)?;
        if cfg.adapter_only {
            store.set_trainable(|name| !name.starts_with("lm.block") || name.contains("lora_"));
        }
        let opt = AdamW::new(cfg.adam(), &store);
        let probe_digest = feature_digest(set.features.iter().take(PROBE_IMAGES));
        Ok(Self {
            cfg,
            model,
            store,
            opt,
            encoders,
            set,
            schedule,
            iteration: 0,
            probe_digest,
        })
    }

    /// The next `batch_size` entries of the schedule, wrapping around.
    pub fn next_batch(&self) -> Vec<(usize, InstructionSample)> {
        let b = self.cfg.batch_size;
        let n = self.schedule.len();
        let start = (self.iteration as usize * b) % n;
        (0..b).map(|k| self.schedule[(start + k) % n].clone()).collect()
    }

    /// Averaged losses and parameter gradients of `batch` at the current
    /// parameters.
    pub fn batch_gradients(
        &self,
        batch: &[(usize, InstructionSample)],
    ) -> Result<((f64, f64, f64), Vec<Option<Tensor>>), TrainError> {
        let scale = 1.0 / batch.len() as f64;
        let mut acc: Vec<Option<Tensor>> = vec![None; self.store.len()];
        let (mut lt, mut ls, mut l) = (0.0, 0.0, 0.0);
        for (i, sample) in batch {
            let dialogue = Dialogue::new(&self.model.vocab, &sample.instruction, &sample.response);
            let heads = supervised_heads(&self.model, sample);
            let mut g = Graph::new();
            let out = self
                .model
                .forward(&mut g, &self.store, &self.set.features[*i], &dialogue.ids, !heads.is_empty())
                .map_err(|e| match e {
                    ModelError::Lm(inner) => TrainError::Corpus(format!("{}: {inner}", sample.image_id)),
                    other => other.into(),
                })?;
            let targets = response_targets(&dialogue.ids, dialogue.supervised(), dialogue.ids.len() + 1);
            let text = text_loss(&mut g, out.logits, &targets)?;
            let seg = match &out.heads {
                Some(maps) => Some(seg_loss(&mut g, maps, &self.set.triples[*i], &heads, &self.cfg.loss)?.total),
                None => None,
            };
            let total = total_loss(&mut g, text, seg)?;
            lt += g.value(text).item() * scale;
            ls += seg.map_or(0.0, |s| g.value(s).item()) * scale;
            l += g.value(total).item() * scale;
            let scaled = g.scale(total, scale);
            let grads = g.backward(scaled)?;
            for (id, gr) in grads.params() {
                match &mut acc[id.0] {
                    Some(a) => {
                        for (x, y) in a.data_mut().iter_mut().zip(gr.data()) {
                            *x += y;
                        }
                    }
                    slot => *slot = Some(gr.clone()),
                }
            }
        }
        Ok(((lt, ls, l), acc))
    }

    /// Forward, backward and one optimiser step over `batch`.
    pub fn train_step(&mut self, batch: &[(usize, InstructionSample)]) -> Result<StepLoss, TrainError> {
        let ((text, seg, total), grads) = self.batch_gradients(batch)?;
        if !total.is_finite() {
            return Err(TrainError::NonFinite("loss"));
        }
        self.iteration += 1;
        let lr = lr_at(self.iteration, &self.cfg);
        self.opt.update(&mut self.store, &grads, lr)?;
        if self.iteration % DRIFT_CHECK_EVERY == 0 {
            self.check_encoders()?;
        }
        Ok(StepLoss {
            iteration: self.iteration,
            lr,
            text,
            seg,
            total,
        })
    }

    pub fn step(&mut self) -> Result<StepLoss, TrainError> {
        let batch = self.next_batch();
        self.train_step(&batch)
    }

    /// Runs until `total_iters`, reporting every step to `log`.
    pub fn train(&mut self, mut log: impl FnMut(&StepLoss)) -> Result<Vec<StepLoss>, TrainError> {
        let mut out = Vec::new();
        while self.iteration < self.cfg.total_iters {
            let s = self.step()?;
            log(&s);
            out.push(s);
        }
        Ok(out)
    }

    /// Re-encodes the probe images and compares with the cached features.
    pub fn check_encoders(&self) -> Result<(), TrainError> {
        let fresh = self
            .set
            .samples
            .iter()
            .take(PROBE_IMAGES)
            .map(|s| ImageFeatures::encode(&self.encoders, &s.image))
            .collect::<Result<Vec<_>, _>>()?;
        if feature_digest(&fresh) != self.probe_digest
            || feature_digest(self.set.features.iter().take(PROBE_IMAGES)) != self.probe_digest
        {
            return Err(TrainError::EncoderDrift(self.iteration));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, TrainError> {
        Ok(Checkpoint {
            iteration: self.iteration,
            config_hash: self.cfg.hash()?,
            params: self.store.clone(),
            moments: Some(self.opt.moments.clone()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.checkpoint()?.write_to(&mut w)?;
        Ok(())
    }

    /// Restores parameters, moments and the iteration counter.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        let expected = self.cfg.hash()?;
        if ckpt.config_hash != expected {
            return Err(TrainError::ConfigMismatch {
                expected,
                found: ckpt.config_hash.clone(),
            });
        }
        ckpt.restore_into(&mut self.store)?;
        if let Some(m) = &ckpt.moments {
            self.opt.moments = m.clone();
        }
        self.opt.step = ckpt.iteration;
        self.iteration = ckpt.iteration;
        Ok(())
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    Ok(Checkpoint::read_from(&mut r)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruct::{compose_sample, corpus_vocabulary, TaskType, TemplateLibrary, DEFAULT_INSTRUCTION};
    use crate::model::Variant;
    use crate::synth::{generate_sample, Category, Split};

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig {
            total_iters: 200,
            warmup_iters: 10,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        cfg.model.lm.dim = 16;
        cfg.model.lm.mlp_hidden = 32;
        cfg.model.lm.layers = 1;
        cfg.model.decoder.layers = 1;
        cfg.model.decoder.mlp_hidden = 32;
        cfg
    }

    fn tiny_trainer(cfg: TrainConfig, tasks: &[TaskType]) -> Trainer {
        let lib = TemplateLibrary::builtin();
        let samples: Vec<SynthSample> = (0..4).map(|i| generate_sample(Category::Stripes, Split::Seen, i, 5)).collect();
        let enc = Encoders::new(cfg.encoder_seed, 64);
        let set = TrainSet::new(samples, &enc).unwrap();
        let mut rng = seed::rng(3, &[]);
        let schedule = (0..8)
            .map(|k| {
                let i = 2 * (k % 2) + 1;
                let task = tasks[k % tasks.len()];
                (i, compose_sample(&lib, &set.samples[i], task, &mut rng).unwrap())
            })
            .collect();
        Trainer::new(cfg, corpus_vocabulary(&lib), set, enc, schedule).unwrap()
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.hash().unwrap().len(), 12);
        let mut other = cfg.clone();
        other.seed = 2;
        assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
        let partial = TrainConfig::from_toml("lr = 0.001\ntotal_iters = 500\n").unwrap();
        assert_eq!(partial.batch_size, 8);
        assert!(TrainConfig::from_toml("warmup_iters = 300\ntotal_iters = 200\n").is_err());
        assert!(TrainConfig::from_toml("lr = 0.0\n").is_err());
        assert!(TrainConfig::from_toml("adapter_only = true\n").is_err());
    }

    #[test]
    fn loss_decreases_on_a_tiny_corpus() {
        let mut t = tiny_trainer(tiny_cfg(), &[TaskType::Direct, TaskType::GeneralSeg]);
        let hist = t.train(|_| {}).unwrap();
        let first: f64 = hist[..20].iter().map(|s| s.total).sum::<f64>() / 20.0;
        let last: f64 = hist[180..].iter().map(|s| s.total).sum::<f64>() / 20.0;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn vqa_batch_has_no_segmentation_loss() {
        let mut t = tiny_trainer(tiny_cfg(), &[TaskType::Vqa]);
        let s = t.step().unwrap();
        assert_eq!(s.seg, 0.0);
        assert!(s.text > 0.0);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let mut cfg = tiny_cfg();
        cfg.total_iters = 6;
        cfg.warmup_iters = 1;
        let run = || {
            let mut t = tiny_trainer(cfg.clone(), &[TaskType::Direct, TaskType::Vqa]);
            t.train(|_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn adapter_only_training_moves_adapters_not_blocks() {
        let mut cfg = tiny_cfg();
        cfg.total_iters = 40;
        cfg.adapter_only = true;
        cfg.model.adapter_rank = Some(2);
        let mut t = tiny_trainer(cfg, &[TaskType::Direct]);
        let block = t.store.id("lm.block0.attn.q.weight").unwrap();
        let before = t.store.value(block).clone();
        let hist = t.train(|_| {}).unwrap();
        assert_eq!(t.store.value(block), &before);
        assert!(hist.last().unwrap().total < hist[0].total);
    }

    #[test]
    fn checkpoint_reload_is_bit_exact() {
        let mut cfg = tiny_cfg();
        cfg.total_iters = 3;
        cfg.warmup_iters = 1;
        cfg.model.variant = Variant::NoSpam;
        let mut t = tiny_trainer(cfg.clone(), &[TaskType::Direct]);
        t.train(|_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        t.save(&path).unwrap();
        let mut fresh = tiny_trainer(cfg, &[TaskType::Direct]);
        fresh.restore(&read_checkpoint(&path).unwrap()).unwrap();
        let feats = &t.set.features[1];
        let a = t.model.respond(&t.store, feats, DEFAULT_INSTRUCTION, 10, 0.5).unwrap();
        let b = fresh.model.respond(&fresh.store, feats, DEFAULT_INSTRUCTION, 10, 0.5).unwrap();
        assert_eq!(a.ids, b.ids);
        let (pa, pb) = (a.maps.map(|m| m.prob), b.maps.map(|m| m.prob));
        assert_eq!(pa, pb);
        assert_eq!(fresh.iteration, 3);
        assert_eq!(t.batch_gradients(&t.next_batch()).unwrap().0, fresh.batch_gradients(&fresh.next_batch()).unwrap().0);
    }
}
