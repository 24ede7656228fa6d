//! Run directories and the end-to-end commands built on the trainer.
//!
//! A run lives in `run-<config hash>/` and holds `config.toml`,
//! `vocab.txt`, `data/` (images, masks, manifest), `corpus.jsonl`,
//! `train_log.tsv`, `checkpoint.bin` and `eval/`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{read_checkpoint, StepLoss, TrainConfig, TrainError, TrainSet, Trainer};
use crate::encoders::Encoders;
use crate::image::{write_pgm, Image, Mask};
use crate::instruct::{build_corpus, corpus_vocabulary, export_corpus, CorpusRecord};
use crate::instruct::{InstructionSample, MixerConfig, TemplateLibrary, DEFAULT_INSTRUCTION};
use crate::metrics::{evaluate_dataset, EvalRecord, MetricRow, MetricsReport};
use crate::model::{AgModel, ImageFeatures, Response, Variant};
use crate::params::ParamStore;
use crate::seed;
use crate::synth::{read_manifest, write_dataset};
use crate::synth::{generate_dataset, Split, SynthSample, IMAGE_SIZE};
use crate::vocab::Vocabulary;

pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const DATA_DIR: &str = "data";
pub const EVAL_DIR: &str = "eval";

pub fn run_dir(out: &Path, cfg: &TrainConfig) -> Result<PathBuf, TrainError> {
    Ok(out.join(format!("run-{}", cfg.hash()?)))
}

/// The training corpus over the seen pool: exactly the stream the trainer
/// consumes, `total_iters * batch_size` records.
pub fn training_corpus(cfg: &TrainConfig, seen: &[SynthSample]) -> Result<Vec<CorpusRecord>, TrainError> {
    let lib = TemplateLibrary::builtin();
    let mixer = MixerConfig {
        seed: seed::derive(cfg.mixer.seed, &[cfg.seed]),
        ..cfg.mixer
    };
    let n = (cfg.total_iters as usize * cfg.batch_size).max(1);
    Ok(build_corpus(&lib, seen, n, &mixer, cfg.rejection)?)
}

/// Maps corpus records back to pool indices.
pub fn schedule_from_corpus(
    set: &TrainSet,
    records: &[CorpusRecord],
) -> Result<Vec<(usize, InstructionSample)>, TrainError> {
    records
        .iter()
        .map(|r| {
            let id = r
                .image
                .strip_prefix("images/")
                .and_then(|s| s.strip_suffix(".pgm"))
                .ok_or_else(|| TrainError::Corpus(format!("bad image path {}", r.image)))?;
            let i = set
                .position(id)
                .ok_or_else(|| TrainError::Corpus(format!("image {id} not in the training pool")))?;
            Ok((
                i,
                InstructionSample {
                    image_id: id.to_owned(),
                    instruction: r.instruction.clone(),
                    response: r.response.clone(),
                    task: r.task,
                    has_mask: r.mask.is_some(),
                },
            ))
        })
        .collect()
}

/// One image to evaluate.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub category: String,
    pub image: Image,
    pub gt: Mask,
}

impl EvalItem {
    pub fn from_sample(s: &SynthSample) -> Self {
        Self {
            id: s.id.clone(),
            category: s.category.name().to_owned(),
            image: s.image.clone(),
            gt: s.mask.clone(),
        }
    }
}

/// Items of a dataset directory's manifest, optionally restricted to one
/// split.
pub fn load_eval_items(root: &Path, split: Option<Split>) -> Result<Vec<EvalItem>, TrainError> {
    let records = read_manifest(&root.join("manifest.tsv"))?;
    records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| {
            let (image, gt) = r.load(root)?;
            image.ensure_square(IMAGE_SIZE)?;
            Ok(EvalItem {
                id: r.id.clone(),
                category: r.category.name().to_owned(),
                image,
                gt,
            })
        })
        .collect()
}

/// A trained model ready for inference.
pub struct LoadedModel {
    pub cfg: TrainConfig,
    pub model: AgModel,
    pub store: ParamStore,
    pub encoders: Encoders,
}

impl LoadedModel {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            cfg: t.cfg.clone(),
            model: t.model.clone(),
            store: t.store.clone(),
            encoders: t.encoders.clone(),
        }
    }

    /// Rebuilds the model from `config.toml`, `vocab.txt` and
    /// `checkpoint.bin` in `dir`.
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let cfg = TrainConfig::load(&dir.join(CONFIG_FILE))?;
        let vocab = Vocabulary::read(&dir.join(VOCAB_FILE))?;
        let ckpt = read_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        let expected = cfg.hash()?;
        if ckpt.config_hash != expected {
            return Err(TrainError::ConfigMismatch {
                expected,
                found: ckpt.config_hash,
            });
        }
        let mut store = ParamStore::new();
        let mut rng = seed::rng(cfg.seed, &[0x1417]);
        let model = AgModel::new(&mut store, &mut rng, cfg.model, vocab)?;
        ckpt.restore_into(&mut store)?;
        let encoders = Encoders::new(cfg.encoder_seed, IMAGE_SIZE);
        Ok(Self {
            cfg,
            model,
            store,
            encoders,
        })
    }

    pub fn respond(&self, image: &Image, instruction: &str) -> Result<Response, TrainError> {
        image.ensure_square(IMAGE_SIZE)?;
        let feats = ImageFeatures::encode(&self.encoders, image)?;
        Ok(self
            .model
            .respond(&self.store, &feats, instruction, self.cfg.max_new_tokens, self.cfg.loss.alpha)?)
    }
}

fn prob_bytes(prob: &[f64]) -> Vec<u8> {
    prob.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes `<stem>.pgm` (8-bit) and `<stem>.f64` (raw little-endian).
pub fn write_prob_map(dir: &Path, stem: &str, prob: &[f64], size: usize) -> Result<(), TrainError> {
    write_pgm(&dir.join(format!("{stem}.pgm")), size, size, &prob_bytes(prob))?;
    let raw: Vec<u8> = prob.iter().flat_map(|p| p.to_le_bytes()).collect();
    fs::write(dir.join(format!("{stem}.f64")), raw)?;
    Ok(())
}

pub fn read_prob_sidecar(path: &Path) -> Result<Vec<f64>, TrainError> {
    let raw = fs::read(path)?;
    if raw.len() % 8 != 0 {
        return Err(TrainError::Corpus(format!("{} is not a float64 array", path.display())));
    }
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub images: usize,
    /// Responses to the segmentation instruction that lack the anchor triple.
    pub missing_anchors: usize,
}

/// Segments every item with the default instruction and writes the report,
/// per-image masks, probability maps and transcripts under `out`.
pub fn run_eval(loaded: &LoadedModel, items: &[EvalItem], out: &Path) -> Result<EvalOutcome, TrainError> {
    fs::create_dir_all(out.join("masks"))?;
    fs::create_dir_all(out.join("probs"))?;
    let mut records = Vec::with_capacity(items.len());
    let mut transcript = String::from("id\tanchors\tresponse\n");
    let mut missing = 0;
    for item in items {
        let resp = loaded.respond(&item.image, DEFAULT_INSTRUCTION)?;
        if resp.anchors_missing() {
            missing += 1;
        }
        let mask = resp.mask(IMAGE_SIZE);
        let prob = resp
            .maps
            .as_ref()
            .map_or_else(|| vec![0.0; IMAGE_SIZE * IMAGE_SIZE], |m| m.prob.clone());
        mask.write_pgm(&out.join("masks").join(format!("{}.pgm", item.id)))?;
        write_prob_map(&out.join("probs"), &item.id, &prob, IMAGE_SIZE)?;
        let flag = if resp.anchors_missing() { "missing" } else { "present" };
        writeln!(transcript, "{}\t{flag}\t{}", item.id, resp.text).expect("string write");
        records.push(EvalRecord {
            id: item.id.clone(),
            category: item.category.clone(),
            anomalous: !item.gt.is_empty(),
            prob,
            mask,
            gt: item.gt.clone(),
        });
    }
    let report = evaluate_dataset(&records).map_err(|e| TrainError::Metric(e.to_string()))?;
    fs::write(out.join("report.txt"), report.table())?;
    fs::write(out.join("report.kv"), report.key_values())?;
    fs::write(out.join("transcripts.tsv"), transcript)?;
    Ok(EvalOutcome {
        report,
        images: items.len(),
        missing_anchors: missing,
    })
}

pub struct SegmentOutcome {
    pub response: Response,
    pub mask_path: PathBuf,
    pub transcript_path: PathBuf,
}

/// Answers `instruction` on `image`, writing `<stem>.mask.pgm`,
/// `<stem>.prob.pgm`, `<stem>.prob.f64` and `<stem>.txt` under `out`.
pub fn run_segment(
    loaded: &LoadedModel,
    image: &Image,
    instruction: &str,
    out: &Path,
    stem: &str,
) -> Result<SegmentOutcome, TrainError> {
    fs::create_dir_all(out)?;
    let response = loaded.respond(image, instruction)?;
    let mask_path = out.join(format!("{stem}.mask.pgm"));
    response.mask(IMAGE_SIZE).write_pgm(&mask_path)?;
    if let Some(maps) = &response.maps {
        write_prob_map(out, &format!("{stem}.prob"), &maps.prob, IMAGE_SIZE)?;
    }
    let transcript_path = out.join(format!("{stem}.txt"));
    let flag = if response.anchors_missing() {
        "missing (empty mask)"
    } else {
        "present"
    };
    fs::write(
        &transcript_path,
        format!("USER: {instruction}\nASSISTANT: {}\nanchors: {flag}\n", response.text),
    )?;
    Ok(SegmentOutcome {
        response,
        mask_path,
        transcript_path,
    })
}

pub struct PipelineOutput {
    pub dir: PathBuf,
    pub losses: Vec<StepLoss>,
    pub eval: EvalOutcome,
    pub model: LoadedModel,
}

/// Generates data and corpus, trains, checkpoints and evaluates on the
/// unseen categories.
pub fn run_pipeline(
    cfg: &TrainConfig,
    out: &Path,
    mut progress: impl FnMut(&StepLoss),
) -> Result<PipelineOutput, TrainError> {
    cfg.validate()?;
    let dir = run_dir(out, cfg)?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;

    let samples = generate_dataset(&cfg.data);
    write_dataset(&dir.join(DATA_DIR), &samples)?;
    let (seen, unseen): (Vec<SynthSample>, Vec<SynthSample>) =
        samples.into_iter().partition(|s| s.split == Split::Seen);

    let lib = TemplateLibrary::builtin();
    let vocab = corpus_vocabulary(&lib);
    vocab.write(&dir.join(VOCAB_FILE))?;
    let corpus = training_corpus(cfg, &seen)?;
    export_corpus(&corpus, &dir.join(CORPUS_FILE))?;

    let encoders = Encoders::new(cfg.encoder_seed, IMAGE_SIZE);
    let set = TrainSet::new(seen, &encoders)?;
    let schedule = schedule_from_corpus(&set, &corpus)?;
    let mut trainer = Trainer::new(cfg.clone(), vocab, set, encoders, schedule)?;
    let mut log = BufWriter::new(fs::File::create(dir.join(TRAIN_LOG_FILE))?);
    writeln!(log, "iteration\tlr\tl_txt\tl_seg\tl")?;
    let mut io_err = None;
    let losses = trainer.train(|s| {
        if let Err(e) = writeln!(log, "{}\t{:e}\t{:.9}\t{:.9}\t{:.9}", s.iteration, s.lr, s.text, s.seg, s.total) {
            io_err.get_or_insert(e);
        }
        progress(s);
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    trainer.save(&dir.join(CHECKPOINT_FILE))?;

    let model = LoadedModel::from_trainer(&trainer);
    let items: Vec<EvalItem> = unseen.iter().map(EvalItem::from_sample).collect();
    let eval = run_eval(&model, &items, &dir.join(EVAL_DIR))?;
    Ok(PipelineOutput {
        dir,
        losses,
        eval,
        model,
    })
}

pub struct AblationEntry {
    pub variant: Variant,
    pub seed: u64,
    pub dir: PathBuf,
    pub mean: MetricRow,
    pub missing_anchors: usize,
}

pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

impl AblationReport {
    pub fn variants(&self) -> Vec<Variant> {
        let mut v: Vec<Variant> = Vec::new();
        for e in &self.entries {
            if !v.contains(&e.variant) {
                v.push(e.variant);
            }
        }
        v
    }

    /// Median over seeds of one metric of the unseen mean row.
    pub fn median(&self, variant: Variant, metric: impl Fn(&MetricRow) -> Option<f64>) -> Option<f64> {
        median(
            self.entries
                .iter()
                .filter(|e| e.variant == variant)
                .filter_map(|e| metric(&e.mean))
                .collect(),
        )
    }

    /// One row per variant with seed medians, in percent.
    pub fn table(&self) -> String {
        let seeds = self.entries.iter().filter(|e| e.variant == self.entries[0].variant).count();
        let mut s = format!(
            "{:<18} {:>7} {:>7} {:>8} {:>8}   (median of {seeds} seeds)\n",
            "Method", "AP", "F1-max", "IoU_ano", "IoU_nor"
        );
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{:.1}", 100.0 * x));
        for v in self.variants() {
            writeln!(
                s,
                "{:<18} {:>7} {:>7} {:>8} {:>8}",
                v.label(),
                pct(self.median(v, |r| r.ap)),
                pct(self.median(v, |r| r.f1_max)),
                pct(self.median(v, |r| r.iou_ano)),
                pct(self.median(v, |r| r.iou_nor)),
            )
            .expect("string write");
        }
        s
    }
}

/// Trains and evaluates every variant under every seed, then writes
/// `ablation.txt` under `out`.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    out: &Path,
    mut progress: impl FnMut(Variant, u64, &StepLoss),
) -> Result<AblationReport, TrainError> {
    let mut entries = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model.variant = variant;
            cfg.seed = seed;
            let run = run_pipeline(&cfg, out, |s| progress(variant, seed, s))?;
            entries.push(AblationEntry {
                variant,
                seed,
                dir: run.dir,
                mean: run.eval.report.mean.clone(),
                missing_anchors: run.eval.missing_anchors,
            });
        }
    }
    let report = AblationReport { entries };
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.txt"), report.table())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Category, DatasetSpec};

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig {
            total_iters: 4,
            warmup_iters: 1,
            batch_size: 2,
            data: DatasetSpec {
                seen: vec![Category::Stripes],
                unseen: vec![Category::Blobs],
                per_seen: 6,
                per_unseen: 4,
                seed: 2,
            },
            max_new_tokens: 12,
            ..TrainConfig::default()
        };
        cfg.model.lm.dim = 16;
        cfg.model.lm.mlp_hidden = 32;
        cfg.model.lm.layers = 1;
        cfg.model.decoder.layers = 1;
        cfg
    }

    #[test]
    fn pipeline_writes_a_complete_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let run = run_pipeline(&cfg, dir.path(), |_| {}).unwrap();
        assert!(run.dir.ends_with(format!("run-{}", cfg.hash().unwrap())));
        for f in [CONFIG_FILE, VOCAB_FILE, CHECKPOINT_FILE, CORPUS_FILE, TRAIN_LOG_FILE, "eval/report.txt", "eval/report.kv"] {
            assert!(run.dir.join(f).is_file(), "{f}");
        }
        assert_eq!(run.losses.len(), 4);
        assert_eq!(run.eval.images, 4);
        assert_eq!(run.eval.report.categories.len(), 1);
        assert_eq!(run.eval.report.categories[0].row, run.eval.report.mean);
        let probs = read_prob_sidecar(&run.dir.join("eval/probs/blobs_0001.f64")).unwrap();
        assert_eq!(probs.len(), IMAGE_SIZE * IMAGE_SIZE);

        let loaded = LoadedModel::load(&run.dir).unwrap();
        let items = load_eval_items(&run.dir.join(DATA_DIR), Some(Split::Unseen)).unwrap();
        let again = run_eval(&loaded, &items, &dir.path().join("again")).unwrap();
        assert_eq!(
            fs::read(run.dir.join("eval/report.kv")).unwrap(),
            fs::read(dir.path().join("again/report.kv")).unwrap()
        );
        assert_eq!(again.missing_anchors, run.eval.missing_anchors);

        let seg = run_segment(&loaded, &items[0].image, DEFAULT_INSTRUCTION, &dir.path().join("seg"), "x").unwrap();
        let text = fs::read_to_string(&seg.transcript_path).unwrap();
        assert!(text.starts_with("USER: Please segment"));
        assert!(text.contains("anchors: "));
        assert!(seg.mask_path.is_file());
    }

    #[test]
    fn median_and_table_labels() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
        let row = |x: f64| MetricRow {
            ap: Some(x),
            f1_max: Some(x),
            iou_ano: Some(x),
            iou_nor: Some(x),
        };
        let entries = Variant::ALL
            .iter()
            .enumerate()
            .map(|(k, &variant)| AblationEntry {
                variant,
                seed: 1,
                dir: PathBuf::new(),
                mean: row(k as f64 / 10.0),
                missing_anchors: 0,
            })
            .collect();
        let table = AblationReport { entries }.table();
        for v in Variant::ALL {
            assert!(table.contains(v.label()));
        }
        assert_eq!(table.lines().count(), 5);
    }
}
