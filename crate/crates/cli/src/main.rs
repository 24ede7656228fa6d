use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anchorseg::instruct::{build_corpus, export_corpus, MixerConfig, RejectionMode, TemplateLibrary, DEFAULT_INSTRUCTION};
use anchorseg::model::Variant;
use anchorseg::synth::{generate_dataset, read_dataset, write_dataset, Category, Split};
use anchorseg::train::run::{load_eval_items, run_ablation, run_eval, run_pipeline, run_segment, LoadedModel, DATA_DIR};
use anchorseg::train::{StepLoss, TrainConfig};
use anchorseg::Image;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "anchorseg", version, about = "Anchor-guided zero-shot anomaly segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset (images, masks, manifest.tsv).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compose an instruction corpus (JSONL) over a dataset's seen split.
    GenInstruct {
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        mixer_seed: Option<u64>,
        #[arg(long, value_parser = parse_rejection)]
        rejection: Option<RejectionMode>,
    },
    /// Generate data, train, checkpoint and evaluate on the unseen split.
    Train {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a run's checkpoint on a dataset with the default instruction.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory; defaults to the run's own data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Unseen)]
        split: SplitArg,
        /// Output directory; defaults to `<run>/eval-<split>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer one instruction on one image and export mask and transcript.
    Segment {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = DEFAULT_INSTRUCTION)]
        instruction: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// File stem for outputs; defaults to the image's stem.
        #[arg(long)]
        stem: Option<String>,
    },
    /// Train and evaluate each variant under each seed; print the comparison.
    Ablate {
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Vec<Variant>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Seen,
    Unseen,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Seen => Some(Split::Seen),
            SplitArg::Unseen => Some(Split::Unseen),
            SplitArg::All => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Seen => "seen",
            SplitArg::Unseen => "unseen",
            SplitArg::All => "all",
        }
    }
}

/// Config file plus per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_iters: Option<u64>,
    #[arg(long)]
    total_iters: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    adapter_only: bool,
    #[arg(long)]
    adapter_rank: Option<usize>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Fusion weight between P_seg and P_ano.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda_bce: Option<f64>,
    #[arg(long)]
    lambda_dice: Option<f64>,
    /// Source weights: general-seg, instruct, direct, vqa.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    mixer_seed: Option<u64>,
    #[arg(long, value_parser = parse_rejection)]
    rejection: Option<RejectionMode>,
    #[arg(long, value_delimiter = ',', value_parser = parse_category)]
    seen: Option<Vec<Category>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_category)]
    unseen: Option<Vec<Category>>,
    #[arg(long)]
    per_seen: Option<usize>,
    #[arg(long)]
    per_unseen: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Write the resolved config here and exit.
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_rejection(s: &str) -> Result<RejectionMode, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_category(s: &str) -> Result<Category, String> {
    s.parse().map_err(|e| format!("{e}"))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            lr => c.lr,
            warmup_iters => c.warmup_iters,
            total_iters => c.total_iters,
            batch_size => c.batch_size,
            weight_decay => c.weight_decay,
            seed => c.seed,
            variant => c.model.variant,
            alpha => c.loss.alpha,
            lambda_bce => c.loss.lambda_bce,
            lambda_dice => c.loss.lambda_dice,
            mixer_seed => c.mixer.seed,
            rejection => c.rejection,
            seen => c.data.seen,
            unseen => c.data.unseen,
            per_seen => c.data.per_seen,
            per_unseen => c.data.per_unseen,
            data_seed => c.data.seed,
            max_new_tokens => c.max_new_tokens,
        );
        if let Some(r) = self.adapter_rank {
            c.model.adapter_rank = Some(r);
        }
        if self.adapter_only {
            c.adapter_only = true;
        }
        if let Some(w) = &self.weights {
            c.mixer.weights = [w[0], w[1], w[2], w[3]];
        }
        c.validate()?;
        if let Some(p) = &self.dump_config {
            fs::write(p, c.to_toml()?)?;
        }
        Ok(c)
    }
}

fn progress(start: Instant, total: u64) -> impl FnMut(&StepLoss) {
    move |s| {
        if s.iteration % 50 == 0 || s.iteration == total {
            eprintln!(
                "iter {:>5}/{total}  lr {:.2e}  L_txt {:.4}  L_seg {:.4}  L {:.4}  ({:.0}s)",
                s.iteration,
                s.lr,
                s.text,
                s.seg,
                s.total,
                start.elapsed().as_secs_f64()
            );
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { out, cfg } => {
            let c = cfg.resolve()?;
            if cfg.dump_config.is_some() {
                return Ok(());
            }
            let samples = generate_dataset(&c.data);
            write_dataset(&out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::GenInstruct {
            data,
            out,
            n,
            mixer_seed,
            rejection,
        } => {
            let seen: Vec<_> = read_dataset(&data)?
                .into_iter()
                .filter(|s| s.split == Split::Seen)
                .collect();
            if seen.is_empty() {
                bail!("{} has no seen samples", data.display());
            }
            let mut mixer = MixerConfig::default();
            if let Some(s) = mixer_seed {
                mixer.seed = s;
            }
            let lib = TemplateLibrary::builtin();
            let records = build_corpus(&lib, &seen, n, &mixer, rejection.unwrap_or(RejectionMode::Both))?;
            export_corpus(&records, &out)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Train { out, cfg } => {
            let c = cfg.resolve()?;
            if cfg.dump_config.is_some() {
                return Ok(());
            }
            let start = Instant::now();
            let run = run_pipeline(&c, &out, progress(start, c.total_iters))?;
            print!("{}", run.eval.report.table());
            println!(
                "responses without the anchor triple: {}/{}",
                run.eval.missing_anchors, run.eval.images
            );
            println!("run directory: {}", run.dir.display());
        }
        Command::Eval { run, data, split, out } => {
            let model = LoadedModel::load(&run).with_context(|| format!("loading {}", run.display()))?;
            let data = data.unwrap_or_else(|| run.join(DATA_DIR));
            let items = load_eval_items(&data, split.split())?;
            if items.is_empty() {
                bail!("no {} samples in {}", split.name(), data.display());
            }
            let out = out.unwrap_or_else(|| run.join(format!("eval-{}", split.name())));
            let res = run_eval(&model, &items, &out)?;
            print!("{}", res.report.table());
            println!("responses without the anchor triple: {}/{}", res.missing_anchors, res.images);
        }
        Command::Segment {
            run,
            image,
            instruction,
            out,
            stem,
        } => {
            let model = LoadedModel::load(&run).with_context(|| format!("loading {}", run.display()))?;
            let img = Image::read_pgm(&image).with_context(|| format!("reading {}", image.display()))?;
            let stem = stem.unwrap_or_else(|| file_stem(&image));
            let res = run_segment(&model, &img, &instruction, &out, &stem)?;
            println!("{}", res.response.text);
            if res.response.anchors_missing() {
                println!("(no anchor triple in the response; mask is empty)");
            }
            println!("mask: {}", res.mask_path.display());
        }
        Command::Ablate {
            out,
            seeds,
            variants,
            cfg,
        } => {
            let c = cfg.resolve()?;
            if cfg.dump_config.is_some() {
                return Ok(());
            }
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
            };
            let start = Instant::now();
            let total = c.total_iters;
            let mut log = progress(start, total);
            let report = run_ablation(&c, &variants, &seeds, &out, |v, seed, s| {
                if s.iteration == 1 {
                    eprintln!("== {v} seed {seed}");
                }
                log(s);
            })?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "segment".to_owned(), |s| s.to_string_lossy().into_owned())
}
