//! Instruction data: structured annotations from defect metadata, template
//! libraries, per-sample composition and the source mixer.

mod corpus;

pub use corpus::{build_corpus, corpus_vocabulary, export_corpus, import_corpus, CorpusRecord};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::Anchor;
use crate::seed;
use crate::synth::{Category, DefectMeta, DefectType, Location, SynthSample};
use crate::vocab::ANCHOR_TRIPLE;

pub const DEFAULT_INSTRUCTION: &str = "Please segment the anomalies in this image.";
pub const DIRECT_RESPONSE: &str = "Sure, it is [NOR][ANO][SEG].";
pub const REJECTION_RESPONSE: &str = "No anomalies are found in this image, so the mask is empty: [NOR][ANO][SEG].";
/// Words substituted for `{class_name}`.
pub const CLASS_NAMES: [&str; 4] = ["defects", "anomalies", "flaws", "damaged regions"];

const BUILTIN_TEMPLATES: &str = include_str!("../../templates/instruct.txt");

#[derive(Debug, Error)]
pub enum InstructError {
    #[error("no annotation for a normal sample")]
    NormalSample,
    #[error("unknown task type {0:?}")]
    UnknownTask(String),
    #[error("template library has no {0} templates")]
    NoTemplates(&'static str),
    #[error("template file line {line}: {msg}")]
    Template { line: usize, msg: String },
    #[error("mixer weights must be nonnegative and sum to 1, got {0:?}")]
    Weights([f64; 4]),
    #[error("sample pool has no {0} images")]
    EmptyPool(&'static str),
    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Five-field description of one defect.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuredAnnotation {
    pub expectation: String,
    pub observation: String,
    pub diagnosis: String,
    pub summary: String,
    pub explanation: String,
}

fn expected_look(c: Category) -> &'static str {
    match c {
        Category::Stripes => "evenly spaced parallel stripes",
        Category::Checker => "a regular grid of alternating squares",
        Category::Blobs => "smooth mottled patches without sharp marks",
        Category::Bottle => "a round bottle with a clean and even rim",
        Category::Mesh => "a uniform wire grid with regular openings",
        Category::Speckle => "fine uniform speckles across the surface",
    }
}

fn defect_reason(d: DefectType) -> &'static str {
    match d {
        DefectType::Hole => "it leaves a dark opening in the surface",
        DefectType::Scratch => "it draws a thin bright line across the pattern",
        DefectType::Spot => "it changes the intensity of a local patch",
        DefectType::CrackLine => "it splits the surface along a dark line",
        DefectType::MissingCorner => "part of the object is cut away",
    }
}

/// Concrete names for a defect, used by general segmentation prompts.
pub fn defect_entities(d: DefectType) -> [&'static str; 2] {
    match d {
        DefectType::Hole => ["hole", "dark hole"],
        DefectType::Scratch => ["scratch", "bright scratch"],
        DefectType::Spot => ["spot", "stain"],
        DefectType::CrackLine => ["crack", "dark crack"],
        DefectType::MissingCorner => ["missing corner", "cut corner"],
    }
}

/// "located on the upper part", or "located in the center".
pub fn location_clause(loc: Location) -> String {
    match loc.phrase() {
        "center" => "located in the center".to_owned(),
        p => format!("located on the {p} part"),
    }
}

pub fn expectation_sentence(c: Category) -> String {
    format!("A normal {} shows {}.", c.noun(), expected_look(c))
}

pub fn build_structured_annotation(meta: Option<&DefectMeta>) -> Result<StructuredAnnotation, InstructError> {
    let m = meta.ok_or(InstructError::NormalSample)?;
    let noun = m.category.noun();
    let defect = m.defect.phrase();
    let size = m.size.name();
    let loc = location_clause(m.location);
    let reason = defect_reason(m.defect);
    Ok(StructuredAnnotation {
        expectation: expectation_sentence(m.category),
        observation: format!("There is a {size} {defect} {loc} of the {noun}."),
        diagnosis: format!("The {defect} is a defect because {reason}."),
        summary: format!("The {noun} has a {size} {defect} {loc}, as indicated by {ANCHOR_TRIPLE}."),
        explanation: format!("The {size} {defect} {loc} is abnormal because {reason}."),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    Direct,
    DescribeThenSegment,
    DescribeThenSegmentPlus,
    SegmentThenExplain,
    Rejection,
    Vqa,
    GeneralSeg,
}

impl TaskType {
    pub const ALL: [TaskType; 7] = [
        TaskType::Direct,
        TaskType::DescribeThenSegment,
        TaskType::DescribeThenSegmentPlus,
        TaskType::SegmentThenExplain,
        TaskType::Rejection,
        TaskType::Vqa,
        TaskType::GeneralSeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::Direct => "direct",
            TaskType::DescribeThenSegment => "describe-then-segment",
            TaskType::DescribeThenSegmentPlus => "describe-then-segment-plus",
            TaskType::SegmentThenExplain => "segment-then-explain",
            TaskType::Rejection => "rejection",
            TaskType::Vqa => "vqa",
            TaskType::GeneralSeg => "general-seg",
        }
    }

    /// Anchors whose maps are supervised for this task.
    pub fn supervised_anchors(self) -> &'static [Anchor] {
        match self {
            TaskType::Vqa => &[],
            TaskType::GeneralSeg => &[Anchor::Seg],
            _ => &Anchor::ALL,
        }
    }

    pub fn is_segmentation(self) -> bool {
        self != TaskType::Vqa
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskType {
    type Err = InstructError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| InstructError::UnknownTask(s.to_owned()))
    }
}

/// Sections of the template file, in file order.
pub const SECTIONS: [&str; 9] = [
    "direct",
    "describe",
    "explain",
    "rejection",
    "general_seg",
    "vqa_presence",
    "vqa_object",
    "vqa_defect",
    "vqa_location",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateLibrary {
    sections: BTreeMap<String, Vec<String>>,
}

impl TemplateLibrary {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATES).expect("bundled templates parse")
    }

    pub fn load(path: &Path) -> Result<Self, InstructError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Lines are templates; `[name]` starts a section; blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, InstructError> {
        let mut sections: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !SECTIONS.contains(&name) {
                    return Err(InstructError::Template {
                        line: i + 1,
                        msg: format!("unknown section {name:?}"),
                    });
                }
                current = Some(name.to_owned());
                continue;
            }
            let Some(sec) = &current else {
                return Err(InstructError::Template {
                    line: i + 1,
                    msg: "template before any section".into(),
                });
            };
            sections.entry(sec.clone()).or_default().push(line.to_owned());
        }
        Ok(Self { sections })
    }

    pub fn templates(&self, section: &'static str) -> Result<&[String], InstructError> {
        match self.sections.get(section) {
            Some(t) if !t.is_empty() => Ok(t),
            _ => Err(InstructError::NoTemplates(section)),
        }
    }
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn fill_class(template: &str, rng: &mut impl Rng) -> String {
    template.replace("{class_name}", pick(rng, &CLASS_NAMES))
}

/// One instruction–response pair over a pool image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionSample {
    pub image_id: String,
    pub instruction: String,
    pub response: String,
    pub task: TaskType,
    /// Whether the image's ground-truth mask supervises the decoder.
    pub has_mask: bool,
}

impl InstructionSample {
    pub fn supervised_anchors(&self) -> &'static [Anchor] {
        if self.has_mask {
            self.task.supervised_anchors()
        } else {
            &[]
        }
    }
}

fn vqa_pair(lib: &TemplateLibrary, s: &SynthSample, rng: &mut impl Rng) -> Result<(String, String), InstructError> {
    let kinds = ["vqa_presence", "vqa_object", "vqa_defect", "vqa_location"];
    let kind = *pick(rng, &kinds);
    let question = pick(rng, lib.templates(kind)?).clone();
    let noun = s.category.noun();
    let answer = match (kind, &s.meta) {
        ("vqa_presence", Some(m)) => format!(
            "Yes, there is a {} {} {}.",
            m.size.name(),
            m.defect.phrase(),
            location_clause(m.location)
        ),
        ("vqa_presence", None) => format!("No, the {noun} looks normal."),
        ("vqa_object", _) => format!("The image shows {noun}."),
        ("vqa_defect", Some(m)) => format!("It is a {} {}.", m.size.name(), m.defect.phrase()),
        ("vqa_defect", None) => "There is no defect.".to_owned(),
        (_, Some(m)) => format!("It is {}.", location_clause(m.location)),
        (_, None) => "There is no defect to locate.".to_owned(),
    };
    Ok((question, answer))
}

/// Builds a sample of `task` over `s`. Tasks that describe a defect need an
/// anomalous sample.
pub fn compose_sample(
    lib: &TemplateLibrary,
    s: &SynthSample,
    task: TaskType,
    rng: &mut impl Rng,
) -> Result<InstructionSample, InstructError> {
    let (instruction, response) = match task {
        TaskType::Direct => (fill_class(pick(rng, lib.templates("direct")?), rng), DIRECT_RESPONSE.to_owned()),
        TaskType::DescribeThenSegment => {
            let ann = build_structured_annotation(s.meta.as_ref())?;
            (fill_class(pick(rng, lib.templates("describe")?), rng), ann.summary)
        }
        TaskType::DescribeThenSegmentPlus => {
            let ann = build_structured_annotation(s.meta.as_ref())?;
            let base = fill_class(pick(rng, lib.templates("describe")?), rng);
            (format!("{} {base}", ann.expectation), ann.summary)
        }
        TaskType::SegmentThenExplain => {
            let ann = build_structured_annotation(s.meta.as_ref())?;
            let t = fill_class(pick(rng, lib.templates("explain")?), rng);
            (t, format!("{DIRECT_RESPONSE} {}", ann.explanation))
        }
        TaskType::Rejection => (
            fill_class(pick(rng, lib.templates("rejection")?), rng),
            REJECTION_RESPONSE.to_owned(),
        ),
        TaskType::GeneralSeg => {
            let m = s.meta.as_ref().ok_or(InstructError::NormalSample)?;
            let entity = *pick(rng, &defect_entities(m.defect));
            let t = pick(rng, lib.templates("general_seg")?).replace("{entity}", entity);
            (t, DIRECT_RESPONSE.to_owned())
        }
        TaskType::Vqa => vqa_pair(lib, s, rng)?,
    };
    Ok(InstructionSample {
        image_id: s.id.clone(),
        instruction,
        response,
        task,
        has_mask: task.is_segmentation(),
    })
}

/// Data sources in mixer order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    GeneralSeg,
    Instruct,
    Direct,
    Vqa,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::GeneralSeg, Source::Instruct, Source::Direct, Source::Vqa];

    pub fn name(self) -> &'static str {
        match self {
            Source::GeneralSeg => "general-seg",
            Source::Instruct => "instruct",
            Source::Direct => "direct",
            Source::Vqa => "vqa",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    /// General segmentation, instruction, direct segmentation, VQA.
    pub weights: [f64; 4],
    pub seed: u64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            weights: [0.4, 0.25, 0.25, 0.1],
            seed: 17,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<(), InstructError> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(InstructError::Weights(self.weights));
        }
        Ok(())
    }

    pub fn sampler(&self) -> Result<WeightedIndex<f64>, InstructError> {
        self.validate()?;
        WeightedIndex::new(self.weights).map_err(|_| InstructError::Weights(self.weights))
    }
}

/// `n` i.i.d. source draws from the mixer's seeded stream.
pub fn mix_batches(cfg: &MixerConfig, n: usize) -> Result<Vec<Source>, InstructError> {
    let dist = cfg.sampler()?;
    let mut rng = seed::rng(cfg.seed, &[0x313]);
    Ok((0..n).map(|_| Source::ALL[dist.sample(&mut rng)]).collect())
}

/// Where defect-free images under segmentation prompts come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionMode {
    /// Normal images only under direct segmentation prompts.
    DirectOnly,
    /// Normal images only under the dedicated rejection templates.
    Dedicated,
    Both,
}

impl FromStr for RejectionMode {
    type Err = InstructError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct-only" => Ok(Self::DirectOnly),
            "dedicated" => Ok(Self::Dedicated),
            "both" => Ok(Self::Both),
            _ => Err(InstructError::UnknownTask(s.to_owned())),
        }
    }
}

/// Pool indices split by normal and anomalous.
#[derive(Clone, Debug)]
pub struct PoolIndex {
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

impl PoolIndex {
    pub fn new(pool: &[SynthSample]) -> Result<Self, InstructError> {
        let (anomalous, normal): (Vec<usize>, Vec<usize>) = (0..pool.len()).partition(|&i| pool[i].is_anomalous());
        if anomalous.is_empty() {
            return Err(InstructError::EmptyPool("anomalous"));
        }
        Ok(Self { normal, anomalous })
    }
}

/// Picks an image suited to `source` and composes a sample over it.
/// Returns the pool index with the sample.
pub fn draw_sample(
    lib: &TemplateLibrary,
    pool: &[SynthSample],
    index: &PoolIndex,
    source: Source,
    mode: RejectionMode,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, InstructionSample), InstructError> {
    let any = |rng: &mut ChaCha8Rng| rng.random_range(0..pool.len());
    let anomalous = |rng: &mut ChaCha8Rng| *pick(rng, &index.anomalous);
    let normals_ok = !index.normal.is_empty();
    let (i, task) = match source {
        Source::GeneralSeg => (anomalous(rng), TaskType::GeneralSeg),
        Source::Vqa => (any(rng), TaskType::Vqa),
        Source::Direct => {
            let i = if mode == RejectionMode::Dedicated || !normals_ok {
                anomalous(rng)
            } else {
                any(rng)
            };
            (i, TaskType::Direct)
        }
        Source::Instruct => {
            let i = if mode == RejectionMode::DirectOnly || !normals_ok {
                anomalous(rng)
            } else {
                any(rng)
            };
            let task = if pool[i].is_anomalous() {
                *pick(
                    rng,
                    &[
                        TaskType::DescribeThenSegment,
                        TaskType::DescribeThenSegmentPlus,
                        TaskType::SegmentThenExplain,
                    ],
                )
            } else {
                TaskType::Rejection
            };
            (i, task)
        }
    };
    Ok((i, compose_sample(lib, &pool[i], task, rng)?))
}
