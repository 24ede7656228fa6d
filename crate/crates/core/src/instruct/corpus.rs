//! Corpus records on disk (one JSON object per line) and the vocabulary of
//! every text the generator can emit.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    build_structured_annotation, defect_entities, draw_sample, location_clause, mix_batches, InstructError,
    MixerConfig, PoolIndex, RejectionMode, Source, TaskType, TemplateLibrary, CLASS_NAMES, DIRECT_RESPONSE,
    REJECTION_RESPONSE, SECTIONS,
};
use crate::seed;
use crate::synth::similarity::select_reference;
use crate::synth::{Category, DefectMeta, DefectType, Location, SizeClass, SynthSample};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub image: String,
    pub instruction: String,
    pub response: String,
    /// Absent for samples without mask supervision.
    pub mask: Option<String>,
    pub task: TaskType,
    pub source: Source,
    /// Most similar defect-free image of the same category, for anomalous
    /// samples.
    pub reference: Option<String>,
}

fn image_path(id: &str) -> String {
    format!("images/{id}.pgm")
}

/// `n` mixed samples over `pool`, reproducible from `mixer.seed`.
pub fn build_corpus(
    lib: &TemplateLibrary,
    pool: &[SynthSample],
    n: usize,
    mixer: &MixerConfig,
    mode: RejectionMode,
) -> Result<Vec<CorpusRecord>, InstructError> {
    let index = PoolIndex::new(pool)?;
    let sources = mix_batches(mixer, n)?;
    let mut references: HashMap<usize, Option<String>> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    for (k, &source) in sources.iter().enumerate() {
        let mut rng = seed::rng(mixer.seed, &[0xc0, k as u64]);
        let (i, s) = draw_sample(lib, pool, &index, source, mode, &mut rng)?;
        let reference = match references.get(&i) {
            Some(r) => r.clone(),
            None => {
                let r = reference_for(pool, &index, i)?;
                references.insert(i, r.clone());
                r
            }
        };
        out.push(CorpusRecord {
            image: image_path(&s.image_id),
            instruction: s.instruction,
            response: s.response,
            mask: s.has_mask.then(|| format!("masks/{}.pgm", s.image_id)),
            task: s.task,
            source,
            reference,
        });
    }
    Ok(out)
}

fn reference_for(pool: &[SynthSample], index: &PoolIndex, i: usize) -> Result<Option<String>, InstructError> {
    if !pool[i].is_anomalous() {
        return Ok(None);
    }
    let candidates: Vec<usize> = index
        .normal
        .iter()
        .copied()
        .filter(|&j| pool[j].category == pool[i].category)
        .collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let images: Vec<_> = candidates.iter().map(|&j| pool[j].image.clone()).collect();
    let best = select_reference(&pool[i].image, &images)?;
    Ok(Some(image_path(&pool[candidates[best]].id)))
}

pub fn export_corpus(records: &[CorpusRecord], path: &Path) -> Result<(), InstructError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| InstructError::Corpus {
            line: 0,
            msg: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_corpus(path: &Path) -> Result<Vec<CorpusRecord>, InstructError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| InstructError::Corpus {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Vocabulary over every instruction and response the generator can
/// produce, for every category.
pub fn corpus_vocabulary(lib: &TemplateLibrary) -> Vocabulary {
    let mut texts: Vec<String> = vec![DIRECT_RESPONSE.into(), REJECTION_RESPONSE.into()];
    for sec in SECTIONS {
        for t in lib.templates(sec).unwrap_or(&[]) {
            for c in CLASS_NAMES {
                texts.push(t.replace("{class_name}", c));
            }
            for &d in DefectType::ALL {
                for e in defect_entities(d) {
                    texts.push(t.replace("{entity}", e));
                }
            }
        }
    }
    for &category in Category::ALL {
        let noun = category.noun();
        texts.push(format!("No, the {noun} looks normal."));
        texts.push(format!("The image shows {noun}."));
        for &defect in DefectType::ALL {
            for &size in SizeClass::ALL {
                for location in Location::all() {
                    let meta = DefectMeta {
                        defect,
                        size,
                        location,
                        category,
                    };
                    let a = build_structured_annotation(Some(&meta)).expect("anomalous");
                    texts.extend([a.expectation, a.observation, a.diagnosis, a.summary, a.explanation]);
                    texts.push(format!("Yes, there is a {} {} {}.", size.name(), defect.phrase(), location_clause(location)));
                    texts.push(format!("It is a {} {}.", size.name(), defect.phrase()));
                    texts.push(format!("It is {}.", location_clause(location)));
                }
            }
        }
    }
    texts.push("There is no defect to locate.".into());
    Vocabulary::from_texts(texts.iter().map(String::as_str))
}
