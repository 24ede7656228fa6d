//! Dataset manifest (tab-separated, one sample per line) and on-disk layout:
//! `images/<id>.pgm`, `masks/<id>.pgm` and `manifest.tsv` under one root.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Category, DefectMeta, DefectType, Location, SizeClass, Split, SynthError, SynthSample};
use crate::image::{Image, Mask};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub category: Category,
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub anomalous: bool,
    pub defect: Option<DefectType>,
    pub size: Option<SizeClass>,
    pub location: Option<String>,
}

impl ManifestRecord {
    pub fn from_sample(s: &SynthSample) -> Self {
        Self {
            id: s.id.clone(),
            category: s.category,
            split: s.split,
            image: format!("images/{}.pgm", s.id),
            mask: format!("masks/{}.pgm", s.id),
            anomalous: s.is_anomalous(),
            defect: s.meta.as_ref().map(|m| m.defect),
            size: s.meta.as_ref().map(|m| m.size),
            location: s.meta.as_ref().map(|m| m.location.phrase().to_owned()),
        }
    }

    pub fn load(&self, root: &Path) -> Result<(Image, Mask), SynthError> {
        Ok((
            Image::read_pgm(&root.join(&self.image))?,
            Mask::read_pgm(&root.join(&self.mask))?,
        ))
    }
}

fn manifest_err(line: usize, e: impl ToString) -> SynthError {
    SynthError::Manifest {
        line,
        msg: e.to_string(),
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), SynthError> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| manifest_err(0, e))?;
    for r in records {
        w.serialize(r).map_err(|e| manifest_err(0, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, SynthError> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| manifest_err(0, e))?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| manifest_err(i + 2, e)))
        .collect()
}

/// Samples of a dataset directory. The texture seed is not stored and
/// reads back as 0.
pub fn read_dataset(root: &Path) -> Result<Vec<SynthSample>, SynthError> {
    let records = read_manifest(&root.join("manifest.tsv"))?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (image, mask) = r.load(root)?;
            let meta = match (r.defect, r.size, r.location.as_deref()) {
                (Some(defect), Some(size), Some(loc)) => Some(DefectMeta {
                    defect,
                    size,
                    location: Location::from_phrase(loc).ok_or_else(|| manifest_err(i + 2, format!("location {loc:?}")))?,
                    category: r.category,
                }),
                (None, None, None) => None,
                _ => return Err(manifest_err(i + 2, "partial defect metadata")),
            };
            if meta.is_some() != r.anomalous {
                return Err(manifest_err(i + 2, "anomalous flag disagrees with metadata"));
            }
            Ok(SynthSample {
                id: r.id.clone(),
                category: r.category,
                split: r.split,
                texture_seed: 0,
                image,
                mask,
                meta,
            })
        })
        .collect()
}

/// Writes images, masks and `manifest.tsv` under `root`.
pub fn write_dataset(root: &Path, samples: &[SynthSample]) -> Result<Vec<ManifestRecord>, SynthError> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let records: Vec<ManifestRecord> = samples.iter().map(ManifestRecord::from_sample).collect();
    for (s, r) in samples.iter().zip(&records) {
        s.image.write_pgm(&root.join(&r.image))?;
        s.mask.write_pgm(&root.join(&r.mask))?;
    }
    write_manifest(&root.join("manifest.tsv"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DatasetSpec};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            per_seen: 3,
            per_unseen: 2,
            ..DatasetSpec::default()
        };
        let samples = generate_dataset(&spec);
        let written = write_dataset(dir.path(), &samples).unwrap();
        let read = read_manifest(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(written, read);
        let back = read_dataset(dir.path()).unwrap();
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!((&a.id, &a.image, &a.mask, &a.meta), (&b.id, &b.image, &b.mask, &b.meta));
        }
        for (s, r) in samples.iter().zip(&read) {
            let (img, mask) = r.load(dir.path()).unwrap();
            assert_eq!(img, s.image);
            assert_eq!(mask, s.mask);
        }
        let text = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert!(text.starts_with("id\tcategory\tsplit\timage\tmask\tanomalous"));
    }
}
