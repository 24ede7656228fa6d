//! Pixel-level AP and F1-max, anomaly and normal IoU, and per-category
//! reports.
//!
//! Thresholds are inclusive: a pixel is predicted positive when its score is
//! at least the threshold, and tied scores enter together.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::image::Mask;

/// Threshold candidates for F1-max when there are more unique scores.
pub const F1_CANDIDATES: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no positive labels")]
    NoPositives,
    #[error("scores and labels differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("no {0} images to evaluate")]
    EmptySubset(&'static str),
    #[error("record {id} has resolution {found:?}, expected {expected:?}")]
    Resolution {
        id: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("normal record {0} has a nonempty ground-truth mask")]
    NormalWithDefect(String),
    #[error("cannot parse metric tuple {0:?}")]
    Tuple(String),
}

/// Descending score groups as `(score, positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Result<(Vec<(f64, usize, usize)>, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in idx {
        let (s, l) = (scores[i], labels[i]);
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if l {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, usize::from(l), usize::from(!l))),
        }
    }
    Ok((groups, positives))
}

/// `Σ (R_n − R_{n−1})·P_n` over descending unique thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (groups, positives) = tie_groups(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (_, p, n) in groups {
        tp += p;
        fp += n;
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

fn f1(tp: usize, fp: usize, positives: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + (positives - tp)) as f64
    }
}

/// Candidate thresholds: every unique score, or [`F1_CANDIDATES`] order
/// statistics of the sorted scores when there are more.
pub fn f1_candidates(scores: &[f64]) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut unique = sorted.clone();
    unique.dedup();
    if unique.len() <= F1_CANDIDATES {
        return unique;
    }
    let n = sorted.len();
    let mut out: Vec<f64> = (0..F1_CANDIDATES)
        .map(|k| sorted[k * (n - 1) / (F1_CANDIDATES - 1)])
        .collect();
    out.dedup();
    out
}

pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (groups, positives) = tie_groups(scores, labels)?;
    let candidates = f1_candidates(scores);
    let all = candidates.len() == groups.len();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    for (s, p, n) in groups {
        tp += p;
        fp += n;
        if all || candidates.binary_search_by(|c| c.total_cmp(&s)).is_ok() {
            best = best.max(f1(tp, fp, positives));
        }
    }
    Ok(best)
}

/// One evaluated image.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub id: String,
    pub category: String,
    pub anomalous: bool,
    /// Score map at mask resolution, row-major.
    pub prob: Vec<f64>,
    pub mask: Mask,
    pub gt: Mask,
}

/// Per-image IoU, or `None` when both masks are empty.
pub fn image_iou(pred: &Mask, gt: &Mask) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Mean IoU over anomalous records and the number of empty-union images,
/// which count as 1.
pub fn iou_ano<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Result<(f64, usize), MetricError> {
    let (mut sum, mut n, mut empty) = (0.0, 0usize, 0usize);
    for r in records.into_iter().filter(|r| r.anomalous) {
        n += 1;
        match image_iou(&r.mask, &r.gt) {
            Some(v) => sum += v,
            None => {
                sum += 1.0;
                empty += 1;
            }
        }
    }
    if n == 0 {
        return Err(MetricError::EmptySubset("anomalous"));
    }
    Ok((sum / n as f64, empty))
}

/// Fraction of normal records whose predicted mask is empty.
pub fn iou_nor<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Result<f64, MetricError> {
    let (mut hits, mut n) = (0usize, 0usize);
    for r in records.into_iter().filter(|r| !r.anomalous) {
        n += 1;
        hits += usize::from(r.mask.is_empty());
    }
    if n == 0 {
        return Err(MetricError::EmptySubset("normal"));
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricRow {
    pub ap: Option<f64>,
    pub f1_max: Option<f64>,
    pub iou_ano: Option<f64>,
    pub iou_nor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub category: String,
    pub row: MetricRow,
    pub n_ano: usize,
    pub n_nor: usize,
    /// Anomalous images whose prediction and ground truth were both empty.
    pub empty_union: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Sorted by category name.
    pub categories: Vec<CategoryMetrics>,
    /// Unweighted mean over the categories that define each metric.
    pub mean: MetricRow,
}

pub fn evaluate_dataset(records: &[EvalRecord]) -> Result<MetricsReport, MetricError> {
    let Some(first) = records.first() else {
        return Err(MetricError::EmptySubset("any"));
    };
    let res = first.gt.dims();
    let mut by_cat: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        for found in [r.mask.dims(), r.gt.dims(), (r.prob.len() / res.1.max(1), res.1)] {
            if found != res || r.prob.len() != res.0 * res.1 {
                return Err(MetricError::Resolution {
                    id: r.id.clone(),
                    expected: res,
                    found,
                });
            }
        }
        if !r.anomalous && !r.gt.is_empty() {
            return Err(MetricError::NormalWithDefect(r.id.clone()));
        }
        by_cat.entry(&r.category).or_default().push(r);
    }
    let mut categories = Vec::with_capacity(by_cat.len());
    for (cat, recs) in by_cat {
        let scores: Vec<f64> = recs.iter().flat_map(|r| r.prob.iter().copied()).collect();
        let labels: Vec<bool> = recs.iter().flat_map(|r| r.gt.bits().iter().copied()).collect();
        let ano = iou_ano(recs.iter().copied());
        categories.push(CategoryMetrics {
            category: cat.to_owned(),
            row: MetricRow {
                ap: average_precision(&scores, &labels).ok(),
                f1_max: f1_max(&scores, &labels).ok(),
                iou_ano: ano.as_ref().ok().map(|a| a.0),
                iou_nor: iou_nor(recs.iter().copied()).ok(),
            },
            n_ano: recs.iter().filter(|r| r.anomalous).count(),
            n_nor: recs.iter().filter(|r| !r.anomalous).count(),
            empty_union: ano.map(|a| a.1).unwrap_or(0),
        });
    }
    let mean_of = |f: fn(&MetricRow) -> Option<f64>| {
        let vals: Vec<f64> = categories.iter().filter_map(|c| f(&c.row)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mean = MetricRow {
        ap: mean_of(|r| r.ap),
        f1_max: mean_of(|r| r.f1_max),
        iou_ano: mean_of(|r| r.iou_ano),
        iou_nor: mean_of(|r| r.iou_nor),
    };
    Ok(MetricsReport { categories, mean })
}

/// `(51.0, 52.7, 44.8)`: fractions printed as percentages with one decimal.
pub fn format_tuple(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{:.1}", v * 100.0)).collect();
    format!("({})", parts.join(", "))
}

/// Inverse of [`format_tuple`], returning percentages as written.
pub fn parse_tuple(s: &str) -> Result<Vec<f64>, MetricError> {
    let bad = || MetricError::Tuple(s.to_owned());
    let inner = s.trim().strip_prefix('(').and_then(|t| t.strip_suffix(')')).ok_or_else(bad)?;
    inner.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{:.1}", v * 100.0))
}

fn kv(v: Option<f64>) -> String {
    v.map_or_else(|| "missing".to_owned(), |v| format!("{v:.12}"))
}

impl MetricsReport {
    /// Aligned text table, one row per category plus the mean.
    pub fn table(&self) -> String {
        let width = self.categories.iter().map(|c| c.category.len()).max().unwrap_or(0).max(8);
        let mut out = format!(
            "{:<width$}  {:>6}  {:>6}  {:>7}  {:>7}  {:>5}  {:>5}\n",
            "category", "AP", "F1max", "IoU_ano", "IoU_nor", "N_ano", "N_nor"
        );
        let line = |out: &mut String, name: &str, r: &MetricRow, na: String, nn: String| {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>6}  {:>6}  {:>7}  {:>7}  {na:>5}  {nn:>5}",
                cell(r.ap),
                cell(r.f1_max),
                cell(r.iou_ano),
                cell(r.iou_nor)
            );
        };
        for c in &self.categories {
            line(&mut out, &c.category, &c.row, c.n_ano.to_string(), c.n_nor.to_string());
        }
        let na: usize = self.categories.iter().map(|c| c.n_ano).sum();
        let nn: usize = self.categories.iter().map(|c| c.n_nor).sum();
        line(&mut out, "mean", &self.mean, na.to_string(), nn.to_string());
        out
    }

    /// `key=value` lines in a fixed order.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let mut row = |prefix: &str, r: &MetricRow| {
            for (k, v) in [("ap", r.ap), ("f1_max", r.f1_max), ("iou_ano", r.iou_ano), ("iou_nor", r.iou_nor)] {
                let _ = writeln!(out, "{prefix}.{k}={}", kv(v));
            }
        };
        for c in &self.categories {
            row(&c.category, &c.row);
        }
        row("mean", &self.mean);
        for c in &self.categories {
            let _ = writeln!(out, "{}.n_ano={}", c.category, c.n_ano);
            let _ = writeln!(out, "{}.n_nor={}", c.category, c.n_nor);
            let _ = writeln!(out, "{}.empty_union={}", c.category, c.empty_union);
        }
        out
    }

    pub fn category(&self, name: &str) -> Option<&CategoryMetrics> {
        self.categories.iter().find(|c| c.category == name)
    }
}

/// Direct enumeration counterparts, quadratic in the number of pixels.
pub mod oracle {
    use super::*;

    fn counts_at(scores: &[f64], labels: &[bool], t: f64) -> (usize, usize) {
        let mut tp = 0;
        let mut fp = 0;
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                if *l {
                    tp += 1
                } else {
                    fp += 1
                }
            }
        }
        (tp, fp)
    }

    fn thresholds_desc(scores: &[f64]) -> Vec<f64> {
        let mut t: Vec<f64> = Vec::new();
        for &s in scores {
            if !t.contains(&s) {
                t.push(s);
            }
        }
        t.sort_by(|a, b| b.total_cmp(a));
        t
    }

    pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let pos = labels.iter().filter(|l| **l).count();
        if pos == 0 {
            return None;
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for t in thresholds_desc(scores) {
            let (tp, fp) = counts_at(scores, labels, t);
            let r = tp as f64 / pos as f64;
            ap += (r - prev) * tp as f64 / (tp + fp) as f64;
            prev = r;
        }
        Some(ap)
    }

    pub fn f1_max(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let pos = labels.iter().filter(|l| **l).count();
        if pos == 0 {
            return None;
        }
        let mut best = 0.0f64;
        for t in thresholds_desc(scores) {
            let (tp, fp) = counts_at(scores, labels, t);
            let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let rec = tp as f64 / pos as f64;
            if prec + rec > 0.0 {
                best = best.max(2.0 * prec * rec / (prec + rec));
            }
        }
        Some(best)
    }

    pub fn iou(pred: &Mask, gt: &Mask) -> Option<f64> {
        let (h, w) = pred.dims();
        let mut inter = 0;
        let mut union = 0;
        for y in 0..h {
            for x in 0..w {
                let (p, g) = (pred.get(y, x), gt.get(y, x));
                if p && g {
                    inter += 1;
                }
                if p || g {
                    union += 1;
                }
            }
        }
        if union == 0 {
            None
        } else {
            Some(inter as f64 / union as f64)
        }
    }

    pub fn iou_nor(records: &[EvalRecord]) -> Option<f64> {
        let normals: Vec<_> = records.iter().filter(|r| !r.anomalous).collect();
        if normals.is_empty() {
            return None;
        }
        let hits = normals.iter().filter(|r| r.mask.count() == 0).count();
        Some(hits as f64 / normals.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(h: usize, w: usize, on: &[usize]) -> Mask {
        let mut bits = vec![false; h * w];
        for &i in on {
            bits[i] = true;
        }
        Mask::from_bits(h, w, bits).unwrap()
    }

    fn record(cat: &str, anomalous: bool, mask: Mask, gt: Mask) -> EvalRecord {
        let prob = mask.bits().iter().map(|&b| f64::from(b)).collect();
        EvalRecord {
            id: format!("{cat}_{}", mask.count()),
            category: cat.into(),
            anomalous,
            prob,
            mask,
            gt,
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.1, 0.7, 0.3], &[true; 3]).unwrap(), 1.0);
        let s = [0.9, 0.8, 0.7, 0.6];
        let l = [true, false, true, false];
        let want = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert_eq!(average_precision(&s, &l).unwrap(), want);
        assert_eq!(oracle::average_precision(&s, &l).unwrap(), want);
        assert_eq!(average_precision(&s, &[false; 4]), Err(MetricError::NoPositives));
        // Ties enter jointly: one group with precision 1/2.
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_max(&[0.9, 0.8, 0.2], &[true, true, false]).unwrap(), 1.0);
        let labels: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let p = 0.3;
        let got = f1_max(&[0.4; 10], &labels).unwrap();
        assert!((got - 2.0 * p / (p + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn f1_matches_oracle_on_500_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s: Vec<f64> = (0..500).map(|_| (rng.random::<f64>() * 50.0).round() / 50.0).collect();
        let l: Vec<bool> = s.iter().map(|v| rng.random::<f64>() < *v).collect();
        assert!((f1_max(&s, &l).unwrap() - oracle::f1_max(&s, &l).unwrap()).abs() < 1e-9);
        assert!((average_precision(&s, &l).unwrap() - oracle::average_precision(&s, &l).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn many_unique_scores_use_quantiles() {
        let s: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        let c = f1_candidates(&s);
        assert_eq!(c.len(), F1_CANDIDATES);
        assert_eq!((c[0], *c.last().unwrap()), (0.0, 9999.0));
        let l: Vec<bool> = (0..10_000).map(|i| i >= 5000).collect();
        assert_eq!(f1_max(&s, &l).unwrap(), 1.0);
    }

    #[test]
    fn iou_examples() {
        let g = mask_from(2, 2, &[0, 1]);
        let m = mask_from(2, 2, &[1, 3]);
        assert!((image_iou(&m, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(image_iou(&g, &g), Some(1.0));
        assert_eq!(image_iou(&mask_from(2, 2, &[2]), &g), Some(0.0));
        let recs = [record("a", true, Mask::empty(2, 2), Mask::empty(2, 2))];
        assert_eq!(iou_ano(&recs).unwrap(), (1.0, 1));
        assert!(iou_nor(&recs).is_err());
    }

    #[test]
    fn iou_nor_counts() {
        let e = Mask::empty(4, 4);
        let mut recs: Vec<EvalRecord> = (0..3).map(|_| record("a", false, e.clone(), e.clone())).collect();
        recs.push(record("a", false, mask_from(4, 4, &[5]), e.clone()));
        assert_eq!(iou_nor(&recs).unwrap(), 0.75);
        assert_eq!(iou_nor(&recs[3..]).unwrap(), 0.0);
        assert_eq!(iou_nor(&recs[..1]).unwrap(), 1.0);
    }

    #[test]
    fn dataset_means_and_order() {
        let g = mask_from(2, 5, &[0, 1, 2, 3, 4]);
        let recs = vec![
            record("zeta", true, mask_from(2, 5, &[0, 1, 2]), g.clone()),
            record("alpha", true, mask_from(2, 5, &[0]), g.clone()),
            record("alpha", false, Mask::empty(2, 5), Mask::empty(2, 5)),
        ];
        let rep = evaluate_dataset(&recs).unwrap();
        let names: Vec<&str> = rep.categories.iter().map(|c| c.category.as_str()).collect();
        assert_eq!(names, ["alpha", "zeta"]);
        assert!((rep.category("alpha").unwrap().row.iou_ano.unwrap() - 0.2).abs() < 1e-15);
        assert!((rep.category("zeta").unwrap().row.iou_ano.unwrap() - 0.6).abs() < 1e-15);
        assert!((rep.mean.iou_ano.unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(rep.mean.iou_nor, Some(1.0));
        assert!(rep.table().contains("mean"));
        assert!(rep.key_values().contains("zeta.iou_nor=missing"));

        let single = evaluate_dataset(&recs[1..]).unwrap();
        assert_eq!(single.mean, single.categories[0].row);

        let mut bad = recs.clone();
        bad[0].gt = Mask::empty(3, 3);
        assert!(matches!(evaluate_dataset(&bad), Err(MetricError::Resolution { .. })));
    }

    #[test]
    fn tuple_round_trip() {
        let t = "(51.0, 52.7, 44.8)";
        let v = parse_tuple(t).unwrap();
        assert_eq!(v, vec![51.0, 52.7, 44.8]);
        assert_eq!(format_tuple(&v.iter().map(|x| x / 100.0).collect::<Vec<_>>()), t);
        assert!(parse_tuple("51.0, 52.7").is_err());
    }

    proptest! {
        #[test]
        fn monotone_transforms_preserve_ap_and_f1(
            pairs in prop::collection::vec((0u8..40, any::<bool>()), 2..120),
        ) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 40.0 - 0.3).collect();
            let mut l: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            l[0] = true;
            let ap = average_precision(&s, &l).unwrap();
            let f = f1_max(&s, &l).unwrap();
            for t in [|x: f64| x * x * x, |x: f64| 1.0 / (1.0 + (-5.0 * x).exp())] {
                let st: Vec<f64> = s.iter().map(|&x| t(x)).collect();
                prop_assert!((average_precision(&st, &l).unwrap() - ap).abs() < 1e-12);
                prop_assert!((f1_max(&st, &l).unwrap() - f).abs() < 1e-12);
            }
            prop_assert!((oracle::average_precision(&s, &l).unwrap() - ap).abs() < 1e-9);
            prop_assert!((oracle::f1_max(&s, &l).unwrap() - f).abs() < 1e-9);
        }
    }
}
