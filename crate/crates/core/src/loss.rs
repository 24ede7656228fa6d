//! Text and segmentation objectives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agmd::HeadMaps;
use crate::image::Mask;
use crate::kernel::{Graph, KernelError, Tensor, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    Config(&'static str),
    #[error("supervision triple is inconsistent: {0}")]
    Inconsistent(&'static str),
    #[error("anchor {0:?} is supervised but the decoder has no map for it")]
    MissingMap(Anchor),
    #[error("no supervised text positions")]
    EmptyRange,
    #[error("loss is not finite")]
    NonFinite,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    /// Weight of the `[SEG]` map in fusion.
    pub alpha: f64,
    pub dice_eps: f64,
    pub bce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_bce: 0.5,
            lambda_dice: 2.0,
            alpha: 0.5,
            dice_eps: 1.0,
            bce_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda_bce >= 0.0 && self.lambda_dice >= 0.0) {
            return Err(LossError::Config("loss weights must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::Config("alpha must lie in [0, 1]"));
        }
        if !(self.dice_eps > 0.0) {
            return Err(LossError::Config("dice smoothing must be positive"));
        }
        if !(self.bce_clamp > 0.0 && self.bce_clamp < 0.5) {
            return Err(LossError::Config("bce clamp must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Anchor {
    Nor,
    Ano,
    Seg,
}

impl Anchor {
    pub const ALL: [Anchor; 3] = [Anchor::Nor, Anchor::Ano, Anchor::Seg];
}

/// Ground truth per anchor on the decoder grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTriple {
    pub seg: Vec<f64>,
    pub ano: Vec<f64>,
    pub nor: Vec<f64>,
}

impl SupervisionTriple {
    pub fn new(seg: Vec<f64>, ano: Vec<f64>, nor: Vec<f64>) -> Result<Self, LossError> {
        if seg.len() != ano.len() || nor.len() != ano.len() {
            return Err(LossError::Inconsistent("maps differ in size"));
        }
        if ano.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(LossError::Inconsistent("maps must be binary"));
        }
        if nor.iter().zip(&ano).any(|(n, a)| *n != 1.0 - a) {
            return Err(LossError::Inconsistent("normal map is not the complement of the anomaly map"));
        }
        if seg != ano {
            return Err(LossError::Inconsistent("segmentation map differs from the anomaly map"));
        }
        Ok(Self { seg, ano, nor })
    }

    /// Downsamples `mask` to `grid × grid`; a cell is anomalous when at least
    /// half its pixels are.
    pub fn from_mask(mask: &Mask, grid: usize) -> Self {
        let ano = mask.downsample_area(grid);
        let nor = ano.iter().map(|a| 1.0 - a).collect();
        Self {
            seg: ano.clone(),
            ano,
            nor,
        }
    }

    pub fn get(&self, anchor: Anchor) -> &[f64] {
        match anchor {
            Anchor::Nor => &self.nor,
            Anchor::Ano => &self.ano,
            Anchor::Seg => &self.seg,
        }
    }
}

/// Per-position targets for a logit matrix whose row `j` predicts `text[j]`.
/// Only positions in `supervised` carry a target.
pub fn response_targets(text: &[usize], supervised: std::ops::Range<usize>, rows: usize) -> Vec<Option<usize>> {
    (0..rows)
        .map(|j| (supervised.contains(&j) && j < text.len()).then(|| text[j]))
        .collect()
}

/// Mean negative log-likelihood over the supervised positions.
pub fn text_loss(g: &mut Graph<'_>, logits: Var, targets: &[Option<usize>]) -> Result<Var, LossError> {
    if targets.iter().all(Option::is_none) {
        return Err(LossError::EmptyRange);
    }
    Ok(g.cross_entropy(logits, targets)?)
}

pub fn bce_loss(g: &mut Graph<'_>, p: Var, target: &[f64], cfg: &LossConfig) -> Result<Var, LossError> {
    let t = Tensor::new(&[target.len()], target.to_vec())?;
    Ok(g.bce(p, &t, cfg.bce_clamp)?)
}

pub fn dice_loss(g: &mut Graph<'_>, p: Var, target: &[f64], cfg: &LossConfig) -> Result<Var, LossError> {
    let t = Tensor::new(&[target.len()], target.to_vec())?;
    Ok(g.dice(p, &t, cfg.dice_eps)?)
}

pub struct AnchorTerm {
    pub anchor: Anchor,
    pub bce: Var,
    pub dice: Var,
}

pub struct SegLoss {
    pub total: Var,
    pub terms: Vec<AnchorTerm>,
}

impl SegLoss {
    /// `(Σ BCE, Σ Dice)` before weighting.
    pub fn raw_sums(&self, g: &Graph<'_>) -> (f64, f64) {
        self.terms.iter().fold((0.0, 0.0), |(b, d), t| {
            (b + g.value(t.bce).item(), d + g.value(t.dice).item())
        })
    }
}

fn head(maps: &HeadMaps, anchor: Anchor) -> Option<Var> {
    match anchor {
        Anchor::Nor => maps.nor,
        Anchor::Ano => maps.ano,
        Anchor::Seg => maps.seg,
    }
}

/// `Σ_c (λ_bce·BCE(P_c, M_c) + λ_dic·Dice(P_c, M_c))` over `anchors`.
pub fn seg_loss(
    g: &mut Graph<'_>,
    maps: &HeadMaps,
    gt: &SupervisionTriple,
    anchors: &[Anchor],
    cfg: &LossConfig,
) -> Result<SegLoss, LossError> {
    if anchors.is_empty() {
        return Err(LossError::EmptyRange);
    }
    let mut terms = Vec::with_capacity(anchors.len());
    let mut total: Option<Var> = None;
    for &anchor in anchors {
        let p = head(maps, anchor).ok_or(LossError::MissingMap(anchor))?;
        let target = gt.get(anchor);
        let bce = bce_loss(g, p, target, cfg)?;
        let dice = dice_loss(g, p, target, cfg)?;
        let wb = g.scale(bce, cfg.lambda_bce);
        let wd = g.scale(dice, cfg.lambda_dice);
        let term = g.add(wb, wd)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
        terms.push(AnchorTerm { anchor, bce, dice });
    }
    Ok(SegLoss {
        total: total.expect("at least one anchor"),
        terms,
    })
}

/// Unweighted sum; a missing segmentation term is skipped.
pub fn total_loss(g: &mut Graph<'_>, text: Var, seg: Option<Var>) -> Result<Var, LossError> {
    let out = match seg {
        Some(s) => g.add(text, s)?,
        None => text,
    };
    if !g.value(out).item().is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok(out)
}
