//! The composed segmenter: frozen encoders, projections, alignment, language
//! model, anchor refinement and mask decoding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agmd::{DecoderConfig, HeadLayout, HeadMaps, MaskDecoder, ProbMaps};
use crate::encoders::{EncoderError, Encoders, Projections, PIXEL_GRID};
use crate::image::{Image, Mask};
use crate::kernel::{Graph, KernelError, Tensor, Var};
use crate::lm::{anchor_positions, LmConfig, LmError, MicroLM, TokenRefiner};
use crate::nn::AdapterError;
use crate::params::{ParamError, ParamStore};
use crate::spam::{assemble_llm_input, Spam};
use crate::synth::IMAGE_SIZE;
use crate::vocab::Vocabulary;

/// Decoder grid to image resolution.
pub const UPSAMPLE: usize = IMAGE_SIZE / PIXEL_GRID;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
}

/// Architectural variants compared by the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoSegAnchor,
    NoRelativeAnchors,
    NoSpam,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoSegAnchor,
        Variant::NoRelativeAnchors,
        Variant::NoSpam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSegAnchor => "no-seg-anchor",
            Variant::NoRelativeAnchors => "no-relative-anchors",
            Variant::NoSpam => "no-spam",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full model",
            Variant::NoSegAnchor => "w/o [SEG]",
            Variant::NoRelativeAnchors => "w/o [NOR][ANO]",
            Variant::NoSpam => "w/o SPAM",
        }
    }

    pub fn layout(self) -> HeadLayout {
        match self {
            Variant::NoSegAnchor => HeadLayout {
                relative: true,
                absolute: false,
            },
            Variant::NoRelativeAnchors => HeadLayout {
                relative: false,
                absolute: true,
            },
            _ => HeadLayout::FULL,
        }
    }

    pub fn uses_spam(self) -> bool {
        self != Variant::NoSpam
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::UnknownVariant(s.to_owned()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub decoder: DecoderConfig,
    pub spam_heads: usize,
    pub variant: Variant,
    /// Low-rank adapters on every transformer linear layer.
    pub adapter_rank: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            decoder: DecoderConfig::default(),
            spam_heads: 4,
            variant: Variant::Full,
            adapter_rank: None,
        }
    }
}

/// Frozen encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub semantic: Tensor,
    pub pixel: Tensor,
}

impl ImageFeatures {
    pub fn encode(enc: &Encoders, img: &Image) -> Result<Self, EncoderError> {
        Ok(Self {
            semantic: enc.encode_semantic(img)?.data,
            pixel: enc.encode_pixel(img)?.data,
        })
    }
}

/// `<bos> instruction <assist> response <eos>` and where the response
/// starts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub ids: Vec<usize>,
    pub response_start: usize,
}

impl Dialogue {
    pub fn new(vocab: &Vocabulary, instruction: &str, response: &str) -> Self {
        let mut ids = prompt_ids(vocab, instruction);
        let response_start = ids.len();
        ids.extend(vocab.tokenize(response));
        ids.push(vocab.eos());
        Self { ids, response_start }
    }

    /// Response tokens and the closing `<eos>`.
    pub fn supervised(&self) -> std::ops::Range<usize> {
        self.response_start..self.ids.len()
    }
}

pub fn prompt_ids(vocab: &Vocabulary, instruction: &str) -> Vec<usize> {
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.tokenize(instruction));
    ids.push(vocab.assist());
    ids
}

pub struct SampleForward {
    /// Row `j` predicts text token `j`.
    pub logits: Var,
    pub hidden: Var,
    pub prefix: usize,
    pub heads: Option<HeadMaps>,
}

#[derive(Clone, Debug)]
pub struct Response {
    pub ids: Vec<usize>,
    pub text: String,
    /// `None` when the response lacks an anchor.
    pub maps: Option<ProbMaps>,
}

impl Response {
    pub fn anchors_missing(&self) -> bool {
        self.maps.is_none()
    }

    pub fn mask(&self, size: usize) -> Mask {
        self.maps.as_ref().map_or_else(|| Mask::empty(size, size), |m| m.mask.clone())
    }
}

#[derive(Clone, Debug)]
pub struct AgModel {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub proj: Projections,
    pub spam: Option<Spam>,
    pub lm: MicroLM,
    pub refiner: TokenRefiner,
    pub decoder: MaskDecoder,
}

impl AgModel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: ModelConfig,
        vocab: Vocabulary,
    ) -> Result<Self, ModelError> {
        let d = cfg.lm.dim;
        let proj = Projections::new(store, rng, d)?;
        let spam = if cfg.variant.uses_spam() {
            Some(Spam::new(store, rng, d, cfg.spam_heads)?)
        } else {
            None
        };
        let mut lm = MicroLM::new(store, rng, cfg.lm, vocab.len())?;
        if let Some(r) = cfg.adapter_rank {
            lm.attach_adapters(store, rng, r)?;
        }
        let refiner = TokenRefiner::new(store, rng, d, cfg.decoder.dim)?;
        let decoder = MaskDecoder::new(store, rng, cfg.decoder, cfg.variant.layout())?;
        Ok(Self {
            cfg,
            vocab,
            proj,
            spam,
            lm,
            refiner,
            decoder,
        })
    }

    /// Projected semantic features and, when alignment is on, `f_align`.
    fn image_prefix<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        feats: &ImageFeatures,
    ) -> Result<(Var, Option<Var>), ModelError> {
        let s = g.constant(feats.semantic.clone());
        let f_s = self.proj.project_semantic(g, store, s)?;
        let f_align = match &self.spam {
            Some(spam) => {
                let p = g.constant(feats.pixel.clone());
                let f_p = self.proj.project_pixel(g, store, p)?;
                Some(spam.align(g, store, f_s, f_p)?.aligned)
            }
            None => None,
        };
        Ok((f_s, f_align))
    }

    /// Teacher-forced pass over `text`. With `decode`, the first anchors in
    /// `text` condition the mask decoder.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        feats: &ImageFeatures,
        text: &[usize],
        decode: bool,
    ) -> Result<SampleForward, ModelError> {
        let (f_s, f_align) = self.image_prefix(g, store, feats)?;
        let (seq, prefix) = assemble_llm_input(g, store, &self.lm, f_s, f_align, text)?;
        let out = self.lm.forward_sequence(g, store, seq, prefix)?;
        let heads = if decode {
            let pos = anchor_positions(&self.vocab, text)?;
            Some(self.decode_at(g, store, out.hidden, &pos, feats)?)
        } else {
            None
        };
        Ok(SampleForward {
            logits: out.logits,
            hidden: out.hidden,
            prefix,
            heads,
        })
    }

    fn decode_at<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        hidden: Var,
        pos: &[usize; 3],
        feats: &ImageFeatures,
    ) -> Result<HeadMaps, ModelError> {
        let layout = self.cfg.variant.layout();
        let rows: Vec<usize> = match (layout.relative, layout.absolute) {
            (true, true) => pos.to_vec(),
            (true, false) => pos[..2].to_vec(),
            (false, _) => vec![pos[2]],
        };
        let h = g.gather_rows(hidden, &rows)?;
        let refined = self.refiner.forward(g, store, h)?;
        let z0 = self.decoder.build_decoder_input(g, store, refined)?;
        let px = g.constant(feats.pixel.clone());
        let decoded = self.decoder.biattn_decode(g, store, z0, px)?;
        Ok(self.decoder.mask_heads(g, &decoded)?)
    }

    /// Greedy response to `instruction` and, when it carries the anchors, the
    /// decoded maps.
    pub fn respond(
        &self,
        store: &ParamStore,
        feats: &ImageFeatures,
        instruction: &str,
        max_new: usize,
        alpha: f64,
    ) -> Result<Response, ModelError> {
        let prompt = prompt_ids(&self.vocab, instruction);
        let prefix = {
            let mut g = Graph::new();
            let (f_s, f_align) = self.image_prefix(&mut g, store, feats)?;
            let mut parts = vec![f_s];
            parts.extend(f_align);
            let seq = g.concat_rows(&parts)?;
            g.value(seq).clone()
        };
        let ids = self.lm.generate(store, &prefix, &prompt, max_new, self.vocab.eos())?;
        let text = self.vocab.detokenize(&ids);
        let mut full = prompt;
        full.extend(&ids);
        let maps = match anchor_positions(&self.vocab, &full) {
            Ok(pos) => {
                let mut g = Graph::new();
                let p = g.constant(prefix);
                let out = self.lm.forward(&mut g, store, p, &full)?;
                let heads = self.decode_at(&mut g, store, out.hidden, &pos, feats)?;
                Some(ProbMaps::from_heads(&g, &heads, alpha, PIXEL_GRID, UPSAMPLE))
            }
            Err(LmError::AnchorsMissing(_)) => None,
            Err(e) => return Err(e.into()),
        };
        Ok(Response { ids, text, maps })
    }

    /// Decoder maps for a fixed response, skipping generation.
    pub fn maps_for(
        &self,
        store: &ParamStore,
        feats: &ImageFeatures,
        dialogue: &Dialogue,
        alpha: f64,
    ) -> Result<ProbMaps, ModelError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, feats, &dialogue.ids, true)?;
        let heads = out.heads.expect("decoded");
        Ok(ProbMaps::from_heads(&g, &heads, alpha, PIXEL_GRID, UPSAMPLE))
    }
}
