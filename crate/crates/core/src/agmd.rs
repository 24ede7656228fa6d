//! Anchor-guided mask decoder.
//!
//! Learned query tokens and refined anchor embeddings form the token stream;
//! native pixel features form the pixel stream. Each two-way block runs
//! token self-attention, token→pixel cross-attention, a token MLP and
//! pixel→token cross-attention, all pre-normalised with residuals, so a block
//! whose projections are zero is the identity. The initial token stream is
//! added to token queries and keys as their positional term; pixels get a
//! learned positional embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Mask;
use crate::kernel::{sigmoid, AttnMask, Graph, KernelError, Var};
use crate::nn::{LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{Init, ParamError, ParamStore};
use crate::ParamId;

/// Which anchor heads a decoder carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HeadLayout {
    /// `[NOR]`/`[ANO]` and the two-way softmax head.
    pub relative: bool,
    /// `[SEG]` and the sigmoid head.
    pub absolute: bool,
}

impl HeadLayout {
    pub const FULL: HeadLayout = HeadLayout {
        relative: true,
        absolute: true,
    };

    /// Number of anchors, and therefore of learned queries.
    pub fn anchors(self) -> usize {
        2 * usize::from(self.relative) + usize::from(self.absolute)
    }

    /// Row of `[SEG]` among the anchors, which are ordered NOR, ANO, SEG.
    fn seg_row(self) -> Option<usize> {
        self.absolute.then(|| if self.relative { 2 } else { 0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub pixel_tokens: usize,
    /// Standard deviation of the learnable query tokens at init.
    pub query_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            layers: 2,
            mlp_hidden: 128,
            pixel_tokens: 256,
            query_std: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_t2p_tok: LayerNorm,
    pub ln_t2p_pix: LayerNorm,
    pub t2p: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    pub ln_p2t_pix: LayerNorm,
    pub ln_p2t_tok: LayerNorm,
    pub p2t: MultiHeadAttention,
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    pub layout: HeadLayout,
    /// Learned queries, one row per anchor.
    pub queries: ParamId,
    pub pixel_pos: ParamId,
    pub blocks: Vec<TwoWayBlock>,
}

pub struct Decoded {
    pub tokens: Var,
    pub pixels: Var,
}

/// Probability rows over the pixel grid, each `1 × pixels` (`rel` is
/// `2 × pixels` with `[NOR]` first).
pub struct HeadMaps {
    pub seg: Option<Var>,
    pub rel: Option<Var>,
    pub nor: Option<Var>,
    pub ano: Option<Var>,
}

impl MaskDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: DecoderConfig,
        layout: HeadLayout,
    ) -> Result<Self, ParamError> {
        let d = cfg.dim;
        let queries = store.init("agmd.queries", &[layout.anchors(), d], Init::Normal(cfg.query_std), false, rng)?;
        let pixel_pos = store.init("agmd.pixel_pos", &[cfg.pixel_tokens, d], Init::Normal(0.02), true, rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("agmd.block{l}.{s}");
            blocks.push(TwoWayBlock {
                ln_self: LayerNorm::new(store, rng, &n("ln_self"), d)?,
                self_attn: MultiHeadAttention::new(store, rng, &n("self_attn"), d, cfg.heads)?,
                ln_t2p_tok: LayerNorm::new(store, rng, &n("ln_t2p_tok"), d)?,
                ln_t2p_pix: LayerNorm::new(store, rng, &n("ln_t2p_pix"), d)?,
                t2p: MultiHeadAttention::new(store, rng, &n("t2p"), d, cfg.heads)?,
                ln_mlp: LayerNorm::new(store, rng, &n("ln_mlp"), d)?,
                mlp: Mlp::new(store, rng, &n("mlp"), (d, cfg.mlp_hidden, d))?,
                ln_p2t_pix: LayerNorm::new(store, rng, &n("ln_p2t_pix"), d)?,
                ln_p2t_tok: LayerNorm::new(store, rng, &n("ln_p2t_tok"), d)?,
                p2t: MultiHeadAttention::new(store, rng, &n("p2t"), d, cfg.heads)?,
            });
        }
        Ok(Self {
            cfg,
            layout,
            queries,
            pixel_pos,
            blocks,
        })
    }

    /// `Z₀ = [queries; refined]`.
    pub fn build_decoder_input<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        refined: Var,
    ) -> Result<Var, KernelError> {
        let q = store.var(g, self.queries);
        g.concat_rows(&[q, refined])
    }

    pub fn biattn_decode<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        z0: Var,
        pixels: Var,
    ) -> Result<Decoded, KernelError> {
        let pe = store.var(g, self.pixel_pos);
        let mut z = z0;
        let mut f = pixels;
        for b in &self.blocks {
            let zn = b.ln_self.forward(g, store, z)?;
            let qk = g.add(zn, z0)?;
            let h = b.self_attn.forward(g, store, qk, qk, zn, AttnMask::None)?;
            z = g.add(z, h)?;

            let zn = b.ln_t2p_tok.forward(g, store, z)?;
            let fnorm = b.ln_t2p_pix.forward(g, store, f)?;
            let q = g.add(zn, z0)?;
            let k = g.add(fnorm, pe)?;
            let h = b.t2p.forward(g, store, q, k, fnorm, AttnMask::None)?;
            z = g.add(z, h)?;

            let zn = b.ln_mlp.forward(g, store, z)?;
            let h = b.mlp.forward(g, store, zn)?;
            z = g.add(z, h)?;

            let fnorm = b.ln_p2t_pix.forward(g, store, f)?;
            let zn = b.ln_p2t_tok.forward(g, store, z)?;
            let q = g.add(fnorm, pe)?;
            let k = g.add(zn, z0)?;
            let h = b.p2t.forward(g, store, q, k, zn, AttnMask::None)?;
            f = g.add(f, h)?;
        }
        Ok(Decoded {
            tokens: z,
            pixels: f,
        })
    }

    /// Sigmoid head from the `[SEG]` query and two-way softmax head from the
    /// `[NOR]`/`[ANO]` queries.
    pub fn mask_heads(&self, g: &mut Graph<'_>, decoded: &Decoded) -> Result<HeadMaps, KernelError> {
        let mut out = HeadMaps {
            seg: None,
            rel: None,
            nor: None,
            ano: None,
        };
        if let Some(r) = self.layout.seg_row() {
            let t = g.slice_rows(decoded.tokens, r, 1)?;
            let logits = g.matmul_t(t, decoded.pixels)?;
            out.seg = Some(g.sigmoid(logits));
        }
        if self.layout.relative {
            let t = g.slice_rows(decoded.tokens, 0, 2)?;
            let logits = g.matmul_t(t, decoded.pixels)?;
            let per_pixel = g.transpose(logits)?;
            let probs = g.softmax(per_pixel)?;
            let rel = g.transpose(probs)?;
            out.nor = Some(g.slice_rows(rel, 0, 1)?);
            out.ano = Some(g.slice_rows(rel, 1, 1)?);
            out.rel = Some(rel);
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.queries, self.pixel_pos];
        for b in &self.blocks {
            for ln in [&b.ln_self, &b.ln_t2p_tok, &b.ln_t2p_pix, &b.ln_mlp, &b.ln_p2t_pix, &b.ln_p2t_tok] {
                out.extend([ln.gain, ln.bias]);
            }
            for a in [&b.self_attn, &b.t2p, &b.p2t] {
                for l in [&a.q, &a.k, &a.v, &a.o] {
                    out.extend(l.params());
                }
            }
            out.extend(b.mlp.fc1.params());
            out.extend(b.mlp.fc2.params());
        }
        out
    }
}

/// Probability maps on the decoder grid plus the fused, upsampled map and
/// its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMaps {
    pub grid: usize,
    pub seg: Option<Vec<f64>>,
    pub nor: Option<Vec<f64>>,
    pub ano: Option<Vec<f64>>,
    /// Fused map on the grid.
    pub fused: Vec<f64>,
    /// Fused map at image resolution.
    pub prob: Vec<f64>,
    pub mask: Mask,
}

/// `α·P_seg + (1 − α)·P_ano`, or whichever map exists alone.
pub fn fuse(seg: Option<&[f64]>, ano: Option<&[f64]>, alpha: f64) -> Vec<f64> {
    match (seg, ano) {
        (Some(s), Some(a)) => s.iter().zip(a).map(|(s, a)| alpha * s + (1.0 - alpha) * a).collect(),
        (Some(s), None) => s.to_vec(),
        (None, Some(a)) => a.to_vec(),
        (None, None) => panic!("fusion needs at least one map"),
    }
}

/// Bilinear resize of a `grid × grid` map by an integer factor, sampling at
/// pixel centres (`src = (dst + ½)/factor − ½`, clamped to the border).
pub fn upsample_bilinear(map: &[f64], grid: usize, factor: usize) -> Vec<f64> {
    let n = grid * factor;
    let coord = |d: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(grid - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        let (y0, y1, wy) = coord(y);
        for x in 0..n {
            let (x0, x1, wx) = coord(x);
            let top = map[y0 * grid + x0] * (1.0 - wx) + map[y0 * grid + x1] * wx;
            let bot = map[y1 * grid + x0] * (1.0 - wx) + map[y1 * grid + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// Strict threshold: exactly 0.5 is background.
pub fn binarize(prob: &[f64], size: usize) -> Mask {
    Mask::from_bits(size, size, prob.iter().map(|&p| p > 0.5).collect()).expect("square map")
}

pub fn fuse_and_binarize(
    seg: Option<&[f64]>,
    ano: Option<&[f64]>,
    alpha: f64,
    grid: usize,
    factor: usize,
) -> (Vec<f64>, Vec<f64>, Mask) {
    let fused = fuse(seg, ano, alpha);
    let prob = upsample_bilinear(&fused, grid, factor);
    let mask = binarize(&prob, grid * factor);
    (fused, prob, mask)
}

impl ProbMaps {
    pub fn from_heads(g: &Graph<'_>, heads: &HeadMaps, alpha: f64, grid: usize, factor: usize) -> Self {
        let get = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
        let (seg, nor, ano) = (get(heads.seg), get(heads.nor), get(heads.ano));
        let (fused, prob, mask) = fuse_and_binarize(seg.as_deref(), ano.as_deref(), alpha, grid, factor);
        Self {
            grid,
            seg,
            nor,
            ano,
            fused,
            prob,
            mask,
        }
    }
}

/// Numerically stable sigmoid of a dot product, for closed-form checks.
pub fn sigmoid_dot(a: &[f64], b: &[f64]) -> f64 {
    sigmoid(a.iter().zip(b).map(|(x, y)| x * y).sum())
}
