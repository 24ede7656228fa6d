//! Semantic–pixel alignment: semantic patches query pixel patches through
//! multi-head cross-attention, and the result joins the language-model input.

use rand::Rng;

use crate::kernel::{AttnMask, Graph, KernelError, Var};
use crate::lm::{LmError, MicroLM};
use crate::nn::{AttentionTrace, LayerNorm, MultiHeadAttention};
use crate::params::{ParamError, ParamStore};

#[derive(Clone, Debug)]
pub struct Spam {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

pub struct AlignOutput {
    /// `LN(f_s + MHCA(f_s, f_p, f_p))`.
    pub aligned: Var,
    /// The cross-attention output before the residual.
    pub attended: AttentionTrace,
}

impl Spam {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        dim: usize,
        heads: usize,
    ) -> Result<Self, ParamError> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, rng, "spam.attn", dim, heads)?,
            norm: LayerNorm::new(store, rng, "spam.norm", dim)?,
        })
    }

    pub fn align<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        f_s: Var,
        f_p: Var,
    ) -> Result<AlignOutput, KernelError> {
        let attended = self.attn.trace(g, store, f_s, f_p, f_p, AttnMask::None)?;
        let sum = g.add(f_s, attended.output)?;
        let aligned = self.norm.forward(g, store, sum)?;
        Ok(AlignOutput { aligned, attended })
    }
}

/// Embedded sequence `[f_s | f_align | embed(text)]` and its image-prefix
/// length. `f_align` is `None` when alignment is disabled.
pub fn assemble_llm_input<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    lm: &MicroLM,
    f_s: Var,
    f_align: Option<Var>,
    text: &[usize],
) -> Result<(Var, usize), LmError> {
    let mut parts = vec![f_s];
    parts.extend(f_align);
    let prefix: usize = parts.iter().map(|v| g.value(*v).rows()).sum();
    lm.check_len(prefix, text.len())?;
    if !text.is_empty() {
        parts.push(lm.embed_tokens(g, store, text)?);
    }
    Ok((g.concat_rows(&parts)?, prefix))
}
