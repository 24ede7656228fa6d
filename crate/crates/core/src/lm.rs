//! Small pre-norm causal transformer over `[image prefix | text]`, greedy
//! generation, anchor hidden-state extraction and the token refiner.
//!
//! Image prefix positions attend freely among themselves; text positions are
//! causal and see the whole prefix. Logit row `j` is produced at the position
//! just before text token `j`, so row 0 sits on the last prefix position and
//! an input of `T` text tokens yields `T + 1` rows.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{AttnMask, Graph, KernelError, Tensor, Var};
use crate::nn::{AdapterError, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{Init, ParamError, ParamStore};
use crate::vocab::{Vocabulary, ANCHORS};
use crate::ParamId;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("sequence of {len} positions exceeds the context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("the image prefix must have at least one position")]
    EmptyPrefix,
    #[error("response lacks anchor(s) {0:?}")]
    AnchorsMissing(Vec<&'static str>),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub mlp_hidden: usize,
    /// Standard deviation of the token, position and head initialisers.
    pub emb_std: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            context: 320,
            mlp_hidden: 256,
            emb_std: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct MicroLM {
    pub cfg: LmConfig,
    pub vocab_size: usize,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// `vocab × dim`; logits are `hidden · headᵀ`.
    pub head: ParamId,
}

pub struct LmOutput {
    /// `(T + 1) × vocab`.
    pub logits: Var,
    /// `(T + 1) × dim`, the final-normalised states that feed the head.
    pub hidden: Var,
}

impl MicroLM {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: LmConfig,
        vocab_size: usize,
    ) -> Result<Self, ParamError> {
        let d = cfg.dim;
        let tok_emb = store.init("lm.tok_emb", &[vocab_size, d], Init::Normal(cfg.emb_std), true, rng)?;
        let pos_emb = store.init("lm.pos_emb", &[cfg.context, d], Init::Normal(cfg.emb_std), true, rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("lm.block{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), d)?,
                attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, cfg.heads)?,
                ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), d)?,
                mlp: Mlp::new(store, rng, &format!("{name}.mlp"), (d, cfg.mlp_hidden, d))?,
            });
        }
        let ln_f = LayerNorm::new(store, rng, "lm.ln_f", d)?;
        let head = store.init("lm.head", &[vocab_size, d], Init::Normal(cfg.emb_std), true, rng)?;
        Ok(Self {
            cfg,
            vocab_size,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    /// Every linear layer inside the transformer blocks.
    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.attn.linears_mut());
            out.push(&mut b.mlp.fc1);
            out.push(&mut b.mlp.fc2);
        }
        out
    }

    pub fn attach_adapters(
        &mut self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        rank: usize,
    ) -> Result<(), AdapterError> {
        for lin in self.linears_mut() {
            lin.attach_adapter(store, rng, rank)?;
        }
        Ok(())
    }

    /// Appends `n` freshly initialised rows to the token embedding and the
    /// output head. Existing rows are untouched.
    pub fn extend_vocab(&mut self, store: &mut ParamStore, rng: &mut impl Rng, n: usize) {
        let d = self.cfg.dim;
        for id in [self.tok_emb, self.head] {
            let p = store.get_mut(id);
            let mut data = p.value.data().to_vec();
            let std = self.cfg.emb_std;
            data.extend((0..n * d).map(|_| std * rng.random_range(-1.7..1.7)));
            p.value = Tensor::new(&[self.vocab_size + n, d], data).expect("shape");
        }
        self.vocab_size += n;
    }

    pub fn embed_tokens<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        ids: &[usize],
    ) -> Result<Var, KernelError> {
        let table = store.var(g, self.tok_emb);
        g.gather_rows(table, ids)
    }

    /// Runs the transformer over `concat(prefix, embed(text))`.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        prefix: Var,
        text: &[usize],
    ) -> Result<LmOutput, LmError> {
        let p = g.value(prefix).rows();
        self.check_len(p, text.len())?;
        let x = if text.is_empty() {
            prefix
        } else {
            let t = self.embed_tokens(g, store, text)?;
            g.concat_rows(&[prefix, t])?
        };
        self.forward_sequence(g, store, x, p)
    }

    pub fn check_len(&self, prefix: usize, text: usize) -> Result<(), LmError> {
        if prefix == 0 {
            return Err(LmError::EmptyPrefix);
        }
        let len = prefix + text;
        if len > self.cfg.context {
            return Err(LmError::ContextOverflow {
                len,
                max: self.cfg.context,
            });
        }
        Ok(())
    }

    /// Runs the transformer over an already embedded sequence whose first
    /// `prefix` rows are image positions.
    pub fn forward_sequence<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        seq: Var,
        prefix: usize,
    ) -> Result<LmOutput, LmError> {
        let len = g.value(seq).rows();
        self.check_len(prefix, len.saturating_sub(prefix))?;
        let pos = store.var(g, self.pos_emb);
        let pos = g.slice_rows(pos, 0, len)?;
        let mut x = g.add(seq, pos)?;
        let mask = AttnMask::PrefixCausal { prefix };
        for b in &self.blocks {
            let h = b.ln1.forward(g, store, x)?;
            let h = b.attn.forward(g, store, h, h, h, mask)?;
            x = g.add(x, h)?;
            let h = b.ln2.forward(g, store, x)?;
            let h = b.mlp.forward(g, store, h)?;
            x = g.add(x, h)?;
        }
        let x = g.slice_rows(x, prefix - 1, len - prefix + 1)?;
        let hidden = self.ln_f.forward(g, store, x)?;
        let head = store.var(g, self.head);
        let logits = g.matmul_t(hidden, head)?;
        Ok(LmOutput { logits, hidden })
    }

    /// Greedy decoding after `prompt`, stopping at `eos` (not included) or
    /// after `max_new` tokens.
    pub fn generate(
        &self,
        store: &ParamStore,
        prefix: &Tensor,
        prompt: &[usize],
        max_new: usize,
        eos: usize,
    ) -> Result<Vec<usize>, LmError> {
        let mut text = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && prefix.rows() + text.len() < self.cfg.context {
            let mut g = Graph::new();
            let pre = g.constant(prefix.clone());
            let o = self.forward(&mut g, store, pre, &text)?;
            let lv = g.value(o.logits);
            let last = lv.row(lv.rows() - 1);
            let next = argmax(last);
            if next == eos {
                break;
            }
            out.push(next);
            text.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Text positions of the first `[NOR]`, `[ANO]` and `[SEG]` in `ids`.
/// Because logit row `j` predicts text token `j`, these are also the hidden
/// rows that produced each anchor.
pub fn anchor_positions(vocab: &Vocabulary, ids: &[usize]) -> Result<[usize; 3], LmError> {
    let anchors = vocab.anchor_ids();
    let mut pos = [usize::MAX; 3];
    for (k, a) in anchors.iter().enumerate() {
        if let Some(i) = ids.iter().position(|t| t == a) {
            pos[k] = i;
        }
    }
    let missing: Vec<&'static str> = (0..3).filter(|&k| pos[k] == usize::MAX).map(|k| ANCHORS[k]).collect();
    if missing.is_empty() {
        Ok(pos)
    } else {
        Err(LmError::AnchorsMissing(missing))
    }
}

/// Gathers the anchor hidden rows `[h_nor; h_ano; h_seg]` as a `3 × dim` var.
pub fn extract_anchor_hidden(
    g: &mut Graph<'_>,
    hidden: Var,
    vocab: &Vocabulary,
    ids: &[usize],
) -> Result<Var, LmError> {
    let pos = anchor_positions(vocab, ids)?;
    Ok(g.gather_rows(hidden, &pos)?)
}

/// Shared two-layer map from the language-model width to the decoder width.
#[derive(Clone, Debug)]
pub struct TokenRefiner {
    pub mlp: Mlp,
}

impl TokenRefiner {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        llm_dim: usize,
        dec_dim: usize,
    ) -> Result<Self, ParamError> {
        Ok(Self {
            mlp: Mlp::new(store, rng, "refiner", (llm_dim, llm_dim, dec_dim))?,
        })
    }

    /// Applies the same map to every row of `h`.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        h: Var,
    ) -> Result<Var, KernelError> {
        self.mlp.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, FdConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> LmConfig {
        LmConfig {
            dim: 8,
            layers: 2,
            heads: 2,
            context: 24,
            mlp_hidden: 16,
            emb_std: 0.2,
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(cfg: LmConfig, vocab: usize) -> (ParamStore, MicroLM, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let lm = MicroLM::new(&mut store, &mut rng, cfg, vocab).unwrap();
        (store, lm, rng)
    }

    fn logits(store: &ParamStore, lm: &MicroLM, prefix: &Tensor, text: &[usize]) -> Tensor {
        let mut g = Graph::new();
        let p = g.constant(prefix.clone());
        let o = lm.forward(&mut g, store, p, text).unwrap();
        g.value(o.logits).clone()
    }

    #[test]
    fn causal_and_shaped() {
        let (store, lm, mut rng) = setup(tiny_cfg(), 12);
        let prefix = rand_tensor(&mut rng, &[4, 8]);
        let a = logits(&store, &lm, &prefix, &[1, 5, 6, 7, 8]);
        let b = logits(&store, &lm, &prefix, &[1, 5, 6, 8, 7]);
        assert_eq!(a.shape(), &[6, 12]);
        for r in 0..4 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(4), b.row(4));
        assert_eq!(logits(&store, &lm, &prefix, &[]).shape(), &[1, 12]);
        let mut g = Graph::new();
        let big = g.constant(rand_tensor(&mut rng, &[20, 8]));
        assert!(matches!(
            lm.forward(&mut g, &store, big, &[1; 5]),
            Err(LmError::ContextOverflow { len: 25, max: 24 })
        ));
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let (store, lm, mut rng) = setup(tiny_cfg(), 12);
        let prefix = rand_tensor(&mut rng, &[4, 8]);
        assert!(lm.generate(&store, &prefix, &[1], 0, 2).unwrap().is_empty());
        let a = lm.generate(&store, &prefix, &[1], 6, 2).unwrap();
        assert_eq!(a, lm.generate(&store, &prefix, &[1], 6, 2).unwrap());
        assert!(a.len() <= 6 && !a.contains(&2));
    }

    #[test]
    fn vocab_extension_keeps_base_logits() {
        let (mut store, mut lm, mut rng) = setup(tiny_cfg(), 12);
        let prefix = rand_tensor(&mut rng, &[4, 8]);
        let before = logits(&store, &lm, &prefix, &[1, 3, 4]);
        lm.extend_vocab(&mut store, &mut rng, 3);
        let after = logits(&store, &lm, &prefix, &[1, 3, 4]);
        assert_eq!(after.cols(), 15);
        for r in 0..before.rows() {
            assert_eq!(&after.row(r)[..12], before.row(r));
            assert_eq!(argmax(&after.row(r)[..12]), argmax(before.row(r)));
        }
    }

    #[test]
    fn adapters_start_as_identity_and_count() {
        let (mut store, mut lm, mut rng) = setup(LmConfig::default(), 20);
        let prefix = rand_tensor(&mut rng, &[3, 64]);
        let before = logits(&store, &lm, &prefix, &[1, 2]);
        let scalars = store.trainable_scalars();
        lm.blocks[0].attn.q.attach_adapter(&mut store, &mut rng, 4).unwrap();
        assert_eq!(store.trainable_scalars() - scalars, 512);
        assert!(matches!(
            lm.blocks[0].attn.q.attach_adapter(&mut store, &mut rng, 4),
            Err(AdapterError::AlreadyAdapted)
        ));
        assert!(matches!(
            lm.blocks[0].attn.k.attach_adapter(&mut store, &mut rng, 64),
            Err(AdapterError::RankTooLarge { .. })
        ));
        assert_eq!(logits(&store, &lm, &prefix, &[1, 2]), before);
    }

    #[test]
    fn anchor_positions_first_occurrence() {
        let v = Vocabulary::from_texts(["Sure, it is [NOR][ANO][SEG]."]);
        let ids = v.tokenize("Sure, it is [NOR][ANO][SEG] [SEG].");
        let pos = anchor_positions(&v, &ids).unwrap();
        let anchors = v.anchor_ids();
        for k in 0..3 {
            let scan = (0..ids.len()).find(|&i| ids[i] == anchors[k]).unwrap();
            assert_eq!(pos[k], scan);
        }
        assert_eq!(pos, [4, 5, 6]);
        match anchor_positions(&v, &v.tokenize("Sure, it is [NOR][ANO].")) {
            Err(LmError::AnchorsMissing(m)) => assert_eq!(m, vec!["[SEG]"]),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn refiner_shares_weights_and_zero_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let r = TokenRefiner::new(&mut store, &mut rng, 64, 32).unwrap();
        let row = rand_tensor(&mut rng, &[1, 64]).into_data();
        let h = Tensor::new(&[2, 64], [row.clone(), row].concat()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let y = r.forward(&mut g, &store, x).unwrap();
        let y = g.value(y);
        assert_eq!(y.shape(), &[2, 32]);
        assert_eq!(y.row(0), y.row(1));
        for id in r.mlp.fc1.params().into_iter().chain(r.mlp.fc2.params()) {
            let p = store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut g = Graph::new();
        let x = g.constant(h);
        let y = r.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn anchor_rows_through_refiner_gradcheck() {
        let v = Vocabulary::from_texts(["it is [NOR][ANO][SEG]."]);
        let cfg = tiny_cfg();
        // Unit-scale activations keep the 1e-3 central difference accurate;
        // with 0.02 embeddings layer norm amplifies the step fifty-fold.
        let (mut store, lm, mut rng) = setup(cfg, v.len());
        let refiner = TokenRefiner::new(&mut store, &mut rng, 8, 4).unwrap();
        let prefix = rand_tensor(&mut rng, &[3, 8]);
        let ids = v.tokenize("it is [NOR][ANO][SEG].");
        let all: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let report = check_params(&store, &all, FdConfig::default(), |_, n| (0..n).collect(), |g, s| {
            let p = g.constant(prefix.clone());
            let o = lm.forward(g, s, p, &ids).map_err(|e| match e {
                LmError::Kernel(k) => k,
                _ => unreachable!(),
            })?;
            let h = extract_anchor_hidden(g, o.hidden, &v, &ids).expect("anchors");
            let r = refiner.forward(g, s, h)?;
            let r2 = g.mul(r, r)?;
            Ok(g.sum(r2))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
