//! Parameterised building blocks shared by the language model, the alignment
//! module and the mask decoder.

use rand::Rng;
use thiserror::Error;

use crate::kernel::{AttnMask, Graph, KernelError, Var};
use crate::params::{Init, ParamError, ParamStore};
use crate::ParamId;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter rank {rank} must be below min({rows}, {cols})")]
    RankTooLarge {
        rank: usize,
        rows: usize,
        cols: usize,
    },
    #[error("layer already carries an adapter")]
    AlreadyAdapted,
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Trainable low-rank update `down · up`, added to a frozen weight.
#[derive(Clone, Debug)]
pub struct LowRankAdapter {
    /// `in × rank`, random.
    pub down: ParamId,
    /// `rank × out`, zero at creation so the adapted layer starts unchanged.
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// `y = x·W + b`, with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<LowRankAdapter>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self, ParamError> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.init(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            Init::Uniform(bound),
            true,
            rng,
        )?;
        let bias = if bias {
            Some(store.init(format!("{name}.bias"), &[out_dim], Init::Zeros, false, rng)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_owned(),
            weight,
            bias,
            adapter: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
    ) -> Result<Var, KernelError> {
        let w = store.var(g, self.weight);
        let mut y = g.matmul(x, w)?;
        if let Some(a) = &self.adapter {
            let down = store.var(g, a.down);
            let up = store.var(g, a.up);
            let h = g.matmul(x, down)?;
            let h = g.matmul(h, up)?;
            let h = g.scale(h, a.scale);
            y = g.add(y, h)?;
        }
        if let Some(b) = self.bias {
            let b = store.var(g, b);
            y = g.add_row(y, b)?;
        }
        Ok(y)
    }

    /// Attaches a rank-`rank` adapter (`rank` must be below both extents).
    pub fn attach_adapter(
        &mut self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        rank: usize,
    ) -> Result<(), AdapterError> {
        if self.adapter.is_some() {
            return Err(AdapterError::AlreadyAdapted);
        }
        if rank == 0 || rank >= self.in_dim.min(self.out_dim) {
            return Err(AdapterError::RankTooLarge {
                rank,
                rows: self.in_dim,
                cols: self.out_dim,
            });
        }
        let down = store.init(
            format!("{}.lora_down", self.name),
            &[self.in_dim, rank],
            Init::Normal(1.0 / (self.in_dim as f64).sqrt()),
            false,
            rng,
        )?;
        let up = store.init(
            format!("{}.lora_up", self.name),
            &[rank, self.out_dim],
            Init::Zeros,
            false,
            rng,
        )?;
        self.adapter = Some(LowRankAdapter {
            down,
            up,
            rank,
            scale: 1.0,
        });
        Ok(())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.weight];
        out.extend(self.bias);
        if let Some(a) = &self.adapter {
            out.extend([a.down, a.up]);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self, ParamError> {
        Ok(Self {
            gain: store.init(format!("{name}.gain"), &[dim], Init::Ones, false, rng)?,
            bias: store.init(format!("{name}.bias"), &[dim], Init::Zeros, false, rng)?,
        })
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
    ) -> Result<Var, KernelError> {
        let gain = store.var(g, self.gain);
        let bias = store.var(g, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: (usize, usize, usize),
    ) -> Result<Self, ParamError> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dims.0, dims.1, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dims.1, dims.2, true)?,
        })
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
    ) -> Result<Var, KernelError> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Intermediate values of one attention call, for inspection in tests.
pub struct AttentionTrace {
    pub output: Var,
    /// Concatenated per-head outputs before the output projection.
    pub mixed: Var,
    pub values: Var,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self, ParamError> {
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn trace<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: AttnMask,
    ) -> Result<AttentionTrace, KernelError> {
        let q = self.q.forward(g, store, q_in)?;
        let k = self.k.forward(g, store, k_in)?;
        let values = self.v.forward(g, store, v_in)?;
        let mixed = g.attention(q, k, values, self.heads, mask)?;
        let output = self.o.forward(g, store, mixed)?;
        Ok(AttentionTrace {
            output,
            mixed,
            values,
        })
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: AttnMask,
    ) -> Result<Var, KernelError> {
        Ok(self.trace(g, store, q_in, k_in, v_in, mask)?.output)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}
