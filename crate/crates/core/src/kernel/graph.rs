use std::borrow::Cow;

use super::gemm::{gemm, View};
use super::{KernelError, ParamId, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys each query may attend to in [`Graph::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Queries and keys share one sequence. Positions before `prefix` see the
    /// whole prefix and nothing after it; later positions are causal.
    PrefixCausal { prefix: usize },
}

impl AttnMask {
    fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::PrefixCausal { prefix } => {
                if query < prefix {
                    key < prefix
                } else {
                    key <= query
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
        clamp: f64,
    },
    Dice {
        p: Var,
        target: Vec<f64>,
        eps: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter leaf, in creation order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

/// Recorded computation for one forward pass.
///
/// Nodes are appended in creation order, which is a valid topological order;
/// `backward` walks them in reverse exactly once.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    param_nodes: Vec<(ParamId, usize)>,
    consumed: bool,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> KernelError {
    KernelError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf holding `value`; gradients are tracked when `requires_grad`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Borrowed parameter leaf; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: &'a Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: trainable,
        });
        let idx = self.nodes.len() - 1;
        if trainable {
            self.param_nodes.push((id, idx));
        }
        Var(idx)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::rm(av.data(), 0, k),
            View::rm(bv.data(), 0, n),
            0.0,
            &mut out,
            0,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(mismatch("matmul_t", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::rm(av.data(), 0, k),
            View::tr(bv.data(), 0, k),
            0.0,
            &mut out,
            0,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.numel() != n || av.shape().len() != 2 {
            return Err(mismatch("add_row", av, bv));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.shape(), av.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.shape(), av.data().iter().map(|&x| sigmoid(x)).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::new(
            av.shape(),
            av.data().iter().map(|&x| gelu_parts(x).0).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, KernelError> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(KernelError::NonFinite { op: "softmax" });
        }
        let n = av.cols();
        let mut data = av.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Per-row normalisation (ε = 1e-5) followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, KernelError> {
        const EPS: f64 = 1e-5;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if d == 0 || gv.numel() != d || bv.numel() != d {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let rows = xv.numel() / d;
        let mut out = vec![0.0; xv.numel()];
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Stacks rank-2 parts along rows, preserving argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let first = parts.first().ok_or(KernelError::Empty { op: "concat_rows" })?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.cols() != d {
                return Err(mismatch("concat_rows", self.value(*first), pv));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(&[rows, d], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, KernelError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.rows() {
            return Err(KernelError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                len: xv.rows(),
            });
        }
        let d = xv.cols();
        let value = Tensor::new(&[len, d], xv.data()[start * d..(start + len) * d].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Row lookup, as used for token embeddings.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, KernelError> {
        let tv = self.value(table);
        let d = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= tv.rows() {
                return Err(KernelError::OutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: tv.rows(),
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, KernelError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(mismatch("transpose", xv, xv));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv.data()[i * n + j];
            }
        }
        let value = Tensor::new(&[n, m], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, KernelError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q: n×d`, `k, v: m×d`; heads split the feature axis into equal blocks.
    /// Returns the `n×d` concatenation of per-head outputs.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
    ) -> Result<Var, KernelError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0
            || d % heads != 0
            || kv.cols() != d
            || vv.cols() != d
            || kv.rows() != vv.rows()
            || kv.rows() == 0
        {
            return Err(mismatch("attention", qv, kv));
        }
        let (n, m) = (qv.rows(), kv.rows());
        if let AttnMask::PrefixCausal { .. } = mask {
            if n != m {
                return Err(mismatch("attention(mask)", qv, kv));
            }
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                n,
                dk,
                m,
                scale,
                View::rm(qv.data(), h * dk, d),
                View::tr(kv.data(), h * dk, d),
                0.0,
                p,
                0,
                m,
            );
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                if mask != AttnMask::None {
                    for (j, s) in row.iter_mut().enumerate() {
                        if !mask.allows(i, j) {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                }
                softmax_in_place(row);
            }
            gemm(
                n,
                m,
                dk,
                1.0,
                View::rm(p, 0, m),
                View::rm(vv.data(), h * dk, d),
                0.0,
                &mut out,
                h * dk,
                d,
            );
        }
        if out.iter().any(|x| x.is_nan()) {
            return Err(KernelError::NonFinite { op: "attention" });
        }
        let value = Tensor::new(&[n, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities saved by an [`Graph::attention`] node, laid out
    /// as `heads × queries × keys`.
    pub fn attention_probs(&self, var: Var) -> Option<&[f64]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, KernelError> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        if lv.shape().len() != 2 || lv.rows() != targets.len() {
            return Err(KernelError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(KernelError::Empty {
                op: "cross_entropy",
            });
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(KernelError::OutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: vocab,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            for (p, x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        if !total.is_finite() {
            return Err(KernelError::NonFinite {
                op: "cross_entropy",
            });
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy with `p` clamped to `[clamp, 1 − clamp]`.
    pub fn bce(&mut self, p: Var, target: &Tensor, clamp: f64) -> Result<Var, KernelError> {
        let pv = self.value(p);
        if pv.numel() != target.numel() {
            return Err(mismatch("bce", pv, target));
        }
        let n = pv.numel().max(1) as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let pc = p.clamp(clamp, 1.0 - clamp);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.data().to_vec(),
                clamp,
            },
            rg,
        ))
    }

    /// Smoothed Dice loss `1 − (2Σpt + ε)/(Σp + Σt + ε)`.
    pub fn dice(&mut self, p: Var, target: &Tensor, eps: f64) -> Result<Var, KernelError> {
        let pv = self.value(p);
        if pv.numel() != target.numel() {
            return Err(mismatch("dice", pv, target));
        }
        let inter: f64 = pv.data().iter().zip(target.data()).map(|(p, t)| p * t).sum();
        let total: f64 = pv.data().iter().sum::<f64>() + target.data().iter().sum::<f64>();
        let loss = 1.0 - (2.0 * inter + eps) / (total + eps);
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                p,
                target: target.data().to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// A graph can be differentiated once; a second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, KernelError> {
        if self.consumed {
            return Err(KernelError::GraphConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(KernelError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let seed = Tensor::new(lv.shape(), vec![1.0]).expect("scalar");
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        // Only leaves keep meaningful gradients for callers; interior ones are
        // retained too since tests inspect them.
        Ok(Gradients {
            grads,
            params: self.param_nodes.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let g = gout.data();
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        let shape_of = |v: &Var| self.nodes[v.0].value.shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if rg(a) {
                    accumulate(&mut grads[a.0], av.shape(), |da| {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            View::rm(g, 0, n),
                            View::tr(bv.data(), 0, n),
                            1.0,
                            da,
                            0,
                            k,
                        )
                    });
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], bv.shape(), |db| {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            View::tr(av.data(), 0, k),
                            View::rm(g, 0, n),
                            1.0,
                            db,
                            0,
                            n,
                        )
                    });
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if rg(a) {
                    accumulate(&mut grads[a.0], av.shape(), |da| {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            View::rm(g, 0, n),
                            View::rm(bv.data(), 0, k),
                            1.0,
                            da,
                            0,
                            k,
                        )
                    });
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], bv.shape(), |db| {
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            View::tr(g, 0, n),
                            View::rm(av.data(), 0, k),
                            1.0,
                            db,
                            0,
                            k,
                        )
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(a) {
                    accumulate(&mut grads[a.0], &shape_of(a), |da| {
                        da.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                    });
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], &shape_of(b), |db| {
                        db.iter_mut().zip(g).for_each(|(d, x)| *d += sign * x)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if rg(a) {
                    accumulate(&mut grads[a.0], av.shape(), |da| {
                        for ((d, x), y) in da.iter_mut().zip(g).zip(bv.data()) {
                            *d += x * y;
                        }
                    });
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], bv.shape(), |db| {
                        for ((d, x), y) in db.iter_mut().zip(g).zip(av.data()) {
                            *d += x * y;
                        }
                    });
                }
            }
            Op::AddRow(a, bias) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], &shape_of(a), |da| {
                        da.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                    });
                }
                if rg(bias) {
                    let bshape = shape_of(bias);
                    let n = gout.cols();
                    accumulate(&mut grads[bias.0], &bshape, |db| {
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], &shape_of(a), |da| {
                        da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x)
                    });
                }
            }
            Op::Sigmoid(a) => {
                if rg(a) {
                    let y = node.value.data();
                    accumulate(&mut grads[a.0], &shape_of(a), |da| {
                        for ((d, x), y) in da.iter_mut().zip(g).zip(y) {
                            *d += x * y * (1.0 - y);
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if rg(a) {
                    let xv = self.value(*a);
                    accumulate(&mut grads[a.0], xv.shape(), |da| {
                        for ((d, x), &xi) in da.iter_mut().zip(g).zip(xv.data()) {
                            *d += x * gelu_parts(xi).1;
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if rg(a) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    accumulate(&mut grads[a.0], &shape_of(a), |da| {
                        for ((drow, grow), yrow) in
                            da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += yi * (gi - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                if rg(gain) {
                    accumulate(&mut grads[gain.0], &shape_of(gain), |dg| {
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += grow[j] * hrow[j];
                            }
                        }
                    });
                }
                if rg(bias) {
                    accumulate(&mut grads[bias.0], &shape_of(bias), |db| {
                        for grow in g.chunks(d) {
                            db.iter_mut().zip(grow).for_each(|(d, x)| *d += x);
                        }
                    });
                }
                if rg(x) {
                    accumulate(&mut grads[x.0], &shape_of(x), |dx| {
                        let mut dxhat = vec![0.0; d];
                        for (r, ((dxrow, grow), hrow)) in dx
                            .chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .enumerate()
                        {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                dxhat[j] = grow[j] * gv[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * hrow[j];
                            }
                            let c = rstd[r] / d as f64;
                            for j in 0..d {
                                dxrow[j] += c * (d as f64 * dxhat[j] - s1 - hrow[j] * s2);
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if rg(p) {
                        let seg = &g[offset..offset + len];
                        accumulate(&mut grads[p.0], &shape_of(p), |dp| {
                            dp.iter_mut().zip(seg).for_each(|(d, x)| *d += x)
                        });
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if rg(x) {
                    let d = node.value.cols();
                    accumulate(&mut grads[x.0], &shape_of(x), |dx| {
                        dx[start * d..start * d + g.len()]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, x)| *d += x)
                    });
                }
            }
            Op::GatherRows { table, ids } => {
                if rg(table) {
                    let d = node.value.cols();
                    accumulate(&mut grads[table.0], &shape_of(table), |dt| {
                        for (i, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += g[i * d + j];
                            }
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                if rg(x) {
                    let (n, m) = (node.value.rows(), node.value.cols());
                    accumulate(&mut grads[x.0], &shape_of(x), |dx| {
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if rg(x) {
                    accumulate(&mut grads[x.0], &shape_of(x), |dx| {
                        dx.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                    });
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if rg(x) {
                    let n = self.value(*x).numel().max(1) as f64;
                    let s = if matches!(node.op, Op::Mean(_)) {
                        g[0] / n
                    } else {
                        g[0]
                    };
                    accumulate(&mut grads[x.0], &shape_of(x), |dx| {
                        dx.iter_mut().for_each(|d| *d += s)
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if rg(logits) {
                    let vocab = self.value(*logits).cols();
                    let s = g[0] / *count as f64;
                    accumulate(&mut grads[logits.0], &shape_of(logits), |dl| {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            let row = &mut dl[r * vocab..(r + 1) * vocab];
                            for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                                *d += s * p;
                            }
                            row[t] -= s;
                        }
                    });
                }
            }
            Op::Bce { p, target, clamp } => {
                if rg(p) {
                    let pv = self.value(*p).data();
                    let n = pv.len().max(1) as f64;
                    let s = g[0] / n;
                    accumulate(&mut grads[p.0], &shape_of(p), |dp| {
                        for ((d, &pi), &t) in dp.iter_mut().zip(pv).zip(target) {
                            if pi > *clamp && pi < 1.0 - clamp {
                                *d += s * (-(t / pi) + (1.0 - t) / (1.0 - pi));
                            }
                        }
                    });
                }
            }
            Op::Dice { p, target, eps } => {
                if rg(p) {
                    let pv = self.value(*p).data();
                    let inter: f64 = pv.iter().zip(target).map(|(p, t)| p * t).sum();
                    let total: f64 = pv.iter().sum::<f64>() + target.iter().sum::<f64>();
                    let den = total + eps;
                    let num = 2.0 * inter + eps;
                    accumulate(&mut grads[p.0], &shape_of(p), |dp| {
                        for (d, &t) in dp.iter_mut().zip(target) {
                            *d -= g[0] * (2.0 * t * den - num) / (den * den);
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (n, m) = (qv.rows(), kv.rows());
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (rq, rk, rv) = (
            self.nodes[q.0].requires_grad,
            self.nodes[k.0].requires_grad,
            self.nodes[v.0].requires_grad,
        );
        let mut ds = vec![0.0; n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            if rv {
                accumulate(&mut grads[v.0], vv.shape(), |dv| {
                    gemm(
                        m,
                        n,
                        dk,
                        1.0,
                        View::tr(p, 0, m),
                        View::rm(g, h * dk, d),
                        1.0,
                        dv,
                        h * dk,
                        d,
                    )
                });
            }
            if !(rq || rk) {
                continue;
            }
            // dP = dO·Vᵀ, then the softmax Jacobian row by row.
            gemm(
                n,
                dk,
                m,
                1.0,
                View::rm(g, h * dk, d),
                View::tr(vv.data(), h * dk, d),
                0.0,
                &mut ds,
                0,
                m,
            );
            for i in 0..n {
                let prow = &p[i * m..(i + 1) * m];
                let drow = &mut ds[i * m..(i + 1) * m];
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (dv, pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            if rq {
                accumulate(&mut grads[q.0], qv.shape(), |dq| {
                    gemm(
                        n,
                        m,
                        dk,
                        scale,
                        View::rm(&ds, 0, m),
                        View::rm(kv.data(), h * dk, d),
                        1.0,
                        dq,
                        h * dk,
                        d,
                    )
                });
            }
            if rk {
                accumulate(&mut grads[k.0], kv.shape(), |dkk| {
                    gemm(
                        m,
                        n,
                        dk,
                        scale,
                        View::tr(&ds, 0, m),
                        View::rm(qv.data(), h * dk, d),
                        1.0,
                        dkk,
                        h * dk,
                        d,
                    )
                });
            }
        }
    }
}
