//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node. Parameters are registered
//! by id; [`Graph::backward`] returns a [`GradReport`] with one gradient per
//! registered parameter, zero-filled when the loss does not depend on it.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{self, split_axis, Real, Result, Tensor, TensorError};

/// Named trainable tensors, iterated in lexicographic id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F: Real = f32> {
    entries: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let id = id.into();
        if self.entries.contains_key(&id) {
            return Err(TensorError::Contract(format!(
                "duplicate parameter id `{id}`"
            )));
        }
        self.entries.insert(id, value);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(id)
            .ok_or_else(|| TensorError::UnknownParam(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Tensor<F>> {
        self.entries
            .get_mut(id)
            .ok_or_else(|| TensorError::UnknownParam(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport<F: Real = f32> {
    pub loss: F,
    pub grads: ParamSet<F>,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Token-axis padding for the sequence-preserving convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenPadding {
    /// Zero-pad so the token axis keeps its length.
    Same,
    /// No padding; the token axis shrinks by `kernel_tokens - 1`.
    Valid,
}

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Gelu {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<F>,
    },
    Reshape {
        x: Var,
    },
    Scale {
        x: Var,
        s: Var,
    },
    SwapLast2 {
        x: Var,
    },
    SelectLast {
        x: Var,
        index: usize,
    },
    StackLast {
        xs: Vec<Var>,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    Conv {
        x: Var,
        k: Var,
        b: Var,
        pad_before: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Recorded computation for one forward pass.
#[derive(Debug)]
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, Var>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    /// Graph with every entry of `params` registered as a trainable leaf.
    pub fn with_params(params: &ParamSet<F>) -> Self {
        let mut g = Self::new();
        for (id, t) in params.iter() {
            let v = g.push(t.clone(), Op::Leaf);
            g.params.insert(id.to_string(), v);
        }
        g
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn register(&mut self, id: impl Into<String>, value: Tensor<F>) -> Result<Var> {
        let id = id.into();
        if self.params.contains_key(&id) {
            return Err(TensorError::Contract(format!(
                "duplicate parameter id `{id}`"
            )));
        }
        let v = self.push(value, Op::Leaf);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn param(&self, id: &str) -> Result<Var> {
        self.params
            .get(id)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(id.to_string()))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tensor::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Affine { x, w, b }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(y, Op::Softmax { x, axis }))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = tensor::gelu(self.value(x))?;
        Ok(self.push(y, Op::Gelu { x }))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let loss = tensor::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of raw logits against 0/1 targets.
    pub fn bce_logits(&mut self, logits: Var, targets: &[F]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != targets.len() {
            return Err(TensorError::Dimension {
                op: "bce_logits",
                lhs: z.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (&zi, &yi) in z.data().iter().zip(targets) {
            let (zi, yi) = (zi.as_f64(), yi.as_f64());
            if !(0.0..=1.0).contains(&yi) {
                return Err(TensorError::Contract(format!(
                    "binary target {yi} not in [0, 1]"
                )));
            }
            // max(z, 0) - z*y + log(1 + exp(-|z|))
            total += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let loss = Tensor::scalar(F::of(total / targets.len() as f64)).checked("bce_logits")?;
        Ok(self.push(
            loss,
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sv).collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), data).checked("scale")?;
        Ok(self.push(y, Op::Scale { x, s }))
    }

    /// Swaps the last two axes.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(TensorError::Contract(format!(
                "swap_last2 needs rank >= 2, got {:?}",
                xv.shape()
            )));
        }
        let y = swap_last2_kernel(xv);
        Ok(self.push(y, Op::SwapLast2 { x }))
    }

    /// Slice `x[..., index]`, dropping the last axis.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if index >= n || xv.rank() < 2 {
            return Err(TensorError::Dimension {
                op: "select_last",
                lhs: xv.shape().to_vec(),
                rhs: vec![index],
            });
        }
        let data = xv.data().iter().skip(index).step_by(n).copied().collect();
        let shape = xv.shape()[..xv.rank() - 1].to_vec();
        let y = Tensor::from_parts(shape, data);
        Ok(self.push(y, Op::SelectLast { x, index }))
    }

    /// Stacks equally shaped tensors along a new last axis.
    pub fn stack_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Contract("stack_last of zero tensors".into()))?;
        let shape = self.shape(*first).to_vec();
        for &v in xs {
            if self.shape(v) != shape.as_slice() {
                return Err(TensorError::Dimension {
                    op: "stack_last",
                    lhs: shape,
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let k = xs.len();
        let numel: usize = shape.iter().product();
        let mut data = vec![F::zero(); numel * k];
        for (c, &v) in xs.iter().enumerate() {
            for (i, &val) in self.value(v).data().iter().enumerate() {
                data[i * k + c] = val;
            }
        }
        let mut out_shape = shape;
        out_shape.push(k);
        let y = Tensor::from_parts(out_shape, data);
        Ok(self.push(y, Op::StackLast { xs: xs.to_vec() }))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, rb) = (av.rank(), bv.rank());
        if ra != rb || av.shape()[..ra - 1] != bv.shape()[..rb - 1] {
            return Err(TensorError::Dimension {
                op: "concat_last",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (na, nb) = (av.last_dim(), bv.last_dim());
        let rows = av.numel() / na;
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * na..(r + 1) * na]);
            data.extend_from_slice(&bv.data()[r * nb..(r + 1) * nb]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let y = Tensor::from_parts(shape, data);
        Ok(self.push(y, Op::ConcatLast { a, b }))
    }

    /// Convolution over `x[..., T, H, C_in]` with kernel `[K_t, K_h, C_in, C_out]`
    /// and bias `[C_out]`. Stride 1; the hidden axis is never padded.
    pub fn conv(&mut self, x: Var, k: Var, b: Var, padding: TokenPadding) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let dims = ConvDims::resolve(xv.shape(), kv.shape(), bv.shape(), padding)?;
        let y = conv_forward(xv, kv, bv, &dims).checked("conv")?;
        let pad_before = dims.pad_before;
        Ok(self.push(
            y,
            Op::Conv {
                x,
                k,
                b,
                pad_before,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<F>();
        let y = Tensor::scalar(total).checked("sum")?;
        Ok(self.push(y, Op::Sum { x }))
    }

    fn zip_same(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::Dimension {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(av.shape().to_vec(), data).checked(op)
    }

    /// Gradients of the single-element `loss` with respect to every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<GradReport<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }

        let mut out = ParamSet::new();
        for (id, &v) in &self.params {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.insert(id.clone(), g)?;
        }
        Ok(GradReport {
            loss: lv.item()?,
            grads: out,
        })
    }

    fn propagate(
        &self,
        node: &Node<F>,
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let mut acc = |v: Var, g: Tensor<F>| accumulate(&mut grads[v.0], g);
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / d_in;
                let mut gx = vec![F::zero(); xv.numel()];
                let mut gw = vec![F::zero(); wv.numel()];
                let mut gb = vec![F::zero(); d_out];
                for r in 0..rows {
                    let g_row = &gy.data()[r * d_out..(r + 1) * d_out];
                    let x_row = &xv.data()[r * d_in..(r + 1) * d_in];
                    for (gbj, &gj) in gb.iter_mut().zip(g_row) {
                        *gbj = *gbj + gj;
                    }
                    for i in 0..d_in {
                        let w_row = &wv.data()[i * d_out..(i + 1) * d_out];
                        let gw_row = &mut gw[i * d_out..(i + 1) * d_out];
                        let mut s = F::zero();
                        let xi = x_row[i];
                        for j in 0..d_out {
                            s = s + g_row[j] * w_row[j];
                            gw_row[j] = gw_row[j] + xi * g_row[j];
                        }
                        gx[r * d_in + i] = s;
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
                acc(*w, Tensor::from_parts(wv.shape().to_vec(), gw));
                acc(*b, Tensor::from_parts(vec![d_out], gb));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let mut gx = vec![F::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: F = (0..len).map(|k| y.data()[at(k)] * gy.data()[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y.data()[at(k)] * (gy.data()[at(k)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| g * F::of(tensor::gelu_grad_scalar(v.as_f64())))
                    .collect();
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let (rows, classes) = (lv.shape()[0], lv.shape()[1]);
                let scale = gy.data()[0].as_f64() / rows as f64;
                let mut g = Vec::with_capacity(lv.numel());
                for (r, &t) in targets.iter().enumerate() {
                    let ls = tensor::log_softmax_row(&lv.data()[r * classes..(r + 1) * classes]);
                    for (k, l) in ls.into_iter().enumerate() {
                        let ind = if k == t { 1.0 } else { 0.0 };
                        g.push(F::of((l.exp() - ind) * scale));
                    }
                }
                acc(*logits, Tensor::from_parts(lv.shape().to_vec(), g));
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits);
                let scale = gy.data()[0].as_f64() / targets.len() as f64;
                let g = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| {
                        let p = 1.0 / (1.0 + (-z.as_f64()).exp());
                        F::of((p - y.as_f64()) * scale)
                    })
                    .collect();
                acc(*logits, Tensor::from_parts(lv.shape().to_vec(), g));
            }
            Op::Reshape { x } => {
                acc(*x, gy.reshape(self.shape(*x))?);
            }
            Op::Scale { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s).item()?;
                let gs: F = xv.data().iter().zip(gy.data()).map(|(&a, &g)| a * g).sum();
                let gx = gy.data().iter().map(|&g| g * sv).collect();
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
                acc(*s, Tensor::from_parts(self.shape(*s).to_vec(), vec![gs]));
            }
            Op::SwapLast2 { x } => {
                acc(*x, swap_last2_kernel(gy));
            }
            Op::SelectLast { x, index } => {
                let xv = self.value(*x);
                let n = xv.last_dim();
                let mut g = vec![F::zero(); xv.numel()];
                for (r, &v) in gy.data().iter().enumerate() {
                    g[r * n + index] = v;
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), g));
            }
            Op::StackLast { xs } => {
                let k = xs.len();
                for (c, &v) in xs.iter().enumerate() {
                    let g = gy.data().iter().skip(c).step_by(k).copied().collect();
                    acc(v, Tensor::from_parts(self.shape(v).to_vec(), g));
                }
            }
            Op::ConcatLast { a, b } => {
                let (na, nb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let rows = gy.numel() / (na + nb);
                let mut ga = Vec::with_capacity(rows * na);
                let mut gb = Vec::with_capacity(rows * nb);
                for r in 0..rows {
                    let row = &gy.data()[r * (na + nb)..(r + 1) * (na + nb)];
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                acc(*a, Tensor::from_parts(self.shape(*a).to_vec(), ga));
                acc(*b, Tensor::from_parts(self.shape(*b).to_vec(), gb));
            }
            Op::Conv {
                x,
                k,
                b,
                pad_before,
            } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let dims = ConvDims::from_output(xv.shape(), kv.shape(), gy.shape(), *pad_before);
                let (gx, gk, gb) = conv_backward(xv, kv, gy, &dims);
                acc(*x, gx);
                acc(*k, gk);
                acc(*b, gb);
            }
            Op::Add { a, b } => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = gy
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                let gb = gy
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                acc(*a, Tensor::from_parts(av.shape().to_vec(), ga));
                acc(*b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
            Op::Sum { x } => {
                let g = gy.data()[0];
                acc(*x, Tensor::full(self.shape(*x), g));
            }
        }
        Ok(())
    }
}

fn accumulate<F: Real>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn swap_last2_kernel<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let r = x.rank();
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let blocks = x.numel() / (m * n);
    let mut data = vec![F::zero(); x.numel()];
    for blk in 0..blocks {
        let base = blk * m * n;
        for i in 0..m {
            for j in 0..n {
                data[base + j * m + i] = x.data()[base + i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, data)
}

#[derive(Debug, Clone)]
struct ConvDims {
    lead: usize,
    t_in: usize,
    t_out: usize,
    h_in: usize,
    h_out: usize,
    c_in: usize,
    c_out: usize,
    kt: usize,
    kh: usize,
    pad_before: usize,
    out_shape: Vec<usize>,
}

impl ConvDims {
    fn resolve(x: &[usize], k: &[usize], b: &[usize], padding: TokenPadding) -> Result<Self> {
        let bad = || TensorError::Dimension {
            op: "conv",
            lhs: x.to_vec(),
            rhs: k.to_vec(),
        };
        if x.len() < 3 || k.len() != 4 {
            return Err(bad());
        }
        let r = x.len();
        let (t_in, h_in, c_in) = (x[r - 3], x[r - 2], x[r - 1]);
        let (kt, kh, kc, c_out) = (k[0], k[1], k[2], k[3]);
        if kc != c_in || kh > h_in {
            return Err(bad());
        }
        if b != [c_out] {
            return Err(TensorError::Dimension {
                op: "conv bias",
                lhs: k.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (t_out, pad_before) = match padding {
            TokenPadding::Same => (t_in, (kt - 1) / 2),
            TokenPadding::Valid => {
                if kt > t_in {
                    return Err(bad());
                }
                (t_in - kt + 1, 0)
            }
        };
        let h_out = h_in - kh + 1;
        let mut out_shape = x[..r - 3].to_vec();
        out_shape.extend([t_out, h_out, c_out]);
        Ok(Self {
            lead: x[..r - 3].iter().product(),
            t_in,
            t_out,
            h_in,
            h_out,
            c_in,
            c_out,
            kt,
            kh,
            pad_before,
            out_shape,
        })
    }

    fn from_output(x: &[usize], k: &[usize], y: &[usize], pad_before: usize) -> Self {
        let r = x.len();
        Self {
            lead: x[..r - 3].iter().product(),
            t_in: x[r - 3],
            t_out: y[r - 3],
            h_in: x[r - 2],
            h_out: y[r - 2],
            c_in: x[r - 1],
            c_out: k[3],
            kt: k[0],
            kh: k[1],
            pad_before,
            out_shape: y.to_vec(),
        }
    }

    /// Input token index feeding output token `t` at kernel row `dt`, if in range.
    fn src_token(&self, t: usize, dt: usize) -> Option<usize> {
        (t + dt)
            .checked_sub(self.pad_before)
            .filter(|&s| s < self.t_in)
    }
}

fn conv_forward<F: Real>(x: &Tensor<F>, k: &Tensor<F>, b: &Tensor<F>, d: &ConvDims) -> Tensor<F> {
    let mut out = vec![F::zero(); d.lead * d.t_out * d.h_out * d.c_out];
    let (xd, kd) = (x.data(), k.data());
    for l in 0..d.lead {
        for t in 0..d.t_out {
            for h in 0..d.h_out {
                let o_base = ((l * d.t_out + t) * d.h_out + h) * d.c_out;
                let acc = &mut out[o_base..o_base + d.c_out];
                acc.copy_from_slice(b.data());
                for dt in 0..d.kt {
                    let Some(st) = d.src_token(t, dt) else {
                        continue;
                    };
                    for dh in 0..d.kh {
                        let x_base = ((l * d.t_in + st) * d.h_in + h + dh) * d.c_in;
                        let k_base = (dt * d.kh + dh) * d.c_in * d.c_out;
                        for ci in 0..d.c_in {
                            let xv = xd[x_base + ci];
                            let kr = &kd[k_base + ci * d.c_out..k_base + (ci + 1) * d.c_out];
                            for (a, &kv) in acc.iter_mut().zip(kr) {
                                *a = *a + xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(d.out_shape.clone(), out)
}

fn conv_backward<F: Real>(
    x: &Tensor<F>,
    k: &Tensor<F>,
    gy: &Tensor<F>,
    d: &ConvDims,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let mut gx = vec![F::zero(); x.numel()];
    let mut gk = vec![F::zero(); k.numel()];
    let mut gb = vec![F::zero(); d.c_out];
    let (xd, kd, gd) = (x.data(), k.data(), gy.data());
    for l in 0..d.lead {
        for t in 0..d.t_out {
            for h in 0..d.h_out {
                let o_base = ((l * d.t_out + t) * d.h_out + h) * d.c_out;
                let g = &gd[o_base..o_base + d.c_out];
                for (a, &v) in gb.iter_mut().zip(g) {
                    *a = *a + v;
                }
                for dt in 0..d.kt {
                    let Some(st) = d.src_token(t, dt) else {
                        continue;
                    };
                    for dh in 0..d.kh {
                        let x_base = ((l * d.t_in + st) * d.h_in + h + dh) * d.c_in;
                        let k_base = (dt * d.kh + dh) * d.c_in * d.c_out;
                        for ci in 0..d.c_in {
                            let xv = xd[x_base + ci];
                            let kr = k_base + ci * d.c_out;
                            let mut s = F::zero();
                            for co in 0..d.c_out {
                                s = s + g[co] * kd[kr + co];
                                gk[kr + co] = gk[kr + co] + xv * g[co];
                            }
                            gx[x_base + ci] = gx[x_base + ci] + s;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(k.shape().to_vec(), gk),
        Tensor::from_parts(vec![d.c_out], gb),
    )
}

/// Minimum number of coordinates sampled by [`finite_diff_check`].
pub const FD_MIN_COORDS: usize = 64;

/// Compares analytic gradients against central differences.
///
/// `loss_fn` builds the loss on a graph that already has `params` registered.
/// Samples `FD_MIN_COORDS` coordinates (or all of them when there are fewer)
/// and returns the largest `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<L>(loss_fn: L, params: &ParamSet<f64>, eps: f64) -> Result<f64>
where
    L: Fn(&mut Graph<f64>) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::Precondition(format!(
            "eps must be > 0, got {eps}"
        )));
    }
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::with_params(p);
        let loss = loss_fn(&mut g)?;
        g.value(loss).item()
    };

    let mut g = Graph::with_params(params);
    let loss = loss_fn(&mut g)?;
    let report = g.backward(loss)?;
    let first = report.loss;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Determinism { first, second });
    }

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(id, t)| (0..t.numel()).map(move |i| (id.to_string(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f1d0);
    let picked: Vec<usize> = if coords.len() <= FD_MIN_COORDS {
        (0..coords.len()).collect()
    } else {
        let mut v = index::sample(&mut rng, coords.len(), FD_MIN_COORDS).into_vec();
        v.sort_unstable();
        v
    };

    let mut worst = 0f64;
    let mut probe = params.clone();
    for ci in picked {
        let (id, i) = &coords[ci];
        let orig = params.get(id)?.data()[*i];
        probe.get_mut(id)?.data_mut()[*i] = orig + eps;
        let up = eval(&probe)?;
        probe.get_mut(id)?.data_mut()[*i] = orig - eps;
        let down = eval(&probe)?;
        probe.get_mut(id)?.data_mut()[*i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let analytic = report.grads.get(id)?.data()[*i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let mut p = ParamSet::new();
        p.insert("w", vec1(&[1.0, 2.0])).unwrap();
        let mut g = Graph::with_params(&p);
        let w = g.param("w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let rep = g.backward(loss).unwrap();
        assert_eq!(rep.loss, 5.0);
        assert_eq!(rep.grads.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_param_gets_exact_zero() {
        let mut p = ParamSet::new();
        p.insert("used", vec1(&[3.0])).unwrap();
        p.insert("unused", vec1(&[7.0, 8.0])).unwrap();
        let mut g = Graph::with_params(&p);
        let u = g.param("used").unwrap();
        let sq = g.mul(u, u).unwrap();
        let loss = g.sum(sq).unwrap();
        let rep = g.backward(loss).unwrap();
        assert_eq!(rep.grads.get("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec1(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn fd_check_exact_on_quadratic() {
        let mut p = ParamSet::new();
        p.insert("w", vec1(&[0.3, -1.2, 2.5])).unwrap();
        let err = finite_diff_check(
            |g| {
                let w = g.param("w")?;
                let sq = g.mul(w, w)?;
                g.sum(sq)
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_check_rejects_zero_eps() {
        let p = ParamSet::<f64>::new();
        let r = finite_diff_check(|g| Ok(g.constant(Tensor::scalar(0.0))), &p, 0.0);
        assert!(matches!(r, Err(TensorError::Precondition(_))));
    }

    #[test]
    fn fd_check_flags_nondeterminism() {
        use std::cell::Cell;
        let mut p = ParamSet::new();
        p.insert("w", vec1(&[1.0])).unwrap();
        let calls = Cell::new(0.0);
        let r = finite_diff_check(
            |g| {
                calls.set(calls.get() + 1.0);
                let w = g.param("w")?;
                let c = g.constant(vec1(&[calls.get()]));
                let m = g.mul(w, c)?;
                g.sum(m)
            },
            &p,
            1e-3,
        );
        assert!(matches!(r, Err(TensorError::Determinism { .. })));
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let mut p = ParamSet::new();
        let x: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
        p.insert("x", Tensor::new(vec![2, 3, 4], x).unwrap())
            .unwrap();
        p.insert(
            "w",
            Tensor::new(
                vec![4, 3],
                (0..12).map(|i| (i as f64 - 6.0) / 5.0).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        p.insert("b", vec1(&[0.1, -0.2, 0.3])).unwrap();
        p.insert("s", vec1(&[1.3])).unwrap();
        p.insert(
            "k",
            Tensor::new(
                vec![3, 2, 1, 2],
                (0..12).map(|i| (i as f64 - 4.0) / 7.0).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        p.insert("kb", vec1(&[0.05, -0.1])).unwrap();
        let err = finite_diff_check(
            |g| {
                let (x, w, b, s) = (g.param("x")?, g.param("w")?, g.param("b")?, g.param("s")?);
                let y = g.affine(x, w, b)?; // [2,3,3]
                let y = g.gelu(y)?;
                let y = g.scale(y, s)?;
                let sw = g.swap_last2(y)?;
                let sel = g.select_last(sw, 1)?; // [2,3]
                let sel = g.reshape(sel, &[2, 3, 1])?;
                let st = g.stack_last(&[sel, sel])?; // [2,3,1,2]
                let st = g.reshape(st, &[2, 3, 2])?;
                let cat = g.concat_last(st, y)?; // [2,3,5]
                let conv_in = g.reshape(cat, &[2, 3, 5, 1])?;
                let (k, kb) = (g.param("k")?, g.param("kb")?);
                let conv = g.conv(conv_in, k, kb, TokenPadding::Same)?; // [2,3,4,2]
                let flat = g.reshape(conv, &[6, 8])?;
                let sm = g.softmax(flat, 1)?;
                let prod = g.mul(sm, flat)?;
                let total = g.sum(prod)?;
                let ce = g.cross_entropy(flat, &[0, 1, 2, 3, 4, 7])?;
                let logits = g.select_last(flat, 2)?;
                let bce = g.bce_logits(logits, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0])?;
                let l = g.add(total, ce)?;
                g.add(l, bce)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }
}
