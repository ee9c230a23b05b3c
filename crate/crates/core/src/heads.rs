//! Head models trained on layer stacks: learned and average pooling,
//! adapter compression with optional weight sharing, the span head with its
//! optional skip connection, the classification head and the
//! sequence-preserving convolution head.
//!
//! Every model is expressed as graph construction over [`Graph`], so the same
//! code path serves `f32` training and `f64` gradient checks. The free
//! functions (`learned_pool`, `adapter_apply`, ...) evaluate a single stack
//! with frozen parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, TokenPadding, Var};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Parameter count of BERT-large uncased, the denominator of every reported fraction.
pub const BERT_LARGE_PARAMS: u64 = 335_141_888;

/// One example's activations: `[T tokens, H hidden, C channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack(Tensor<f32>);

impl LayerStack {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        if values.rank() != 3 || values.shape()[2] < 2 {
            return Err(TensorError::Contract(format!(
                "layer stack must be [T, H, C] with C >= 2, got {:?}",
                values.shape()
            )));
        }
        Ok(Self(values))
    }

    pub fn from_data(
        tokens: usize,
        hidden: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        Self::new(Tensor::new(vec![tokens, hidden, channels], data)?)
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    /// `stack[:, :, c]` as a `[T, H]` tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor<f32>> {
        let n = self.channels();
        if c >= n {
            return Err(TensorError::Dimension {
                op: "channel",
                lhs: self.0.shape().to_vec(),
                rhs: vec![c],
            });
        }
        let data = self.0.data().iter().skip(c).step_by(n).copied().collect();
        Tensor::new(vec![self.tokens(), self.hidden()], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams {
    /// Raw per-channel scores; mixing weights are `softmax(scores)`.
    pub scores: Tensor<f32>,
    pub gamma: f32,
}

impl PoolParams {
    pub fn uniform(channels: usize) -> Self {
        Self {
            scores: Tensor::zeros(&[channels]),
            gamma: 1.0,
        }
    }

    pub fn weights(&self) -> Result<Tensor<f32>> {
        crate::tensor::softmax(&self.scores, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

/// Down-projection `H -> A` applied to every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `(W [H, A], b [A])`; one pair when shared, one per channel otherwise.
    pub pairs: Vec<(Tensor<f32>, Tensor<f32>)>,
    pub shared: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanHeadParams {
    pub dense_w: Tensor<f32>,
    pub dense_b: Tensor<f32>,
    pub use_skip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsHeadParams {
    pub mix: PoolParams,
    pub dense_w: Tensor<f32>,
    pub dense_b: Tensor<f32>,
}

/// Kernel geometry for the sequence-preserving convolution head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_tokens: usize,
    pub kernel_hidden: usize,
    pub out_channels: usize,
    pub same_padding: bool,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            kernel_tokens: 1,
            kernel_hidden: 8,
            out_channels: 1,
            same_padding: true,
        }
    }
}

impl ConvSpec {
    fn padding(&self) -> TokenPadding {
        if self.same_padding {
            TokenPadding::Same
        } else {
            TokenPadding::Valid
        }
    }

    /// Rejects any geometry whose output token axis would differ from the input.
    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.kernel_tokens == 0 || self.kernel_hidden == 0 || self.out_channels == 0 {
            return Err(TensorError::Contract(
                "conv kernel extents must be positive".into(),
            ));
        }
        if self.kernel_tokens > 1 && !self.same_padding {
            return Err(TensorError::Contract(format!(
                "conv kernel spans {} tokens without padding; the token axis would shrink",
                self.kernel_tokens
            )));
        }
        if self.kernel_hidden > hidden {
            return Err(TensorError::Contract(format!(
                "conv kernel spans {} hidden units but the stack has {hidden}",
                self.kernel_hidden
            )));
        }
        Ok(())
    }

    pub fn hidden_out(&self, hidden: usize) -> usize {
        hidden - self.kernel_hidden + 1
    }
}

fn softmax_weights_col<F: Real>(g: &mut Graph<F>, scores: Var) -> Result<Var> {
    let c = g.shape(scores)[0];
    let w = g.softmax(scores, 0)?;
    g.reshape(w, &[c, 1])
}

fn drop_last_axis<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    let new = shape[..shape.len() - 1].to_vec();
    g.reshape(x, &new)
}

/// `gamma * sum_c softmax(scores)[c] * x[..., c]` over `x [..., T, H, C]`.
pub fn pool_graph<F: Real>(g: &mut Graph<F>, x: Var, scores: Var, gamma: Var) -> Result<Var> {
    let c = g.value(x).last_dim();
    if g.shape(scores) != [c] {
        return Err(TensorError::Dimension {
            op: "learned_pool",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(scores).to_vec(),
        });
    }
    let w = softmax_weights_col(g, scores)?;
    let zero = g.constant(Tensor::zeros(&[1]));
    let mixed = g.affine(x, w, zero)?;
    let mixed = drop_last_axis(g, mixed)?;
    g.scale(mixed, gamma)
}

/// Equal-weight channel mean over `x [..., T, H, C]`.
pub fn average_pool_graph<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let c = g.value(x).last_dim();
    let w = g.constant(Tensor::full(&[c, 1], F::of(1.0 / c as f64)));
    let zero = g.constant(Tensor::zeros(&[1]));
    let mixed = g.affine(x, w, zero)?;
    drop_last_axis(g, mixed)
}

fn activate<F: Real>(g: &mut Graph<F>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Gelu => g.gelu(x),
        Activation::Identity => Ok(x),
    }
}

/// Adapter over `x [..., T, H, C]` producing `[..., T, A, C]`.
///
/// `pairs` holds one `(W, b)` when shared, otherwise one per channel.
pub fn adapter_graph<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    pairs: &[(Var, Var)],
    act: Activation,
) -> Result<Var> {
    let c = g.value(x).last_dim();
    match pairs {
        [(w, b)] => {
            let t = g.swap_last2(x)?; // [..., T, C, H]
            let y = g.affine(t, *w, *b)?;
            let y = activate(g, y, act)?;
            g.swap_last2(y)
        }
        _ if pairs.len() == c => {
            let mut outs = Vec::with_capacity(c);
            for (ch, (w, b)) in pairs.iter().enumerate() {
                let xc = g.select_last(x, ch)?;
                let y = g.affine(xc, *w, *b)?;
                outs.push(activate(g, y, act)?);
            }
            g.stack_last(&outs)
        }
        _ => Err(TensorError::Dimension {
            op: "adapter_apply",
            lhs: g.shape(x).to_vec(),
            rhs: vec![pairs.len()],
        }),
    }
}

/// Flattens the last two axes of `x`.
fn flatten_last2<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    let r = shape.len();
    let mut new = shape[..r - 2].to_vec();
    new.push(shape[r - 2] * shape[r - 1]);
    g.reshape(x, &new)
}

/// Optional skip concatenation, dense `F -> 2`, split into start/end logits.
/// `features` is `[..., T, F]`.
pub fn span_dense_graph<F: Real>(
    g: &mut Graph<F>,
    features: Var,
    skip: Option<Var>,
    w: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let input = match skip {
        Some(s) => g.concat_last(features, s)?,
        None => features,
    };
    let logits = g.affine(input, w, b)?;
    let start = g.select_last(logits, 0)?;
    let end = g.select_last(logits, 1)?;
    Ok((start, end))
}

fn graph1(value: &Tensor<f32>) -> (Graph<f32>, Var) {
    let mut g = Graph::new();
    let v = g.constant(value.clone());
    (g, v)
}

pub fn learned_pool(stack: &LayerStack, p: &PoolParams) -> Result<Tensor<f32>> {
    let (mut g, x) = graph1(stack.tensor());
    let s = g.constant(p.scores.clone());
    let gamma = g.constant(Tensor::scalar(p.gamma));
    let y = pool_graph(&mut g, x, s, gamma)?;
    Ok(g.value(y).clone())
}

pub fn average_pool(stack: &LayerStack) -> Result<Tensor<f32>> {
    let (mut g, x) = graph1(stack.tensor());
    let y = average_pool_graph(&mut g, x)?;
    Ok(g.value(y).clone())
}

pub fn adapter_apply(stack: &LayerStack, p: &AdapterParams) -> Result<Tensor<f32>> {
    if p.shared && p.pairs.len() != 1 {
        return Err(TensorError::Contract(
            "shared adapter must hold exactly one (W, b) pair".into(),
        ));
    }
    if !p.shared && p.pairs.len() != stack.channels() {
        return Err(TensorError::Dimension {
            op: "adapter_apply",
            lhs: stack.tensor().shape().to_vec(),
            rhs: vec![p.pairs.len()],
        });
    }
    let (mut g, x) = graph1(stack.tensor());
    let pairs: Vec<(Var, Var)> = p
        .pairs
        .iter()
        .map(|(w, b)| (g.constant(w.clone()), g.constant(b.clone())))
        .collect();
    let y = adapter_graph(&mut g, x, &pairs, p.activation)?;
    Ok(g.value(y).clone())
}

/// Start and end logits over the token axis of `features [T, A, C]`.
pub fn span_head_forward(
    features: &Tensor<f32>,
    p: &SpanHeadParams,
    final_layer: Option<&Tensor<f32>>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (mut g, x) = graph1(features);
    let skip = match (p.use_skip, final_layer) {
        (true, None) => {
            return Err(TensorError::Contract(
                "skip connection requires the final layer".into(),
            ))
        }
        (true, Some(f)) => {
            if f.rank() != 2 || f.shape()[0] != features.shape()[0] {
                return Err(TensorError::Dimension {
                    op: "span_head skip",
                    lhs: features.shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
            Some(g.constant(f.clone()))
        }
        (false, _) => None,
    };
    let flat = if features.rank() == 3 {
        flatten_last2(&mut g, x)?
    } else {
        x
    };
    let w = g.constant(p.dense_w.clone());
    let b = g.constant(p.dense_b.clone());
    let (s, e) = span_dense_graph(&mut g, flat, skip, w, b)?;
    Ok((g.value(s).clone(), g.value(e).clone()))
}

/// Raw logit for a `T == 1` stack; `logit > 0` means "has answer".
pub fn cls_head_forward(stack: &LayerStack, p: &ClsHeadParams) -> Result<f32> {
    if stack.tokens() != 1 {
        return Err(TensorError::Contract(format!(
            "classification stacks have one token, got {}",
            stack.tokens()
        )));
    }
    let (mut g, x) = graph1(stack.tensor());
    let s = g.constant(p.mix.scores.clone());
    let gamma = g.constant(Tensor::scalar(p.mix.gamma));
    let pooled = pool_graph(&mut g, x, s, gamma)?;
    let w = g.constant(p.dense_w.clone());
    let b = g.constant(p.dense_b.clone());
    let y = g.affine(pooled, w, b)?;
    g.value(y).item()
}

/// Convolution over the hidden axis that keeps the token axis intact.
/// Output is `[T, H - K_h + 1, C_out]`.
pub fn conv_seq_head_forward(
    stack: &LayerStack,
    kernel: &Tensor<f32>,
    bias: Option<&Tensor<f32>>,
    same_padding: bool,
) -> Result<Tensor<f32>> {
    let ks = kernel.shape();
    if ks.len() != 4 {
        return Err(TensorError::Dimension {
            op: "conv_seq_head",
            lhs: stack.tensor().shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let spec = ConvSpec {
        kernel_tokens: ks[0],
        kernel_hidden: ks[1],
        out_channels: ks[3],
        same_padding,
    };
    spec.validate(stack.hidden())?;
    let (mut g, x) = graph1(stack.tensor());
    let k = g.constant(kernel.clone());
    let b = match bias {
        Some(b) => g.constant(b.clone()),
        None => g.constant(Tensor::zeros(&[ks[3]])),
    };
    let y = g.conv(x, k, b, spec.padding())?;
    debug_assert_eq!(g.shape(y)[0], stack.tokens());
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Span,
    Class,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Lp,
    Ap,
    Adapter,
    Conv,
}

impl std::str::FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lp" => Ok(Self::Lp),
            "ap" => Ok(Self::Ap),
            "adapter" => Ok(Self::Adapter),
            "conv" => Ok(Self::Conv),
            other => Err(format!("unknown head kind `{other}` (lp|ap|adapter|conv)")),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "span" => Ok(Self::Span),
            "class" => Ok(Self::Class),
            other => Err(format!("unknown task `{other}` (span|class)")),
        }
    }
}

/// Full description of a head model. Serialized as the model JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: Task,
    pub kind: HeadKind,
    pub tokens: usize,
    pub hidden: usize,
    pub channels: usize,
    #[serde(default)]
    pub adapter_size: usize,
    #[serde(default = "default_true")]
    pub shared: bool,
    #[serde(default)]
    pub use_skip: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub conv: ConvSpec,
}

fn default_true() -> bool {
    true
}

/// Outputs of one forward pass over a batch `[B, T, H, C]`.
#[derive(Debug, Clone, Copy)]
pub enum HeadOutput {
    /// `[B, T]` start and end logits.
    Span { start: Var, end: Var },
    /// `[B]` raw logits.
    Class { logit: Var },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub count: u64,
}

impl ParamCount {
    /// Percentage of BERT-large's parameters.
    pub fn percent(&self) -> f64 {
        self.count as f64 / BERT_LARGE_PARAMS as f64 * 100.0
    }

    /// Percentage rounded to three decimals, e.g. `"0.124%"`.
    pub fn percent_label(&self) -> String {
        format!("{:.3}%", self.percent())
    }
}

impl HeadSpec {
    pub fn new(task: Task, kind: HeadKind, tokens: usize, hidden: usize, channels: usize) -> Self {
        Self {
            task,
            kind,
            tokens,
            hidden,
            channels,
            adapter_size: 0,
            shared: true,
            use_skip: false,
            activation: Activation::Gelu,
            conv: ConvSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Contract(m));
        if self.tokens == 0 || self.hidden == 0 || self.channels < 2 {
            return bad(format!(
                "stack dims must be T >= 1, H >= 1, C >= 2 (got {}, {}, {})",
                self.tokens, self.hidden, self.channels
            ));
        }
        if self.task == Task::Class {
            if self.tokens != 1 {
                return bad(format!(
                    "classification stacks have T == 1, got {}",
                    self.tokens
                ));
            }
            if self.use_skip {
                return bad("skip connection is only defined for span heads".into());
            }
        }
        match self.kind {
            HeadKind::Adapter if self.adapter_size == 0 => bad("adapter size must be >= 1".into()),
            HeadKind::Conv => self.conv.validate(self.hidden),
            _ => Ok(()),
        }
    }

    /// Width of the per-token feature vector fed to the dense layer.
    pub fn feature_width(&self) -> usize {
        let base = match self.kind {
            HeadKind::Lp | HeadKind::Ap => self.hidden,
            HeadKind::Adapter => self.adapter_size * self.channels,
            HeadKind::Conv => self.conv.hidden_out(self.hidden) * self.conv.out_channels,
        };
        base + if self.use_skip { self.hidden } else { 0 }
    }

    fn outputs(&self) -> usize {
        match self.task {
            Task::Span => 2,
            Task::Class => 1,
        }
    }

    fn adapter_ids(&self) -> Vec<(String, String)> {
        if self.shared {
            vec![("adapter.w".into(), "adapter.b".into())]
        } else {
            (0..self.channels)
                .map(|c| (format!("adapter.{c:03}.w"), format!("adapter.{c:03}.b")))
                .collect()
        }
    }

    /// `(id, shape)` of every trainable tensor, in lexicographic id order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        match self.kind {
            HeadKind::Lp => {
                v.push(("pool.gamma".to_string(), vec![1]));
                v.push(("pool.s".to_string(), vec![self.channels]));
            }
            HeadKind::Ap => {}
            HeadKind::Adapter => {
                for (w, b) in self.adapter_ids() {
                    v.push((w, vec![self.hidden, self.adapter_size]));
                    v.push((b, vec![self.adapter_size]));
                }
            }
            HeadKind::Conv => {
                let c = &self.conv;
                v.push(("conv.bias".to_string(), vec![c.out_channels]));
                v.push((
                    "conv.kernel".to_string(),
                    vec![
                        c.kernel_tokens,
                        c.kernel_hidden,
                        self.channels,
                        c.out_channels,
                    ],
                ));
            }
        }
        v.push(("dense.b".to_string(), vec![self.outputs()]));
        v.push((
            "dense.w".to_string(),
            vec![self.feature_width(), self.outputs()],
        ));
        v.sort();
        v
    }

    /// Exact number of trainable scalars, derived from the description alone.
    pub fn count_params(&self) -> ParamCount {
        let h = self.hidden as u64;
        let c = self.channels as u64;
        let a = self.adapter_size as u64;
        let stage = match self.kind {
            HeadKind::Lp => c + 1,
            HeadKind::Ap => 0,
            HeadKind::Adapter => {
                let pair = h * a + a;
                if self.shared {
                    pair
                } else {
                    c * pair
                }
            }
            HeadKind::Conv => {
                let k = &self.conv;
                (k.kernel_tokens * k.kernel_hidden) as u64 * c * k.out_channels as u64
                    + k.out_channels as u64
            }
        };
        let out = self.outputs() as u64;
        let dense = self.feature_width() as u64 * out + out;
        ParamCount {
            count: stage + dense,
        }
    }

    /// Truncated-normal (std 0.02) weights, zero biases, zero pooling scores, unit gamma.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let mut p = ParamSet::new();
        for (id, shape) in self.param_shapes() {
            let t = if id == "pool.gamma" {
                Tensor::full(&shape, 1.0)
            } else if id.ends_with(".b") || id.ends_with(".bias") || id == "pool.s" {
                Tensor::zeros(&shape)
            } else {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| loop {
                        let v = normal.sample(&mut rng);
                        if v.abs() <= 0.04 {
                            break v;
                        }
                    })
                    .collect();
                Tensor::new(shape, data)?
            };
            p.insert(id, t)?;
        }
        Ok(p)
    }

    /// Builds the forward pass over `x [B, T, H, C]` using parameters registered in `g`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<HeadOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [self.tokens, self.hidden, self.channels] {
            return Err(TensorError::Dimension {
                op: "head forward",
                lhs: shape,
                rhs: vec![self.tokens, self.hidden, self.channels],
            });
        }
        let batch = shape[0];
        let features = match self.kind {
            HeadKind::Lp => {
                let (s, gamma) = (g.param("pool.s")?, g.param("pool.gamma")?);
                pool_graph(g, x, s, gamma)?
            }
            HeadKind::Ap => average_pool_graph(g, x)?,
            HeadKind::Adapter => {
                let pairs = self
                    .adapter_ids()
                    .iter()
                    .map(|(w, b)| Ok((g.param(w)?, g.param(b)?)))
                    .collect::<Result<Vec<_>>>()?;
                let y = adapter_graph(g, x, &pairs, self.activation)?;
                flatten_last2(g, y)?
            }
            HeadKind::Conv => {
                let (k, b) = (g.param("conv.kernel")?, g.param("conv.bias")?);
                let y = g.conv(x, k, b, self.conv.padding())?;
                flatten_last2(g, y)?
            }
        };
        let skip = if self.use_skip {
            Some(g.select_last(x, self.channels - 1)?)
        } else {
            None
        };
        let (w, b) = (g.param("dense.w")?, g.param("dense.b")?);
        match self.task {
            Task::Span => {
                let (start, end) = span_dense_graph(g, features, skip, w, b)?;
                Ok(HeadOutput::Span { start, end })
            }
            Task::Class => {
                let y = g.affine(features, w, b)?;
                let logit = g.reshape(y, &[batch])?;
                Ok(HeadOutput::Class { logit })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Span { start: usize, end: usize },
    Class(bool),
}

/// Summed start/end cross-entropy for span heads; binary cross-entropy for classification.
pub fn head_loss<F: Real>(g: &mut Graph<F>, out: HeadOutput, targets: &[Target]) -> Result<Var> {
    match out {
        HeadOutput::Span { start, end } => {
            let mut starts = Vec::with_capacity(targets.len());
            let mut ends = Vec::with_capacity(targets.len());
            for t in targets {
                match *t {
                    Target::Span { start, end } => {
                        starts.push(start);
                        ends.push(end);
                    }
                    Target::Class(_) => {
                        return Err(TensorError::Contract("class target for a span head".into()))
                    }
                }
            }
            let ls = g.cross_entropy(start, &starts)?;
            let le = g.cross_entropy(end, &ends)?;
            g.add(ls, le)
        }
        HeadOutput::Class { logit } => {
            let ys = targets
                .iter()
                .map(|t| match t {
                    Target::Class(y) => Ok(if *y { F::one() } else { F::zero() }),
                    Target::Span { .. } => {
                        Err(TensorError::Contract("span target for a class head".into()))
                    }
                })
                .collect::<Result<Vec<F>>>()?;
            g.bce_logits(logit, &ys)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ramp_stack(t: usize, h: usize, c: usize) -> LayerStack {
        let data = (0..t * h * c)
            .map(|i| ((i * 37 % 101) as f32 - 50.0) / 25.0)
            .collect();
        LayerStack::from_data(t, h, c, data).unwrap()
    }

    #[test]
    fn layer_stack_requires_two_channels() {
        assert!(LayerStack::from_data(2, 2, 1, vec![0.0; 4]).is_err());
        assert!(LayerStack::new(Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn one_hot_scores_select_a_channel() {
        let stack = ramp_stack(3, 4, 5);
        let mut s = vec![-1000.0; 5];
        s[2] = 1000.0;
        let p = PoolParams {
            scores: Tensor::from_vec(s).unwrap(),
            gamma: 1.0,
        };
        let out = learned_pool(&stack, &p).unwrap();
        assert_eq!(out.data(), stack.channel(2).unwrap().data());
    }

    #[test]
    fn pool_length_mismatch_is_dimension_error() {
        let stack = ramp_stack(2, 3, 4);
        let p = PoolParams::uniform(3);
        assert!(matches!(
            learned_pool(&stack, &p),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn average_of_zero_and_two_is_one() {
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend([0.0, 2.0]);
        }
        let stack = LayerStack::from_data(2, 3, 2, data).unwrap();
        assert!(average_pool(&stack)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn identity_adapter_passthrough() {
        let stack = ramp_stack(3, 4, 2);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let p = AdapterParams {
            pairs: vec![(Tensor::new(vec![4, 4], eye).unwrap(), Tensor::zeros(&[4]))],
            shared: true,
            activation: Activation::Identity,
        };
        assert_eq!(adapter_apply(&stack, &p).unwrap(), *stack.tensor());
    }

    #[test]
    fn unshared_adapter_needs_one_pair_per_channel() {
        let stack = ramp_stack(2, 3, 4);
        let pair = (Tensor::zeros(&[3, 2]), Tensor::zeros(&[2]));
        let p = AdapterParams {
            pairs: vec![pair.clone(), pair],
            shared: false,
            activation: Activation::Gelu,
        };
        assert!(matches!(
            adapter_apply(&stack, &p),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn bias_only_span_head() {
        let features = Tensor::zeros(&[5, 3, 2]);
        let p = SpanHeadParams {
            dense_w: Tensor::zeros(&[6, 2]),
            dense_b: Tensor::from_vec(vec![3.0, 7.0]).unwrap(),
            use_skip: false,
        };
        let (s, e) = span_head_forward(&features, &p, None).unwrap();
        assert_eq!(s.shape(), &[5]);
        assert!(s.data().iter().all(|&v| v == 3.0));
        assert!(e.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn skip_without_final_layer_is_contract_error() {
        let p = SpanHeadParams {
            dense_w: Tensor::zeros(&[10, 2]),
            dense_b: Tensor::zeros(&[2]),
            use_skip: true,
        };
        let r = span_head_forward(&Tensor::zeros(&[5, 3, 2]), &p, None);
        assert!(matches!(r, Err(TensorError::Contract(_))));
        let (s, _) = span_head_forward(
            &Tensor::zeros(&[5, 3, 2]),
            &p,
            Some(&Tensor::zeros(&[5, 4])),
        )
        .unwrap();
        assert_eq!(s.shape(), &[5]);
    }

    #[test]
    fn cls_bias_only_and_channel_isolation() {
        let mut stack = ramp_stack(1, 4, 3);
        let p = ClsHeadParams {
            mix: PoolParams::uniform(3),
            dense_w: Tensor::zeros(&[4, 1]),
            dense_b: Tensor::scalar(-1.0),
        };
        assert_eq!(cls_head_forward(&stack, &p).unwrap(), -1.0);

        let p = ClsHeadParams {
            mix: PoolParams {
                scores: Tensor::from_vec(vec![-1000.0, 1000.0, -1000.0]).unwrap(),
                gamma: 1.0,
            },
            dense_w: Tensor::new(vec![4, 1], vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
            dense_b: Tensor::scalar(0.1),
        };
        let before = cls_head_forward(&stack, &p).unwrap();
        let mut t = stack.clone().into_tensor();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if i % 3 != 1 {
                *v += 5.0;
            }
        }
        stack = LayerStack::new(t).unwrap();
        assert_eq!(cls_head_forward(&stack, &p).unwrap(), before);
    }

    #[test]
    fn cls_requires_single_token() {
        let stack = ramp_stack(2, 4, 3);
        let p = ClsHeadParams {
            mix: PoolParams::uniform(3),
            dense_w: Tensor::zeros(&[4, 1]),
            dense_b: Tensor::zeros(&[1]),
        };
        assert!(matches!(
            cls_head_forward(&stack, &p),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn conv_identity_and_full_width_mean() {
        let stack = ramp_stack(4, 6, 3);
        let mut k = vec![0.0; 9];
        for c in 0..3 {
            k[c * 3 + c] = 1.0;
        }
        let kernel = Tensor::new(vec![1, 1, 3, 3], k).unwrap();
        let out = conv_seq_head_forward(&stack, &kernel, None, true).unwrap();
        assert_eq!(out, *stack.tensor());

        let kernel = Tensor::full(&[1, 6, 3, 1], 1.0 / 18.0);
        let out = conv_seq_head_forward(&stack, &kernel, None, true).unwrap();
        assert_eq!(out.shape(), &[4, 1, 1]);
        for t in 0..4 {
            let chunk = &stack.tensor().data()[t * 18..(t + 1) * 18];
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / 18.0;
            assert_abs_diff_eq!(out.data()[t] as f64, mean, epsilon = 1e-6);
        }
    }

    #[test]
    fn conv_that_shrinks_tokens_is_rejected() {
        let stack = ramp_stack(6, 4, 2);
        let kernel = Tensor::zeros(&[3, 1, 2, 1]);
        assert!(matches!(
            conv_seq_head_forward(&stack, &kernel, None, false),
            Err(TensorError::Contract(_))
        ));
        let out = conv_seq_head_forward(&stack, &kernel, None, true).unwrap();
        assert_eq!(out.shape()[0], 6);
    }

    #[test]
    fn spec_param_shapes_match_count() {
        let mut spec = HeadSpec::new(Task::Span, HeadKind::Adapter, 8, 6, 3);
        spec.adapter_size = 4;
        for shared in [true, false] {
            for skip in [true, false] {
                spec.shared = shared;
                spec.use_skip = skip;
                let p = spec.init_params(1).unwrap();
                assert_eq!(p.scalar_count() as u64, spec.count_params().count);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let mut spec = HeadSpec::new(Task::Span, HeadKind::Lp, 4, 16, 3);
        spec.use_skip = true;
        let a = spec.init_params(7).unwrap();
        assert_eq!(a, spec.init_params(7).unwrap());
        assert_ne!(a, spec.init_params(8).unwrap());
        assert!(a
            .get("dense.w")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= 0.04));
        assert_eq!(a.get("pool.gamma").unwrap().data(), &[1.0]);
        assert!(a.get("pool.s").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_spec_rejects_skip_and_multi_token() {
        let mut spec = HeadSpec::new(Task::Class, HeadKind::Lp, 1, 8, 4);
        assert!(spec.validate().is_ok());
        spec.use_skip = true;
        assert!(spec.validate().is_err());
        spec.use_skip = false;
        spec.tokens = 2;
        assert!(spec.validate().is_err());
    }
}
