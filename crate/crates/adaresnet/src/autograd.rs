//! Reverse-mode automatic differentiation over the tensor primitives.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes;
//! parents always precede children, so walking the list backwards visits
//! nodes in reverse topological order exactly once. Each recorded op stores
//! a closure that maps the node's output gradient to contributions for its
//! parents. [`Tape::backward`] seeds the scalar loss with gradient 1 and
//! returns the accumulated gradient for every trainable leaf.
//!
//! The skip combination is a first-class op: for `y = tfd + w * ipd` the
//! backward rule is `dL/dtfd = g`, `dL/dipd = w * g`, and
//! `dL/dw = sum(g * ipd)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nhwc;
use crate::tensor::{self, Padding, Tensor};

/// Gradients keyed by parameter name.
pub type GradientMap = BTreeMap<String, Tensor>;

/// A named, possibly trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Same shape as `value`; zeroed before each backward pass.
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        let mut p = Self::new(name, value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

type BackwardFn = Box<dyn Fn(&Tape, &Tensor) -> Vec<(NodeId, Tensor)>>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
    /// Set for trainable parameter leaves.
    param: Option<String>,
}

/// Records one forward pass; single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, backward: Option<BackwardFn>) -> NodeId {
        self.nodes.push(Node {
            value,
            backward,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that wants no gradient (inputs, labels).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, None)
    }

    /// A trainable leaf; its gradient appears in the map returned by
    /// [`Tape::backward`].
    pub fn leaf(&mut self, param: &Parameter) -> NodeId {
        let id = self.push(param.value.clone(), None);
        if param.trainable {
            self.nodes[id.0].param = Some(param.name.clone());
        }
        id
    }

    // -- recorded operations -------------------------------------------------

    /// Plain residual addition `a + b` (the unweighted baseline).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(
            out,
            Some(Box::new(move |_t, g| {
                vec![(a, g.clone()), (b, g.clone())]
            })),
        ))
    }

    /// Weighted skip combination `tfd + w * ipd` with a trainable scalar
    /// weight node.
    pub fn ada_skip(&mut self, tfd: NodeId, ipd: NodeId, w: NodeId) -> Result<NodeId> {
        let wv = self.value(w);
        if wv.len() != 1 {
            return Err(Error::InvalidShape {
                op: "ada_skip",
                shape: wv.shape().to_vec(),
                reason: "skip weight must be a scalar".into(),
            });
        }
        let out = tensor::weighted_sum(self.value(tfd), self.value(ipd), wv.item())?;
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let w_val = t.value(w).item();
                let g_w = tensor::dot(g, t.value(ipd));
                vec![
                    (tfd, g.clone()),
                    (ipd, g.scale(w_val)),
                    (w, Tensor::scalar(g_w)),
                ]
            })),
        ))
    }

    /// Skip combination with a compile-time-fixed weight (no parameter).
    pub fn ada_skip_fixed(&mut self, tfd: NodeId, ipd: NodeId, c: f32) -> Result<NodeId> {
        let out = tensor::weighted_sum(self.value(tfd), self.value(ipd), c)?;
        Ok(self.push(
            out,
            Some(Box::new(move |_t, g| {
                vec![(tfd, g.clone()), (ipd, g.scale(c))]
            })),
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = tensor::relu(self.value(x));
        self.push(
            out,
            Some(Box::new(move |t, g| {
                vec![(x, tensor::relu_backward(t.value(x), g))]
            })),
        )
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let out = tensor::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        // Gradients never flow past pure constants (e.g. the image batch),
        // so the input-gradient GEMM can be skipped for them.
        let node = &self.nodes[input.0];
        let input_needs_grad = node.backward.is_some() || node.param.is_some();
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let (gx, gk) = tensor::conv2d_backward(
                    t.value(input),
                    t.value(kernel),
                    g,
                    stride,
                    padding,
                    input_needs_grad,
                )
                .expect("shapes validated in forward");
                let mut grads = vec![(kernel, gk)];
                if let Some(gx) = gx {
                    grads.push((input, gx));
                }
                grads
            })),
        ))
    }

    /// Training-mode batch norm. Returns the output node and the batch
    /// statistics; the caller owns the running-stat update (it is a side
    /// effect outside the differentiated graph).
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, tensor::BatchNormStats)> {
        let (out, stats) =
            tensor::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let mean = stats.mean.clone();
        let var = stats.var.clone();
        let id = self.push(
            out,
            Some(Box::new(move |t, g| {
                let xv = t.value(x);
                let gv = t.value(gamma);
                let &[n, c, h, w] = xv.shape() else { unreachable!() };
                let plane = h * w;
                let m = (n * plane) as f32;
                let mut gx = Tensor::zeros(xv.shape());
                let mut ggamma = vec![0.0f32; c];
                let mut gbeta = vec![0.0f32; c];
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + tensor::BATCH_NORM_EPS).sqrt();
                    let mu = mean[ci];
                    // reductions over the channel
                    let mut sum_g = 0.0f32;
                    let mut sum_gx = 0.0f32;
                    for img in 0..n {
                        let base = (img * c + ci) * plane;
                        for p in 0..plane {
                            let gi = g.data()[base + p];
                            let xh = (xv.data()[base + p] - mu) * inv;
                            sum_g += gi;
                            sum_gx += gi * xh;
                        }
                    }
                    ggamma[ci] = sum_gx;
                    gbeta[ci] = sum_g;
                    let scale = gv.data()[ci] * inv;
                    for img in 0..n {
                        let base = (img * c + ci) * plane;
                        for p in 0..plane {
                            let gi = g.data()[base + p];
                            let xh = (xv.data()[base + p] - mu) * inv;
                            gx.data_mut()[base + p] =
                                scale * (gi - sum_g / m - xh * sum_gx / m);
                        }
                    }
                }
                vec![
                    (x, gx),
                    (gamma, Tensor::new(vec![c], ggamma).unwrap()),
                    (beta, Tensor::new(vec![c], gbeta).unwrap()),
                ]
            })),
        );
        Ok((id, stats))
    }

    /// Inference-mode batch norm; running statistics are constants.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<NodeId> {
        let out = tensor::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let mean = running_mean.clone();
        let var = running_var.clone();
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let xv = t.value(x);
                let gv = t.value(gamma);
                let &[n, c, h, w] = xv.shape() else { unreachable!() };
                let plane = h * w;
                let mut gx = Tensor::zeros(xv.shape());
                let mut ggamma = vec![0.0f32; c];
                let mut gbeta = vec![0.0f32; c];
                for ci in 0..c {
                    let inv = 1.0 / (var.data()[ci] + tensor::BATCH_NORM_EPS).sqrt();
                    let scale = gv.data()[ci] * inv;
                    for img in 0..n {
                        let base = (img * c + ci) * plane;
                        for p in 0..plane {
                            let gi = g.data()[base + p];
                            let xh = (xv.data()[base + p] - mean.data()[ci]) * inv;
                            gbeta[ci] += gi;
                            ggamma[ci] += gi * xh;
                            gx.data_mut()[base + p] = gi * scale;
                        }
                    }
                }
                vec![
                    (x, gx),
                    (gamma, Tensor::new(vec![c], ggamma).unwrap()),
                    (beta, Tensor::new(vec![c], gbeta).unwrap()),
                ]
            })),
        ))
    }

    fn next_id(&self) -> NodeId {
        NodeId(self.nodes.len())
    }

    /// Fused `relu(a + b)`. Backward masks the upstream gradient by the
    /// node's own output (positive output iff positive pre-activation).
    pub fn add_relu(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::add_relu(self.value(a), self.value(b))?;
        let own = self.next_id();
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let masked = tensor::relu_backward(t.value(own), g);
                vec![(a, masked.clone()), (b, masked)]
            })),
        ))
    }

    /// Fused `relu(tfd + w * ipd)` with a trainable scalar weight.
    pub fn ada_skip_relu(&mut self, tfd: NodeId, ipd: NodeId, w: NodeId) -> Result<NodeId> {
        let wv = self.value(w);
        if wv.len() != 1 {
            return Err(Error::InvalidShape {
                op: "ada_skip",
                shape: wv.shape().to_vec(),
                reason: "skip weight must be a scalar".into(),
            });
        }
        let out = tensor::weighted_sum_relu(self.value(tfd), self.value(ipd), wv.item())?;
        let own = self.next_id();
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let masked = tensor::relu_backward(t.value(own), g);
                let w_val = t.value(w).item();
                let g_w = tensor::dot(&masked, t.value(ipd));
                vec![
                    (tfd, masked.clone()),
                    (ipd, masked.scale(w_val)),
                    (w, Tensor::scalar(g_w)),
                ]
            })),
        ))
    }

    /// Fused `relu(tfd + c * ipd)` with a fixed weight.
    pub fn ada_skip_fixed_relu(&mut self, tfd: NodeId, ipd: NodeId, c: f32) -> Result<NodeId> {
        let out = tensor::weighted_sum_relu(self.value(tfd), self.value(ipd), c)?;
        let own = self.next_id();
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let masked = tensor::relu_backward(t.value(own), g);
                vec![(tfd, masked.clone()), (ipd, masked.scale(c))]
            })),
        ))
    }

    // -- channels-last variants (the model's training path) -----------------

    /// [`Tape::conv2d`] over `[N,H,W,C]` activations; the kernel leaf keeps
    /// its canonical `[F,C,kh,kw]` shape.
    pub fn conv2d_nhwc(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let out = nhwc::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        let node = &self.nodes[input.0];
        let input_needs_grad = node.backward.is_some() || node.param.is_some();
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let (gx, gk) = nhwc::conv2d_backward(
                    t.value(input),
                    t.value(kernel),
                    g,
                    stride,
                    padding,
                    input_needs_grad,
                )
                .expect("shapes validated in forward");
                let mut grads = vec![(kernel, gk)];
                if let Some(gx) = gx {
                    grads.push((input, gx));
                }
                grads
            })),
        ))
    }

    /// [`Tape::batch_norm_train`] over `[N,H,W,C]`, optionally fused with a
    /// trailing relu.
    pub fn batch_norm_nhwc_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        relu: bool,
    ) -> Result<(NodeId, tensor::BatchNormStats)> {
        let (out, stats) =
            nhwc::batch_norm_train_act(self.value(x), self.value(gamma), self.value(beta), relu)?;
        let stats_for_backward = stats.clone();
        let own = self.next_id();
        let id = self.push(
            out,
            Some(Box::new(move |t, g| {
                let masked;
                let g_eff = if relu {
                    masked = tensor::relu_backward(t.value(own), g);
                    &masked
                } else {
                    g
                };
                let (gx, ggamma, gbeta) = nhwc::batch_norm_train_backward(
                    t.value(x),
                    t.value(gamma),
                    &stats_for_backward,
                    g_eff,
                )
                .expect("shapes validated in forward");
                vec![(x, gx), (gamma, ggamma), (beta, gbeta)]
            })),
        );
        Ok((id, stats))
    }

    /// [`Tape::batch_norm_eval`] over `[N,H,W,C]`, optionally fused with a
    /// trailing relu.
    pub fn batch_norm_nhwc_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        relu: bool,
    ) -> Result<NodeId> {
        let out = nhwc::batch_norm_eval_act(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            relu,
        )?;
        let mean = running_mean.clone();
        let var = running_var.clone();
        let own = self.next_id();
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let masked;
                let g = if relu {
                    masked = tensor::relu_backward(t.value(own), g);
                    &masked
                } else {
                    g
                };
                let xv = t.value(x);
                let c = *xv.shape().last().unwrap();
                let inv: Vec<f32> = var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + tensor::BATCH_NORM_EPS).sqrt())
                    .collect();
                let mut gx = Tensor::zeros(xv.shape());
                let mut ggamma = vec![0.0f32; c];
                let mut gbeta = vec![0.0f32; c];
                let gamma_v = t.value(gamma);
                for ((grow, xrow), dst) in g
                    .data()
                    .chunks_exact(c)
                    .zip(xv.data().chunks_exact(c))
                    .zip(gx.data_mut().chunks_exact_mut(c))
                {
                    for ci in 0..c {
                        let xh = (xrow[ci] - mean.data()[ci]) * inv[ci];
                        gbeta[ci] += grow[ci];
                        ggamma[ci] += grow[ci] * xh;
                        dst[ci] = grow[ci] * gamma_v.data()[ci] * inv[ci];
                    }
                }
                vec![
                    (x, gx),
                    (gamma, Tensor::new(vec![c], ggamma).unwrap()),
                    (beta, Tensor::new(vec![c], gbeta).unwrap()),
                ]
            })),
        ))
    }

    /// [`Tape::global_avg_pool`] over `[N,H,W,C]`.
    pub fn global_avg_pool_nhwc(&mut self, x: NodeId) -> Result<NodeId> {
        let out = nhwc::global_avg_pool(self.value(x))?;
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let gx = nhwc::global_avg_pool_backward(t.value(x).shape(), g)
                    .expect("shapes validated in forward");
                vec![(x, gx)]
            })),
        ))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let out = tensor::global_avg_pool(self.value(x))?;
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let xv = t.value(x);
                let &[n, c, h, w] = xv.shape() else { unreachable!() };
                let plane = h * w;
                let mut gx = Tensor::zeros(xv.shape());
                for img in 0..n {
                    for ci in 0..c {
                        let gv = g.data()[img * c + ci] / plane as f32;
                        let base = (img * c + ci) * plane;
                        for p in 0..plane {
                            gx.data_mut()[base + p] = gv;
                        }
                    }
                }
                vec![(x, gx)]
            })),
        ))
    }

    /// `x [N,C] · w [C,K]`.
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let out = tensor::matmul(self.value(x), self.value(w))?;
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let gx = tensor::matmul_bt(g, t.value(w)).expect("validated");
                let gw = tensor::matmul_at(t.value(x), g).expect("validated");
                vec![(x, gx), (w, gw)]
            })),
        ))
    }

    /// Broadcast row-bias addition over `[N,K]`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = tensor::add_row_bias(self.value(x), self.value(bias))?;
        Ok(self.push(
            out,
            Some(Box::new(move |t, g| {
                let k = t.value(bias).len();
                let mut gb = vec![0.0f32; k];
                for row in g.data().chunks_exact(k) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(x, g.clone()), (bias, Tensor::new(vec![k], gb).unwrap())]
            })),
        ))
    }

    /// Scalar node: mean cross-entropy between logits and one-hot targets.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, onehot: &Tensor) -> Result<NodeId> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), onehot)?;
        let targets = onehot.clone();
        Ok(self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |_t, g| {
                let scale = g.item() / probs.shape()[0] as f32;
                let data = probs
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(p, y)| (p - y) * scale)
                    .collect();
                vec![(
                    logits,
                    Tensor::new(probs.shape().to_vec(), data).unwrap(),
                )]
            })),
        ))
    }

    /// Sum of all elements (scalar).
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f32 = self.value(x).data().iter().sum();
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |_t, g| {
                vec![(x, Tensor::filled(&shape, g.item()))]
            })),
        )
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let out = self.value(x).scale(c);
        self.push(
            out,
            Some(Box::new(move |_t, g| vec![(x, g.scale(c))])),
        )
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss node. Returns a gradient for every
    /// trainable leaf recorded on the tape; errors if any such leaf is not
    /// connected to the loss.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut map = GradientMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(name) = &node.param {
                // A parameter may be registered as several leaves; sum them.
                match map.get_mut(name) {
                    Some(existing) => tensor::add_assign(existing, &g),
                    None => {
                        map.insert(name.clone(), g.clone());
                    }
                }
            }
            if let Some(f) = &node.backward {
                for (pid, contrib) in f(self, &g) {
                    debug_assert!(pid.0 < i, "tape parents must precede children");
                    match &mut grads[pid.0] {
                        Some(acc) => tensor::add_assign(acc, &contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
        }
        // Trainable leaves the loss never touched indicate a wiring bug.
        for node in &self.nodes {
            if let Some(name) = &node.param {
                if !map.contains_key(name) {
                    return Err(Error::DetachedParameter { name: name.clone() });
                }
            }
        }
        Ok(map)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Default probe step for `f32` models.
pub const GRAD_CHECK_EPS: f32 = 1e-3;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f32, b: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Per-parameter worst relative error between analytic and
/// central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over its scalars)
    pub per_param: Vec<(String, f32)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f32 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f32::max)
    }

    pub fn get(&self, name: &str) -> Option<f32> {
        self.per_param
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| *e)
    }
}

/// Checks `analytic` against central differences `(f(θ+ε) - f(θ-ε)) / 2ε`
/// for every scalar of every trainable parameter accepted by `filter`.
///
/// `loss` must be a pure function of the parameter values. Probes restore
/// the parameters exactly before returning.
pub fn grad_check<F>(
    params: &mut [Parameter],
    mut loss: F,
    analytic: &GradientMap,
    eps: f32,
    filter: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Parameter]) -> Result<f32>,
{
    let mut per_param = Vec::new();
    for idx in 0..params.len() {
        if !params[idx].trainable || !filter(&params[idx].name) {
            continue;
        }
        let name = params[idx].name.clone();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::MissingGradient { name: name.clone() })?
            .clone();
        let mut worst = 0.0f32;
        for j in 0..params[idx].value.len() {
            let orig = params[idx].value.data()[j];
            params[idx].value.data_mut()[j] = orig + eps;
            let plus = loss(params)?;
            params[idx].value.data_mut()[j] = orig - eps;
            let minus = loss(params)?;
            params[idx].value.data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("finite-difference probe of '{name}'"),
                });
            }
            let fd = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(fd, grad.data()[j]));
        }
        per_param.push((name, worst));
    }
    Ok(GradCheckReport { per_param })
}
