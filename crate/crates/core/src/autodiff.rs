//! Reverse-mode differentiation over a recorded tape.
//!
//! Every op that touches a tracked [`Var`] appends a node holding its output,
//! its inputs and a [`BackwardRule`]. Backward rules are themselves written
//! with `Var` ops, so running backward with `create_graph = true` records the
//! gradient computation and the result can be differentiated again.
//! Outside of `create_graph`, backward runs with recording off and the
//! intermediate gradients are dropped as soon as they are consumed.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::f32::consts::PI;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, SnnError};
use crate::tensor::{self, ConvGeometry, PoolGeometry, Tensor};

pub type NodeId = usize;

/// Vector-Jacobian product of one recorded op.
///
/// Returns one optional gradient per input, in input order; `None` means the
/// op does not propagate to that input.
pub trait BackwardRule {
    fn name(&self) -> &'static str;

    fn backward<'t>(&self, grad: &Var<'t>, inputs: &[Var<'t>], output: &Var<'t>) -> Vec<Option<Var<'t>>>;
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<(Option<NodeId>, Rc<Tensor>)>,
    rule: Option<Rc<dyn BackwardRule>>,
    label: Option<String>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enables or disables recording, returning the previous setting.
    pub fn set_recording(&self, on: bool) -> bool {
        self.recording.replace(on)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, None)
    }

    /// A differentiable input carrying a layer name for diagnostics.
    pub fn param(&self, name: &str, value: Tensor) -> Var<'_> {
        self.push_leaf(value, Some(name.to_string()))
    }

    /// A value that takes no part in differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    fn push_leaf(&self, value: Tensor, label: Option<String>) -> Var<'_> {
        let value = Rc::new(value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.clone(),
            inputs: Vec::new(),
            rule: None,
            label,
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Records an op with a caller-supplied backward rule. This is the hook
    /// the spike nonlinearity uses to substitute its surrogate derivative.
    pub fn custom<'t>(&'t self, inputs: &[&Var<'t>], value: Tensor, rule: Rc<dyn BackwardRule>) -> Var<'t> {
        let value = Rc::new(value);
        let tracked = self.recording.get() && inputs.iter().any(|v| v.id.is_some());
        if !tracked {
            return Var {
                tape: self,
                id: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.clone(),
            inputs: inputs.iter().map(|v| (v.id, v.value.clone())).collect(),
            rule: Some(rule),
            label: None,
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    fn propagate<'t>(&'t self, output: &Var<'t>, create_graph: bool) -> Result<Vec<Option<Var<'t>>>> {
        let out_id = output.id.ok_or(SnnError::BackwardBeforeForward)?;
        if output.value.numel() != 1 {
            return Err(SnnError::NotScalar(output.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Var<'t>>> = vec![None; out_id + 1];
        grads[out_id] = Some(self.constant(Tensor::ones(output.value.shape())));
        let previous = self.recording.replace(create_graph);
        for id in (0..=out_id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let (rule, inputs, value) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[id];
                (node.rule.clone(), node.inputs.clone(), node.value.clone())
            };
            let Some(rule) = rule else {
                grads[id] = Some(grad);
                continue;
            };
            let input_vars: Vec<Var<'t>> = inputs
                .iter()
                .map(|(pid, v)| Var {
                    tape: self,
                    id: *pid,
                    value: v.clone(),
                })
                .collect();
            let out_var = Var {
                tape: self,
                id: Some(id),
                value,
            };
            let input_grads = rule.backward(&grad, &input_vars, &out_var);
            debug_assert_eq!(input_grads.len(), inputs.len(), "rule {}", rule.name());
            for ((pid, _), g) in inputs.iter().zip(input_grads) {
                if let (Some(pid), Some(g)) = (pid, g) {
                    grads[*pid] = Some(match grads[*pid].take() {
                        Some(acc) => acc.add(&g),
                        None => g,
                    });
                }
            }
        }
        self.recording.set(previous);
        Ok(grads)
    }

    /// Gradients of a scalar `loss` with respect to every leaf on the tape.
    ///
    /// Fails if the loss was not produced by recorded ops, is not scalar, or
    /// any leaf gradient is non-finite (the error names the leaf's layer).
    pub fn backward<'t>(&'t self, loss: &Var<'t>) -> Result<Gradients> {
        let grads = self.propagate(loss, false)?;
        let nodes = self.nodes.borrow();
        let mut out = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if nodes[id].rule.is_some() {
                continue;
            }
            let value = Rc::try_unwrap(g.value).unwrap_or_else(|rc| (*rc).clone());
            if !value.all_finite() {
                let layer = nodes[id].label.clone().unwrap_or_else(|| format!("leaf #{id}"));
                return Err(SnnError::NonFinite {
                    layer,
                    what: "gradient",
                });
            }
            out.insert(id, value);
        }
        Ok(Gradients { by_id: out })
    }

    /// Gradients of a scalar `output` with respect to `wrt`. With
    /// `create_graph` the returned values are themselves differentiable.
    pub fn grad<'t>(&'t self, output: &Var<'t>, wrt: &[&Var<'t>], create_graph: bool) -> Result<Vec<Var<'t>>> {
        let grads = self.propagate(output, create_graph)?;
        Ok(wrt
            .iter()
            .map(|v| {
                v.id
                    .and_then(|id| grads.get(id).cloned().flatten())
                    .unwrap_or_else(|| self.constant(Tensor::zeros(v.shape())))
            })
            .collect())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_id: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.id.and_then(|id| self.by_id.get(&id))
    }

    /// Gradient of `var`, zeros when the loss does not depend on it.
    pub fn of(&self, var: &Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// A tensor value bound to a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<NodeId>,
    value: Rc<Tensor>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

macro_rules! rule_name {
    ($name:literal) => {
        fn name(&self) -> &'static str {
            $name
        }
    };
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn detach(&self) -> Var<'t> {
        Var {
            tape: self.tape,
            id: None,
            value: self.value.clone(),
        }
    }

    fn op(&self, inputs: &[&Var<'t>], value: Tensor, rule: impl BackwardRule + 'static) -> Var<'t> {
        self.tape.custom(inputs, value, Rc::new(rule))
    }

    fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let value = self.value.zip_map(&other.value, "add", |a, b| a + b);
        self.op(&[self, other], value, AddRule)
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let value = self.value.zip_map(&other.value, "sub", |a, b| a - b);
        self.op(&[self, other], value, SubRule)
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let value = self.value.zip_map(&other.value, "mul", |a, b| a * b);
        self.op(&[self, other], value, MulRule)
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        let value = self.value.zip_map(&other.value, "div", |a, b| a / b);
        self.op(&[self, other], value, DivRule)
    }

    pub fn scale(&self, factor: f32) -> Var<'t> {
        let value = self.value.map(|x| x * factor);
        self.op(&[self], value, ScaleRule(factor))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f32) -> Var<'t> {
        let value = self.value.map(|x| x + c);
        self.op(&[self], value, AddScalarRule)
    }

    pub fn exp(&self) -> Var<'t> {
        let value = self.value.map(f32::exp);
        self.op(&[self], value, ExpRule)
    }

    pub fn sqrt(&self) -> Var<'t> {
        let value = self.value.map(f32::sqrt);
        self.op(&[self], value, SqrtRule)
    }

    pub fn relu(&self) -> Var<'t> {
        let value = self.value.map(|x| x.max(0.0));
        let mask = Rc::new(self.value.map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
        self.op(&[self], value, ReluRule { mask })
    }

    // ---- reductions ----

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value.sum());
        self.op(
            &[self],
            value,
            SumRule {
                shape: self.shape().to_vec(),
            },
        )
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.numel() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Expands a one-element value to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Var<'t> {
        let value = Tensor::full(shape, self.value.item());
        self.op(&[self], value, BroadcastScalarRule)
    }

    // ---- convolution ----

    /// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,Kh,Kw]`, no bias.
    pub fn conv2d(&self, weight: &Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let geom = ConvGeometry::new(self.shape(), weight.shape(), stride, padding)?;
        Ok(self.conv_with(weight, geom))
    }

    fn conv_with(&self, weight: &Var<'t>, geom: ConvGeometry) -> Var<'t> {
        let data = tensor::conv2d_forward(&geom, self.value.data(), weight.value.data());
        let value = Tensor::new(geom.output_shape().to_vec(), data).expect("conv output shape");
        self.op(&[self, weight], value, Conv2dRule { geom })
    }

    fn conv_grad_input(grad_out: &Var<'t>, weight: &Var<'t>, geom: ConvGeometry) -> Var<'t> {
        let data = tensor::conv2d_grad_input(&geom, grad_out.value.data(), weight.value.data());
        let value = Tensor::new(geom.input_shape().to_vec(), data).expect("conv input shape");
        grad_out.op(&[grad_out, weight], value, ConvGradInputRule { geom })
    }

    fn conv_grad_weight(input: &Var<'t>, grad_out: &Var<'t>, geom: ConvGeometry) -> Var<'t> {
        let data = tensor::conv2d_grad_weight(&geom, input.value.data(), grad_out.value.data());
        let value = Tensor::new(geom.weight_shape().to_vec(), data).expect("conv weight shape");
        input.op(&[input, grad_out], value, ConvGradWeightRule { geom })
    }

    /// Adds a per-channel bias `[C]` to `[N,C,H,W]`.
    pub fn add_channel_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let [_, c, _, _] = self.value.dims4("add_channel_bias")?;
        if bias.shape() != [c] {
            return Err(SnnError::ShapeMismatch {
                op: "add_channel_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let broadcast = bias.broadcast_channels(self.shape());
        Ok(self.add(&broadcast))
    }

    fn broadcast_channels(&self, shape: &[usize]) -> Var<'t> {
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let b = self.value.data();
        let value = Tensor::from_fn(shape, |i| b[(i / plane) % c]);
        self.op(&[self], value, BroadcastChannelsRule)
    }

    fn channel_sum(&self) -> Var<'t> {
        let shape = self.shape().to_vec();
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let mut sums = vec![0.0f32; c];
        for (i, chunk) in self.value.data().chunks(plane).enumerate() {
            sums[i % c] += chunk.iter().sum::<f32>();
        }
        let value = Tensor::new(vec![c], sums).expect("channel sums");
        self.op(&[self], value, ChannelSumRule { shape })
    }

    // ---- pooling ----

    /// Max pooling without padding; backward routes to the first maximum.
    pub fn maxpool2d(&self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        let geom = PoolGeometry::new(self.shape(), kernel, stride)?;
        let index = Rc::new(tensor::maxpool_argmax(&geom, self.value.data()));
        Ok(self.gather(index, &geom.output_shape()))
    }

    fn gather(&self, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Var<'t> {
        let src = self.value.data();
        let value = Tensor::new(out_shape.to_vec(), index.iter().map(|&i| src[i]).collect()).expect("gather");
        self.op(
            &[self],
            value,
            GatherRule {
                index,
                in_shape: self.shape().to_vec(),
            },
        )
    }

    fn scatter(&self, index: Rc<Vec<usize>>, in_shape: &[usize]) -> Var<'t> {
        let mut out = Tensor::zeros(in_shape);
        let dst = out.data_mut();
        for (&i, &g) in index.iter().zip(self.value.data()) {
            dst[i] += g;
        }
        self.op(
            &[self],
            out,
            ScatterRule {
                index,
                out_shape: self.shape().to_vec(),
            },
        )
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avgpool(&self) -> Result<Var<'t>> {
        let [n, c, h, w] = self.value.dims4("global_avgpool")?;
        if h == 0 || w == 0 {
            return Err(SnnError::invalid("global_avgpool", "empty spatial extent"));
        }
        let plane = h * w;
        let means = self
            .value
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f32>() / plane as f32)
            .collect();
        let value = Tensor::new(vec![n, c], means).expect("avgpool");
        Ok(self.op(&[self], value, GlobalAvgRule { h, w }))
    }

    fn spread_mean(&self, h: usize, w: usize) -> Var<'t> {
        let [n, c] = [self.shape()[0], self.shape()[1]];
        let plane = h * w;
        let inv = 1.0 / plane as f32;
        let g = self.value.data();
        let value = Tensor::from_fn(&[n, c, h, w], |i| g[i / plane] * inv);
        self.op(&[self], value, SpreadMeanRule)
    }

    // ---- channel concat ----

    /// Concatenates along channels; `a`'s channels come first.
    pub fn concat_channels(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let [na, ca, ha, wa] = a.value.dims4("concat_channels")?;
        let [nb, cb, hb, wb] = b.value.dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(SnnError::ShapeMismatch {
                op: "concat_channels",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(&a.value.data()[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&b.value.data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], data).expect("concat");
        Ok(a.op(&[a, b], value, ConcatRule { ca, cb }))
    }

    fn slice_channels(&self, start: usize, len: usize) -> Var<'t> {
        let [n, c, h, w] = self.value.dims4("slice_channels").expect("rank-4");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            let base = (i * c + start) * plane;
            data.extend_from_slice(&self.value.data()[base..base + len * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], data).expect("slice");
        self.op(&[self], value, SliceChannelsRule { start, total: c })
    }

    fn pad_channels(&self, start: usize, total: usize) -> Var<'t> {
        let [n, len, h, w] = self.value.dims4("pad_channels").expect("rank-4");
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for i in 0..n {
            let dst = (i * total + start) * plane;
            out.data_mut()[dst..dst + len * plane]
                .copy_from_slice(&self.value.data()[i * len * plane..(i + 1) * len * plane]);
        }
        self.op(&[self], out, PadChannelsRule { start, len })
    }

    // ---- classification ----

    /// Row-wise log-softmax of `[N,C]`.
    pub fn log_softmax(&self) -> Var<'t> {
        let c = self.shape()[1];
        let mut data = Vec::with_capacity(self.value.numel());
        for row in self.value.data().chunks(c) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f32>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let value = Tensor::new(self.shape().to_vec(), data).expect("log_softmax");
        self.op(&[self], value, LogSoftmaxRule)
    }

    fn rowsum_broadcast(&self) -> Var<'t> {
        let c = self.shape()[1];
        let mut data = Vec::with_capacity(self.value.numel());
        for row in self.value.data().chunks(c) {
            let s: f32 = row.iter().sum();
            data.extend(std::iter::repeat_n(s, c));
        }
        let value = Tensor::new(self.shape().to_vec(), data).expect("rowsum");
        self.op(&[self], value, RowSumBroadcastRule)
    }

    /// `[N,C] -> [N]`, taking column `labels[n]` from row `n`.
    pub fn pick(&self, labels: &[usize]) -> Result<Var<'t>> {
        let &[n, c] = self.shape() else {
            return Err(SnnError::invalid("pick", format!("expected [N,C], got {:?}", self.shape())));
        };
        if labels.len() != n {
            return Err(SnnError::invalid(
                "pick",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(SnnError::invalid("pick", format!("label {bad} out of range [0, {c})")));
        }
        Ok(self.pick_unchecked(Rc::new(labels.to_vec()), c))
    }

    fn pick_unchecked(&self, labels: Rc<Vec<usize>>, classes: usize) -> Var<'t> {
        let data = self.value.data();
        let value = Tensor::new(
            vec![labels.len()],
            labels.iter().enumerate().map(|(i, &l)| data[i * classes + l]).collect(),
        )
        .expect("pick");
        self.op(&[self], value, PickRule { labels, classes })
    }

    fn place(&self, labels: Rc<Vec<usize>>, classes: usize) -> Var<'t> {
        let mut out = Tensor::zeros(&[labels.len(), classes]);
        for (i, (&l, &g)) in labels.iter().zip(self.value.data()).enumerate() {
            out.data_mut()[i * classes + l] = g;
        }
        self.op(&[self], out, PlaceRule { labels })
    }

    // ---- spiking ----

    /// Spike nonlinearity on membrane potential `self` with threshold `v_th`.
    ///
    /// Forward is the Heaviside step `v >= v_th` (or the arctan soft step when
    /// `smooth`); backward is always `grad * σ'(v - v_th)`.
    pub fn spike(&self, v_th: f32, alpha: f32, smooth: bool) -> Var<'t> {
        let value = if smooth {
            self.value.map(|v| crate::lif::soft_spike(v - v_th, alpha))
        } else {
            self.value.map(|v| if v - v_th >= 0.0 { 1.0 } else { 0.0 })
        };
        self.op(&[self], value, SpikeRule { v_th, alpha })
    }

    fn surrogate(&self, v_th: f32, alpha: f32, order: u8) -> Var<'t> {
        let value = self.value.map(|v| surrogate_nth(v - v_th, alpha, order));
        self.op(&[self], value, SurrogateRule { v_th, alpha, order })
    }

    /// Euler charge `v + (-(v - v_rest) + r * current) / tau` as one op.
    pub fn lif_charge(&self, current: &Var<'t>, tau: f32, v_rest: f32, resistance: f32) -> Var<'t> {
        let value = self
            .value
            .zip_map(&current.value, "lif_charge", |v, i| crate::lif::charge(v, i, tau, v_rest, resistance));
        self.op(
            &[self, current],
            value,
            LifChargeRule {
                decay: 1.0 - 1.0 / tau,
                gain: resistance / tau,
            },
        )
    }

    /// Hard reset `v * (1 - s) + v_reset * s`.
    pub fn lif_reset(&self, spikes: &Var<'t>, v_reset: f32) -> Var<'t> {
        let value = self
            .value
            .zip_map(&spikes.value, "lif_reset", |v, s| crate::lif::reset(v, s, v_reset));
        self.op(&[self, spikes], value, LifResetRule { v_reset })
    }
}

/// `order`-th derivative of the arctan soft step at `u` (order 1 is σ').
pub(crate) fn surrogate_nth(u: f32, alpha: f32, order: u8) -> f32 {
    let a = PI * alpha / 2.0;
    let q = a * u;
    let d = 1.0 + q * q;
    match order {
        1 => (alpha / 2.0) / d,
        2 => (alpha / 2.0) * (-2.0 * a * q) / (d * d),
        3 => (alpha / 2.0) * a * a * (6.0 * q * q - 2.0) / (d * d * d),
        _ => panic!("surrogate derivative of order {order} not available"),
    }
}

// ---- backward rules ----

struct AddRule;
impl BackwardRule for AddRule {
    rule_name!("add");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubRule;
impl BackwardRule for SubRule {
    rule_name!("sub");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.clone()), Some(g.neg())]
    }
}

struct MulRule;
impl BackwardRule for MulRule {
    rule_name!("mul");
    fn backward<'t>(&self, g: &Var<'t>, x: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.mul(&x[1])), Some(g.mul(&x[0]))]
    }
}

struct DivRule;
impl BackwardRule for DivRule {
    rule_name!("div");
    fn backward<'t>(&self, g: &Var<'t>, x: &[Var<'t>], out: &Var<'t>) -> Vec<Option<Var<'t>>> {
        let ga = g.div(&x[1]);
        let gb = g.mul(out).div(&x[1]).neg();
        vec![Some(ga), Some(gb)]
    }
}

struct ScaleRule(f32);
impl BackwardRule for ScaleRule {
    rule_name!("scale");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.scale(self.0))]
    }
}

struct AddScalarRule;
impl BackwardRule for AddScalarRule {
    rule_name!("add_scalar");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.clone())]
    }
}

struct ExpRule;
impl BackwardRule for ExpRule {
    rule_name!("exp");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], out: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.mul(out))]
    }
}

struct SqrtRule;
impl BackwardRule for SqrtRule {
    rule_name!("sqrt");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], out: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.scale(0.5).div(out))]
    }
}

struct ReluRule {
    mask: Rc<Tensor>,
}
impl BackwardRule for ReluRule {
    rule_name!("relu");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.mul(&g.constant((*self.mask).clone())))]
    }
}

struct SumRule {
    shape: Vec<usize>,
}
impl BackwardRule for SumRule {
    rule_name!("sum");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.broadcast_scalar(&self.shape))]
    }
}

struct BroadcastScalarRule;
impl BackwardRule for BroadcastScalarRule {
    rule_name!("broadcast_scalar");
    fn backward<'t>(&self, g: &Var<'t>, x: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        let s = g.sum();
        let s = if x[0].shape() == s.shape() {
            s
        } else {
            s.broadcast_scalar(x[0].shape())
        };
        vec![Some(s)]
    }
}

// conv2d, its input-gradient and its weight-gradient are the three partial
// derivatives of the trilinear form <conv2d(x, w), dy>, so each one's
// backward is expressed with the other two.

struct Conv2dRule {
    geom: ConvGeometry,
}
impl BackwardRule for Conv2dRule {
    rule_name!("conv2d");
    fn backward<'t>(&self, g: &Var<'t>, x: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![
            Some(Var::conv_grad_input(g, &x[1], self.geom)),
            Some(Var::conv_grad_weight(&x[0], g, self.geom)),
        ]
    }
}

struct ConvGradInputRule {
    geom: ConvGeometry,
}
impl BackwardRule for ConvGradInputRule {
    rule_name!("conv2d_grad_input");
    fn backward<'t>(&self, g: &Var<'t>, x: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        // inputs: (dy, w); g has the shape of the convolution input
        vec![
            Some(g.conv_with(&x[1], self.geom)),
            Some(Var::conv_grad_weight(g, &x[0], self.geom)),
        ]
    }
}

struct ConvGradWeightRule {
    geom: ConvGeometry,
}
impl BackwardRule for ConvGradWeightRule {
    rule_name!("conv2d_grad_weight");
    fn backward<'t>(&self, g: &Var<'t>, x: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        // inputs: (x, dy); g has the shape of the weight
        vec![
            Some(Var::conv_grad_input(&x[1], g, self.geom)),
            Some(x[0].conv_with(g, self.geom)),
        ]
    }
}

struct BroadcastChannelsRule;
impl BackwardRule for BroadcastChannelsRule {
    rule_name!("broadcast_channels");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.channel_sum())]
    }
}

struct ChannelSumRule {
    shape: Vec<usize>,
}
impl BackwardRule for ChannelSumRule {
    rule_name!("channel_sum");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.broadcast_channels(&self.shape))]
    }
}

struct GatherRule {
    index: Rc<Vec<usize>>,
    in_shape: Vec<usize>,
}
impl BackwardRule for GatherRule {
    rule_name!("gather");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.scatter(self.index.clone(), &self.in_shape))]
    }
}

struct ScatterRule {
    index: Rc<Vec<usize>>,
    out_shape: Vec<usize>,
}
impl BackwardRule for ScatterRule {
    rule_name!("scatter");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.gather(self.index.clone(), &self.out_shape))]
    }
}

struct GlobalAvgRule {
    h: usize,
    w: usize,
}
impl BackwardRule for GlobalAvgRule {
    rule_name!("global_avgpool");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.spread_mean(self.h, self.w))]
    }
}

struct SpreadMeanRule;
impl BackwardRule for SpreadMeanRule {
    rule_name!("spread_mean");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.global_avgpool().expect("rank-4 gradient"))]
    }
}

struct ConcatRule {
    ca: usize,
    cb: usize,
}
impl BackwardRule for ConcatRule {
    rule_name!("concat_channels");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![
            Some(g.slice_channels(0, self.ca)),
            Some(g.slice_channels(self.ca, self.cb)),
        ]
    }
}

struct SliceChannelsRule {
    start: usize,
    total: usize,
}
impl BackwardRule for SliceChannelsRule {
    rule_name!("slice_channels");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.pad_channels(self.start, self.total))]
    }
}

struct PadChannelsRule {
    start: usize,
    len: usize,
}
impl BackwardRule for PadChannelsRule {
    rule_name!("pad_channels");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.slice_channels(self.start, self.len))]
    }
}

struct LogSoftmaxRule;
impl BackwardRule for LogSoftmaxRule {
    rule_name!("log_softmax");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], out: &Var<'t>) -> Vec<Option<Var<'t>>> {
        let softmax = out.exp();
        vec![Some(g.sub(&softmax.mul(&g.rowsum_broadcast())))]
    }
}

struct RowSumBroadcastRule;
impl BackwardRule for RowSumBroadcastRule {
    rule_name!("rowsum_broadcast");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.rowsum_broadcast())]
    }
}

struct PickRule {
    labels: Rc<Vec<usize>>,
    classes: usize,
}
impl BackwardRule for PickRule {
    rule_name!("pick");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.place(self.labels.clone(), self.classes))]
    }
}

struct PlaceRule {
    labels: Rc<Vec<usize>>,
}
impl BackwardRule for PlaceRule {
    rule_name!("place");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        let classes = g.shape()[1];
        vec![Some(g.pick_unchecked(self.labels.clone(), classes))]
    }
}

struct SpikeRule {
    v_th: f32,
    alpha: f32,
}
impl BackwardRule for SpikeRule {
    rule_name!("spike");
    fn backward<'t>(&self, g: &Var<'t>, x: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.mul(&x[0].surrogate(self.v_th, self.alpha, 1)))]
    }
}

struct SurrogateRule {
    v_th: f32,
    alpha: f32,
    order: u8,
}
impl BackwardRule for SurrogateRule {
    rule_name!("surrogate");
    fn backward<'t>(&self, g: &Var<'t>, x: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        // third-order terms never arise from second-order training objectives
        if self.order >= 3 {
            return vec![None];
        }
        vec![Some(g.mul(&x[0].surrogate(self.v_th, self.alpha, self.order + 1)))]
    }
}

struct LifChargeRule {
    decay: f32,
    gain: f32,
}
impl BackwardRule for LifChargeRule {
    rule_name!("lif_charge");
    fn backward<'t>(&self, g: &Var<'t>, _: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        vec![Some(g.scale(self.decay)), Some(g.scale(self.gain))]
    }
}

struct LifResetRule {
    v_reset: f32,
}
impl BackwardRule for LifResetRule {
    rule_name!("lif_reset");
    fn backward<'t>(&self, g: &Var<'t>, x: &[Var<'t>], _: &Var<'t>) -> Vec<Option<Var<'t>>> {
        let keep = x[1].neg().add_scalar(1.0);
        let jump = x[0].neg().add_scalar(self.v_reset);
        vec![Some(g.mul(&keep)), Some(g.mul(&jump))]
    }
}
