//! Runnable SqueezeNet built from an [`ArchSpec`].
//!
//! SNN mode wraps every convolution except the classifier in a LIF stage
//! and unrolls `time_steps` steps. The input image is a constant current, so
//! conv1 runs once and its output drives the first LIF layer at every step.
//! CNN mode uses ReLU and a single pass. The classifier is a 1x1 conv
//! followed by global average pooling, giving logits per time step.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{rewire, ArchSpec, Mode, PoolSite};
use crate::autodiff::{Tape, Var};
use crate::error::{Result, SnnError};
use crate::lif::LifNeurons;
use crate::tensor::{ConvGeometry, Tensor};

/// A named trainable tensor plus the gradient from the last backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Index of the weight in [`Network::params`]; the bias follows it.
    pub weight: usize,
    /// Followed by a LIF (SNN) or ReLU (CNN) stage.
    pub activated: bool,
}

impl ConvLayer {
    pub fn bias(&self) -> usize {
        self.weight + 1
    }

    pub fn kind(&self) -> String {
        format!("conv{}x{}", self.kernel, self.kernel)
    }

    pub fn param_count(&self) -> u64 {
        (self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)) as u64
    }

    pub fn geometry(&self, input: &[usize]) -> Result<ConvGeometry> {
        ConvGeometry::new(
            input,
            &[self.out_channels, self.in_channels, self.kernel, self.kernel],
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Stage {
    Conv(usize),
    Fire {
        squeeze: usize,
        expand1: usize,
        expand3: usize,
    },
    Pool,
}

/// Observer of a forward pass; the op profiler and firing monitor use it.
pub trait ForwardProbe {
    /// A convolution is about to run on `input`. `analog` is true for the
    /// constant-current image input, false for spike (or ReLU) activations.
    fn conv(&mut self, _layer: &ConvLayer, _input: &Tensor, _analog: bool) -> Result<()> {
        Ok(())
    }

    /// Output of the nonlinearity after `layer` at one time step.
    fn activation(&mut self, _layer: &ConvLayer, _output: &Tensor) {}
}

/// Probe that records nothing.
pub struct NoProbe;

impl ForwardProbe for NoProbe {}

/// Counts spikes over all LIF layers.
#[derive(Clone, Debug, Default)]
pub struct FiringMonitor {
    pub spikes: f64,
    pub neuron_steps: f64,
}

impl FiringMonitor {
    pub fn rate(&self) -> f64 {
        if self.neuron_steps == 0.0 {
            0.0
        } else {
            self.spikes / self.neuron_steps
        }
    }
}

impl ForwardProbe for FiringMonitor {
    fn activation(&mut self, _layer: &ConvLayer, output: &Tensor) {
        self.spikes += output.data().iter().map(|&x| x as f64).sum::<f64>();
        self.neuron_steps += output.numel() as f64;
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: ArchSpec,
    params: Vec<Param>,
    convs: Vec<ConvLayer>,
    stages: Vec<Stage>,
    classifier: usize,
}

impl Network {
    /// Builds the network with seeded uniform initialisation:
    /// weights and biases in `±sqrt(6 / fan_in)`.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let plan = rewire(spec);
        let mut params = Vec::new();
        let mut convs = Vec::new();
        let mut stages = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut add_conv = |name: String, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, act: bool| {
            let fan_in = (cin * k * k) as f32;
            let bound = (6.0 / fan_in).sqrt();
            let weight = Tensor::from_fn(&[cout, cin, k, k], |_| rng.random_range(-bound..bound));
            let bias = Tensor::zeros(&[cout]);
            let index = params.len();
            params.push(Param {
                name: format!("{name}.weight"),
                value: weight,
                grad: None,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: bias,
                grad: None,
            });
            convs.push(ConvLayer {
                name,
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride,
                padding: pad,
                weight: index,
                activated: act,
            });
            convs.len() - 1
        };

        let c = &spec.conv1;
        let conv1 = add_conv("conv1".into(), spec.in_channels, c.filters, c.kernel, c.stride, c.padding, true);
        stages.push(Stage::Conv(conv1));
        if spec.pools.contains(&PoolSite::AfterConv1) {
            stages.push(Stage::Pool);
        }
        for (k, &(n, cin, _)) in plan.fires.iter().enumerate() {
            let f = spec.fire(n);
            let squeeze = add_conv(format!("fire{n}.squeeze"), cin, f.squeeze, 1, 1, 0, true);
            let expand1 = add_conv(format!("fire{n}.expand1"), f.squeeze, f.expand1, 1, 1, 0, true);
            let expand3 = add_conv(format!("fire{n}.expand3"), f.squeeze, f.expand3, 3, 1, 1, true);
            stages.push(Stage::Fire {
                squeeze,
                expand1,
                expand3,
            });
            if spec.pools.contains(&PoolSite::AfterRetained(k + 1)) {
                stages.push(Stage::Pool);
            }
        }
        let classifier = add_conv(
            "classifier".into(),
            plan.classifier_in,
            spec.num_classes,
            1,
            1,
            0,
            false,
        );
        Ok(Network {
            spec: spec.clone(),
            params,
            convs,
            stages,
            classifier,
        })
    }

    /// Network for `spec` with the given parameter values in build order.
    pub fn from_parts(spec: &ArchSpec, values: Vec<Tensor>) -> Result<Self> {
        let mut net = Network::build(spec, 0)?;
        if values.len() != net.params.len() {
            return Err(SnnError::invalid(
                "from_parts",
                format!("{} tensors for {} parameters", values.len(), net.params.len()),
            ));
        }
        for (p, v) in net.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(SnnError::ShapeMismatch {
                    op: "from_parts",
                    left: p.value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            p.value = v;
        }
        Ok(net)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn convs(&self) -> &[ConvLayer] {
        &self.convs
    }

    /// Runtime parameter enumeration.
    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.numel() as u64).sum()
    }

    /// Indices of conv weights (the per-layer tensors the gradient-aware
    /// loss and gradient-flow logging look at), in build order.
    pub fn weight_indices(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.weight).collect()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Registers every parameter on `tape` as a named leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.param(&p.name, p.value.clone())).collect()
    }

    /// Parameters as constants, for inference.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    fn conv<'t>(
        &self,
        layer: usize,
        params: &[Var<'t>],
        input: &Var<'t>,
        analog: bool,
        probe: &mut dyn ForwardProbe,
    ) -> Result<Var<'t>> {
        let l = &self.convs[layer];
        probe.conv(l, input.value(), analog)?;
        input
            .conv2d(&params[l.weight], l.stride, l.padding)?
            .add_channel_bias(&params[l.bias()])
    }

    /// Forward pass over a batch `[N, C, H, W]`; returns one `[N, classes]`
    /// logit tensor per time step (a single one in CNN mode).
    ///
    /// `smooth` swaps the Heaviside spike for the soft arctan step so the
    /// whole network is differentiable (gradient checking only).
    pub fn forward<'t>(
        &self,
        params: &[Var<'t>],
        input: &Var<'t>,
        smooth: bool,
        probe: &mut dyn ForwardProbe,
    ) -> Result<Vec<Var<'t>>> {
        if params.len() != self.params.len() {
            return Err(SnnError::invalid(
                "forward",
                format!("{} parameter values for {} parameters", params.len(), self.params.len()),
            ));
        }
        let dims = input.value().dims4("forward")?;
        if dims[1] != self.spec.in_channels {
            return Err(SnnError::ShapeMismatch {
                op: "forward",
                left: input.shape().to_vec(),
                right: vec![dims[0], self.spec.in_channels, dims[2], dims[3]],
            });
        }
        match self.spec.mode {
            Mode::Cnn => Ok(vec![self.forward_cnn(params, input, probe)?]),
            Mode::Snn => self.forward_snn(params, input, smooth, probe),
        }
    }

    fn forward_cnn<'t>(&self, params: &[Var<'t>], input: &Var<'t>, probe: &mut dyn ForwardProbe) -> Result<Var<'t>> {
        let act = |layer: usize, x: &Var<'t>, analog: bool, probe: &mut dyn ForwardProbe| -> Result<Var<'t>> {
            let y = self.conv(layer, params, x, analog, probe)?.relu();
            probe.activation(&self.convs[layer], y.value());
            Ok(y)
        };
        let mut h = input.clone();
        let mut analog = true;
        for stage in &self.stages {
            h = match *stage {
                Stage::Conv(i) => act(i, &h, analog, probe)?,
                Stage::Pool => h.maxpool2d(self.spec.pool_kernel, self.spec.pool_stride)?,
                Stage::Fire {
                    squeeze,
                    expand1,
                    expand3,
                } => {
                    let s = act(squeeze, &h, false, probe)?;
                    let e1 = act(expand1, &s, false, probe)?;
                    let e3 = act(expand3, &s, false, probe)?;
                    Var::concat_channels(&e1, &e3)?
                }
            };
            analog = false;
        }
        self.conv(self.classifier, params, &h, false, probe)?.global_avgpool()
    }

    fn forward_snn<'t>(
        &self,
        params: &[Var<'t>],
        input: &Var<'t>,
        smooth: bool,
        probe: &mut dyn ForwardProbe,
    ) -> Result<Vec<Var<'t>>> {
        let lif = self.spec.lif;
        let mut neurons: Vec<LifNeurons<'t>> = vec![LifNeurons::new(); self.convs.len()];
        let Some(Stage::Conv(first)) = self.stages.first().cloned() else {
            unreachable!("conv1 always leads the stage list");
        };
        // time-invariant input current
        let stem_current = self.conv(first, params, input, true, probe)?;
        let mut logits = Vec::with_capacity(self.spec.time_steps);
        for _ in 0..self.spec.time_steps {
            let mut fire_layer = |layer: usize, current: &Var<'t>, probe: &mut dyn ForwardProbe| -> Result<Var<'t>> {
                let l = &self.convs[layer];
                let s = neurons[layer].step(&l.name, current, &lif, smooth)?;
                probe.activation(l, s.value());
                Ok(s)
            };
            let mut h = fire_layer(first, &stem_current, probe)?;
            for stage in &self.stages[1..] {
                h = match *stage {
                    Stage::Conv(_) => unreachable!("only conv1 is a bare conv stage"),
                    Stage::Pool => h.maxpool2d(self.spec.pool_kernel, self.spec.pool_stride)?,
                    Stage::Fire {
                        squeeze,
                        expand1,
                        expand3,
                    } => {
                        let c = self.conv(squeeze, params, &h, false, probe)?;
                        let s = fire_layer(squeeze, &c, probe)?;
                        let c1 = self.conv(expand1, params, &s, false, probe)?;
                        let e1 = fire_layer(expand1, &c1, probe)?;
                        let c3 = self.conv(expand3, params, &s, false, probe)?;
                        let e3 = fire_layer(expand3, &c3, probe)?;
                        Var::concat_channels(&e1, &e3)?
                    }
                };
            }
            logits.push(self.conv(self.classifier, params, &h, false, probe)?.global_avgpool()?);
        }
        Ok(logits)
    }

    /// Time-averaged logits for a batch, no gradient tracking.
    pub fn logits(&self, images: &Tensor, probe: &mut dyn ForwardProbe) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind_constant(&tape);
        let x = tape.constant(images.clone());
        let steps = self.forward(&params, &x, false, probe)?;
        let mut sum = steps[0].clone();
        for s in &steps[1..] {
            sum = sum.add(s);
        }
        Ok(sum.scale(1.0 / steps.len() as f32).value().clone())
    }

    /// Arg-max class per image (ties resolve to the lowest index).
    pub fn predict(&self, images: &Tensor, probe: &mut dyn ForwardProbe) -> Result<Vec<usize>> {
        let logits = self.logits(images, probe)?;
        let classes = logits.shape()[1];
        Ok(logits.data().chunks(classes).map(argmax).collect())
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{count_params, PruneSchedule};

    #[test]
    fn conv_counts_per_schedule() {
        let full = Network::build(&ArchSpec::squeezenet(10, Mode::Snn), 1).unwrap();
        assert_eq!(full.convs().len(), 26);
        let ref1 = Network::build(&ArchSpec::squeezenet(10, Mode::Snn).with_schedule(PruneSchedule::Ref1), 1).unwrap();
        assert_eq!(ref1.convs().len(), 14);
    }

    #[test]
    fn runtime_count_matches_closed_form() {
        for s in PruneSchedule::ALL {
            for mode in [Mode::Snn, Mode::Cnn] {
                let spec = ArchSpec::squeezenet(10, mode).with_schedule(s);
                let net = Network::build(&spec, 0).unwrap();
                assert_eq!(net.param_count(), count_params(&spec), "{s} {mode}");
            }
        }
    }

    #[test]
    fn build_is_seed_deterministic() {
        let spec = ArchSpec::squeezenet(4, Mode::Snn).scale_width(0.25);
        let a = Network::build(&spec, 42).unwrap();
        let b = Network::build(&spec, 42).unwrap();
        let c = Network::build(&spec, 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn small_forward_shapes() {
        for mode in [Mode::Snn, Mode::Cnn] {
            let spec = ArchSpec::squeezenet(7, mode)
                .with_schedule(PruneSchedule::Ref1)
                .scale_width(0.125);
            let net = Network::build(&spec, 3).unwrap();
            let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i as f32) * 0.31).sin());
            let logits = net.logits(&x, &mut NoProbe).unwrap();
            assert_eq!(logits.shape(), &[2, 7]);
            assert!(logits.all_finite());
        }
    }

    #[test]
    fn snn_activations_are_binary() {
        struct Check(usize);
        impl ForwardProbe for Check {
            fn activation(&mut self, _l: &ConvLayer, out: &Tensor) {
                assert!(out.is_binary());
                self.0 += 1;
            }
        }
        let spec = ArchSpec::squeezenet(3, Mode::Snn).with_schedule(PruneSchedule::Alt2).scale_width(0.125);
        let net = Network::build(&spec, 9).unwrap();
        let x = Tensor::from_fn(&[1, 3, 16, 16], |i| ((i as f32) * 0.7).cos() * 3.0);
        let mut probe = Check(0);
        net.logits(&x, &mut probe).unwrap();
        // conv1 + 4 fires * 3 LIF layers, per time step
        assert_eq!(probe.0, 13 * spec.time_steps);
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let spec = ArchSpec::squeezenet(3, Mode::Cnn).scale_width(0.125);
        let net = Network::build(&spec, 0).unwrap();
        assert!(net.logits(&Tensor::zeros(&[1, 1, 16, 16]), &mut NoProbe).is_err());
    }
}
