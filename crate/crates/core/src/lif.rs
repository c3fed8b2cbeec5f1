//! Leaky integrate-and-fire dynamics.
//!
//! One step is an explicit Euler update with unit step of
//! `tau * dV/dt = -(V - V_rest) + R * I`, an optional extra multiplicative
//! leak, a Heaviside spike at `V >= V_th`, and a hard reset to `V_reset`.
//! The spike's backward pass is the arctan surrogate
//! `σ'(u) = (α/2) / (1 + (π α u / 2)^2)` with `u = V - V_th`.

use std::f32::consts::PI;

use crate::autodiff::Var;
use crate::error::{Result, SnnError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub tau: f32,
    pub v_th: f32,
    pub v_rest: f32,
    pub v_reset: f32,
    pub resistance: f32,
    /// Extra multiplicative decay `v <- (1 - leak) * v` after charging.
    pub leak_factor: Option<f32>,
    pub alpha: f32,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau: 2.0,
            v_th: 1.0,
            v_rest: 0.0,
            v_reset: 0.0,
            resistance: 1.0,
            leak_factor: None,
            alpha: 2.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(SnnError::invalid("lif", format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.v_th > self.v_reset) {
            return Err(SnnError::invalid(
                "lif",
                format!("v_th ({}) must exceed v_reset ({})", self.v_th, self.v_reset),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(SnnError::invalid("lif", format!("alpha must be > 0, got {}", self.alpha)));
        }
        if let Some(leak) = self.leak_factor {
            if !(0.0..1.0).contains(&leak) {
                return Err(SnnError::invalid("lif", format!("leak_factor must lie in [0, 1), got {leak}")));
            }
        }
        Ok(())
    }
}

/// Euler charge of one neuron.
#[inline]
pub(crate) fn charge(v: f32, current: f32, tau: f32, v_rest: f32, resistance: f32) -> f32 {
    v + (-(v - v_rest) + resistance * current) / tau
}

#[inline]
pub(crate) fn reset(v: f32, spike: f32, v_reset: f32) -> f32 {
    v * (1.0 - spike) + v_reset * spike
}

/// Arctan surrogate derivative of the Heaviside step.
pub fn surrogate_derivative(u: f32, alpha: f32) -> f32 {
    let q = PI * alpha * u / 2.0;
    (alpha / 2.0) / (1.0 + q * q)
}

/// Smooth step whose derivative is exactly [`surrogate_derivative`].
pub fn soft_spike(u: f32, alpha: f32) -> f32 {
    (PI * alpha * u / 2.0).atan() / PI + 0.5
}

/// Membrane state of one layer of neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub v: Tensor,
    pub t: usize,
}

impl LifState {
    pub fn new(shape: &[usize], params: &LifParams) -> Self {
        LifState {
            v: Tensor::full(shape, params.v_rest),
            t: 0,
        }
    }
}

pub fn reset_state(state: &mut LifState, params: &LifParams) {
    state.v.data_mut().fill(params.v_rest);
    state.t = 0;
}

/// Advances `state` by one step and returns the binary spike tensor.
pub fn lif_step(state: &mut LifState, current: &Tensor, params: &LifParams) -> Result<Tensor> {
    if current.shape() != state.v.shape() {
        return Err(SnnError::ShapeMismatch {
            op: "lif_step",
            left: state.v.shape().to_vec(),
            right: current.shape().to_vec(),
        });
    }
    if !current.all_finite() {
        return Err(SnnError::NonFinite {
            layer: "lif".into(),
            what: "input current",
        });
    }
    let keep = params.leak_factor.map(|l| 1.0 - l);
    let mut spikes = Tensor::zeros(current.shape());
    for ((v, &i), s) in state
        .v
        .data_mut()
        .iter_mut()
        .zip(current.data())
        .zip(spikes.data_mut())
    {
        let mut nv = charge(*v, i, params.tau, params.v_rest, params.resistance);
        if let Some(k) = keep {
            nv *= k;
        }
        *s = if nv - params.v_th >= 0.0 { 1.0 } else { 0.0 };
        *v = reset(nv, *s, params.v_reset);
    }
    state.t += 1;
    Ok(spikes)
}

/// Differentiable LIF layer state living on a tape.
#[derive(Clone, Debug)]
pub struct LifNeurons<'t> {
    v: Option<Var<'t>>,
    t: usize,
}

impl Default for LifNeurons<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'t> LifNeurons<'t> {
    pub fn new() -> Self {
        LifNeurons { v: None, t: 0 }
    }

    pub fn time_step(&self) -> usize {
        self.t
    }

    pub fn membrane(&self) -> Option<&Var<'t>> {
        self.v.as_ref()
    }

    /// One recorded LIF step. With `smooth`, the forward uses
    /// [`soft_spike`] instead of the Heaviside step (gradient checking only).
    pub fn step(&mut self, layer: &str, current: &Var<'t>, params: &LifParams, smooth: bool) -> Result<Var<'t>> {
        if !current.value().all_finite() {
            return Err(SnnError::NonFinite {
                layer: layer.to_string(),
                what: "input current",
            });
        }
        let v = match self.v.take() {
            Some(v) => v,
            None => current.tape().constant(Tensor::full(current.shape(), params.v_rest)),
        };
        if v.shape() != current.shape() {
            return Err(SnnError::ShapeMismatch {
                op: "lif_step",
                left: v.shape().to_vec(),
                right: current.shape().to_vec(),
            });
        }
        let mut v = v.lif_charge(current, params.tau, params.v_rest, params.resistance);
        if let Some(leak) = params.leak_factor {
            v = v.scale(1.0 - leak);
        }
        let spikes = v.spike(params.v_th, params.alpha, smooth);
        self.v = Some(v.lif_reset(&spikes, params.v_reset));
        self.t += 1;
        Ok(spikes)
    }
}
