//! Training: time-averaged cross-entropy, the gradient-aware auxiliary loss,
//! Adam with step decay, and early stopping on validation accuracy.
//!
//! The auxiliary term is `λ Σ_l ε / (g_l + ε)` with `g_l` the L2 norm of the
//! cross-entropy gradient of conv weight `l`, which equals
//! `λ Σ_l (1 - g_l / (g_l + ε))`. In `monitor` mode it is only logged; in
//! `exact` mode it is differentiated through a double backward pass.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Result, SnnError};
use crate::metrics::evaluate;
use crate::network::{argmax, FiringMonitor, Network, NoProbe, Param};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaMode {
    Monitor,
    Exact,
}

impl fmt::Display for GaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GaMode::Monitor => "monitor",
            GaMode::Exact => "exact",
        })
    }
}

impl FromStr for GaMode {
    type Err = SnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monitor" => Ok(GaMode::Monitor),
            "exact" => Ok(GaMode::Exact),
            _ => Err(SnnError::Config(format!("unknown ga_mode `{s}` (valid: monitor, exact)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub decay_factor: f32,
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub lambda: f32,
    pub epsilon: f32,
    pub ga_mode: GaMode,
    pub val_fraction: f64,
    /// Stop as soon as running training accuracy reaches this value.
    pub target_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            decay_factor: 0.1,
            decay_epochs: vec![50, 100],
            batch_size: 12,
            max_epochs: 120,
            patience: 10,
            seed: 42,
            lambda: 0.1,
            epsilon: 1e-8,
            ga_mode: GaMode::Monitor,
            val_fraction: 0.1,
            target_train_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SnnError::Config(msg));
        if !(self.lr > 0.0) {
            return fail(format!("train.lr must be > 0, got {}", self.lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return fail(format!("train.decay_factor must lie in (0, 1), got {}", self.decay_factor));
        }
        if self.patience < 1 {
            return fail("train.patience must be >= 1".into());
        }
        if self.batch_size < 1 {
            return fail("train.batch_size must be >= 1".into());
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("train.lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("train.epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("train.val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ga: f64,
    pub total: f64,
    pub per_layer_grad_norms: Vec<(String, f64)>,
}

impl LossBreakdown {
    pub fn new(ce: f64, ga: f64, per_layer_grad_norms: Vec<(String, f64)>) -> Self {
        LossBreakdown {
            ce,
            ga,
            total: total_loss(ce, ga),
            per_layer_grad_norms,
        }
    }
}

/// Softmax of the time-averaged logits, mean negative log-likelihood.
pub fn ce_loss_over_time<'t>(logits_per_step: &[Var<'t>], labels: &[usize]) -> Result<Var<'t>> {
    let Some(first) = logits_per_step.first() else {
        return Err(SnnError::invalid("ce_loss", "no time steps"));
    };
    let mut sum = first.clone();
    for step in &logits_per_step[1..] {
        if step.shape() != first.shape() {
            return Err(SnnError::ShapeMismatch {
                op: "ce_loss",
                left: first.shape().to_vec(),
                right: step.shape().to_vec(),
            });
        }
        sum = sum.add(step);
    }
    let mean = sum.scale(1.0 / logits_per_step.len() as f32);
    Ok(mean.log_softmax().pick(labels)?.mean().neg())
}

/// Value-only form of [`ce_loss_over_time`].
pub fn ce_loss_value(logits_per_step: &[Tensor], labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = logits_per_step.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(ce_loss_over_time(&vars, labels)?.value().item() as f64)
}

pub fn ga_loss(grad_norms: &[f64], lambda: f64, epsilon: f64) -> f64 {
    lambda * grad_norms.iter().map(|&g| epsilon / (g + epsilon)).sum::<f64>()
}

pub fn total_loss(ce: f64, ga: f64) -> f64 {
    ce + ga
}

/// Differentiable auxiliary loss over `weights`, built from the
/// double-backward gradients of `ce`. Returns the loss and the norms.
pub fn ga_loss_exact<'t>(ce: &Var<'t>, weights: &[&Var<'t>], lambda: f32, epsilon: f32) -> Result<(Var<'t>, Vec<f64>)> {
    let tape = ce.tape();
    let grads = tape.grad(ce, weights, true)?;
    let eps = tape.constant(Tensor::scalar(epsilon));
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut norms = Vec::with_capacity(grads.len());
    for g in &grads {
        // the offset keeps the square root differentiable at zero gradient
        let norm = g.mul(g).sum().add_scalar(1e-30).sqrt();
        norms.push(norm.value().item() as f64);
        total = total.add(&eps.div(&norm.add_scalar(epsilon)));
    }
    Ok((total.scale(lambda), norms))
}

pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> f32 {
    let decays = config.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    config.lr * config.decay_factor.powi(decays as i32)
}

/// True once the best value (earliest on ties) is `patience` or more epochs
/// old, so a plateau at the best counts as no improvement.
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    let Some(best) = history
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if v <= b => best,
            _ => Some((i, v)),
        })
    else {
        return false;
    };
    history.len() - 1 - best.0 >= patience
}

pub fn l2_norm(t: &Tensor) -> f64 {
    t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// `(layer, ‖∇W‖₂)` for every conv weight, in build order.
pub fn log_grad_norms(network: &Network) -> Result<Vec<(String, f64)>> {
    let params = network.params();
    if params.iter().all(|p| p.grad.is_none()) {
        return Err(SnnError::NoGradients);
    }
    Ok(network
        .convs()
        .iter()
        .map(|c| {
            let norm = params[c.weight].grad.as_ref().map_or(0.0, l2_norm);
            (c.name.clone(), norm)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    /// One bias-corrected update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [Param], lr: f32) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(SnnError::ShapeMismatch {
                        op: "adam",
                        left: p.value.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(SnnError::NonFinite {
                        layer: p.name.clone(),
                        what: "gradient",
                    });
                }
            }
        }
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
            self.step = 0;
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.as_ref().map(Tensor::data);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One optimisation step on a batch. Leaves gradients in `network` params
/// and returns the loss breakdown, the predictions and spike statistics.
pub fn train_step(
    network: &mut Network,
    images: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    adam: &mut Adam,
    lr: f32,
    monitor: &mut FiringMonitor,
) -> Result<(LossBreakdown, Vec<usize>)> {
    let tape = Tape::new();
    let params = network.bind(&tape);
    let x = tape.constant(images.clone());
    let logits = network.forward(&params, &x, false, monitor)?;
    let preds = predictions(&logits);
    let ce = ce_loss_over_time(&logits, labels)?;
    let weight_idx = network.weight_indices();
    let names: Vec<String> = network.convs().iter().map(|c| c.name.clone()).collect();

    let (grads, breakdown) = match config.ga_mode {
        GaMode::Monitor => {
            let grads = tape.backward(&ce)?;
            let norms: Vec<f64> = weight_idx.iter().map(|&i| l2_norm(&grads.of(&params[i]))).collect();
            let ga = ga_loss(&norms, config.lambda as f64, config.epsilon as f64);
            (grads, LossBreakdown::new(ce.value().item() as f64, ga, names.into_iter().zip(norms).collect()))
        }
        GaMode::Exact => {
            let weights: Vec<&Var> = weight_idx.iter().map(|&i| &params[i]).collect();
            let (ga, norms) = ga_loss_exact(&ce, &weights, config.lambda, config.epsilon)?;
            let total = ce.add(&ga);
            let grads = tape.backward(&total)?;
            let breakdown = LossBreakdown::new(
                ce.value().item() as f64,
                ga.value().item() as f64,
                names.into_iter().zip(norms).collect(),
            );
            (grads, breakdown)
        }
    };
    for (p, var) in network.params_mut().iter_mut().zip(&params) {
        p.grad = Some(grads.of(var));
    }
    adam.step(network.params_mut(), lr)?;
    Ok((breakdown, preds))
}

fn predictions(logits: &[Var<'_>]) -> Vec<usize> {
    let shape = logits[0].shape();
    let classes = shape[1];
    let mut sum = vec![0.0f32; logits[0].value().numel()];
    for step in logits {
        for (s, &x) in sum.iter_mut().zip(step.value().data()) {
            *s += x;
        }
    }
    sum.chunks(classes).map(argmax).collect()
}

/// Predictions over a dataset in batches of `batch_size`.
pub fn predict_dataset(network: &Network, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let len = batch_size.min(data.len() - start);
        preds.extend(network.predict(&data.images.slice_batch(start, len), &mut NoProbe)?);
        start += len;
    }
    Ok(preds)
}

pub fn accuracy(network: &Network, data: &Dataset, batch_size: usize) -> Result<f64> {
    let preds = predict_dataset(network, data, batch_size)?;
    Ok(evaluate(&preds, &data.labels, data.class_count)?.accuracy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub ce: f64,
    pub ga: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub firing_rate: Option<f64>,
    /// Batch-mean cross-entropy gradient norm per conv weight.
    pub grad_norms: Vec<(String, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    TargetReached,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max-epochs",
            StopReason::EarlyStop => "early-stop",
            StopReason::TargetReached => "target-reached",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub stop: StopReason,
}

/// Full training loop. Batches follow a seeded per-epoch shuffle; the run
/// is single-threaded and bit-reproducible for a fixed config.
pub fn train(
    network: &mut Network,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(SnnError::invalid("train", "empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history: Vec<EpochLog> = Vec::new();
    let mut val_history = Vec::new();
    let snn = network.spec().mode == crate::arch::Mode::Snn;

    for epoch in 0..config.max_epochs {
        let lr = lr_at_epoch(epoch, config);
        order.shuffle(&mut rng);
        let mut monitor = FiringMonitor::default();
        let (mut ce, mut ga, mut correct, mut batches) = (0.0, 0.0, 0usize, 0usize);
        let mut norms: Vec<(String, f64)> = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let images = train_set.images.select_batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, preds) = train_step(network, &images, &labels, config, &mut adam, lr, &mut monitor)?;
            ce += loss.ce;
            ga += loss.ga;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            if norms.is_empty() {
                norms = loss.per_layer_grad_norms;
            } else {
                for (acc, (_, g)) in norms.iter_mut().zip(loss.per_layer_grad_norms) {
                    acc.1 += g;
                }
            }
            batches += 1;
        }
        for n in &mut norms {
            n.1 /= batches as f64;
        }
        let (ce, ga) = (ce / batches as f64, ga / batches as f64);
        let val_acc = if val_set.is_empty() {
            0.0
        } else {
            accuracy(network, val_set, config.batch_size.max(32))?
        };
        let log = EpochLog {
            epoch,
            lr,
            train_loss: total_loss(ce, ga),
            ce,
            ga,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
            firing_rate: snn.then(|| monitor.rate()),
            grad_norms: norms,
        };
        on_epoch(&log);
        val_history.push(val_acc);
        let target_hit = config.target_train_acc.is_some_and(|t| log.train_acc >= t);
        history.push(log);
        if target_hit {
            return Ok(TrainOutcome {
                history,
                stop: StopReason::TargetReached,
            });
        }
        if !val_set.is_empty() && early_stop_check(&val_history, config.patience) {
            return Ok(TrainOutcome {
                history,
                stop: StopReason::EarlyStop,
            });
        }
    }
    Ok(TrainOutcome {
        history,
        stop: StopReason::MaxEpochs,
    })
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,train_loss,ce,ga,val_acc,firing_rate";

pub fn train_log_csv(history: &[EpochLog]) -> String {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for e in history {
        let rate = e.firing_rate.map(|r| format!("{r:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:e},{:.6},{:.6},{:.6e},{:.6},{}",
            e.epoch, e.lr, e.train_loss, e.ce, e.ga, e.val_acc, rate
        );
    }
    out
}

pub fn grad_norm_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("epoch,layer,grad_norm\n");
    for e in history {
        for (layer, g) in &e.grad_norms {
            let _ = writeln!(out, "{},{},{:.6e}", e.epoch, layer, g);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_ce_is_ln_classes() {
        let logits = vec![Tensor::zeros(&[3, 10])];
        let ce = ce_loss_value(&logits, &[0, 4, 9]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn repeated_steps_match_single_step() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.7 - 1.0);
        let one = ce_loss_value(&[a.clone()], &[1, 2]).unwrap();
        let two = ce_loss_value(&[a.clone(), a], &[1, 2]).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn confident_prediction_has_small_loss() {
        let mut t = Tensor::zeros(&[1, 3]);
        t.data_mut()[2] = 40.0;
        assert!(ce_loss_value(&[t], &[2]).unwrap() < 1e-6);
    }

    #[test]
    fn ce_rejects_bad_label() {
        assert!(ce_loss_value(&[Tensor::zeros(&[1, 3])], &[3]).is_err());
    }

    #[test]
    fn ga_identities() {
        assert_eq!(ga_loss(&[0.0; 8], 0.1, 1e-8), 0.8);
        assert_eq!(ga_loss(&[0.25], 1.0, 0.25), 0.5);
        let tiny = ga_loss(&[1.0], 1.0, 1e-8);
        assert!((tiny - 1e-8).abs() < 1e-15);
        assert_eq!(total_loss(2.3026, 0.8), 2.3026 + 0.8);
    }

    #[test]
    fn step_decay() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_epoch(0, &c), 1e-3);
        assert_eq!(lr_at_epoch(49, &c), 1e-3);
        assert!((lr_at_epoch(50, &c) / 1e-4 - 1.0).abs() < 1e-6);
        assert!((lr_at_epoch(100, &c) / 1e-5 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn early_stopping_rules() {
        let rising: Vec<f64> = (0..30).map(|i| i as f64).collect();
        for n in 1..=rising.len() {
            assert!(!early_stop_check(&rising[..n], 10));
        }
        let mut h = vec![0.1, 0.5];
        for _ in 0..9 {
            h.push(0.4);
            assert!(!early_stop_check(&h, 10));
        }
        h.push(0.5);
        assert!(early_stop_check(&h, 10));
    }

    fn scalar_param(name: &str, v: f32, g: Option<f32>) -> Param {
        Param {
            name: name.into(),
            value: Tensor::scalar(v),
            grad: g.map(Tensor::scalar),
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut ps = vec![scalar_param("a", 1.0, Some(0.3)), scalar_param("b", 1.0, Some(-5.0))];
        Adam::default().step(&mut ps, 0.01).unwrap();
        assert!((ps[0].value.item() - 0.99).abs() < 1e-6);
        assert!((ps[1].value.item() - 1.01).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_grad_is_noop_and_nan_names_layer() {
        let mut ps = vec![scalar_param("a", 2.0, Some(0.0)), scalar_param("b", 3.0, None)];
        Adam::default().step(&mut ps, 0.1).unwrap();
        assert_eq!(ps[0].value.item(), 2.0);
        assert_eq!(ps[1].value.item(), 3.0);
        let mut bad = vec![scalar_param("fire3.squeeze.weight", 0.0, Some(f32::NAN))];
        let err = Adam::default().step(&mut bad, 0.1).unwrap_err().to_string();
        assert!(err.contains("fire3.squeeze.weight"), "{err}");
    }

    #[test]
    fn grad_norms_need_backward() {
        use crate::arch::{ArchSpec, Mode};
        let spec = ArchSpec::squeezenet(2, Mode::Cnn).scale_width(0.125);
        let mut net = Network::build(&spec, 0).unwrap();
        assert!(matches!(log_grad_norms(&net), Err(SnnError::NoGradients)));
        for p in net.params_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
        assert!(log_grad_norms(&net).unwrap().iter().all(|(_, g)| *g == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            decay_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
