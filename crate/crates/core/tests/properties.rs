//! Property tests and independent oracles across the core library.

use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnbench::arch::{count_params, ArchSpec, Mode, PruneSchedule};
use snnbench::data::{
    denormalize, load_cifar_bin, load_tinyimagenet, normalize, resize_bilinear, synth_blobs, Dataset, Split,
};
use snnbench::metrics::evaluate;
use snnbench::network::{ConvLayer, FiringMonitor, ForwardProbe, NoProbe};
use snnbench::profiler::{energy, energy_pj, firing_rate, OpCounts, ProfileFlags, Profiler};
use snnbench::tensor::{conv2d_forward, ConvGeometry};
use snnbench::train::{ce_loss_over_time, ga_loss_exact, train, train_step, Adam, GaMode, StopReason, TrainConfig};
use snnbench::{Network, Result, Tape, Tensor, Var};

fn reference_conv(g: &ConvGeometry, input: &[f32], weight: &[f32]) -> Vec<f64> {
    let (h, w, k) = (g.in_h as isize, g.in_w as isize, g.kernel_h);
    let mut out = Vec::new();
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            for oy in 0..g.out_h() {
                for ox in 0..g.out_w() {
                    let mut acc = 0.0f64;
                    for ci in 0..g.in_channels {
                        for ky in 0..k {
                            for kx in 0..g.kernel_w {
                                let y = (oy * g.stride + ky) as isize - g.padding as isize;
                                let x = (ox * g.stride + kx) as isize - g.padding as isize;
                                if y < 0 || x < 0 || y >= h || x >= w {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + ci) as isize * h + y) * w + x;
                                let wi = ((co * g.in_channels + ci) * k + ky) * g.kernel_w + kx;
                                acc += input[xi as usize] as f64 * weight[wi] as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn conv_matches_nested_loops(
        batch in 1usize..3, cin in 1usize..4, cout in 1usize..4, hw in 3usize..8,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = ConvGeometry::new(&[batch, cin, hw, hw], &[cout, cin, k, k], stride, pad).unwrap();
        let input: Vec<f32> = (0..batch * cin * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weight: Vec<f32> = (0..cout * cin * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = conv2d_forward(&g, &input, &weight);
        let slow = reference_conv(&g, &input, &weight);
        prop_assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((*a as f64 - b).abs() <= 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn maxpool_matches_window_maximum(c in 1usize..3, hw in 3usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[1, c, hw, hw], |_| rng.random_range(-5.0..5.0));
        let tape = Tape::new();
        let y = tape.constant(x.clone()).maxpool2d(3, 2).unwrap();
        let oh = (hw - 3) / 2 + 1;
        prop_assert_eq!(y.shape(), &[1, c, oh, oh][..]);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..oh {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            m = m.max(x.data()[(ch * hw + oy * 2 + ky) * hw + ox * 2 + kx]);
                        }
                    }
                    prop_assert_eq!(y.value().data()[(ch * oh + oy) * oh + ox], m);
                }
            }
        }
    }

    #[test]
    fn energy_is_linear(a1 in 0u64..1 << 40, m1 in 0u64..1 << 40, a2 in 0u64..1 << 40, m2 in 0u64..1 << 40) {
        let sum = energy_pj(a1 + a2, m1 + m2);
        let parts = energy_pj(a1, m1) + energy_pj(a2, m2);
        prop_assert!((sum - parts).abs() <= 1e-12 * sum.max(1.0));
        let both = energy(&(OpCounts { ac: a1, mac: m1, params: 0 } + OpCounts { ac: a2, mac: m2, params: 0 }));
        prop_assert!((both.energy_mj - sum * 1e-9).abs() <= 1e-12 * both.energy_mj.max(1e-30));
    }

    #[test]
    fn firing_rate_counts_spikes(layers in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..40), 1..6)) {
        let record: Vec<Tensor> = layers
            .iter()
            .map(|l| Tensor::new(vec![l.len()], l.iter().map(|&s| s as u8 as f32).collect()).unwrap())
            .collect();
        let spikes: usize = layers.iter().map(|l| l.iter().filter(|&&s| s).count()).sum();
        let neurons: usize = layers.iter().map(Vec::len).sum();
        let rate = firing_rate(&record);
        prop_assert!((0.0..=1.0).contains(&rate));
        prop_assert!((rate - spikes as f64 / neurons as f64).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_brute_force(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80)) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let r = evaluate(&preds, &labels, 5).unwrap();
        let hits = pairs.iter().filter(|(p, t)| p == t).count();
        prop_assert_eq!(r.accuracy, hits as f64 / pairs.len() as f64);
        let mut f1_sum = 0.0;
        for k in 0..5 {
            let tp = pairs.iter().filter(|&&(p, t)| p == k && t == k).count() as f64;
            let fp = pairs.iter().filter(|&&(p, t)| p == k && t != k).count() as f64;
            let fn_ = pairs.iter().filter(|&&(p, t)| p != k && t == k).count() as f64;
            // F1 = 2TP / (2TP + FP + FN), zero when the class never occurs
            let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
            prop_assert!((r.per_class[k].f1 - f1).abs() < 1e-12);
            f1_sum += f1;
            for j in 0..5 {
                let n = pairs.iter().filter(|&&(p, t)| t == k && p == j).count() as u64;
                prop_assert_eq!(r.confusion[k][j], n);
            }
        }
        prop_assert!((r.macro_f1 - f1_sum / 5.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(0.0..1.0));
        let back = denormalize(&normalize(&x).unwrap()).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn pruning_never_adds_parameters(mask in prop::collection::vec(any::<bool>(), 8), drop in 0usize..8) {
        let fires: Vec<usize> = (0..8).filter(|&i| mask[i]).map(|i| i + 2).collect();
        prop_assume!(fires.len() >= 2 && mask[drop]);
        let mut spec = ArchSpec::squeezenet(10, Mode::Snn);
        spec.set_retained(snnbench::FireMask::from_fires(&fires).unwrap());
        let before = count_params(&spec);
        let fewer: Vec<usize> = fires.iter().copied().filter(|&f| f != drop + 2).collect();
        spec.set_retained(snnbench::FireMask::from_fires(&fewer).unwrap());
        prop_assert!(count_params(&spec) <= before);
    }
}

#[test]
fn networks_accept_full_size_images() {
    let images = Tensor::full(&[2, 3, 32, 32], 0.5);
    for schedule in PruneSchedule::ALL {
        let snn = ArchSpec::squeezenet(10, Mode::Snn).with_schedule(schedule).scale_width(0.25);
        let cnn = snn.clone().with_mode(Mode::Cnn);
        assert_eq!(count_params(&snn), count_params(&cnn), "{}", schedule.name());
        for spec in [snn, cnn] {
            let net = Network::build(&spec, 1).unwrap();
            let logits = net.logits(&images, &mut NoProbe).unwrap();
            assert_eq!(logits.shape(), &[2, 10], "{} {:?}", schedule.name(), spec.mode);
        }
    }
}

#[test]
fn full_width_parameter_counts_agree_across_modes() {
    for schedule in PruneSchedule::ALL {
        let snn = ArchSpec::squeezenet(100, Mode::Snn).with_schedule(schedule);
        let a = Network::build(&snn, 3).unwrap().param_count();
        let b = Network::build(&snn.clone().with_mode(Mode::Cnn), 3).unwrap().param_count();
        assert_eq!(a, b);
        assert_eq!(a, count_params(&snn));
    }
}

/// Records the probe events of one forward pass.
#[derive(Default)]
struct Recorder {
    convs: Vec<(String, Tensor, bool)>,
    activations: Vec<(String, Tensor)>,
}

impl ForwardProbe for Recorder {
    fn conv(&mut self, layer: &ConvLayer, input: &Tensor, analog: bool) -> Result<()> {
        self.convs.push((layer.name.clone(), input.clone(), analog));
        Ok(())
    }

    fn activation(&mut self, layer: &ConvLayer, output: &Tensor) {
        self.activations.push((layer.name.clone(), output.clone()));
    }
}

fn replay(net: &Network, events: &Recorder, repeats: usize, flags: ProfileFlags) -> Profiler {
    let layer = |name: &str| net.convs().iter().find(|c| c.name == name).unwrap();
    let mut profiler = Profiler::new(net, flags);
    for (name, input, analog) in events.convs.iter().filter(|e| e.2) {
        profiler.conv(layer(name), input, *analog).unwrap();
    }
    for _ in 0..repeats {
        for (name, input, analog) in events.convs.iter().filter(|e| !e.2) {
            profiler.conv(layer(name), input, *analog).unwrap();
        }
        for (name, output) in &events.activations {
            profiler.activation(layer(name), output);
        }
    }
    profiler
}

#[test]
fn doubling_steps_doubles_accumulates_only() {
    let mut spec = ArchSpec::squeezenet(10, Mode::Snn)
        .with_schedule(PruneSchedule::Alt2)
        .scale_width(0.25);
    spec.time_steps = 4;
    let net = Network::build(&spec, 5).unwrap();
    let data = synth_blobs(5, 10, 1, 32).unwrap();
    let mut events = Recorder::default();
    net.logits(&data.images, &mut events).unwrap();
    assert_eq!(events.convs.iter().filter(|e| e.2).count(), 1);

    let flags = ProfileFlags {
        membrane_macs: false,
        first_layer_per_step: false,
    };
    // replaying the recorded steps twice doubles T with the same firing pattern
    let short = replay(&net, &events, 1, flags);
    let long = replay(&net, &events, 2, flags);
    assert!(short.counts().ac > 0);
    assert_eq!(long.counts().ac, 2 * short.counts().ac);
    assert_eq!(long.counts().mac, short.counts().mac);
    let conv1 = |p: &Profiler| p.layers().into_iter().find(|l| l.name == "conv1").unwrap().mac;
    assert_eq!(conv1(&long), conv1(&short));
    assert_eq!(short.firing_rate(), long.firing_rate());
}

#[test]
fn snn_and_cnn_energy_are_both_reported() {
    let spec = ArchSpec::squeezenet(10, Mode::Snn).scale_width(0.25);
    let images = synth_blobs(2, 10, 1, 32).unwrap().images;
    let snn = snnbench::profiler::profile_forward(&Network::build(&spec, 1).unwrap(), &images, ProfileFlags::default()).unwrap();
    let cnn = snnbench::profiler::profile_forward(
        &Network::build(&spec.clone().with_mode(Mode::Cnn), 1).unwrap(),
        &images,
        ProfileFlags::default(),
    )
    .unwrap();
    assert_eq!(cnn.counts().ac, 0);
    assert!(cnn.firing_rate().is_none());
    assert!(snn.firing_rate().is_some());
    assert_eq!(snn.counts().params, cnn.counts().params);
    let (e_snn, e_cnn) = (snn.report().energy_pj, cnn.report().energy_pj);
    assert!(e_snn > 0.0 && e_cnn > 0.0);
    let eta = snnbench::profiler::eta_energy(e_cnn, e_snn).unwrap();
    assert!((eta - e_cnn / e_snn).abs() < 1e-12);
}

/// Two smooth spiking layers over two steps; returns `(ce, ga, total)`
/// values and, when asked, the gradient of the total for both weights.
fn exact_objective(x: &Tensor, w: &[Tensor; 2], lambda: f32, eps: f32, want_grad: bool) -> (f64, Option<Vec<Tensor>>) {
    let tape = Tape::new();
    let w1 = tape.leaf(w[0].clone());
    let w2 = tape.leaf(w[1].clone());
    let input = tape.constant(x.clone());
    let current = input.conv2d(&w1, 1, 1).unwrap();
    let mut v = tape.constant(Tensor::zeros(current.shape()));
    let mut logits = Vec::new();
    for _ in 0..2 {
        v = v.lif_charge(&current, 2.0, 0.0, 1.0);
        let s = v.spike(1.0, 2.0, true);
        v = v.lif_reset(&s, 0.0);
        logits.push(s.conv2d(&w2, 1, 0).unwrap().global_avgpool().unwrap());
    }
    let ce = ce_loss_over_time(&logits, &[0, 2]).unwrap();
    let (ga, _) = ga_loss_exact(&ce, &[&w1, &w2], lambda, eps).unwrap();
    let total = ce.add(&ga);
    let value = total.value().item() as f64;
    let grads = want_grad.then(|| {
        let g = tape.backward(&total).unwrap();
        vec![g.of(&w1), g.of(&w2)]
    });
    (value, grads)
}

#[test]
fn exact_auxiliary_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.random_range(0.0..2.0));
    let w = [
        Tensor::from_fn(&[3, 2, 3, 3], |_| rng.random_range(-0.4..0.4)),
        Tensor::from_fn(&[3, 3, 1, 1], |_| rng.random_range(-1.0..1.0)),
    ];
    let (lambda, eps) = (1.0, 0.5);
    let (_, grads) = exact_objective(&x, &w, lambda, eps, true);
    let grads = grads.unwrap();
    let h = 1e-2f32;
    for k in 0..2 {
        let mut diff = 0.0f64;
        let mut norm = 0.0f64;
        for j in 0..w[k].numel() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[k].data_mut()[j] += h;
            minus[k].data_mut()[j] -= h;
            let step = plus[k].data()[j] as f64 - minus[k].data()[j] as f64;
            let numeric = (exact_objective(&x, &plus, lambda, eps, false).0
                - exact_objective(&x, &minus, lambda, eps, false).0)
                / step;
            let analytic = grads[k].data()[j] as f64;
            diff += (analytic - numeric).powi(2);
            norm += analytic.powi(2);
        }
        let rel = diff.sqrt() / norm.sqrt().max(1e-12);
        assert!(rel < 5e-3, "weight {k}: relative error {rel:.2e}");
    }
}

fn tiny_setup(mode: GaMode, lambda: f32) -> (Network, Tensor, Vec<usize>, TrainConfig) {
    let data = synth_blobs(8, 4, 3, 16).unwrap();
    let spec = ArchSpec::squeezenet(4, Mode::Snn)
        .with_schedule(PruneSchedule::Alt2)
        .scale_width(0.125);
    let cfg = TrainConfig {
        ga_mode: mode,
        lambda,
        epsilon: 0.5,
        ..TrainConfig::default()
    };
    (Network::build(&spec, 4).unwrap(), data.images, data.labels, cfg)
}

#[test]
fn monitored_auxiliary_loss_leaves_updates_unchanged() {
    let run = |lambda: f32| {
        let (mut net, images, labels, cfg) = tiny_setup(GaMode::Monitor, lambda);
        let mut adam = Adam::default();
        let (loss, _) = train_step(&mut net, &images, &labels, &cfg, &mut adam, 1e-2, &mut FiringMonitor::default()).unwrap();
        let values: Vec<Vec<u32>> = net.params().iter().map(|p| p.value.data().iter().map(|x| x.to_bits()).collect()).collect();
        (loss, values)
    };
    let (silent, a) = run(0.0);
    let (logged, b) = run(0.5);
    assert_eq!(silent.total, silent.ce);
    assert_eq!(silent.ga, 0.0);
    assert!(logged.ga > 0.0);
    assert_eq!(logged.ce, silent.ce);
    assert_eq!(a, b);
}

#[test]
fn exact_auxiliary_loss_changes_updates() {
    let (mut exact, images, labels, cfg) = tiny_setup(GaMode::Exact, 0.5);
    let (loss, _) = train_step(&mut exact, &images, &labels, &cfg, &mut Adam::default(), 1e-2, &mut FiringMonitor::default()).unwrap();
    assert!(loss.ga > 0.0 && loss.total.is_finite());
    assert_eq!(loss.per_layer_grad_norms.len(), exact.convs().len());
    let (mut monitor, _, _, cfg) = tiny_setup(GaMode::Monitor, 0.5);
    train_step(&mut monitor, &images, &labels, &cfg, &mut Adam::default(), 1e-2, &mut FiringMonitor::default()).unwrap();
    assert!(exact.params().iter().zip(monitor.params()).any(|(a, b)| a.value != b.value));
}

#[test]
fn plateau_triggers_early_stop() {
    let data = synth_blobs(9, 4, 6, 16).unwrap();
    let (train_set, val_set) = snnbench::data::train_val_split(&data, 0.25, 9).unwrap();
    let spec = ArchSpec::squeezenet(4, Mode::Snn)
        .with_schedule(PruneSchedule::Alt2)
        .scale_width(0.125);
    let mut net = Network::build(&spec, 9).unwrap();
    let cfg = TrainConfig {
        lr: 1e-12,
        patience: 2,
        max_epochs: 30,
        ..TrainConfig::default()
    };
    let out = train(&mut net, &train_set, &val_set, &cfg, &mut |_| {}).unwrap();
    assert_eq!(out.stop, StopReason::EarlyStop);
    assert_eq!(out.history.len(), 3);
}

#[test]
fn blobs_are_separable_by_nearest_centroid() {
    let data = synth_blobs(42, 4, 200, 16).unwrap();
    let (train_set, test_set) = snnbench::data::train_val_split(&data, 0.3, 1).unwrap();
    let dim = 3 * 16 * 16;
    let mut centroids = vec![vec![0.0f64; dim]; 4];
    let mut counts = [0usize; 4];
    for (i, &l) in train_set.labels.iter().enumerate() {
        counts[l] += 1;
        for (c, &x) in centroids[l].iter_mut().zip(&train_set.images.data()[i * dim..(i + 1) * dim]) {
            *c += x as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|x| *x /= n as f64);
    }
    let hits = test_set
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let img = &test_set.images.data()[i * dim..(i + 1) * dim];
            let dist = |c: &Vec<f64>| c.iter().zip(img).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..4).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == l
        })
        .count();
    let acc = hits as f64 / test_set.len() as f64;
    assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
}

#[test]
fn cifar_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (label, shade) in [(3u8, 10u8), (7, 200)] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| if i < 1024 { shade } else { (i % 256) as u8 }));
    }
    let path = dir.path().join("data_batch_1.bin");
    fs::write(&path, &bytes).unwrap();
    let ds = load_cifar_bin(&path, 10, Split::Train).unwrap();
    assert_eq!(ds.labels, vec![3, 7]);
    assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
    assert_eq!(ds.images.data()[0], 10.0 / 255.0);
    assert_eq!(ds.images.data()[3072], 200.0 / 255.0);

    let saved = dir.path().join("cache.snnw");
    ds.save(&saved).unwrap();
    let again = Dataset::load(&saved).unwrap();
    assert_eq!(again.images, ds.images);
    assert_eq!(again.labels, ds.labels);

    fs::write(&path, &bytes[..3000]).unwrap();
    assert!(load_cifar_bin(&path, 10, Split::Train).is_err());
    assert!(load_cifar_bin(&dir.path().join("absent.bin"), 10, Split::Test).is_err());
}

/// Bilinear sampling written as a separable tent filter over every source
/// pixel, in f64.
fn tent_resample(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, inp: usize, out: usize| {
        ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, inp as f64 - 1.0)
    };
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let py = coord(oy, h, oh);
        for ox in 0..ow {
            let px = coord(ox, w, ow);
            let mut acc = 0.0;
            for y in 0..h {
                let wy = tent(py - y as f64);
                if wy == 0.0 {
                    continue;
                }
                for x in 0..w {
                    acc += wy * tent(px - x as f64) * src[y * w + x] as f64;
                }
            }
            out.push(acc);
        }
    }
    out
}

#[test]
fn bilinear_matches_tent_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (h, w) in [(64, 64), (50, 37), (20, 90), (32, 32)] {
        let src: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let fast = resize_bilinear(&src, 1, h, w, 32, 32);
        let slow = tent_resample(&src, h, w, 32, 32);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((*a as f64 - b).abs() < 1e-6, "{h}x{w}: {a} vs {b}");
        }
    }
}

fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y))).save(path).unwrap();
}

#[test]
fn tinyimagenet_directory_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("wnids.txt"), "n02\nn01\n").unwrap();
    write_png(&root.join("train/n01/images/a.png"), 64, 64, |_, _| [255, 0, 51]);
    write_png(&root.join("train/n01/images/b.png"), 64, 64, |x, y| if (x + y) % 2 == 0 { [255; 3] } else { [0; 3] });
    let gradient = |x: u32, y: u32| [(x * 5) as u8, (y * 3) as u8, ((x * y) % 256) as u8];
    write_png(&root.join("train/n02/images/c.png"), 50, 37, gradient);
    write_png(&root.join("val/images/v.png"), 64, 64, |_, _| [0, 128, 0]);
    fs::write(root.join("val/val_annotations.txt"), "v.png\tn02\t0\t0\t63\t63\n").unwrap();

    let train_set = load_tinyimagenet(root, Split::Train).unwrap();
    assert_eq!(train_set.class_count, 2);
    assert_eq!(train_set.labels, vec![0, 0, 1]);
    let plane = 32 * 32;
    let img = |k: usize| &train_set.images.data()[k * 3 * plane..(k + 1) * 3 * plane];
    for (c, want) in [1.0f32, 0.0, 0.2].iter().enumerate() {
        assert!(img(0)[c * plane..(c + 1) * plane].iter().all(|&x| (x - want).abs() < 1e-6));
    }
    assert!(img(1).iter().all(|&x| (x - 0.5).abs() < 1e-6));
    let raw: Vec<f32> = (0..37)
        .flat_map(|y| (0..50).map(move |x| gradient(x, y)[2] as f32 / 255.0))
        .collect();
    let reference = tent_resample(&raw, 37, 50, 32, 32);
    for (a, b) in img(2)[2 * plane..].iter().zip(&reference) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }

    let val = load_tinyimagenet(root, Split::Val).unwrap();
    assert_eq!(val.labels, vec![1]);
    assert!((val.images.data()[plane] - 128.0 / 255.0).abs() < 1e-6);
    assert!(load_tinyimagenet(root, Split::Test).is_err());

    fs::write(root.join("val/val_annotations.txt"), "v.png\tn99\t0\t0\t63\t63\n").unwrap();
    let err = load_tinyimagenet(root, Split::Val).unwrap_err().to_string();
    assert!(err.contains("n99"), "{err}");
    fs::remove_file(root.join("val/val_annotations.txt")).unwrap();
    assert!(load_tinyimagenet(root, Split::Val).is_err());
}

#[test]
fn tape_replay_of_network_is_deterministic() {
    let (net, images, labels, _) = tiny_setup(GaMode::Monitor, 0.0);
    let run = || {
        let tape = Tape::new();
        let params = net.bind(&tape);
        let x = tape.constant(images.clone());
        let logits = net.forward(&params, &x, false, &mut NoProbe).unwrap();
        let loss = ce_loss_over_time(&logits, &labels).unwrap();
        let grads = tape.backward(&loss).unwrap();
        params.iter().map(|p: &Var| grads.of(p)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
