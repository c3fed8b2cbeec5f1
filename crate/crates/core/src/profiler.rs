//! AC/MAC operation counting and the energy model.
//!
//! Dense convolutions cost one MAC per multiply. Convolutions fed by binary
//! spikes cost one AC per (active input, covering output, output channel)
//! triple. Bias additions and pooling are not counted.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::arch::Mode;
use crate::error::{Result, SnnError};
use crate::network::{ConvLayer, ForwardProbe, Network};
use crate::tensor::{receptive_field_activity, ConvGeometry, Tensor};

pub const AC_PJ: f64 = 0.9;
pub const MAC_PJ: f64 = 4.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub ac: u64,
    pub mac: u64,
    pub params: u64,
}

impl Add for OpCounts {
    type Output = OpCounts;

    fn add(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            ac: self.ac + rhs.ac,
            mac: self.mac + rhs.mac,
            params: self.params + rhs.params,
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: OpCounts) {
        *self = *self + rhs;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub energy_pj: f64,
    pub energy_mj: f64,
    pub eta: Option<f64>,
    pub firing_rate: Option<f64>,
}

pub fn count_mac_conv(g: &ConvGeometry) -> u64 {
    (g.batch * g.out_h() * g.out_w() * g.out_channels * g.patch_len()) as u64
}

/// Accumulates triggered by a binary input. Rejects non-binary input.
pub fn count_ac_conv(g: &ConvGeometry, spikes: &[f32]) -> Result<u64> {
    if spikes.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(SnnError::invalid("count_ac_conv", "input is not binary"));
    }
    Ok(receptive_field_activity(g, spikes) * g.out_channels as u64)
}

pub fn energy_pj(ac: u64, mac: u64) -> f64 {
    ac as f64 * AC_PJ + mac as f64 * MAC_PJ
}

pub fn energy(counts: &OpCounts) -> EnergyReport {
    let pj = energy_pj(counts.ac, counts.mac);
    EnergyReport {
        energy_pj: pj,
        energy_mj: pj * 1e-9,
        eta: None,
        firing_rate: None,
    }
}

/// How many times more energy the CNN spends than the SNN.
pub fn eta_energy(e_cnn: f64, e_snn: f64) -> Result<f64> {
    if !(e_snn > 0.0) {
        return Err(SnnError::invalid("eta_energy", format!("SNN energy must be > 0, got {e_snn}")));
    }
    Ok(e_cnn / e_snn)
}

/// Total spikes divided by total neuron-steps over a spike record.
pub fn firing_rate(record: &[Tensor]) -> f64 {
    let neurons: usize = record.iter().map(Tensor::numel).sum();
    if neurons == 0 {
        return 0.0;
    }
    let spikes: f64 = record.iter().flat_map(|t| t.data()).map(|&x| x as f64).sum();
    spikes / neurons as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProfileFlags {
    /// One MAC per LIF neuron per step for the membrane update.
    pub membrane_macs: bool,
    /// Count the analog first layer at every time step instead of once.
    pub first_layer_per_step: bool,
}

impl Default for ProfileFlags {
    fn default() -> Self {
        ProfileFlags {
            membrane_macs: true,
            first_layer_per_step: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProfile {
    pub name: String,
    pub kind: String,
    pub ac: u64,
    pub mac: u64,
    pub params: u64,
    pub firing_rate: Option<f64>,
}

#[derive(Clone, Debug, Default)]
struct LayerTally {
    name: String,
    kind: String,
    params: u64,
    ac: u64,
    mac: u64,
    spikes: f64,
    neuron_steps: u64,
}

/// Probe accumulating counts for one profiling session.
pub struct Profiler {
    mode: Mode,
    flags: ProfileFlags,
    time_steps: u64,
    batch: u64,
    layers: Vec<LayerTally>,
}

impl Profiler {
    pub fn new(network: &Network, flags: ProfileFlags) -> Self {
        let layers = network
            .convs()
            .iter()
            .map(|c| LayerTally {
                name: c.name.clone(),
                kind: c.kind(),
                params: c.param_count(),
                ..Default::default()
            })
            .collect();
        Profiler {
            mode: network.spec().mode,
            flags,
            time_steps: network.spec().time_steps as u64,
            batch: 0,
            layers,
        }
    }

    fn tally(&mut self, name: &str) -> &mut LayerTally {
        self.layers
            .iter_mut()
            .find(|l| l.name == name)
            .expect("probe reported a layer the network does not have")
    }

    fn per_image(&self, total: u64) -> u64 {
        if self.batch == 0 {
            0
        } else {
            (total as f64 / self.batch as f64).round() as u64
        }
    }

    pub fn layers(&self) -> Vec<LayerProfile> {
        self.layers
            .iter()
            .map(|l| LayerProfile {
                name: l.name.clone(),
                kind: l.kind.clone(),
                ac: self.per_image(l.ac),
                mac: self.per_image(l.mac),
                params: l.params,
                firing_rate: (l.neuron_steps > 0).then(|| l.spikes / l.neuron_steps as f64),
            })
            .collect()
    }

    /// Whole-network counts per image.
    pub fn counts(&self) -> OpCounts {
        OpCounts {
            ac: self.per_image(self.layers.iter().map(|l| l.ac).sum()),
            mac: self.per_image(self.layers.iter().map(|l| l.mac).sum()),
            params: self.layers.iter().map(|l| l.params).sum(),
        }
    }

    /// Mean spikes per LIF neuron per step; `None` in CNN mode.
    pub fn firing_rate(&self) -> Option<f64> {
        if self.mode == Mode::Cnn {
            return None;
        }
        let steps: u64 = self.layers.iter().map(|l| l.neuron_steps).sum();
        let spikes: f64 = self.layers.iter().map(|l| l.spikes).sum();
        Some(if steps == 0 { 0.0 } else { spikes / steps as f64 })
    }

    pub fn report(&self) -> EnergyReport {
        EnergyReport {
            firing_rate: self.firing_rate(),
            ..energy(&self.counts())
        }
    }

    /// Per-layer table with header `layer_name,type,ac,mac,params,firing_rate`.
    pub fn layers_csv(&self) -> String {
        let mut out = String::from("layer_name,type,ac,mac,params,firing_rate\n");
        for l in self.layers() {
            let rate = l.firing_rate.map(|r| format!("{r:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{}", l.name, l.kind, l.ac, l.mac, l.params, rate);
        }
        out
    }
}

impl ForwardProbe for Profiler {
    fn conv(&mut self, layer: &ConvLayer, input: &Tensor, analog: bool) -> Result<()> {
        let g = layer.geometry(input.shape())?;
        if layer.name == "conv1" {
            self.batch += g.batch as u64;
        }
        let (mode, flags, steps) = (self.mode, self.flags, self.time_steps);
        let tally = self.tally(&layer.name);
        match mode {
            Mode::Cnn => tally.mac += count_mac_conv(&g),
            Mode::Snn if analog => {
                let repeat = if flags.first_layer_per_step { steps } else { 1 };
                tally.mac += count_mac_conv(&g) * repeat;
            }
            Mode::Snn => {
                tally.ac += count_ac_conv(&g, input.data()).map_err(|_| {
                    SnnError::invalid("profile", format!("layer `{}` received non-binary input", layer.name))
                })?
            }
        }
        Ok(())
    }

    fn activation(&mut self, layer: &ConvLayer, output: &Tensor) {
        if self.mode == Mode::Cnn {
            return;
        }
        let membrane = self.flags.membrane_macs;
        let tally = self.tally(&layer.name);
        tally.spikes += output.data().iter().map(|&x| x as f64).sum::<f64>();
        tally.neuron_steps += output.numel() as u64;
        if membrane {
            tally.mac += output.numel() as u64;
        }
    }
}

/// Runs one inference pass over `images` and returns the profiler holding
/// per-image counts.
pub fn profile_forward(network: &Network, images: &Tensor, flags: ProfileFlags) -> Result<Profiler> {
    let mut profiler = Profiler::new(network, flags);
    network.logits(images, &mut profiler)?;
    Ok(profiler)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchSpec, PruneSchedule};

    fn geometry(cin: usize, cout: usize, k: usize, hw: usize, stride: usize, pad: usize) -> ConvGeometry {
        ConvGeometry::new(&[1, cin, hw, hw], &[cout, cin, k, k], stride, pad).unwrap()
    }

    #[test]
    fn mac_closed_form() {
        assert_eq!(count_mac_conv(&geometry(3, 96, 3, 32, 1, 1)), 2_654_208);
        assert_eq!(count_mac_conv(&geometry(1, 1, 1, 1, 1, 0)), 1);
    }

    #[test]
    fn single_spike_fanout() {
        let g = geometry(2, 4, 1, 3, 1, 0);
        let mut x = vec![0.0; 18];
        assert_eq!(count_ac_conv(&g, &x).unwrap(), 0);
        x[4] = 1.0;
        assert_eq!(count_ac_conv(&g, &x).unwrap(), 4);
        x[5] = 0.5;
        assert!(count_ac_conv(&g, &x).is_err());
    }

    #[test]
    fn energy_constants() {
        assert_eq!(energy(&OpCounts { ac: 1, mac: 0, params: 0 }).energy_pj, 0.9);
        assert_eq!(energy(&OpCounts { ac: 0, mac: 1, params: 0 }).energy_pj, 4.6);
        assert_eq!(energy(&OpCounts::default()).energy_mj, 0.0);
    }

    #[test]
    fn eta_rejects_zero() {
        assert!(eta_energy(1.0, 0.0).is_err());
        assert_eq!(eta_energy(0.3, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn firing_rate_extremes() {
        assert_eq!(firing_rate(&[Tensor::zeros(&[2, 3])]), 0.0);
        assert_eq!(firing_rate(&[Tensor::ones(&[2, 3]), Tensor::ones(&[5])]), 1.0);
    }

    fn tiny(mode: Mode) -> Network {
        let spec = ArchSpec::squeezenet(4, mode)
            .with_schedule(PruneSchedule::Ref1)
            .scale_width(0.125);
        Network::build(&spec, 5).unwrap()
    }

    #[test]
    fn cnn_has_no_accumulates() {
        let net = tiny(Mode::Cnn);
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| (i as f32 * 0.13).sin());
        let p = profile_forward(&net, &x, ProfileFlags::default()).unwrap();
        let c = p.counts();
        assert_eq!(c.ac, 0);
        assert_eq!(p.report().energy_pj, c.mac as f64 * 4.6);
        assert_eq!(c.params, net.param_count());
        assert!(p.firing_rate().is_none());
    }

    #[test]
    fn silent_snn_costs_first_layer_only() {
        let net = tiny(Mode::Snn);
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let first = {
            let c = &net.convs()[0];
            count_mac_conv(&c.geometry(&[1, 3, 16, 16]).unwrap())
        };
        let bare = profile_forward(
            &net,
            &x,
            ProfileFlags {
                membrane_macs: false,
                first_layer_per_step: false,
            },
        )
        .unwrap();
        assert_eq!(bare.counts().ac, 0);
        assert_eq!(bare.counts().mac, first);
        assert_eq!(bare.firing_rate(), Some(0.0));
    }

    #[test]
    fn layers_csv_shape() {
        let net = tiny(Mode::Snn);
        let p = profile_forward(&net, &Tensor::full(&[1, 3, 16, 16], 0.7), ProfileFlags::default()).unwrap();
        let csv = p.layers_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "layer_name,type,ac,mac,params,firing_rate");
        assert_eq!(lines.len(), 1 + net.convs().len());
        assert!(lines.last().unwrap().starts_with("classifier,conv1x1,"));
    }
}
