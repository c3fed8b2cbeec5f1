//! Declarative SqueezeNet description, the fire-module pruning schedules and
//! closed-form parameter counting.
//!
//! Fire modules are numbered 2..=9 as in the original network. A pruned
//! architecture keeps a subset of them; each retained module takes its input
//! from the nearest retained producer before it (conv1 when there is none),
//! and the 1x1 classifier takes the last producer's channels.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SnnError};
use crate::lif::LifParams;

pub const FIRE_COUNT: usize = 8;
pub const FIRST_FIRE: usize = 2;

/// Squeeze (1x1) then parallel 1x1 and 3x3 expand convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FireSpec {
    pub squeeze: usize,
    pub expand1: usize,
    pub expand3: usize,
}

impl FireSpec {
    pub const fn new(squeeze: usize, expand1: usize, expand3: usize) -> Self {
        FireSpec {
            squeeze,
            expand1,
            expand3,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.expand1 + self.expand3
    }

    pub fn params(&self, in_channels: usize) -> u64 {
        let (cin, s, e1, e3) = (
            in_channels as u64,
            self.squeeze as u64,
            self.expand1 as u64,
            self.expand3 as u64,
        );
        (cin * s + s) + (s * e1 + e1) + (9 * s * e3 + e3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Nonlinearity family of a built network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Snn,
    Cnn,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Snn => "snn",
            Mode::Cnn => "cnn",
        })
    }
}

impl FromStr for Mode {
    type Err = SnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "snn" => Ok(Mode::Snn),
            "cnn" => Ok(Mode::Cnn),
            other => Err(SnnError::InvalidArch(format!("unknown mode `{other}` (expected snn or cnn)"))),
        }
    }
}

/// Where a max-pool sits in the retained sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PoolSite {
    AfterConv1,
    /// After the k-th retained fire module (1-based).
    AfterRetained(usize),
}

/// Retained fire modules, indexed fire2..fire9.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FireMask(pub [bool; FIRE_COUNT]);

impl FireMask {
    pub const ALL: FireMask = FireMask([true; FIRE_COUNT]);

    pub fn from_fires(fires: &[usize]) -> Result<Self> {
        let mut mask = [false; FIRE_COUNT];
        for &f in fires {
            if !(FIRST_FIRE..FIRST_FIRE + FIRE_COUNT).contains(&f) {
                return Err(SnnError::InvalidArch(format!("no fire module {f} (valid: 2..=9)")));
            }
            mask[f - FIRST_FIRE] = true;
        }
        Ok(FireMask(mask))
    }

    pub fn contains(&self, fire: usize) -> bool {
        (FIRST_FIRE..FIRST_FIRE + FIRE_COUNT).contains(&fire) && self.0[fire - FIRST_FIRE]
    }

    /// Retained fire numbers in network order.
    pub fn fires(&self) -> Vec<usize> {
        (0..FIRE_COUNT).filter(|&i| self.0[i]).map(|i| i + FIRST_FIRE).collect()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

impl fmt::Display for FireMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.fires().iter().map(|n| format!("fire{n}")).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for FireMask {
    type Err = SnnError;

    fn from_str(s: &str) -> Result<Self> {
        let mut fires = Vec::new();
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let digits = item
                .strip_prefix("fire")
                .or_else(|| item.strip_prefix('F'))
                .or_else(|| item.strip_prefix('f'))
                .unwrap_or(item);
            let n: usize = digits
                .parse()
                .map_err(|_| SnnError::InvalidArch(format!("bad fire module name `{item}`")))?;
            fires.push(n);
        }
        FireMask::from_fires(&fires)
    }
}

/// The nine fire-module retention schedules of the pruning ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PruneSchedule {
    Full,
    Head1,
    Head2,
    Tail1,
    Tail2,
    Alt1,
    Alt2,
    Ref1,
    Ref2,
}

impl PruneSchedule {
    pub const ALL: [PruneSchedule; 9] = [
        PruneSchedule::Full,
        PruneSchedule::Head1,
        PruneSchedule::Head2,
        PruneSchedule::Tail1,
        PruneSchedule::Tail2,
        PruneSchedule::Alt1,
        PruneSchedule::Alt2,
        PruneSchedule::Ref1,
        PruneSchedule::Ref2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PruneSchedule::Full => "Full",
            PruneSchedule::Head1 => "Head-1",
            PruneSchedule::Head2 => "Head-2",
            PruneSchedule::Tail1 => "Tail-1",
            PruneSchedule::Tail2 => "Tail-2",
            PruneSchedule::Alt1 => "Alt-1",
            PruneSchedule::Alt2 => "Alt-2",
            PruneSchedule::Ref1 => "Ref-1",
            PruneSchedule::Ref2 => "Ref-2",
        }
    }

    pub fn retained(&self) -> &'static [usize] {
        match self {
            PruneSchedule::Full => &[2, 3, 4, 5, 6, 7, 8, 9],
            PruneSchedule::Head1 => &[2, 3, 4, 5, 9],
            PruneSchedule::Head2 => &[2, 3, 4, 5, 8],
            PruneSchedule::Tail1 => &[2, 5, 6, 7, 8, 9],
            PruneSchedule::Tail2 => &[2, 4, 6, 7, 8, 9],
            PruneSchedule::Alt1 => &[2, 4, 6, 8],
            PruneSchedule::Alt2 => &[3, 5, 7, 9],
            PruneSchedule::Ref1 => &[4, 6, 8, 9],
            PruneSchedule::Ref2 => &[2, 4, 5, 6, 8, 9],
        }
    }

    pub fn mask(&self) -> FireMask {
        FireMask::from_fires(self.retained()).expect("schedule tables hold valid fire numbers")
    }
}

impl fmt::Display for PruneSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PruneSchedule {
    type Err = SnnError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        PruneSchedule::ALL
            .into_iter()
            .find(|p| p.name().to_ascii_lowercase() == key || p.name().to_ascii_lowercase().replace('-', "") == key)
            .ok_or_else(|| SnnError::UnknownSchedule {
                name: s.to_string(),
                valid: PruneSchedule::ALL.map(|p| p.name()).join(", "),
            })
    }
}

/// Retained set for a schedule name.
pub fn schedule_mask(name: &str) -> Result<FireMask> {
    Ok(name.parse::<PruneSchedule>()?.mask())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub conv1: ConvSpec,
    /// fire2..fire9
    pub fires: [FireSpec; FIRE_COUNT],
    pub retained: FireMask,
    pub pools: Vec<PoolSite>,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub num_classes: usize,
    pub mode: Mode,
    pub time_steps: usize,
    pub lif: LifParams,
}

/// Fire widths of SqueezeNet v1.0.
pub const SQUEEZENET_V1_FIRES: [FireSpec; FIRE_COUNT] = [
    FireSpec::new(16, 64, 64),
    FireSpec::new(16, 64, 64),
    FireSpec::new(32, 128, 128),
    FireSpec::new(32, 128, 128),
    FireSpec::new(48, 192, 192),
    FireSpec::new(48, 192, 192),
    FireSpec::new(64, 256, 256),
    FireSpec::new(64, 256, 256),
];

impl ArchSpec {
    /// SqueezeNet v1.0 widths with a 3x3/stride-1 stem for 32x32 inputs.
    pub fn squeezenet(num_classes: usize, mode: Mode) -> Self {
        let mut spec = ArchSpec {
            in_channels: 3,
            conv1: ConvSpec {
                filters: 96,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            fires: SQUEEZENET_V1_FIRES,
            retained: FireMask::ALL,
            pools: Vec::new(),
            pool_kernel: 3,
            pool_stride: 2,
            num_classes,
            mode,
            time_steps: 4,
            lif: LifParams::default(),
        };
        spec.pools = default_pools(spec.retained.count());
        spec
    }

    pub fn with_schedule(mut self, schedule: PruneSchedule) -> Self {
        self.set_retained(schedule.mask());
        self
    }

    /// Replaces the retained set and re-derives the default pool placement.
    pub fn set_retained(&mut self, mask: FireMask) {
        self.retained = mask;
        self.pools = default_pools(mask.count());
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    /// Multiplies conv1 and every fire width by `factor` (rounded, at least 1).
    pub fn scale_width(mut self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        self.conv1.filters = s(self.conv1.filters);
        for f in &mut self.fires {
            *f = FireSpec::new(s(f.squeeze), s(f.expand1), s(f.expand3));
        }
        self
    }

    pub fn fire(&self, number: usize) -> &FireSpec {
        &self.fires[number - FIRST_FIRE]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SnnError::InvalidArch(m));
        if self.retained.is_empty() {
            return bad("retained set is empty".into());
        }
        if self.in_channels == 0 || self.conv1.filters == 0 || self.conv1.kernel == 0 || self.conv1.stride == 0 {
            return bad(format!("invalid conv1 {:?} / in_channels {}", self.conv1, self.in_channels));
        }
        for (i, f) in self.fires.iter().enumerate() {
            if f.squeeze == 0 || f.expand1 == 0 || f.expand3 == 0 {
                return bad(format!("fire{} has a zero width: {f:?}", i + FIRST_FIRE));
            }
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.time_steps == 0 {
            return bad("time_steps must be >= 1".into());
        }
        if self.pool_kernel == 0 || self.pool_stride == 0 {
            return bad("pool kernel and stride must be >= 1".into());
        }
        for site in &self.pools {
            if let PoolSite::AfterRetained(k) = site {
                if *k == 0 || *k > self.retained.count() {
                    return bad(format!("pool after retained module {k}, but {} are retained", self.retained.count()));
                }
            }
        }
        self.lif.validate()
    }

    /// Text block embedded in checkpoints: one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("in_channels", self.in_channels.to_string());
        let c = &self.conv1;
        line("conv1", format!("{},{},{},{}", c.filters, c.kernel, c.stride, c.padding));
        for (i, f) in self.fires.iter().enumerate() {
            line(&format!("fire{}", i + FIRST_FIRE), format!("{},{},{}", f.squeeze, f.expand1, f.expand3));
        }
        line("retained", self.retained.to_string());
        line("pools", format_pools(&self.pools));
        line("pool", format!("{},{}", self.pool_kernel, self.pool_stride));
        line("num_classes", self.num_classes.to_string());
        line("mode", self.mode.to_string());
        line("time_steps", self.time_steps.to_string());
        let l = &self.lif;
        line("lif.tau", l.tau.to_string());
        line("lif.v_th", l.v_th.to_string());
        line("lif.v_rest", l.v_rest.to_string());
        line("lif.v_reset", l.v_reset.to_string());
        line("lif.resistance", l.resistance.to_string());
        line(
            "lif.leak_factor",
            l.leak_factor.map_or_else(|| "none".to_string(), |x| x.to_string()),
        );
        line("lif.alpha", l.alpha.to_string());
        out
    }

    /// Parses [`ArchSpec::to_text`] output. Missing keys keep the v1.0
    /// defaults; `retained` without `pools` re-derives pool placement.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = ArchSpec::squeezenet(10, Mode::Snn);
        let mut pools_given = false;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SnnError::InvalidArch(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            spec.set_field(key, value)?;
            pools_given |= key == "pools";
        }
        if !pools_given {
            spec.pools = default_pools(spec.retained.count());
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Sets one field from its text form; `key` is a line key of [`ArchSpec::to_text`].
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        let err = |m: &str| SnnError::InvalidArch(format!("{key}={value}: {m}"));
        let nums = |n: usize| -> Result<Vec<usize>> {
            let v: std::result::Result<Vec<usize>, _> = value.split(',').map(|x| x.trim().parse()).collect();
            match v {
                Ok(v) if v.len() == n => Ok(v),
                _ => Err(err(&format!("expected {n} comma-separated integers"))),
            }
        };
        let float = || -> Result<f32> { value.parse().map_err(|_| err("expected a number")) };
        match key {
            "in_channels" => self.in_channels = nums(1)?[0],
            "conv1" => {
                let v = nums(4)?;
                self.conv1 = ConvSpec {
                    filters: v[0],
                    kernel: v[1],
                    stride: v[2],
                    padding: v[3],
                };
            }
            "retained" => self.retained = value.parse()?,
            "pools" => self.pools = parse_pools(value)?,
            "pool" => {
                let v = nums(2)?;
                self.pool_kernel = v[0];
                self.pool_stride = v[1];
            }
            "num_classes" => self.num_classes = nums(1)?[0],
            "mode" => self.mode = value.parse()?,
            "time_steps" => self.time_steps = nums(1)?[0],
            "lif.tau" => self.lif.tau = float()?,
            "lif.v_th" => self.lif.v_th = float()?,
            "lif.v_rest" => self.lif.v_rest = float()?,
            "lif.v_reset" => self.lif.v_reset = float()?,
            "lif.resistance" => self.lif.resistance = float()?,
            "lif.leak_factor" => {
                self.lif.leak_factor = match value {
                    "none" | "off" | "" => None,
                    _ => Some(float()?),
                }
            }
            "lif.alpha" => self.lif.alpha = float()?,
            k if k.starts_with("fire") => {
                let n: usize = k[4..].parse().map_err(|_| err("unknown fire module"))?;
                if !(FIRST_FIRE..FIRST_FIRE + FIRE_COUNT).contains(&n) {
                    return Err(err("fire modules are numbered 2..=9"));
                }
                let v = nums(3)?;
                self.fires[n - FIRST_FIRE] = FireSpec::new(v[0], v[1], v[2]);
            }
            _ => return Err(SnnError::InvalidArch(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

/// Max-pools after conv1, after the 2nd retained fire, and after the 4th
/// when at least four are retained.
pub fn default_pools(retained: usize) -> Vec<PoolSite> {
    let mut pools = vec![PoolSite::AfterConv1];
    if retained >= 2 {
        pools.push(PoolSite::AfterRetained(2));
    }
    if retained >= 4 {
        pools.push(PoolSite::AfterRetained(4));
    }
    pools
}

fn format_pools(pools: &[PoolSite]) -> String {
    pools
        .iter()
        .map(|p| match p {
            PoolSite::AfterConv1 => "conv1".to_string(),
            PoolSite::AfterRetained(k) => k.to_string(),
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_pools(value: &str) -> Result<Vec<PoolSite>> {
    let mut pools = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "conv1" {
            pools.push(PoolSite::AfterConv1);
        } else {
            let k = item
                .parse()
                .map_err(|_| SnnError::InvalidArch(format!("bad pool site `{item}`")))?;
            pools.push(PoolSite::AfterRetained(k));
        }
    }
    pools.sort();
    pools.dedup();
    Ok(pools)
}

/// Input channels of every retained module after rewiring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    pub conv1_out: usize,
    /// `(fire number, input channels, output channels)` in network order.
    pub fires: Vec<(usize, usize, usize)>,
    pub classifier_in: usize,
}

impl ChannelPlan {
    pub fn fire_input(&self, fire: usize) -> Option<usize> {
        self.fires.iter().find(|f| f.0 == fire).map(|f| f.1)
    }
}

pub fn rewire(spec: &ArchSpec) -> ChannelPlan {
    let mut channels = spec.conv1.filters;
    let mut fires = Vec::new();
    for n in spec.retained.fires() {
        let out = spec.fire(n).out_channels();
        fires.push((n, channels, out));
        channels = out;
    }
    ChannelPlan {
        conv1_out: spec.conv1.filters,
        fires,
        classifier_in: channels,
    }
}

/// Closed-form trainable parameter count, biases included.
pub fn count_params(spec: &ArchSpec) -> u64 {
    let plan = rewire(spec);
    let c = &spec.conv1;
    let conv1 = (c.filters * spec.in_channels * c.kernel * c.kernel + c.filters) as u64;
    let fires: u64 = plan.fires.iter().map(|&(n, cin, _)| spec.fire(n).params(cin)).sum();
    let classifier = (plan.classifier_in * spec.num_classes + spec.num_classes) as u64;
    conv1 + fires + classifier
}
