//! `key=value` run configuration with dotted sections and `#` comments.
//!
//! Every key has a default, so the effective configuration is always the
//! full key set. [`Config::to_text`] writes it back in a form that parses to
//! the same configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::arch::{ArchSpec, FireMask, Mode, PruneSchedule};
use crate::error::{Result, SnnError};
use crate::profiler::ProfileFlags;
use crate::train::{GaMode, TrainConfig};

const DEFAULTS: &[(&str, &str)] = &[
    ("ablate.train", "false"),
    ("arch.conv1", "96,3,1,1"),
    ("arch.in_channels", "3"),
    ("arch.mode", "snn"),
    ("arch.num_classes", "auto"),
    ("arch.retained", "schedule"),
    ("arch.schedule", "Full"),
    ("arch.time_steps", "4"),
    ("arch.width", "1"),
    ("data.eval_path", ""),
    ("data.kind", "synth"),
    ("data.limit", "0"),
    ("data.normalize", "true"),
    ("data.path", ""),
    ("data.synth_classes", "4"),
    ("data.synth_per_class", "200"),
    ("data.synth_seed", "42"),
    ("data.synth_size", "16"),
    ("lif.alpha", "2"),
    ("lif.leak_factor", "none"),
    ("lif.resistance", "1"),
    ("lif.tau", "2"),
    ("lif.v_reset", "0"),
    ("lif.v_rest", "0"),
    ("lif.v_th", "1"),
    ("profile.checkpoint", ""),
    ("profile.cnn_checkpoint", ""),
    ("profile.first_layer_per_step", "false"),
    ("profile.images", "16"),
    ("profile.membrane_macs", "true"),
    ("report.rows", ""),
    ("train.batch_size", "12"),
    ("train.decay_epochs", "50,100"),
    ("train.decay_factor", "0.1"),
    ("train.epsilon", "1e-8"),
    ("train.ga_mode", "monitor"),
    ("train.lambda", "0.1"),
    ("train.lr", "0.001"),
    ("train.max_epochs", "120"),
    ("train.patience", "10"),
    ("train.seed", "42"),
    ("train.target_train_acc", "none"),
    ("train.val_fraction", "0.1"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Synth,
    Cifar10,
    Cifar100,
    TinyImageNet,
}

impl DataKind {
    pub fn name(&self) -> &'static str {
        match self {
            DataKind::Synth => "synth",
            DataKind::Cifar10 => "cifar10",
            DataKind::Cifar100 => "cifar100",
            DataKind::TinyImageNet => "tinyimagenet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: String,
    pub eval_path: String,
    /// Keep only the first `limit` images of each loaded split (0 keeps all).
    pub limit: usize,
    pub normalize: bool,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_size: usize,
    pub synth_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileConfig {
    pub flags: ProfileFlags,
    pub images: usize,
    pub checkpoint: String,
    pub cnn_checkpoint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> SnnError {
    SnnError::Config(format!("{key}={value}: expected {expected}"))
}

fn split_line(line: &str) -> Result<Option<(&str, &str)>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    match line.split_once('=') {
        Some((k, v)) => Ok(Some((k.trim(), v.trim()))),
        None => Err(SnnError::Config(format!("expected key=value, got `{line}`"))),
    }
}

impl Config {
    /// Parses `text` over the defaults. All unknown keys are reported at once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut unknown = Vec::new();
        for line in text.lines() {
            let Some((k, v)) = split_line(line)? else { continue };
            if cfg.values.contains_key(k) {
                cfg.values.insert(k.to_string(), v.to_string());
            } else {
                unknown.push(k.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(SnnError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SnnError::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Applies `key=value` overrides; they win over file values.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut unknown = Vec::new();
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| SnnError::Config(format!("override `{o}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            match self.values.get_mut(k) {
                Some(slot) => *slot = v.to_string(),
                None => unknown.push(k.to_string()),
            }
        }
        if !unknown.is_empty() {
            return Err(SnnError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply_overrides(&[format!("{key}={value}")])
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no config key `{key}`"))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        let mut section = "";
        for (k, v) in &self.values {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                out.push('\n');
                section = s;
            }
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, expected: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| bad(key, v, expected))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            v => Err(bad(key, v, "true or false")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch(10)?;
        self.train()?;
        self.data()?;
        self.profile()?;
        self.flag("ablate.train")?;
        Ok(())
    }

    pub fn mode(&self) -> Result<Mode> {
        let v = self.get("arch.mode");
        v.parse().map_err(|_| bad("arch.mode", v, "snn or cnn"))
    }

    pub fn schedule(&self) -> Result<PruneSchedule> {
        let v = self.get("arch.schedule");
        v.parse().map_err(|e: SnnError| SnnError::Config(format!("arch.schedule: {e}")))
    }

    /// `arch.num_classes`, or `dataset_classes` when it is `auto`.
    pub fn num_classes(&self, dataset_classes: usize) -> Result<usize> {
        match self.get("arch.num_classes") {
            "auto" => Ok(dataset_classes),
            _ => self.parse_as("arch.num_classes", "a positive integer or auto"),
        }
    }

    pub fn width(&self) -> Result<f64> {
        let w: f64 = self.parse_as("arch.width", "a positive number")?;
        if !(w > 0.0) {
            return Err(bad("arch.width", self.get("arch.width"), "a positive number"));
        }
        Ok(w)
    }

    /// Architecture for a dataset with `dataset_classes` classes.
    pub fn arch(&self, dataset_classes: usize) -> Result<ArchSpec> {
        let mut spec = ArchSpec::squeezenet(self.num_classes(dataset_classes)?, self.mode()?);
        let to_config = |e: SnnError| SnnError::Config(e.to_string());
        spec.set_field("conv1", self.get("arch.conv1")).map_err(to_config)?;
        spec.set_field("in_channels", self.get("arch.in_channels")).map_err(to_config)?;
        spec.set_field("time_steps", self.get("arch.time_steps")).map_err(to_config)?;
        let mut spec = spec.scale_width(self.width()?);
        let mask = match self.get("arch.retained") {
            "schedule" => self.schedule()?.mask(),
            v => v
                .parse::<FireMask>()
                .map_err(|e| SnnError::Config(format!("arch.retained: {e}")))?,
        };
        spec.set_retained(mask);
        for key in ["tau", "v_th", "v_rest", "v_reset", "resistance", "leak_factor", "alpha"] {
            let full = format!("lif.{key}");
            spec.set_field(&full, self.get(&full)).map_err(to_config)?;
        }
        spec.validate().map_err(to_config)?;
        Ok(spec)
    }

    /// Name for the retained set: the schedule name, or the mask text
    /// when `arch.retained` is set explicitly.
    pub fn schedule_label(&self) -> Result<String> {
        Ok(match self.get("arch.retained") {
            "schedule" => self.schedule()?.name().to_string(),
            v => v.parse::<FireMask>().map_err(|e| SnnError::Config(e.to_string()))?.to_string().replace(',', "+"),
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let decay_epochs = self
            .get("train.decay_epochs")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("train.decay_epochs", self.get("train.decay_epochs"), "comma-separated epochs"))?;
        let target = match self.get("train.target_train_acc") {
            "none" | "" => None,
            _ => Some(self.parse_as("train.target_train_acc", "a fraction or none")?),
        };
        let ga_mode: GaMode = self.get("train.ga_mode").parse()?;
        let cfg = TrainConfig {
            lr: self.parse_as("train.lr", "a number")?,
            decay_factor: self.parse_as("train.decay_factor", "a number")?,
            decay_epochs,
            batch_size: self.parse_as("train.batch_size", "an integer")?,
            max_epochs: self.parse_as("train.max_epochs", "an integer")?,
            patience: self.parse_as("train.patience", "an integer")?,
            seed: self.parse_as("train.seed", "an integer")?,
            lambda: self.parse_as("train.lambda", "a number")?,
            epsilon: self.parse_as("train.epsilon", "a number")?,
            ga_mode,
            val_fraction: self.parse_as("train.val_fraction", "a fraction")?,
            target_train_acc: target,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data(&self) -> Result<DataConfig> {
        let kind = match self.get("data.kind") {
            "synth" => DataKind::Synth,
            "cifar10" => DataKind::Cifar10,
            "cifar100" => DataKind::Cifar100,
            "tinyimagenet" => DataKind::TinyImageNet,
            v => return Err(bad("data.kind", v, "synth, cifar10, cifar100 or tinyimagenet")),
        };
        let cfg = DataConfig {
            kind,
            path: self.get("data.path").to_string(),
            eval_path: self.get("data.eval_path").to_string(),
            limit: self.parse_as("data.limit", "an integer")?,
            normalize: self.flag("data.normalize")?,
            synth_classes: self.parse_as("data.synth_classes", "an integer")?,
            synth_per_class: self.parse_as("data.synth_per_class", "an integer")?,
            synth_size: self.parse_as("data.synth_size", "an integer")?,
            synth_seed: self.parse_as("data.synth_seed", "an integer")?,
        };
        if kind == DataKind::Synth && cfg.synth_classes < 2 {
            return Err(bad("data.synth_classes", self.get("data.synth_classes"), "at least 2"));
        }
        Ok(cfg)
    }

    pub fn profile(&self) -> Result<ProfileConfig> {
        let images: usize = self.parse_as("profile.images", "an integer")?;
        if images == 0 {
            return Err(bad("profile.images", "0", "at least 1"));
        }
        Ok(ProfileConfig {
            flags: ProfileFlags {
                membrane_macs: self.flag("profile.membrane_macs")?,
                first_layer_per_step: self.flag("profile.first_layer_per_step")?,
            },
            images,
            checkpoint: self.get("profile.checkpoint").to_string(),
            cnn_checkpoint: self.get("profile.cnn_checkpoint").to_string(),
        })
    }

    pub fn ablate_train(&self) -> Result<bool> {
        self.flag("ablate.train")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.train().unwrap(), TrainConfig::default());
        let spec = c.arch(10).unwrap();
        assert_eq!(spec, ArchSpec::squeezenet(10, Mode::Snn));
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = Config::parse("# smoke\ntrain.lr = 0.01  # faster\n\narch.schedule=Ref-1\n").unwrap();
        assert_eq!(c.train().unwrap().lr, 0.01);
        c.apply_overrides(&["train.lr=0.5".into()]).unwrap();
        assert_eq!(c.train().unwrap().lr, 0.5);
        assert_eq!(c.arch(4).unwrap().retained, PruneSchedule::Ref1.mask());
    }

    #[test]
    fn unknown_keys_listed() {
        let err = Config::parse("train.lr=0.1\ntrain.momentum=0.9\nfoo=1\n").unwrap_err().to_string();
        assert!(err.contains("train.momentum") && err.contains("foo"), "{err}");
        let mut c = Config::default();
        assert!(c.apply_overrides(&["nope=1".into()]).unwrap_err().to_string().contains("nope"));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(Config::parse("train.lr=fast").is_err());
        assert!(Config::parse("arch.schedule=Middle-3").is_err());
        assert!(Config::parse("arch.mode=ann").is_err());
        assert!(Config::parse("just a line").is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut c = Config::default();
        c.apply_overrides(&["arch.width=0.25".into(), "lif.leak_factor=0.1".into(), "data.path=/tmp/x".into()])
            .unwrap();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn explicit_retained_overrides_schedule() {
        let c = Config::parse("arch.schedule=Full\narch.retained=fire2,fire9\n").unwrap();
        assert_eq!(c.arch(10).unwrap().retained.fires(), vec![2, 9]);
        assert_eq!(c.schedule_label().unwrap(), "fire2+fire9");
    }
}
