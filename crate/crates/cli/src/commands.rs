use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use snnbench::arch::{ArchSpec, Mode, PruneSchedule};
use snnbench::bench::{pareto_frontier, parse_rows, rows_to_csv, scatter_svg, summary_csv, BenchRow};
use snnbench::checkpoint::{load_checkpoint, save_checkpoint};
use snnbench::config::{Config, DataConfig, DataKind};
use snnbench::data::{load_cifar_bin, load_tinyimagenet, normalize, synth_blobs, train_val_split, Dataset, Split};
use snnbench::metrics::{evaluate, MetricsReport};
use snnbench::profiler::{eta_energy, profile_forward, Profiler};
use snnbench::train::{grad_norm_csv, predict_dataset, train, train_log_csv, TrainConfig};
use snnbench::Network;

use crate::RunArgs;

const EVAL_BATCH: usize = 64;
const SMOKE_MAX_IMAGES: usize = 1000;
const SMOKE_MAX_EPOCHS: usize = 20;

pub struct Run {
    cfg: Config,
    out: PathBuf,
    full_scale: bool,
}

struct Data {
    name: &'static str,
    train: Dataset,
    eval: Option<Dataset>,
}

fn model_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Snn => "SNN-SqueezeNet",
        Mode::Cnn => "CNN-SqueezeNet",
    }
}

fn prepare(mut ds: Dataset, cfg: &DataConfig) -> Result<Dataset> {
    if cfg.limit > 0 {
        ds = ds.take(cfg.limit);
    }
    if cfg.normalize {
        ds.images = normalize(&ds.images)?;
    }
    Ok(ds)
}

fn load_data(cfg: &DataConfig) -> Result<Data> {
    let need_path = |p: &str| -> Result<PathBuf> {
        if p.is_empty() {
            bail!("data.path must be set for data.kind={}", cfg.kind.name());
        }
        Ok(PathBuf::from(p))
    };
    let (train, eval) = match cfg.kind {
        DataKind::Synth => (
            synth_blobs(cfg.synth_seed, cfg.synth_classes, cfg.synth_per_class, cfg.synth_size)?,
            None,
        ),
        DataKind::Cifar10 | DataKind::Cifar100 => {
            let variant = if cfg.kind == DataKind::Cifar10 { 10 } else { 100 };
            let path = need_path(&cfg.path)?;
            let train = load_cifar_bin(&path, variant, Split::Train)
                .with_context(|| format!("loading {}", path.display()))?;
            let eval = if cfg.eval_path.is_empty() {
                None
            } else {
                let eval = load_cifar_bin(Path::new(&cfg.eval_path), variant, Split::Test)
                    .with_context(|| format!("loading {}", cfg.eval_path))?;
                Some(eval)
            };
            (train, eval)
        }
        DataKind::TinyImageNet => {
            let dir = need_path(&cfg.path)?;
            let load = |split| load_tinyimagenet(&dir, split).with_context(|| format!("loading {} ({split})", dir.display()));
            (load(Split::Train)?, Some(load(Split::Val)?))
        }
    };
    Ok(Data {
        name: cfg.kind.name(),
        train: prepare(train, cfg)?,
        eval: eval.map(|e| prepare(e, cfg)).transpose()?,
    })
}

impl Run {
    pub fn new(args: &RunArgs) -> Result<Self> {
        let mut cfg = Config::load(&args.config)?;
        cfg.apply_overrides(&args.overrides)?;
        fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
        let run = Run {
            cfg,
            out: args.out.clone(),
            full_scale: args.full_scale,
        };
        run.write("effective-config.txt", &run.cfg.to_text())?;
        Ok(run)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
    }

    /// Held-out evaluation data: the dataset's own eval split, or the seeded
    /// validation part of the training set.
    fn eval_set(&self, data: &Data, tc: &TrainConfig) -> Result<Dataset> {
        match &data.eval {
            Some(e) => Ok(e.clone()),
            None => Ok(train_val_split(&data.train, tc.val_fraction, tc.seed)?.1),
        }
    }

    fn metrics(&self, net: &Network, eval: &Dataset) -> Result<MetricsReport> {
        let preds = predict_dataset(net, eval, EVAL_BATCH)?;
        Ok(evaluate(&preds, &eval.labels, eval.class_count)?)
    }

    /// Evaluates and profiles `net`. SNN rows get `eta` from the same
    /// architecture in CNN mode, and `delta_acc` when a trained CNN
    /// checkpoint is configured.
    fn bench_row(&self, net: &Network, eval: &Dataset, dataset: &str, schedule: &str) -> Result<(BenchRow, Profiler)> {
        let pc = self.cfg.profile()?;
        let metrics = self.metrics(net, eval)?;
        let batch = eval.take(pc.images).images;
        let prof = profile_forward(net, &batch, pc.flags)?;
        let c = prof.counts();
        let mode = net.spec().mode;
        let mut row = BenchRow::new(model_name(mode), schedule, dataset, metrics.accuracy, metrics.macro_f1, c.ac, c.mac, c.params);
        if mode == Mode::Snn {
            let cnn = if pc.cnn_checkpoint.is_empty() {
                None
            } else {
                let net = load_checkpoint(Path::new(&pc.cnn_checkpoint))
                    .with_context(|| format!("loading CNN checkpoint {}", pc.cnn_checkpoint))?;
                if net.spec().mode != Mode::Cnn {
                    bail!("profile.cnn_checkpoint {} is not a CNN-mode network", pc.cnn_checkpoint);
                }
                Some(net)
            };
            let reference = match &cnn {
                Some(n) => n.clone(),
                None => Network::build(&net.spec().clone().with_mode(Mode::Cnn), 0)?,
            };
            let cnn_energy = profile_forward(&reference, &batch, pc.flags)?.report().energy_mj;
            if row.energy_mj > 0.0 {
                row.eta = Some(eta_energy(cnn_energy, row.energy_mj)?);
            }
            if let Some(cnn) = &cnn {
                row.delta_acc = Some(row.acc - self.metrics(cnn, eval)?.accuracy);
            }
        }
        Ok((row, prof))
    }

    fn checkpoint_or_spec(&self, classes: usize) -> Result<Network> {
        let pc = self.cfg.profile()?;
        if pc.checkpoint.is_empty() {
            let tc = self.cfg.train()?;
            return Ok(Network::build(&self.cfg.arch(classes)?, tc.seed)?);
        }
        let path = Path::new(&pc.checkpoint);
        if !path.is_file() {
            bail!("missing checkpoint {}", path.display());
        }
        Ok(load_checkpoint(path)?)
    }

    fn check_classes(net: &Network, eval: &Dataset) -> Result<()> {
        if net.spec().num_classes != eval.class_count {
            bail!(
                "network has {} classes but the dataset has {}",
                net.spec().num_classes,
                eval.class_count
            );
        }
        Ok(())
    }

    fn train_network(&self, spec: &ArchSpec, tc: &TrainConfig, data: &Dataset, log: &mut String) -> Result<Network> {
        let (tr, va) = train_val_split(data, tc.val_fraction, tc.seed)?;
        let mut net = Network::build(spec, tc.seed)?;
        let outcome = train(&mut net, &tr, &va, tc, &mut |e| {
            let rate = e.firing_rate.map(|r| format!(" firing_rate={r:.4}")).unwrap_or_default();
            let line = format!(
                "epoch {} lr={:e} loss={:.4} ce={:.4} ga={:.3e} train_acc={:.4} val_acc={:.4}{rate}",
                e.epoch, e.lr, e.train_loss, e.ce, e.ga, e.train_acc, e.val_acc
            );
            println!("{line}");
            log.push_str(&line);
            log.push('\n');
        })?;
        let _ = writeln!(log, "stop: {} after {} epochs", outcome.stop, outcome.history.len());
        self.write("train_log.csv", &train_log_csv(&outcome.history))?;
        self.write("grad_norms.csv", &grad_norm_csv(&outcome.history))?;
        Ok(net)
    }

    pub fn train(&self) -> Result<()> {
        let data = load_data(&self.cfg.data()?)?;
        let tc = self.cfg.train()?;
        let spec = self.cfg.arch(data.train.class_count)?;
        let mut log = String::new();
        let net = self.train_network(&spec, &tc, &data.train, &mut log)?;
        self.write("train.log", &log)?;
        save_checkpoint(&net, &self.out.join("checkpoint.snnw"))?;
        let eval = self.eval_set(&data, &tc)?;
        let (row, prof) = self.bench_row(&net, &eval, data.name, &self.cfg.schedule_label()?)?;
        self.write("bench.csv", &rows_to_csv(&[row]))?;
        self.write("layers.csv", &prof.layers_csv())?;
        Ok(())
    }

    pub fn eval(&self) -> Result<()> {
        if self.cfg.profile()?.checkpoint.is_empty() {
            bail!("missing checkpoint: set profile.checkpoint");
        }
        let data = load_data(&self.cfg.data()?)?;
        let net = self.checkpoint_or_spec(data.train.class_count)?;
        let eval = self.eval_set(&data, &self.cfg.train()?)?;
        Self::check_classes(&net, &eval)?;
        let m = self.metrics(&net, &eval)?;
        let mut per_class = String::from("class,precision,recall,f1,support\n");
        for (k, c) in m.per_class.iter().enumerate() {
            let _ = writeln!(per_class, "{k},{:.6},{:.6},{:.6},{}", c.precision, c.recall, c.f1, c.support);
        }
        let mut confusion = String::new();
        for row in &m.confusion {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            confusion.push_str(&cells.join(","));
            confusion.push('\n');
        }
        self.write("metrics.csv", &per_class)?;
        self.write("confusion.csv", &confusion)?;
        let (row, prof) = self.bench_row(&net, &eval, data.name, &self.cfg.schedule_label()?)?;
        println!("accuracy={:.4} macro_f1={:.4} n={}", m.accuracy, m.macro_f1, eval.len());
        self.write("bench.csv", &rows_to_csv(&[row]))?;
        self.write("layers.csv", &prof.layers_csv())?;
        Ok(())
    }

    pub fn profile(&self) -> Result<()> {
        let data = load_data(&self.cfg.data()?)?;
        let net = self.checkpoint_or_spec(data.train.class_count)?;
        let eval = self.eval_set(&data, &self.cfg.train()?)?;
        Self::check_classes(&net, &eval)?;
        let schedule = if self.cfg.profile()?.checkpoint.is_empty() {
            self.cfg.schedule_label()?
        } else {
            schedule_for(net.spec())
        };
        let (row, prof) = self.bench_row(&net, &eval, data.name, &schedule)?;
        println!(
            "{} {}: ac={} mac={} params={} energy={:.6} mJ",
            row.model, row.schedule, row.ac, row.mac, row.params, row.energy_mj
        );
        self.write("bench.csv", &rows_to_csv(&[row]))?;
        self.write("layers.csv", &prof.layers_csv())?;
        Ok(())
    }

    pub fn ablate(&self) -> Result<()> {
        let train_each = self.cfg.ablate_train()?;
        if self.full_scale {
            eprintln!(
                "warning: --full-scale trains all nine schedules on the complete dataset; expect many CPU-hours"
            );
        }
        let mut data = load_data(&self.cfg.data()?)?;
        let mut tc = self.cfg.train()?;
        if train_each && !self.full_scale {
            data.train = data.train.take(SMOKE_MAX_IMAGES);
            tc.max_epochs = tc.max_epochs.min(SMOKE_MAX_EPOCHS);
        }
        let eval = self.eval_set(&data, &tc)?;
        let base = self.cfg.arch(data.train.class_count)?;
        let mut rows = Vec::new();
        let mut table = String::from("schedule,retained,params,param_reduction,ac,mac,energy_mj,acc\n");
        let mut full_params = None;
        for schedule in PruneSchedule::ALL {
            let mut spec = base.clone();
            spec.set_retained(schedule.mask());
            let net = if train_each {
                let mut log = String::new();
                let net = self.train_network(&spec, &tc, &data.train, &mut log)?;
                self.write(&format!("train/{}.log", schedule.name()), &log)?;
                net
            } else {
                Network::build(&spec, tc.seed)?
            };
            let (row, prof) = self.bench_row(&net, &eval, data.name, schedule.name())?;
            let full = *full_params.get_or_insert(row.params);
            let _ = writeln!(
                table,
                "{},{},{},{:.4},{},{},{},{:.6}",
                schedule.name(),
                schedule.mask().to_string().replace(',', "+"),
                row.params,
                1.0 - row.params as f64 / full as f64,
                row.ac,
                row.mac,
                row.energy_mj,
                row.acc
            );
            self.write(&format!("layers/{}.csv", schedule.name()), &prof.layers_csv())?;
            if schedule == PruneSchedule::Full {
                self.write("layers.csv", &prof.layers_csv())?;
            }
            println!("{}: params={} energy={:.6} mJ acc={:.4}", schedule.name(), row.params, row.energy_mj, row.acc);
            rows.push(row);
        }
        if train_each {
            // per-schedule logs live under train/; drop the shared CSVs of the last run
            let _ = fs::remove_file(self.out.join("train_log.csv"));
            let _ = fs::remove_file(self.out.join("grad_norms.csv"));
        }
        self.write("bench.csv", &rows_to_csv(&rows))?;
        self.write("ablation.csv", &table)?;
        self.write_report(&rows, data.name)
    }

    fn write_report(&self, rows: &[BenchRow], dataset: &str) -> Result<()> {
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.acc, r.energy_mj)).collect();
        let pareto = pareto_frontier(&points);
        self.write("summary.csv", &summary_csv(rows, &pareto))?;
        self.write("report.svg", &scatter_svg(rows, &pareto, &format!("Accuracy vs energy ({dataset})"))?)?;
        Ok(())
    }

    pub fn report(&self) -> Result<()> {
        let path = match self.cfg.get("report.rows") {
            "" => self.out.join("bench.csv"),
            p => PathBuf::from(p),
        };
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read rows {}", path.display()))?;
        let rows = parse_rows(&text).with_context(|| format!("in {}", path.display()))?;
        let datasets: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
        let title = if datasets.windows(2).all(|w| w[0] == w[1]) { datasets[0] } else { "mixed" };
        self.write_report(&rows, title)
    }
}

fn schedule_for(spec: &ArchSpec) -> String {
    PruneSchedule::ALL
        .into_iter()
        .find(|s| s.mask() == spec.retained)
        .map(|s| s.name().to_string())
        .unwrap_or_else(|| spec.retained.to_string().replace(',', "+"))
}
