//! Supervised training on a leave-one-domain-out split, and sweeps of runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndcore::{Graph, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugKind, AugmentorConfig, DrawSummary, Mode, Noise, Rng};
use crate::data::{self, DatasetManifest, Domain, Sample};
use crate::error::{DsuError, Result};
use crate::net::{self, NetworkSpec, Params};

const INIT_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 1;
const AUG_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    /// Domain styles; the four defaults when absent.
    pub domains: Option<Vec<data::DomainSpec>>,
    /// Previously exported dataset directory; overrides inline generation.
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 4,
            n_per_class: 400,
            image_size: 32,
            domains: None,
            path: None,
        }
    }
}

impl DatasetConfig {
    pub fn manifest(&self) -> Result<DatasetManifest> {
        if let Some(dir) = &self.path {
            return DatasetManifest::read(&dir.join(data::MANIFEST_FILE));
        }
        let domains = self
            .domains
            .clone()
            .unwrap_or_else(|| data::default_domains(self.seed));
        DatasetManifest::new(self.seed, self.classes, self.n_per_class, self.image_size, domains)
    }

    pub fn load(&self) -> Result<Vec<Domain>> {
        match &self.path {
            Some(dir) => Ok(data::import(dir)?.1),
            None => self.manifest()?.generate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub held_out: String,
    /// Fraction of the training domains kept aside for in-domain validation.
    pub val_fraction: f64,
    pub aug: AugmentorConfig,
    pub net: NetworkSpec,
    pub dataset: DatasetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            held_out: "sketch".into(),
            val_fraction: 0.2,
            aug: AugmentorConfig::default(),
            net: NetworkSpec::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DsuError::Config(m));
        if self.epochs == 0 {
            return bad("training.epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("training.batch_size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("training.lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("training.momentum must be in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("training.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("training.val_fraction must be in [0,1), got {}", self.val_fraction));
        }
        self.aug.validate()?;
        self.net.validate()?;
        if self.net.num_classes != self.dataset.classes && self.dataset.path.is_none() {
            return bad(format!(
                "network.num_classes {} differs from dataset.classes {}",
                self.net.num_classes, self.dataset.classes
            ));
        }
        if self.net.image_size != self.dataset.image_size && self.dataset.path.is_none() {
            return bad(format!(
                "network.image_size {} differs from dataset.image_size {}",
                self.net.image_size, self.dataset.image_size
            ));
        }
        Ok(())
    }

    /// Warnings about configurations that run but degenerate.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.batch_size < 2 && self.aug.kind.uses_batch() && !self.net.insert_positions.is_empty() {
            w.push(format!(
                "batch_size {} leaves {} without batch statistics; its uncertainty is zero",
                self.batch_size, self.aug.kind
            ));
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Accuracy on the held-in validation split of the training domains.
    pub in_domain_accuracy: f64,
    /// Accuracy on the held-out domain.
    pub out_of_domain_accuracy: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub draws: DrawSummary,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Everything except wall-clock time.
    pub fn metrics(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).unwrap_or_default();
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_clock_secs");
        }
        v
    }
}

/// Training, validation and test samples for one configuration.
pub struct Partition<'a> {
    pub train: Vec<&'a Sample>,
    pub val: Vec<&'a Sample>,
    pub test: Vec<&'a Sample>,
}

pub fn partition<'a>(domains: &'a [Domain], cfg: &TrainConfig) -> Result<Partition<'a>> {
    if !domains.iter().any(|d| d.spec.name == cfg.held_out) {
        return Err(DsuError::UnknownDomain(cfg.held_out.clone()));
    }
    let mut pool: Vec<&Sample> = Vec::new();
    let mut test = Vec::new();
    for d in domains {
        if d.spec.name == cfg.held_out {
            test.extend(d.samples.iter());
        } else {
            pool.extend(d.samples.iter());
        }
    }
    Rng::stream(cfg.seed, SPLIT_STREAM).shuffle(&mut pool);
    let n_val = (pool.len() as f64 * cfg.val_fraction).round() as usize;
    let val = pool.split_off(pool.len() - n_val);
    Ok(Partition { train: pool, val, test })
}

/// Eval-mode accuracy over `samples`.
pub fn accuracy(params: &Params<f32>, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut noise = Noise::live(Rng::new(0));
    let ident = AugmentorConfig::of(AugKind::Identity);
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let (x, labels) = data::batch(chunk)?;
        let logits = params.forward(&x, Mode::Eval, &ident, &mut noise)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == l
        })
        .count()
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

/// Trains a network under `cfg` on `domains` and returns it with its report.
pub fn train_model(cfg: &TrainConfig, domains: &[Domain]) -> Result<(RunReport, Params<f32>)> {
    cfg.validate()?;
    let start = Instant::now();
    let warnings = cfg.warnings();
    for w in &warnings {
        warn!("{w}");
    }
    let part = partition(domains, cfg)?;
    if part.train.is_empty() {
        return Err(DsuError::Input("no training samples".into()));
    }
    let mut params = net::build::<f32>(&cfg.net, Rng::stream(cfg.seed, INIT_STREAM).normal().to_bits())?;
    let mut order_rng = Rng::stream(cfg.seed, ORDER_STREAM);
    let mut noise = Noise::live(Rng::stream(cfg.seed, AUG_STREAM));
    let mut velocity: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();

    let n = part.train.len();
    let bs = cfg.batch_size.min(n);
    let per_epoch = n / bs;
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = cfg.lr;
        for b in 0..per_epoch {
            let picked: Vec<&Sample> = order[b * bs..(b + 1) * bs].iter().map(|&i| part.train[i]).collect();
            let (x, labels) = data::batch(&picked)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let f = params.forward_graph(&mut g, xv, Mode::Train, &cfg.aug, &mut noise)?;
            correct += count_correct(g.value(f.logits), &labels);
            let loss = g.cross_entropy(f.logits, &labels)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(DsuError::Input(format!("loss diverged at epoch {epoch}, step {b}")));
            }
            let grads = g.backward(loss)?;
            lr = cosine_lr(cfg.lr, step, total);
            let (m, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
            for ((p, var), vel) in params.tensors.iter_mut().zip(&f.params).zip(velocity.iter_mut()) {
                let Some(gr) = grads.get(*var) else { continue };
                for ((w, gv), v) in p.data_mut().iter_mut().zip(gr.data()).zip(vel.iter_mut()) {
                    *v = m * *v + gv + wd * *w;
                    *w -= lr as f32 * *v;
                }
            }
            if !f.bn_batch.is_empty() {
                params.update_running(&f.bn_batch)?;
            }
            loss_sum += lv;
            step_losses.push(lv);
            step += 1;
        }
        let seen = (per_epoch * bs).max(1) as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / per_epoch.max(1) as f64,
            accuracy: correct as f64 / seen,
            lr,
        };
        info!(
            "seed {} {} epoch {epoch}: loss {:.4} acc {:.3}",
            cfg.seed, cfg.aug.kind, stats.loss, stats.accuracy
        );
        epochs.push(stats);
    }

    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        epochs,
        step_losses,
        in_domain_accuracy: accuracy(&params, &part.val)?,
        out_of_domain_accuracy: accuracy(&params, &part.test)?,
        train_samples: part.train.len(),
        val_samples: part.val.len(),
        test_samples: part.test.len(),
        draws: noise.summary().clone(),
        warnings,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((report, params))
}

pub fn train_run(cfg: &TrainConfig, domains: &[Domain]) -> Result<RunReport> {
    Ok(train_model(cfg, domains)?.0)
}

/// The quantity a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    P,
    Positions,
    Batch,
    Method,
}

impl std::str::FromStr for SweepKind {
    type Err = DsuError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(SweepKind::P),
            "positions" => Ok(SweepKind::Positions),
            "batch" => Ok(SweepKind::Batch),
            "method" => Ok(SweepKind::Method),
            _ => Err(DsuError::Config(format!(
                "unknown sweep `{s}` (expected p, positions, batch or method)"
            ))),
        }
    }
}

/// One configured run of a sweep. `group` names the method and `x` the
/// value of the swept variable.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub group: String,
    pub x: String,
    pub cfg: TrainConfig,
}

/// One row of a sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: String,
    pub group: String,
    pub x: String,
    pub seed: u64,
    pub held_out: String,
    pub in_domain_accuracy: f64,
    pub out_of_domain_accuracy: f64,
    pub final_loss: f64,
    pub wall_clock_secs: f64,
}

impl SweepRow {
    pub fn new(sweep: &str, spec: &RunSpec, r: &RunReport) -> Self {
        Self {
            sweep: sweep.to_string(),
            group: spec.group.clone(),
            x: spec.x.clone(),
            seed: r.seed,
            held_out: r.config.held_out.clone(),
            in_domain_accuracy: r.in_domain_accuracy,
            out_of_domain_accuracy: r.out_of_domain_accuracy,
            final_loss: r.epochs.last().map_or(f64::NAN, |e| e.loss),
            wall_clock_secs: r.wall_clock_secs,
        }
    }
}

fn seeded(base: &TrainConfig, seeds: &[u64]) -> Vec<TrainConfig> {
    seeds
        .iter()
        .map(|&s| TrainConfig {
            seed: s,
            ..base.clone()
        })
        .collect()
}

/// One run per `(p, seed)`.
pub fn p_runs(base: &TrainConfig, values: &[f64], seeds: &[u64]) -> Result<Vec<RunSpec>> {
    let mut out = Vec::new();
    for &p in values {
        if !(0.0..=1.0).contains(&p) {
            return Err(DsuError::Config(format!("sweep p value {p} outside [0,1]")));
        }
        for mut cfg in seeded(base, seeds) {
            cfg.aug.p = p;
            out.push(RunSpec {
                group: cfg.aug.kind.to_string(),
                x: format!("{p}"),
                cfg,
            });
        }
    }
    Ok(out)
}

pub fn positions_label(slots: &[usize]) -> String {
    if slots.is_empty() {
        "none".into()
    } else {
        slots.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-")
    }
}

/// One run per `(slot set, seed)`.
pub fn positions_runs(base: &TrainConfig, slot_sets: &[Vec<usize>], seeds: &[u64]) -> Result<Vec<RunSpec>> {
    let mut out = Vec::new();
    for set in slot_sets {
        base.net.clone().with_positions(set).validate()?;
        for mut cfg in seeded(base, seeds) {
            cfg.net.insert_positions = set.clone();
            out.push(RunSpec {
                group: cfg.aug.kind.to_string(),
                x: positions_label(set),
                cfg,
            });
        }
    }
    Ok(out)
}

/// Paired augmented and identity runs per `(batch size, seed)`.
pub fn batch_runs(base: &TrainConfig, sizes: &[usize], seeds: &[u64]) -> Result<Vec<RunSpec>> {
    let mut out = Vec::new();
    for &bs in sizes {
        if bs < 2 {
            return Err(DsuError::Config(format!("sweep batch size {bs} must be >= 2")));
        }
        for kind in [base.aug.kind, AugKind::Identity] {
            for mut cfg in seeded(base, seeds) {
                cfg.batch_size = bs;
                cfg.aug.kind = kind;
                out.push(RunSpec {
                    group: kind.to_string(),
                    x: bs.to_string(),
                    cfg,
                });
            }
        }
    }
    Ok(out)
}

/// One run per `(augmentor, seed)`.
pub fn method_runs(base: &TrainConfig, kinds: &[AugKind], seeds: &[u64]) -> Result<Vec<RunSpec>> {
    let mut out = Vec::new();
    for &kind in kinds {
        for mut cfg in seeded(base, seeds) {
            cfg.aug.kind = kind;
            out.push(RunSpec {
                group: kind.to_string(),
                x: kind.to_string(),
                cfg,
            });
        }
    }
    Ok(out)
}

/// Runs every spec, `jobs` at a time (0 means all cores), in input order.
pub fn run_all(specs: &[RunSpec], domains: &[Domain], jobs: usize) -> Result<Vec<RunReport>> {
    for s in specs {
        s.cfg.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| DsuError::Config(format!("thread pool: {e}")))?;
    pool.install(|| specs.par_iter().map(|s| train_run(&s.cfg, domains)).collect())
}

pub fn sweep_p(base: &TrainConfig, values: &[f64], domains: &[Domain]) -> Result<Vec<RunReport>> {
    run_all(&p_runs(base, values, &[base.seed])?, domains, 0)
}

pub fn sweep_positions(base: &TrainConfig, slot_sets: &[Vec<usize>], domains: &[Domain]) -> Result<Vec<RunReport>> {
    run_all(&positions_runs(base, slot_sets, &[base.seed])?, domains, 0)
}

pub fn sweep_batch(base: &TrainConfig, sizes: &[usize], domains: &[Domain]) -> Result<Vec<RunReport>> {
    run_all(&batch_runs(base, sizes, &[base.seed])?, domains, 0)
}

pub fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| DsuError::io(path, e))?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}
