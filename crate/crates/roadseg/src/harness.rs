//! Training, evaluation and ablation drivers.

use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roadseg_core::autograd::{Mode, ParamStore};
use roadseg_core::checkpoint::Checkpoint;
use roadseg_core::data::{generate, random_augment, Sample};
use roadseg_core::decoder::{build_topology_with, cost_report, CostReport};
use roadseg_core::losses::ProbabilityMap;
use roadseg_core::metrics::{
    confusion, point_metrics, threshold_grid, ConfusionCounts, CurveAccumulator, CurveMetrics, PointMetrics,
};
use roadseg_core::model::{Model, ModelConfig};
use roadseg_core::optim::{step_decay, Adam, AdamConfig};
use roadseg_core::train::{forward_batch, prepare_all, train_step, Prepared};
use roadseg_core::Error;

use crate::config::{RunConfig, TrainConfig};
use crate::error::{Result, RunError};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: PointMetrics,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    /// One entry per completed epoch, numbered from 1.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_fsc: f64,
    pub stopped_early: bool,
    pub steps: u64,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

pub struct Trained {
    pub model: Model,
    /// Parameters of the best validation epoch.
    pub store: ParamStore,
    pub record: RunRecord,
}

impl Trained {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            step: self.record.steps,
            metadata: cfg.to_pairs(),
            store: self.store.clone(),
        }
    }
}

fn check_disjoint(train: &[Sample], val: &[Sample]) -> Result<()> {
    if train.iter().any(|t| val.contains(t)) {
        return Err(Error::Contract("validation frames overlap the training frames".into()).into());
    }
    Ok(())
}

/// Fsc at 0.5 over a set of frames, batch-statistics free.
fn validation_metrics(model: &Model, store: &ParamStore, frames: &[Prepared]) -> Result<PointMetrics> {
    let mut counts = ConfusionCounts::default();
    for f in frames {
        let p = forward_batch(model, store, &[f], Mode::Eval)?;
        let [_, _, h, w] = p.shape();
        let p = ProbabilityMap::new(w, h, p.plane(0, 0).to_vec())?;
        counts += confusion(&p, &f.sample.labels, 0.5)?;
    }
    Ok(point_metrics(&counts))
}

/// Trains from scratch; returns the parameters of the epoch with the best
/// validation Fsc.
pub fn train(cfg: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("training and validation sets must be nonempty".into()).into());
    }
    check_disjoint(train, val)?;
    let (model, mut store) = Model::init(cfg.model.clone(), true)?;
    for s in train.iter().chain(val) {
        model.config.check_input(s.width(), s.height())?;
    }
    let clean = prepare_all(train.to_vec())?;
    let val = prepare_all(val.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::default());
    let mut record = RunRecord::default();
    let mut best = (f64::NEG_INFINITY, store.clone());
    let mut since_best = 0;
    let mut batch_index = 0;
    let mut order: Vec<usize> = (0..clean.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let lr = step_decay(cfg.lr, cfg.decay_factor, cfg.decay_interval, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<Prepared>;
            let frames: Vec<&Prepared> = if cfg.augment {
                augmented = chunk
                    .iter()
                    .map(|&i| {
                        let s = &clean[i].sample;
                        Prepared::new(random_augment(s, s.width(), s.height(), &mut rng)?)
                    })
                    .collect::<roadseg_core::Result<_>>()?;
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &clean[i]).collect()
            };
            let stats = train_step(&model, &mut store, &mut adam, &frames, &cfg.loss, lr, batch_index)?;
            loss_sum += stats.loss;
            batches += 1;
            batch_index += 1;
        }
        let metrics = validation_metrics(&model, &store, &val)?;
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val: metrics,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} val fsc {:.4}",
            loss_sum / batches as f64,
            metrics.fsc
        );
        if metrics.fsc > best.0 {
            best = (metrics.fsc, store.clone());
            record.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                record.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    record.best_val_fsc = best.0;
    record.steps = adam.steps();
    Ok(Trained {
        model,
        store: best.1,
        record,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub index: usize,
    pub metrics: PointMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub counts: ConfusionCounts,
    /// At threshold 0.5.
    pub metrics: PointMetrics,
    pub curve: CurveMetrics,
    pub per_frame: Vec<FrameReport>,
}

impl EvalReport {
    pub fn to_pairs(&self) -> Vec<(&'static str, f64)> {
        let m = &self.metrics;
        vec![
            ("frames", self.frames as f64),
            ("acc", m.acc),
            ("pre", m.pre),
            ("rec", m.rec),
            ("fsc", m.fsc),
            ("iou", m.iou),
            ("fpr", m.fpr),
            ("fnr", m.fnr),
            ("max_f", self.curve.max_f),
            ("ap", self.curve.ap),
        ]
    }

    pub fn table(&self) -> String {
        let mut out = String::from("metric   value\n");
        for (k, v) in self.to_pairs() {
            out.push_str(&format!("{k:<8} {v:.6}\n"));
        }
        out
    }
}

/// Aggregate metrics over a dataset.
pub fn evaluate(model: &Model, store: &ParamStore, data: &[Sample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()).into());
    }
    let mut acc = CurveAccumulator::new(&threshold_grid())?;
    let mut counts = ConfusionCounts::default();
    let mut per_frame = Vec::with_capacity(data.len());
    for (index, s) in data.iter().enumerate() {
        if let Err(e) = model.config.check_input(s.width(), s.height()) {
            return Err(Error::Contract(format!(
                "frame {index} does not fit the checkpoint's network: {e}"
            ))
            .into());
        }
        let p = model.predict(store, s, Mode::Eval)?;
        let c = confusion(&p, &s.labels, 0.5)?;
        acc.add(&p, &s.labels)?;
        counts += c;
        per_frame.push(FrameReport {
            index,
            metrics: point_metrics(&c),
        });
    }
    Ok(EvalReport {
        frames: data.len(),
        counts,
        metrics: point_metrics(&counts),
        curve: acc.finish(),
        per_frame,
    })
}

/// Rebuilds a network from a checkpoint written by [`Trained::checkpoint`].
pub fn restore(ckpt: &Checkpoint) -> Result<(RunConfig, Model, ParamStore)> {
    let cfg = RunConfig::from_pairs(ckpt.metadata.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let (model, fresh) = Model::init(cfg.train.model.clone(), true)?;
    let expected: Vec<_> = fresh.entries().iter().map(|e| (&e.name, e.value.shape())).collect();
    let found: Vec<_> = ckpt.store.entries().iter().map(|e| (&e.name, e.value.shape())).collect();
    if expected != found {
        return Err(Error::Format("checkpoint tensors do not match its configuration".into()).into());
    }
    Ok((cfg, model, ckpt.store.clone()))
}

/// Synthetic train and validation sets from the data section of a config.
pub fn synthetic_sets(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &cfg.data;
    let all = generate(d.split, d.train_frames + d.val_frames, d.width, d.height, d.seed)?;
    let val = all[d.train_frames..].to_vec();
    let mut train = all;
    train.truncate(d.train_frames);
    Ok((train, val))
}

/// One column of an ablation grid: a label plus the overrides it applies.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub overrides: Vec<String>,
}

impl Cell {
    pub fn new(label: impl Into<String>, overrides: &[&str]) -> Self {
        Self {
            label: label.into(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn grid_names() -> &'static [&'static str] {
    &["fusion", "lambda", "radius", "decoder"]
}

/// The predefined grids: fusion components removed one at a time, the
/// λ split at a fixed sum of 0.4, neighbourhood radii and decoders.
pub fn named_grid(name: &str) -> Option<Vec<Cell>> {
    let cells = match name {
        "fusion" => vec![
            Cell::new("full", &[]),
            Cell::new("no-spatial", &["fusion.spatial.enabled=false"]),
            Cell::new("no-atrous", &["fusion.atrous.enabled=false"]),
            Cell::new("no-channel", &["fusion.channel.enabled=false"]),
            Cell::new("no-hfcd", &["fusion.hfcd.enabled=false"]),
            Cell::new("no-awfr", &["fusion.awfr.enabled=false"]),
            Cell::new("baseline-sum", &["fusion.baseline_sum=true"]),
        ],
        "lambda" => [(0.0, 0.0), (0.4, 0.0), (0.3, 0.1), (0.2, 0.2), (0.1, 0.3), (0.0, 0.4)]
            .iter()
            .map(|(s, d)| {
                let a = format!("loss.lambda_s={s}");
                let b = format!("loss.lambda_d={d}");
                Cell::new(format!("lambda {s}/{d}"), &[&a, &b])
            })
            .collect(),
        "radius" => [1, 3, 5, 7, 9, 11]
            .iter()
            .map(|r| {
                let a = format!("loss.radius={r}");
                Cell::new(format!("radius {r}"), &[&a])
            })
            .collect(),
        "decoder" => ["roadsegv2", "unetpp", "unet3p"]
            .iter()
            .map(|d| {
                let a = format!("model.decoder={d}");
                Cell::new(*d, &[&a])
            })
            .collect(),
        _ => return None,
    };
    Some(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub best_val_fsc: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub params: usize,
    pub decoder_cost: CostReport,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    /// The failure message when the run could not complete.
    pub outcome: std::result::Result<CellSummary, String>,
}

/// Decoder cost of a model configuration at a given input size.
pub fn decoder_cost(model: &ModelConfig, width: usize, height: usize) -> Result<CostReport> {
    let graph = build_topology_with(model.decoder, model.levels(), &model.channels, model.inter_scale)?;
    Ok(cost_report(&graph, height / model.patch, width / model.patch))
}

fn run_cell(base: &RunConfig, cell: &Cell, seed: u64, train_set: &[Sample], val: &[Sample]) -> Result<CellSummary> {
    let mut cfg = base.clone();
    for o in &cell.overrides {
        cfg.apply(o)?;
    }
    cfg.set("seed", &seed.to_string())?;
    let (w, h) = (train_set[0].width(), train_set[0].height());
    let t = train(&cfg.train, train_set, val)?;
    Ok(CellSummary {
        best_val_fsc: t.record.best_val_fsc,
        best_epoch: t.record.best_epoch,
        epochs: t.record.epochs.len(),
        params: t.model.param_count(&t.store),
        decoder_cost: decoder_cost(&cfg.train.model, w, h)?,
        losses: t.record.losses(),
    })
}

/// Runs every (cell, seed) pair; failures are recorded and the grid goes
/// on. Rows are sorted by validation Fsc, failures last.
pub fn ablate(base: &RunConfig, cells: &[Cell], seeds: &[u64], train_set: &[Sample], val: &[Sample]) -> Result<Vec<AblationRow>> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("ablation grid is empty".into()).into());
    }
    if train_set.is_empty() {
        return Err(Error::Contract("empty training set".into()).into());
    }
    let mut rows = Vec::new();
    for cell in cells {
        for &seed in seeds {
            let outcome = run_cell(base, cell, seed, train_set, val).map_err(|e: RunError| {
                warn!("cell {} seed {seed} failed: {e}", cell.label);
                e.to_string()
            });
            if let Ok(s) = &outcome {
                info!("cell {} seed {seed}: val fsc {:.4}", cell.label, s.best_val_fsc);
            }
            rows.push(AblationRow {
                label: cell.label.clone(),
                seed,
                outcome,
            });
        }
    }
    let key = |r: &AblationRow| r.outcome.as_ref().map_or(f64::NEG_INFINITY, |s| s.best_val_fsc);
    rows.sort_by(|a, b| key(b).total_cmp(&key(a)));
    Ok(rows)
}

/// Mean validation Fsc per cell label over the successful seeds.
pub fn mean_by_label(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut labels: Vec<String> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    let mut out: Vec<(String, f64)> = labels
        .into_iter()
        .filter_map(|l| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.label == l)
                .filter_map(|r| r.outcome.as_ref().ok().map(|s| s.best_val_fsc))
                .collect();
            (!v.is_empty()).then(|| (l, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("cell                 seed  val_fsc  epochs  params    dec_params  dec_macs\n");
    for r in rows {
        match &r.outcome {
            Ok(s) => out.push_str(&format!(
                "{:<20} {:>4}  {:.4}   {:>6}  {:>8}  {:>10}  {:>10}\n",
                r.label, r.seed, s.best_val_fsc, s.epochs, s.params, s.decoder_cost.params, s.decoder_cost.flops
            )),
            Err(e) => out.push_str(&format!("{:<20} {:>4}  failed: {e}\n", r.label, r.seed)),
        }
    }
    out
}
