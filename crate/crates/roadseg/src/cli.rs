//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use roadseg_core::data::{generate, Sample};
use roadseg_core::decoder::{build_topology_with, cost_report, Topology};
use roadseg_core::geometry::{depth_weights_from_freespace, PixelSet};
use roadseg_core::losses::semantic_transition_weights;

use crate::config::RunConfig;
use crate::error::{Result, RunError};
use crate::harness::{self, named_grid};
use crate::io;

#[derive(Debug, Parser)]
#[command(name = "roadseg", version, about = "Freespace segmentation from RGB and depth")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory; synthetic frames are generated when absent.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// KEY=VALUE override, applied after the config file.
    #[arg(long = "ablation", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write its checkpoint and epoch log.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a predefined ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of fusion, lambda, radius, decoder.
        #[arg(long, default_value = "fusion")]
        grid: String,
        /// Number of seeds per cell, counting up from the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write the loss weight fields of one frame as 8-bit images.
    Weights {
        #[command(flatten)]
        common: Common,
        /// Frame stem inside --data-root; the first frame when absent.
        #[arg(long)]
        stem: Option<String>,
    },
    /// Parameter and multiply-accumulate counts of the decoders.
    DecoderStats {
        #[command(flatten)]
        common: Common,
        /// Restrict to one topology (roadsegv2, unetpp, unet3p).
        #[arg(long)]
        decoder: Option<String>,
    },
    /// Render a synthetic dataset to disk.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

impl Common {
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir).map_err(|e| RunError::io(&self.out_dir, e))?;
        Ok(&self.out_dir)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

fn loaded(root: &Path) -> Result<Vec<Sample>> {
    Ok(io::load_dataset(root)?.into_iter().map(|(_, s)| s).collect())
}

/// Training and validation frames: `train/` and `val/` under the data root,
/// or a synthetic pair from the config.
fn datasets(common: &Common, cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match &common.data_root {
        Some(root) => Ok((loaded(&root.join("train"))?, loaded(&root.join("val"))?)),
        None => harness::synthetic_sets(cfg),
    }
}

fn kv_text<K: AsRef<str>, V: std::fmt::Display>(pairs: impl IntoIterator<Item = (K, V)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{}={v}\n", k.as_ref())).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.config()?;
            cfg.validate()?;
            let (train, val) = datasets(&common, &cfg)?;
            let out = common.out()?;
            let mut t = harness::train(&cfg.train, &train, &val)?;
            let ckpt_path = out.join("model.ckpt");
            io::save_checkpoint(&ckpt_path, &t.checkpoint(&cfg))?;
            t.record.checkpoint = Some(ckpt_path.clone());
            write(&out.join("config.txt"), &cfg.to_text())?;
            let mut w = csv::Writer::from_path(out.join("epochs.csv"))?;
            w.write_record(["epoch", "lr", "train_loss", "val_fsc", "val_iou", "wall_secs"])?;
            for e in &t.record.epochs {
                w.write_record([
                    e.epoch.to_string(),
                    e.lr.to_string(),
                    e.train_loss.to_string(),
                    e.val.fsc.to_string(),
                    e.val.iou.to_string(),
                    e.wall_secs.to_string(),
                ])?;
            }
            w.flush().map_err(|e| RunError::io(out.join("epochs.csv"), e))?;
            println!(
                "best epoch {} of {}: val fsc {:.4}; checkpoint {}",
                t.record.best_epoch,
                t.record.epochs.len(),
                t.record.best_val_fsc,
                ckpt_path.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let ckpt = io::load_checkpoint(&checkpoint)?;
            let (cfg, model, store) = harness::restore(&ckpt)?;
            let data = match &common.data_root {
                Some(root) => loaded(root)?,
                None => harness::synthetic_sets(&cfg)?.1,
            };
            let report = harness::evaluate(&model, &store, &data)?;
            let out = common.out()?;
            write(&out.join("metrics.txt"), &report.table())?;
            write(&out.join("metrics.kv"), &kv_text(report.to_pairs()))?;
            let mut w = csv::Writer::from_path(out.join("per_frame.csv"))?;
            w.write_record(["frame", "acc", "pre", "rec", "fsc", "iou"])?;
            for f in &report.per_frame {
                let m = &f.metrics;
                let mut rec = vec![f.index.to_string()];
                rec.extend([m.acc, m.pre, m.rec, m.fsc, m.iou].iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| RunError::io(out.join("per_frame.csv"), e))?;
            print!("{}", report.table());
        }
        Command::Ablate { common, grid, seeds } => {
            let cfg = common.config()?;
            cfg.validate()?;
            let cells = named_grid(&grid).ok_or_else(|| {
                RunError::Config(format!("unknown grid '{grid}', expected one of {:?}", harness::grid_names()))
            })?;
            let (train, val) = datasets(&common, &cfg)?;
            let seed_list: Vec<u64> = (0..seeds.max(1)).map(|i| cfg.train.seed + i).collect();
            let rows = harness::ablate(&cfg, &cells, &seed_list, &train, &val)?;
            let table = harness::ablation_table(&rows);
            let out = common.out()?;
            write(&out.join(format!("ablation-{grid}.txt")), &table)?;
            let mut w = csv::Writer::from_path(out.join(format!("ablation-{grid}.csv")))?;
            w.write_record(["cell", "seed", "val_fsc", "epochs", "params", "decoder_params", "decoder_macs", "error"])?;
            for r in &rows {
                let rec = match &r.outcome {
                    Ok(s) => [
                        r.label.clone(),
                        r.seed.to_string(),
                        s.best_val_fsc.to_string(),
                        s.epochs.to_string(),
                        s.params.to_string(),
                        s.decoder_cost.params.to_string(),
                        s.decoder_cost.flops.to_string(),
                        String::new(),
                    ],
                    Err(e) => [
                        r.label.clone(),
                        r.seed.to_string(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        e.clone(),
                    ],
                };
                w.write_record(rec)?;
            }
            w.flush().map_err(|e| RunError::io(out, e))?;
            print!("{table}");
        }
        Command::Weights { common, stem } => {
            let cfg = common.config()?;
            let (name, sample) = match &common.data_root {
                Some(root) => {
                    let frames = io::load_dataset(root)?;
                    let found = match &stem {
                        Some(s) => frames.into_iter().find(|(n, _)| n == s),
                        None => frames.into_iter().next(),
                    };
                    found.ok_or_else(|| RunError::Config(format!("no usable frame in {}", root.display())))?
                }
                None => {
                    let d = &cfg.data;
                    ("synthetic".to_owned(), generate(d.split, 1, d.width, d.height, d.seed)?.remove(0))
                }
            };
            let loss = &cfg.train.loss;
            let (w, h) = (sample.width(), sample.height());
            let ws = semantic_transition_weights(&sample.labels, loss.radius)?;
            let mask: Vec<bool> = sample
                .labels
                .freespace_mask()
                .iter()
                .zip(sample.depth.valid_mask())
                .map(|(&a, b)| a && b)
                .collect();
            let (y_hat, wd) = depth_weights_from_freespace(
                &PixelSet::from_mask(&mask, w),
                &sample.depth,
                &sample.intrinsics,
                loss.height_estimator,
                &loss.depth_weights,
            )?;
            let out = common.out()?;
            io::write_unit_gray(&out.join(format!("{name}_omega_s.png")), w, h, ws.values())?;
            io::write_unit_gray(&out.join(format!("{name}_omega_d.png")), w, h, wd.values())?;
            for (tag, m) in [("omega_s", &ws), ("omega_d", &wd)] {
                let (lo, mean, hi) = m.stats();
                println!("{name} {tag}: min {lo:.6} mean {mean:.6} max {hi:.6}");
            }
            println!("{name} camera height {y_hat:.6}");
        }
        Command::DecoderStats { common, decoder } => {
            let cfg = common.config()?;
            let m = &cfg.train.model;
            let topologies = match decoder {
                Some(d) => vec![Topology::parse(&d).ok_or_else(|| RunError::Config(format!("unknown decoder '{d}'")))?],
                None => Topology::ALL.to_vec(),
            };
            let (h0, w0) = (cfg.data.height / m.patch, cfg.data.width / m.patch);
            let mut table = format!("decoder    nodes  edges  params      macs   (level 0 at {w0}x{h0})\n");
            let mut kv = Vec::new();
            for t in topologies {
                let g = build_topology_with(t, m.levels(), &m.channels, m.inter_scale)?;
                let c = cost_report(&g, h0, w0);
                table.push_str(&format!(
                    "{:<10} {:>5}  {:>5}  {:>10}  {:>12}\n",
                    t.name(),
                    g.nodes().len(),
                    g.edges().len(),
                    c.params,
                    c.flops
                ));
                kv.push((format!("{}.params", t.name()), c.params));
                kv.push((format!("{}.macs", t.name()), c.flops));
                kv.push((format!("{}.edges", t.name()), g.edges().len() as u64));
            }
            let out = common.out()?;
            write(&out.join("decoder_stats.txt"), &table)?;
            write(&out.join("decoder_stats.kv"), &kv_text(kv))?;
            print!("{table}");
        }
        Command::Render { common, count } => {
            let cfg = common.config()?;
            let d = &cfg.data;
            let frames = generate(d.split, count, d.width, d.height, d.seed)?;
            let out = common.out()?;
            for (i, s) in frames.iter().enumerate() {
                io::save_sample(out, &format!("{i:06}"), s)?;
            }
            info!("rendered {count} frames");
            println!("wrote {count} frames to {}", out.display());
        }
    }
    Ok(())
}
