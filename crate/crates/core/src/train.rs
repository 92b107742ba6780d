//! One optimisation step of the segmentation network.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Mode, ParamStore};
use crate::data::Sample;
use crate::error::{contract, Error, Result};
use crate::losses::{total_loss, LossConfig, ProbabilityMap};
use crate::model::{normal_image, Model};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Network inputs for one frame with the normal image computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub sample: Sample,
    pub normals: Tensor,
}

impl Prepared {
    pub fn new(sample: Sample) -> Result<Self> {
        sample.check()?;
        let normals = normal_image(&sample)?;
        Ok(Self { sample, normals })
    }
}

pub fn prepare_all(samples: Vec<Sample>) -> Result<Vec<Prepared>> {
    samples.into_iter().map(Prepared::new).collect()
}

/// Loss terms of one step, averaged over the frames of the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub bce: f64,
    pub sta: f64,
    pub dia: f64,
    /// Frames whose depth term was dropped for lack of predicted freespace.
    pub depth_skipped: usize,
}

/// Forward pass over `frames` in the given mode; returns the probability
/// tensor `[n, 1, H, W]`.
pub fn forward_batch(model: &Model, store: &ParamStore, frames: &[&Prepared], mode: Mode) -> Result<Tensor> {
    let (rgb, normals) = stack(frames)?;
    let mut g = Graph::new(store, mode);
    let r = g.input(rgb);
    let n = g.input(normals);
    let out = model.forward(&mut g, r, n)?;
    Ok(g.value(out.probabilities).clone())
}

fn stack(frames: &[&Prepared]) -> Result<(Tensor, Tensor)> {
    if frames.is_empty() {
        return Err(contract!("empty batch"));
    }
    let rgb: Vec<Tensor> = frames.iter().map(|f| f.sample.rgb.clone()).collect();
    let normals: Vec<Tensor> = frames.iter().map(|f| f.normals.clone()).collect();
    Ok((Tensor::stack(&rgb)?, Tensor::stack(&normals)?))
}

/// Forward, loss, backward and one Adam update. `batch_index` only labels
/// the error raised when the loss or a gradient stops being finite.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    frames: &[&Prepared],
    loss: &LossConfig,
    lr: f64,
    batch_index: usize,
) -> Result<StepStats> {
    let (rgb, normals) = stack(frames)?;
    let n = frames.len();
    let (grads, updates, stats) = {
        let mut g = Graph::new(store, Mode::Train);
        let r = g.input(rgb);
        let nm = g.input(normals);
        let out = model.forward(&mut g, r, nm).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("{m} in batch {batch_index}")),
            other => other,
        })?;
        let probs = g.value(out.probabilities);
        if !probs.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite prediction in batch {batch_index}"
            )));
        }
        let [_, _, h, w] = probs.shape();
        let mut seed = Tensor::zeros(probs.shape());
        let mut stats = StepStats::default();
        for (i, f) in frames.iter().enumerate() {
            let p = ProbabilityMap::new(w, h, probs.plane(i, 0).to_vec())?;
            let s = &f.sample;
            let l = total_loss(&p, &s.labels, &s.depth, &s.intrinsics, loss)?;
            if !l.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {} in batch {batch_index}, frame {i}",
                    l.total
                )));
            }
            stats.loss += l.total / n as f64;
            stats.bce += l.bce / n as f64;
            stats.sta += l.sta / n as f64;
            stats.dia += l.dia / n as f64;
            stats.depth_skipped += l.depth_term_skipped as usize;
            let dz = seed.plane_mut(i, 0);
            for ((d, &gp), &pv) in dz.iter_mut().zip(&l.grad).zip(p.values()) {
                *d = gp * pv * (1.0 - pv) / n as f64;
            }
        }
        let grads = g.backward(out.logits, seed)?;
        (grads, g.take_running_updates(), stats)
    };
    for (id, t) in grads.params() {
        if !t.all_finite() {
            return Err(Error::Numerical(format!(
                "gradient of {} is not finite in batch {batch_index}",
                store.entry(id).name
            )));
        }
    }
    adam.step(store, &grads, lr)?;
    store.apply_running_updates(updates);
    Ok(stats)
}
