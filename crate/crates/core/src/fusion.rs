//! Heterogeneous feature fusion block (HF²B).
//!
//! Dataflow for one RGB / normal feature pair `F^R, F^N` of shape `C×H×W`:
//!
//! ```text
//! F_S = [f_s(F^R); f_s(F^N)]           spatial attention (shared weights)
//! F_A = [f_a(F^R); f_a(F^N)]           atrous aggregation (shared weights)
//! F_C = f_c(F_A)                       channel gates over 2C channels
//! hS  = h(σ(F_S)),  hC = h(σ(F_C))     contrast descriptor, C channels
//! A   = σ(σ(S Cᵀ / √HW) S)             S, C = hS, hC as C×HW matrices
//! F_R^R = w_r(F^R ⊙ A),  F_R^N = w_n(F^N ⊙ A)
//! F^H = w_a([F_R^R; F_R^N])
//! ```
//!
//! Every stage can be switched off through [`FusionSwitches`]; with all of
//! them off the block reduces to the element-wise sum `F^R + F^N`.

use alloc::format;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Graph, Mode, PadMode, ParamStore, Var};
use crate::error::{contract, Error, Result};
use crate::math;
use crate::nn::{BatchNorm2d, Conv2d};
use crate::tensor::Tensor;

/// Smallest spatial size accepted by the atrous stack.
pub const MIN_ATROUS_SIZE: usize = 4;
pub const ATROUS_DILATIONS: [usize; 3] = [1, 2, 4];
pub const SPATIAL_KERNEL: usize = 7;
/// Bottleneck reduction of the channel gates.
pub const CHANNEL_REDUCTION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionSwitches {
    pub spatial: bool,
    pub channel: bool,
    pub atrous: bool,
    pub hfcd: bool,
    pub awfr: bool,
    /// Forces plain summation regardless of the other switches.
    pub baseline_sum: bool,
}

impl Default for FusionSwitches {
    fn default() -> Self {
        Self::full()
    }
}

impl FusionSwitches {
    pub fn full() -> Self {
        Self {
            spatial: true,
            channel: true,
            atrous: true,
            hfcd: true,
            awfr: true,
            baseline_sum: false,
        }
    }

    pub fn baseline() -> Self {
        Self {
            baseline_sum: true,
            ..Self::full()
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.baseline_sum || !(self.spatial || self.channel || self.atrous || self.hfcd || self.awfr)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub fused: Var,
    pub next_rgb: Var,
    pub next_normal: Var,
    /// `None` in baseline mode.
    pub affinity: Option<Var>,
}

/// Learnable state of one fusion block.
#[derive(Clone, Debug, PartialEq)]
pub struct Hf2b {
    pub channels: usize,
    pub switches: FusionSwitches,
    pub spatial: Conv2d,
    pub atrous: [Conv2d; 3],
    pub atrous_bn: BatchNorm2d,
    pub gate_reduce: Conv2d,
    pub gate_expand: Conv2d,
    pub h_prod: Conv2d,
    pub h_prod_bn: BatchNorm2d,
    pub h_diff: Conv2d,
    pub h_diff_bn: BatchNorm2d,
    pub h_proj: Conv2d,
    pub w_r: Conv2d,
    pub w_n: Conv2d,
    pub w_a: Conv2d,
}

impl Hf2b {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        switches: FusionSwitches,
    ) -> Self {
        let c = channels;
        let hidden = (2 * c / CHANNEL_REDUCTION).max(1);
        let one = ConvSpec::same(1);
        let three = ConvSpec::same(3);
        let atrous = ATROUS_DILATIONS.map(|d| {
            Conv2d::new(
                store,
                rng,
                &format!("{name}.atrous.d{d}"),
                c,
                c,
                3,
                ConvSpec::dilated(3, d, PadMode::Symmetric),
                true,
            )
        });
        Self {
            channels,
            switches,
            spatial: Conv2d::new(
                store,
                rng,
                &format!("{name}.spatial"),
                2,
                1,
                SPATIAL_KERNEL,
                ConvSpec::same(SPATIAL_KERNEL),
                true,
            ),
            atrous,
            atrous_bn: BatchNorm2d::new(store, &format!("{name}.atrous.bn"), c),
            gate_reduce: Conv2d::new(store, rng, &format!("{name}.gate.reduce"), 2 * c, hidden, 1, one, true),
            gate_expand: Conv2d::new(store, rng, &format!("{name}.gate.expand"), hidden, 2 * c, 1, one, true),
            h_prod: Conv2d::new(store, rng, &format!("{name}.h.prod"), c, c, 3, three, true),
            h_prod_bn: BatchNorm2d::new(store, &format!("{name}.h.prod.bn"), c),
            h_diff: Conv2d::new(store, rng, &format!("{name}.h.diff"), c, c, 3, three, true),
            h_diff_bn: BatchNorm2d::new(store, &format!("{name}.h.diff.bn"), c),
            h_proj: Conv2d::new(store, rng, &format!("{name}.h.proj"), 2 * c, c, 1, one, true),
            w_r: Conv2d::new(store, rng, &format!("{name}.w_r"), c, c, 1, one, true),
            w_n: Conv2d::new(store, rng, &format!("{name}.w_n"), c, c, 1, one, true),
            w_a: Conv2d::new(store, rng, &format!("{name}.w_a"), 2 * c, c, 1, one, true),
        }
    }

    fn check_features(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s[1] != self.channels || s[2] == 0 || s[3] == 0 {
            return Err(contract!("fusion block expects {} channels, got {:?}", self.channels, s));
        }
        Ok(())
    }

    fn check_pair(&self, g: &Graph, rgb: Var, normal: Var) -> Result<()> {
        self.check_features(g, rgb)?;
        if g.shape(rgb) != g.shape(normal) {
            return Err(contract!(
                "feature pair shapes differ: {:?} vs {:?}",
                g.shape(rgb),
                g.shape(normal)
            ));
        }
        Ok(())
    }

    /// Spatial mask `σ(conv7×7([mean_c x; max_c x]))` of shape `[n,1,H,W]`.
    pub fn spatial_mask(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mean = g.channel_mean(x);
        let max = g.channel_max(x);
        let stacked = g.concat(&[mean, max])?;
        let logits = self.spatial.forward(g, stacked)?;
        Ok(g.sigmoid(logits))
    }

    /// `f_s`: one modality reweighted by its spatial mask.
    pub fn spatial_attention(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_features(g, x)?;
        let mask = self.spatial_mask(g, x)?;
        g.mul_spatial(x, mask)
    }

    /// `f_a`: summed dilated 3×3 convolutions, then batchnorm and ReLU.
    pub fn atrous_aggregate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_features(g, x)?;
        let [_, _, h, w] = g.shape(x);
        if h < MIN_ATROUS_SIZE || w < MIN_ATROUS_SIZE {
            return Err(contract!(
                "atrous aggregation needs at least {m}x{m} features, got {}x{}",
                w,
                h,
                m = MIN_ATROUS_SIZE
            ));
        }
        let mut acc = self.atrous[0].forward(g, x)?;
        for conv in &self.atrous[1..] {
            let y = conv.forward(g, x)?;
            acc = g.add(acc, y)?;
        }
        let y = self.atrous_bn.forward(g, acc)?;
        Ok(g.relu(y))
    }

    /// Per-channel gates in `(0, 1)` for a `2C`-channel input.
    pub fn channel_gates(&self, g: &mut Graph, fa: Var) -> Result<Var> {
        let [_, c, _, _] = g.shape(fa);
        if c != 2 * self.channels {
            return Err(contract!("channel attention expects {} channels, got {}", 2 * self.channels, c));
        }
        let pooled = g.global_avg_pool(fa);
        let z = self.gate_reduce.forward(g, pooled)?;
        let z = g.relu(z);
        let z = self.gate_expand.forward(g, z)?;
        Ok(g.sigmoid(z))
    }

    /// `f_c`: channel planes of `F_A` scaled by their gates.
    pub fn channel_attention(&self, g: &mut Graph, fa: Var) -> Result<Var> {
        let gates = self.channel_gates(g, fa)?;
        g.mul_channel(fa, gates)
    }

    /// `h`: contrast descriptor of a sigmoid-normalised `2C` map, projected
    /// to `C` channels in `(0, 1)`.
    pub fn contrast(&self, g: &mut Graph, normalized: Var) -> Result<Var> {
        let c = self.channels;
        let s = g.shape(normalized);
        if s[1] != 2 * c {
            return Err(contract!("contrast expects {} channels, got {}", 2 * c, s[1]));
        }
        if let Some(v) = g
            .value(normalized)
            .data()
            .iter()
            .find(|v| !(**v > -1e-6 && **v < 1.0 + 1e-6))
        {
            if v.is_nan() {
                return Err(Error::Numerical("contrast input contains NaN".into()));
            }
            return Err(contract!("contrast input {} is outside (0, 1); is the sigmoid missing?", v));
        }
        let r = g.slice_channels(normalized, 0, c)?;
        let n = g.slice_channels(normalized, c, c)?;
        if !self.switches.hfcd {
            let sum = g.add(r, n)?;
            return Ok(g.scale(sum, 0.5));
        }
        let prod = g.mul(r, n)?;
        let diff = g.sub(r, n)?;
        let p = self.h_prod.forward(g, prod)?;
        let p = self.h_prod_bn.forward(g, p)?;
        let p = g.sigmoid(p);
        let d = self.h_diff.forward(g, diff)?;
        let d = self.h_diff_bn.forward(g, d)?;
        let d = g.sigmoid(d);
        let both = g.concat(&[p, d])?;
        let z = self.h_proj.forward(g, both)?;
        Ok(g.sigmoid(z))
    }

    /// Affinity volume from the two descriptors; their mean when the
    /// recalibrator's affinity is switched off.
    pub fn affinity(&self, g: &mut Graph, hs: Var, hc: Var) -> Result<Var> {
        if self.switches.awfr {
            affinity(g, hs, hc)
        } else {
            let sum = g.add(hs, hc)?;
            Ok(g.scale(sum, 0.5))
        }
    }

    /// Returns `(F^H, F_R^R, F_R^N)`.
    pub fn recalibrate(&self, g: &mut Graph, rgb: Var, normal: Var, a: Var) -> Result<(Var, Var, Var)> {
        self.check_pair(g, rgb, normal)?;
        if g.shape(a) != g.shape(rgb) {
            return Err(contract!("affinity {:?} does not match features {:?}", g.shape(a), g.shape(rgb)));
        }
        let ra = g.mul(rgb, a)?;
        let na = g.mul(normal, a)?;
        let rr = self.w_r.forward(g, ra)?;
        let rn = self.w_n.forward(g, na)?;
        let both = g.concat(&[rr, rn])?;
        let fused = self.w_a.forward(g, both)?;
        Ok((fused, rr, rn))
    }

    pub fn forward(&self, g: &mut Graph, rgb: Var, normal: Var) -> Result<FusionOutput> {
        self.check_pair(g, rgb, normal)?;
        if self.switches.is_baseline() {
            let fused = g.add(rgb, normal)?;
            return Ok(FusionOutput {
                fused,
                next_rgb: fused,
                next_normal: normal,
                affinity: None,
            });
        }
        let sw = self.switches;
        let (sr, sn) = if sw.spatial {
            (self.spatial_attention(g, rgb)?, self.spatial_attention(g, normal)?)
        } else {
            (rgb, normal)
        };
        let fs = g.concat(&[sr, sn])?;
        let (ar, an) = if sw.atrous {
            (self.atrous_aggregate(g, rgb)?, self.atrous_aggregate(g, normal)?)
        } else {
            (rgb, normal)
        };
        let fa = g.concat(&[ar, an])?;
        let fc = if sw.channel { self.channel_attention(g, fa)? } else { fa };
        let ts = g.sigmoid(fs);
        let tc = g.sigmoid(fc);
        let hs = self.contrast(g, ts)?;
        let hc = self.contrast(g, tc)?;
        let a = self.affinity(g, hs, hc)?;
        let (fused, next_rgb, next_normal) = self.recalibrate(g, rgb, normal, a)?;
        Ok(FusionOutput {
            fused,
            next_rgb,
            next_normal,
            affinity: Some(a),
        })
    }

    /// Runs the block on plain tensors with batch statistics.
    pub fn apply(&self, store: &ParamStore, rgb: &Tensor, normal: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new(store, Mode::Train);
        let r = g.input(rgb.clone());
        let n = g.input(normal.clone());
        let out = self.forward(&mut g, r, n)?;
        Ok((
            g.value(out.fused).clone(),
            g.value(out.next_rgb).clone(),
            g.value(out.next_normal).clone(),
        ))
    }

    pub fn param_count(&self) -> usize {
        let convs = [
            &self.spatial,
            &self.atrous[0],
            &self.atrous[1],
            &self.atrous[2],
            &self.gate_reduce,
            &self.gate_expand,
            &self.h_prod,
            &self.h_diff,
            &self.h_proj,
            &self.w_r,
            &self.w_n,
            &self.w_a,
        ];
        convs.iter().map(|c| c.param_count()).sum::<usize>() + 3 * 2 * self.channels
    }
}

/// `A = σ(G S)` with `G = σ(S Cᵀ / √(HW))`, where `S` and `C` are the two
/// descriptors read as `C × HW` matrices.
pub fn affinity(g: &mut Graph, hs: Var, hc: Var) -> Result<Var> {
    let s = g.shape(hs);
    if s != g.shape(hc) {
        return Err(contract!("descriptor shapes differ: {:?} vs {:?}", s, g.shape(hc)));
    }
    let scale = 1.0 / math::sqrt((s[2] * s[3]) as f64);
    let gram = g.gram(hs, hc, scale)?;
    let gram = g.sigmoid(gram);
    let mixed = g.mix_channels(gram, hs)?;
    Ok(g.sigmoid(mixed))
}

/// [`affinity`] on plain tensors.
pub fn affinity_volume(hs: &Tensor, hc: &Tensor) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let a = g.input(hs.clone());
    let b = g.input(hc.clone());
    let out = affinity(&mut g, a, b)?;
    Ok(g.value(out).clone())
}
