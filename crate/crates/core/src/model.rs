//! End-to-end network: two convolutional towers (RGB and surface normals),
//! one fusion block per stage and a skip-connection decoder.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Graph, Mode, ParamStore, Var};
use crate::data::Sample;
use crate::decoder::{build_topology_with, Decoder, InterScaleColumns, Topology};
use crate::error::{contract, Result};
use crate::fusion::{FusionSwitches, Hf2b, MIN_ATROUS_SIZE};
use crate::geometry::estimate_normals;
use crate::losses::ProbabilityMap;
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output channels of each encoder stage; its length is the number of
    /// stages and decoder levels.
    pub channels: Vec<usize>,
    /// Stride of the first stage; later stages halve the resolution.
    pub patch: usize,
    pub decoder: Topology,
    pub inter_scale: InterScaleColumns,
    pub switches: FusionSwitches,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: alloc::vec![16, 32, 64, 128],
            patch: 4,
            decoder: Topology::RoadSegV2,
            inter_scale: InterScaleColumns::Final,
            switches: FusionSwitches::full(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Total downsampling of the deepest stage.
    pub fn stride(&self) -> usize {
        self.patch << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() < 2 {
            return Err(contract!("the model needs at least 2 stages"));
        }
        if self.channels.contains(&0) {
            return Err(contract!("zero-width stage in {:?}", self.channels));
        }
        if self.patch == 0 {
            return Err(contract!("patch stride must be positive"));
        }
        Ok(())
    }

    /// Rejects input sizes the network cannot process.
    pub fn check_input(&self, width: usize, height: usize) -> Result<()> {
        let s = self.stride();
        if width % s != 0 || height % s != 0 || width == 0 || height == 0 {
            return Err(contract!(
                "input {}x{} must be a positive multiple of {} in both dimensions",
                width,
                height,
                s
            ));
        }
        let uses_atrous = self.switches.atrous && !self.switches.is_baseline();
        if uses_atrous && (width / s < MIN_ATROUS_SIZE || height / s < MIN_ATROUS_SIZE) {
            return Err(contract!(
                "input {}x{} gives a {}x{} deepest stage; atrous aggregation needs {} or more",
                width,
                height,
                width / s,
                height / s,
                MIN_ATROUS_SIZE
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub rgb_tower: Vec<ConvBnRelu>,
    pub normal_tower: Vec<ConvBnRelu>,
    pub fusion: Vec<Hf2b>,
    pub decoder: Decoder,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Full-resolution logits `[n, 1, H, W]`.
    pub logits: Var,
    pub probabilities: Var,
}

fn tower(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Vec<ConvBnRelu> {
    let mut cin = 3;
    cfg.channels
        .iter()
        .enumerate()
        .map(|(s, &c)| {
            let stride = if s == 0 { cfg.patch } else { 2 };
            let conv = Conv2d::new(
                store,
                rng,
                &format!("{name}.stage{s}"),
                cin,
                c,
                3,
                ConvSpec::same(3).with_stride(stride),
                true,
            );
            cin = c;
            ConvBnRelu {
                conv,
                bn: BatchNorm2d::new(store, &format!("{name}.stage{s}.bn"), c),
            }
        })
        .collect()
}

impl Model {
    /// Builds the architecture and its seeded initial parameters.
    pub fn new(config: ModelConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rgb_tower = tower(store, &mut rng, "enc.rgb", &config);
        let normal_tower = tower(store, &mut rng, "enc.normal", &config);
        let fusion = config
            .channels
            .iter()
            .enumerate()
            .map(|(s, &c)| Hf2b::new(store, &mut rng, &format!("fuse{s}"), c, config.switches))
            .collect();
        let graph = build_topology_with(config.decoder, config.levels(), &config.channels, config.inter_scale)?;
        let decoder = Decoder::new(store, &mut rng, "dec", graph);
        Ok(Self {
            config,
            rgb_tower,
            normal_tower,
            fusion,
            decoder,
        })
    }

    /// Fresh architecture plus store.
    pub fn init(config: ModelConfig, f32_storage: bool) -> Result<(Self, ParamStore)> {
        let mut store = if f32_storage {
            ParamStore::with_f32_storage()
        } else {
            ParamStore::new()
        };
        let model = Self::new(config, &mut store)?;
        Ok((model, store))
    }

    /// Fused features per stage, finest first.
    pub fn encode(&self, g: &mut Graph, rgb: Var, normals: Var) -> Result<Vec<Var>> {
        let [_, c, h, w] = g.shape(rgb);
        if c != 3 || g.shape(normals) != g.shape(rgb) {
            return Err(contract!(
                "expected two [n, 3, H, W] inputs, got {:?} and {:?}",
                g.shape(rgb),
                g.shape(normals)
            ));
        }
        self.config.check_input(w, h)?;
        let (mut r, mut n) = (rgb, normals);
        let mut fused = Vec::with_capacity(self.config.levels());
        for s in 0..self.config.levels() {
            r = self.rgb_tower[s].forward(g, r)?;
            n = self.normal_tower[s].forward(g, n)?;
            let out = self.fusion[s].forward(g, r, n)?;
            fused.push(out.fused);
            r = out.next_rgb;
            n = out.next_normal;
        }
        Ok(fused)
    }

    pub fn forward(&self, g: &mut Graph, rgb: Var, normals: Var) -> Result<ForwardOutput> {
        let fused = self.encode(g, rgb, normals)?;
        let coarse = self.decoder.forward_logits(g, &fused)?;
        let logits = g.upsample(coarse, self.config.patch)?;
        let probabilities = g.sigmoid(logits);
        Ok(ForwardOutput { logits, probabilities })
    }

    /// Probabilities for a batch of samples.
    pub fn predict_batch(&self, store: &ParamStore, samples: &[&Sample], mode: Mode) -> Result<Vec<ProbabilityMap>> {
        let (rgb, normals) = prepare_batch(samples)?;
        let mut g = Graph::new(store, mode);
        let r = g.input(rgb);
        let n = g.input(normals);
        let out = self.forward(&mut g, r, n)?;
        split_probabilities(g.value(out.probabilities))
    }

    pub fn predict(&self, store: &ParamStore, sample: &Sample, mode: Mode) -> Result<ProbabilityMap> {
        Ok(self.predict_batch(store, &[sample], mode)?.remove(0))
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.trainable_scalars()
    }
}

/// Surface-normal image of one sample, `[1, 3, H, W]` in `[0, 1]`.
pub fn normal_image(sample: &Sample) -> Result<Tensor> {
    let normals = estimate_normals(&sample.depth, &sample.intrinsics)?;
    Tensor::from_vec([1, 3, sample.height(), sample.width()], normals.to_image())
}

/// Stacked RGB and normal images.
pub fn prepare_batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(contract!("empty batch"));
    }
    let mut rgb = Vec::with_capacity(samples.len());
    let mut normals = Vec::with_capacity(samples.len());
    for s in samples {
        s.check()?;
        rgb.push(s.rgb.clone());
        normals.push(normal_image(s)?);
    }
    Ok((Tensor::stack(&rgb)?, Tensor::stack(&normals)?))
}

pub fn split_probabilities(t: &Tensor) -> Result<Vec<ProbabilityMap>> {
    let [n, _, h, w] = t.shape();
    (0..n).map(|i| ProbabilityMap::new(w, h, t.plane(i, 0).to_vec())).collect()
}
