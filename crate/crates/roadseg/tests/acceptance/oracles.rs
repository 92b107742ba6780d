//! Independent reference checks for every hand-derived example: naive
//! re-implementations, hand matrix products, enumeration and finite
//! differences, all driven through the public API.

use std::collections::BTreeSet;
use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadseg_core::autograd::{ConvSpec, Graph, Mode, PadMode, ParamStore, Var};
use roadseg_core::data::{augment, generate, random_scene, render, Aabb, AugmentOp, Ramp, SceneSpec, Split};
use roadseg_core::decoder::{build_topology, Decoder, EdgeKind, Node, Topology};
use roadseg_core::fusion::{affinity_volume, FusionSwitches, Hf2b};
use roadseg_core::geometry::{back_project, camera_height, depth_inconsistency, estimate_normals, PixelSet};
use roadseg_core::losses::{bce, total_loss, transition_weight, weighted_bce, LabelImage, LossConfig, ProbabilityMap, WeightMap, WeightSource};
use roadseg_core::metrics::{confusion, curve_metrics, point_metrics, threshold_grid, ConfusionCounts};
use roadseg_core::model::{prepare_batch, Model, ModelConfig};
use roadseg_core::nn::Conv2d;
use roadseg_core::Tensor;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)*));
        }
    };
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// Feature maps as [channel][row][column].
type Planes = Vec<Vec<Vec<f64>>>;

fn planes(t: &Tensor) -> Planes {
    let [_, c, h, w] = t.shape();
    (0..c)
        .map(|ch| (0..h).map(|y| (0..w).map(|x| t.at(0, ch, y, x)).collect()).collect())
        .collect()
}

fn max_diff(a: &Tensor, b: &Planes) -> f64 {
    let p = planes(a);
    p.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

fn naive_conv(x: &Planes, w: &Tensor, b: Option<&Tensor>, dil: usize, symmetric: bool) -> Planes {
    let [co, ci, k, _] = w.shape();
    let (h, wd) = (x[0].len(), x[0][0].len());
    let pad = (dil * (k / 2)) as isize;
    let mut out = vec![vec![vec![0.0; wd]; h]; co];
    for (o, plane) in out.iter_mut().enumerate() {
        for (y, row) in plane.iter_mut().enumerate() {
            for (xx, cell) in row.iter_mut().enumerate() {
                let mut s = b.map_or(0.0, |b| b.data()[o]);
                for (i, xi) in x.iter().enumerate().take(ci) {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + (ky * dil) as isize - pad;
                            let sx = xx as isize + (kx * dil) as isize - pad;
                            let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd;
                            let v = if inside {
                                xi[sy as usize][sx as usize]
                            } else if symmetric {
                                xi[reflect(sy, h)][reflect(sx, wd)]
                            } else {
                                0.0
                            };
                            s += w.at(o, i, ky, kx) * v;
                        }
                    }
                }
                *cell = s;
            }
        }
    }
    out
}

fn naive_bn(x: &Planes) -> Planes {
    x.iter()
        .map(|p| {
            let vals: Vec<f64> = p.iter().flatten().copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            p.iter().map(|r| r.iter().map(|a| (a - m) / (v + 1e-5).sqrt()).collect()).collect()
        })
        .collect()
}

fn map(x: &Planes, f: impl Fn(f64) -> f64) -> Planes {
    x.iter().map(|p| p.iter().map(|r| r.iter().map(|&a| f(a)).collect()).collect()).collect()
}

fn zip(a: &Planes, b: &Planes, f: impl Fn(f64, f64) -> f64) -> Planes {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(&x, &y)| f(x, y)).collect()).collect())
        .collect()
}

fn cat(a: &Planes, b: &Planes) -> Planes {
    a.iter().chain(b.iter()).cloned().collect()
}

fn naive_affinity(s: &Planes, c: &Planes) -> Planes {
    let ch = s.len();
    let (h, w) = (s[0].len(), s[0][0].len());
    let flat = |p: &Vec<Vec<f64>>| p.iter().flatten().copied().collect::<Vec<f64>>();
    let sm: Vec<Vec<f64>> = s.iter().map(flat).collect();
    let cm: Vec<Vec<f64>> = c.iter().map(flat).collect();
    let mut g = vec![vec![0.0; ch]; ch];
    for i in 0..ch {
        for j in 0..ch {
            let dot: f64 = (0..h * w).map(|q| sm[i][q] * cm[j][q]).sum();
            g[i][j] = sig(dot / ((h * w) as f64).sqrt());
        }
    }
    (0..ch)
        .map(|i| {
            (0..h)
                .map(|y| (0..w).map(|x| sig((0..ch).map(|j| g[i][j] * sm[j][y * w + x]).sum())).collect())
                .collect()
        })
        .collect()
}

/// Straight-line fusion block evaluated with batch statistics.
struct FusionOracle<'a> {
    store: &'a ParamStore,
    b: &'a Hf2b,
}

impl FusionOracle<'_> {
    fn conv(&self, x: &Planes, c: &Conv2d) -> Planes {
        naive_conv(
            x,
            self.store.get(c.weight),
            c.bias.map(|b| self.store.get(b)),
            c.spec.dilation,
            c.spec.pad_mode == PadMode::Symmetric,
        )
    }

    fn f_s(&self, x: &Planes) -> Planes {
        let (h, w) = (x[0].len(), x[0][0].len());
        let mut mean = vec![vec![0.0; w]; h];
        let mut max = vec![vec![f64::NEG_INFINITY; w]; h];
        for p in x {
            for y in 0..h {
                for xx in 0..w {
                    mean[y][xx] += p[y][xx] / x.len() as f64;
                    max[y][xx] = max[y][xx].max(p[y][xx]);
                }
            }
        }
        let mask = map(&self.conv(&vec![mean, max], &self.b.spatial), sig);
        x.iter()
            .map(|p| p.iter().zip(&mask[0]).map(|(r, m)| r.iter().zip(m).map(|(a, b)| a * b).collect()).collect())
            .collect()
    }

    fn f_a(&self, x: &Planes) -> Planes {
        let mut acc = self.conv(x, &self.b.atrous[0]);
        for c in &self.b.atrous[1..] {
            acc = zip(&acc, &self.conv(x, c), |a, b| a + b);
        }
        map(&naive_bn(&acc), |a| a.max(0.0))
    }

    fn f_c(&self, x: &Planes) -> Planes {
        let pooled: Planes = x
            .iter()
            .map(|p| vec![vec![p.iter().flatten().sum::<f64>() / (p.len() * p[0].len()) as f64]])
            .collect();
        let z = map(&self.conv(&pooled, &self.b.gate_reduce), |a| a.max(0.0));
        let gates = map(&self.conv(&z, &self.b.gate_expand), sig);
        x.iter()
            .zip(&gates)
            .map(|(p, g)| p.iter().map(|r| r.iter().map(|a| a * g[0][0]).collect()).collect())
            .collect()
    }

    fn h(&self, t: &Planes) -> Planes {
        let c = self.b.channels;
        let (r, n) = (t[..c].to_vec(), t[c..].to_vec());
        let p = map(&naive_bn(&self.conv(&zip(&r, &n, |a, b| a * b), &self.b.h_prod)), sig);
        let d = map(&naive_bn(&self.conv(&zip(&r, &n, |a, b| a - b), &self.b.h_diff)), sig);
        map(&self.conv(&cat(&p, &d), &self.b.h_proj), sig)
    }

    fn recalibrate(&self, r: &Planes, n: &Planes, a: &Planes) -> Planes {
        let rr = self.conv(&zip(r, a, |x, y| x * y), &self.b.w_r);
        let rn = self.conv(&zip(n, a, |x, y| x * y), &self.b.w_n);
        self.conv(&cat(&rr, &rn), &self.b.w_a)
    }

    fn forward(&self, r: &Planes, n: &Planes) -> Planes {
        let fs = cat(&self.f_s(r), &self.f_s(n));
        let fc = self.f_c(&cat(&self.f_a(r), &self.f_a(n)));
        let hs = self.h(&map(&fs, sig));
        let hc = self.h(&map(&fc, sig));
        self.recalibrate(r, n, &naive_affinity(&hs, &hc))
    }
}

fn fusion_block(c: usize, seed: u64) -> (ParamStore, Hf2b) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Hf2b::new(&mut store, &mut rng, "f", c, FusionSwitches::full());
    (store, b)
}

fn eval<F>(store: &ParamStore, inputs: &[&Tensor], f: F) -> Tensor
where
    F: FnOnce(&mut Graph, &[Var]) -> roadseg_core::Result<Var>,
{
    let mut g = Graph::new(store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input((*t).clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).clone()
}

// Geometry.

fn back_projection_by_hand() -> Check {
    let k = roadseg_core::geometry::CameraIntrinsics::new(700.0, 700.0, 620.0, 380.0).unwrap();
    let p = back_project(640.0, 400.0, 10.0, &k).unwrap();
    // (640 - 620) * 10 / 700 = 2 / 7.
    let expect = [2.0 / 7.0, 2.0 / 7.0, 10.0];
    ensure!(p.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12), "{p:?}");
    Ok(())
}

fn ramp_normals() -> Check {
    let mut spec = SceneSpec::flat(96, 96, 1.65);
    spec.road_width = 100.0;
    let start = 1.0;
    spec.ramp = Some(Ramp {
        start_z: start,
        angle_deg: 30.0,
    });
    let s = render(&spec).unwrap();
    let normals = estimate_normals(&s.depth, &s.intrinsics).unwrap();
    let on_ramp = |u: usize, v: usize| {
        s.depth.is_valid(u, v) && back_project(u as f64, v as f64, s.depth.get(u, v), &s.intrinsics).unwrap()[2] > start + 0.3
    };
    let expect = [0.0, -(30f64.to_radians().cos()), -(30f64.to_radians().sin())];
    let mut checked = 0;
    for v in 1..95 {
        for u in 1..95 {
            let interior = (0..3).all(|dy| (0..3).all(|dx| on_ramp(u + dx - 1, v + dy - 1)));
            if !interior {
                continue;
            }
            let Some(n) = normals.get(u, v) else { continue };
            checked += 1;
            ensure!(
                n.iter().zip(expect).all(|(a, b)| (a - b).abs() <= 1e-2),
                "normal {n:?} at ({u}, {v})"
            );
        }
    }
    ensure!(checked > 100, "only {checked} ramp pixels");
    Ok(())
}

fn flat_ground_height() -> Check {
    let s = render(&SceneSpec::flat(64, 64, 1.65)).unwrap();
    let fs = PixelSet::from_mask(&s.labels.freespace_mask(), 64);
    let y = camera_height(&fs, &s.depth, &s.intrinsics).unwrap();
    ensure!((y - 1.65).abs() <= 1e-6, "estimated height {y}");
    Ok(())
}

fn depth_weight_half() -> Check {
    let w = depth_inconsistency(7.0 + LN_2, 7.0);
    ensure!((w - 0.5).abs() < 1e-12, "{w}");
    Ok(())
}

// Fusion.

fn spatial_attention_oracle() -> Check {
    let (store, b) = fusion_block(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random([1, 2, 4, 4], &mut rng);
    let got = eval(&store, &[&x], |g, v| b.spatial_attention(g, v[0]));
    let d = max_diff(&got, &FusionOracle { store: &store, b: &b }.f_s(&planes(&x)));
    ensure!(d < 1e-6, "max difference {d}");
    Ok(())
}

fn dilated_impulse_footprint() -> Check {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let conv = Conv2d::new(&mut store, &mut rng, "d2", 1, 1, 3, ConvSpec::dilated(3, 2, PadMode::Symmetric), false);
    let mut x = Tensor::zeros([1, 1, 9, 9]);
    x.set(0, 0, 4, 4, 1.0);
    let got = eval(&store, &[&x], |g, v| conv.forward(g, v[0]));
    let w = store.get(conv.weight);
    // Brute-force correlation over every output position.
    let mut nonzero = 0;
    for y in 0..9usize {
        for xx in 0..9usize {
            let mut s = 0.0;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let (sy, sx) = (y as isize + 2 * ky as isize - 2, xx as isize + 2 * kx as isize - 2);
                    if (sy, sx) == (4, 4) {
                        s += w.at(0, 0, ky, kx);
                    }
                }
            }
            nonzero += (s != 0.0) as usize;
            ensure!((got.at(0, 0, y, xx) - s).abs() < 1e-12, "({y}, {xx})");
        }
    }
    ensure!(nonzero == 9, "footprint has {nonzero} taps");
    Ok(())
}

fn channel_attention_oracle() -> Check {
    let (store, b) = fusion_block(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random([1, 4, 3, 3], &mut rng);
    let got = eval(&store, &[&x], |g, v| b.channel_attention(g, v[0]));
    let d = max_diff(&got, &FusionOracle { store: &store, b: &b }.f_c(&planes(&x)));
    ensure!(d < 1e-6, "max difference {d}");
    Ok(())
}

fn atrous_oracle() -> Check {
    let (store, b) = fusion_block(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random([1, 2, 6, 5], &mut rng);
    let got = eval(&store, &[&x], |g, v| b.atrous_aggregate(g, v[0]));
    let d = max_diff(&got, &FusionOracle { store: &store, b: &b }.f_a(&planes(&x)));
    ensure!(d < 1e-6, "max difference {d}");
    Ok(())
}

fn contrast_oracle() -> Check {
    let (store, b) = fusion_block(2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random([1, 4, 4, 4], &mut rng).map(sig);
    let got = eval(&store, &[&x], |g, v| b.contrast(g, v[0]));
    let d = max_diff(&got, &FusionOracle { store: &store, b: &b }.h(&planes(&x)));
    ensure!(d < 1e-6, "max difference {d}");
    Ok(())
}

fn affinity_hand_matmul() -> Check {
    // Rows of S are orthonormal, so S Sᵀ = I and G = σ(I / 2).
    let s = Tensor::from_vec([1, 2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let a = affinity_volume(&s, &s).unwrap();
    let on = sig(0.5);
    let expect = [sig(on), sig(0.5), 0.5, 0.5, sig(0.5), sig(on), 0.5, 0.5];
    ensure!(
        a.data().iter().zip(expect).all(|(x, y)| (x - y).abs() < 1e-12),
        "{:?}",
        a.data()
    );
    Ok(())
}

fn affinity_half_inputs_constant() -> Check {
    let s = Tensor::full([1, 3, 4, 5], 0.5);
    let a = affinity_volume(&s, &s).unwrap();
    for c in 0..3 {
        let p = a.plane(0, c);
        ensure!(p.iter().all(|&v| v == p[0]), "channel {c} varies");
    }
    Ok(())
}

fn affinity_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let s = random([1, 3, 4, 5], &mut rng).map(sig);
    let c = random([1, 3, 4, 5], &mut rng).map(sig);
    let d = max_diff(&affinity_volume(&s, &c).unwrap(), &naive_affinity(&planes(&s), &planes(&c)));
    ensure!(d < 1e-9, "max difference {d}");
    Ok(())
}

fn recalibrate_oracle() -> Check {
    let (store, b) = fusion_block(2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let r = random([1, 2, 4, 4], &mut rng);
    let n = random([1, 2, 4, 4], &mut rng);
    let a = random([1, 2, 4, 4], &mut rng).map(sig);
    let got = eval(&store, &[&r, &n, &a], |g, v| Ok(b.recalibrate(g, v[0], v[1], v[2])?.0));
    let want = FusionOracle { store: &store, b: &b }.recalibrate(&planes(&r), &planes(&n), &planes(&a));
    let d = max_diff(&got, &want);
    ensure!(d < 1e-6, "max difference {d}");
    Ok(())
}

fn fusion_block_oracle() -> Check {
    let (store, b) = fusion_block(2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let r = random([1, 2, 8, 8], &mut rng);
    let n = random([1, 2, 8, 8], &mut rng);
    let (fused, _, _) = b.apply(&store, &r, &n).unwrap();
    let d = max_diff(&fused, &FusionOracle { store: &store, b: &b }.forward(&planes(&r), &planes(&n)));
    ensure!(d < 1e-5, "max difference {d}");
    Ok(())
}

// Decoder.

type EdgeSet = BTreeSet<((usize, usize), (usize, usize))>;

fn edge_set(t: Topology, k: usize) -> EdgeSet {
    let g = build_topology(t, k, &vec![4; k]).unwrap();
    g.edges()
        .iter()
        .map(|e| ((e.src.row, e.src.col), (e.dst.row, e.dst.col)))
        .collect()
}

/// Every candidate pair of grid positions is tested against the connection
/// predicate of the topology.
fn enumerate(t: Topology, k: usize) -> EdgeSet {
    let grid: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..k - i).map(move |j| (i, j))).collect();
    let last = |i: usize| k - 1 - i;
    let mut out = EdgeSet::new();
    for &(si, sj) in &grid {
        for &(di, dj) in &grid {
            if dj == 0 {
                continue;
            }
            let connected = match t {
                Topology::UnetPlusPlus => (si == di && sj < dj) || (si == di + 1 && sj + 1 == dj),
                Topology::RoadSegV2 => {
                    let chain = (si == di && sj + 1 == dj) || (si == di + 1 && sj + 1 == dj);
                    let fin = dj == last(di);
                    let extra = fin
                        && ((si == di && sj < dj)
                            || (si < di && sj == 0)
                            || (si >= di + 2 && sj == last(si)));
                    chain || extra
                }
                Topology::Unet3Plus => unreachable!(),
            };
            if connected {
                out.insert(((si, sj), (di, dj)));
            }
        }
    }
    out
}

fn decoder_k2_edges() -> Check {
    let g = build_topology(Topology::UnetPlusPlus, 2, &[4, 8]).unwrap();
    let nodes: BTreeSet<Node> = g.nodes().iter().copied().collect();
    let want: BTreeSet<Node> = [Node::new(0, 0), Node::new(0, 1), Node::new(1, 0)].into();
    ensure!(nodes == want, "nodes {nodes:?}");
    let edges = edge_set(Topology::UnetPlusPlus, 2);
    let want: EdgeSet = [((0, 0), (0, 1)), ((1, 0), (0, 1))].into();
    ensure!(edges == want, "edges {edges:?}");
    ensure!(g.count(EdgeKind::SameScale) == 1 && g.count(EdgeKind::Upsample) == 1, "edge kinds");
    ensure!(edge_set(Topology::RoadSegV2, 2) == edges, "k=2 topologies differ");
    Ok(())
}

fn decoder_enumeration() -> Check {
    for k in 2..=5 {
        for t in [Topology::UnetPlusPlus, Topology::RoadSegV2] {
            ensure!(edge_set(t, k) == enumerate(t, k), "{} at k={k}", t.name());
        }
    }
    let ours = build_topology(Topology::RoadSegV2, 5, &[4; 5]).unwrap();
    let pp = build_topology(Topology::UnetPlusPlus, 5, &[4; 5]).unwrap();
    ensure!(ours.count(EdgeKind::SameScale) < pp.count(EdgeKind::SameScale), "same-scale counts");
    ensure!(ours.inter_scale_count() > pp.inter_scale_count(), "inter-scale counts");
    Ok(())
}

fn bilinear_up2(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (p.len(), p[0].len());
    let coord = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    (0..2 * h)
        .map(|y| {
            let (y0, y1, fy) = coord(y, h);
            (0..2 * w)
                .map(|x| {
                    let (x0, x1, fx) = coord(x, w);
                    (1.0 - fy) * ((1.0 - fx) * p[y0][x0] + fx * p[y0][x1]) + fy * ((1.0 - fx) * p[y1][x0] + fx * p[y1][x1])
                })
                .collect()
        })
        .collect()
}

fn two_level_decoder() -> Check {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dec = Decoder::new(&mut store, &mut rng, "d", build_topology(Topology::RoadSegV2, 2, &[2, 3]).unwrap());
    let f0 = random([1, 2, 4, 4], &mut rng);
    let f1 = random([1, 3, 2, 2], &mut rng);
    let got = eval(&store, &[&f0, &f1], |g, v| dec.forward(g, v));

    let block = &dec.blocks(Node::new(0, 1))[0];
    let dw = block.depthwise.as_ref().unwrap();
    let mut x = planes(&f0);
    for p in planes(&f1) {
        x.push(bilinear_up2(&p));
    }
    let depthwise: Planes = (0..5)
        .map(|c| {
            let w = store.get(dw.weight);
            let single = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|i| w.at(c, 0, i / 3, i % 3)).collect()).unwrap();
            let b = Tensor::from_vec([1, 1, 1, 1], vec![store.get(dw.bias.unwrap()).data()[c]]).unwrap();
            naive_conv(&vec![x[c].clone()], &single, Some(&b), 1, false).remove(0)
        })
        .collect();
    let pw = naive_conv(&depthwise, store.get(block.conv.weight), Some(store.get(block.conv.bias.unwrap())), 1, false);
    let node = map(&naive_bn(&pw), |a| a.max(0.0));
    let out = map(&naive_conv(&node, store.get(dec.head.weight), Some(store.get(dec.head.bias.unwrap())), 1, false), sig);
    let d = max_diff(&got, &out);
    ensure!(d < 1e-6, "max difference {d}");
    Ok(())
}

// Losses.

fn quarter_fraction_weight() -> Check {
    let w = transition_weight(25, 100);
    ensure!((w - FRAC_1_SQRT_2).abs() < 1e-12, "{w}");
    Ok(())
}

fn random_pair(seed: u64, w: usize, h: usize) -> (ProbabilityMap, LabelImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ProbabilityMap::new(w, h, (0..w * h).map(|_| rng.gen_range(0.01..0.99)).collect()).unwrap();
    let y = LabelImage::new(w, h, (0..w * h).map(|_| rng.gen_range(0..2u8)).collect()).unwrap();
    (p, y)
}

fn bce_double_loop() -> Check {
    let (p, y) = random_pair(19, 4, 4);
    let mut want = 0.0;
    for v in 0..4 {
        for u in 0..4 {
            let (pv, yv) = (p.values()[v * 4 + u], y.get(u, v) as f64);
            want -= yv * pv.ln() + (1.0 - yv) * (1.0 - pv).ln();
        }
    }
    let got = bce(&p, &y, 1e-7).unwrap();
    ensure!((got - want).abs() < 1e-9, "{got} vs {want}");
    Ok(())
}

fn checkerboard_weights() -> Check {
    let (p, y) = random_pair(20, 6, 6);
    let board: Vec<f64> = (0..36).map(|i| ((i / 6 + i % 6) % 2) as f64).collect();
    let w = WeightMap::new(6, 6, board.clone(), WeightSource::Semantic).unwrap();
    let got = weighted_bce(&p, &y, &w, 1e-7).unwrap();
    let mut want = 0.0;
    for i in (0..36).filter(|&i| board[i] == 1.0) {
        let one = ProbabilityMap::new(1, 1, vec![p.values()[i]]).unwrap();
        let lab = LabelImage::new(1, 1, vec![y.values()[i]]).unwrap();
        want += bce(&one, &lab, 1e-7).unwrap();
    }
    ensure!((got - want).abs() < 1e-9, "{got} vs {want}");
    Ok(())
}

/// Largest relative error between `∂L/∂p` and central differences over one
/// seeded 8×8 frame.
pub fn loss_gradient_error(seed: u64) -> f64 {
    let s = render(&random_scene(Split::Hard, 8, 8, seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..64)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..0.95);
            if (v - 0.5).abs() < 1e-3 {
                0.51
            } else {
                v
            }
        })
        .collect();
    let cfg = LossConfig::default();
    let loss = |v: &[f64]| {
        let p = ProbabilityMap::new(8, 8, v.to_vec()).unwrap();
        total_loss(&p, &s.labels, &s.depth, &s.intrinsics, &cfg).unwrap()
    };
    let analytic = loss(&vals).grad;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..64 {
        let mut plus = vals.clone();
        plus[i] += h;
        let mut minus = vals.clone();
        minus[i] -= h;
        let numeric = (loss(&plus).total - loss(&minus).total) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

fn loss_gradient_fd() -> Check {
    let e = loss_gradient_error(0);
    ensure!(e <= 1e-4, "relative error {e}");
    Ok(())
}

// Model and persistence.

fn baseline_pipeline() -> Check {
    let cfg = ModelConfig {
        channels: vec![2, 2],
        switches: FusionSwitches::baseline(),
        ..ModelConfig::default()
    };
    let frame = &generate(Split::Easy, 1, 32, 32, 3).unwrap()[0];
    let (m, store) = Model::init(cfg, false).unwrap();
    let got = m.predict(&store, frame, Mode::Train).unwrap();
    let (rgb, nrm) = prepare_batch(&[frame]).unwrap();
    let stage = |layer: &roadseg_core::nn::ConvBnRelu, x: &Tensor| eval(&store, &[x], |g, v| layer.forward(g, v[0]));
    let r0 = stage(&m.rgb_tower[0], &rgb);
    let n0 = stage(&m.normal_tower[0], &nrm);
    let f0 = Tensor::from_vec(r0.shape(), r0.data().iter().zip(n0.data()).map(|(a, b)| a + b).collect()).unwrap();
    let r1 = stage(&m.rgb_tower[1], &f0);
    let n1 = stage(&m.normal_tower[1], &n0);
    let f1 = Tensor::from_vec(r1.shape(), r1.data().iter().zip(n1.data()).map(|(a, b)| a + b).collect()).unwrap();
    let coarse = eval(&store, &[&f0, &f1], |g, v| m.decoder.forward_logits(g, v));
    let coarse = planes(&coarse);
    // Two bilinear doublings give the ×4 patch upsampling only when the
    // oracle resamples directly, so sample the ×4 grid explicitly.
    let (h, w) = (coarse[0].len(), coarse[0][0].len());
    let coord = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / 4.0 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let mut worst: f64 = 0.0;
    for y in 0..4 * h {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..4 * w {
            let (x0, x1, fx) = coord(x, w);
            let p = &coarse[0];
            let z = (1.0 - fy) * ((1.0 - fx) * p[y0][x0] + fx * p[y0][x1]) + fy * ((1.0 - fx) * p[y1][x0] + fx * p[y1][x1]);
            worst = worst.max((got.values()[y * 4 * w + x] - sig(z)).abs());
        }
    }
    ensure!(worst < 1e-5, "max difference {worst}");
    Ok(())
}

fn checkpoint_forward_equality() -> Check {
    let cfg = ModelConfig {
        channels: vec![4, 8],
        ..ModelConfig::default()
    };
    let (m, store) = Model::init(cfg, true).unwrap();
    let frame = &generate(Split::Hard, 1, 32, 32, 9).unwrap()[0];
    let before = m.predict(&store, frame, Mode::Eval).unwrap();
    let ckpt = roadseg_core::checkpoint::Checkpoint {
        step: 0,
        metadata: vec![],
        store,
    };
    let back = roadseg_core::checkpoint::decode(&roadseg_core::checkpoint::encode(&ckpt)).unwrap();
    let after = m.predict(&back.store, frame, Mode::Eval).unwrap();
    ensure!(before == after, "predictions changed");
    Ok(())
}

// Data.

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Whether `q` lies inside the convex hull of `pts`; `None` within 1e-6 of
/// an edge.
fn hull_contains(pts: &[[f64; 2]], q: [f64; 2]) -> Option<bool> {
    let mut p = pts.to_vec();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
        for &pt in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0.0 {
                hull.pop();
            }
            hull.push(pt);
        }
        hull.pop();
    }
    let n = hull.len();
    let mut inside = true;
    for i in 0..n {
        let (a, b) = (hull[i], hull[(i + 1) % n]);
        let c = cross(a, b, q);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        if (c / len).abs() < 1e-6 {
            return None;
        }
        inside &= c > 0.0;
    }
    Some(inside)
}

fn box_footprint() -> Check {
    let mut spec = SceneSpec::flat(64, 48, 1.5);
    let b = Aabb::on_ground(-0.3, 9.0, 1.5, 1.0, 1.2, 1.5);
    spec.obstacles.push(b);
    let with_box = render(&spec).unwrap();
    spec.obstacles.clear();
    let empty = render(&spec).unwrap();
    let k = spec.intrinsics;
    let proj: Vec<[f64; 2]> = b
        .corners()
        .iter()
        .map(|c| [k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy])
        .collect();
    let mut holes = 0;
    for v in 0..48 {
        for u in 0..64 {
            let Some(inside) = hull_contains(&proj, [u as f64, v as f64]) else { continue };
            let expected = empty.labels.get(u, v) == 1 && !inside;
            ensure!((with_box.labels.get(u, v) == 1) == expected, "pixel ({u}, {v})");
            holes += (empty.labels.get(u, v) == 1 && inside) as usize;
        }
    }
    ensure!(holes > 10, "only {holes} hole pixels");
    Ok(())
}

fn crop_back_projection() -> Check {
    let s = render(&random_scene(Split::Hard, 32, 32, 6)).unwrap();
    let (x0, y0) = (3, 9);
    let c = augment(&s, &[AugmentOp::Crop { x0, y0, width: 24, height: 16 }]).unwrap();
    ensure!(
        c.intrinsics.cx == s.intrinsics.cx - 3.0 && c.intrinsics.cy == s.intrinsics.cy - 9.0,
        "principal point {:?}",
        c.intrinsics
    );
    for v in 0..16 {
        for u in 0..24 {
            if c.depth.is_valid(u, v) {
                let a = back_project(u as f64, v as f64, c.depth.get(u, v), &c.intrinsics).unwrap();
                let b = back_project((u + x0) as f64, (v + y0) as f64, s.depth.get(u + x0, v + y0), &s.intrinsics).unwrap();
                ensure!(a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12), "({u}, {v})");
            }
        }
    }
    Ok(())
}

fn dataset_fixture() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    for (i, s) in generate(Split::Easy, 6, 16, 16, 3).unwrap().iter().enumerate() {
        roadseg::io::save_sample(root, &format!("s{i}"), s).map_err(|e| e.to_string())?;
    }
    std::fs::remove_file(root.join("label/s2.png")).unwrap();
    std::fs::remove_file(root.join("calib/s4.txt")).unwrap();
    let n = roadseg::io::load_dataset(root).map_err(|e| e.to_string())?.len();
    ensure!(n == 4, "{n} frames loaded from 4 valid stems");
    Ok(())
}

// Metrics.

fn confusion_double_loop() -> Check {
    let (p, y) = random_pair(21, 4, 4);
    let mut want = ConfusionCounts::default();
    for v in 0..4 {
        for u in 0..4 {
            let pos = p.values()[v * 4 + u] > 0.5;
            match (pos, y.get(u, v) == 1) {
                (true, true) => want.tp += 1,
                (true, false) => want.fp += 1,
                (false, true) => want.fn_ += 1,
                (false, false) => want.tn += 1,
            }
        }
    }
    let got = confusion(&p, &y, 0.5).unwrap();
    ensure!(got == want, "{got:?} vs {want:?}");
    Ok(())
}

fn unit_counts_by_hand() -> Check {
    let m = point_metrics(&ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
    ensure!(m.pre == 0.5 && m.rec == 0.5 && m.fsc == 0.5 && m.acc == 0.5, "{m:?}");
    ensure!((m.iou - 1.0 / 3.0).abs() < 1e-15, "{m:?}");
    Ok(())
}

fn constant_half_prediction() -> Check {
    let p = ProbabilityMap::new(4, 1, vec![0.5; 4]).unwrap();
    let y = LabelImage::new(4, 1, vec![1, 0, 1, 0]).unwrap();
    let c = curve_metrics(&p, &y, &[0.75, 0.5 - 1e-3, 0.25]).unwrap();
    ensure!((c.max_f - 2.0 / 3.0).abs() < 1e-12, "MaxF {}", c.max_f);
    Ok(())
}

fn max_f_grid() -> Check {
    let (p, y) = random_pair(22, 9, 7);
    let grid = threshold_grid();
    let want = grid
        .iter()
        .map(|&t| point_metrics(&confusion(&p, &y, t).unwrap()).fsc)
        .fold(0.0, f64::max);
    let got = curve_metrics(&p, &y, &grid).unwrap().max_f;
    ensure!((got - want).abs() < 1e-12, "{got} vs {want}");
    Ok(())
}

pub type Named = (&'static str, fn() -> Check);

pub fn all() -> Vec<Named> {
    vec![
        ("back-projection by hand", back_projection_by_hand),
        ("ramp normals", ramp_normals),
        ("flat-ground camera height", flat_ground_height),
        ("depth weight at ln 2", depth_weight_half),
        ("spatial attention", spatial_attention_oracle),
        ("dilated impulse footprint", dilated_impulse_footprint),
        ("atrous aggregation", atrous_oracle),
        ("channel attention", channel_attention_oracle),
        ("contrast descriptor", contrast_oracle),
        ("affinity 2x2x2 by hand", affinity_hand_matmul),
        ("affinity of constant descriptors", affinity_half_inputs_constant),
        ("affinity volume", affinity_oracle),
        ("recalibration", recalibrate_oracle),
        ("fusion block composition", fusion_block_oracle),
        ("decoder k=2 edges", decoder_k2_edges),
        ("decoder enumeration", decoder_enumeration),
        ("two-level decoder", two_level_decoder),
        ("quarter-fraction transition weight", quarter_fraction_weight),
        ("bce double loop", bce_double_loop),
        ("checkerboard weighted bce", checkerboard_weights),
        ("loss gradient finite differences", loss_gradient_fd),
        ("baseline pipeline composition", baseline_pipeline),
        ("checkpoint forward equality", checkpoint_forward_equality),
        ("box footprint", box_footprint),
        ("crop back-projection", crop_back_projection),
        ("dataset fixture", dataset_fixture),
        ("confusion double loop", confusion_double_loop),
        ("unit counts by hand", unit_counts_by_hand),
        ("constant half prediction", constant_half_prediction),
        ("MaxF grid", max_f_grid),
    ]
}
