//! Acceptance run: one PASS/FAIL line per criterion. Criteria that are
//! deterministic fail the process; the ablation directions are reported
//! but not enforced, since they compare stochastic training outcomes.

mod oracles;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadseg::config::{RunConfig, TrainConfig};
use roadseg::harness::{ablate, evaluate, mean_by_label, train, Cell};
use roadseg_core::autograd::{Graph, Mode, ParamKind, ParamStore};
use roadseg_core::checkpoint::{decode, encode};
use roadseg_core::data::{generate, render, Aabb, SceneSpec, Split};
use roadseg_core::decoder::{build_topology, cost_report, Topology};
use roadseg_core::fusion::{FusionSwitches, Hf2b};
use roadseg_core::geometry::{camera_height, depth_inconsistency_weights, depth_weights_from_freespace, DepthWeightConfig, HeightEstimator, PixelSet};
use roadseg_core::losses::{semantic_transition_weights, LabelImage, LossConfig};
use roadseg_core::model::{Model, ModelConfig};
use roadseg_core::optim::Adam;
use roadseg_core::train::{prepare_all, train_step};
use roadseg_core::Tensor;

use oracles::{random, Check};

struct Outcome {
    pass: bool,
    detail: String,
    enforced: bool,
}

fn outcome(check: Check) -> Outcome {
    match check {
        Ok(()) => Outcome {
            pass: true,
            detail: String::new(),
            enforced: true,
        },
        Err(detail) => Outcome {
            pass: false,
            detail,
            enforced: true,
        },
    }
}

fn oracle_suite() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let all = oracles::all();
    for (name, check) in &all {
        match catch_unwind(check) {
            Ok(Ok(())) => {}
            Ok(Err(e)) => failures.push(format!("{name}: {e}")),
            Err(_) => failures.push(format!("{name}: panicked")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    Outcome {
        pass,
        detail: format!("{}/{} oracles in {secs:.1}s", all.len() - failures.len(), all.len())
            + &failures.iter().map(|f| format!("; {f}")).collect::<String>(),
        enforced: true,
    }
}

fn semantic_limits() -> Check {
    let corner = |side: usize, radius: usize, on: &dyn Fn(usize, usize) -> bool| {
        let labels: Vec<u8> = (0..side * side).map(|i| on(i % side, i / side) as u8).collect();
        let w = semantic_transition_weights(&LabelImage::new(side, side, labels).unwrap(), radius).unwrap();
        w.values()[0]
    };
    let quarter = std::f64::consts::FRAC_PI_4.cos();
    // The clipped corner window is (r+1)² pixels.
    let cases = [
        (6, 1, corner(6, 1, &|u, v| u == 0 && v == 0), quarter),
        (6, 1, corner(6, 1, &|u, _| u == 0), 1.0),
        (16, 7, corner(16, 7, &|u, v| u < 2 && v < 8), quarter),
        (16, 7, corner(16, 7, &|u, _| u < 4), 1.0),
    ];
    for (side, r, got, want) in cases {
        if (got - want).abs() > 1e-9 {
            return Err(format!("side {side} radius {r}: {got} vs {want}"));
        }
    }
    for fill in [0u8, 1] {
        let w = semantic_transition_weights(&LabelImage::new(12, 9, vec![fill; 108]).unwrap(), 3).unwrap();
        let max = w.values().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if max > 1e-9 {
            return Err(format!("uniform label {fill}: max weight {max}"));
        }
    }
    Ok(())
}

fn depth_invariant() -> Check {
    let flat = render(&SceneSpec::flat(64, 64, 1.65)).unwrap();
    let fs = PixelSet::from_mask(&flat.labels.freespace_mask(), 64);
    let y = camera_height(&fs, &flat.depth, &flat.intrinsics).unwrap();
    let w = depth_inconsistency_weights(&flat.depth, &flat.intrinsics, y, &DepthWeightConfig::default()).unwrap();
    let max = w.values().iter().fold(0.0f64, |m, &v| m.max(v));
    if max > 1e-5 {
        return Err(format!("flat ground max weight {max}"));
    }

    let mut spec = SceneSpec::flat(64, 64, 1.65);
    spec.obstacles.push(Aabb::on_ground(0.0, 8.0, 2.0, 1.0, 1.0, 1.65));
    let with_box = render(&spec).unwrap();
    // Corrupted mask: the box pixels are still marked freespace.
    let box_px: Vec<usize> = (0..64 * 64)
        .filter(|&i| with_box.labels.values()[i] != flat.labels.values()[i])
        .collect();
    if box_px.len() < 20 {
        return Err(format!("box covers only {} pixels", box_px.len()));
    }
    let fs = PixelSet::from_mask(&flat.labels.freespace_mask(), 64);
    let (_, w) = depth_weights_from_freespace(&fs, &with_box.depth, &with_box.intrinsics, HeightEstimator::Mean, &DepthWeightConfig::default()).unwrap();
    let mean = box_px.iter().map(|&i| w.values()[i]).sum::<f64>() / box_px.len() as f64;
    if mean < 0.3 {
        return Err(format!("mean box weight {mean}"));
    }
    Ok(())
}

fn affinity_bounds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for i in 0..1000u64 {
        let c = rng.gen_range(1..5);
        let (h, w) = (rng.gen_range(4..9), rng.gen_range(4..9));
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(i);
        let b = Hf2b::new(&mut store, &mut prng, "f", c, FusionSwitches::full());
        let spread = rng.gen_range(0.5..10.0);
        let r = random([1, c, h, w], &mut rng).map(|v| v * spread);
        let n = random([1, c, h, w], &mut rng).map(|v| v * spread);
        let mut g = Graph::new(&store, Mode::Train);
        let (vr, vn) = (g.input(r), g.input(n));
        let out = b.forward(&mut g, vr, vn).map_err(|e| e.to_string())?;
        let a = g.value(out.affinity.ok_or("no affinity volume")?);
        for &v in a.data() {
            lo = lo.min(v);
            hi = hi.max(v);
            if !(v > 0.0 && v < 1.0) {
                return Err(format!("instance {i}: entry {v}"));
            }
        }
    }
    println!("  affinity range over 1000 instances: [{lo:.6}, {hi:.6}]");
    Ok(())
}

fn fusion_param_error(seed: u64) -> (f64, usize) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Hf2b::new(&mut store, &mut rng, "f", 2, FusionSwitches::full());
    let r = random([1, 2, 4, 4], &mut rng);
    let n = random([1, 2, 4, 4], &mut rng);
    let proj = random([1, 2, 4, 4], &mut rng);
    let readout = |s: &ParamStore| {
        let f = b.apply(s, &r, &n).unwrap().0;
        f.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut g = Graph::new(&store, Mode::Train);
    let (vr, vn) = (g.input(r.clone()), g.input(n.clone()));
    let out = b.forward(&mut g, vr, vn).unwrap();
    let grads = g.backward(out.fused, proj.clone()).unwrap();
    let (mut worst, mut checked) = (0.0f64, 0);
    for id in store.ids() {
        if store.entry(id).kind != ParamKind::Trainable {
            continue;
        }
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..store.get(id).len() {
            let h = 1e-5;
            let mut plus = store.clone();
            plus.update(id, |d| d[i] += h);
            let mut minus = store.clone();
            minus.update(id, |d| d[i] -= h);
            let fd = (readout(&plus) - readout(&minus)) / (2.0 * h);
            let an = analytic.data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            checked += 1;
        }
    }
    (worst, checked)
}

fn gradient_checks() -> Check {
    let loss = (0..20).map(oracles::loss_gradient_error).fold(0.0f64, f64::max);
    let mut fusion = 0.0f64;
    let mut checked = 0;
    for seed in 0..3 {
        let (e, n) = fusion_param_error(100 + seed);
        fusion = fusion.max(e);
        checked += n;
    }
    println!("  loss gradient worst relative error {loss:.2e}; fusion parameters {fusion:.2e} over {checked} entries");
    if loss > 1e-4 || fusion > 1e-3 {
        return Err(format!("loss {loss:.2e}, fusion {fusion:.2e}"));
    }
    Ok(())
}

fn cost_ordering() -> Check {
    for sched in [[16, 32, 64, 128], [8, 16, 32, 64], [16, 16, 16, 16]] {
        let cost = |t| cost_report(&build_topology(t, 4, &sched).unwrap(), 32, 32);
        let (a, b, c) = (cost(Topology::RoadSegV2), cost(Topology::UnetPlusPlus), cost(Topology::Unet3Plus));
        println!(
            "  {sched:?}: params {} < {} < {}, macs {} < {} < {}",
            a.params, b.params, c.params, a.flops, b.flops, c.flops
        );
        if !(a.params < b.params && b.params < c.params && a.flops < b.flops && b.flops < c.flops) {
            return Err(format!("ordering broken at {sched:?}"));
        }
    }
    Ok(())
}

fn toy_overfit() -> Check {
    let start = Instant::now();
    let frames = prepare_all(generate(Split::Easy, 8, 64, 64, 7).unwrap()).unwrap();
    let cfg = ModelConfig {
        channels: vec![8, 16, 32],
        ..ModelConfig::default()
    };
    let (model, mut store) = Model::init(cfg, false).unwrap();
    let mut adam = Adam::new(Default::default());
    let batch: Vec<_> = frames.iter().collect();
    for step in 0..200 {
        train_step(&model, &mut store, &mut adam, &batch, &LossConfig::default(), 1e-3, step).map_err(|e| e.to_string())?;
    }
    let samples: Vec<_> = frames.into_iter().map(|p| p.sample).collect();
    let fsc = evaluate(&model, &store, &samples).map_err(|e| e.to_string())?.metrics.fsc;
    let secs = start.elapsed().as_secs_f64();
    println!("  training Fsc {fsc:.4} after 200 steps in {secs:.1}s");
    if fsc < 0.99 || secs > 300.0 {
        return Err(format!("Fsc {fsc:.4} in {secs:.1}s"));
    }
    Ok(())
}

fn ablation_directions() -> Outcome {
    let mut base = RunConfig::default();
    for kv in [
        "model.channels=8,16,32",
        "data.width=64",
        "data.height=64",
        "train.batch_size=4",
        "train.max_epochs=20",
        "train.patience=100",
        "train.augment=false",
    ] {
        base.apply(kv).unwrap();
    }
    let all = generate(Split::Hard, 40, 64, 64, 100).unwrap();
    let (tr, va) = all.split_at(24);
    // The default configuration is full fusion, (0.3, 0.1) and radius 7.
    let radii = [1, 3, 5, 9, 11];
    let mut cells = vec![
        Cell::new("full", &[]),
        Cell::new("baseline", &["fusion.baseline_sum=true"]),
        Cell::new("lambda0", &["loss.lambda_s=0", "loss.lambda_d=0"]),
    ];
    for r in radii {
        let kv = format!("loss.radius={r}");
        cells.push(Cell::new(format!("r{r}"), &[kv.as_str()]));
    }
    let rows = match ablate(&base, &cells, &[0, 1, 2], tr, va) {
        Ok(rows) => rows,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: e.to_string(),
                enforced: false,
            }
        }
    };
    let means = mean_by_label(&rows);
    let mean = |l: &str| means.iter().find(|(k, _)| k == l).map_or(f64::NAN, |m| m.1);
    let (full, baseline, zero) = (mean("full"), mean("baseline"), mean("lambda0"));
    let mut radius: Vec<(usize, f64)> = radii.iter().map(|&r| (r, mean(&format!("r{r}")))).collect();
    radius.push((7, full));
    radius.sort_by(|a, b| b.1.total_cmp(&a.1));
    let rank7 = radius.iter().position(|r| r.0 == 7).unwrap() + 1;
    let checks = [
        (full >= baseline, format!("full {full:.4} vs baseline {baseline:.4}")),
        (full >= zero, format!("(0.3,0.1) {full:.4} vs (0,0) {zero:.4}")),
        (
            rank7 <= 2,
            format!(
                "radius 7 ranks {rank7} of 6 [{}]",
                radius.iter().map(|(r, f)| format!("r{r} {f:.4}")).collect::<Vec<_>>().join(", ")
            ),
        ),
    ];
    Outcome {
        pass: checks.iter().all(|c| c.0),
        detail: checks
            .iter()
            .map(|(ok, d)| format!("{} {d}", if *ok { "ok" } else { "violated:" }))
            .collect::<Vec<_>>()
            .join("; "),
        enforced: false,
    }
}

fn determinism() -> Check {
    let all = generate(Split::Hard, 6, 32, 32, 55).unwrap();
    let (tr, va) = all.split_at(4);
    let cfg = TrainConfig {
        max_epochs: 3,
        batch_size: 2,
        model: ModelConfig {
            channels: vec![4, 8],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let a = train(&cfg, tr, va).map_err(|e| e.to_string())?;
    let b = train(&cfg, tr, va).map_err(|e| e.to_string())?;
    if a.record.losses() != b.record.losses() {
        return Err("logged losses differ between identical runs".into());
    }
    let run = RunConfig {
        train: cfg,
        ..RunConfig::default()
    };
    let back = decode(&encode(&a.checkpoint(&run))).map_err(|e| e.to_string())?;
    for s in va {
        let before = a.model.predict(&a.store, s, Mode::Eval).unwrap();
        let after = a.model.predict(&back.store, s, Mode::Eval).unwrap();
        let same = before.values().iter().zip(after.values()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err("checkpoint round trip changed the forward output".into());
        }
    }
    Ok(())
}

fn main() {
    type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);
    let criteria: Vec<Criterion> = vec![
        ("formula oracle suite", Box::new(oracle_suite)),
        ("semantic weight limits", Box::new(|| outcome(semantic_limits()))),
        ("depth weight flat-ground invariant", Box::new(|| outcome(depth_invariant()))),
        ("affinity bounds", Box::new(|| outcome(affinity_bounds()))),
        ("gradient checks", Box::new(|| outcome(gradient_checks()))),
        ("decoder cost ordering", Box::new(|| outcome(cost_ordering()))),
        ("toy overfit", Box::new(|| outcome(toy_overfit()))),
        ("paired ablation directions", Box::new(ablation_directions)),
        ("determinism and persistence", Box::new(|| outcome(determinism()))),
    ];
    let mut enforced_failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Outcome {
            pass: false,
            detail: "panicked".into(),
            enforced: true,
        });
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let note = if o.pass || o.enforced { "" } else { " (reported, not enforced)" };
        println!(
            "criterion {} {name}: {verdict}{note} [{:.1}s] {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass && o.enforced {
            enforced_failures += 1;
        }
    }
    if enforced_failures > 0 {
        eprintln!("{enforced_failures} enforced criteria failed");
        std::process::exit(1);
    }
}
