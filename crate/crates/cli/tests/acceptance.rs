//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::panic::{self, AssertUnwindSafe};
use std::rc::Rc;
use std::time::{Duration, Instant};

use mfstf_core::fusion::update_alpha;
use mfstf_core::gradcheck::full_suite;
use mfstf_core::metrics::ConfusionMatrix;
use mfstf_core::model::{Model, ModelConfig};
use mfstf_core::params::NormMode;
use mfstf_core::polsar::*;
use mfstf_core::topo::{build_graph, sage_layer};
use mfstf_core::train::{evaluate_held_out, predict_image, predict_pixels, test_pixels, train, TrainConfig};
use mfstf_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

// 1

fn gradient_suite() -> Check {
    let start = Instant::now();
    let reports = ok(full_suite(0, None))?;
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    for r in &reports {
        ensure(r.passed(), || format!("{} max relative error {:.3e}", r.name, r.max_rel_err))?;
    }
    ensure(reports.iter().any(|r| r.name == "pipeline"), || "pipeline check missing".into())?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {:.1}s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "{} checks, worst {} at {:.2e}, {:.1}s",
        reports.len(),
        worst.name,
        worst.max_rel_err,
        elapsed.as_secs_f64()
    ))
}

// 2

fn objective(alpha: &[f64], losses: &[f64], gamma: f64) -> f64 {
    alpha.iter().zip(losses).map(|(a, l)| a.powf(gamma) * l).sum()
}

/// Simplex grid search: 1e-4 steps for two bands; for three, a 1e-2 grid
/// refined at 1e-4 around its best point.
fn grid_minimizer(losses: &[f64], gamma: f64) -> Vec<f64> {
    if losses.len() == 2 {
        let a = (0..=10_000)
            .map(|i| i as f64 * 1e-4)
            .min_by(|a, b| {
                objective(&[*a, 1.0 - a], losses, gamma).total_cmp(&objective(&[*b, 1.0 - b], losses, gamma))
            })
            .unwrap();
        return vec![a, 1.0 - a];
    }
    let search = |lo: [f64; 2], steps: usize, h: f64| -> [f64; 2] {
        let mut best = (f64::INFINITY, lo);
        for i in 0..=steps {
            for j in 0..=steps {
                let (a, b) = (lo[0] + i as f64 * h, lo[1] + j as f64 * h);
                if a < 0.0 || b < 0.0 || a + b > 1.0 + 1e-12 {
                    continue;
                }
                let f = objective(&[a, b, (1.0 - a - b).max(0.0)], losses, gamma);
                if f < best.0 {
                    best = (f, [a, b]);
                }
            }
        }
        best.1
    };
    let coarse = search([0.0, 0.0], 100, 1e-2);
    let fine = search([coarse[0] - 0.01, coarse[1] - 0.01], 200, 1e-4);
    vec![fine[0], fine[1], 1.0 - fine[0] - fine[1]]
}

fn awf_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let k = if i % 3 == 0 { 3 } else { 2 };
        let gamma = [2.0, 3.0, 4.0][(i / 3) % 3];
        let losses: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..3.0)).collect();
        let alpha = ok(update_alpha(&losses, gamma))?;
        let grid = grid_minimizer(&losses, gamma);
        for (a, g) in alpha.iter().zip(&grid) {
            worst = worst.max((a - g).abs());
        }
        ensure(worst <= 1e-3, || format!("{:?} vs grid {:?} for {:?}", alpha, grid, losses))?;
    }
    let a = ok(update_alpha(&[1.0, 4.0], 3.0))?;
    ensure((a[0] - 2.0 / 3.0).abs() <= 1e-9 && (a[1] - 1.0 / 3.0).abs() <= 1e-9, || {
        format!("L=(1,4) gives {:?}", a)
    })?;
    Ok(format!("1000 vectors, max deviation {:.1e}; (1,4) -> {:.6},{:.6}", worst, a[0], a[1]))
}

// 3

fn awf_invariants() -> Check {
    let cube = ok(generate_synthetic_scene(&SceneConfig {
        height: 40,
        width: 40,
        seed: 3,
        ..SceneConfig::default()
    }))?;
    let split = ok(chessboard_partition(40, 40, 4, 4))?;
    let cfg = TrainConfig {
        epochs: 150,
        m: 4,
        patch: 7,
        samples: 6,
        augment: false,
        batch_size: 30,
        k_neighbors: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = ok(train(&cube, &split, Part::Black, &cfg))?;
    ensure(out.history.len() == 150, || format!("{} epochs logged", out.history.len()))?;
    let mut drift = 0.0f64;
    for e in &out.history {
        drift = drift.max((e.alpha.iter().sum::<f64>() - 1.0).abs());
        ensure(e.alpha.iter().all(|&a| a >= 0.0), || format!("epoch {} alpha {:?}", e.epoch, e.alpha))?;
    }
    ensure(drift <= 1e-9, || format!("alpha sum off by {:.2e}", drift))?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut scale = 0.0f64;
    for _ in 0..500 {
        let k = rng.gen_range(2..5);
        let gamma = rng.gen_range(1.1..8.0);
        let l: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..5.0)).collect();
        let c = 10f64.powf(rng.gen_range(-3.0..3.0));
        let cl: Vec<f64> = l.iter().map(|v| v * c).collect();
        let a = ok(update_alpha(&l, gamma))?;
        let b = ok(update_alpha(&cl, gamma))?;
        for (x, y) in a.iter().zip(&b) {
            scale = scale.max((x - y).abs());
        }
    }
    ensure(scale <= 1e-12, || format!("scaling moves alpha by {:.2e}", scale))?;
    let last = &out.history[149].alpha;
    Ok(format!(
        "150 epochs, sum drift {:.1e}, scale drift {:.1e}, final alpha {:.4},{:.4}",
        drift, scale, last[0], last[1]
    ))
}

// 4

fn random_graph(rng: &mut impl Rng, n: usize, p: f64) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for v in 0..n {
        for u in v + 1..n {
            if rng.gen_bool(p) {
                adj[v].push(u);
                adj[u].push(v);
            }
        }
    }
    adj
}

fn brute_force(adj: &[Vec<usize>], h: &Tensor, w: &Tensor) -> Vec<f64> {
    let (din, dout) = (h.shape[1], w.shape[0]);
    let mut out = Vec::new();
    for (v, nb) in adj.iter().enumerate() {
        let mut mean = h.data[v * din..(v + 1) * din].to_vec();
        for &u in nb {
            for (m, x) in mean.iter_mut().zip(&h.data[u * din..(u + 1) * din]) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= (nb.len() + 1) as f64);
        for o in 0..dout {
            let row = &w.data[o * din..(o + 1) * din];
            out.push(row.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>().max(0.0));
        }
    }
    out
}

fn graphsage_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=20);
        let (din, dout) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let p = rng.gen_range(0.0..0.6);
        let adj = random_graph(&mut rng, n, p);
        let h = random(&mut rng, &[n, din], -1.0, 1.0);
        let w = random(&mut rng, &[dout, din], -1.0, 1.0);
        let tape = Tape::new();
        let out = ok(sage_layer(&tape, Rc::new(adj.clone()), tape.constant(h.clone()), tape.constant(w.clone())))?;
        for (a, b) in out.data().iter().zip(brute_force(&adj, &h, &w)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {:.2e}", worst))?;

    // path 0-1-2-3-4-5; positive weights keep every unit active
    let adj: Rc<Vec<Vec<usize>>> = Rc::new(
        (0..6usize)
            .map(|v| [v.wrapping_sub(1), v + 1].into_iter().filter(|&u| u < 6).collect())
            .collect(),
    );
    let h = random(&mut rng, &[6, 3], 0.1, 1.0);
    let w1 = random(&mut rng, &[4, 3], 0.1, 1.0);
    let w2 = random(&mut rng, &[2, 4], 0.1, 1.0);
    let node0 = |h: &Tensor| -> Result<Vec<f64>, String> {
        let tape = Tape::new();
        let g1 = ok(sage_layer(&tape, adj.clone(), tape.constant(h.clone()), tape.constant(w1.clone())))?;
        let g2 = ok(sage_layer(&tape, adj.clone(), g1, tape.constant(w2.clone())))?;
        let v = g2.data()[..2].to_vec();
        Ok(v)
    };
    let base = node0(&h)?;
    let mut two = h.clone();
    two.data[2 * 3] += 1.0;
    ensure(node0(&two)? != base, || "node 2 does not reach node 0".into())?;
    let mut far = h.clone();
    far.data[3 * 3] += 1.0;
    far.data[5 * 3 + 2] -= 0.5;
    ensure(node0(&far)? == base, || "nodes 3 and 5 reach node 0".into())?;
    Ok(format!("100 graphs, max deviation {:.1e}; 2-hop field exact", worst))
}

// 5

fn sampling_safety() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let (h, w) = (rng.gen_range(12..64), rng.gen_range(12..64));
        let (gr, gc) = (rng.gen_range(1..=h / 2), rng.gen_range(1..=w / 2));
        let split = ok(chessboard_partition(h, w, gr, gc))?;
        let mut seen = vec![0u8; h * w];
        for part in [Part::Black, Part::White] {
            for &i in split.pixels(part) {
                seen[i] += 1;
                ensure(split.part_of(i / w, i % w) == part, || format!("case {}: pixel {} misfiled", case, i))?;
            }
        }
        ensure(seen.iter().all(|&c| c == 1), || format!("case {}: {}x{} grid {}x{} overlaps or misses", case, h, w, gr, gc))?;

        let cube = ok(generate_synthetic_scene(&SceneConfig {
            height: h,
            width: w,
            seed: case,
            ..SceneConfig::default()
        }))?;
        for part in [Part::Black, Part::White] {
            let set = match draw_training_samples(&cube, &split, part, SampleBudget::Total(10), case) {
                Ok(s) => s,
                Err(_) => continue,
            };
            ensure(set.anchors.iter().all(|a| split.part_of(a.row, a.col) == part), || {
                format!("case {}: anchor outside {}", case, part)
            })?;
            let test = test_pixels(&cube, &split, part.other(), None, 0);
            ensure(test.iter().all(|&i| split.part_of(i / w, i % w) == part.other()), || {
                format!("case {}: test pixel inside the training part", case)
            })?;
            ensure(!set.anchors.iter().any(|a| test.contains(&(a.row * w + a.col))), || {
                format!("case {}: anchor reused for testing", case)
            })?;
        }
    }

    let cube = ok(generate_synthetic_scene(&SceneConfig {
        height: 36,
        width: 36,
        seed: 2,
        ..SceneConfig::default()
    }))?;
    let split = ok(chessboard_partition(36, 36, 6, 6))?;
    let cfg = TrainConfig {
        epochs: 1,
        m: 4,
        patch: 5,
        samples: 4,
        augment: false,
        k_neighbors: 3,
        grid_rows: 6,
        grid_cols: 6,
        ..TrainConfig::default()
    };
    let black = ok(train(&cube, &split, Part::Black, &cfg))?.model;
    let white = ok(train(&cube, &split, Part::White, &cfg))?.model;
    let raster = ok(predict_image(&cube, &black, &white, &split))?;
    for (part, other) in [(Part::Black, &white), (Part::White, &black)] {
        let px = split.pixels(part);
        let direct = ok(predict_pixels(other, &cube, px))?;
        ensure(px.iter().zip(&direct).all(|(&i, &d)| raster.labels[i] == d), || {
            format!("{} pixels not classified by the {} model", part, part.other())
        })?;
    }
    ensure(predict_image(&cube, &white, &black, &split).is_err(), || "swapped models accepted".into())?;
    Ok("100 configurations disjoint and covering; predictions use the opposite model".into())
}

// 6 and 7

const SEEDS: [u64; 3] = [0, 1, 2];

struct Scene {
    cube: PolSarCube,
    split: ChessboardSplit,
}

fn default_scene() -> Result<Scene, String> {
    let cube = ok(generate_synthetic_scene(&SceneConfig {
        seed: 7,
        ..SceneConfig::default()
    }))?;
    ensure((cube.band_count(), cube.classes(), cube.height(), cube.width()) == (2, 5, 200, 200), || {
        "default scene is not 2 bands, 5 classes, 200x200".into()
    })?;
    let split = ok(chessboard_partition(200, 200, 20, 20))?;
    Ok(Scene { cube, split })
}

fn scene_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        m: 16,
        samples: 20,
        seed,
        ..TrainConfig::default()
    }
}

/// OA over every labeled white pixel of a model trained on the black part.
fn held_out_oa(cube: &PolSarCube, split: &ChessboardSplit, cfg: &TrainConfig) -> Result<f64, String> {
    let model = ok(train(cube, split, Part::Black, cfg))?.model;
    let cm = ok(evaluate_held_out(&model, cube, split, None, 0))?;
    Ok(ok(cm.metrics())?.oa)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fusion_gain(scene: &Scene, fused: &mut Vec<f64>) -> Check {
    let start = Instant::now();
    let bands = [ok(scene.cube.select_bands(&[0]))?, ok(scene.cube.select_bands(&[1]))?];
    let mut single = [Vec::new(), Vec::new()];
    for seed in SEEDS {
        let cfg = scene_config(seed);
        fused.push(held_out_oa(&scene.cube, &scene.split, &cfg)?);
        for (k, cube) in bands.iter().enumerate() {
            single[k].push(held_out_oa(cube, &scene.split, &cfg)?);
        }
    }
    let elapsed = start.elapsed();
    let (f, b1, b2) = (mean(fused), mean(&single[0]), mean(&single[1]));
    let gain = 100.0 * (f - b1.max(b2));
    let summary = format!(
        "fused {:.2}%, band 1 {:.2}%, band 2 {:.2}%, gain {:.2} points, {:.0}s",
        100.0 * f,
        100.0 * b1,
        100.0 * b2,
        gain,
        elapsed.as_secs_f64()
    );
    ensure(gain >= 5.0, || summary.clone())?;
    ensure(elapsed < Duration::from_secs(600), || summary.clone())?;
    Ok(summary)
}

fn ablation_direction(scene: &Scene, full: &[f64]) -> Check {
    let variants: [(&str, bool, bool); 3] = [("net1", false, false), ("no-cifem", false, true), ("no-tpc", true, false)];
    let mut oa = vec![Vec::new(); 3];
    for seed in SEEDS {
        for (v, &(_, cifem, tpc)) in variants.iter().enumerate() {
            let cfg = TrainConfig {
                cifem,
                tpc,
                ..scene_config(seed)
            };
            oa[v].push(held_out_oa(&scene.cube, &scene.split, &cfg)?);
        }
    }
    let summary = format!(
        "full {:.2}% vs {}",
        100.0 * mean(full),
        variants
            .iter()
            .zip(&oa)
            .map(|((name, _, _), v)| format!("{} {:.2}%", name, 100.0 * mean(v)))
            .collect::<Vec<_>>()
            .join(", ")
    );
    for (s, (f, n)) in full.iter().zip(&oa[0]).enumerate() {
        ensure(f >= n, || format!("seed {}: full {:.4} < net1 {:.4}; {}", SEEDS[s], f, n, summary))?;
    }
    for ((name, _, _), v) in variants.iter().zip(&oa) {
        ensure(mean(full) >= mean(v), || format!("mean below {}; {}", name, summary))?;
    }
    Ok(summary)
}

// 8

fn shape_conformance() -> Check {
    let model = ok(Model::new(ModelConfig::new(2, 5, 64), 3.0, 0))?;
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 12;
    let xs: Vec<_> = (0..2)
        .map(|_| tape.constant(random(&mut rng, &[n, FEATURES, 13, 13], -1.0, 1.0)))
        .collect();
    ensure(FEATURES == 9, || format!("{} input channels", FEATURES))?;
    let out = ok(model.semantic.forward(&tape, &p, &xs, &mut NormMode::Batch))?;
    let topo = model.topo.as_ref().ok_or("model has no topology branch")?;
    for k in 0..2 {
        let widths: Vec<usize> = out.blocks[k].iter().map(|b| b.shape()[1]).collect();
        ensure(widths == [16, 32, 64], || format!("band {} block widths {:?}", k, widths))?;
        let cor = out.cor[k].ok_or("missing interaction features")?.shape();
        ensure(cor == [n, 32, 13, 13], || format!("interaction {:?}", cor))?;
        ensure(out.con[k].shape() == [n, 96, 13, 13], || format!("concat {:?}", out.con[k].shape()))?;
        ensure(out.probs[k].shape() == [n, 5], || format!("head {:?}", out.probs[k].shape()))?;

        let pooled = out.pooled[k].value();
        ensure(pooled.shape == [n, 96], || format!("pooled {:?}", pooled.shape))?;
        let graph = ok(build_graph(&pooled.data, 96, 3))?;
        let t = ok(topo.tpc_forward(&tape, &p, k, Rc::new(graph.lists().to_vec()), out.pooled[k]))?;
        let widths = [t.g1.shape()[1], t.g2.shape()[1], t.logits.shape()[1], t.probs.shape()[1]];
        ensure(widths == [64, 32, 5, 5], || format!("graph widths 96->{:?}", widths))?;
        let w1 = &model.store.get(topo.heads[k].sage1.weight).shape;
        let w2 = &model.store.get(topo.heads[k].sage2.weight).shape;
        ensure(w1 == &[64, 96] && w2 == &[32, 64], || format!("sage weights {:?} {:?}", w1, w2))?;
    }
    Ok("9->16->32->64, interaction 32, concat 96, heads 5, graph 96->64->32->5".into())
}

// 9

fn metrics_cases() -> Check {
    let m = ok(ok(ConfusionMatrix::from_counts(2, vec![40, 10, 20, 30]))?.metrics())?;
    ensure((m.kappa - 0.4).abs() <= 1e-9, || format!("kappa {}", m.kappa))?;
    let id = ok(ok(ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 9, 0, 0, 0, 1]))?.metrics())?;
    ensure(id.oa == 1.0 && id.aa == 1.0 && id.kappa == 1.0, || {
        format!("identity gives oa {} aa {} kappa {}", id.oa, id.aa, id.kappa)
    })?;
    Ok(format!("kappa {:.4}; identity 1/1/1", m.kappa))
}

// 10

struct Artifacts {
    cube: Vec<u8>,
    checkpoints: [Vec<u8>; 2],
    logs: [String; 2],
    raster: Vec<u8>,
}

fn pipeline_run() -> Result<Artifacts, String> {
    let cube = ok(generate_synthetic_scene(&SceneConfig {
        height: 48,
        width: 48,
        seed: 21,
        ..SceneConfig::default()
    }))?;
    let cfg = TrainConfig {
        epochs: 3,
        m: 8,
        samples: 8,
        batch_size: 40,
        k_neighbors: 5,
        grid_rows: 6,
        grid_cols: 6,
        seed: 9,
        ..TrainConfig::default()
    };
    let split = ok(chessboard_partition(48, 48, cfg.grid_rows, cfg.grid_cols))?;
    let black = ok(train(&cube, &split, Part::Black, &cfg))?;
    let white = ok(train(&cube, &split, Part::White, &cfg))?;
    let raster = ok(predict_image(&cube, &black.model, &white.model, &split))?;
    Ok(Artifacts {
        cube: cube.to_bytes(),
        checkpoints: [black.model.to_bytes(), white.model.to_bytes()],
        logs: [black.log_text(), white.log_text()],
        raster: raster.to_bytes(),
    })
}

fn determinism() -> Check {
    let a = pipeline_run()?;
    let b = pipeline_run()?;
    ensure(a.cube == b.cube, || "scenes differ".into())?;
    ensure(a.checkpoints == b.checkpoints, || "checkpoints differ".into())?;
    ensure(a.logs == b.logs, || "logs differ".into())?;
    ensure(a.raster == b.raster, || "rasters differ".into())?;
    Ok(format!(
        "checkpoints {}+{} bytes, logs, raster {} bytes identical",
        a.checkpoints[0].len(),
        a.checkpoints[1].len(),
        a.raster.len()
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    panic::set_hook(Box::new(|_| {}));

    let mut failed = Vec::new();
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Check| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {}", msg))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {:>2} {:<22} {} [{:.1}s]", n, name, detail, secs),
            Err(detail) => {
                println!("FAIL  {:>2} {:<22} {} [{:.1}s]", n, name, detail, secs);
                failed.push(n);
            }
        }
    };

    run(1, "gradient suite", &mut gradient_suite);
    run(2, "awf oracle", &mut awf_oracle);
    run(3, "awf invariants", &mut awf_invariants);
    run(4, "graphsage oracle", &mut graphsage_oracle);
    run(5, "sampling safety", &mut sampling_safety);
    if wanted(6) || wanted(7) {
        match default_scene() {
            Ok(scene) => {
                let mut fused = Vec::new();
                run(6, "fusion gain", &mut || fusion_gain(&scene, &mut fused));
                run(7, "ablation direction", &mut || {
                    if fused.len() != SEEDS.len() {
                        for seed in SEEDS {
                            fused.push(held_out_oa(&scene.cube, &scene.split, &scene_config(seed))?);
                        }
                    }
                    ablation_direction(&scene, &fused)
                });
            }
            Err(e) => {
                run(6, "fusion gain", &mut || Err(e.clone()));
                run(7, "ablation direction", &mut || Err(e.clone()));
            }
        }
    }
    run(8, "shape conformance", &mut shape_conformance);
    run(9, "metrics", &mut metrics_cases);
    run(10, "determinism", &mut determinism);

    if !failed.is_empty() {
        println!("acceptance: {} failed: {:?}", failed.len(), failed);
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
