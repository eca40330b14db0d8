//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary so every line is printed and the long end-to-end
//! criteria run one after another with their own wall-clock budgets.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use labelsynth::harness::{run_experiment, run_longtail, ExperimentConfig, Session};
use labelsynth::hoff::{Tensor, TensorData};
use labelsynth::hypercolumn;
use labelsynth::image::Grid;
use labelsynth::inversion::{refine, InversionParams};
use labelsynth::label_generator::{image_uncertainty, js_divergence, EnsembleModel, TaskKind};
use labelsynth::metrics::{
    central_crop, iou, mnmse, pck, rmse_pair, MetricTable, DEPTH_MAX, DEPTH_MIN,
};
use labelsynth::net::{softmax, DenseNet, Targets};
use labelsynth::scene::{
    render_features, render_gradient, render_image, render_pixels, sample_latent, Latent,
    SceneConfig,
};
use labelsynth::synthesis::split_by_uncertainty;

const NET_GRAD_TOL: f64 = 1e-3;
const KINK_MARGIN: f32 = 1e-2;
const SCENE_GRAD_TOL: f64 = 1e-2;
const GRADIENT_BUDGET: Duration = Duration::from_secs(30);

const BALL_RADIUS_SQ: f64 = 0.5;
const BALL_SLACK: f64 = 1e-9;
const RECONSTRUCTION_RATIO: f64 = 0.25;
const INVERSION_BUDGET: Duration = Duration::from_secs(60);

const JS_TOL: f64 = 1e-9;
const REAL_TOL: f64 = 1e-9;

const MIN_MIOU: f64 = 0.85;
const MIN_PCK_10: f64 = 0.90;
const MAX_MNMSE: f64 = 0.10;
const MIN_CORRUPTION: f64 = 0.20;
const MAX_NONRARE_DROP: f64 = 0.05;
const EXPERIMENT_BUDGET: Duration = Duration::from_secs(600);
const LONGTAIL_BUDGET: Duration = Duration::from_secs(1200);

const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed < budget
}

fn desk(task: &str, seed: u64, extra: &str) -> ExperimentConfig {
    let text = format!(
        "seed = {seed}\ntask = {task}\n\
         [inversion]\niterations = 100\n\
         [label_generator]\noptimizer = adam\nlr = 0.001\n\
         [downstream]\noptimizer = adam\nlr = 0.001\n{extra}"
    );
    ExperimentConfig::parse(&text).expect("desk fixture parses")
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Every hidden pre-activation is at least `KINK_MARGIN` away from zero, so
/// finite differences never straddle a rectifier kink.
fn clear_of_kinks(net: &DenseNet, inputs: &[f32], batch: usize) -> bool {
    (1..net.layers().len()).all(|depth| {
        let head = DenseNet::from_layers(net.layers()[..depth].to_vec()).unwrap();
        head.forward(inputs, batch)
            .unwrap()
            .iter()
            .all(|z| z.abs() >= KINK_MARGIN)
    })
}

fn net_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [5, 7, 6, 4];
    let mut net = DenseNet::new(&widths, &mut rng).unwrap();
    for layer in net.layers_mut() {
        for b in &mut layer.biases {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let batch = 3;
    let inputs = loop {
        let x: Vec<f32> = (0..batch * widths[0])
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        if clear_of_kinks(&net, &x, batch) {
            break x;
        }
    };
    let classes: Vec<u32> = (0..batch).map(|_| rng.random_range(0..4)).collect();
    let values: Vec<f32> = (0..batch * 4)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let targets = if seed.is_multiple_of(2) {
        Targets::Classes(&classes)
    } else {
        Targets::Values {
            values: &values,
            weights: None,
        }
    };
    let (_, grads) = net.backward(&inputs, batch, targets).unwrap();
    let analytic: Vec<f64> = grads
        .layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.biases).map(|&v| v as f64))
        .collect();
    let h = 1e-3f32;
    let mut numeric = Vec::with_capacity(analytic.len());
    for li in 0..net.layers().len() {
        let nw = net.layers()[li].weights.len();
        let nb = net.layers()[li].biases.len();
        for k in 0..nw + nb {
            let mut probe = |delta: f32| {
                let layer = &mut net.layers_mut()[li];
                let p = if k < nw {
                    &mut layer.weights[k]
                } else {
                    &mut layer.biases[k - nw]
                };
                let old = *p;
                *p = old + delta;
                let v = net.loss(&inputs, batch, targets).unwrap();
                let layer = &mut net.layers_mut()[li];
                let p = if k < nw {
                    &mut layer.weights[k]
                } else {
                    &mut layer.biases[k - nw]
                };
                *p = old;
                v
            };
            numeric.push((probe(h) - probe(-h)) / (2.0 * h as f64));
        }
    }
    rel_err(&analytic, &numeric)
}

fn scene_grad_error(seed: u64) -> f64 {
    let c = SceneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = sample_latent(&mut rng, &c, None).unwrap();
    let n = c.resolution * c.resolution * 3;
    let cot: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic = render_gradient(&latent, &c, &cot).unwrap();
    let f = |l: &Latent| -> f64 {
        render_pixels(l, &c)
            .unwrap()
            .iter()
            .zip(&cot)
            .map(|(a, &b)| a * b as f64)
            .sum()
    };
    let h = 1e-4;
    let numeric: Vec<f64> = (0..latent.0.len())
        .map(|i| {
            let mut p = latent.clone();
            p.0[i] += h;
            let mut m = latent.clone();
            m.0[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let net_worst = (0..20).map(net_grad_error).fold(0.0, f64::max);
    let scene_worst = (0..20).map(scene_grad_error).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    Verdict::new(
        net_worst <= NET_GRAD_TOL && scene_worst <= SCENE_GRAD_TOL && within(elapsed, GRADIENT_BUDGET),
        format!(
            "net rel err {net_worst:.2e} (<= {NET_GRAD_TOL:e}), scene rel err {scene_worst:.2e} (<= {SCENE_GRAD_TOL:e}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let c = SceneConfig::default();
    let params = InversionParams::default();
    let noise = Normal::new(0.0, 0.2).unwrap();
    let (mut ball_ok, mut mono_ok, mut worst_ratio, mut worst_offset) =
        (true, true, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = sample_latent(&mut rng, &c, None).unwrap();
        let image = render_image(&truth, &c).unwrap();
        let w_e = Latent(truth.0.iter().map(|v| v + noise.sample(&mut rng)).collect());
        let r = refine(&image, &w_e, &params, &c).unwrap();
        let offset = r.offsets.iter().copied().fold(0.0, f64::max);
        worst_offset = worst_offset.max(offset);
        ball_ok &= offset <= BALL_RADIUS_SQ + BALL_SLACK;
        mono_ok &= r.trajectory.windows(2).all(|w| w[1] <= w[0]);
        worst_ratio = worst_ratio.max(r.reconstruction_error / r.initial_error);
    }
    let elapsed = t.elapsed();
    Verdict::new(
        ball_ok && mono_ok && worst_ratio <= RECONSTRUCTION_RATIO && within(elapsed, INVERSION_BUDGET),
        format!(
            "max ‖w−w_e‖² {worst_offset:.6}, monotone {mono_ok}, worst error ratio {worst_ratio:.4} (<= {RECONSTRUCTION_RATIO}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| {
            if rng.random_bool(0.15) {
                0.0
            } else {
                rng.random_range(0.0..1.0f64).powi(3)
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut d = vec![0.0; k];
        d[rng.random_range(0..k)] = 1.0;
        d
    } else {
        raw.iter().map(|v| v / s).collect()
    }
}

fn js_oracle(dists: &[Vec<f64>]) -> f64 {
    let m = dists.len() as f64;
    let h = |p: &[f64]| -> f64 {
        let mut s = 0.0;
        for &v in p {
            if v > 0.0 {
                s -= v * v.ln();
            }
        }
        s
    };
    let k = dists[0].len();
    let mut mean = vec![0.0; k];
    for d in dists {
        for c in 0..k {
            mean[c] += d[c] / m;
        }
    }
    let mut avg = 0.0;
    for d in dists {
        avg += h(d) / m;
    }
    h(&mean) - avg
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut range_ok, mut worst_diff) = (true, 0.0f64);
    for _ in 0..1000 {
        let m = rng.random_range(2..=10);
        let k = rng.random_range(2..=6);
        let dists: Vec<Vec<f64>> = (0..m).map(|_| random_dist(&mut rng, k)).collect();
        let js = js_divergence(&dists);
        let oracle = js_oracle(&dists);
        range_ok &= (0.0..=(m as f64).ln()).contains(&js);
        range_ok &= oracle >= -REAL_TOL && oracle <= (m as f64).ln() + REAL_TOL;
        worst_diff = worst_diff.max((js - oracle).abs());
    }
    let mut identical_worst = 0.0f64;
    for _ in 0..100 {
        let d = random_dist(&mut rng, 5);
        let m = rng.random_range(2..=10);
        identical_worst = identical_worst.max(js_divergence(&vec![d; m]));
    }
    let orthogonal = js_divergence(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let orth_ok = (orthogonal - 2f64.ln()).abs() <= JS_TOL;

    let scene = SceneConfig::default();
    let latent = sample_latent(&mut rng, &scene, None).unwrap();
    let field = hypercolumn::build(
        &render_features(&latent, &scene).unwrap(),
        scene.resolution,
        None,
    )
    .unwrap();
    let members: Vec<DenseNet> = (0..5)
        .map(|_| DenseNet::new(&[field.channels(), 16, 8, 5], &mut rng).unwrap())
        .collect();
    let model = EnsembleModel {
        task: TaskKind::Discrete { classes: 5 },
        seeds: (0..5).collect(),
        final_losses: vec![0.0; 5],
        members,
    };
    let (_, map) = model.predict(&field).unwrap();
    let px = field.res() * field.res();
    let outs: Vec<Vec<f32>> = model
        .members
        .iter()
        .map(|n| n.forward(field.data(), px).unwrap())
        .collect();
    let mut loop_total = 0.0;
    for p in 0..px {
        let dists: Vec<Vec<f64>> = outs
            .iter()
            .map(|o| softmax(&o[p * 5..(p + 1) * 5]))
            .collect();
        loop_total += js_divergence(&dists);
    }
    let exact = image_uncertainty(&map) == loop_total;
    Verdict::new(
        range_ok && worst_diff <= JS_TOL && identical_worst <= JS_TOL && orth_ok && exact,
        format!(
            "range ok {range_ok}, |JS − oracle| ≤ {worst_diff:.1e}, identical ≤ {identical_worst:.1e}, orthogonal {orthogonal:.12}, image sum exact {exact}"
        ),
    )
}

fn iou_oracle(pred: &[u32], truth: &[u32], classes: usize) -> Vec<(u64, u64)> {
    (0..classes as u32)
        .map(|c| {
            let mut i = 0;
            let mut u = 0;
            for (&p, &t) in pred.iter().zip(truth) {
                if p == c && t == c {
                    i += 1;
                }
                if p == c || t == c {
                    u += 1;
                }
            }
            (i, u)
        })
        .collect()
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for case in 0..100 {
        let n = rng.random_range(2..=9);
        let classes = rng.random_range(2..=5);
        let pred: Vec<u32> = (0..n * n)
            .map(|_| rng.random_range(0..classes as u32))
            .collect();
        let truth: Vec<u32> = (0..n * n)
            .map(|_| rng.random_range(0..classes as u32))
            .collect();
        let score = iou(
            &Grid::from_vec(n, pred.clone()).unwrap(),
            &Grid::from_vec(n, truth.clone()).unwrap(),
            classes,
        )
        .unwrap();
        let counts = iou_oracle(&pred, &truth, classes);
        let mut defined = Vec::new();
        for (c, &(i, u)) in counts.iter().enumerate() {
            let want = (u > 0).then(|| i as f64 / u as f64);
            if score.per_class[c] != want {
                failures.push(format!("iou case {case} class {c}"));
            }
            defined.extend(want);
        }
        if (score.miou - defined.iter().sum::<f64>() / defined.len() as f64).abs() > REAL_TOL {
            failures.push(format!("miou case {case}"));
        }
    }
    for case in 0..100 {
        let k = rng.random_range(1..=8);
        let truth: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)))
            .collect();
        let pred: Vec<(f64, f64)> = truth
            .iter()
            .map(|&(x, y)| {
                (
                    x + rng.random_range(-4.0..4.0),
                    y + rng.random_range(-4.0..4.0),
                )
            })
            .collect();
        let mut vis: Vec<bool> = (0..k).map(|_| rng.random_bool(0.8)).collect();
        vis[0] = true;
        let idx: Vec<usize> = (0..k).filter(|&i| vis[i]).collect();
        let xs = idx.iter().map(|&i| truth[i].0);
        let ys = idx.iter().map(|&i| truth[i].1);
        let w = xs.clone().fold(f64::MIN, f64::max) - xs.fold(f64::MAX, f64::min);
        let h = ys.clone().fold(f64::MIN, f64::max) - ys.fold(f64::MAX, f64::min);
        let mut prev = 1.0;
        for alpha in [0.10, 0.05, 0.02] {
            let thr = alpha * w.max(h);
            let mut hit = 0;
            for &i in &idx {
                let d =
                    ((pred[i].0 - truth[i].0).powi(2) + (pred[i].1 - truth[i].1).powi(2)).sqrt();
                if d <= thr {
                    hit += 1;
                }
            }
            let got = pck(&pred, &truth, &vis, alpha).unwrap();
            if got != hit as f64 / idx.len() as f64 {
                failures.push(format!("pck case {case} alpha {alpha}"));
            }
            if got > prev {
                failures.push(format!("pck monotonicity case {case}"));
            }
            prev = got;
        }
    }
    for case in 0..100 {
        let n = rng.random_range(2..=9);
        let truth: Vec<f32> = (0..n * n).map(|_| rng.random_range(1.0..80.0)).collect();
        let pred: Vec<f32> = truth
            .iter()
            .map(|t| t + rng.random_range(-5.0..5.0))
            .collect();
        let mut valid: Vec<bool> = (0..n * n).map(|_| rng.random_bool(0.75)).collect();
        valid[0] = true;
        let (mut e, mut z) = (0.0, 0.0);
        for i in 0..n * n {
            if valid[i] {
                e += (pred[i] as f64 - truth[i] as f64).powi(2);
                z += (truth[i] as f64).powi(2);
            }
        }
        let got = mnmse(
            &Grid::from_vec(n, pred.clone()).unwrap(),
            &Grid::from_vec(n, truth.clone()).unwrap(),
            &Grid::from_vec(n, valid).unwrap(),
        )
        .unwrap();
        if (got - e / z).abs() > REAL_TOL {
            failures.push(format!("mnmse case {case}"));
        }
        let (start, len) = central_crop(n);
        let (mut sq, mut sl, mut count) = (0.0, 0.0, 0.0);
        for y in start..start + len {
            for x in start..start + len {
                let p = (pred[y * n + x] as f64).clamp(DEPTH_MIN, DEPTH_MAX);
                let t = (truth[y * n + x] as f64).clamp(DEPTH_MIN, DEPTH_MAX);
                sq += (p - t).powi(2);
                sl += (p.ln() - t.ln()).powi(2);
                count += 1.0;
            }
        }
        let (rmse, rmse_log) = rmse_pair(
            &Grid::from_vec(n, pred).unwrap(),
            &Grid::from_vec(n, truth).unwrap(),
        )
        .unwrap();
        if (rmse - (sq / count).sqrt()).abs() > REAL_TOL
            || (rmse_log - (sl / count).sqrt()).abs() > REAL_TOL
        {
            failures.push(format!("rmse case {case}"));
        }
    }
    let mut cases = vec![(10_000usize, 1u64, 10u64)];
    while cases.len() < 50 {
        cases.push((rng.random_range(1..=2000), rng.random_range(0..20), 20));
    }
    for &(n, num, den) in &cases {
        let fraction = num as f64 / den as f64;
        let want_rejected = (num as usize * n).div_ceil(den as usize);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (kept, rejected) = split_by_uncertainty(&u, fraction).unwrap();
        let floor = kept.iter().map(|&i| u[i]).fold(f64::MIN, f64::max);
        let ceiling = rejected.iter().map(|&i| u[i]).fold(f64::MAX, f64::min);
        if rejected.len() != want_rejected
            || kept.len() + rejected.len() != n
            || (!rejected.is_empty() && !kept.is_empty() && floor > ceiling)
        {
            failures.push(format!("filter n {n} fraction {fraction}"));
        }
    }
    let (kept, _) = split_by_uncertainty(&vec![0.5; 10_000], 0.1).unwrap();
    if kept.len() != 9_000 {
        failures.push("10000 -> 9000".into());
    }
    let pass = failures.is_empty();
    Verdict::new(
        pass,
        if pass {
            "iou, pck, mnmse, rmse match loop oracles on 100 grids each; pck monotone; 50 filter cases exact".to_string()
        } else {
            format!("mismatches: {}", failures.join("; "))
        },
    )
}

fn scratch(name: &str) -> tempfile::TempDir {
    tempfile::Builder::new().prefix(name).tempdir().unwrap()
}

fn aggregate(table: &MetricTable, column: &str) -> f64 {
    table.get("all", column).unwrap_or(f64::NAN)
}

fn criterion_5() -> (Verdict, Option<String>) {
    let t = Instant::now();
    let dir = scratch("segmentation");
    let mut parts = Vec::new();
    let mut pass = true;
    let mut first_csv = None;
    for seed in SEEDS {
        let cfg = desk("segmentation", seed, "[evaluation]\nbaseline = true\n");
        let out = run_experiment(&cfg, &dir.path().join(seed.to_string())).unwrap();
        let main = aggregate(&out.metrics, "miou");
        let base = aggregate(out.baseline.as_ref().unwrap(), "miou");
        pass &= main >= MIN_MIOU && main > base;
        parts.push(format!("seed {seed}: {main:.4} vs baseline {base:.4}"));
        if first_csv.is_none() {
            first_csv = Some(out.metrics.to_csv());
        }
    }
    let elapsed = t.elapsed();
    pass &= within(elapsed, EXPERIMENT_BUDGET);
    (
        Verdict::new(
            pass,
            format!(
                "mIOU {} (>= {MIN_MIOU}, > baseline), {:.0}s",
                parts.join(", "),
                elapsed.as_secs_f64()
            ),
        ),
        first_csv,
    )
}

fn criterion_6() -> Verdict {
    let t = Instant::now();
    let dir = scratch("keypoints");
    let mut parts = Vec::new();
    let (mut ordered, mut pck_ok) = (0, true);
    for seed in SEEDS {
        let cfg = desk("keypoints", seed, "");
        let out = run_experiment(&cfg, &dir.path().join(seed.to_string())).unwrap();
        let [p10, p05, p02] =
            ["pck_0.10", "pck_0.05", "pck_0.02"].map(|c| aggregate(&out.metrics, c));
        pck_ok &= p10 >= MIN_PCK_10;
        if p02 < p05 && p05 < p10 {
            ordered += 1;
        }
        parts.push(format!("seed {seed}: {p10:.4}/{p05:.4}/{p02:.4}"));
    }
    let elapsed = t.elapsed();
    Verdict::new(
        pck_ok && ordered >= 2 && within(elapsed, EXPERIMENT_BUDGET),
        format!(
            "PCK-0.1/0.05/0.02 {} (PCK-0.1 >= {MIN_PCK_10}); strictly ordered on {ordered}/3; {:.0}s",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Verdict {
    let t = Instant::now();
    let dir = scratch("depth");
    let cfg = desk("depth", SEEDS[0], "");
    let out = run_experiment(&cfg, dir.path()).unwrap();
    let value = aggregate(&out.metrics, "mnmse");
    let elapsed = t.elapsed();
    Verdict::new(
        cfg.corrupt_fraction >= MIN_CORRUPTION
            && value <= MAX_MNMSE
            && within(elapsed, EXPERIMENT_BUDGET),
        format!(
            "mNMSE {value:.4} (<= {MAX_MNMSE}) with {:.0}% of depth pixels corrupted, {:.0}s",
            cfg.corrupt_fraction * 100.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn column(table: &labelsynth::harness::SweepTable, name: &str) -> Vec<f64> {
    table
        .column(name)
        .unwrap()
        .iter()
        .map(|v| v.parse().unwrap_or(f64::NAN))
        .collect()
}

fn criterion_8() -> Verdict {
    let t = Instant::now();
    let dir = scratch("longtail");
    let extra = "[pool]\nsize = 16\n[synthesis]\nn = 200\n[evaluation]\nrare_bias = 0.5\n";
    let (mut first, mut last, mut nonrare_first, mut nonrare_last) = (0.0, 0.0, 0.0, 0.0);
    let mut add_wins = 0;
    let mut add_parts = Vec::new();
    for seed in SEEDS {
        let session = Session::default();
        let mut cfg = desk("segmentation", seed, extra);
        let sub = run_longtail(&cfg, &dir.path().join(format!("sub_{seed}")), &session).unwrap();
        let rare = column(&sub, "rare_iou");
        let nonrare = column(&sub, "nonrare_miou");
        first += rare[0] / SEEDS.len() as f64;
        last += rare[rare.len() - 1] / SEEDS.len() as f64;
        nonrare_first += nonrare[0] / SEEDS.len() as f64;
        nonrare_last += nonrare[nonrare.len() - 1] / SEEDS.len() as f64;

        cfg.set("longtail.mode", "add").unwrap();
        let add = run_longtail(&cfg, &dir.path().join(format!("add_{seed}")), &session).unwrap();
        let rare = column(&add, "rare_iou");
        let arms = add.column("arm").unwrap();
        let plus: Vec<f64> = rare
            .iter()
            .zip(&arms)
            .filter(|(_, a)| **a == "+rare")
            .map(|(v, _)| *v)
            .collect();
        let minus: Vec<f64> = rare
            .iter()
            .zip(&arms)
            .filter(|(_, a)| **a == "-rare")
            .map(|(v, _)| *v)
            .collect();
        if plus.len() == minus.len() && plus.iter().zip(&minus).all(|(p, m)| p > m) {
            add_wins += 1;
        }
        add_parts.push(format!("seed {seed} +{plus:.3?} −{minus:.3?}"));
    }
    let elapsed = t.elapsed();
    let drop = nonrare_first - nonrare_last;
    Verdict::new(
        last > first && drop < MAX_NONRARE_DROP && add_wins == SEEDS.len() && within(elapsed, LONGTAIL_BUDGET),
        format!(
            "rare IOU {first:.4} -> {last:.4}, non-rare drop {drop:.4} (< {MAX_NONRARE_DROP}); addition {add_wins}/3 [{}]; {:.0}s",
            add_parts.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng) -> Tensor {
    let rank = rng.random_range(0..=4);
    let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(0..=6)).collect();
    let len: usize = dims.iter().product();
    if rng.random_bool(0.5) {
        let specials = [
            f32::NAN,
            -0.0,
            f32::INFINITY,
            f32::NEG_INFINITY,
            f32::MIN_POSITIVE / 2.0,
        ];
        let data = (0..len)
            .map(|_| {
                if rng.random_bool(0.1) {
                    specials[rng.random_range(0..specials.len())]
                } else {
                    f32::from_bits(rng.random())
                }
            })
            .collect();
        Tensor::f32(dims, data)
    } else {
        Tensor::u8(dims, (0..len).map(|_| rng.random()).collect())
    }
}

fn bits(t: &Tensor) -> (Vec<usize>, Vec<u32>) {
    let data = match t.data() {
        TensorData::F32(v) => v.iter().map(|x| x.to_bits()).collect(),
        TensorData::U8(v) => v.iter().map(|&x| x as u32).collect(),
    };
    (t.dims().to_vec(), data)
}

fn criterion_9(first_csv: Option<String>) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = scratch("determinism");
    let mut hoff_ok = true;
    for i in 0..50 {
        let t = random_tensor(&mut rng);
        let path = dir.path().join(format!("t{i}.hoff"));
        t.write(&path).unwrap();
        let back = Tensor::read(&path).unwrap();
        hoff_ok &= bits(&back) == bits(&t) && back.to_bytes() == t.to_bytes();
    }
    let rerun = run_experiment(
        &desk("segmentation", SEEDS[0], "[evaluation]\nbaseline = true\n"),
        &dir.path().join("rerun"),
    )
    .unwrap();
    let csv_ok = first_csv.as_deref() == Some(rerun.metrics.to_csv().as_str())
        && std::fs::read(Path::new(&rerun.dir).join("metrics.csv")).unwrap()
            == rerun.metrics.to_csv().into_bytes();
    Verdict::new(
        hoff_ok && csv_ok,
        format!(
            "HOFF bitwise round trip on 50 tensors {hoff_ok}; rerun metrics CSV identical {csv_ok}"
        ),
    )
}

type Check = Box<dyn FnOnce() -> Verdict>;

fn main() -> ExitCode {
    let mut verdicts = vec![
        ("gradient suites", criterion_1()),
        ("inversion contract", criterion_2()),
        ("uncertainty math", criterion_3()),
        ("metric oracles", criterion_4()),
    ];
    for (i, (name, v)) in verdicts.iter().enumerate() {
        report(i + 1, name, v);
    }
    let (v5, csv) = criterion_5();
    report(5, "segmentation end to end", &v5);
    verdicts.push(("segmentation end to end", v5));
    let late: [(&str, Check); 4] = [
        ("keypoints end to end", Box::new(criterion_6)),
        ("depth end to end", Box::new(criterion_7)),
        ("long-tail sweeps", Box::new(criterion_8)),
        ("determinism", Box::new(move || criterion_9(csv))),
    ];
    for (name, run) in late {
        let v = run();
        report(verdicts.len() + 1, name, &v);
        verdicts.push((name, v));
    }
    let failed = verdicts.iter().filter(|(_, v)| !v.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        verdicts.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn report(index: usize, name: &str, v: &Verdict) {
    println!(
        "criterion {index} {name}: {} ({})",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
}
