//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! Runs as a plain binary so the criteria execute in order and can share
//! trained networks. Pass a substring of a criterion name to run a subset.

use std::process::ExitCode;
use std::time::Instant;

use locaug::bench::time_inference;
use locaug::data::{gen_circle_dataset, gen_location_bias_dataset, CircleTaskConfig, LocationBiasConfig, Sample};
use locaug::gradcheck::{run_gradchecks, stock_cases};
use locaug::metrics::{evaluate_predictions, f_measure, ConfusionMatrix, DEFAULT_BETA2};
use locaug::train::{content_hash, train, SelectMetric, TrainConfig};
use locaug::{AugmentSpec, Normalization, Result, SegNet, SegNetConfig, Task, Tensor, ThresholdMode, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

const GRAD_INSTANCES: usize = 20;
const GRAD_BUDGET_SECS: f64 = 120.0;

const ORACLE_PAIRS: usize = 1000;
const ORACLE_TOL: f64 = 1e-12;

const CIRCLE_SIZE: usize = 64;
const CIRCLE_RADIUS: usize = 14;
const CIRCLE_TRAIN: usize = 200;
const CIRCLE_TEST: usize = 50;
const CIRCLE_EPOCHS: usize = 200;
const CIRCLE_LR: f64 = 1e-2;
const CIRCLE_TARGET_IOU: f64 = 0.95;
const CIRCLE_RGB_CEILING: f64 = 0.60;
const CIRCLE_MIN_SUCCESSES: usize = 4;
const CIRCLE_BUDGET_SECS: f64 = 15.0 * 60.0;
const SHALLOW_WIDTHS: [usize; 1] = [8];
const DEEP_WIDTHS: [usize; 4] = [8, 8, 8, 8];
const PLATEAU_PATIENCE: usize = 5;
const PLATEAU_MIN_DELTA: f64 = 1e-4;

const SQUARES_SIZE: usize = 32;
const SQUARES_COUNT: usize = 3;
const SQUARES_SIDE: usize = 6;
const SQUARES_TRAIN: usize = 200;
const SQUARES_TEST: usize = 100;
const SQUARES_EPOCHS: usize = 60;
const SQUARES_LR: f64 = 5e-3;
const SQUARES_WIDTHS: [usize; 2] = [8, 16];

const OVERHEAD_SIZE: usize = 128;
const OVERHEAD_TRIALS: usize = 30;
const OVERHEAD_BOUND: f64 = 0.25;

const SHIFT_TOL: f64 = 1e-9;
const SHIFT_BREAK_MIN: f64 = 1e-6;

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

/// Trained circle networks shared between criteria.
#[derive(Default)]
struct Shared {
    shallow_rgb_iou: Vec<f64>,
    coord_seed0_hash: Option<String>,
}

fn circle_data() -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train_cfg = CircleTaskConfig::centered(CIRCLE_SIZE, CIRCLE_SIZE, CIRCLE_RADIUS, CIRCLE_TRAIN, 100);
    let test_cfg = CircleTaskConfig::centered(CIRCLE_SIZE, CIRCLE_SIZE, CIRCLE_RADIUS, CIRCLE_TEST, 200);
    Ok((gen_circle_dataset(&train_cfg)?, gen_circle_dataset(&test_cfg)?))
}

/// Identical protocol for every circle run: fixed 0.5 threshold, foreground
/// IoU, stop at the target or on a training-loss plateau.
fn circle_config(variant: Variant, widths: &[usize], seed: u64) -> TrainConfig {
    TrainConfig {
        spec: AugmentSpec::new(variant, Normalization::UnitInterval),
        depth: widths.len(),
        widths: widths.to_vec(),
        lr: Some(CIRCLE_LR),
        epochs: CIRCLE_EPOCHS,
        seed,
        threshold: ThresholdMode::Fixed(0.5),
        select: SelectMetric::ForegroundIou,
        stop_at: Some(CIRCLE_TARGET_IOU),
        patience: Some(PLATEAU_PATIENCE),
        min_delta: PLATEAU_MIN_DELTA,
        ..TrainConfig::default()
    }
}

/// Highest test IoU over the run, the epochs run, and the final model hash.
fn circle_run(cfg: &TrainConfig, data: &(Vec<Sample>, Vec<Sample>)) -> Result<(f64, usize, String)> {
    let out = train(cfg, &data.0, Some(&data.1), |_, _, _| Ok(()))?;
    let best = out.best_metrics().and_then(|m| m.foreground_iou()).unwrap_or(0.0);
    Ok((best, out.history.len(), content_hash(&out.net.save())))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn gradients() -> Result<Verdict> {
    let t = Instant::now();
    let report = run_gradchecks(&stock_cases(), GRAD_INSTANCES, 2024)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| (a.max_rel_err / a.tolerance).total_cmp(&(b.max_rel_err / b.tolerance)))
        .expect("stock cases");
    let pass = report.all_passed() && secs <= GRAD_BUDGET_SECS;
    Ok(Verdict::new(
        pass,
        format!(
            "{} cases x {} instances; closest to tolerance: {} {:.2e} (tol {:.0e}); failures {:?}; {:.1} s",
            report.entries.len(),
            GRAD_INSTANCES,
            worst.name,
            worst.max_rel_err,
            worst.tolerance,
            report.failures(),
            secs
        ),
    ))
}

fn count_f(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == 1.0, g == 1.0) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    let (p, r) = if tp + fp == 0.0 && tp + fneg == 0.0 {
        (1.0, 1.0)
    } else {
        let div = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        (div(tp, tp + fp), div(tp, tp + fneg))
    };
    let b2 = DEFAULT_BETA2;
    if b2 * p + r == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / (b2 * p + r)
    }
}

fn count_miou(pred: &[f64], gt: &[f64], k: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..k {
        let c = c as f64;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == 255.0 {
                continue;
            }
            inter += usize::from(p == c && g == c);
            union += usize::from(p == c || g == c);
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

fn metric_oracles() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for i in 0..ORACLE_PAIRS {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let density = rng.random::<f64>();
        let mut draw = |k: usize| -> Vec<f64> {
            (0..h * w)
                .map(|_| {
                    if k == 2 {
                        f64::from(u8::from(rng.random_bool(density)))
                    } else if rng.random_bool(0.1) {
                        255.0
                    } else {
                        rng.random_range(0..k) as f64
                    }
                })
                .collect()
        };
        // binary pairs on even draws, 4-class pairs with ignored pixels on odd
        if i % 2 == 0 {
            let (p, g) = (draw(2), draw(2));
            let report = evaluate_predictions(
                &[Tensor::new(vec![h, w], p.clone())?],
                &[Tensor::new(vec![h, w], g.clone())?],
                Task::Saliency,
                ThresholdMode::Fixed(0.5),
                DEFAULT_BETA2,
            )?;
            worst = worst.max((report.f_beta.unwrap_or(f64::NAN) - count_f(&p, &g)).abs());
            worst = worst.max((report.mean_iou - count_miou(&p, &g, 2)).abs());
        } else {
            let g = draw(4);
            let p: Vec<f64> = draw(4).into_iter().map(|v| if v == 255.0 { 0.0 } else { v }).collect();
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&p, &g)?;
            worst = worst.max((cm.mean_iou() - count_miou(&p, &g, 4)).abs());
        }
    }
    let identity = (0..=1000)
        .map(|i| {
            let p = i as f64 / 1000.0;
            (f_measure(p, p, DEFAULT_BETA2) - p).abs()
        })
        .fold(0.0, f64::max);
    Ok(Verdict::new(
        worst <= ORACLE_TOL && identity <= ORACLE_TOL,
        format!("{ORACLE_PAIRS} mask pairs, max deviation {worst:.1e}; F(p,p)=p max deviation {identity:.1e}"),
    ))
}

fn circle_learnability(shared: &mut Shared) -> Result<Verdict> {
    let t = Instant::now();
    let data = circle_data()?;
    let mut coord = Vec::new();
    let mut coord_epochs = Vec::new();
    let mut rgb = Vec::new();
    let mut rgb_epochs = Vec::new();
    for seed in SEEDS {
        let (iou, epochs, hash) = circle_run(&circle_config(Variant::RgbCoord, &SHALLOW_WIDTHS, seed), &data)?;
        coord.push(iou);
        coord_epochs.push(epochs);
        if seed == SEEDS[0] {
            shared.coord_seed0_hash = Some(hash);
        }
        let (iou, epochs, _) = circle_run(&circle_config(Variant::Rgb, &SHALLOW_WIDTHS, seed), &data)?;
        rgb.push(iou);
        rgb_epochs.push(epochs);
    }
    shared.shallow_rgb_iou = rgb.clone();
    let secs = t.elapsed().as_secs_f64();
    let successes = coord.iter().filter(|&&v| v >= CIRCLE_TARGET_IOU).count();
    let rgb_max = rgb.iter().copied().fold(0.0, f64::max);
    let pass = successes >= CIRCLE_MIN_SUCCESSES && rgb_max <= CIRCLE_RGB_CEILING && secs <= CIRCLE_BUDGET_SECS;
    Ok(Verdict::new(
        pass,
        format!(
            "rgb+coord IoU {} (epochs {:?}), {successes}/5 >= {CIRCLE_TARGET_IOU}; rgb IoU {} (epochs {:?}), max {rgb_max:.4} <= {CIRCLE_RGB_CEILING}; {secs:.0} s",
            fmt_list(&coord),
            coord_epochs,
            fmt_list(&rgb),
            rgb_epochs
        ),
    ))
}

fn depth_border_cue(shared: &Shared) -> Result<Verdict> {
    let data = circle_data()?;
    let mut deep = Vec::new();
    for seed in SEEDS {
        deep.push(circle_run(&circle_config(Variant::Rgb, &DEEP_WIDTHS, seed), &data)?.0);
    }
    let (m_deep, m_shallow) = (median(&deep), median(&shared.shallow_rgb_iou));
    Ok(Verdict::new(
        m_deep > m_shallow,
        format!(
            "median IoU depth 4 {m_deep:.4} {} vs depth 1 {m_shallow:.4} {}",
            fmt_list(&deep),
            fmt_list(&shared.shallow_rgb_iou)
        ),
    ))
}

/// Best-epoch test F per seed; coordinates and distance in [-1, 1] for every
/// variant.
fn location_bias_ordering() -> Result<Verdict> {
    let mk = |count, seed| LocationBiasConfig::new(SQUARES_SIZE, SQUARES_SIZE, SQUARES_COUNT, SQUARES_SIDE, count, seed);
    let train_set = gen_location_bias_dataset(&mk(SQUARES_TRAIN, 11))?;
    let test_set = gen_location_bias_dataset(&mk(SQUARES_TEST, 12))?;
    let mut scores = Vec::new();
    for variant in [Variant::Rgb, Variant::RgbDist, Variant::RgbCoord] {
        let mut per_seed = Vec::new();
        for seed in SEEDS {
            let cfg = TrainConfig {
                spec: AugmentSpec::new(variant, Normalization::Symmetric),
                depth: SQUARES_WIDTHS.len(),
                widths: SQUARES_WIDTHS.to_vec(),
                lr: Some(SQUARES_LR),
                epochs: SQUARES_EPOCHS,
                seed,
                ..TrainConfig::default()
            };
            let out = train(&cfg, &train_set, Some(&test_set), |_, _, _| Ok(()))?;
            per_seed.push(out.best_metrics().and_then(|m| m.f_beta).unwrap_or(0.0));
        }
        scores.push((variant, per_seed));
    }
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let range = v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
        (mean, range)
    };
    let (rgb_mean, rgb_range) = stats(&scores[0].1);
    let mut pass = true;
    let mut detail = format!("rgb F {rgb_mean:.4}±{rgb_range:.4} {}", fmt_list(&scores[0].1));
    for (variant, v) in &scores[1..] {
        let (mean, range) = stats(v);
        let margin = mean - rgb_mean;
        let needed = range.max(rgb_range);
        pass &= margin > needed;
        detail += &format!("; {variant} F {mean:.4}±{range:.4} {} margin {margin:.4} vs range {needed:.4}", fmt_list(v));
    }
    Ok(Verdict::new(pass, detail))
}

fn param_count_identity() -> Result<Verdict> {
    let mut checked = 0;
    let mut bad = Vec::new();
    for depth in 1..=5 {
        for widths in [locaug::model::default_widths(depth), vec![3; depth]] {
            let count = |v: Variant| -> Result<usize> {
                let spec = AugmentSpec::new(v, Normalization::UnitInterval);
                Ok(SegNet::build(SegNetConfig::new(depth, spec).widths(widths.clone()))?.param_count())
            };
            let base = count(Variant::Rgb)?;
            for v in Variant::ALL {
                let delta = count(v)? - base;
                let want = v.extra_channels() * 9 * widths[0];
                checked += 1;
                if delta != want {
                    bad.push(format!("depth {depth} {v}: {delta} != {want}"));
                }
            }
        }
    }
    Ok(Verdict::new(bad.is_empty(), format!("{checked} (depth, widths, variant) cells; mismatches {bad:?}")))
}

fn inference_overhead() -> Result<Verdict> {
    let build = |v: Variant| SegNet::build(SegNetConfig::new(2, AugmentSpec::new(v, Normalization::UnitInterval)));
    let rgb = build(Variant::Rgb)?;
    let full = build(Variant::RgbDistCoord)?;
    let times = time_inference(&[&rgb, &full], OVERHEAD_SIZE, OVERHEAD_SIZE, OVERHEAD_TRIALS)?;
    let overhead = times[1] / times[0] - 1.0;
    Ok(Verdict::new(
        overhead <= OVERHEAD_BOUND,
        format!(
            "depth 2, {OVERHEAD_SIZE}x{OVERHEAD_SIZE}: rgb {:.5} s, rgb+dist+coord {:.5} s, overhead {:.1}% (bound {:.0}%)",
            times[0],
            times[1],
            overhead * 100.0,
            OVERHEAD_BOUND * 100.0
        ),
    ))
}

fn determinism(shared: &Shared) -> Result<Verdict> {
    let data = circle_data()?;
    let cfg = circle_config(Variant::RgbCoord, &SHALLOW_WIDTHS, SEEDS[0]);
    let first = match &shared.coord_seed0_hash {
        Some(h) => h.clone(),
        None => circle_run(&cfg, &data)?.2,
    };
    let again = circle_run(&cfg, &data)?.2;
    Ok(Verdict::new(first == again, format!("model hash {first} / {again}")))
}

fn roll(x: &Tensor, s: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Tensor::from_fn4([n, c, h, w], |ni, ci, y, xx| x.at4(ni, ci, (y + h - s) % h, (xx + w - s) % w))
}

/// Largest interior mismatch between "shift then predict" and "predict then
/// shift". The margin bounds the receptive-field radius of a depth-d net.
fn shift_discrepancy(variant: Variant, depth: usize, size: usize) -> Result<f64> {
    let spec = AugmentSpec::new(variant, Normalization::UnitInterval);
    let net = SegNet::build(SegNetConfig::new(depth, spec).seed(11))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn4([1, 3, size, size], |_, _, _, _| rng.random())?;
    let shift = 1 << depth;
    let margin = 6 << depth;
    let y = net.predict_rgb(&x)?;
    let ys = net.predict_rgb(&roll(&x, shift)?)?;
    let mut worst: f64 = 0.0;
    for i in margin + shift..size - margin {
        for j in margin + shift..size - margin {
            worst = worst.max((ys.at4(0, 0, i, j) - y.at4(0, 0, i - shift, j - shift)).abs());
        }
    }
    Ok(worst)
}

fn translation_pair() -> Result<Verdict> {
    let mut rgb = Vec::new();
    for (depth, size) in [(1, 64), (2, 64), (3, 128)] {
        rgb.push(shift_discrepancy(Variant::Rgb, depth, size)?);
    }
    let coord = shift_discrepancy(Variant::RgbCoord, 2, 64)?;
    let rgb_max = rgb.iter().copied().fold(0.0, f64::max);
    Ok(Verdict::new(
        rgb_max <= SHIFT_TOL && coord > SHIFT_BREAK_MIN,
        format!(
            "rgb interior discrepancy by depth 1..3 [{}] (tol {SHIFT_TOL:.0e}); rgb+coord {coord:.3e} (> {SHIFT_BREAK_MIN:.0e})",
            rgb.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut ran = 0;

    type Check<'a> = Box<dyn FnMut(&mut Shared) -> Result<Verdict> + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("criterion_1_gradient_correctness", Box::new(|_| gradients())),
        ("criterion_2_metric_oracles", Box::new(|_| metric_oracles())),
        ("criterion_3_circle_learnability", Box::new(circle_learnability)),
        ("criterion_4_zero_padding_border_cue", Box::new(|s| depth_border_cue(s))),
        ("criterion_5_location_bias_ordering", Box::new(|_| location_bias_ordering())),
        ("criterion_6_parameter_count_identity", Box::new(|_| param_count_identity())),
        ("criterion_7_inference_overhead", Box::new(|_| inference_overhead())),
        ("criterion_8_determinism", Box::new(|s| determinism(s))),
        ("criterion_9_translation_property_pair", Box::new(|_| translation_pair())),
    ];
    for (name, mut check) in criteria {
        if !selected(name) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let verdict = check(&mut shared).unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        let status = if verdict.pass { "PASS" } else { "FAIL" };
        println!("{status} {name} ({:.1} s): {}", t.elapsed().as_secs_f64(), verdict.detail);
        failed += usize::from(!verdict.pass);
    }
    println!("acceptance: {} run, {} passed, {} failed", ran, ran - failed, failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
