//! Side-by-side comparison of augmentation variants over several seeds.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use crate::augment::Variant;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::SegNet;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

/// Mean and extremes of a set of per-seed values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Spread { mean, min, max }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Everything but the variant and seed.
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Timing repetitions per variant; the fastest is kept.
    pub timing_trials: usize,
}

impl BenchConfig {
    pub fn new(base: TrainConfig, seeds: Vec<u64>) -> Self {
        BenchConfig {
            base,
            variants: Variant::BENCH.to_vec(),
            seeds,
            timing_trials: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub in_channels: usize,
    pub param_count: usize,
    /// Best-epoch validation score for each seed, in seed order.
    pub best: Vec<f64>,
    /// Final-epoch validation score for each seed.
    pub last: Vec<f64>,
    pub seconds_per_image: f64,
}

impl BenchRow {
    pub fn best_spread(&self) -> Spread {
        Spread::of(&self.best)
    }

    pub fn last_spread(&self) -> Spread {
        Spread::of(&self.last)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTable {
    pub metric: &'static str,
    pub seeds: Vec<u64>,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn row(&self, variant: Variant) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "metric: {}  seeds: {:?}", self.metric, self.seeds);
        let _ = writeln!(
            s,
            "{:<16} {:>3} {:>8} {:>18} {:>18} {:>12}",
            "variant", "in", "params", "best (mean±range)", "final (mean±range)", "s/image"
        );
        for r in &self.rows {
            let (b, l) = (r.best_spread(), r.last_spread());
            let _ = writeln!(
                s,
                "{:<16} {:>3} {:>8} {:>11.4}±{:<6.4} {:>11.4}±{:<6.4} {:>12.6}",
                r.variant.as_str(),
                r.in_channels,
                r.param_count,
                b.mean,
                b.range(),
                l.mean,
                l.range(),
                r.seconds_per_image
            );
        }
        s
    }
}

/// Per-image inference time of each net on an `h × w` RGB input, including
/// augmentation. Trials are interleaved across nets so that drifting machine
/// load affects all of them alike; the fastest trial per net is returned.
pub fn time_inference(nets: &[&SegNet], h: usize, w: usize, trials: usize) -> Result<Vec<f64>> {
    let rgb = Tensor::from_fn4([1, 3, h, w], |_, c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f64 / 16.0)?;
    for net in nets {
        black_box(net.predict_rgb(&rgb)?);
    }
    let mut best = vec![f64::INFINITY; nets.len()];
    for _ in 0..trials.max(1) {
        for (net, b) in nets.iter().zip(best.iter_mut()) {
            let t = Instant::now();
            black_box(net.predict_rgb(black_box(&rgb))?);
            *b = b.min(t.elapsed().as_secs_f64());
        }
    }
    Ok(best)
}

/// Train every variant with every seed on the same data and report
/// validation scores. All other settings, the data order and the shared
/// initial weights are identical across a seed's cells.
pub fn bench_variants(cfg: &BenchConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<BenchTable> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("bench needs at least one seed".into()));
    }
    if cfg.variants.is_empty() {
        return Err(Error::Config("bench needs at least one variant".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(cfg.variants.len());
    let mut timing_nets = Vec::with_capacity(cfg.variants.len());
    for &variant in &cfg.variants {
        let mut best = Vec::with_capacity(cfg.seeds.len());
        let mut last = Vec::with_capacity(cfg.seeds.len());
        let mut first_net = None;
        for &seed in &cfg.seeds {
            let mut run = cfg.base.clone();
            run.spec.variant = variant;
            run.seed = seed;
            let out = train(&run, train_set, Some(val_set), |_, _, _| Ok(()))?;
            let score = |r: Option<&MetricReport>| r.map_or(0.0, |m| run.select.score(m));
            best.push(score(out.best_metrics()));
            last.push(score(out.final_metrics()));
            first_net.get_or_insert(out.net);
        }
        let net = first_net.expect("at least one seed");
        rows.push(BenchRow {
            variant,
            in_channels: net.in_channels(),
            param_count: net.param_count(),
            best,
            last,
            seconds_per_image: 0.0,
        });
        timing_nets.push(net);
    }
    let f = 1 << cfg.base.depth;
    let (h, w) = (val_set[0].height().div_ceil(f) * f, val_set[0].width().div_ceil(f) * f);
    let refs: Vec<&SegNet> = timing_nets.iter().collect();
    let times = time_inference(&refs, h, w, cfg.timing_trials)?;
    for (row, t) in rows.iter_mut().zip(times) {
        row.seconds_per_image = t;
    }
    Ok(BenchTable {
        metric: cfg.base.select.resolved(cfg.base.task).as_str(),
        seeds: cfg.seeds.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_of_values() {
        let s = Spread::of(&[0.5, 0.7, 0.6]);
        assert!((s.mean - 0.6).abs() < 1e-15);
        assert!((s.range() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let cfg = BenchConfig::new(TrainConfig::default(), vec![]);
        assert!(matches!(bench_variants(&cfg, &[], &[]), Err(Error::Config(_))));
    }
}
