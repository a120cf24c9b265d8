//! Train a one-stage network on the fixed-circle task with and without
//! coordinate channels. Colours are random, so only position identifies the
//! circle.

use locaug::data::{gen_circle_dataset, CircleTaskConfig};
use locaug::train::{train, SelectMetric, TrainConfig};
use locaug::{AugmentSpec, Normalization, ThresholdMode, Variant};

fn main() -> locaug::Result<()> {
    let train_set = gen_circle_dataset(&CircleTaskConfig::centered(64, 64, 14, 200, 100))?;
    let test_set = gen_circle_dataset(&CircleTaskConfig::centered(64, 64, 14, 50, 200))?;
    for variant in [Variant::Rgb, Variant::RgbCoord] {
        let cfg = TrainConfig {
            spec: AugmentSpec::new(variant, Normalization::UnitInterval),
            depth: 1,
            widths: vec![8],
            lr: Some(1e-2),
            epochs: 30,
            threshold: ThresholdMode::Fixed(0.5),
            select: SelectMetric::ForegroundIou,
            stop_at: Some(0.95),
            patience: Some(5),
            min_delta: 1e-4,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &train_set, Some(&test_set), |rec, _, _| {
            let iou = rec.val.as_ref().and_then(|m| m.foreground_iou()).unwrap_or(0.0);
            println!("{variant:<10} epoch {:>2} loss {:.4} test IoU {iou:.4}", rec.epoch, rec.train_loss);
            Ok(())
        })?;
        println!("{variant:<10} stopped: {}", out.stop.as_str());
    }
    Ok(())
}
