//! Compare input variants on the nearest-to-centre square task over a few
//! seeds and print the benchmark table.

use locaug::bench::{bench_variants, BenchConfig};
use locaug::data::{gen_location_bias_dataset, LocationBiasConfig};
use locaug::train::TrainConfig;
use locaug::{AugmentSpec, Normalization, Variant};

fn main() -> locaug::Result<()> {
    let train_set = gen_location_bias_dataset(&LocationBiasConfig::new(32, 32, 3, 6, 200, 11))?;
    let val_set = gen_location_bias_dataset(&LocationBiasConfig::new(32, 32, 3, 6, 100, 12))?;
    let base = TrainConfig {
        spec: AugmentSpec::new(Variant::Rgb, Normalization::Symmetric),
        depth: 2,
        widths: vec![8, 16],
        lr: Some(5e-3),
        epochs: 20,
        ..TrainConfig::default()
    };
    let mut cfg = BenchConfig::new(base, vec![0, 1]);
    cfg.variants = vec![Variant::Rgb, Variant::RgbDist, Variant::RgbCoord];
    let table = bench_variants(&cfg, &train_set, &val_set)?;
    print!("{}", table.to_text());
    Ok(())
}
