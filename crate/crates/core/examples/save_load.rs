//! Train briefly, save network and optimizer state, reload and continue.

use locaug::data::{gen_circle_dataset, CircleTaskConfig};
use locaug::optim::OptimState;
use locaug::train::{content_hash, train, TrainConfig};
use locaug::{AugmentSpec, Normalization, SegNet, Variant};

fn main() -> locaug::Result<()> {
    let data = gen_circle_dataset(&CircleTaskConfig::centered(16, 16, 4, 8, 1))?;
    let cfg = TrainConfig {
        spec: AugmentSpec::new(Variant::RgbCoord, Normalization::UnitInterval),
        depth: 1,
        widths: vec![4],
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &data, None, |_, _, _| Ok(()))?;
    let net_bytes = out.net.save();
    let opt_bytes = out.optim.to_bytes();
    println!("model {} bytes, hash {}", net_bytes.len(), content_hash(&net_bytes));
    println!("optimizer {} bytes after {} steps", opt_bytes.len(), out.optim.steps());

    let net = SegNet::load(&net_bytes)?;
    let optim = OptimState::from_bytes(&opt_bytes)?;
    assert_eq!(net.save(), net_bytes, "saving a loaded model is lossless");
    let x = data[0].image.clone().reshape(vec![1, 3, 16, 16])?;
    let (a, b) = (out.net.predict_rgb(&x)?, net.predict_rgb(&x)?);
    // parameters are stored as f32, so trained f64 weights round on save
    let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    println!("max prediction difference after reload: {diff:.2e}");
    println!("reloaded optimizer steps: {}", optim.steps());
    Ok(())
}
