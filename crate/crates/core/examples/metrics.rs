//! Score saliency maps and label maps against ground truth.

use locaug::metrics::{evaluate_predictions, ConfusionMatrix, DEFAULT_BETA2};
use locaug::{Task, Tensor, ThresholdMode};

fn main() -> locaug::Result<()> {
    let gt = Tensor::new(vec![4, 4], vec![0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0.])?;
    let map = Tensor::new(vec![4, 4], vec![0.1, 0.0, 0.2, 0.0, 0.0, 0.9, 0.8, 0.3, 0.0, 0.7, 0.4, 0.0, 0.0, 0.0, 0.0, 0.1])?;
    for mode in [ThresholdMode::Fixed(0.5), ThresholdMode::Adaptive] {
        let report = evaluate_predictions(std::slice::from_ref(&map), std::slice::from_ref(&gt), Task::Saliency, mode, DEFAULT_BETA2)?;
        println!("threshold {mode}");
        print!("{}", report.to_table());
    }

    // three classes with one ignored pixel
    let labels = [0.0, 1.0, 2.0, 255.0, 1.0, 1.0];
    let pred = [0.0, 1.0, 1.0, 2.0, 1.0, 2.0];
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &labels)?;
    println!("per-class IoU {:?}, mean {:.4}", cm.per_class_iou(), cm.mean_iou());
    Ok(())
}
