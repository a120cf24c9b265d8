//! Finite-difference verification of every backward pass.
//!
//! Each case draws random inputs, reduces the layer output to a scalar with
//! a random projection, and compares the analytic gradient against central
//! differences. Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::augment::{augment_image, AugmentSpec, Normalization, Variant};
use crate::error::{Error, Result};
use crate::layers::{self, ConvParams, Padding};
use crate::loss::{bce_loss, softmax_ce_loss, IGNORE_LABEL};
use crate::model::{SegNet, SegNetConfig};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Pass threshold for layers and the composite network.
pub const GRAD_TOL: f64 = 1e-4;
/// Pass threshold for the losses.
pub const LOSS_GRAD_TOL: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Result of checking one random instance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub compared: usize,
    /// Coordinates whose ±ε perturbation crossed a ReLU or pooling boundary.
    pub skipped: usize,
}

impl CheckOutcome {
    fn absorb(&mut self, other: CheckOutcome) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.compared += other.compared;
        self.skipped += other.skipped;
    }
}

/// One family of gradient checks.
pub trait GradCase {
    fn name(&self) -> &str;

    fn tolerance(&self) -> f64 {
        GRAD_TOL
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckOutcome>;
}

/// Compare `analytic` against central differences of `f` around `x`.
pub fn compare_gradient(
    x: &Tensor,
    analytic: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_EPS;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - FD_EPS;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_EPS);
        out.max_rel_err = out.max_rel_err.max(relative_error(analytic.data()[i], numeric));
        out.compared += 1;
    }
    Ok(out)
}

pub fn randn(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub struct ConvCase {
    pub name: String,
    pub kernel: usize,
    pub padding: Padding,
}

impl GradCase for ConvCase {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let k = self.kernel;
        let x = randn(&[n, cin, h, w], 1.0, rng)?;
        let p = ConvParams::new(
            randn(&[cout, cin, k, k], 0.5, rng)?,
            randn(&[cout], 0.5, rng)?,
            self.padding,
        )?;
        let y = layers::conv2d(&x, &p)?;
        let r = randn(y.shape(), 1.0, rng)?;
        let g = layers::conv2d_backward(&x, &p, &r)?;
        let mut out = compare_gradient(&x, &g.d_input, |xx| Ok(project(&layers::conv2d(xx, &p)?, &r)))?;
        out.absorb(compare_gradient(&p.weights, &g.d_weights, |ww| {
            let q = ConvParams::new(ww.clone(), p.bias.clone(), p.padding)?;
            Ok(project(&layers::conv2d(&x, &q)?, &r))
        })?);
        out.absorb(compare_gradient(&p.bias, &g.d_bias, |bb| {
            let q = ConvParams::new(p.weights.clone(), bb.clone(), p.padding)?;
            Ok(project(&layers::conv2d(&x, &q)?, &r))
        })?);
        Ok(out)
    }
}

struct MaxPoolCase;

impl GradCase for MaxPoolCase {
    fn name(&self) -> &str {
        "maxpool2"
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
        // distinct values spaced 0.1 apart keep every window away from ties
        let shape = [rng.random_range(1..=2), rng.random_range(1..=3), 8, 8];
        let len: usize = shape.iter().product();
        let mut order: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let x = Tensor::new(shape.to_vec(), order.iter().map(|&v| v as f64 * 0.1 - 3.0).collect())?;
        let (y, rec) = layers::maxpool2(&x)?;
        let r = randn(y.shape(), 1.0, rng)?;
        let d = layers::maxpool2_backward(&r, &rec)?;
        compare_gradient(&x, &d, |xx| Ok(project(&layers::maxpool2(xx)?.0, &r)))
    }
}

struct UpsampleCase;

impl GradCase for UpsampleCase {
    fn name(&self) -> &str {
        "upsample2_nearest"
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
        let x = randn(&[2, 2, rng.random_range(1..=4), rng.random_range(1..=4)], 1.0, rng)?;
        let y = layers::upsample2_nearest(&x)?;
        let r = randn(y.shape(), 1.0, rng)?;
        let d = layers::upsample2_backward(&r)?;
        compare_gradient(&x, &d, |xx| Ok(project(&layers::upsample2_nearest(xx)?, &r)))
    }
}

struct ReluCase;

impl GradCase for ReluCase {
    fn name(&self) -> &str {
        "relu"
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
        // keep inputs clear of the kink at 0
        let x = randn(&[1, 3, 4, 4], 1.0, rng)?.map(|v| if v.abs() < 0.01 { v.signum() * 0.01 + v } else { v });
        let r = randn(x.shape(), 1.0, rng)?;
        let d = layers::relu_backward(&x, &r)?;
        compare_gradient(&x, &d, |xx| Ok(project(&layers::relu(xx), &r)))
    }
}

struct SigmoidCase;

impl GradCase for SigmoidCase {
    fn name(&self) -> &str {
        "sigmoid"
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
        let x = randn(&[1, 2, 4, 4], 2.0, rng)?;
        let r = randn(x.shape(), 1.0, rng)?;
        let d = layers::sigmoid_backward(&layers::sigmoid(&x), &r)?;
        compare_gradient(&x, &d, |xx| Ok(project(&layers::sigmoid(xx), &r)))
    }
}

struct SoftmaxCase;

impl GradCase for SoftmaxCase {
    fn name(&self) -> &str {
        "softmax_channels"
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
        let x = randn(&[2, rng.random_range(2..=5), 3, 3], 2.0, rng)?;
        let r = randn(x.shape(), 1.0, rng)?;
        let d = layers::softmax_channels_backward(&layers::softmax_channels(&x)?, &r)?;
        compare_gradient(&x, &d, |xx| Ok(project(&layers::softmax_channels(xx)?, &r)))
    }
}

struct BceCase;

impl GradCase for BceCase {
    fn name(&self) -> &str {
        "bce_loss"
    }

    fn tolerance(&self) -> f64 {
        LOSS_GRAD_TOL
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
        let n = rng.random_range(4..=32);
        let p = Tensor::new(vec![n], (0..n).map(|_| rng.random_range(0.05..0.95)).collect())?;
        let t = Tensor::new(vec![n], (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())?;
        let (_, d) = bce_loss(&p, &t)?;
        compare_gradient(&p, &d, |pp| Ok(bce_loss(pp, &t)?.0))
    }
}

struct SoftmaxCeCase;

impl GradCase for SoftmaxCeCase {
    fn name(&self) -> &str {
        "softmax_ce_loss"
    }

    fn tolerance(&self) -> f64 {
        LOSS_GRAD_TOL
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
        let k = rng.random_range(2..=5);
        let logits = randn(&[2, k, 3, 3], 1.0, rng)?;
        let labels = (0..18)
            .map(|_| {
                if rng.random_bool(0.2) {
                    IGNORE_LABEL as f64
                } else {
                    rng.random_range(0..k) as f64
                }
            })
            .collect();
        let t = Tensor::new(vec![2, 3, 3], labels)?;
        let (_, d) = softmax_ce_loss(&logits, &t)?;
        compare_gradient(&logits, &d, |ll| Ok(softmax_ce_loss(ll, &t)?.0))
    }
}

/// BCE loss through a whole depth-2 network, checked for every parameter.
pub struct SegNetCase {
    pub depth: usize,
    pub widths: Vec<usize>,
    pub size: usize,
    pub variant: Variant,
}

impl Default for SegNetCase {
    fn default() -> Self {
        SegNetCase {
            depth: 2,
            widths: vec![4, 4],
            size: 8,
            variant: Variant::RgbCoord,
        }
    }
}

impl GradCase for SegNetCase {
    fn name(&self) -> &str {
        "segnet_composite"
    }

    fn run(&self, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
        let spec = AugmentSpec::new(self.variant, Normalization::UnitInterval);
        let cfg = SegNetConfig::new(self.depth, spec)
            .widths(self.widths.clone())
            .seed(rng.random());
        let mut net = SegNet::build(cfg)?;
        // nonzero biases exercise every bias path
        for t in net.param_tensors_mut() {
            if t.rank() == 1 {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        let s = self.size;
        let rgb = Tensor::new(vec![2, 3, s, s], (0..2 * 3 * s * s).map(|_| rng.random::<f64>()).collect())?;
        let x = augment_image(&rgb, spec)?;
        let target = Tensor::new(
            vec![2, 1, s, s],
            (0..2 * s * s).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect(),
        )?;
        let (pred, cache) = net.forward_with_cache(&x)?;
        let (_, d_pred) = bce_loss(&pred, &target)?;
        let grads = net.backward(&cache, &d_pred)?;

        let mut out = CheckOutcome::default();
        let n_tensors = grads.tensors().len();
        for ti in 0..n_tensors {
            for i in 0..grads.tensors()[ti].len() {
                let orig = net.param_tensors()[ti].data()[i];
                let mut eval = |v: f64| -> Result<(f64, bool)> {
                    net.param_tensors_mut()[ti].data_mut()[i] = v;
                    let (p, c) = net.forward_with_cache(&x)?;
                    Ok((bce_loss(&p, &target)?.0, c.same_activation_pattern(&cache)))
                };
                let (up, same_up) = eval(orig + FD_EPS)?;
                let (down, same_down) = eval(orig - FD_EPS)?;
                net.param_tensors_mut()[ti].data_mut()[i] = orig;
                if !(same_up && same_down) {
                    out.skipped += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * FD_EPS);
                out.max_rel_err = out
                    .max_rel_err
                    .max(relative_error(grads.tensors()[ti].data()[i], numeric));
                out.compared += 1;
            }
        }
        Ok(out)
    }
}

/// Every layer, both losses, and a depth-2 composite network.
pub fn stock_cases() -> Vec<Box<dyn GradCase>> {
    vec![
        Box::new(ConvCase {
            name: "conv2d_3x3_zero_pad".into(),
            kernel: 3,
            padding: Padding::Zero,
        }),
        Box::new(ConvCase {
            name: "conv2d_3x3_valid".into(),
            kernel: 3,
            padding: Padding::None,
        }),
        Box::new(ConvCase {
            name: "conv2d_1x1".into(),
            kernel: 1,
            padding: Padding::Zero,
        }),
        Box::new(MaxPoolCase),
        Box::new(UpsampleCase),
        Box::new(ReluCase),
        Box::new(SigmoidCase),
        Box::new(SoftmaxCase),
        Box::new(BceCase),
        Box::new(SoftmaxCeCase),
        Box::new(SegNetCase::default()),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub compared: usize,
    pub skipped: usize,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance && self.compared > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(GradcheckEntry::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.passed())
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>9} {:>12} {:>9} {:>9} {:>8}  result",
            "case", "instances", "max_rel_err", "tol", "compared", "skipped"
        );
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<22} {:>9} {:>12.3e} {:>9.0e} {:>9} {:>8}  {}",
                e.name,
                e.instances,
                e.max_rel_err,
                e.tolerance,
                e.compared,
                e.skipped,
                if e.passed() { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

/// Run `instances` random instances of every case.
pub fn run_gradchecks(cases: &[Box<dyn GradCase>], instances: usize, seed: u64) -> Result<GradcheckReport> {
    if cases.is_empty() {
        return Err(Error::EmptyGradcheck);
    }
    let mut entries = Vec::with_capacity(cases.len());
    for (ci, case) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ci as u64);
        let mut total = CheckOutcome::default();
        for _ in 0..instances {
            total.absorb(case.run(&mut rng)?);
        }
        entries.push(GradcheckEntry {
            name: case.name().to_string(),
            instances,
            max_rel_err: total.max_rel_err,
            tolerance: case.tolerance(),
            compared: total.compared,
            skipped: total.skipped,
        });
    }
    Ok(GradcheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_case_list_is_an_error() {
        assert!(matches!(run_gradchecks(&[], 3, 0), Err(Error::EmptyGradcheck)));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }
}
