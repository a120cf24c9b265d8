//! Encoder-decoder segmentation networks with 1 to 5 pooling stages.
//!
//! Layout for depth `d` and widths `w[0..d]`:
//!
//! ```text
//! encoder stage s:  conv3x3 -> relu -> conv3x3 -> relu -> maxpool2     (w[s] channels)
//! decoder stage s:  upsample2 -> conv3x3 -> relu                        (w[s] -> w[s-1], w[0] at s = 0)
//! head:             conv1x1 -> sigmoid (single output) | logits (K outputs)
//! ```
//!
//! Decoder stages run deepest first. There are no skip connections and every
//! convolution uses zero padding, so the only layer whose shape depends on
//! the input variant is the first one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::augment::{augment_image, AugmentSpec, Normalization, Variant};
use crate::error::{Error, Result};
use crate::layers::{self, ConvParams, Padding, PoolRecord};
use crate::tensor::{decode_tensor, encode_tensor_into, ByteReader, Tensor};

pub const MAX_DEPTH: usize = 5;
pub const DEFAULT_WIDTHS: [usize; MAX_DEPTH] = [16, 32, 64, 128, 256];

pub const LNET_MAGIC: &[u8; 4] = b"LNET";
pub const LNET_VERSION: u32 = 1;

/// Default widths truncated to `depth`.
pub fn default_widths(depth: usize) -> Vec<usize> {
    DEFAULT_WIDTHS[..depth.min(MAX_DEPTH)].to_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNetConfig {
    pub depth: usize,
    pub spec: AugmentSpec,
    pub widths: Vec<usize>,
    pub out_channels: usize,
    pub seed: u64,
}

impl SegNetConfig {
    pub fn new(depth: usize, spec: AugmentSpec) -> Self {
        SegNetConfig {
            depth,
            spec,
            widths: default_widths(depth),
            out_channels: 1,
            seed: 0,
        }
    }

    pub fn widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn out_channels(mut self, out_channels: usize) -> Self {
        self.out_channels = out_channels;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::InvalidDepth(self.depth));
        }
        if self.widths.is_empty() {
            return Err(Error::InvalidWidths("empty widths".into()));
        }
        if self.widths.len() != self.depth {
            return Err(Error::InvalidWidths(format!(
                "{} widths for depth {}",
                self.widths.len(),
                self.depth
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidWidths("zero width".into()));
        }
        if self.out_channels == 0 {
            return Err(Error::InvalidWidths("zero output channels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Conv(usize),
    Relu,
    Pool,
    Upsample,
    Sigmoid,
}

/// A built network: architecture plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    config: SegNetConfig,
    params: Vec<ConvParams>,
    ops: Vec<Op>,
}

/// Gradients for every parameter tensor, in [`SegNet::param_tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    /// Accumulate `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum OpCache {
    Conv(Tensor),
    Relu(Tensor),
    Pool(PoolRecord),
    Upsample,
    Sigmoid(Tensor),
}

/// Intermediate values of one forward pass, consumed by [`SegNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    entries: Vec<OpCache>,
}

impl ForwardCache {
    /// True when every ReLU gate and pooling winner matches `other`, i.e. both
    /// passes sit on the same smooth piece of the network function.
    pub fn same_activation_pattern(&self, other: &ForwardCache) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| match (a, b) {
                (OpCache::Relu(x), OpCache::Relu(y)) => {
                    x.data().iter().zip(y.data()).all(|(p, q)| (*p > 0.0) == (*q > 0.0))
                }
                (OpCache::Pool(x), OpCache::Pool(y)) => x.argmax() == y.argmax(),
                _ => true,
            })
    }
}

fn he_init(
    cout: usize,
    cin: usize,
    kernel: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    (0..cout * cin * kernel * kernel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            // stored models hold f32, so start on the f32 grid
            (z * std) as f32 as f64
        })
        .collect()
}

impl SegNet {
    pub fn build(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let d = config.depth;
        let w = &config.widths;
        let in_ch = config.spec.in_channels();
        let mut shapes: Vec<(usize, usize, usize)> = Vec::new();
        let mut ops = Vec::new();
        let mut prev = in_ch;
        for &ws in w.iter() {
            for cin in [prev, ws] {
                ops.push(Op::Conv(shapes.len()));
                ops.push(Op::Relu);
                shapes.push((ws, cin, 3));
            }
            ops.push(Op::Pool);
            prev = ws;
        }
        for s in (0..d).rev() {
            let cout = if s > 0 { w[s - 1] } else { w[0] };
            ops.push(Op::Upsample);
            ops.push(Op::Conv(shapes.len()));
            ops.push(Op::Relu);
            shapes.push((cout, w[s], 3));
        }
        ops.push(Op::Conv(shapes.len()));
        shapes.push((config.out_channels, w[0], 1));
        if config.out_channels == 1 {
            ops.push(Op::Sigmoid);
        }

        let mut params = Vec::with_capacity(shapes.len());
        for (layer, &(cout, cin, k)) in shapes.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(layer as u64);
            let weights = if layer == 0 {
                // Colour and location inputs draw from separate streams with
                // the colour fan-in, so colour weights are identical for
                // every variant.
                let std = (2.0 / (3 * k * k) as f64).sqrt();
                let rgb = he_init(cout, 3, k, std, &mut rng);
                let mut extra_rng = ChaCha8Rng::seed_from_u64(config.seed);
                extra_rng.set_stream(1 << 32);
                let extra = he_init(cout, cin - 3, k, std, &mut extra_rng);
                let mut all = Vec::with_capacity(cout * cin * k * k);
                let (rgb_block, extra_block) = (3 * k * k, (cin - 3) * k * k);
                for co in 0..cout {
                    all.extend_from_slice(&rgb[co * rgb_block..(co + 1) * rgb_block]);
                    all.extend_from_slice(&extra[co * extra_block..(co + 1) * extra_block]);
                }
                all
            } else {
                let std = (2.0 / (cin * k * k) as f64).sqrt();
                he_init(cout, cin, k, std, &mut rng)
            };
            params.push(ConvParams::new(
                Tensor::new(vec![cout, cin, k, k], weights)?,
                Tensor::zeros(&[cout])?,
                Padding::Zero,
            )?);
        }
        Ok(SegNet { config, params, ops })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn spec(&self) -> AugmentSpec {
        self.config.spec
    }

    pub fn in_channels(&self) -> usize {
        self.config.spec.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels
    }

    pub fn layers(&self) -> &[ConvParams] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ConvParams::param_count).sum()
    }

    /// Weights and biases, alternating, in layer order.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.params.iter().flat_map(|p| [&p.weights, &p.bias]).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .flat_map(|p| [&mut p.weights, &mut p.bias])
            .collect()
    }

    /// Check channel count and that H and W divide by `2^depth`.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels(),
                got: c,
            });
        }
        let factor = 1 << self.config.depth;
        for (axis, extent) in [("H", h), ("W", w)] {
            if extent % factor != 0 {
                return Err(Error::Divisibility { axis, extent, factor });
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false).map(|(y, _)| y)
    }

    pub fn forward_with_cache(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.run(x, true)
    }

    /// Augment a `[N, 3, H, W]` colour batch with this network's location channels, then run it.
    pub fn predict_rgb(&self, rgb: &Tensor) -> Result<Tensor> {
        self.forward(&augment_image(rgb, self.config.spec)?)
    }

    fn run(&self, x: &Tensor, keep: bool) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let mut entries = Vec::with_capacity(if keep { self.ops.len() } else { 0 });
        let mut cur = x.clone();
        for op in &self.ops {
            let (next, cache) = match *op {
                Op::Conv(i) => {
                    let y = layers::conv2d(&cur, &self.params[i])?;
                    (y, OpCache::Conv(cur))
                }
                Op::Relu => (layers::relu(&cur), OpCache::Relu(cur)),
                Op::Pool => {
                    let (y, rec) = layers::maxpool2(&cur)?;
                    (y, OpCache::Pool(rec))
                }
                Op::Upsample => (layers::upsample2_nearest(&cur)?, OpCache::Upsample),
                Op::Sigmoid => {
                    let y = layers::sigmoid(&cur);
                    (y.clone(), OpCache::Sigmoid(y))
                }
            };
            if keep {
                entries.push(cache);
            }
            cur = next;
        }
        Ok((cur, ForwardCache { entries }))
    }

    /// Gradients of every parameter given the loss gradient w.r.t. the prediction.
    pub fn backward(&self, cache: &ForwardCache, d_pred: &Tensor) -> Result<Gradients> {
        if cache.entries.len() != self.ops.len() {
            return Err(Error::Header("forward cache does not belong to this network".into()));
        }
        let mut grads: Vec<Option<(Tensor, Tensor)>> = vec![None; self.params.len()];
        let mut g = d_pred.clone();
        for (op, entry) in self.ops.iter().zip(&cache.entries).rev() {
            g = match (*op, entry) {
                (Op::Conv(i), OpCache::Conv(input)) => {
                    let lg = layers::conv2d_backward(input, &self.params[i], &g)?;
                    grads[i] = Some((lg.d_weights, lg.d_bias));
                    lg.d_input
                }
                (Op::Relu, OpCache::Relu(input)) => layers::relu_backward(input, &g)?,
                (Op::Pool, OpCache::Pool(rec)) => layers::maxpool2_backward(&g, rec)?,
                (Op::Upsample, OpCache::Upsample) => layers::upsample2_backward(&g)?,
                (Op::Sigmoid, OpCache::Sigmoid(y)) => layers::sigmoid_backward(y, &g)?,
                _ => return Err(Error::Header("forward cache does not match network ops".into())),
            };
        }
        let tensors = grads
            .into_iter()
            .flat_map(|p| {
                let (w, b) = p.expect("every conv visited");
                [w, b]
            })
            .collect();
        Ok(Gradients { tensors })
    }

    /// Serialize to the LNET model format.
    pub fn save(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(LNET_MAGIC);
        for v in [LNET_VERSION, c.depth as u32, c.widths.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &w in &c.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for v in [c.spec.variant.code(), c.spec.norm.code(), c.out_channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        let tensors = self.param_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            encode_tensor_into(t, &mut out);
        }
        out
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != LNET_MAGIC {
            return Err(Error::BadMagic {
                expected: "LNET".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != LNET_VERSION {
            return Err(Error::VersionMismatch {
                expected: LNET_VERSION,
                found: version,
            });
        }
        let depth = r.u32()? as usize;
        let n_widths = r.u32()? as usize;
        if n_widths > MAX_DEPTH {
            return Err(Error::Header(format!("{n_widths} widths")));
        }
        let widths = (0..n_widths)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let variant = r.u32()?;
        let variant = Variant::from_code(variant)
            .ok_or_else(|| Error::Header(format!("unknown variant code {variant}")))?;
        let norm = r.u32()?;
        let norm = Normalization::from_code(norm)
            .ok_or_else(|| Error::Header(format!("unknown normalization code {norm}")))?;
        let out_channels = r.u32()? as usize;
        let seed = r.u64()?;
        let config = SegNetConfig {
            depth,
            spec: AugmentSpec::new(variant, norm),
            widths,
            out_channels,
            seed,
        };
        config.validate()?;
        let mut net = SegNet::build(config)?;
        let count = r.u32()? as usize;
        if count != net.params.len() * 2 {
            return Err(Error::Header(format!(
                "{count} parameter tensors, architecture has {}",
                net.params.len() * 2
            )));
        }
        for slot in net.param_tensors_mut() {
            let t = decode_tensor(&mut r)?;
            if t.shape() != slot.shape() {
                return Err(Error::Header(format!(
                    "parameter shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if !r.rest().is_empty() {
            return Err(Error::Header(format!("{} trailing bytes", r.rest().len())));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(v: Variant) -> AugmentSpec {
        AugmentSpec::new(v, Normalization::UnitInterval)
    }

    #[test]
    fn first_layer_widens_with_location_channels() {
        let net = SegNet::build(SegNetConfig::new(1, spec(Variant::RgbCoord)).widths(vec![8])).unwrap();
        assert_eq!(net.layers()[0].weights.shape(), &[8, 5, 3, 3]);
    }

    #[test]
    fn param_delta_is_first_layer_only() {
        let a = SegNet::build(SegNetConfig::new(2, spec(Variant::Rgb)).widths(vec![8, 16])).unwrap();
        let b = SegNet::build(SegNetConfig::new(2, spec(Variant::RgbDistCoord)).widths(vec![8, 16])).unwrap();
        assert_eq!(b.param_count() - a.param_count(), 216);
    }

    #[test]
    fn layer_shapes_for_depth_three() {
        let net = SegNet::build(SegNetConfig::new(3, spec(Variant::RgbDist)).widths(vec![4, 6, 8])).unwrap();
        let shapes: Vec<_> = net.layers().iter().map(|p| p.weights.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![4, 4, 3, 3],
                vec![4, 4, 3, 3],
                vec![6, 4, 3, 3],
                vec![6, 6, 3, 3],
                vec![8, 6, 3, 3],
                vec![8, 8, 3, 3],
                vec![6, 8, 3, 3],
                vec![4, 6, 3, 3],
                vec![4, 4, 3, 3],
                vec![1, 4, 1, 1],
            ]
        );
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let cfg = SegNetConfig::new(2, spec(Variant::RgbCoord)).widths(vec![4, 8]).seed(9);
        let a = SegNet::build(cfg.clone()).unwrap();
        let b = SegNet::build(cfg.clone()).unwrap();
        assert_eq!(a, b);
        let c = SegNet::build(cfg.seed(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn colour_weights_shared_across_variants() {
        let base = SegNet::build(SegNetConfig::new(2, spec(Variant::Rgb)).widths(vec![4, 8]).seed(3)).unwrap();
        let aug =
            SegNet::build(SegNetConfig::new(2, spec(Variant::RgbDistCoord)).widths(vec![4, 8]).seed(3)).unwrap();
        let (wb, wa) = (&base.layers()[0].weights, &aug.layers()[0].weights);
        for co in 0..4 {
            for ci in 0..3 {
                for k in 0..9 {
                    assert_eq!(wb.at4(co, ci, k / 3, k % 3), wa.at4(co, ci, k / 3, k % 3));
                }
            }
        }
        assert_eq!(base.layers()[1..], aug.layers()[1..]);
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(
            SegNet::build(SegNetConfig::new(0, spec(Variant::Rgb)).widths(vec![])),
            Err(Error::InvalidDepth(0))
        ));
        assert!(matches!(
            SegNet::build(SegNetConfig::new(6, spec(Variant::Rgb))),
            Err(Error::InvalidDepth(6))
        ));
        assert!(matches!(
            SegNet::build(SegNetConfig::new(2, spec(Variant::Rgb)).widths(vec![])),
            Err(Error::InvalidWidths(_))
        ));
    }

    #[test]
    fn divisibility_is_checked_per_axis() {
        let net = SegNet::build(SegNetConfig::new(5, spec(Variant::Rgb)).widths(vec![2; 5])).unwrap();
        let ok = Tensor::zeros(&[1, 3, 64, 64]).unwrap();
        assert_eq!(net.forward(&ok).unwrap().shape(), &[1, 1, 64, 64]);
        let bad = Tensor::zeros(&[1, 3, 48, 48]).unwrap();
        assert!(matches!(
            net.forward(&bad),
            Err(Error::Divisibility { axis: "H", extent: 48, factor: 32 })
        ));
        let bad_w = Tensor::zeros(&[1, 3, 64, 48]).unwrap();
        assert!(matches!(net.forward(&bad_w), Err(Error::Divisibility { axis: "W", .. })));
    }

    #[test]
    fn multiclass_head_emits_logits() {
        let net =
            SegNet::build(SegNetConfig::new(1, spec(Variant::Rgb)).widths(vec![4]).out_channels(3)).unwrap();
        let y = net.forward(&Tensor::full(&[2, 3, 4, 4], 0.5).unwrap()).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
    }

    #[test]
    fn backward_fills_every_parameter() {
        let net = SegNet::build(SegNetConfig::new(2, spec(Variant::RgbDist)).widths(vec![3, 4]).seed(1)).unwrap();
        let x = augment_image(&Tensor::full(&[1, 3, 8, 8], 0.4).unwrap(), net.spec()).unwrap();
        let (y, cache) = net.forward_with_cache(&x).unwrap();
        let g = net.backward(&cache, &Tensor::full(y.shape(), 1.0).unwrap()).unwrap();
        let shapes: Vec<_> = net.param_tensors().iter().map(|t| t.shape().to_vec()).collect();
        let gshapes: Vec<_> = g.tensors().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, gshapes);
    }

    #[test]
    fn save_load_round_trip() {
        let net = SegNet::build(SegNetConfig::new(2, spec(Variant::RgbDist)).widths(vec![3, 5]).seed(4)).unwrap();
        let bytes = net.save();
        let back = SegNet::load(&bytes).unwrap();
        assert_eq!(back, net);
        let x = augment_image(&Tensor::full(&[1, 3, 8, 8], 0.25).unwrap(), net.spec()).unwrap();
        assert_eq!(back.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert_eq!(back.save(), bytes);
    }

    #[test]
    fn load_rejects_corruption() {
        let net = SegNet::build(SegNetConfig::new(1, spec(Variant::Rgb)).widths(vec![2])).unwrap();
        let mut bytes = net.save();
        let rgb = SegNet::load(&bytes).unwrap();
        let six = Tensor::zeros(&[1, 6, 4, 4]).unwrap();
        assert!(matches!(rgb.forward(&six), Err(Error::ChannelMismatch { expected: 3, got: 6 })));

        assert!(matches!(SegNet::load(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        bytes[4] = 0x7f;
        assert!(matches!(SegNet::load(&bytes), Err(Error::VersionMismatch { found: 0x7f, .. })));
        bytes[0] = b'X';
        assert!(matches!(SegNet::load(&bytes), Err(Error::BadMagic { .. })));
    }
}
