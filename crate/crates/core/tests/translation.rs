use locaug::{augment_image, AugmentSpec, Normalization, SegNet, SegNetConfig, Tensor, Variant};

fn noise(h: usize, w: usize) -> Tensor {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    Tensor::from_fn4([1, 3, h, w], |_, _, _, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    })
    .unwrap()
}

fn roll(x: &Tensor, s: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    Tensor::from_fn4([n, c, h, w], |ni, ci, y, xx| x.at4(ni, ci, (y + h - s) % h, (xx + w - s) % w)).unwrap()
}

/// Largest difference between shifted-input outputs and shifted outputs over
/// pixels whose receptive field avoids both the border and the wrap seam.
fn interior_discrepancy(variant: Variant, depth: usize) -> f64 {
    let widths = vec![4; depth];
    let spec = AugmentSpec::new(variant, Normalization::UnitInterval);
    let net = SegNet::build(SegNetConfig::new(depth, spec).widths(widths).seed(3)).unwrap();
    let size = 64;
    let shift = 1 << depth;
    let margin = 6 << depth;
    let x = noise(size, size);
    let y = net.predict_rgb(&x).unwrap();
    let y_shifted = net.predict_rgb(&roll(&x, shift)).unwrap();
    let mut worst: f64 = 0.0;
    for i in margin + shift..size - margin {
        for j in margin + shift..size - margin {
            worst = worst.max((y_shifted.at4(0, 0, i, j) - y.at4(0, 0, i - shift, j - shift)).abs());
        }
    }
    worst
}

#[test]
fn rgb_interior_is_translation_covariant() {
    for depth in 1..=2 {
        assert!(interior_discrepancy(Variant::Rgb, depth) <= 1e-9, "depth {depth}");
    }
}

#[test]
fn location_channels_break_translation_covariance() {
    for variant in [Variant::RgbCoord, Variant::RgbDist] {
        assert!(interior_discrepancy(variant, 2) > 1e-6, "{variant}");
    }
}

#[test]
fn augmentation_is_not_shifted_with_content() {
    let x = noise(8, 8);
    let spec = AugmentSpec::new(Variant::RgbCoord, Normalization::UnitInterval);
    let a = augment_image(&x, spec).unwrap();
    let b = augment_image(&roll(&x, 2), spec).unwrap();
    assert_eq!(a.at4(0, 3, 1, 1), b.at4(0, 3, 1, 1));
    assert_eq!(a.at4(0, 0, 1, 1), b.at4(0, 0, 3, 3));
}
