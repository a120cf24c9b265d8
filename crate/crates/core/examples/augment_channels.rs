//! Build every augmented input for a small image and write one as LAUG.

use locaug::{augment_image, read_tensor, write_tensor, AugmentSpec, Normalization, Tensor, Variant};

fn main() -> locaug::Result<()> {
    let (h, w) = (5, 7);
    let rgb = Tensor::from_fn4([1, 3, h, w], |_, c, y, x| ((c + y + x) % 4) as f64 / 3.0)?;
    for variant in Variant::ALL {
        let spec = AugmentSpec::new(variant, Normalization::UnitInterval);
        let x = augment_image(&rgb, spec)?;
        println!("{variant:<16} shape {:?}", x.shape());
        for c in 3..spec.in_channels() {
            let row: Vec<String> = (0..w).map(|j| format!("{:.2}", x.at4(0, c, h / 2, j))).collect();
            println!("  channel {c} middle row: {}", row.join(" "));
        }
    }

    let spec = AugmentSpec::new(Variant::RgbDistCoord, Normalization::Symmetric);
    let bytes = write_tensor(&augment_image(&rgb, spec)?);
    let back = read_tensor(&bytes)?;
    println!("LAUG payload {} bytes, round trip shape {:?}", bytes.len(), back.shape());
    Ok(())
}
