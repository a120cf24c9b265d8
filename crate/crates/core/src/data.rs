//! Samples, synthetic datasets, and PPM/PGM dataset directories.
//!
//! A dataset directory holds `images/<id>.ppm` (binary P6) and
//! `masks/<id>.pgm` (binary P5), plus list files with one id per line that
//! define splits.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::IGNORE_LABEL;
use crate::metrics::Task;
use crate::tensor::Tensor;

/// An RGB image in `[0, 1]` (`[3, H, W]`) with its mask (`[H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor, id: impl Into<String>) -> Result<Self> {
        let (ih, iw) = match image.shape() {
            [3, h, w] => (*h, *w),
            _ => {
                return Err(Error::Rank {
                    expected: 3,
                    got: image.shape().to_vec(),
                })
            }
        };
        let (mh, mw) = match mask.shape() {
            [h, w] => (*h, *w),
            _ => {
                return Err(Error::Rank {
                    expected: 2,
                    got: mask.shape().to_vec(),
                })
            }
        };
        if (ih, iw) != (mh, mw) {
            return Err(Error::ImageMaskMismatch {
                image: (ih, iw),
                mask: (mh, mw),
            });
        }
        Ok(Sample {
            image,
            mask,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }

    /// Check mask values against the task's label set.
    pub fn validate_mask(&self, task: Task) -> Result<()> {
        for &v in self.mask.data() {
            let ok = match task {
                Task::Saliency => v == 0.0 || v == 1.0,
                Task::Multiclass(k) => {
                    v >= 0.0 && v.fract() == 0.0 && ((v as usize) < k || v as usize == IGNORE_LABEL)
                }
            };
            if !ok {
                return Err(Error::InvalidMask {
                    value: v,
                    task: task.to_string(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColorMode {
    /// One random colour fills the whole image.
    #[default]
    UniformRandom,
    /// Every pixel and channel is independent noise.
    PerPixelNoise,
}

impl std::str::FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_random" | "uniform" => Ok(ColorMode::UniformRandom),
            "per_pixel_noise" | "noise" => Ok(ColorMode::PerPixelNoise),
            _ => Err(Error::Config(format!("unknown colour mode {s:?}"))),
        }
    }
}

/// A fixed circle at a fixed place; colours carry no information about it.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleTaskConfig {
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub center: (usize, usize),
    pub color_mode: ColorMode,
    pub count: usize,
    pub seed: u64,
}

impl CircleTaskConfig {
    /// Centred circle in an `h × w` image.
    pub fn centered(height: usize, width: usize, radius: usize, count: usize, seed: u64) -> Self {
        CircleTaskConfig {
            height,
            width,
            radius,
            center: (height / 2, width / 2),
            color_mode: ColorMode::UniformRandom,
            count,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let (cr, cc) = self.center;
        let fits = cr < self.height
            && cc < self.width
            && self.radius <= cr
            && self.radius <= cc
            && self.radius < self.height - cr
            && self.radius < self.width - cc;
        if !fits {
            return Err(Error::CircleOutsideImage {
                radius: self.radius,
                center: self.center,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }
}

/// `mask(h, w) = 1` iff `(h − cr)² + (w − cc)² ≤ r²`.
pub fn circle_mask(cfg: &CircleTaskConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (cr, cc) = (cfg.center.0 as i64, cfg.center.1 as i64);
    let r2 = (cfg.radius * cfg.radius) as i64;
    let data = (0..cfg.height as i64)
        .flat_map(|h| (0..cfg.width as i64).map(move |w| (h, w)))
        .map(|(h, w)| if (h - cr).pow(2) + (w - cc).pow(2) <= r2 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![cfg.height, cfg.width], data)
}

fn random_image(h: usize, w: usize, mode: ColorMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let data = match mode {
        ColorMode::UniformRandom => {
            let rgb: [f64; 3] = rng.random();
            rgb.iter().flat_map(|&c| std::iter::repeat_n(c, h * w)).collect()
        }
        ColorMode::PerPixelNoise => (0..3 * h * w).map(|_| rng.random::<f64>()).collect(),
    };
    Tensor::new(vec![3, h, w], data)
}

pub fn gen_circle_dataset(cfg: &CircleTaskConfig) -> Result<Vec<Sample>> {
    let mask = circle_mask(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|i| {
            let image = random_image(cfg.height, cfg.width, cfg.color_mode, &mut rng)?;
            Sample::new(image, mask.clone(), format!("circle_{i:05}"))
        })
        .collect()
}

/// `m` equally coloured squares; the one nearest the image centre is salient.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationBiasConfig {
    pub height: usize,
    pub width: usize,
    pub squares: usize,
    pub side: usize,
    pub count: usize,
    pub seed: u64,
    /// Fixed background colour, or `None` to draw one per image. A fixed
    /// background makes squares detectable pixel by pixel, leaving position
    /// as the only cue for which square is salient.
    pub background: Option<[f64; 3]>,
}

impl LocationBiasConfig {
    /// Black background.
    pub fn new(height: usize, width: usize, squares: usize, side: usize, count: usize, seed: u64) -> Self {
        LocationBiasConfig {
            height,
            width,
            squares,
            side,
            count,
            seed,
            background: Some([0.0; 3]),
        }
    }
}

/// Top-left corner of a square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SquarePlacement {
    pub top: usize,
    pub left: usize,
}

/// One generated location-bias image before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareLayout {
    pub placements: Vec<SquarePlacement>,
    pub salient: usize,
    pub square_color: [f64; 3],
    pub background: [f64; 3],
}

/// Squared distance from a square's centre to the image centre, in half-pixel units.
pub fn center_distance2(p: SquarePlacement, side: usize, height: usize, width: usize) -> i64 {
    let dy = (2 * p.top + side) as i64 - 1 - (height as i64 - 1);
    let dx = (2 * p.left + side) as i64 - 1 - (width as i64 - 1);
    dy * dy + dx * dx
}

/// Index of the square strictly nearest the centre, or `None` on a tie.
pub fn nearest_square(placements: &[SquarePlacement], side: usize, height: usize, width: usize) -> Option<usize> {
    let d: Vec<i64> = placements
        .iter()
        .map(|&p| center_distance2(p, side, height, width))
        .collect();
    let best = (0..d.len()).min_by_key(|&i| d[i])?;
    (d.iter().filter(|&&v| v == d[best]).count() == 1).then_some(best)
}

fn separated(a: SquarePlacement, b: SquarePlacement, side: usize) -> bool {
    // at least one background pixel between squares
    let gap = side + 1;
    a.top + gap <= b.top || b.top + gap <= a.top || a.left + gap <= b.left || b.left + gap <= a.left
}

pub fn render_squares(cfg: &LocationBiasConfig, layout: &SquareLayout, id: impl Into<String>) -> Result<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let mut image = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        image.extend(std::iter::repeat_n(layout.background[c], h * w));
    }
    let mut mask = vec![0.0; h * w];
    for (i, p) in layout.placements.iter().enumerate() {
        for y in p.top..p.top + cfg.side {
            for x in p.left..p.left + cfg.side {
                for c in 0..3 {
                    image[(c * h + y) * w + x] = layout.square_color[c];
                }
                if i == layout.salient {
                    mask[y * w + x] = 1.0;
                }
            }
        }
    }
    Sample::new(Tensor::new(vec![3, h, w], image)?, Tensor::new(vec![h, w], mask)?, id)
}

const MIN_CONTRAST: f64 = 0.3;
const MAX_PLACEMENT_TRIES: usize = 10_000;

pub fn gen_location_bias_layouts(cfg: &LocationBiasConfig) -> Result<Vec<SquareLayout>> {
    if cfg.squares == 0 || cfg.side == 0 || cfg.side > cfg.height || cfg.side > cfg.width {
        return Err(Error::DatasetConfig(format!(
            "{} squares of side {} in {}x{}",
            cfg.squares, cfg.side, cfg.height, cfg.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layouts = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let mut tries = 0;
        let (placements, salient) = loop {
            tries += 1;
            if tries > MAX_PLACEMENT_TRIES {
                return Err(Error::DatasetConfig("could not place squares without overlap".into()));
            }
            let mut ps: Vec<SquarePlacement> = Vec::with_capacity(cfg.squares);
            while ps.len() < cfg.squares && tries <= MAX_PLACEMENT_TRIES {
                let p = SquarePlacement {
                    top: rng.random_range(0..=cfg.height - cfg.side),
                    left: rng.random_range(0..=cfg.width - cfg.side),
                };
                if ps.iter().all(|&q| separated(p, q, cfg.side)) {
                    ps.push(p);
                } else {
                    tries += 1;
                }
            }
            if ps.len() < cfg.squares {
                continue;
            }
            if let Some(s) = nearest_square(&ps, cfg.side, cfg.height, cfg.width) {
                break (ps, s);
            }
        };
        let contrast = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max);
        let (square_color, background) = match cfg.background {
            Some(bg) => loop {
                let sq: [f64; 3] = rng.random();
                if contrast(&sq, &bg) >= MIN_CONTRAST {
                    break (sq, bg);
                }
            },
            None => {
                let sq: [f64; 3] = rng.random();
                loop {
                    let bg: [f64; 3] = rng.random();
                    if contrast(&sq, &bg) >= MIN_CONTRAST {
                        break (sq, bg);
                    }
                }
            }
        };
        layouts.push(SquareLayout {
            placements,
            salient,
            square_color,
            background,
        });
    }
    Ok(layouts)
}

pub fn gen_location_bias_dataset(cfg: &LocationBiasConfig) -> Result<Vec<Sample>> {
    gen_location_bias_layouts(cfg)?
        .iter()
        .enumerate()
        .map(|(i, l)| render_squares(cfg, l, format!("squares_{i:05}")))
        .collect()
}

/// Nearest-neighbour resize of the last two axes; source index is `⌊dst · src / dst_extent⌋`.
pub fn resize_nearest(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(Error::ZeroExtent(if height == 0 { "H" } else { "W" }));
    }
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::Rank {
            expected: 2,
            got: x.shape().to_vec(),
        });
    }
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    let planes = x.len() / (h * w);
    let mut out = Vec::with_capacity(planes * height * width);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..height {
            let sy = y * h / height;
            for xx in 0..width {
                out.push(src[sy * w + xx * w / width]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = height;
    shape[rank - 1] = width;
    Tensor::new(shape, out)
}

fn read_pnm(path: &Path, magic: &[u8; 2]) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("expected binary {}", String::from_utf8_lossy(magic)),
        });
    }
    image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Read an 8-bit binary PPM as `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = read_pnm(path, b"P6")?;
    let image::DynamicImage::ImageRgb8(rgb) = img else {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "only 8-bit colour PPM is supported".into(),
        });
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Saliency masks binarize at 128; class masks keep their byte values.
pub fn mask_from_bytes(bytes: &[u8], task: Task) -> Vec<f64> {
    bytes
        .iter()
        .map(|&b| match task {
            Task::Saliency => {
                if b >= 128 {
                    1.0
                } else {
                    0.0
                }
            }
            Task::Multiclass(_) => b as f64,
        })
        .collect()
}

/// Read an 8-bit binary PGM as `[H, W]`.
pub fn load_mask(path: impl AsRef<Path>, task: Task) -> Result<Tensor> {
    let path = path.as_ref();
    let img = read_pnm(path, b"P5")?;
    let image::DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "only 8-bit PGM masks are supported".into(),
        });
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Tensor::new(vec![h, w], mask_from_bytes(gray.as_raw(), task))
}

fn encode_pnm(path: &Path, bytes: &[u8], w: usize, h: usize, color: bool) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let (subtype, ty) = if color {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(bytes, w as u32, h as u32, ty)
        .map_err(|e| Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3, H, W]` image in `[0, 1]` as binary PPM.
pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        _ => {
            return Err(Error::Rank {
                expected: 3,
                got: image.shape().to_vec(),
            })
        }
    };
    let plane = h * w;
    let bytes: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |c| (c, i)))
        .map(|(c, i)| to_byte(image.data()[c * plane + i]))
        .collect();
    encode_pnm(path.as_ref(), &bytes, w, h, true)
}

/// Write an `[H, W]` mask as binary PGM (saliency 0/255, classes as raw bytes).
pub fn save_mask(path: impl AsRef<Path>, mask: &Tensor, task: Task) -> Result<()> {
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        _ => {
            return Err(Error::Rank {
                expected: 2,
                got: mask.shape().to_vec(),
            })
        }
    };
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| match task {
            Task::Saliency => {
                if v >= 0.5 {
                    255
                } else {
                    0
                }
            }
            Task::Multiclass(_) => v.clamp(0.0, 255.0) as u8,
        })
        .collect();
    encode_pnm(path.as_ref(), &bytes, w, h, false)
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.ppm"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.pgm"))
}

/// Ids listed one per line; blank lines and `#` comments are skipped.
pub fn read_id_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Load the samples named in `list` (relative to `root` unless absolute),
/// optionally resizing image and mask to `resize`.
pub fn load_dataset_dir(
    root: impl AsRef<Path>,
    list: impl AsRef<Path>,
    task: Task,
    resize: Option<(usize, usize)>,
) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let ids = read_id_list(root.join(list))?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ids.into_iter()
        .map(|id| {
            let mut image = load_image(image_path(root, &id))?;
            let mut mask = load_mask(mask_path(root, &id), task)?;
            if let Some((h, w)) = resize {
                image = resize_nearest(&image, h, w)?;
                mask = resize_nearest(&mask, h, w)?;
            }
            let s = Sample::new(image, mask, id)?;
            s.validate_mask(task)?;
            Ok(s)
        })
        .collect()
}

/// Write samples into the directory layout and record their ids in `list`.
pub fn write_dataset_dir(root: impl AsRef<Path>, list: &str, samples: &[Sample], task: Task) -> Result<()> {
    let root = root.as_ref();
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut ids = String::new();
    for s in samples {
        save_image(image_path(root, &s.id), &s.image)?;
        save_mask(mask_path(root, &s.id), &s.mask, task)?;
        ids.push_str(&s.id);
        ids.push('\n');
    }
    let list_path = root.join(list);
    fs::write(&list_path, ids).map_err(|e| Error::io(&list_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_foreground_matches_brute_force_count() {
        let cfg = CircleTaskConfig::centered(64, 64, 14, 3, 1);
        let mask = circle_mask(&cfg).unwrap();
        let mut count = 0;
        for h in 0..64i64 {
            for w in 0..64i64 {
                if (h - 32) * (h - 32) + (w - 32) * (w - 32) <= 196 {
                    count += 1;
                }
            }
        }
        let fg: f64 = mask.data().iter().sum();
        assert_eq!(fg as usize, count);
        // lattice points in a radius-14 disc
        assert_eq!(count, 613);
        assert!((fg / 4096.0 - 0.150).abs() < 0.005);
    }

    #[test]
    fn circle_masks_are_shared_and_images_seeded() {
        let cfg = CircleTaskConfig::centered(16, 16, 4, 5, 7);
        let a = gen_circle_dataset(&cfg).unwrap();
        assert!(a.windows(2).all(|w| w[0].mask == w[1].mask));
        assert_ne!(a[0].image, a[1].image);
        assert_eq!(a, gen_circle_dataset(&cfg).unwrap());
    }

    #[test]
    fn circle_must_fit() {
        let cfg = CircleTaskConfig::centered(64, 64, 40, 1, 0);
        assert!(matches!(gen_circle_dataset(&cfg), Err(Error::CircleOutsideImage { .. })));
        let cfg = CircleTaskConfig::centered(64, 64, 32, 1, 0);
        assert!(gen_circle_dataset(&cfg).is_err());
        let cfg = CircleTaskConfig::centered(64, 64, 31, 1, 0);
        assert!(gen_circle_dataset(&cfg).is_ok());
    }

    #[test]
    fn noise_mode_varies_per_pixel() {
        let mut cfg = CircleTaskConfig::centered(8, 8, 2, 1, 3);
        cfg.color_mode = ColorMode::PerPixelNoise;
        let s = &gen_circle_dataset(&cfg).unwrap()[0];
        assert_ne!(s.image.data()[0], s.image.data()[1]);
    }

    #[test]
    fn nearest_square_rules() {
        let one = [SquarePlacement { top: 2, left: 3 }];
        assert_eq!(nearest_square(&one, 4, 32, 32), Some(0));
        let two = [
            SquarePlacement { top: 0, left: 0 },
            SquarePlacement { top: 14, left: 14 },
        ];
        assert_eq!(nearest_square(&two, 4, 32, 32), Some(1));
        let tie = [
            SquarePlacement { top: 0, left: 14 },
            SquarePlacement { top: 28, left: 14 },
        ];
        assert_eq!(nearest_square(&tie, 4, 32, 32), None);
    }

    #[test]
    fn resize_matches_upsampling_and_is_idempotent() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = resize_nearest(&x, 4, 4).unwrap();
        assert_eq!(up, crate::layers::upsample2_nearest(&x).unwrap());
        assert_eq!(resize_nearest(&up, 4, 4).unwrap(), up);
    }

    #[test]
    fn mask_byte_threshold() {
        assert_eq!(mask_from_bytes(&[200, 100, 128, 127], Task::Saliency), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(mask_from_bytes(&[3, 255], Task::Multiclass(4)), vec![3.0, 255.0]);
    }

    #[test]
    fn sample_rejects_mismatched_sizes() {
        let err = Sample::new(Tensor::zeros(&[3, 4, 4]).unwrap(), Tensor::zeros(&[4, 5]).unwrap(), "x");
        assert!(matches!(err, Err(Error::ImageMaskMismatch { .. })));
    }
}
