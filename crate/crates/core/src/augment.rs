//! Location channels appended to RGB input.
//!
//! Channel order after the three colour channels is fixed: coordinate row,
//! coordinate column, distance from centre, linear index (only the ones the
//! variant uses). Every location channel depends on `(H, W, spec)` alone.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    #[default]
    Rgb,
    RgbCoord,
    RgbDist,
    RgbDistCoord,
    RgbLin,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Rgb,
        Variant::RgbDist,
        Variant::RgbCoord,
        Variant::RgbDistCoord,
        Variant::RgbLin,
    ];

    /// The four inputs compared in benchmarks, in table row order.
    pub const BENCH: [Variant; 4] = [
        Variant::Rgb,
        Variant::RgbDist,
        Variant::RgbCoord,
        Variant::RgbDistCoord,
    ];

    pub fn extra_channels(self) -> usize {
        match self {
            Variant::Rgb => 0,
            Variant::RgbDist | Variant::RgbLin => 1,
            Variant::RgbCoord => 2,
            Variant::RgbDistCoord => 3,
        }
    }

    pub fn has_coord(self) -> bool {
        matches!(self, Variant::RgbCoord | Variant::RgbDistCoord)
    }

    pub fn has_dist(self) -> bool {
        matches!(self, Variant::RgbDist | Variant::RgbDistCoord)
    }

    pub fn has_lin(self) -> bool {
        matches!(self, Variant::RgbLin)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Rgb => "rgb",
            Variant::RgbCoord => "rgb+coord",
            Variant::RgbDist => "rgb+dist",
            Variant::RgbDistCoord => "rgb+dist+coord",
            Variant::RgbLin => "rgb+lin",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Variant::Rgb => 0,
            Variant::RgbCoord => 1,
            Variant::RgbDist => 2,
            Variant::RgbDistCoord => 3,
            Variant::RgbLin => 4,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Variant::Rgb,
            1 => Variant::RgbCoord,
            2 => Variant::RgbDist,
            3 => Variant::RgbDistCoord,
            4 => Variant::RgbLin,
            _ => return None,
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Value range shared by every input channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Normalization {
    /// `[0, 1]`
    #[default]
    UnitInterval,
    /// `[-1, 1]`
    Symmetric,
}

impl Normalization {
    /// Map a `[0, 1]` value into this range.
    #[inline]
    pub fn apply(self, unit: f64) -> f64 {
        match self {
            Normalization::UnitInterval => unit,
            Normalization::Symmetric => 2.0 * unit - 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::UnitInterval => "unit",
            Normalization::Symmetric => "symmetric",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Normalization::UnitInterval => 0,
            Normalization::Symmetric => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Normalization::UnitInterval),
            1 => Some(Normalization::Symmetric),
            _ => None,
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" | "unit_interval" => Ok(Normalization::UnitInterval),
            "symmetric" => Ok(Normalization::Symmetric),
            _ => Err(Error::Config(format!("unknown normalization {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AugmentSpec {
    pub variant: Variant,
    pub norm: Normalization,
}

impl AugmentSpec {
    pub fn new(variant: Variant, norm: Normalization) -> Self {
        AugmentSpec { variant, norm }
    }

    pub fn extra_channels(&self) -> usize {
        self.variant.extra_channels()
    }

    /// Channel count of the network input.
    pub fn in_channels(&self) -> usize {
        3 + self.extra_channels()
    }
}

fn check_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 {
        return Err(Error::ZeroExtent("H"));
    }
    if w == 0 {
        return Err(Error::ZeroExtent("W"));
    }
    Ok(())
}

fn unit_position(i: usize, extent: usize) -> f64 {
    if extent > 1 {
        i as f64 / (extent - 1) as f64
    } else {
        0.5
    }
}

/// Row and column index channels, `[1, 2, H, W]`.
pub fn make_coord_channels(h: usize, w: usize, norm: Normalization) -> Result<Tensor> {
    check_extent(h, w)?;
    Tensor::from_fn4([1, 2, h, w], |_, c, hi, wi| {
        let u = if c == 0 { unit_position(hi, h) } else { unit_position(wi, w) };
        norm.apply(u)
    })
}

/// Euclidean distance to the (real-valued) image centre, max-normalized, `[1, 1, H, W]`.
pub fn make_distance_channel(h: usize, w: usize, norm: Normalization) -> Result<Tensor> {
    check_extent(h, w)?;
    let ch = (h as f64 - 1.0) / 2.0;
    let cw = (w as f64 - 1.0) / 2.0;
    let raw = Tensor::from_fn4([1, 1, h, w], |_, _, hi, wi| {
        (hi as f64 - ch).hypot(wi as f64 - cw)
    })?;
    let max = raw.data().iter().copied().fold(0.0, f64::max);
    Ok(raw.map(|d| norm.apply(if max > 0.0 { d / max } else { 0.0 })))
}

/// Row-major pixel index scaled to `[0, 1]`, `[1, 1, H, W]`.
pub fn make_linear_index_channel(h: usize, w: usize, norm: Normalization) -> Result<Tensor> {
    check_extent(h, w)?;
    let last = (h * w - 1) as f64;
    Tensor::from_fn4([1, 1, h, w], |_, _, hi, wi| {
        let u = if h * w > 1 { (hi * w + wi) as f64 / last } else { 0.0 };
        norm.apply(u)
    })
}

/// All location channels of `spec` stacked in canonical order, or `None` for plain RGB.
pub fn location_channels(h: usize, w: usize, spec: AugmentSpec) -> Result<Option<Tensor>> {
    check_extent(h, w)?;
    let v = spec.variant;
    let mut parts = Vec::new();
    if v.has_coord() {
        parts.push(make_coord_channels(h, w, spec.norm)?);
    }
    if v.has_dist() {
        parts.push(make_distance_channel(h, w, spec.norm)?);
    }
    if v.has_lin() {
        parts.push(make_linear_index_channel(h, w, spec.norm)?);
    }
    let mut iter = parts.into_iter();
    let Some(mut acc) = iter.next() else {
        return Ok(None);
    };
    for p in iter {
        acc = concat_channels(&acc, &p)?;
    }
    Ok(Some(acc))
}

/// Append the location channels of `spec` to a `[N, 3, H, W]` batch.
pub fn augment_image(img: &Tensor, spec: AugmentSpec) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(Error::ChannelMismatch { expected: 3, got: c });
    }
    let Some(loc) = location_channels(h, w, spec)? else {
        return Ok(img.clone());
    };
    let k = loc.shape()[1];
    let mut tiled = Vec::with_capacity(n * loc.len());
    for _ in 0..n {
        tiled.extend_from_slice(loc.data());
    }
    let tiled = Tensor::new(vec![n, k, h, w], tiled)?;
    concat_channels(img, &tiled)
}
