//! Randomized augmentation pairs and the synthetic correspondences between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;
use crate::warp::{
    crop_homography, make_affine, sample_crop_rect, sample_perspective, ColorJitterParams,
    CropRect, Homography, JitterStrengths, Point, Warp,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineSpec {
    pub enabled: bool,
    /// Rotation range in degrees.
    pub angle: (f64, f64),
    pub scale: (f64, f64),
}

impl Default for AffineSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            angle: (0.0, 359.0),
            scale: (0.5, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerspectiveSpec {
    pub enabled: bool,
    pub distortion_scale: f64,
}

impl Default for PerspectiveSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            distortion_scale: 0.4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResizedCropSpec {
    pub enabled: bool,
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for ResizedCropSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            scale: (0.7, 1.0),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorJitterSpec {
    pub enabled: bool,
    pub strengths: JitterStrengths,
}

impl Default for ColorJitterSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            strengths: JitterStrengths::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub affine: AffineSpec,
    pub perspective: PerspectiveSpec,
    pub resized_crop: ResizedCropSpec,
    pub color_jitter: ColorJitterSpec,
    /// Probability with which each enabled augmentation is applied.
    pub probability: f64,
    /// 1: the second view is the untouched input. 2: both views augmented.
    pub views: u8,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            affine: AffineSpec::default(),
            perspective: PerspectiveSpec::default(),
            resized_crop: ResizedCropSpec::default(),
            color_jitter: ColorJitterSpec::default(),
            probability: 1.0,
            views: 2,
        }
    }
}

impl AugmentationSpec {
    pub fn disabled() -> Self {
        let mut s = Self::default();
        s.affine.enabled = false;
        s.perspective.enabled = false;
        s.resized_crop.enabled = false;
        s.color_jitter.enabled = false;
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("augmentation probability {} outside [0,1]", self.probability));
        }
        if !matches!(self.views, 1 | 2) {
            return bad(format!("augmented view count must be 1 or 2, got {}", self.views));
        }
        let (lo, hi) = self.affine.scale;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("affine scale range [{lo}, {hi}] invalid"));
        }
        if !(0.0..=1.0).contains(&self.perspective.distortion_scale) {
            return bad("distortion scale outside [0,1]".into());
        }
        let (lo, hi) = self.resized_crop.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop scale range [{lo}, {hi}] invalid"));
        }
        let s = self.color_jitter.strengths;
        if [s.brightness, s.contrast, s.saturation].iter().any(|&x| x < 0.0)
            || !(0.0..=0.5).contains(&s.hue)
        {
            return bad("color jitter strengths out of range".into());
        }
        Ok(())
    }
}

/// The random parameters drawn for one augmented view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewDraw {
    /// `(angle in degrees, scale)`
    pub affine: Option<(f64, f64)>,
    pub perspective: Option<(Homography, [Point; 4])>,
    pub crop: Option<CropRect>,
    pub jitter: Option<ColorJitterParams>,
}

impl ViewDraw {
    /// Geometry composed as resize&crop ∘ perspective ∘ affine.
    pub fn warp(&self, width: usize, height: usize) -> Result<Warp> {
        let mut h = Homography::identity();
        if let Some((angle, scale)) = self.affine {
            let center = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
            h = make_affine(center, angle, scale)?;
        }
        if let Some((p, _)) = &self.perspective {
            h = p.compose(&h)?;
        }
        if let Some(rect) = self.crop {
            h = crop_homography(rect, width, height)?.compose(&h)?;
        }
        Ok(Warp {
            geometry: h,
            photometric: self.jitter,
        })
    }
}

pub fn draw_view(
    width: usize,
    height: usize,
    spec: &AugmentationSpec,
    rng: &mut Rng,
) -> Result<ViewDraw> {
    let p = spec.probability;
    let mut draw = ViewDraw::default();
    if spec.affine.enabled && rng.bernoulli(p) {
        let angle = rng.uniform_inclusive(spec.affine.angle.0, spec.affine.angle.1);
        let scale = rng.uniform_inclusive(spec.affine.scale.0, spec.affine.scale.1);
        draw.affine = Some((angle, scale));
    }
    if spec.perspective.enabled && rng.bernoulli(p) {
        draw.perspective = Some(sample_perspective(
            width,
            height,
            spec.perspective.distortion_scale,
            rng,
        )?);
    }
    if spec.resized_crop.enabled && rng.bernoulli(p) {
        draw.crop = Some(sample_crop_rect(
            width,
            height,
            spec.resized_crop.scale,
            spec.resized_crop.aspect,
            rng,
        )?);
    }
    if spec.color_jitter.enabled && rng.bernoulli(p) {
        draw.jitter = Some(ColorJitterParams::sample(&spec.color_jitter.strengths, rng));
    }
    Ok(draw)
}

pub fn sample_view(img: &Image, spec: &AugmentationSpec, rng: &mut Rng) -> Result<(Image, Warp)> {
    if img.width() < 8 || img.height() < 8 {
        return Err(Error::InvalidParam(format!(
            "augmentation needs at least 8x8, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let warp = draw_view(img.width(), img.height(), spec, rng)?.warp(img.width(), img.height())?;
    Ok((warp.apply(img)?, warp))
}

#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub first: Image,
    pub first_warp: Warp,
    pub second: Image,
    pub second_warp: Warp,
}

/// Two independent views drawn from child streams 0 and 1 of `rng`.
pub fn make_pair(img: &Image, spec: &AugmentationSpec, rng: &Rng) -> Result<AugmentedPair> {
    make_pair_with(img, spec, &mut rng.child(0), &mut rng.child(1))
}

pub fn make_pair_with(
    img: &Image,
    spec: &AugmentationSpec,
    rng_first: &mut Rng,
    rng_second: &mut Rng,
) -> Result<AugmentedPair> {
    spec.validate()?;
    let (first, first_warp) = sample_view(img, spec, rng_first)?;
    let (second, second_warp) = if spec.views == 1 {
        (img.clone(), Warp::identity())
    } else {
        sample_view(img, spec, rng_second)?
    };
    Ok(AugmentedPair {
        first,
        first_warp,
        second,
        second_warp,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceSource {
    Synthetic,
    Geometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub pixels_a: Vec<(u32, u32)>,
    pub pixels_b: Vec<(u32, u32)>,
    pub source: CorrespondenceSource,
    /// Set when fewer pairs than requested were available.
    pub short: bool,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pixels_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels_a.is_empty()
    }
}

/// Largest allowed distance between the two pre-images of a synthetic pair,
/// in original-image pixels.
pub const MAX_PREIMAGE_GAP: f64 = 1.0;

/// Rejection sampling: draw `p′` uniformly on the first view's grid, map it
/// back to the source image, forward into the second view and round.
///
/// Pairs whose rounded second-view pixel maps back more than
/// [`MAX_PREIMAGE_GAP`] away from the source point are rejected as well, which
/// only happens when the second view shrinks the image.
pub fn sample_synthetic_correspondences(
    first: &Warp,
    second: &Warp,
    width: usize,
    height: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<CorrespondenceSet> {
    if n == 0 {
        return Err(Error::InvalidParam("correspondence count must be >= 1".into()));
    }
    let inv_first = first.geometry.invert()?;
    let fwd_second = second.geometry;
    let inv_second = second.geometry.invert()?;
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    let budget = 50 * n;
    let mut set = CorrespondenceSet {
        pixels_a: Vec::with_capacity(n),
        pixels_b: Vec::with_capacity(n),
        source: CorrespondenceSource::Synthetic,
        short: false,
    };
    let mut attempts = 0;
    while set.len() < n && attempts < budget {
        attempts += 1;
        let ua = rng.below(width);
        let va = rng.below(height);
        let Ok(p) = inv_first.apply((ua as f64, va as f64)) else {
            continue;
        };
        if !(p.0 >= 0.0 && p.0 <= wmax && p.1 >= 0.0 && p.1 <= hmax) {
            continue;
        }
        let Ok(q) = fwd_second.apply(p) else {
            continue;
        };
        let (ub, vb) = (q.0.round(), q.1.round());
        if !(ub >= 0.0 && ub <= wmax && vb >= 0.0 && vb <= hmax) {
            continue;
        }
        let Ok(back) = inv_second.apply((ub, vb)) else {
            continue;
        };
        if (back.0 - p.0).hypot(back.1 - p.1) > MAX_PREIMAGE_GAP {
            continue;
        }
        set.pixels_a.push((ua as u32, va as u32));
        set.pixels_b.push((ub as u32, vb as u32));
    }
    if set.len() < n {
        return Err(Error::SamplingFailed {
            requested: n,
            accepted: set.len(),
            attempts,
            rate: set.len() as f64 / attempts.max(1) as f64,
        });
    }
    Ok(set)
}
