//! Geometric and photometric image transforms.
//!
//! Affine, perspective and resize&crop augmentations are all represented as
//! 3×3 homographies over pixel coordinates so that correspondences can be
//! tracked through any chain of them with a single matrix product.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{hsv_to_rgb_pixel, luma, rgb_to_hsv_pixel, Image};
use crate::rng::Rng;

pub type Point = (f64, f64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Wraps a matrix, scaling it so that `m[2][2] = 1` when that entry is nonzero.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParam("non-finite homography entry".into()));
        }
        let m = if m[(2, 2)] != 0.0 { m / m[(2, 2)] } else { m };
        let det = m.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::Singular);
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn translation(du: f64, dv: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, du, 0.0, 1.0, dv, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn is_identity(&self) -> bool {
        self.m == Matrix3::identity()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::from_matrix(self.m * other.m)
    }

    pub fn invert(&self) -> Result<Homography> {
        let inv = self.m.try_inverse().ok_or(Error::Singular)?;
        Homography::from_matrix(inv)
    }

    pub fn apply(&self, p: Point) -> Result<Point> {
        let x = self.m * Vector3::new(p.0, p.1, 1.0);
        if x.z.abs() < 1e-12 {
            return Err(Error::PointAtInfinity);
        }
        Ok((x.x / x.z, x.y / x.z))
    }

    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.m - other.m).amax()
    }
}

impl TryFrom<[[f64; 3]; 3]> for Homography {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Homography::from_rows(rows)
    }
}

impl From<Homography> for [[f64; 3]; 3] {
    fn from(h: Homography) -> Self {
        h.rows()
    }
}

/// `T(center) · S(scale) · R(angle) · T(−center)`.
pub fn make_affine(center: Point, angle_deg: f64, scale: f64) -> Result<Homography> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidParam(format!("affine scale must be > 0, got {scale}")));
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (cu, cv) = center;
    let a = scale * c;
    let b = scale * s;
    let m = Matrix3::new(
        a,
        -b,
        cu - a * cu + b * cv,
        b,
        a,
        cv - b * cu - a * cv,
        0.0,
        0.0,
        1.0,
    );
    Homography::from_matrix(m)
}

/// Exact homography taking `src[i]` to `dst[i]` for four point pairs.
pub fn homography_from_points(src: &[Point; 4], dst: &[Point; 4]) -> Result<Homography> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b).ok_or(Error::Singular)?;
    Homography::from_matrix(Matrix3::new(
        h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0,
    ))
}

pub fn image_corners(width: usize, height: usize) -> [Point; 4] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// True when the quadrilateral is strictly convex with consistent winding.
fn is_convex_quad(q: &[Point; 4]) -> bool {
    let signs: Vec<f64> = (0..4)
        .map(|i| cross(q[i], q[(i + 1) % 4], q[(i + 2) % 4]))
        .collect();
    signs.iter().all(|&s| s > 1e-9) || signs.iter().all(|&s| s < -1e-9)
}

/// Corners displaced inward by uniform offsets, returned with the homography
/// mapping the original corners onto them.
pub fn sample_perspective(
    width: usize,
    height: usize,
    distortion_scale: f64,
    rng: &mut Rng,
) -> Result<(Homography, [Point; 4])> {
    if width < 2 || height < 2 {
        return Err(Error::InvalidParam("perspective needs at least 2x2".into()));
    }
    if !(0.0..=1.0).contains(&distortion_scale) {
        return Err(Error::InvalidParam(format!(
            "distortion scale {distortion_scale} outside [0,1]"
        )));
    }
    let src = image_corners(width, height);
    if distortion_scale == 0.0 {
        return Ok((Homography::identity(), src));
    }
    let max_du = distortion_scale * width as f64 / 2.0;
    let max_dv = distortion_scale * height as f64 / 2.0;
    // inward direction per corner: TL, TR, BR, BL
    let dirs = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    const ATTEMPTS: usize = 16;
    for _ in 0..ATTEMPTS {
        let mut dst = src;
        for (p, d) in dst.iter_mut().zip(dirs) {
            p.0 += d.0 * rng.uniform_inclusive(0.0, max_du);
            p.1 += d.1 * rng.uniform_inclusive(0.0, max_dv);
        }
        if !is_convex_quad(&dst) {
            continue;
        }
        if let Ok(h) = homography_from_points(&src, &dst) {
            return Ok((h, dst));
        }
    }
    Err(Error::DegenerateCorners(ATTEMPTS))
}

pub fn make_perspective(
    width: usize,
    height: usize,
    distortion_scale: f64,
    rng: &mut Rng,
) -> Result<Homography> {
    sample_perspective(width, height, distortion_scale, rng).map(|(h, _)| h)
}

/// Axis-aligned crop rectangle in continuous pixel-edge coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

/// Homography scaling the crop rectangle onto the full `width × height` canvas.
pub fn crop_homography(rect: CropRect, width: usize, height: usize) -> Result<Homography> {
    let sx = width as f64 / rect.width;
    let sy = height as f64 / rect.height;
    Homography::from_matrix(Matrix3::new(
        sx,
        0.0,
        -rect.x0 * sx,
        0.0,
        sy,
        -rect.y0 * sy,
        0.0,
        0.0,
        1.0,
    ))
}

pub fn sample_crop_rect(
    width: usize,
    height: usize,
    area_scale: (f64, f64),
    aspect: (f64, f64),
    rng: &mut Rng,
) -> Result<CropRect> {
    let (lo, hi) = area_scale;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "crop area scale range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
        )));
    }
    if !(aspect.0 > 0.0 && aspect.0 <= aspect.1) {
        return Err(Error::InvalidParam(format!(
            "aspect range [{}, {}] invalid",
            aspect.0, aspect.1
        )));
    }
    let (w, h) = (width as f64, height as f64);
    let area = w * h;
    let (log_lo, log_hi) = (aspect.0.ln(), aspect.1.ln());
    for _ in 0..10 {
        let target = area * rng.uniform_inclusive(lo, hi);
        let ratio = rng.uniform_inclusive(log_lo, log_hi).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw > 0.0 && cw <= w && ch > 0.0 && ch <= h {
            let x0 = rng.uniform_inclusive(0.0, w - cw);
            let y0 = rng.uniform_inclusive(0.0, h - ch);
            return Ok(CropRect {
                x0,
                y0,
                width: cw,
                height: ch,
            });
        }
    }
    let side = w.min(h);
    Ok(CropRect {
        x0: (w - side) / 2.0,
        y0: (h - side) / 2.0,
        width: side,
        height: side,
    })
}

pub fn make_resized_crop(
    width: usize,
    height: usize,
    area_scale: (f64, f64),
    aspect: (f64, f64),
    rng: &mut Rng,
) -> Result<Homography> {
    let rect = sample_crop_rect(width, height, area_scale, aspect, rng)?;
    crop_homography(rect, width, height)
}

/// Output pixel `q` takes the input value at `h⁻¹(q)`; outside samples are 0.
pub fn warp_image(img: &Image, h: &Homography) -> Result<Image> {
    if h.is_identity() {
        return Ok(img.clone());
    }
    let inv = h.invert()?;
    let m = inv.matrix();
    let mut out = Image::zeros(img.width(), img.height(), img.channels());
    let ch = img.channels();
    let mut px = vec![0.0f32; ch];
    for v in 0..img.height() {
        for u in 0..img.width() {
            let (x, y) = (u as f64, v as f64);
            let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
            if w.abs() < 1e-12 {
                continue;
            }
            let su = (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w;
            let sv = (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w;
            img.bilinear_sample(su, sv, &mut px);
            out.pixel_mut(u, v).copy_from_slice(&px);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub order: [JitterOp; 4],
}

impl ColorJitterParams {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: [
                JitterOp::Brightness,
                JitterOp::Contrast,
                JitterOp::Saturation,
                JitterOp::Hue,
            ],
        }
    }

    /// Factors drawn from `[max(0, 1−s), 1+s]`, hue from `[−h, h]`, order shuffled.
    pub fn sample(strengths: &JitterStrengths, rng: &mut Rng) -> Self {
        let factor = |s: f64, rng: &mut Rng| rng.uniform_inclusive((1.0 - s).max(0.0), 1.0 + s);
        let mut order = Self::identity().order;
        rng.shuffle(&mut order);
        let brightness = factor(strengths.brightness, rng);
        let contrast = factor(strengths.contrast, rng);
        let saturation = factor(strengths.saturation, rng);
        let hue = rng.uniform_inclusive(-strengths.hue, strengths.hue);
        Self {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterStrengths {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterStrengths {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.2,
        }
    }
}

pub fn apply_color_jitter(img: &Image, p: &ColorJitterParams) -> Result<Image> {
    img.require_rgb()?;
    let mut out = img.clone();
    for op in p.order {
        match op {
            JitterOp::Brightness => {
                let f = p.brightness as f32;
                for x in out.data_mut() {
                    *x = (f * *x).clamp(0.0, 1.0);
                }
            }
            JitterOp::Contrast => {
                let f = p.contrast as f32;
                let n = (out.width() * out.height()).max(1) as f64;
                let mean = out
                    .data()
                    .chunks_exact(3)
                    .map(|px| luma(px[0], px[1], px[2]) as f64)
                    .sum::<f64>()
                    / n;
                let g = (1.0 - f) * mean as f32;
                for x in out.data_mut() {
                    *x = (g + f * *x).clamp(0.0, 1.0);
                }
            }
            JitterOp::Saturation => {
                let f = p.saturation as f32;
                for px in out.data_mut().chunks_exact_mut(3) {
                    let g = (1.0 - f) * luma(px[0], px[1], px[2]);
                    for x in px.iter_mut() {
                        *x = (g + f * *x).clamp(0.0, 1.0);
                    }
                }
            }
            JitterOp::Hue => {
                if p.hue == 0.0 {
                    continue;
                }
                let d = p.hue as f32;
                for px in out.data_mut().chunks_exact_mut(3) {
                    let (h, s, v) = rgb_to_hsv_pixel(px[0], px[1], px[2]);
                    let (r, g, b) = hsv_to_rgb_pixel((h + d).rem_euclid(1.0), s, v);
                    px[0] = r.clamp(0.0, 1.0);
                    px[1] = g.clamp(0.0, 1.0);
                    px[2] = b.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// A tracked augmentation: pixel motion plus an optional color change that
/// never moves pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Warp {
    pub geometry: Homography,
    pub photometric: Option<ColorJitterParams>,
}

impl Warp {
    pub fn identity() -> Self {
        Self {
            geometry: Homography::identity(),
            photometric: None,
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        let warped = warp_image(img, &self.geometry)?;
        match &self.photometric {
            Some(p) => apply_color_jitter(&warped, p),
            None => Ok(warped),
        }
    }
}
