//! Procedural desk-scale datasets with exact ground truth.
//!
//! Scenes are flat textured canvases with a few objects drawn back to front.
//! Alternative "camera" views are homographies of the canvas, so the true
//! correspondence between two views is a known matrix chain. Planar RGBD frames
//! are rendered analytically for reprojection tests.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomcorr::{CameraIntrinsics, DepthMap, PosedDepthFrame, RigidTransform};
use crate::image::{decode_png, encode_png, hsv_to_rgb_pixel, load_image, save_image, Image};
use crate::rng::Rng;
use crate::warp::{make_affine, warp_image, Homography};

/// Object id per pixel; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.labels[v * self.width + u]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn object_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, _)| (i % self.width, i / self.width))
    }

    /// Nearest-neighbour warp; pixels mapping outside become background.
    pub fn warp(&self, view: &Homography) -> Result<LabelMap> {
        let inv = view.invert()?;
        let mut out = LabelMap::new(self.width, self.height);
        for v in 0..self.height {
            for u in 0..self.width {
                if let Ok((x, y)) = inv.apply((u as f64, v as f64)) {
                    let (x, y) = (x.round(), y.round());
                    if x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height
                    {
                        out.labels[v * self.width + u] = self.get(x as usize, y as usize);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = Image::new(
            self.width,
            self.height,
            1,
            self.labels.iter().map(|&l| l as f32 / 255.0).collect(),
        )?;
        save_image(&img, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LabelMap> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = decode_png(&bytes).map_err(|message| Error::Decode {
            path: path.to_path_buf(),
            message,
        })?;
        if img.channels() != 1 {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: "label map must be grayscale".into(),
            });
        }
        Ok(LabelMap {
            width: img.width(),
            height: img.height(),
            labels: img.to_bytes(),
        })
    }
}

/// Smooth, non-periodic value noise on an integer lattice.
#[derive(Clone, Copy, Debug)]
pub struct ValueNoise {
    seed: u64,
}

fn hash3(seed: u64, x: i64, y: i64, c: u64) -> f32 {
    let mut z = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

impl ValueNoise {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Noise in `[0, 1]` at `(x, y)` in lattice units for channel `c`.
    pub fn sample(&self, x: f64, y: f64, c: u64) -> f32 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (smooth((x - x0) as f32), smooth((y - y0) as f32));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let a = hash3(self.seed, ix, iy, c);
        let b = hash3(self.seed, ix + 1, iy, c);
        let d = hash3(self.seed, ix, iy + 1, c);
        let e = hash3(self.seed, ix + 1, iy + 1, c);
        let top = a + (b - a) * fx;
        let bot = d + (e - d) * fx;
        top + (bot - top) * fy
    }

    /// Two-octave color texture around a base color.
    pub fn color(&self, x: f64, y: f64, base: [f32; 3], amplitude: f32, cell: f64) -> [f32; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let n = 0.65 * self.sample(x / cell, y / cell, c as u64)
                + 0.35 * self.sample(x / (cell * 0.45) + 17.0, y / (cell * 0.45) - 5.0, c as u64 + 3);
            *o = (base[c] + amplitude * (n - 0.5) * 2.0).clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Disc { radius: f64 },
    Rectangle { half_width: f64, half_height: f64, angle_deg: f64 },
    Ring { outer: f64, inner: f64 },
}

impl Shape {
    fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Disc { radius } => radius,
            Shape::Rectangle {
                half_width,
                half_height,
                ..
            } => half_width.hypot(half_height),
            Shape::Ring { outer, .. } => outer,
        }
    }

    /// Inside test in object-local coordinates (relative to the center).
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Disc { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Rectangle {
                half_width,
                half_height,
                angle_deg,
            } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                let (x, y) = (c * dx + s * dy, -s * dx + c * dy);
                x.abs() <= half_width && y.abs() <= half_height
            }
            Shape::Ring { outer, inner } => {
                let r2 = dx * dx + dy * dy;
                r2 <= outer * outer && r2 >= inner * inner
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub center: (f64, f64),
    pub texture_seed: u64,
    /// Base hue in `[0, 1)`.
    pub hue: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectSpec>,
    pub background_seed: u64,
    pub seed: u64,
}

impl SceneSpec {
    /// Random placement of `n_objects` objects fully inside the canvas.
    pub fn random(width: usize, height: usize, n_objects: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed, 0x5CE4E);
        let (w, h) = (width as f64, height as f64);
        let base = w.min(h);
        let mut objects = Vec::with_capacity(n_objects);
        for i in 0..n_objects {
            let shape = match rng.below(3) {
                0 => Shape::Disc {
                    radius: rng.uniform(0.09, 0.17) * base,
                },
                1 => Shape::Rectangle {
                    half_width: rng.uniform(0.07, 0.16) * base,
                    half_height: rng.uniform(0.05, 0.12) * base,
                    angle_deg: rng.uniform(0.0, 180.0),
                },
                _ => {
                    let outer = rng.uniform(0.11, 0.18) * base;
                    Shape::Ring {
                        outer,
                        inner: outer * rng.uniform(0.35, 0.55),
                    }
                }
            };
            let r = shape.bounding_radius();
            let mut placed = None;
            if 2.0 * r + 2.0 <= w && 2.0 * r + 2.0 <= h {
                // overlap is allowed, but no object may be mostly hidden
                for _ in 0..100 {
                    let c = (rng.uniform(r + 1.0, w - r - 1.0), rng.uniform(r + 1.0, h - r - 1.0));
                    let clear = objects.iter().all(|o: &ObjectSpec| {
                        let d = (o.center.0 - c.0).hypot(o.center.1 - c.1);
                        d >= 0.6 * (o.shape.bounding_radius() + r)
                    });
                    if clear {
                        placed = Some(c);
                        break;
                    }
                }
            }
            let center = placed.ok_or_else(|| {
                Error::Infeasible(format!("object {i} does not fit in {width}x{height}"))
            })?;
            objects.push(ObjectSpec {
                shape,
                center,
                texture_seed: rng.next_u64(),
                hue: (i as f64 / n_objects.max(1) as f64 + rng.uniform(0.0, 0.1)).rem_euclid(1.0),
            });
        }
        Ok(Self {
            width,
            height,
            objects,
            background_seed: rng.next_u64(),
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidParam("scene canvas must be at least 8x8".into()));
        }
        if self.objects.len() > 255 {
            return Err(Error::InvalidParam("at most 255 objects".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let r = o.shape.bounding_radius();
            let (cu, cv) = o.center;
            if cu - r < 0.0 || cv - r < 0.0 || cu + r > (self.width - 1) as f64 || cv + r > (self.height - 1) as f64 {
                return Err(Error::Infeasible(format!("object {i} extends past the canvas")));
            }
        }
        Ok(())
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<(Image, LabelMap)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let bg = ValueNoise::new(spec.background_seed);
    let mut img = Image::from_fn(w, h, 3, |_, _, _| 0.0);
    for v in 0..h {
        for u in 0..w {
            let c = bg.color(u as f64, v as f64, [0.45, 0.45, 0.42], 0.3, 14.0);
            img.pixel_mut(u, v).copy_from_slice(&c);
        }
    }
    let mut labels = LabelMap::new(w, h);
    for (i, o) in spec.objects.iter().enumerate() {
        let noise = ValueNoise::new(o.texture_seed);
        let (r, g, b) = hsv_to_rgb_pixel(o.hue as f32, 0.3, 0.8);
        let rad = o.shape.bounding_radius();
        let (cu, cv) = o.center;
        let u0 = (cu - rad).floor().max(0.0) as usize;
        let v0 = (cv - rad).floor().max(0.0) as usize;
        let u1 = ((cu + rad).ceil() as usize).min(w - 1);
        let v1 = ((cv + rad).ceil() as usize).min(h - 1);
        for v in v0..=v1 {
            for u in u0..=u1 {
                let (dx, dy) = (u as f64 - cu, v as f64 - cv);
                if o.shape.contains(dx, dy) {
                    let c = noise.color(dx, dy, [r, g, b], 0.45, 3.0);
                    img.pixel_mut(u, v).copy_from_slice(&c);
                    labels.labels[v * w + u] = (i + 1) as u8;
                }
            }
        }
    }
    Ok((img, labels))
}

/// A view of the canvas through a homography; the true match of pixel `p`
/// between views `a` and `b` is `b(a⁻¹(p))`.
pub fn render_view(scene: &Image, view: &Homography) -> Result<Image> {
    warp_image(scene, view)
}

/// Homography from view `a` to view `b` of the same canvas.
pub fn view_to_view(a: &Homography, b: &Homography) -> Result<Homography> {
    b.compose(&a.invert()?)
}

/// Similarity transform about the canvas center.
pub fn similarity_view(width: usize, height: usize, angle_deg: f64, scale: f64) -> Result<Homography> {
    make_affine(
        ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
        angle_deg,
        scale,
    )
}

/// Homography of the canvas seen as a plane rotated by `tilt_deg` about its
/// vertical center line, at principal distance `focal` pixels.
pub fn tilt_view(width: usize, height: usize, tilt_deg: f64, focal: f64) -> Result<Homography> {
    let (cu, cv) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (s, c) = tilt_deg.to_radians().sin_cos();
    let to_center = Homography::translation(-cu, -cv);
    let back = Homography::translation(cu, cv);
    let tilt = Homography::from_matrix(Matrix3::new(focal * c, 0.0, 0.0, 0.0, focal, 0.0, s, 0.0, focal))?;
    back.compose(&tilt)?.compose(&to_center)
}

/// Textured plane, optionally bounded to a rectangle in its own frame.
#[derive(Clone, Copy, Debug)]
pub struct PlaneSurface {
    /// plane→world; the plane is `z = 0` in its own frame.
    pub pose: RigidTransform,
    pub half_extent: Option<(f64, f64)>,
    pub texture_seed: u64,
    /// texture lattice cell size in meters
    pub texture_cell: f64,
}

impl PlaneSurface {
    pub fn normal(&self) -> Vector3<f64> {
        self.pose.rotation.column(2).into_owned()
    }

    /// Ray parameter and in-plane coordinates of the first hit, if any.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(self.pose.translation - origin)) / denom;
        if s <= 0.0 {
            return None;
        }
        let local = self.pose.inverse_apply(&(origin + dir * s));
        if let Some((hx, hy)) = self.half_extent {
            if local.x.abs() > hx || local.y.abs() > hy {
                return None;
            }
        }
        Some((s, local.x, local.y))
    }
}

/// Z-buffered render of planes; pixels that hit nothing get depth 0.
pub fn render_planes(
    intrinsics: &CameraIntrinsics,
    planes: &[PlaneSurface],
    camera: &RigidTransform,
    width: usize,
    height: usize,
) -> PosedDepthFrame {
    let mut rgb = Image::zeros(width, height, 3);
    let mut depth = vec![0.0f32; width * height];
    let origin = camera.translation;
    for v in 0..height {
        for u in 0..width {
            // camera ray with unit z, so the ray parameter is the camera depth
            let dir = camera.rotation * intrinsics.ray(u as f64, v as f64);
            let mut best: Option<(f64, usize, f64, f64)> = None;
            for (i, p) in planes.iter().enumerate() {
                if let Some((s, x, y)) = p.intersect(&origin, &dir) {
                    if best.is_none_or(|b| s < b.0) {
                        best = Some((s, i, x, y));
                    }
                }
            }
            if let Some((s, i, x, y)) = best {
                let p = &planes[i];
                let c = ValueNoise::new(p.texture_seed).color(
                    x,
                    y,
                    [0.5, 0.45, 0.4],
                    0.45,
                    p.texture_cell,
                );
                rgb.pixel_mut(u, v).copy_from_slice(&c);
                depth[v * width + u] = s as f32;
            }
        }
    }
    PosedDepthFrame {
        rgb,
        depth: DepthMap {
            width,
            height,
            data: depth,
        },
        pose: *camera,
        intrinsics: *intrinsics,
    }
}

/// Frames of one unbounded textured plane seen from each camera pose.
pub fn generate_planar_rgbd(
    intrinsics: &CameraIntrinsics,
    plane: &RigidTransform,
    cameras: &[RigidTransform],
    width: usize,
    height: usize,
    texture_seed: u64,
) -> Result<Vec<PosedDepthFrame>> {
    let surface = PlaneSurface {
        pose: *plane,
        half_extent: None,
        texture_seed,
        texture_cell: 0.03,
    };
    let n = surface.normal();
    for (i, cam) in cameras.iter().enumerate() {
        let axis = cam.rotation.column(2).into_owned();
        let cos = n.dot(&axis);
        if cos.abs() < 1e-3 {
            return Err(Error::InvalidParam(format!("camera {i} views the plane edge-on")));
        }
        let local = plane.inverse_apply(&cam.translation);
        let front = surface.intersect(&cam.translation, &axis);
        if front.is_none() || local.z.abs() < 1e-9 {
            return Err(Error::InvalidParam(format!("plane is not in front of camera {i}")));
        }
    }
    Ok(cameras
        .iter()
        .map(|c| render_planes(intrinsics, &[surface], c, width, height))
        .collect())
}

/// Homography induced by a world plane between two pinhole cameras that share
/// intrinsics: maps pixels of camera `a` to pixels of camera `b`.
pub fn plane_homography(
    intrinsics: &CameraIntrinsics,
    plane: &RigidTransform,
    a: &RigidTransform,
    b: &RigidTransform,
) -> Result<Homography> {
    // points X on the plane satisfy nᵀX = d in camera-a coordinates
    let n_world = plane.rotation.column(2).into_owned();
    let n_a = a.rotation.transpose() * n_world;
    let d_a = n_a.dot(&a.inverse_apply(&plane.translation));
    // camera a → camera b
    let r = b.rotation.transpose() * a.rotation;
    let t = b.rotation.transpose() * (a.translation - b.translation);
    let k = intrinsics.matrix();
    let k_inv = k.try_inverse().ok_or(Error::Singular)?;
    Homography::from_matrix(k * (r + t * n_a.transpose() / d_a) * k_inv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: PathBuf,
    pub labels: PathBuf,
    /// Camera views of the canvas; the first is the reference view.
    pub views: Vec<Homography>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub width: usize,
    pub height: usize,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub objects: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Extra views per evaluation scene besides the reference.
    pub views: usize,
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            objects: 6,
            train: 200,
            val: 20,
            test: 20,
            views: 2,
            max_rotation_deg: 45.0,
            scale: (0.8, 1.25),
        }
    }
}

/// In-memory dataset entry.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub image: Image,
    pub labels: LabelMap,
    pub views: Vec<Homography>,
}

/// Random similarity views: identity first, then rotations within
/// `±max_rotation_deg` and log-uniform scales.
pub fn sample_views(cfg: &DatasetConfig, rng: &mut Rng) -> Result<Vec<Homography>> {
    let mut views = vec![Homography::identity()];
    for _ in 0..cfg.views {
        let angle = rng.uniform_inclusive(-cfg.max_rotation_deg, cfg.max_rotation_deg);
        let scale = rng.uniform_inclusive(cfg.scale.0.ln(), cfg.scale.1.ln()).exp();
        views.push(similarity_view(cfg.width, cfg.height, angle, scale)?);
    }
    Ok(views)
}

pub fn generate_split(cfg: &DatasetConfig, split: Split, count: usize, seed: u64) -> Result<Vec<Scene>> {
    let stream = match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    };
    let base = Rng::new(seed, stream);
    (0..count)
        .map(|i| {
            let mut rng = base.child(i as u64);
            let spec = SceneSpec::random(cfg.width, cfg.height, cfg.objects, rng.next_u64())?;
            let (image, labels) = generate_scene(&spec)?;
            let views = if split == Split::Train {
                vec![Homography::identity()]
            } else {
                sample_views(cfg, &mut rng)?
            };
            let prefix = match split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            Ok(Scene {
                id: format!("{prefix}-{i:04}"),
                image,
                labels,
                views,
            })
        })
        .collect()
}

/// Generates all splits into `dir` and writes `manifest.json`. Paths in the
/// manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig, seed: u64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = DatasetManifest {
        width: cfg.width,
        height: cfg.height,
        scenes: Vec::new(),
    };
    for (split, count) in [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)] {
        for scene in generate_split(cfg, split.clone(), count, seed)? {
            let image = PathBuf::from(format!("{}.png", scene.id));
            let labels = PathBuf::from(format!("{}.labels.png", scene.id));
            save_image(&scene.image, dir.join(&image))?;
            scene.labels.save(dir.join(&labels))?;
            manifest.scenes.push(ManifestEntry {
                id: scene.id,
                split: split.clone(),
                image,
                labels,
                views: scene.views,
            });
        }
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads every scene of `split`, resolving paths against the manifest's directory.
pub fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<Scene>> {
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .scenes
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            Ok(Scene {
                image: load_image(root.join(&e.image))?,
                labels: LabelMap::load(root.join(&e.labels))?,
                id: e.id,
                views: e.views,
            })
        })
        .collect()
}

pub fn encode_label_png(labels: &LabelMap) -> Vec<u8> {
    let img = Image::new(
        labels.width,
        labels.height,
        1,
        labels.labels.iter().map(|&l| l as f32 / 255.0).collect(),
    )
    .expect("label map dims");
    encode_png(&img)
}
