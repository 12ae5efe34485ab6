//! Correspondences between registered RGBD frames by reprojection, pruned by
//! field of view and occlusion.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::augment::{CorrespondenceSet, CorrespondenceSource};
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, Image};
use crate::rng::Rng;
use crate::warp::Warp;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidParam(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-frame ray with unit z through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid camera→world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if err > 1e-6 || rotation.determinant() < 0.0 {
            return Err(Error::InvalidParam(format!(
                "rotation is not orthonormal (deviation {err:.2e})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        let m = Matrix4::from_fn(|r, c| rows[r][c]);
        if (m.row(3) - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).amax() > 1e-9 {
            return Err(Error::Format("pose bottom row must be [0,0,0,1]".into()));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }
}

/// Per-pixel metric depth; 0 marks a missing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimMismatch(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidParam("depth values must be finite and >= 0".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(b"DPTH");
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for d in &self.data {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != b"DPTH" {
            return Err(Error::Format("missing DPTH magic".into()));
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != 4 * w * h {
            return Err(Error::Format(format!(
                "depth body has {} bytes, expected {}",
                body.len(),
                4 * w * h
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DepthMap::new(w, h, data)
    }
}

#[derive(Clone, Debug)]
pub struct PosedDepthFrame {
    pub rgb: Image,
    pub depth: DepthMap,
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

impl PosedDepthFrame {
    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }

    /// World point seen at pixel `(u, v)`, or `None` where depth is missing.
    pub fn unproject(&self, u: usize, v: usize) -> Result<Option<Vector3<f64>>> {
        if u >= self.width() || v >= self.height() {
            return Err(Error::OutOfBounds {
                u: u as i64,
                v: v as i64,
                width: self.width(),
                height: self.height(),
            });
        }
        let z = self.depth.get(u, v) as f64;
        if z == 0.0 {
            return Ok(None);
        }
        let cam = self.intrinsics.ray(u as f64, v as f64) * z;
        Ok(Some(self.pose.apply(&cam)))
    }

    /// Subpixel location and camera depth of a world point.
    pub fn project(&self, x: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        let c = self.pose.inverse_apply(x);
        if c.z <= 1e-6 {
            return Err(Error::BehindCamera);
        }
        let k = &self.intrinsics;
        Ok((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionTolerance {
    /// meters
    pub absolute: f64,
    /// fraction of the reprojected depth
    pub relative: f64,
}

impl Default for OcclusionTolerance {
    fn default() -> Self {
        Self {
            absolute: 0.005,
            relative: 0.01,
        }
    }
}

impl OcclusionTolerance {
    pub fn at(&self, depth: f64) -> f64 {
        self.absolute.max(self.relative * depth)
    }
}

/// Dense A→B map; `None` entries are masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    pub width: usize,
    pub height: usize,
    pub target_width: usize,
    pub target_height: usize,
    pub targets: Vec<Option<(f64, f64)>>,
}

impl CorrespondenceMap {
    pub fn get(&self, u: usize, v: usize) -> Option<(f64, f64)> {
        self.targets[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

pub fn correspondence_map(
    a: &PosedDepthFrame,
    b: &PosedDepthFrame,
    tol: &OcclusionTolerance,
) -> CorrespondenceMap {
    let (w, h) = (a.width(), a.height());
    let mut targets = vec![None; w * h];
    for v in 0..h {
        for u in 0..w {
            let Ok(Some(x)) = a.unproject(u, v) else {
                continue;
            };
            let Ok((ub, vb, zb)) = b.project(&x) else {
                continue;
            };
            let (ru, rv) = (ub.round(), vb.round());
            if !(ru >= 0.0 && rv >= 0.0 && ru < b.width() as f64 && rv < b.height() as f64) {
                continue;
            }
            let measured = b.depth.get(ru as usize, rv as usize) as f64;
            if measured == 0.0 || (measured - zb).abs() > tol.at(zb) {
                continue;
            }
            targets[v * w + u] = Some((ub, vb));
        }
    }
    CorrespondenceMap {
        width: w,
        height: h,
        target_width: b.width(),
        target_height: b.height(),
        targets,
    }
}

/// Uniform draw over valid entries, without replacement. Requests beyond the
/// valid count return every valid pair in scan order, flagged `short`.
pub fn sample_geometric_correspondences(
    map: &CorrespondenceMap,
    n: usize,
    rng: &mut Rng,
) -> Result<CorrespondenceSet> {
    let mut valid: Vec<(u32, u32, u32, u32)> = Vec::new();
    for v in 0..map.height {
        for u in 0..map.width {
            if let Some((ub, vb)) = map.get(u, v) {
                let (ru, rv) = (ub.round(), vb.round());
                if ru >= 0.0
                    && rv >= 0.0
                    && (ru as usize) < map.target_width
                    && (rv as usize) < map.target_height
                {
                    valid.push((u as u32, v as u32, ru as u32, rv as u32));
                }
            }
        }
    }
    if valid.is_empty() {
        return Err(Error::Empty("correspondence map has no valid entries"));
    }
    let short = n > valid.len();
    if !short {
        // partial Fisher-Yates
        for i in 0..n {
            let j = i + rng.below(valid.len() - i);
            valid.swap(i, j);
        }
        valid.truncate(n);
    }
    Ok(CorrespondenceSet {
        pixels_a: valid.iter().map(|c| (c.0, c.1)).collect(),
        pixels_b: valid.iter().map(|c| (c.2, c.3)).collect(),
        source: CorrespondenceSource::Geometric,
        short,
    })
}

/// Carries correspondences through per-view augmentation warps, dropping
/// pairs that leave either image.
pub fn warp_correspondences(
    set: &CorrespondenceSet,
    warp_a: &Warp,
    warp_b: &Warp,
    width: usize,
    height: usize,
) -> CorrespondenceSet {
    let map = |w: &Warp, p: (u32, u32)| -> Option<(u32, u32)> {
        let (u, v) = w.geometry.apply((p.0 as f64, p.1 as f64)).ok()?;
        let (u, v) = (u.round(), v.round());
        (u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64)
            .then_some((u as u32, v as u32))
    };
    let mut out = CorrespondenceSet {
        pixels_a: Vec::new(),
        pixels_b: Vec::new(),
        source: set.source,
        short: set.short,
    };
    for (&pa, &pb) in set.pixels_a.iter().zip(&set.pixels_b) {
        if let (Some(qa), Some(qb)) = (map(warp_a, pa), map(warp_b, pb)) {
            out.pixels_a.push(qa);
            out.pixels_b.push(qb);
        }
    }
    out
}

/// Row-major 4×4 camera→world matrix.
#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct PoseFile([[f64; 4]; 4]);

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `NNNN.png`, `NNNN.depth`, `NNNN.pose.json` per frame and one
/// `intrinsics.json` (taken from the first frame).
pub fn save_scene_dir(dir: &Path, frames: &[PosedDepthFrame]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(first) = frames.first() {
        write(
            &dir.join("intrinsics.json"),
            serde_json::to_string_pretty(&first.intrinsics)?.as_bytes(),
        )?;
    }
    for (i, f) in frames.iter().enumerate() {
        save_image(&f.rgb, dir.join(format!("{i:04}.png")))?;
        write(&dir.join(format!("{i:04}.depth")), &f.depth.to_bytes())?;
        write(
            &dir.join(format!("{i:04}.pose.json")),
            serde_json::to_string(&PoseFile(f.pose.to_rows()))?.as_bytes(),
        )?;
    }
    Ok(())
}

pub fn load_scene_dir(dir: &Path) -> Result<Vec<PosedDepthFrame>> {
    let intrinsics: CameraIntrinsics =
        serde_json::from_slice(&read(&dir.join("intrinsics.json"))?)?;
    let intrinsics = CameraIntrinsics::new(intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy)?;
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".depth").map(str::to_owned)
        })
        .collect();
    stems.sort();
    let mut frames = Vec::with_capacity(stems.len());
    for stem in stems {
        let rgb = load_image(dir.join(format!("{stem}.png")))?;
        let depth = DepthMap::from_bytes(&read(&dir.join(format!("{stem}.depth")))?)?;
        let PoseFile(rows) =
            serde_json::from_slice(&read(&dir.join(format!("{stem}.pose.json")))?)?;
        if rgb.width() != depth.width || rgb.height() != depth.height {
            return Err(Error::DimMismatch(format!("frame {stem}: rgb and depth sizes differ")));
        }
        frames.push(PosedDepthFrame {
            rgb,
            depth,
            pose: RigidTransform::from_rows(&rows)?,
            intrinsics,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_frame(w: usize, h: usize, z: f32, k: CameraIntrinsics) -> PosedDepthFrame {
        PosedDepthFrame {
            rgb: Image::zeros(w, h, 3),
            depth: DepthMap::new(w, h, vec![z; w * h]).unwrap(),
            pose: RigidTransform::identity(),
            intrinsics: k,
        }
    }

    #[test]
    fn principal_ray_unprojects_on_axis() {
        let k = CameraIntrinsics::new(50.0, 50.0, 4.0, 3.0).unwrap();
        let f = flat_frame(8, 6, 2.5, k);
        let x = f.unproject(4, 3).unwrap().unwrap();
        assert_eq!(x, Vector3::new(0.0, 0.0, 2.5));
    }

    #[test]
    fn hand_evaluated_unprojection() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0).unwrap();
        let f = flat_frame(200, 64, 2.0, k);
        let x = f.unproject(132, 32).unwrap().unwrap();
        assert!((x - Vector3::new(2.0, 0.0, 2.0)).amax() < 1e-12);
    }

    #[test]
    fn missing_depth_and_bounds() {
        let k = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0).unwrap();
        let mut f = flat_frame(3, 3, 1.0, k);
        f.depth.data[4] = 0.0;
        assert!(f.unproject(1, 1).unwrap().is_none());
        assert!(matches!(f.unproject(3, 0), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn project_inverts_unproject() {
        let k = CameraIntrinsics::new(80.0, 75.0, 15.5, 12.0).unwrap();
        let mut f = flat_frame(32, 24, 1.0, k);
        let mut rng = Rng::new(3, 3);
        for d in f.depth.data.iter_mut() {
            *d = rng.uniform(0.5, 3.0) as f32;
        }
        let axis = Vector3::new(0.2, -0.5, 1.0).normalize();
        f.pose = RigidTransform::new(
            *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), 0.3)
                .matrix(),
            Vector3::new(0.1, 0.4, -0.2),
        )
        .unwrap();
        for v in 0..24 {
            for u in 0..32 {
                let x = f.unproject(u, v).unwrap().unwrap();
                let (pu, pv, _) = f.project(&x).unwrap();
                assert!((pu - u as f64).abs() < 1e-6 && (pv - v as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn axis_point_projects_to_principal_point() {
        let k = CameraIntrinsics::new(60.0, 60.0, 10.0, 20.0).unwrap();
        let f = flat_frame(4, 4, 1.0, k);
        let (u, v, z) = f.project(&Vector3::new(0.0, 0.0, 3.0)).unwrap();
        assert_eq!((u, v, z), (10.0, 20.0, 3.0));
        assert!(matches!(
            f.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera)
        ));
    }

    #[test]
    fn stereo_disparity() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0).unwrap();
        let a = flat_frame(64, 64, 1.0, k);
        let mut b = flat_frame(64, 64, 1.0, k);
        b.pose = RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let x = a.unproject(40, 30).unwrap().unwrap();
        let (ub, vb, _) = b.project(&x).unwrap();
        assert!((40.0 - ub - 10.0).abs() < 1e-9);
        assert!((vb - 30.0).abs() < 1e-12);
    }

    #[test]
    fn self_map_is_identity() {
        let k = CameraIntrinsics::new(40.0, 40.0, 7.5, 7.5).unwrap();
        let mut f = flat_frame(16, 16, 1.5, k);
        f.depth.data[0] = 0.0;
        let map = correspondence_map(&f, &f, &OcclusionTolerance::default());
        assert_eq!(map.valid_count(), 255);
        for v in 0..16 {
            for u in 0..16 {
                if let Some((ub, vb)) = map.get(u, v) {
                    assert!((ub - u as f64).abs() < 1e-9 && (vb - v as f64).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identity_map_sampling() {
        let k = CameraIntrinsics::new(40.0, 40.0, 7.5, 7.5).unwrap();
        let f = flat_frame(16, 16, 1.0, k);
        let map = correspondence_map(&f, &f, &OcclusionTolerance::default());
        let set = sample_geometric_correspondences(&map, 10, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(set.len(), 10);
        assert!(!set.short);
        assert_eq!(set.pixels_a, set.pixels_b);
        let mut uniq = set.pixels_a.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
        assert_eq!(set.source, CorrespondenceSource::Geometric);

        let all = sample_geometric_correspondences(&map, 1000, &mut Rng::new(0, 0)).unwrap();
        assert!(all.short);
        assert_eq!(all.len(), 256);
    }

    #[test]
    fn empty_map_is_an_error() {
        let k = CameraIntrinsics::new(40.0, 40.0, 7.5, 7.5).unwrap();
        let f = flat_frame(4, 4, 0.0, k);
        let map = correspondence_map(&f, &f, &OcclusionTolerance::default());
        assert!(sample_geometric_correspondences(&map, 1, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn depth_file_round_trip_and_magic() {
        let d = DepthMap::new(3, 2, vec![0.0, 1.0, 2.5, 0.25, 3.0, 9.0]).unwrap();
        assert_eq!(DepthMap::from_bytes(&d.to_bytes()).unwrap(), d);
        let mut bad = d.to_bytes();
        bad[0] = b'X';
        assert!(DepthMap::from_bytes(&bad).is_err());
        assert!(DepthMap::from_bytes(&d.to_bytes()[..20]).is_err());
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let r = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(r, Vector3::zeros()).is_err());
    }
}
