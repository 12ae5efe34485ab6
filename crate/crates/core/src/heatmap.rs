//! Preference keypoint database, per-keypoint heatmaps, fusion and grasp
//! candidate ranking.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::DescriptorImage;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par::par_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointEntry {
    pub label: String,
    pub descriptor: Vec<f32>,
    pub image_id: String,
    pub u: usize,
    pub v: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointDb {
    pub name: String,
    pub dim: usize,
    pub entries: Vec<KeypointEntry>,
}

const UNIT_TOLERANCE: f64 = 1e-5;

impl KeypointDb {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            entries: Vec::new(),
        }
    }

    pub fn get(&self, label: &str) -> Option<&KeypointEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    /// Stores the descriptor at `(u, v)` under `label`.
    pub fn add_keypoint(
        &mut self,
        descriptors: &DescriptorImage<f32>,
        image_id: &str,
        u: usize,
        v: usize,
        label: &str,
    ) -> Result<&KeypointEntry> {
        if descriptors.dim() != self.dim {
            return Err(Error::DimMismatch(format!(
                "database {:?} holds {}-dim descriptors, image has {}",
                self.name,
                self.dim,
                descriptors.dim()
            )));
        }
        if u >= descriptors.width() || v >= descriptors.height() {
            return Err(Error::OutOfBounds {
                u: u as i64,
                v: v as i64,
                width: descriptors.width(),
                height: descriptors.height(),
            });
        }
        if self.get(label).is_some() {
            return Err(Error::DuplicateLabel(label.to_string()));
        }
        self.entries.push(KeypointEntry {
            label: label.to_string(),
            descriptor: descriptors.descriptor(u, v).to_vec(),
            image_id: image_id.to_string(),
            u,
            v,
        });
        Ok(self.entries.last().unwrap())
    }

    pub fn remove_keypoint(&mut self, label: &str) -> Result<KeypointEntry> {
        let i = self
            .entries
            .iter()
            .position(|e| e.label == label)
            .ok_or_else(|| Error::NotFound(format!("label {label:?}")))?;
        Ok(self.entries.remove(i))
    }

    pub fn validate(&self) -> Result<()> {
        let mut labels = std::collections::HashSet::new();
        for e in &self.entries {
            if !labels.insert(e.label.as_str()) {
                return Err(Error::DuplicateLabel(e.label.clone()));
            }
            if e.descriptor.len() != self.dim {
                return Err(Error::DimMismatch(format!("entry {:?} has wrong dim", e.label)));
            }
            let n = e.descriptor.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidParam(format!("entry {:?} is not unit length", e.label)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let db: Self = serde_json::from_slice(&bytes)?;
        db.validate()?;
        Ok(db)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec_pretty(self)?;
        write_atomic(path, &bytes)
    }
}

/// Replace `path` with `bytes` so readers see either the old or the new file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_until(path, bytes, None)
}

/// Stage at which [`write_atomic_until`] abandons the write, as if the
/// process died there.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashPoint {
    BeforeTemp,
    TornTemp,
    BeforeRename,
}

#[doc(hidden)]
pub fn write_atomic_until(path: &Path, bytes: &[u8], crash: Option<CrashPoint>) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    if crash == Some(CrashPoint::BeforeTemp) {
        return Ok(());
    }
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if crash == Some(CrashPoint::TornTemp) {
        f.write_all(&bytes[..bytes.len() / 2]).map_err(|e| Error::io(&tmp, e))?;
        return Ok(());
    }
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    if crash == Some(CrashPoint::BeforeRename) {
        return Ok(());
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    /// width of the response around a match
    pub temperature: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidParam(format!(
                "heatmap temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (ab / denom).clamp(-1.0, 1.0)
}

/// `exp(−(1 − cos) / η)` per pixel, as a one-channel image.
pub fn single_heatmap(
    descriptors: &DescriptorImage<f32>,
    reference: &[f32],
    cfg: &HeatmapConfig,
) -> Result<Image> {
    cfg.validate()?;
    if reference.len() != descriptors.dim() {
        return Err(Error::DimMismatch(format!(
            "reference has {} entries, descriptor image has dim {}",
            reference.len(),
            descriptors.dim()
        )));
    }
    let data = descriptors
        .data()
        .chunks_exact(descriptors.dim())
        .map(|d| (-(1.0 - cosine(d, reference)) / cfg.temperature).exp() as f32)
        .collect();
    Image::new(descriptors.width(), descriptors.height(), 1, data)
}

/// Pixelwise sum scaled so the maximum is 1; all-zero input stays zero.
pub fn fuse(maps: &[Image]) -> Result<Image> {
    let first = maps.first().ok_or(Error::Empty("heatmap list"))?;
    let mut sum = vec![0.0f64; first.data().len()];
    for m in maps {
        if m.width() != first.width() || m.height() != first.height() || m.channels() != 1 {
            return Err(Error::DimMismatch("heatmaps must share one-channel dims".into()));
        }
        sum.iter_mut().zip(m.data()).for_each(|(s, &x)| *s += x as f64);
    }
    let peak = sum.iter().copied().fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    Image::new(
        first.width(),
        first.height(),
        1,
        sum.iter().map(|&s| (s * scale) as f32).collect(),
    )
}

/// Fused heatmap over every database entry.
pub fn db_heatmap(
    db: &KeypointDb,
    descriptors: &DescriptorImage<f32>,
    cfg: &HeatmapConfig,
) -> Result<Image> {
    if db.entries.is_empty() {
        return Err(Error::Empty("keypoint database"));
    }
    let maps = par_map(db.entries.len(), |i| single_heatmap(descriptors, &db.entries[i].descriptor, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    fuse(&maps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub u: usize,
    pub v: usize,
    pub value: f32,
}

/// First maximum in row-major order of a one-channel image.
pub fn peak(map: &Image) -> Peak {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, &x) in map.data().iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    Peak {
        u: best.0 % map.width(),
        v: best.0 / map.width(),
        value: best.1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub u: usize,
    pub v: usize,
    pub score: f32,
}

/// Scores `fused × graspability`, keeps those at or above `threshold`
/// (and positive), then greedy suppression: a candidate survives only if it
/// is farther than `nms_radius` from every stronger survivor.
pub fn grasp_candidates(
    fused: &Image,
    graspability: &Image,
    threshold: f32,
    nms_radius: f64,
) -> Result<Vec<GraspCandidate>> {
    if fused.width() != graspability.width()
        || fused.height() != graspability.height()
        || fused.channels() != 1
        || graspability.channels() != 1
    {
        return Err(Error::DimMismatch("fused and graspability maps must be one-channel and equal size".into()));
    }
    let w = fused.width();
    let mut pool: Vec<GraspCandidate> = fused
        .data()
        .iter()
        .zip(graspability.data())
        .enumerate()
        .filter_map(|(i, (&f, &g))| {
            let score = f * g;
            (score >= threshold && score > 0.0).then_some(GraspCandidate {
                u: i % w,
                v: i / w,
                score,
            })
        })
        .collect();
    // stable: equal scores keep scan order
    pool.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<GraspCandidate> = Vec::new();
    for c in pool {
        let clear = kept.iter().all(|k| {
            let d = (k.u as f64 - c.u as f64).hypot(k.v as f64 - c.v as f64);
            d > nms_radius
        });
        if clear {
            kept.push(c);
        }
    }
    Ok(kept)
}
