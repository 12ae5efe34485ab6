//! Keypoint tracking, pixel-error statistics and invariance sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{describe, DescriptorImage, EncoderParams};
use crate::error::{Error, Result};
use crate::geomcorr::CorrespondenceMap;
use crate::image::Image;
use crate::par::par_map;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::scenegen::{render_view, similarity_view, tilt_view, view_to_view, LabelMap, Scene};
use crate::warp::Homography;

/// Thresholds reported in [`ErrorSummary::pck`].
pub const PCK_THRESHOLDS: [f64; 5] = [3.0, 5.0, 10.0, 25.0, 50.0];

/// Best cosine match of `query` in `image`, restricted to `mask` when given.
/// Returns `(u, v, similarity)`; ties go to the first pixel in row-major order.
pub fn track<T: Scalar>(
    image: &DescriptorImage<T>,
    query: &[T],
    mask: Option<&[bool]>,
) -> Result<(usize, usize, f64)> {
    if query.len() != image.dim() {
        return Err(Error::DimMismatch(format!(
            "query has {} entries, descriptor image has dim {}",
            query.len(),
            image.dim()
        )));
    }
    let n = image.width() * image.height();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::DimMismatch("search mask size".into()));
        }
    }
    let mut best: Option<(usize, T)> = None;
    for (i, d) in image.data().chunks_exact(image.dim()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let s = d.iter().zip(query).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (i, s) = best.ok_or(Error::Empty("search region"))?;
    Ok((i % image.width(), i / image.width(), s.to_f64().unwrap_or(f64::NAN)))
}

/// Where a pixel of the first image truly lands in the second.
#[derive(Clone, Debug)]
pub enum GroundTruth {
    Homography(Homography),
    Map(CorrespondenceMap),
}

impl GroundTruth {
    pub fn target(&self, u: usize, v: usize) -> Option<(f64, f64)> {
        match self {
            GroundTruth::Homography(h) => h.apply((u as f64, v as f64)).ok(),
            GroundTruth::Map(m) => m.get(u, v),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalPair {
    pub image_a: Image,
    pub image_b: Image,
    pub truth: GroundTruth,
    /// Object labels of the first image; keypoints come from nonzero pixels.
    pub labels_a: Option<LabelMap>,
}

/// Pixel errors in pair order, keypoint order within a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub errors: Vec<f64>,
    /// Set when some pair had fewer eligible keypoints than requested.
    pub short: bool,
}

/// Eligible pixels: on an object (when labels are given) and with a ground
/// truth target inside the second image.
pub fn eligible_keypoints(pair: &EvalPair) -> Vec<(usize, usize)> {
    let (w, h) = (pair.image_a.width(), pair.image_a.height());
    let (wb, hb) = (pair.image_b.width() as f64, pair.image_b.height() as f64);
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if pair.labels_a.as_ref().is_some_and(|l| l.get(u, v) == 0) {
                continue;
            }
            if let Some((x, y)) = pair.truth.target(u, v) {
                if x >= -0.5 && y >= -0.5 && x < wb - 0.5 && y < hb - 0.5 {
                    out.push((u, v));
                }
            }
        }
    }
    out
}

/// Uniform draw without replacement; everything when `n` exceeds the pool.
fn choose(mut pool: Vec<(usize, usize)>, n: usize, rng: &mut Rng) -> (Vec<(usize, usize)>, bool) {
    if n >= pool.len() {
        let short = n > pool.len();
        return (pool, short);
    }
    for i in 0..n {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(n);
    (pool, false)
}

/// Samples keypoints per pair (stream `rng.child(pair index)`), asks
/// `tracker` for their matches and measures the Euclidean error against the
/// ground truth.
pub fn evaluate_pairs_with<F>(
    pairs: &[EvalPair],
    n_keypoints: usize,
    rng: &Rng,
    tracker: F,
) -> Result<ErrorReport>
where
    F: Fn(usize, &EvalPair, &[(usize, usize)]) -> Result<Vec<(usize, usize)>> + Sync,
{
    let per_pair = par_map(pairs.len(), |i| -> Result<(Vec<f64>, bool)> {
        let pair = &pairs[i];
        let (keys, short) = choose(eligible_keypoints(pair), n_keypoints, &mut rng.child(i as u64));
        let found = tracker(i, pair, &keys)?;
        if found.len() != keys.len() {
            return Err(Error::DimMismatch("tracker returned a different number of matches".into()));
        }
        let errors = keys
            .iter()
            .zip(&found)
            .map(|(&(u, v), &(fu, fv))| {
                let (x, y) = pair.truth.target(u, v).expect("eligible keypoint has a target");
                (x - fu as f64).hypot(y - fv as f64)
            })
            .collect();
        Ok((errors, short))
    });
    let mut report = ErrorReport {
        errors: Vec::new(),
        short: false,
    };
    for r in per_pair {
        let (e, s) = r?;
        report.errors.extend(e);
        report.short |= s;
    }
    Ok(report)
}

/// Tracks sampled keypoints with the encoder's descriptors.
pub fn evaluate_pairs<T: Scalar>(
    params: &EncoderParams<T>,
    pairs: &[EvalPair],
    n_keypoints: usize,
    rng: &Rng,
) -> Result<ErrorReport> {
    evaluate_pairs_with(pairs, n_keypoints, rng, |_, pair, keys| {
        let da = describe(params, &pair.image_a)?;
        let db = describe(params, &pair.image_b)?;
        keys.iter()
            .map(|&(u, v)| track(&db, da.descriptor(u, v), None).map(|(x, y, _)| (x, y)))
            .collect()
    })
}

/// Fraction of errors strictly below `k`.
pub fn pck(errors: &[f64], k: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e < k).count() as f64 / errors.len() as f64
}

/// Mean of PCK@K over K = 1..=100.
pub fn pck_auc(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let total: f64 = (1..=100)
        .map(|k| sorted.partition_point(|&e| e < k as f64) as f64 / n)
        .sum();
    Ok(total / 100.0)
}

/// Linear interpolation between order statistics (type 7).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckEntry {
    pub k: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q75: f64,
    pub q90: f64,
    pub q95: f64,
    pub pck: Vec<PckEntry>,
}

pub fn summarize(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidParam("non-finite pixel error".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let summary = ErrorSummary {
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        median: quantile(&sorted, 0.5),
        q75: quantile(&sorted, 0.75),
        q90: quantile(&sorted, 0.9),
        q95: quantile(&sorted, 0.95),
        pck: PCK_THRESHOLDS
            .iter()
            .map(|&k| PckEntry {
                k,
                fraction: pck(errors, k),
            })
            .collect(),
    };
    debug_assert!(summary.median <= summary.q75 && summary.q75 <= summary.q90 && summary.q90 <= summary.q95);
    Ok(summary)
}

impl ErrorSummary {
    pub fn csv_header() -> String {
        let mut s = String::from("count,mean,median,q75,q90,q95");
        for k in PCK_THRESHOLDS {
            let _ = write!(s, ",pck@{k}");
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{}",
            self.count, self.mean, self.median, self.q75, self.q90, self.q95
        );
        for p in &self.pck {
            let _ = write!(s, ",{}", p.fraction);
        }
        s
    }
}

/// First image of each pair is the scene's first view, second image each
/// further view; ground truth is the view-to-view homography.
pub fn scene_pairs(scenes: &[Scene]) -> Result<Vec<EvalPair>> {
    let mut pairs = Vec::new();
    for scene in scenes {
        let Some((first, rest)) = scene.views.split_first() else {
            continue;
        };
        let image_a = render_view(&scene.image, first)?;
        let labels_a = scene.labels.warp(first)?;
        for view in rest {
            pairs.push(EvalPair {
                image_a: image_a.clone(),
                image_b: render_view(&scene.image, view)?,
                truth: GroundTruth::Homography(view_to_view(first, view)?),
                labels_a: Some(labels_a.clone()),
            });
        }
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// in-plane rotation, degrees
    Rotation,
    /// isotropic scale factor
    Scale,
    /// out-of-plane tilt, degrees
    Tilt,
}

impl SweepKind {
    pub fn magnitudes(self) -> Vec<f64> {
        match self {
            SweepKind::Rotation => (0..=12).map(|i| 15.0 * i as f64).collect(),
            SweepKind::Scale => (0..=10).map(|i| 0.5 + 0.1 * i as f64).collect(),
            SweepKind::Tilt => (0..=4).map(|i| 15.0 * i as f64).collect(),
        }
    }

    pub fn homography(self, width: usize, height: usize, m: f64) -> Result<Homography> {
        match self {
            SweepKind::Rotation => similarity_view(width, height, m, 1.0),
            SweepKind::Scale => similarity_view(width, height, 0.0, m),
            SweepKind::Tilt => tilt_view(width, height, m, width.max(height) as f64),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Rotation => "rotation",
            SweepKind::Scale => "scale",
            SweepKind::Tilt => "tilt",
        }
    }
}

/// Pairs (scene, scene seen through the sweep transform at magnitude `m`).
pub fn sweep_pairs(scenes: &[Scene], kind: SweepKind, m: f64) -> Result<Vec<EvalPair>> {
    scenes
        .iter()
        .map(|s| {
            let h = kind.homography(s.image.width(), s.image.height(), m)?;
            Ok(EvalPair {
                image_a: s.image.clone(),
                image_b: render_view(&s.image, &h)?,
                truth: GroundTruth::Homography(h),
                labels_a: Some(s.labels.clone()),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub magnitude: f64,
    pub summary: ErrorSummary,
}

/// Error statistics at every magnitude of the sweep. Keypoints at each
/// magnitude are drawn from `Rng::new(seed, magnitude index)`.
pub fn invariance_sweep<T: Scalar>(
    params: &EncoderParams<T>,
    scenes: &[Scene],
    kind: SweepKind,
    n_keypoints: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    kind.magnitudes()
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let pairs = sweep_pairs(scenes, kind, m)?;
            let report = evaluate_pairs(params, &pairs, n_keypoints, &Rng::new(seed, i as u64))?;
            Ok(SweepPoint {
                magnitude: m,
                summary: summarize(&report.errors)?,
            })
        })
        .collect()
}

pub fn sweep_csv(kind: SweepKind, points: &[SweepPoint]) -> String {
    let mut s = format!("{},{}\n", kind.name(), ErrorSummary::csv_header());
    for p in points {
        let _ = writeln!(s, "{},{}", p.magnitude, p.summary.csv_row());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_descriptors(w: usize, h: usize, dim: usize, seed: u64) -> DescriptorImage<f32> {
        let mut rng = Rng::new(seed, 3);
        let mut data = Vec::new();
        for _ in 0..w * h {
            let v: Vec<f32> = (0..dim).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            data.extend(v.iter().map(|x| x / n));
        }
        DescriptorImage::new(w, h, dim, data).unwrap()
    }

    #[test]
    fn self_lookup_and_tie_break() {
        let d = random_descriptors(16, 16, 8, 1);
        let (u, v, s) = track(&d, d.descriptor(7, 3), None).unwrap();
        assert_eq!((u, v), (7, 3));
        assert!((s - 1.0).abs() < 1e-6);
        let c = DescriptorImage::new(4, 4, 2, [0.6f32, 0.8].repeat(16)).unwrap();
        let (u, v, _) = track(&c, &[0.6, 0.8], None).unwrap();
        assert_eq!((u, v), (0, 0));
    }

    #[test]
    fn mask_restricts_and_empty_mask_fails() {
        let d = random_descriptors(4, 4, 3, 2);
        let mut mask = vec![false; 16];
        mask[9] = true;
        assert_eq!(track(&d, d.descriptor(0, 0), Some(&mask)).unwrap().0, 1);
        assert!(track(&d, d.descriptor(0, 0), Some(&[false; 16])).is_err());
        assert!(track(&d, &[1.0, 0.0], None).is_err());
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[0.0, 2.0, 4.0, 10.0]).unwrap();
        assert_eq!(s.pck[1].fraction, 0.75);
        let s = summarize(&[3.5]).unwrap();
        assert_eq!((s.median, s.q75, s.q90, s.q95, s.mean), (3.5, 3.5, 3.5, 3.5, 3.5));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(pck_auc(&[0.0; 10]).unwrap(), 1.0);
        assert_eq!(pck_auc(&[100.0, 150.0]).unwrap(), 0.0);
        let staircase: Vec<f64> = (0..100).map(|e| e as f64).collect();
        assert!((pck_auc(&staircase).unwrap() - 0.505).abs() < 1e-12);
    }

    fn scene_pair(h: Homography) -> EvalPair {
        let img = Image::from_fn(16, 16, 3, |u, v, c| ((u * 3 + v * 5 + c) % 7) as f32 / 7.0);
        EvalPair {
            image_b: render_view(&img, &h).unwrap(),
            image_a: img,
            truth: GroundTruth::Homography(h),
            labels_a: None,
        }
    }

    #[test]
    fn oracle_trackers() {
        let pairs = vec![scene_pair(Homography::identity())];
        let rng = Rng::new(0, 0);
        let exact = evaluate_pairs_with(&pairs, 20, &rng, |_, _, keys| Ok(keys.to_vec())).unwrap();
        assert_eq!(exact.errors, vec![0.0; 20]);
        assert!(!exact.short);
        let pairs = vec![scene_pair(Homography::translation(-4.0, -4.0))];
        let off = evaluate_pairs_with(&pairs, 10, &rng, |_, p, keys| {
            Ok(keys
                .iter()
                .map(|&(u, v)| {
                    let (x, y) = p.truth.target(u, v).unwrap();
                    ((x + 3.0) as usize, (y + 4.0) as usize)
                })
                .collect())
        })
        .unwrap();
        assert!(off.errors.iter().all(|&e| (e - 5.0).abs() < 1e-12));
    }

    #[test]
    fn short_flag_and_eligibility() {
        let mut pair = scene_pair(Homography::identity());
        let mut labels = LabelMap::new(16, 16);
        labels.labels[5] = 1;
        labels.labels[40] = 2;
        pair.labels_a = Some(labels);
        assert_eq!(eligible_keypoints(&pair), vec![(5, 0), (8, 2)]);
        let r = evaluate_pairs_with(&[pair], 5, &Rng::new(1, 1), |_, _, k| Ok(k.to_vec())).unwrap();
        assert_eq!(r.errors.len(), 2);
        assert!(r.short);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let params = EncoderParams::<f32>::init(4, &mut Rng::new(3, 0)).unwrap();
        let pairs = vec![scene_pair(similarity_view(16, 16, 10.0, 1.0).unwrap())];
        let a = evaluate_pairs(&params, &pairs, 30, &Rng::new(2, 2)).unwrap();
        let b = evaluate_pairs(&params, &pairs, 30, &Rng::new(2, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_magnitudes() {
        assert_eq!(SweepKind::Rotation.magnitudes().len(), 13);
        assert_eq!(*SweepKind::Rotation.magnitudes().last().unwrap(), 180.0);
        let s = SweepKind::Scale.magnitudes();
        assert_eq!(s.len(), 11);
        assert!((s[10] - 1.5).abs() < 1e-12);
        assert_eq!(SweepKind::Tilt.magnitudes(), vec![0.0, 15.0, 30.0, 45.0, 60.0]);
        for kind in [SweepKind::Rotation, SweepKind::Scale, SweepKind::Tilt] {
            let zero = kind.homography(32, 32, kind.magnitudes()[if kind == SweepKind::Scale { 5 } else { 0 }]);
            assert!(zero.unwrap().max_abs_diff(&Homography::identity()) < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn summary_invariants(errors in proptest::collection::vec(0.0f64..200.0, 1..200)) {
            let s = summarize(&errors).unwrap();
            prop_assert!(s.median <= s.q75 && s.q75 <= s.q90 && s.q90 <= s.q95);
            for w in s.pck.windows(2) {
                prop_assert!(w[0].fraction <= w[1].fraction);
            }
            let auc = pck_auc(&errors).unwrap();
            prop_assert!((0.0..=1.0).contains(&auc));
        }
    }
}
