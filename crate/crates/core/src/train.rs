//! Minibatch assembly, Adam updates, validation and best-checkpoint
//! retention.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{
    make_pair, sample_synthetic_correspondences, sample_view, AugmentationSpec, CorrespondenceSet,
};
use crate::encoder::{backward_into, forward, save_checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, pck_auc, EvalPair};
use crate::geomcorr::{
    correspondence_map, sample_geometric_correspondences, warp_correspondences, CorrespondenceMap,
    OcclusionTolerance, PosedDepthFrame,
};
use crate::image::Image;
use crate::loss::{ntxent_grad, DescriptorBatch, LossConfig};
use crate::par::par_map;
use crate::rng::Rng;
use crate::scalar::Scalar;

const INIT_STREAM: u64 = 0x1A17;
const STEP_STREAM: u64 = 0x57E9;
const VALIDATION_STREAM: u64 = 0x7A11;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// two augmented views of one image
    #[default]
    Synthetic,
    /// two posed RGB-D frames of one scene
    Geometric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// correspondences per image pair
    pub correspondences: usize,
    /// image pairs per step
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub validate_every: usize,
    /// keypoints tracked per validation pair
    pub validation_keypoints: usize,
    /// per-augmentation probability in geometric mode
    pub geometric_augment_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small CPU profile.
    pub fn desk() -> Self {
        Self {
            mode: TrainMode::Synthetic,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            correspondences: 512,
            batch_size: 2,
            batches_per_epoch: 50,
            epochs: 30,
            validate_every: 1,
            validation_keypoints: 50,
            geometric_augment_probability: 0.5,
        }
    }

    /// Full-size profile.
    pub fn paper() -> Self {
        Self {
            correspondences: 2048,
            batches_per_epoch: 500,
            epochs: 250,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(m.to_string()));
        if !(self.learning_rate >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0,1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.correspondences == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 {
            return bad("correspondences, batch size and batches per epoch must be positive");
        }
        if self.validate_every == 0 || self.validation_keypoints == 0 {
            return bad("validation cadence and keypoint count must be positive");
        }
        if !(0.0..=1.0).contains(&self.geometric_augment_probability) {
            return bad("geometric augmentation probability outside [0,1]");
        }
        Ok(())
    }
}

/// Everything a run needs besides data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub dim: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub augment: AugmentationSpec,
    pub loss: LossConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        self.loss.validate()
    }
}

/// Adam with bias correction; moments kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grad.len(), self.first.len());
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let g = g.to_f64().unwrap();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            if update != 0.0 {
                *p = T::lit(p.to_f64().unwrap() - update);
            }
        }
    }
}

/// Two posed frames with their precomputed first→second correspondences.
#[derive(Clone, Debug)]
pub struct FramePair {
    pub first: PosedDepthFrame,
    pub second: PosedDepthFrame,
    pub map: CorrespondenceMap,
}

impl FramePair {
    pub fn new(first: PosedDepthFrame, second: PosedDepthFrame, tol: &OcclusionTolerance) -> Self {
        let map = correspondence_map(&first, &second, tol);
        Self { first, second, map }
    }
}

/// All ordered pairs of distinct frames from each scene.
pub fn frame_pairs(scenes: &[Vec<PosedDepthFrame>], tol: &OcclusionTolerance) -> Vec<FramePair> {
    let mut out = Vec::new();
    for frames in scenes {
        for (i, a) in frames.iter().enumerate() {
            for (j, b) in frames.iter().enumerate() {
                if i != j {
                    out.push(FramePair::new(a.clone(), b.clone(), tol));
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub enum TrainData {
    Synthetic(Vec<Image>),
    Geometric(Vec<FramePair>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Synthetic(v) => v.len(),
            TrainData::Geometric(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn mode(&self) -> TrainMode {
        match self {
            TrainData::Synthetic(_) => TrainMode::Synthetic,
            TrainData::Geometric(_) => TrainMode::Geometric,
        }
    }
}

/// One image pair ready for the encoder.
struct PreparedPair {
    first: Image,
    second: Image,
    pairs: CorrespondenceSet,
}

fn prepare(setup: &TrainSetup, data: &TrainData, rng: &Rng) -> Result<PreparedPair> {
    let mut pick = rng.child(0);
    let n = setup.train.correspondences;
    match data {
        TrainData::Synthetic(images) => {
            let img = &images[pick.below(images.len())];
            let pair = make_pair(img, &setup.augment, &rng.child(1))?;
            let pairs = sample_synthetic_correspondences(
                &pair.first_warp,
                &pair.second_warp,
                img.width(),
                img.height(),
                n,
                &mut rng.child(2),
            )?;
            Ok(PreparedPair {
                first: pair.first,
                second: pair.second,
                pairs,
            })
        }
        TrainData::Geometric(frames) => {
            let fp = &frames[pick.below(frames.len())];
            let raw = sample_geometric_correspondences(&fp.map, n, &mut rng.child(2))?;
            let spec = AugmentationSpec {
                probability: setup.train.geometric_augment_probability,
                ..setup.augment
            };
            let (first, wa) = sample_view(&fp.first.rgb, &spec, &mut rng.child(3))?;
            let (second, wb) = sample_view(&fp.second.rgb, &spec, &mut rng.child(4))?;
            let pairs = warp_correspondences(&raw, &wa, &wb, first.width(), first.height());
            Ok(PreparedPair {
                first,
                second,
                pairs,
            })
        }
    }
}

/// Randomness for global step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> Rng {
    Rng::new(seed, STEP_STREAM).child(step)
}

/// One optimizer step on `batch_size` freshly drawn image pairs. Returns the
/// loss before the update.
pub fn train_step<T: Scalar>(
    params: &mut EncoderParams<T>,
    adam: &mut Adam,
    setup: &TrainSetup,
    data: &TrainData,
    rng: &Rng,
) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let prepared = par_map(setup.train.batch_size, |i| prepare(setup, data, &rng.child(i as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let loss_and_grad = (|| -> Result<(T, Option<Vec<T>>)> {
        let p: &EncoderParams<T> = params;
        let outputs = par_map(2 * prepared.len(), |i| {
            let pp = &prepared[i / 2];
            forward(p, if i % 2 == 0 { &pp.first } else { &pp.second })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let dim = p.dim();
        let mut rows = Vec::new();
        let mut groups = Vec::with_capacity(prepared.len());
        for (k, pp) in prepared.iter().enumerate() {
            let (da, db) = (&outputs[2 * k].0, &outputs[2 * k + 1].0);
            for (&(ua, va), &(ub, vb)) in pp.pairs.pixels_a.iter().zip(&pp.pairs.pixels_b) {
                rows.extend_from_slice(da.descriptor(ua as usize, va as usize));
                rows.extend_from_slice(db.descriptor(ub as usize, vb as usize));
            }
            groups.push(pp.pairs.len());
        }
        let batch = DescriptorBatch::with_groups(dim, rows, groups)?;
        let (loss, row_grads) = ntxent_grad(&batch, &setup.loss)?;
        if !loss.is_finite() {
            return Ok((loss, None));
        }

        // split row gradients back to the images they came from
        let mut offset = 0;
        let mut per_image: Vec<(Vec<(u32, u32)>, Vec<T>)> = Vec::with_capacity(outputs.len());
        for pp in &prepared {
            let n = pp.pairs.len();
            let mut ga = Vec::with_capacity(n * dim);
            let mut gb = Vec::with_capacity(n * dim);
            for r in 0..n {
                let base = (offset + 2 * r) * dim;
                ga.extend_from_slice(&row_grads[base..base + dim]);
                gb.extend_from_slice(&row_grads[base + dim..base + 2 * dim]);
            }
            offset += 2 * n;
            per_image.push((pp.pairs.pixels_a.clone(), ga));
            per_image.push((pp.pairs.pixels_b.clone(), gb));
        }
        let grads = par_map(outputs.len(), |i| {
            let mut g = vec![T::zero(); p.len()];
            backward_into(p, &outputs[i].1, &per_image[i].0, &per_image[i].1, &mut g).map(|_| g)
        });
        let mut total = vec![T::zero(); p.len()];
        for g in grads {
            total.iter_mut().zip(g?).for_each(|(t, x)| *t += x);
        }
        Ok((loss, Some(total)))
    })()?;
    let (loss, grad) = loss_and_grad;
    if let Some(grad) = grad {
        adam.step(params.values_mut(), &grad);
    }
    Ok(loss)
}

/// Mean PCK over K = 1..=100 of tracking errors on `pairs`, with keypoints
/// drawn from a fixed stream so repeated calls are comparable.
pub fn validate<T: Scalar>(
    params: &EncoderParams<T>,
    pairs: &[EvalPair],
    keypoints: usize,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let report = evaluate_pairs(params, pairs, keypoints, &Rng::new(seed, VALIDATION_STREAM))?;
    pck_auc(&report.errors)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pck_auc: Option<f64>,
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_pck_auc\n");
    for e in log {
        let val = e.val_pck_auc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, val);
    }
    s
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub best: EncoderParams<f32>,
    pub best_score: Option<f64>,
    pub last: EncoderParams<f32>,
    pub log: Vec<EpochLog>,
}

/// File names written into the output directory of a run.
pub const CHECKPOINT_FILE: &str = "checkpoint.dscr";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains from a seeded initialization. After every validation the best
/// parameters so far are kept (and written to `out_dir` when given, together
/// with the metric log).
pub fn fit(
    setup: &TrainSetup,
    data: &TrainData,
    validation: &[EvalPair],
    out_dir: Option<&Path>,
) -> Result<FitResult> {
    fit_with(setup, data, validation, out_dir, |_| {})
}

/// [`fit`] with a callback after each epoch.
pub fn fit_with(
    setup: &TrainSetup,
    data: &TrainData,
    validation: &[EvalPair],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult> {
    setup.validate()?;
    if setup.train.epochs > 0 {
        if data.mode() != setup.train.mode {
            return Err(Error::InvalidParam("training data does not match the configured mode".into()));
        }
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        if validation.is_empty() {
            return Err(Error::Empty("validation set"));
        }
    }
    let mut params = EncoderParams::<f32>::init(setup.dim, &mut Rng::new(setup.seed, INIT_STREAM))?;
    let mut adam = Adam::new(params.len(), &setup.train);
    let mut best = params.clone();
    let mut best_score: Option<f64> = None;
    let mut log = Vec::new();
    let write_outputs = |best: &EncoderParams<f32>, log: &[EpochLog]| -> Result<()> {
        if let Some(dir) = out_dir {
            save_checkpoint(best, dir.join(CHECKPOINT_FILE))?;
            let path = dir.join(METRICS_FILE);
            std::fs::write(&path, metrics_csv(log)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    };
    write_outputs(&best, &log)?;
    let cfg = &setup.train;
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let step = ((epoch - 1) * cfg.batches_per_epoch + b) as u64;
            let rng = step_rng(setup.seed, step);
            let loss = train_step(&mut params, &mut adam, setup, data, &rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step as usize,
                    batch_seed: rng.stream(),
                });
            }
            sum += loss as f64;
        }
        let val = if epoch % cfg.validate_every == 0 || epoch == cfg.epochs {
            Some(validate(&params, validation, cfg.validation_keypoints, setup.seed)?)
        } else {
            None
        };
        if let Some(score) = val {
            if best_score.is_none_or(|b| score > b) {
                best_score = Some(score);
                best = params.clone();
            }
        }
        let entry = EpochLog {
            epoch,
            train_loss: sum / cfg.batches_per_epoch as f64,
            val_pck_auc: val,
        };
        on_epoch(&entry);
        log.push(entry);
        write_outputs(&best, &log)?;
    }
    Ok(FitResult {
        best,
        best_score,
        last: params,
        log,
    })
}

/// The initialization [`fit`] starts from.
pub fn initial_params(setup: &TrainSetup) -> Result<EncoderParams<f32>> {
    EncoderParams::init(setup.dim, &mut Rng::new(setup.seed, INIT_STREAM))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneSpec};

    fn images(n: usize, size: usize) -> Vec<Image> {
        (0..n)
            .map(|i| generate_scene(&SceneSpec::random(size, size, 3, i as u64).unwrap()).unwrap().0)
            .collect()
    }

    fn tiny_setup() -> TrainSetup {
        TrainSetup {
            dim: 8,
            seed: 3,
            train: TrainConfig {
                correspondences: 64,
                batches_per_epoch: 2,
                epochs: 1,
                validation_keypoints: 10,
                ..TrainConfig::desk()
            },
            augment: AugmentationSpec::default(),
            loss: LossConfig::default(),
        }
    }

    #[test]
    fn adam_first_step() {
        for g in [0.5f64, -2.0, 1e-3] {
            let cfg = TrainConfig::desk();
            let mut adam = Adam::new(1, &cfg);
            let mut p = [1.0f64];
            adam.step(&mut p, &[g]);
            let expected = 1.0 - cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((p[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut setup = tiny_setup();
        setup.train.learning_rate = 0.0;
        let data = TrainData::Synthetic(images(2, 32));
        let mut p = EncoderParams::<f32>::init(8, &mut Rng::new(1, 1)).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(p.len(), &setup.train);
        let loss = train_step(&mut p, &mut adam, &setup, &data, &step_rng(1, 0)).unwrap();
        assert!(loss > 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn step_is_reproducible() {
        let setup = tiny_setup();
        let data = TrainData::Synthetic(images(2, 32));
        let run = || {
            let mut p = EncoderParams::<f32>::init(8, &mut Rng::new(1, 1)).unwrap();
            let mut adam = Adam::new(p.len(), &setup.train);
            let l = train_step(&mut p, &mut adam, &setup, &data, &step_rng(5, 2)).unwrap();
            (l, p.values().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut setup = tiny_setup();
        setup.train.epochs = 0;
        let r = fit(&setup, &TrainData::Synthetic(Vec::new()), &[], None).unwrap();
        assert!(r.log.is_empty());
        assert_eq!(r.best, initial_params(&setup).unwrap());
    }

    #[test]
    fn metrics_csv_format() {
        let log = vec![
            EpochLog {
                epoch: 1,
                train_loss: 2.5,
                val_pck_auc: Some(0.25),
            },
            EpochLog {
                epoch: 2,
                train_loss: 2.0,
                val_pck_auc: None,
            },
        ];
        assert_eq!(metrics_csv(&log), "epoch,train_loss,val_pck_auc\n1,2.5,0.25\n2,2,\n");
    }
}
