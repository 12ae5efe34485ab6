//! Subcommand implementations. Each writes into a staging directory next to
//! the output directory and moves the results over only once it succeeded.

use std::path::{Path, PathBuf};

use descry::encoder::{describe, load_checkpoint, EncoderParams};
use descry::eval::{evaluate_pairs, invariance_sweep, scene_pairs, summarize, sweep_csv, ErrorSummary};
use descry::geomcorr::load_scene_dir;
use descry::heatmap::{db_heatmap, grasp_candidates, peak, GraspCandidate, KeypointDb, Peak};
use descry::image::{load_image, save_image};
use descry::scenegen::{load_split, write_dataset, Split};
use descry::train::{fit_with, frame_pairs, initial_params, TrainData, TrainMode};
use descry::{Image, Rng};
use serde::{Deserialize, Serialize};
use tempfile::TempDir;

use crate::config::RunConfig;
use crate::Failure;

const EVAL_STREAM: u64 = 0xE7A1;

/// Effective configuration saved next to every artifact set.
pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CANDIDATES_FILE: &str = "candidates.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(descry::Error::io(path, e).to_string())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(io(path))
}

/// Creates the staging directory beside `out`.
fn stage(out: &Path) -> Result<TempDir, Failure> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(io(&parent))?;
    tempfile::Builder::new()
        .prefix(".descry-staging-")
        .tempdir_in(&parent)
        .map_err(io(&parent))
}

/// Moves staged files into `out`. A fresh `out` is created by a single
/// rename; into an existing one each entry is renamed over its namesake.
fn promote(staged: TempDir, out: &Path) -> Result<(), Failure> {
    if !out.exists() {
        let path = staged.keep();
        return std::fs::rename(&path, out).map_err(io(out));
    }
    let entries = std::fs::read_dir(staged.path()).map_err(io(staged.path()))?;
    for entry in entries {
        let entry = entry.map_err(io(staged.path()))?;
        let target = out.join(entry.file_name());
        if target.is_dir() && entry.path().is_dir() {
            std::fs::remove_dir_all(&target).map_err(io(&target))?;
        }
        std::fs::rename(entry.path(), &target).map_err(io(&target))?;
    }
    Ok(())
}

fn save_config(dir: &Path, config: &RunConfig) -> Result<(), Failure> {
    write(&dir.join(CONFIG_FILE), serde_json::to_vec_pretty(config).expect("config serializes"))
}

fn manifest(config: &RunConfig) -> PathBuf {
    config.data.dir.join("manifest.json")
}

/// The configured checkpoint, or the seeded initialization when none is set.
pub fn encoder(config: &RunConfig) -> Result<EncoderParams<f32>, Failure> {
    match &config.encoder.checkpoint {
        Some(path) => Ok(load_checkpoint(path)?),
        None => Ok(initial_params(&config.setup())?),
    }
}

pub fn gen_scenes(config: &RunConfig, out: &Path) -> Result<(), Failure> {
    let staged = stage(out)?;
    let m = write_dataset(staged.path(), &config.data.generate, config.seed)?;
    save_config(staged.path(), config)?;
    promote(staged, out)?;
    eprintln!("wrote {} scenes to {}", m.scenes.len(), out.display());
    Ok(())
}

fn training_data(config: &RunConfig) -> Result<TrainData, Failure> {
    match config.train.mode {
        TrainMode::Synthetic => {
            let scenes = load_split(&manifest(config), Split::Train)?;
            Ok(TrainData::Synthetic(scenes.into_iter().map(|s| s.image).collect()))
        }
        TrainMode::Geometric => {
            if config.data.rgbd_scenes.is_empty() {
                return Err(Failure::Usage("geometric training needs data.rgbd_scenes".into()));
            }
            let scenes = config
                .data
                .rgbd_scenes
                .iter()
                .map(|d| load_scene_dir(d))
                .collect::<descry::Result<Vec<_>>>()?;
            Ok(TrainData::Geometric(frame_pairs(&scenes, &config.data.occlusion)))
        }
    }
}

pub fn train(config: &RunConfig, out: &Path) -> Result<(), Failure> {
    let data = training_data(config)?;
    let validation = if config.train.epochs > 0 {
        scene_pairs(&load_split(&manifest(config), Split::Val)?)?
    } else {
        Vec::new()
    };
    let staged = stage(out)?;
    save_config(staged.path(), config)?;
    let result = fit_with(&config.setup(), &data, &validation, Some(staged.path()), |e| {
        let val = e.val_pck_auc.map(|v| format!(" val_pck_auc {v:.4}")).unwrap_or_default();
        eprintln!("epoch {:>3} loss {:.5}{val}", e.epoch, e.train_loss);
    })?;
    promote(staged, out)?;
    if let Some(score) = result.best_score {
        eprintln!("best val_pck_auc {score:.4}");
    }
    Ok(())
}

/// Pixel-error summary of `config.eval.split` under the configured encoder.
pub fn evaluate(config: &RunConfig) -> Result<ErrorSummary, Failure> {
    let params = encoder(config)?;
    let pairs = scene_pairs(&load_split(&manifest(config), config.eval.split.clone())?)?;
    let report = evaluate_pairs(&params, &pairs, config.eval.keypoints, &Rng::new(config.seed, EVAL_STREAM))?;
    if report.short {
        eprintln!("warning: some pairs had fewer eligible keypoints than requested");
    }
    Ok(summarize(&report.errors)?)
}

pub fn eval(config: &RunConfig, out: &Path) -> Result<(), Failure> {
    let summary = evaluate(config)?;
    let staged = stage(out)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&staged.path().join(SUMMARY_JSON), &json)?;
    write(
        &staged.path().join(SUMMARY_CSV),
        format!("{}\n{}\n", ErrorSummary::csv_header(), summary.csv_row()),
    )?;
    save_config(staged.path(), config)?;
    promote(staged, out)?;
    println!("{json}");
    Ok(())
}

pub fn invariance(config: &RunConfig, out: &Path) -> Result<(), Failure> {
    let params = encoder(config)?;
    let scenes = load_split(&manifest(config), config.eval.split.clone())?;
    let staged = stage(out)?;
    for &kind in &config.eval.sweeps {
        let points = invariance_sweep(&params, &scenes, kind, config.eval.sweep_keypoints, config.seed)?;
        write(&staged.path().join(format!("{}.csv", kind.name())), sweep_csv(kind, &points))?;
        for p in &points {
            eprintln!("{} {:>6} q75 {:.2}", kind.name(), p.magnitude, p.summary.q75);
        }
    }
    save_config(staged.path(), config)?;
    promote(staged, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCandidates {
    pub image: PathBuf,
    pub heatmap: PathBuf,
    pub peak: Peak,
    pub candidates: Vec<GraspCandidate>,
}

fn one_channel(img: Image) -> Result<Image, Failure> {
    match img.channels() {
        1 => Ok(img),
        _ => Ok(img.luma()?),
    }
}

fn stem(path: &Path) -> Result<String, Failure> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Failure::Usage(format!("{} has no file name", path.display())))
}

pub fn heatmap(config: &RunConfig, out: &Path) -> Result<(), Failure> {
    let job = &config.heatmap;
    if job.images.is_empty() {
        return Err(Failure::Usage("heatmap.images is empty".into()));
    }
    let params = encoder(config)?;
    let db = KeypointDb::load(&job.db)?;
    let staged = stage(out)?;
    let mut all = Vec::new();
    for path in &job.images {
        let name = stem(path)?;
        let img = load_image(path)?;
        let fused = db_heatmap(&db, &describe(&params, &img)?, &job.response())?;
        let grasp = match &job.graspability_dir {
            Some(dir) => one_channel(load_image(dir.join(format!("{name}.png")))?)?,
            None => Image::filled(fused.width(), fused.height(), 1, 1.0),
        };
        let heatmap = PathBuf::from(format!("{name}.heatmap.png"));
        save_image(&fused, staged.path().join(&heatmap))?;
        all.push(ImageCandidates {
            image: path.clone(),
            heatmap,
            peak: peak(&fused),
            candidates: grasp_candidates(&fused, &grasp, job.threshold, job.nms_radius)?,
        });
    }
    write(
        &staged.path().join(CANDIDATES_FILE),
        serde_json::to_vec_pretty(&all).expect("candidates serialize"),
    )?;
    save_config(staged.path(), config)?;
    promote(staged, out)
}

pub fn serve(config: &RunConfig) -> Result<(), Failure> {
    let checkpoint = config
        .encoder
        .checkpoint
        .clone()
        .ok_or_else(|| Failure::Usage("serve needs encoder.checkpoint (or --checkpoint)".into()))?;
    let s = &config.serve;
    let service = descry_service::ServiceConfig {
        listen: s.listen,
        image_dir: s.image_dir.clone(),
        checkpoint,
        db_dir: s.db_dir.clone(),
        static_dir: s.static_dir.clone(),
        cache_capacity: s.cache_capacity,
        heatmap: config.heatmap.response(),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!("listening on http://{}", service.listen);
    runtime.block_on(descry_service::serve(service))?;
    Ok(())
}
