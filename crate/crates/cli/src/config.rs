//! The run configuration: one JSON document with a section per module.
//!
//! Resolution order is defaults, then the config file, then `--set`
//! overrides, then dedicated flags. Unknown keys anywhere in the document are
//! collected and reported together.

use std::net::SocketAddr;
use std::path::PathBuf;

use descry::augment::AugmentationSpec;
use descry::eval::SweepKind;
use descry::geomcorr::OcclusionTolerance;
use descry::heatmap::HeatmapConfig;
use descry::loss::LossConfig;
use descry::scenegen::{DatasetConfig, Split};
use descry::train::{TrainConfig, TrainSetup};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentationSpec,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub heatmap: HeatmapJob,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            augment: AugmentationSpec::default(),
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            heatmap: HeatmapJob::default(),
            serve: ServeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// directory holding `manifest.json`
    pub dir: PathBuf,
    pub generate: DatasetConfig,
    /// RGB-D scene directories for geometric training
    pub rgbd_scenes: Vec<PathBuf>,
    pub occlusion: OcclusionTolerance,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            generate: DatasetConfig::default(),
            rgbd_scenes: Vec::new(),
            occlusion: OcclusionTolerance::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    /// Trained weights. Without one, commands use the seeded initialization.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// keypoints per evaluation pair
    pub keypoints: usize,
    pub sweeps: Vec<SweepKind>,
    pub sweep_keypoints: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            keypoints: 100,
            sweeps: vec![SweepKind::Rotation, SweepKind::Scale, SweepKind::Tilt],
            sweep_keypoints: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapJob {
    pub temperature: f64,
    pub db: PathBuf,
    pub images: Vec<PathBuf>,
    /// Directory with one-channel graspability PNGs named like the images.
    /// Without it every pixel counts as graspable.
    pub graspability_dir: Option<PathBuf>,
    pub threshold: f32,
    pub nms_radius: f64,
}

impl Default for HeatmapJob {
    fn default() -> Self {
        Self {
            temperature: HeatmapConfig::default().temperature,
            db: PathBuf::from("db/preferences.json"),
            images: Vec::new(),
            graspability_dir: None,
            threshold: 0.5,
            nms_radius: 10.0,
        }
    }
}

impl HeatmapJob {
    pub fn response(&self) -> HeatmapConfig {
        HeatmapConfig {
            temperature: self.temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub listen: SocketAddr,
    pub image_dir: PathBuf,
    pub db_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub cache_capacity: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        let service = descry_service::ServiceConfig::default();
        Self {
            listen: service.listen,
            image_dir: service.image_dir,
            db_dir: service.db_dir,
            static_dir: service.static_dir,
            cache_capacity: service.cache_capacity,
        }
    }
}

impl RunConfig {
    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            dim: self.encoder.dim,
            seed: self.seed,
            train: self.train.clone(),
            augment: self.augment,
            loss: self.loss.clone(),
        }
    }

    /// Range and consistency checks that serde cannot express.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut push = |r: descry::Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        push(self.setup().validate());
        push(self.heatmap.response().validate());
        if self.encoder.dim == 0 {
            problems.push("encoder.dim must be positive".into());
        }
        let g = &self.data.generate;
        if !g.width.is_multiple_of(descry::encoder::STRIDE) || !g.height.is_multiple_of(descry::encoder::STRIDE) || g.width == 0 || g.height == 0 {
            problems.push(format!(
                "data.generate size {}x{} must be positive multiples of {}",
                g.width,
                g.height,
                descry::encoder::STRIDE
            ));
        }
        if !(g.scale.0 > 0.0 && g.scale.0 <= g.scale.1) {
            problems.push("data.generate.scale must be an increasing positive range".into());
        }
        if self.eval.keypoints == 0 || self.eval.sweep_keypoints == 0 {
            problems.push("eval keypoint counts must be positive".into());
        }
        if !(self.heatmap.nms_radius >= 0.0) {
            problems.push("heatmap.nms_radius must be non-negative".into());
        }
        if self.serve.cache_capacity == 0 {
            problems.push("serve.cache_capacity must be positive".into());
        }
        problems
    }
}

/// Everything wrong with a config document, one entry per problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub Vec<String>);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration:")?;
        for p in &self.0 {
            write!(f, "\n  {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Overlays `patch` onto `base`, recording keys `base` does not know.
fn merge(base: &mut Value, patch: Value, prefix: &str, unknown: &mut Vec<String>) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &join(prefix, &k), unknown),
                    None => unknown.push(join(prefix, &k)),
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the value side of `--set`: JSON when it parses, a bare string otherwise.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn apply_set(doc: &mut Value, assignment: &str, problems: &mut Vec<String>) {
    let Some((key, raw)) = assignment.split_once('=') else {
        problems.push(format!("--set {assignment:?}: expected KEY=VALUE"));
        return;
    };
    let mut patch = override_value(raw);
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    let mut unknown = Vec::new();
    merge(doc, patch, "", &mut unknown);
    problems.extend(unknown.into_iter().map(|k| format!("unknown key {k:?} (from --set {key})")));
}

fn section<T: DeserializeOwned>(doc: &Value, name: &str, problems: &mut Vec<String>) {
    if let Some(v) = doc.get(name) {
        if let Err(e) = serde_json::from_value::<T>(v.clone()) {
            problems.push(format!("{name}: {e}"));
        }
    }
}

/// Builds the effective configuration from an optional config file text and
/// `--set` assignments.
pub fn resolve(file: Option<&str>, sets: &[String], seed: Option<u64>) -> Result<RunConfig, ConfigError> {
    let mut doc = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut problems = Vec::new();
    if let Some(text) = file {
        match serde_json::from_str::<Value>(text) {
            Ok(patch @ Value::Object(_)) => {
                let mut unknown = Vec::new();
                merge(&mut doc, patch, "", &mut unknown);
                problems.extend(unknown.into_iter().map(|k| format!("unknown key {k:?}")));
            }
            Ok(_) => problems.push("config file must hold a JSON object".into()),
            Err(e) => problems.push(format!("config file is not valid JSON: {e}")),
        }
    }
    for s in sets {
        apply_set(&mut doc, s, &mut problems);
    }
    if let Some(seed) = seed {
        doc["seed"] = Value::from(seed);
    }
    if !problems.is_empty() {
        return Err(ConfigError(problems));
    }
    section::<u64>(&doc, "seed", &mut problems);
    section::<DataConfig>(&doc, "data", &mut problems);
    section::<AugmentationSpec>(&doc, "augment", &mut problems);
    section::<EncoderConfig>(&doc, "encoder", &mut problems);
    section::<LossConfig>(&doc, "loss", &mut problems);
    section::<TrainConfig>(&doc, "train", &mut problems);
    section::<EvalConfig>(&doc, "eval", &mut problems);
    section::<HeatmapJob>(&doc, "heatmap", &mut problems);
    section::<ServeConfig>(&doc, "serve", &mut problems);
    if !problems.is_empty() {
        return Err(ConfigError(problems));
    }
    let config: RunConfig = serde_json::from_value(doc).map_err(|e| ConfigError(vec![e.to_string()]))?;
    let problems = config.check();
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError(problems))
    }
}
