//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.
//!
//! The property checks live in the core crate's integration tests; those
//! files are compiled in here as modules, where their checks are plain
//! functions.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use descry::augment::AugmentationSpec;
use descry::encoder::EncoderParams;
use descry::eval::{evaluate_pairs, scene_pairs, summarize, sweep_pairs, EvalPair, SweepKind};
use descry::loss::LossConfig;
use descry::scenegen::{generate_split, DatasetConfig, Scene, Split};
use descry::train::{fit, initial_params, TrainConfig, TrainData, TrainSetup};
use descry::Rng;

#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/correspondences.rs"]
mod correspondences;
#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/gradients.rs"]
mod gradients;
#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/heatmaps.rs"]
mod heatmaps;
#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/loss_oracle.rs"]
mod loss_oracle;
#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/metrics.rs"]
mod metrics;
#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/warp_algebra.rs"]
mod warp_algebra;

const SEEDS: [u64; 3] = [1, 2, 3];
const DATA_SEED: u64 = 0;
const EVAL_KEYPOINTS: usize = 100;

type Verdict = Result<String, String>;

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panicked".into()
    }
}

/// Runs property checks that signal failure by panicking.
fn checks(list: &[(&str, fn())]) -> Verdict {
    for (name, f) in list {
        catch_unwind(*f).map_err(|p| format!("{name}: {}", panic_message(p).lines().next().unwrap_or("")))?;
    }
    Ok(format!("{} checks", list.len()))
}

fn report(n: usize, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(panic_message(p)));
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match verdict {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {n:>2} {tag}  {title}: {detail} [{secs:.1} s]");
    ok
}

struct Desk {
    train: Vec<descry::Image>,
    val: Vec<EvalPair>,
    test_scenes: Vec<Scene>,
    test: Vec<EvalPair>,
}

impl Desk {
    fn new() -> Self {
        let cfg = DatasetConfig::default();
        let train = generate_split(&cfg, Split::Train, cfg.train, DATA_SEED)
            .unwrap()
            .into_iter()
            .map(|s| s.image)
            .collect();
        let val = scene_pairs(&generate_split(&cfg, Split::Val, cfg.val, DATA_SEED).unwrap()).unwrap();
        let test_scenes = generate_split(&cfg, Split::Test, cfg.test, DATA_SEED).unwrap();
        let test = scene_pairs(&test_scenes).unwrap();
        Self {
            train,
            val,
            test_scenes,
            test,
        }
    }

    fn setup(seed: u64, augment: AugmentationSpec) -> TrainSetup {
        TrainSetup {
            dim: 16,
            seed,
            train: TrainConfig::desk(),
            augment,
            loss: LossConfig::default(),
        }
    }

    fn train(&self, setup: &TrainSetup) -> (EncoderParams<f32>, Duration) {
        let start = Instant::now();
        let result = fit(setup, &TrainData::Synthetic(self.train.clone()), &self.val, None).unwrap();
        (result.best, start.elapsed())
    }

    fn median(&self, params: &EncoderParams<f32>, seed: u64) -> f64 {
        let report = evaluate_pairs(params, &self.test, EVAL_KEYPOINTS, &Rng::new(seed, 0xACC)).unwrap();
        summarize(&report.errors).unwrap().median
    }

    /// q75 pixel error with the test scenes rotated by 90 degrees.
    fn q75_at_quarter_turn(&self, params: &EncoderParams<f32>, seed: u64) -> f64 {
        let pairs = sweep_pairs(&self.test_scenes, SweepKind::Rotation, 90.0).unwrap();
        let report = evaluate_pairs(params, &pairs, EVAL_KEYPOINTS, &Rng::new(seed, 0x90)).unwrap();
        summarize(&report.errors).unwrap().q75
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")
}

fn learning_signal(desk: &Desk, trained: &[EncoderParams<f32>], times: &[Duration]) -> Verdict {
    let mut t = Vec::new();
    let mut u = Vec::new();
    for (&seed, params) in SEEDS.iter().zip(trained) {
        t.push(desk.median(params, seed));
        u.push(desk.median(&initial_params(&Desk::setup(seed, AugmentationSpec::default())).unwrap(), seed));
    }
    let (tm, um) = (mean(&t), mean(&u));
    let slowest = times.iter().max().unwrap().as_secs_f64();
    let detail = format!(
        "trained median {tm:.2} px ({}) vs untrained {um:.2} px ({}), ratio {:.3}, slowest run {slowest:.0} s",
        fmt(&t),
        fmt(&u),
        tm / um
    );
    if tm <= 5.0 && tm <= 0.25 * um && slowest <= 900.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablation_ordering(desk: &Desk, with_affine: &[EncoderParams<f32>]) -> Verdict {
    let no_affine_spec = {
        let mut spec = AugmentationSpec::default();
        spec.affine.enabled = false;
        spec
    };
    let mut ratios = Vec::new();
    let mut pairs = Vec::new();
    for (&seed, affine) in SEEDS.iter().zip(with_affine) {
        let (plain, _) = desk.train(&Desk::setup(seed, no_affine_spec));
        let a = desk.q75_at_quarter_turn(affine, seed);
        let n = desk.q75_at_quarter_turn(&plain, seed);
        ratios.push(n / a);
        pairs.push(format!("{n:.1}/{a:.1}"));
    }
    let detail = format!(
        "q75 at 90 deg without/with affine {}, ratios {}",
        pairs.join(", "),
        fmt(&ratios)
    );
    if ratios.iter().all(|&r| r >= 2.0) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn descry(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_descry"))
        .args(args)
        .env_remove("DESCRY_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let data = root.join("data");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    descry(&[
        "gen-scenes", "--seed", "3", "--out", &s(&data),
        "--set", "data.generate={\"width\":64,\"height\":64,\"objects\":3,\"train\":8,\"val\":2,\"test\":0}",
    ])?;
    let data_set = format!("data.dir={}", s(&data));
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let out = root.join(name);
        descry(&[
            "train", "--jobs", "1", "--seed", "9", "--out", &s(&out), "--set", &data_set,
            "--set", "train.epochs=3", "--set", "train.batches_per_epoch=8",
            "--set", "train.correspondences=256", "--set", "train.validation_keypoints=20",
        ])?;
        let read = |f: &str| std::fs::read(out.join(f)).map_err(|e| e.to_string());
        runs.push((read("checkpoint.dscr")?, read("metrics.csv")?));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let detail = format!("checkpoint {} bytes, log {} bytes", a.0.len(), a.1.len());
    if a == b {
        Ok(detail)
    } else {
        Err(format!("runs differ: {detail}"))
    }
}

fn main() {
    // failures are reported on the criterion line
    std::panic::set_hook(Box::new(|_| {}));
    let mut ok = true;
    ok &= report(1, "gradient correctness", || {
        let start = Instant::now();
        let d = checks(&[
            ("encoder and loss", gradients::encoder_and_loss_match_finite_differences),
            ("loss alone", loss_oracle::descriptor_gradient_matches_finite_differences),
        ])?;
        let secs = start.elapsed().as_secs_f64();
        if secs < 60.0 {
            Ok(d)
        } else {
            Err(format!("took {secs:.0} s"))
        }
    });
    ok &= report(2, "warp algebra", || {
        checks(&[
            ("round trip", warp_algebra::composed_views_round_trip_points),
            ("group laws", warp_algebra::composed_views_obey_group_laws),
        ])
    });
    ok &= report(3, "synthetic correspondence soundness", || {
        checks(&[(
            "smooth texture pairs",
            correspondences::synthetic_pairs_are_photometrically_and_geometrically_sound,
        )])
    });
    ok &= report(4, "geometric correspondence soundness", || {
        checks(&[
            ("tilted plane", correspondences::tilted_plane_map_matches_plane_homography),
            ("two-plane occlusion", correspondences::hidden_surfaces_are_masked),
        ])
    });
    ok &= report(5, "contrastive loss oracle", || {
        checks(&[
            ("single pair", loss_oracle::single_pair_pool_is_exactly_zero),
            ("closed form", loss_oracle::two_axis_pairs_match_closed_form),
            ("random batches", loss_oracle::random_batches_are_nonnegative_and_match_transcription),
        ])
    });

    let desk = Desk::new();
    let mut trained = Vec::new();
    let mut times = Vec::new();
    for seed in SEEDS {
        let (p, t) = desk.train(&Desk::setup(seed, AugmentationSpec::default()));
        trained.push(p);
        times.push(t);
    }
    ok &= report(6, "desk-scale learning signal", || learning_signal(&desk, &trained, &times));
    ok &= report(7, "ablation ordering", || ablation_ordering(&desk, &trained));

    ok &= report(8, "metrics oracle", || {
        checks(&[
            ("pck, auc, quantiles", metrics::pck_auc_and_quantiles_match_brute_force),
            ("track", metrics::track_matches_exhaustive_scan),
        ])
    });
    ok &= report(9, "heatmap contract", || {
        checks(&[
            ("self response", heatmaps::annotated_pixel_scores_one_before_fusion),
            ("fusion argmax", heatmaps::fused_argmax_equals_raw_sum_argmax),
            ("blob maxima", heatmaps::two_blobs_give_exactly_their_maxima),
            ("random maps", heatmaps::random_score_maps_match_exhaustive_nms),
        ])
    });
    ok &= report(10, "determinism", determinism);
    if !ok {
        std::process::exit(1);
    }
}
