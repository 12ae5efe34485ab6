//! WebAssembly bindings for a single-page demo.
//!
//! The page renders a procedural scene, draws an augmented view pair with
//! its tracked correspondences, and answers clicks on the first view with a
//! descriptor-similarity heatmap and the tracked pixel in the second view.
//!
//! [`Session`] holds the logic and is plain Rust; [`Demo`] wraps it for
//! JavaScript.

use descry::augment::{make_pair, sample_synthetic_correspondences, AugmentationSpec, AugmentedPair};
use descry::encoder::{checkpoint_from_bytes, describe, DescriptorImage, EncoderParams, STRIDE};
use descry::eval::track;
use descry::heatmap::{single_heatmap, HeatmapConfig};
use descry::scenegen::{generate_scene, SceneSpec};
use descry::{Error, Image, Result, Rng};
use wasm_bindgen::prelude::*;

const DEFAULT_DIM: usize = 16;

/// Scene, current view pair and encoder of one page.
pub struct Session {
    scene: Image,
    params: EncoderParams<f32>,
    pair: AugmentedPair,
    matches: Vec<[u32; 4]>,
    first: DescriptorImage<f32>,
    second: DescriptorImage<f32>,
    heat: HeatmapConfig,
}

/// Overlay color for a response in `[0, 1]`: transparent dark red up to opaque yellow.
pub fn heat_rgba(map: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(map.data().len() * 4);
    for &x in map.data() {
        let x = x.clamp(0.0, 1.0);
        let r = (255.0 * (2.0 * x).min(1.0)).round() as u8;
        let g = (255.0 * (2.0 * x - 1.0).max(0.0)).round() as u8;
        out.extend_from_slice(&[r, g, 0, (220.0 * x).round() as u8]);
    }
    out
}

impl Session {
    /// A `size`×`size` scene from `seed` with an untrained encoder.
    pub fn new(seed: u64, size: usize, objects: usize) -> Result<Self> {
        if size == 0 || !size.is_multiple_of(STRIDE) {
            return Err(Error::InvalidParam(format!("size must be a positive multiple of {STRIDE}")));
        }
        let (scene, _) = generate_scene(&SceneSpec::random(size, size, objects, seed)?)?;
        let params = EncoderParams::init(DEFAULT_DIM, &mut Rng::new(seed, 1))?;
        let pair = AugmentedPair {
            first: scene.clone(),
            first_warp: descry::warp::Warp::identity(),
            second: scene.clone(),
            second_warp: descry::warp::Warp::identity(),
        };
        let first = describe(&params, &scene)?;
        Ok(Self {
            second: first.clone(),
            first,
            scene,
            params,
            pair,
            matches: Vec::new(),
            heat: HeatmapConfig::default(),
        })
    }

    pub fn width(&self) -> usize {
        self.scene.width()
    }

    pub fn height(&self) -> usize {
        self.scene.height()
    }

    pub fn scene(&self) -> &Image {
        &self.scene
    }

    pub fn pair(&self) -> &AugmentedPair {
        &self.pair
    }

    fn redescribe(&mut self) -> Result<()> {
        self.first = describe(&self.params, &self.pair.first)?;
        self.second = describe(&self.params, &self.pair.second)?;
        Ok(())
    }

    /// Replaces the encoder with checkpoint bytes written by `descry train`.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        self.params = checkpoint_from_bytes(bytes)?;
        self.redescribe()
    }

    /// Draws a new augmented pair and up to `n` correspondences between its views.
    pub fn augment(&mut self, seed: u64, n: usize) -> Result<()> {
        let rng = Rng::new(seed, 2);
        self.pair = make_pair(&self.scene, &AugmentationSpec::default(), &rng)?;
        let set = sample_synthetic_correspondences(
            &self.pair.first_warp,
            &self.pair.second_warp,
            self.width(),
            self.height(),
            n,
            &mut rng.child(2),
        )?;
        self.matches = set
            .pixels_a
            .iter()
            .zip(&set.pixels_b)
            .map(|(a, b)| [a.0, a.1, b.0, b.1])
            .collect();
        self.redescribe()
    }

    /// `(u, v)` in the first view paired with `(u″, v″)` in the second.
    pub fn matches(&self) -> &[[u32; 4]] {
        &self.matches
    }

    fn check(&self, u: usize, v: usize) -> Result<()> {
        if u >= self.width() || v >= self.height() {
            return Err(Error::OutOfBounds {
                u: u as i64,
                v: v as i64,
                width: self.width(),
                height: self.height(),
            });
        }
        Ok(())
    }

    /// Response of every second-view pixel to the first-view descriptor at `(u, v)`.
    pub fn heatmap(&self, u: usize, v: usize) -> Result<Image> {
        self.check(u, v)?;
        single_heatmap(&self.second, self.first.descriptor(u, v), &self.heat)
    }

    /// Best match in the second view and its cosine similarity.
    pub fn track(&self, u: usize, v: usize) -> Result<(usize, usize, f64)> {
        self.check(u, v)?;
        track(&self.second, self.first.descriptor(u, v), None)
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32, objects: u32) -> std::result::Result<Demo, JsError> {
        Session::new(seed as u64, size as usize, objects as usize)
            .map(|inner| Demo { inner })
            .map_err(js)
    }

    pub fn width(&self) -> u32 {
        self.inner.width() as u32
    }

    pub fn height(&self) -> u32 {
        self.inner.height() as u32
    }

    #[wasm_bindgen(js_name = sceneRgba)]
    pub fn scene_rgba(&self) -> Vec<u8> {
        self.inner.scene().to_rgba()
    }

    #[wasm_bindgen(js_name = loadCheckpoint)]
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> std::result::Result<(), JsError> {
        self.inner.load_checkpoint(bytes).map_err(js)
    }

    pub fn augment(&mut self, seed: u32, n: u32) -> std::result::Result<(), JsError> {
        self.inner.augment(seed as u64, n as usize).map_err(js)
    }

    #[wasm_bindgen(js_name = firstRgba)]
    pub fn first_rgba(&self) -> Vec<u8> {
        self.inner.pair().first.to_rgba()
    }

    #[wasm_bindgen(js_name = secondRgba)]
    pub fn second_rgba(&self) -> Vec<u8> {
        self.inner.pair().second.to_rgba()
    }

    /// Flat `[u, v, u″, v″, …]`.
    pub fn matches(&self) -> Vec<u32> {
        self.inner.matches().iter().flatten().copied().collect()
    }

    #[wasm_bindgen(js_name = heatmapRgba)]
    pub fn heatmap_rgba(&self, u: u32, v: u32) -> std::result::Result<Vec<u8>, JsError> {
        self.inner.heatmap(u as usize, v as usize).map(|m| heat_rgba(&m)).map_err(js)
    }

    /// `[u*, v*, similarity]`.
    pub fn track(&self, u: u32, v: u32) -> std::result::Result<Vec<f64>, JsError> {
        self.inner
            .track(u as usize, v as usize)
            .map(|(a, b, s)| vec![a as f64, b as f64, s])
            .map_err(js)
    }
}
