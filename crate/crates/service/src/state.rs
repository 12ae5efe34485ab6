use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::SystemTime;

use descry::encoder::{describe, load_checkpoint, DescriptorImage, EncoderParams};
use descry::heatmap::KeypointDb;
use descry::image::load_image;
use descry::{Error, Result};
use lru::LruCache;

use crate::ServiceConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Fingerprint {
    modified: Option<SystemTime>,
    len: u64,
}

fn fingerprint(path: &Path) -> Result<Fingerprint> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    Ok(Fingerprint {
        modified: meta.modified().ok(),
        len: meta.len(),
    })
}

struct Encoder {
    params: Arc<EncoderParams<f32>>,
    /// bumped on every replacement; cache entries carry the value they were built with
    generation: u64,
    source: Option<Fingerprint>,
}

/// Everything the handlers share: the loaded network, cached descriptor
/// images and one write gate per keypoint database.
pub struct SessionState {
    config: ServiceConfig,
    encoder: RwLock<Encoder>,
    cache: Mutex<LruCache<String, (u64, Arc<DescriptorImage<f32>>)>>,
    gates: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

/// Image ids and database names become file names, so only a plain
/// character set is accepted.
pub(crate) fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl SessionState {
    /// Loads the checkpoint named in `config`.
    pub fn open(config: ServiceConfig) -> Result<Self> {
        let params = load_checkpoint(&config.checkpoint)?;
        let source = Some(fingerprint(&config.checkpoint)?);
        Ok(Self::build(config, params, source))
    }

    /// A session around in-memory parameters; the checkpoint path in
    /// `config` is not watched.
    pub fn with_params(config: ServiceConfig, params: EncoderParams<f32>) -> Self {
        Self::build(config, params, None)
    }

    fn build(config: ServiceConfig, params: EncoderParams<f32>, source: Option<Fingerprint>) -> Self {
        let cap = NonZeroUsize::new(config.cache_capacity.max(1)).unwrap();
        Self {
            config,
            encoder: RwLock::new(Encoder {
                params: Arc::new(params),
                generation: 0,
                source,
            }),
            cache: Mutex::new(LruCache::new(cap)),
            gates: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Swaps the network and drops every cached descriptor image.
    pub fn replace_params(&self, params: EncoderParams<f32>) {
        let mut enc = self.encoder.write().unwrap();
        enc.params = Arc::new(params);
        enc.generation += 1;
        enc.source = None;
        self.cache.lock().unwrap().clear();
    }

    /// Reloads the checkpoint file when it changed on disk since it was read.
    pub fn refresh(&self) -> Result<()> {
        let watched = self.encoder.read().unwrap().source;
        let Some(seen) = watched else {
            return Ok(());
        };
        let now = fingerprint(&self.config.checkpoint)?;
        if now == seen {
            return Ok(());
        }
        let params = load_checkpoint(&self.config.checkpoint)?;
        let mut enc = self.encoder.write().unwrap();
        enc.params = Arc::new(params);
        enc.generation += 1;
        enc.source = Some(now);
        self.cache.lock().unwrap().clear();
        Ok(())
    }

    pub fn params(&self) -> Arc<EncoderParams<f32>> {
        self.encoder.read().unwrap().params.clone()
    }

    pub fn cached_images(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        if !valid_name(id) {
            return Err(Error::NotFound(format!("image {id:?}")));
        }
        let path = self.config.image_dir.join(format!("{id}.png"));
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::NotFound(format!("image {id:?}")))
        }
    }

    /// Ids (file stems) of the PNG files in the image directory, sorted.
    pub fn image_ids(&self) -> Result<Vec<String>> {
        let dir = &self.config.image_dir;
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if valid_name(stem) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Descriptor image of `id` under the current network, computed on a
    /// cache miss.
    pub fn descriptors(&self, id: &str) -> Result<Arc<DescriptorImage<f32>>> {
        self.refresh()?;
        let path = self.image_path(id)?;
        let (params, generation) = {
            let enc = self.encoder.read().unwrap();
            (enc.params.clone(), enc.generation)
        };
        if let Some((g, d)) = self.cache.lock().unwrap().get(id) {
            if *g == generation {
                return Ok(d.clone());
            }
        }
        let computed = Arc::new(describe(&params, &load_image(&path)?)?);
        // a replacement may have happened meanwhile; never cache stale results
        let enc = self.encoder.read().unwrap();
        if enc.generation == generation {
            self.cache.lock().unwrap().put(id.to_string(), (generation, computed.clone()));
        }
        Ok(computed)
    }

    pub fn db_path(&self, name: &str) -> Result<PathBuf> {
        if !valid_name(name) {
            return Err(Error::InvalidParam(format!("invalid database name {name:?}")));
        }
        Ok(self.config.db_dir.join(format!("{name}.json")))
    }

    /// The stored database, or `None` when it was never written.
    pub fn load_db(&self, name: &str) -> Result<Option<KeypointDb>> {
        let path = self.db_path(name)?;
        if !path.exists() {
            return Ok(None);
        }
        KeypointDb::load(&path).map(Some)
    }

    pub fn save_db(&self, db: &KeypointDb) -> Result<()> {
        let path = self.db_path(&db.name)?;
        std::fs::create_dir_all(&self.config.db_dir).map_err(|e| Error::io(&self.config.db_dir, e))?;
        db.save(path)
    }

    /// Serializes mutations of one database.
    pub fn gate(&self, name: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.gates
            .lock()
            .unwrap()
            .entry(name.to_string())
            .or_default()
            .clone()
    }
}
