use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PerceptualPrior;
use crate::error::{io_err, CoreError, Result};
use crate::imaging::Image;

pub const PRIOR_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalScores {
    pub contrast: f64,
    pub visibility: f64,
    pub sharpness: f64,
}

/// On-disk prior sidecar. `map[channel]` is the row-major `grid²` score list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorFile {
    pub version: u32,
    pub provider: String,
    pub prompt_version: String,
    pub grid: usize,
    pub global: GlobalScores,
    pub s_mean: f64,
    pub map: Vec<Vec<f64>>,
}

impl From<&PerceptualPrior> for PriorFile {
    fn from(p: &PerceptualPrior) -> Self {
        let gg = p.grid * p.grid;
        Self {
            version: PRIOR_FILE_VERSION,
            provider: p.provider_id.clone(),
            prompt_version: p.prompt_version.clone(),
            grid: p.grid,
            global: GlobalScores { contrast: p.global[0], visibility: p.global[1], sharpness: p.global[2] },
            s_mean: p.s_mean,
            map: p.map.chunks(gg).map(|c| c.to_vec()).collect(),
        }
    }
}

impl PriorFile {
    pub fn into_prior(self) -> std::result::Result<PerceptualPrior, String> {
        if self.version != PRIOR_FILE_VERSION {
            return Err(format!("unsupported prior version {}", self.version));
        }
        let gg = self.grid * self.grid;
        if self.map.len() != 3 || self.map.iter().any(|c| c.len() != gg) {
            return Err(format!("map does not have shape 3x{0}x{0}", self.grid));
        }
        let g = &self.global;
        let mut prior = PerceptualPrior::new(
            [g.contrast, g.visibility, g.sharpness],
            self.map.concat(),
            self.grid,
            &self.provider,
            &self.prompt_version,
        )
        .map_err(|e| e.to_string())?;
        if (prior.s_mean - self.s_mean).abs() > 1e-9 {
            return Err(format!("s_mean {} disagrees with global scores", self.s_mean));
        }
        prior.s_mean = self.s_mean;
        Ok(prior)
    }

    pub fn read(path: &Path) -> Result<PerceptualPrior> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let format = |detail: String| CoreError::Format { path: path.to_path_buf(), detail };
        let file: PriorFile = serde_json::from_str(&text).map_err(|e| format(e.to_string()))?;
        file.into_prior().map_err(format)
    }

    /// Writes through a temporary file and rename so readers never see partial JSON.
    pub fn write(prior: &PerceptualPrior, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&PriorFile::from(prior)).expect("prior serializes");
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("prior");
        let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }
}

/// SHA-256 over pixel bytes, provider id, prompt version and grid.
pub fn cache_key(image: &Image, provider_id: &str, prompt_version: &str, grid: usize) -> String {
    let mut h = Sha256::new();
    h.update((image.height() as u64).to_le_bytes());
    h.update((image.width() as u64).to_le_bytes());
    for v in image.data() {
        h.update(v.to_le_bytes());
    }
    h.update(provider_id.as_bytes());
    h.update([0]);
    h.update(prompt_version.as_bytes());
    h.update([0]);
    h.update((grid as u64).to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Directory of prior sidecars named by [`cache_key`].
#[derive(Debug)]
pub struct PriorCache {
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl PriorCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir, hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Missing or unreadable entries are misses.
    pub fn get(&self, key: &str) -> Option<PerceptualPrior> {
        let path = self.path_for(key);
        let found = if path.exists() {
            match PriorFile::read(&path) {
                Ok(p) => Some(p),
                Err(e) => {
                    log::warn!("ignoring corrupt prior cache entry: {e}");
                    None
                }
            }
        } else {
            None
        };
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    pub fn put(&self, key: &str, prior: &PerceptualPrior) -> Result<()> {
        PriorFile::write(prior, &self.path_for(key))
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}
