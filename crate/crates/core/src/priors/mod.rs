//! Perceptual priors: global scores S and a local quality map M per attribute.
//!
//! A provider answers "good or poor" for an image and an evaluation prompt; the
//! probability gap D = p_pos − p_neg is squashed by [`quantify`]. The map holds
//! one score per patch of a `grid×grid` split, channel order
//! [contrast, visibility, sharpness].

mod builtin;
mod cache;
mod extract;
mod prompts;
mod vlm;

pub use builtin::{builtin_assess, BuiltinProvider, BUILTIN_ID};
pub use cache::{cache_key, PriorCache, PriorFile, PRIOR_FILE_VERSION};
pub use extract::{extract_prior, ExtractOptions};
pub use prompts::{build_prompt, default_specs, prompt_version, AttributeSpec, Scope, ANSWER_INSTRUCTION, PROMPT_VERSION};
pub use vlm::{parse_logprobs, request_body, VlmClientConfig, VlmProvider, FLOOR_OFFSET, TOP_LOGPROBS};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::Image;

pub const DEFAULT_ALPHA: f64 = 3.0;
pub const DEFAULT_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Contrast,
    Visibility,
    Sharpness,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Contrast, Attribute::Visibility, Attribute::Sharpness];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Contrast => "contrast",
            Attribute::Visibility => "visibility",
            Attribute::Sharpness => "sharpness",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Probabilities of the positive and negative answer tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AssessmentLogits {
    pub p_pos: f64,
    pub p_neg: f64,
    pub provider_id: String,
    pub raw: Option<serde_json::Value>,
    /// Neither answer token was among the returned candidates.
    pub degraded: bool,
}

impl AssessmentLogits {
    pub fn difference(&self) -> f64 {
        self.p_pos - self.p_neg
    }
}

pub trait PriorProvider: Sync {
    fn id(&self) -> &str;
    fn assess(&self, image: &Image, spec: &AttributeSpec, scope: Scope) -> Result<AssessmentLogits>;
}

/// `S = 1 / (1 + exp(−(p_pos − p_neg)/alpha))`.
pub fn quantify(p_pos: f64, p_neg: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    for p in [p_pos, p_neg] {
        if !(0.0..=1.0).contains(&p) {
            return invalid(format!("probability {p} outside [0,1]"));
        }
    }
    Ok(1.0 / (1.0 + (-(p_pos - p_neg) / alpha).exp()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualPrior {
    /// Indexed by [`Attribute::index`].
    pub global: [f64; 3],
    pub s_mean: f64,
    /// `3×grid×grid`, channel-major then row-major.
    pub map: Vec<f64>,
    pub grid: usize,
    pub provider_id: String,
    pub prompt_version: String,
}

impl PerceptualPrior {
    pub fn new(global: [f64; 3], map: Vec<f64>, grid: usize, provider_id: &str, prompt_version: &str) -> Result<Self> {
        if grid == 0 || map.len() != 3 * grid * grid {
            return invalid(format!("map of {} values does not fit grid {grid}", map.len()));
        }
        if let Some(v) = global.iter().chain(&map).find(|v| !(**v > 0.0 && **v < 1.0)) {
            return invalid(format!("prior score {v} outside (0,1)"));
        }
        Ok(Self {
            global,
            s_mean: global.iter().sum::<f64>() / 3.0,
            map,
            grid,
            provider_id: provider_id.to_string(),
            prompt_version: prompt_version.to_string(),
        })
    }

    /// Neutral prior with every score 0.5.
    pub fn neutral(grid: usize) -> Self {
        Self {
            global: [0.5; 3],
            s_mean: 0.5,
            map: vec![0.5; 3 * grid * grid],
            grid,
            provider_id: "neutral".into(),
            prompt_version: PROMPT_VERSION.into(),
        }
    }

    pub fn score(&self, a: Attribute) -> f64 {
        self.global[a.index()]
    }

    pub fn map_at(&self, a: Attribute, row: usize, col: usize) -> f64 {
        self.map[(a.index() * self.grid + row) * self.grid + col]
    }
}
