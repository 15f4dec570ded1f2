use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Attribute;
use crate::error::{invalid, Result};

pub const ANSWER_INSTRUCTION: &str = "Answer with exactly one word: good or poor.";

/// Version tag of the default prompts and the request format.
pub const PROMPT_VERSION: &str = "gpp-prompt-1";

pub const DEFAULT_TEMPLATE: &str =
    "Evaluate the {attribute} of this image, where {attribute} means {definition}. Is the {attribute} good or poor?";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Global,
    Patch,
}

impl Scope {
    fn sentence(self) -> &'static str {
        match self {
            Scope::Global => "You are shown a complete photograph.",
            Scope::Patch => "You are shown one patch cropped from a larger photograph.",
        }
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scope::Global => write!(f, "global"),
            Scope::Patch => write!(f, "patch"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub attribute: Attribute,
    pub definition: String,
    pub prompt_template: String,
}

impl AttributeSpec {
    pub fn new(attribute: Attribute) -> Self {
        let definition = match attribute {
            Attribute::Contrast => "the difference in luminance that makes objects distinguishable",
            Attribute::Visibility => "how easily scene content can be seen",
            Attribute::Sharpness => "the clarity of edges and fine detail",
        };
        Self {
            attribute,
            definition: definition.into(),
            prompt_template: DEFAULT_TEMPLATE.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in ["{attribute}", "{definition}"] {
            if !self.prompt_template.contains(p) {
                return invalid(format!("prompt template lacks placeholder {p}"));
            }
        }
        Ok(())
    }
}

pub fn default_specs() -> [AttributeSpec; 3] {
    Attribute::ALL.map(AttributeSpec::new)
}

/// Scope sentence, substituted template, then the forced-choice instruction.
pub fn build_prompt(spec: &AttributeSpec, scope: Scope) -> Result<String> {
    spec.validate()?;
    let body = spec
        .prompt_template
        .replace("{attribute}", spec.attribute.name())
        .replace("{definition}", &spec.definition);
    Ok(format!("{} {} {}", scope.sentence(), body.trim(), ANSWER_INSTRUCTION))
}

/// [`PROMPT_VERSION`] for the defaults, otherwise suffixed with a digest of the specs.
pub fn prompt_version(specs: &[AttributeSpec]) -> String {
    if specs == default_specs().as_slice() {
        return PROMPT_VERSION.to_string();
    }
    let mut h = Sha256::new();
    for s in specs {
        h.update(s.attribute.name().as_bytes());
        h.update([0]);
        h.update(s.definition.as_bytes());
        h.update([0]);
        h.update(s.prompt_template.as_bytes());
        h.update([0]);
    }
    let digest = h.finalize();
    let tag: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    format!("{PROMPT_VERSION}+{tag}")
}
