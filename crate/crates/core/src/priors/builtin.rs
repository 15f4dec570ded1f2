use super::{AssessmentLogits, Attribute, AttributeSpec, PriorProvider, Scope};
use crate::error::Result;
use crate::imaging::Image;

pub const BUILTIN_ID: &str = "builtin";

/// Statistics stand-in for a vision-language assessor.
#[derive(Clone, Copy, Debug, Default)]
pub struct BuiltinProvider;

/// Mean absolute 4-neighbour Laplacian with replicated borders.
fn mean_abs_laplacian(y: &[f32], h: usize, w: usize) -> f64 {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        y[r * w + c] as f64
    };
    let mut total = 0.0;
    for r in 0..h as isize {
        for c in 0..w as isize {
            let lap = at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c);
            total += lap.abs();
        }
    }
    total / (h * w) as f64
}

/// Probability gap D in [-1,1] from luminance statistics.
pub fn builtin_assess(image: &Image, attribute: Attribute) -> f64 {
    let y = image.luminance();
    let n = y.len() as f64;
    let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let raw = match attribute {
        Attribute::Visibility => 12.0 * (mean - 0.35),
        Attribute::Contrast => {
            let var = y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            30.0 * (var.sqrt() - 0.15)
        }
        Attribute::Sharpness => 40.0 * (mean_abs_laplacian(&y, image.height(), image.width()) - 0.05),
    };
    raw.clamp(-1.0, 1.0)
}

impl PriorProvider for BuiltinProvider {
    fn id(&self) -> &str {
        BUILTIN_ID
    }

    fn assess(&self, image: &Image, spec: &AttributeSpec, _scope: Scope) -> Result<AssessmentLogits> {
        let d = builtin_assess(image, spec.attribute);
        Ok(AssessmentLogits {
            p_pos: (1.0 + d) / 2.0,
            p_neg: (1.0 - d) / 2.0,
            provider_id: BUILTIN_ID.into(),
            raw: None,
            degraded: false,
        })
    }
}
