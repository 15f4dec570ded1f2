use std::sync::Mutex;

use super::{
    build_prompt, cache_key, prompt_version, quantify, AttributeSpec, PerceptualPrior, PriorCache,
    PriorProvider, Scope, DEFAULT_ALPHA,
};
use crate::error::{invalid, CoreError, Result};
use crate::imaging::{patchify, Image};

pub struct ExtractOptions<'a> {
    pub cache: Option<&'a PriorCache>,
    /// Maximum assessments in flight.
    pub parallelism: usize,
    pub alpha: f64,
}

impl Default for ExtractOptions<'_> {
    fn default() -> Self {
        Self { cache: None, parallelism: 1, alpha: DEFAULT_ALPHA }
    }
}

/// One global and `grid²` patch assessments per attribute, quantified into a prior.
///
/// `specs` must list the three attributes in channel order.
pub fn extract_prior(
    image: &Image,
    provider: &dyn PriorProvider,
    grid: usize,
    specs: &[AttributeSpec],
    opts: &ExtractOptions<'_>,
) -> Result<PerceptualPrior> {
    if grid == 0 {
        return invalid("grid must be at least 1");
    }
    if specs.len() != 3 || specs.iter().enumerate().any(|(i, s)| s.attribute.index() != i) {
        return invalid("specs must cover contrast, visibility, sharpness in that order");
    }
    for s in specs {
        build_prompt(s, Scope::Global)?;
    }
    let version = prompt_version(specs);
    let key = opts.cache.map(|_| cache_key(image, provider.id(), &version, grid));
    if let (Some(cache), Some(key)) = (opts.cache, &key) {
        if let Some(p) = cache.get(key) {
            return Ok(p);
        }
    }

    let patches = patchify(image, grid)?;
    let gg = grid * grid;
    // job j: attribute j / (gg + 1), then the global view followed by the patches
    let jobs = 3 * (gg + 1);
    let run = |j: usize| -> Result<f64> {
        let (a, k) = (j / (gg + 1), j % (gg + 1));
        let (img, scope) = if k == 0 { (image, Scope::Global) } else { (&patches[k - 1], Scope::Patch) };
        let spec = &specs[a];
        provider
            .assess(img, spec, scope)
            .and_then(|r| quantify(r.p_pos, r.p_neg, opts.alpha))
            .map_err(|e| CoreError::Assessment {
                attribute: spec.attribute.name(),
                scope: if k == 0 { "global".into() } else { format!("patch {}", k - 1) },
                source: Box::new(e),
            })
    };

    let mut scores = vec![0.0; jobs];
    let workers = opts.parallelism.clamp(1, jobs);
    if workers == 1 {
        for (j, s) in scores.iter_mut().enumerate() {
            *s = run(j)?;
        }
    } else {
        let next = Mutex::new(0usize);
        let results: Mutex<Vec<(usize, Result<f64>)>> = Mutex::new(Vec::with_capacity(jobs));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let j = {
                        let mut n = next.lock().unwrap();
                        let j = *n;
                        *n += 1;
                        j
                    };
                    if j >= jobs {
                        break;
                    }
                    let r = run(j);
                    results.lock().unwrap().push((j, r));
                });
            }
        });
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|(j, _)| *j);
        for (j, r) in results {
            scores[j] = r?;
        }
    }

    let mut global = [0.0; 3];
    let mut map = Vec::with_capacity(3 * gg);
    for a in 0..3 {
        global[a] = scores[a * (gg + 1)];
        map.extend_from_slice(&scores[a * (gg + 1) + 1..(a + 1) * (gg + 1)]);
    }
    let prior = PerceptualPrior::new(global, map, grid, provider.id(), &version)?;
    if let (Some(cache), Some(key)) = (opts.cache, &key) {
        cache.put(key, &prior)?;
    }
    Ok(prior)
}
