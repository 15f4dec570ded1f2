//! Finite-difference verification of the complete noise predictor.

use gpp_tensor::gradcheck::{finite_diff_check_many, Coords, GradCheckReport, DEFAULT_STEP};
use gpp_tensor::{Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::net::{GppConfig, GppNet};
use crate::priors::PerceptualPrior;

/// Relative-error budget for the whole network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

/// d=4, w=16, two blocks, 4×4 latent (N=16).
pub fn network_check_config() -> GppConfig {
    GppConfig { d: 4, w: 16, blocks: 2, heads: 4, grid: 4, ..GppConfig::default() }
}

/// Checks gradients of `sum(R ⊙ eps(z_t, t, z_ll))` with respect to every
/// parameter tensor and both latents, in f64. Zero-initialized tensors are
/// perturbed first so that every path carries gradient.
pub fn network_gradcheck(config: GppConfig, seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = GppNet::<f64>::init(config.clone(), &mut rng)?;
    for t in net.params.tensors_mut() {
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += 0.2 * n);
    }
    let (h, w) = (4, 4);
    let g2 = config.grid * config.grid;
    let map: Vec<f64> = (0..3 * g2).map(|i| 0.2 + 0.6 * ((i * 7919 % 97) as f64 / 97.0)).collect();
    let prior = PerceptualPrior::new([0.3, 0.55, 0.7], map, config.grid, "check", "check")?;
    let z_t = Tensor::<f64>::randn(vec![config.d, h, w], &mut rng);
    let z_ll = Tensor::<f64>::randn(vec![config.d, h, w], &mut rng);
    let weights = Tensor::<f64>::randn(vec![config.d, h, w], &mut rng);

    let n_params = net.params.len();
    let mut inputs: Vec<Tensor<f64>> = net.params.tensors().to_vec();
    inputs.push(z_t);
    inputs.push(z_ll);
    let f = |g: &mut gpp_tensor::Graph<f64>, vars: &[gpp_tensor::Var]| {
        let out = net
            .forward(g, &vars[..n_params], vars[n_params], 500, vars[n_params + 1], &prior)
            .map_err(|e| TensorError::Usage(e.to_string()))?;
        let r = g.constant(weights.clone());
        let prod = g.mul(out, r)?;
        g.sum(prod)
    };
    Ok(finite_diff_check_many(f, &inputs, DEFAULT_STEP, Coords::Sample { per_tensor, seed })?)
}
