//! Linear-β schedule, forward corruption, ε-MSE loss and deterministic
//! strided sampling.

use gpp_tensor::{Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::priors::PerceptualPrior;

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const X0_CLAMP: f64 = 3.0;

/// `betas[t]` and `alphas[t]` for t in 1..=T (index 0 unused), `alpha_bars[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 1 {
        return invalid("schedule needs at least one step");
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return invalid(format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let mut betas = vec![0.0; steps + 1];
    let mut alphas = vec![1.0; steps + 1];
    let mut alpha_bars = vec![1.0; steps + 1];
    for t in 1..=steps {
        let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
        betas[t] = beta_start + (beta_end - beta_start) * frac;
        alphas[t] = 1.0 - betas[t];
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
    }
    Ok(DiffusionSchedule { steps, betas, alphas, alpha_bars })
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_linear_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

/// `sqrt(ab_t)·z0 + sqrt(1 − ab_t)·eps`.
pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &DiffusionSchedule) -> Result<Tensor<T>> {
    if t > sched.steps {
        return invalid(format!("timestep {t} outside 0..={}", sched.steps));
    }
    if z0.shape() != eps.shape() {
        return invalid(format!("noise shape {:?} differs from {:?}", eps.shape(), z0.shape()));
    }
    let ab = sched.alpha_bars[t];
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(z0.zip_map(eps, |z, e| a * z + b * e)?)
}

/// A noise predictor that adds its computation for one latent to a graph.
pub trait EpsModel<T: Scalar> {
    fn eps(&self, g: &mut Graph<T>, z_t: Var, t: usize, z_ll: Var, prior: &PerceptualPrior) -> Result<Var>;
}

/// Draws t and ε from `rng`, returns the mean squared error of the prediction.
pub fn training_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &dyn EpsModel<T>,
    z0: &Tensor<T>,
    z_ll: &Tensor<T>,
    prior: &PerceptualPrior,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Var> {
    let t = rng.random_range(1..=sched.steps);
    let eps = Tensor::<T>::randn(z0.shape().to_vec(), rng);
    let z_t = q_sample(z0, t, &eps, sched)?;
    let zt = g.constant(z_t);
    let zl = g.constant(z_ll.clone());
    let target = g.constant(eps);
    let pred = model.eps(g, zt, t, zl, prior)?;
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq)?)
}

/// Descending timesteps `T − floor(i·T/steps)` for i in 0..steps.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > total {
        return invalid(format!("sampling steps {steps} outside 1..={total}"));
    }
    Ok((0..steps).map(|i| total - i * total / steps).collect())
}

/// Deterministic (η = 0) reverse process from seeded Gaussian noise.
pub fn ddim_sample<T: Scalar>(
    model: &dyn EpsModel<T>,
    z_ll: &Tensor<T>,
    prior: &PerceptualPrior,
    sched: &DiffusionSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let ts = sampling_timesteps(sched.steps, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::<T>::randn(z_ll.shape().to_vec(), &mut rng);
    let clamp = T::lit(X0_CLAMP);
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let mut g = Graph::new();
        let zt = g.constant(z.clone());
        let zl = g.constant(z_ll.clone());
        let e = model.eps(&mut g, zt, t, zl, prior)?;
        let eps = g.value(e).clone();
        let (ab, abp) = (sched.alpha_bars[t], sched.alpha_bars[prev]);
        let (sa, sb) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let x0 = z.zip_map(&eps, |zv, ev| ((zv - sb * ev) / sa).max(-clamp).min(clamp))?;
        let (pa, pb) = (T::lit(abp.sqrt()), T::lit((1.0 - abp).sqrt()));
        z = x0.zip_map(&eps, |xv, ev| pa * xv + pb * ev)?;
    }
    Ok(z)
}
