use gpp_core::diffusion::*;
use gpp_core::net::{GppConfig, GppNet};
use gpp_core::priors::PerceptualPrior;
use gpp_core::Result;
use gpp_tensor::gradcheck::{finite_diff_check_many, Coords, DEFAULT_STEP};
use gpp_tensor::{Graph, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// numpy: prod(1 - linspace(1e-4, 0.02, 1000))
const ALPHA_BAR_T_NUMPY: f64 = 4.035829765375676e-05;

#[test]
fn default_schedule_endpoints_and_product() {
    let s = DiffusionSchedule::default();
    assert_eq!(s.steps, 1000);
    assert_eq!(s.betas[1], 1e-4);
    assert!((s.betas[1000] - 0.02).abs() < 1e-17);
    assert_eq!(s.alpha_bars[0], 1.0);
    // independent oracle: log-space sum with betas from their own formula
    let log_sum: f64 = (0..1000).map(|i| (-(1e-4 + i as f64 * (0.02 - 1e-4) / 999.0)).ln_1p()).sum();
    let oracle = log_sum.exp();
    assert!((s.alpha_bars[1000] / oracle - 1.0).abs() < 1e-9);
    assert!((s.alpha_bars[1000] / ALPHA_BAR_T_NUMPY - 1.0).abs() < 1e-9);
    assert!((s.alpha_bars[1000] / 4.04e-5 - 1.0).abs() < 0.05);
    assert!(s.alpha_bars[1000] < 1e-4 && s.alpha_bars[1000].sqrt() < 0.01);
}

#[test]
fn schedule_is_monotone() {
    let s = DiffusionSchedule::default();
    for t in 1..=s.steps {
        assert!(s.betas[t] > 0.0 && s.betas[t] < 1.0);
        assert!(s.alpha_bars[t] < s.alpha_bars[t - 1] && s.alpha_bars[t] > 0.0);
        assert_eq!(s.alphas[t], 1.0 - s.betas[t]);
        if t > 1 {
            assert!(s.betas[t] >= s.betas[t - 1]);
        }
    }
}

#[test]
fn schedule_rejects_bad_ranges() {
    assert!(make_linear_schedule(1000, 0.02, 1e-4).is_err());
    assert!(make_linear_schedule(1000, 0.0, 0.02).is_err());
    assert!(make_linear_schedule(1000, 1e-4, 1.0).is_err());
    assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
    assert!(make_linear_schedule(1, 1e-4, 0.02).is_ok());
}

#[test]
fn q_sample_examples() {
    let s = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = Tensor::<f64>::randn(vec![2, 3, 3], &mut rng);
    let eps = Tensor::<f64>::randn(vec![2, 3, 3], &mut rng);
    assert_eq!(q_sample(&z0, 0, &eps, &s).unwrap(), z0);
    let zero = Tensor::zeros(vec![2, 3, 3]);
    let scaled = q_sample(&z0, 400, &zero, &s).unwrap();
    let a = s.alpha_bars[400].sqrt();
    for (o, z) in scaled.data().iter().zip(z0.data()) {
        assert_eq!(*o, a * z);
    }
    assert!(q_sample(&z0, 1001, &eps, &s).is_err());
    assert!(q_sample(&z0, 5, &Tensor::zeros(vec![18]), &s).is_err());
    let f32z = q_sample(&z0.cast::<f32>(), 10, &eps.cast::<f32>(), &s).unwrap();
    assert_eq!(f32z.shape(), z0.shape());
}

#[test]
fn terminal_forward_marginal_is_standard_normal() {
    let s = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0 = Tensor::<f64>::uniform(vec![16], -1.0, 1.0, &mut rng);
    let draws = 10_000;
    let mut sum = vec![0.0; 16];
    let mut sq = vec![0.0; 16];
    for _ in 0..draws {
        let eps = Tensor::<f64>::randn(vec![16], &mut rng);
        let z = q_sample(&z0, 1000, &eps, &s).unwrap();
        for (i, v) in z.data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    for i in 0..16 {
        let mean = sum[i] / draws as f64;
        let var = sq[i] / draws as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "coordinate {i}: mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "coordinate {i}: var {var}");
    }
}

/// Recovers the true noise from `z_t` given the clean latent.
struct Oracle {
    z0: Tensor<f64>,
    sched: DiffusionSchedule,
}

impl EpsModel<f64> for Oracle {
    fn eps(&self, g: &mut Graph<f64>, z_t: Var, t: usize, _z_ll: Var, _p: &PerceptualPrior) -> Result<Var> {
        let ab = self.sched.alpha_bars[t];
        let z0 = g.constant(self.z0.map(|v| v * ab.sqrt()));
        let d = g.sub(z_t, z0)?;
        Ok(g.mul_scalar(d, 1.0 / (1.0 - ab).sqrt())?)
    }
}

struct Zero;

impl EpsModel<f64> for Zero {
    fn eps(&self, g: &mut Graph<f64>, z_t: Var, _t: usize, _z_ll: Var, _p: &PerceptualPrior) -> Result<Var> {
        Ok(g.mul_scalar(z_t, 0.0)?)
    }
}

#[test]
fn training_loss_of_oracle_model_is_zero() {
    let sched = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z0 = Tensor::<f64>::randn(vec![4, 8, 8], &mut rng);
    let model = Oracle { z0: z0.clone(), sched: sched.clone() };
    for _ in 0..10 {
        let mut g = Graph::new();
        let loss = training_loss(&mut g, &model, &z0, &z0, &PerceptualPrior::neutral(4), &sched, &mut rng).unwrap();
        assert!(g.value(loss).item() < 1e-20);
    }
}

#[test]
fn training_loss_of_zero_model_is_about_one() {
    let sched = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z0 = Tensor::<f64>::randn(vec![4, 16, 16], &mut rng);
    let mut total = 0.0;
    for _ in 0..20 {
        let mut g = Graph::new();
        let loss = training_loss(&mut g, &Zero, &z0, &z0, &PerceptualPrior::neutral(4), &sched, &mut rng).unwrap();
        total += g.value(loss).item();
    }
    assert!((total / 20.0 - 1.0).abs() < 0.05, "mean loss {}", total / 20.0);
}

#[test]
fn training_loss_gradient_passes_finite_differences() {
    let cfg = GppConfig { d: 2, w: 4, blocks: 1, heads: 2, grid: 2, ..GppConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = GppNet::<f64>::init(cfg, &mut rng).unwrap();
    for t in net.params.tensors_mut() {
        let n = Tensor::<f64>::randn(t.shape().to_vec(), &mut rng);
        t.data_mut().iter_mut().zip(n.data()).for_each(|(v, e)| *v += 0.2 * e);
    }
    let z0 = Tensor::<f64>::randn(vec![2, 3, 3], &mut rng);
    let zl = Tensor::<f64>::randn(vec![2, 3, 3], &mut rng);
    let sched = DiffusionSchedule::default();
    let prior = PerceptualPrior::new([0.3, 0.6, 0.5], vec![0.4; 12], 2, "t", "v").unwrap();
    let f = |g: &mut Graph<f64>, vars: &[Var]| {
        let bound = gpp_core::net::BoundNet { net: &net, vars: vars.to_vec() };
        let mut r = ChaCha8Rng::seed_from_u64(77);
        training_loss(g, &bound, &z0, &zl, &prior, &sched, &mut r).map_err(|e| TensorError::Usage(e.to_string()))
    };
    let report =
        finite_diff_check_many(f, net.params.tensors(), DEFAULT_STEP, Coords::Sample { per_tensor: 10, seed: 2 }).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn sampling_timesteps_are_strided_and_descending() {
    let ts = sampling_timesteps(1000, 25).unwrap();
    assert_eq!(ts.len(), 25);
    assert_eq!(ts[0], 1000);
    assert_eq!(ts[24], 40);
    assert!(ts.windows(2).all(|w| w[0] - w[1] == 40));
    assert_eq!(sampling_timesteps(1000, 1).unwrap(), vec![1000]);
    assert_eq!(sampling_timesteps(1000, 1000).unwrap().last(), Some(&1));
    assert!(sampling_timesteps(1000, 0).is_err());
    assert!(sampling_timesteps(1000, 1001).is_err());
}

/// A fixed affine predictor, enough to exercise the sampler arithmetic.
struct Affine;

impl EpsModel<f64> for Affine {
    fn eps(&self, g: &mut Graph<f64>, z_t: Var, _t: usize, z_ll: Var, _p: &PerceptualPrior) -> Result<Var> {
        let a = g.mul_scalar(z_t, 0.5)?;
        let b = g.mul_scalar(z_ll, 0.1)?;
        Ok(g.add(a, b)?)
    }
}

#[test]
fn ddim_single_step_is_one_clamped_projection() {
    let sched = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let zl = Tensor::<f64>::randn(vec![2, 4, 4], &mut rng);
    let out = ddim_sample(&Affine, &zl, &PerceptualPrior::neutral(4), &sched, 1, 99).unwrap();
    let z = Tensor::<f64>::randn(vec![2, 4, 4], &mut ChaCha8Rng::seed_from_u64(99));
    let ab = sched.alpha_bars[1000];
    for ((o, zt), l) in out.data().iter().zip(z.data()).zip(zl.data()) {
        let e = 0.5 * zt + 0.1 * l;
        let x0 = ((zt - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-3.0, 3.0);
        assert!((o - x0).abs() < 1e-12);
    }
}

#[test]
fn ddim_is_deterministic_and_pure() {
    let sched = DiffusionSchedule::default();
    let cfg = GppConfig { d: 4, w: 8, blocks: 1, heads: 2, grid: 2, ..GppConfig::default() };
    let net = GppNet::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let zl = Tensor::<f32>::randn(vec![4, 6, 6], &mut ChaCha8Rng::seed_from_u64(8));
    let p = PerceptualPrior::neutral(2);
    let a = ddim_sample(&net, &zl, &p, &sched, 25, 5).unwrap();
    let b = ddim_sample(&net, &zl, &p, &sched, 25, 5).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| v.abs() <= 3.0));
    let c = ddim_sample(&net, &zl, &p, &sched, 25, 6).unwrap();
    assert_ne!(a, c);
    let concurrent: Vec<Tensor<f32>> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..3).map(|_| s.spawn(|| ddim_sample(&net, &zl, &p, &sched, 25, 5).unwrap())).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(concurrent.iter().all(|t| *t == a));
    assert!(ddim_sample(&net, &zl, &p, &sched, 0, 5).is_err());
}
