use gpp_core::optim::{AdamState, AdamW};
use gpp_core::params::ParamSet;
use gpp_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn single(w: f64) -> ParamSet<f64> {
    let mut p = ParamSet::default();
    p.push("w", Tensor::new(vec![1], vec![w]).unwrap());
    p
}

#[test]
fn zero_gradient_only_decays() {
    let opt = AdamW { lr: 1e-4, weight_decay: 0.01, ..AdamW::default() };
    let mut p = single(0.75);
    let mut s = AdamState::new(&p);
    opt.step(&mut p, &[Tensor::zeros(vec![1])], &mut s).unwrap();
    assert_eq!(p.tensors()[0].item(), 0.75 * (1.0 - 1e-6));
}

#[test]
fn first_step_matches_hand_arithmetic() {
    let opt = AdamW::default();
    let w0 = 0.5;
    let mut p = single(w0);
    let mut s = AdamState::new(&p);
    opt.step(&mut p, &[Tensor::ones(vec![1])], &mut s).unwrap();
    // bias-corrected moments are exactly g and g²
    let want = w0 * (1.0 - 1e-4 * 0.01) - 1e-4 * 1.0 / (1.0 + 1e-8);
    assert!((p.tensors()[0].item() - want).abs() < 1e-16);
    assert_eq!(s.step, 1);
    assert!((s.m[0].item() - 0.1).abs() < 1e-16);
    assert!((s.v[0].item() - 0.001).abs() < 1e-16);
}

#[test]
fn hundred_steps_are_reproducible_and_finite() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f32>::default();
        p.push("a", Tensor::randn(vec![3, 4], &mut rng));
        p.push("b", Tensor::randn(vec![5], &mut rng));
        let mut s = AdamState::new(&p);
        for _ in 0..100 {
            let g: Vec<Tensor<f32>> = p.tensors().iter().map(|t| Tensor::randn(t.shape().to_vec(), &mut rng)).collect();
            AdamW::default().step(&mut p, &g, &mut s).unwrap();
        }
        assert!(p.all_finite());
        assert_eq!(p.tensors()[0].shape(), [3, 4]);
        p
    };
    assert_eq!(run(), run());
}

#[test]
fn mismatched_state_is_rejected() {
    let mut p = single(1.0);
    let mut s = AdamState::new(&p);
    assert!(AdamW::default().step(&mut p, &[], &mut s).is_err());
    assert!(AdamW::default().step(&mut p, &[Tensor::zeros(vec![2])], &mut s).is_err());
    let mut other = AdamState::new(&ParamSet::<f64>::default());
    assert!(AdamW::default().step(&mut p, &[Tensor::zeros(vec![1])], &mut other).is_err());
}
