use std::sync::atomic::{AtomicUsize, Ordering};

use gpp_core::autoencoder::Autoencoder;
use gpp_core::imaging::{make_pair, ImagePair, Transform};
use gpp_core::net::{Ablation, GppConfig};
use gpp_core::priors::{
    default_specs, extract_prior, AssessmentLogits, AttributeSpec, BuiltinProvider, ExtractOptions, PriorProvider,
    Scope,
};
use gpp_core::trainer::*;
use gpp_core::imaging::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_net() -> GppConfig {
    GppConfig { d: 3, w: 8, blocks: 1, heads: 2, grid: 2, ..GppConfig::default() }
}

fn tiny_train(iterations: usize, ablation: Ablation) -> TrainConfig {
    TrainConfig { batch_size: 2, crop: 8, iterations, seed: 11, ablation, log_every: 2, lr: 1e-3, ..TrainConfig::default() }
}

fn pairs(n: u64) -> Vec<ImagePair> {
    (0..n).map(|s| make_pair(100 + s, 16).unwrap()).collect()
}

fn run(iterations: usize, ablation: Ablation) -> Checkpoint {
    let ck = Checkpoint::init(tiny_net(), Autoencoder::identity(), tiny_train(iterations, ablation)).unwrap();
    train(ck, &pairs(4), |_| Ok(())).unwrap()
}

#[test]
fn transforms_compose_as_expected() {
    let pair = make_pair(1, 16).unwrap();
    let prior = extract_prior(&pair.ll, &BuiltinProvider, 4, &default_specs(), &ExtractOptions::default()).unwrap();
    let flip = Transform { hflip: true, quarter_turns: 0 };
    let rot = Transform { hflip: false, quarter_turns: 1 };
    let (once, p1) = apply_transform(&pair, &prior, flip).unwrap();
    assert_ne!(once.nl, pair.nl);
    let (twice, p2) = apply_transform(&once, &p1, flip).unwrap();
    assert_eq!((twice, p2), (pair.clone(), prior.clone()));
    let mut cur = (pair.clone(), prior.clone());
    for _ in 0..4 {
        cur = apply_transform(&cur.0, &cur.1, rot).unwrap();
    }
    assert_eq!(cur, (pair.clone(), prior.clone()));

    for t in Transform::ALL {
        let (out, p) = apply_transform(&pair, &prior, t).unwrap();
        let sorted = |i: &Image| {
            let mut v = i.data().to_vec();
            v.sort_by(f32::total_cmp);
            v
        };
        assert_eq!(sorted(&out.ll), sorted(&pair.ll));
        assert_eq!(p.global, prior.global);
        // the moved map equals the map recomputed on the moved image
        let fresh = extract_prior(&out.ll, &BuiltinProvider, 4, &default_specs(), &ExtractOptions::default()).unwrap();
        for (a, b) in p.map.iter().zip(&fresh.map) {
            assert!((a - b).abs() < 1e-9, "{t:?}: {a} vs {b}");
        }
    }
}

#[test]
fn odd_turns_of_rectangular_crops_are_rejected() {
    let p = make_pair(2, 16).unwrap();
    let rect = ImagePair { nl: p.nl.crop(0, 0, 16, 8).unwrap(), ll: p.ll.crop(0, 0, 16, 8).unwrap(), ..p };
    let prior = gpp_core::priors::PerceptualPrior::neutral(2);
    assert!(apply_transform(&rect, &prior, Transform { hflip: false, quarter_turns: 1 }).is_err());
    assert!(apply_transform(&rect, &prior, Transform { hflip: true, quarter_turns: 2 }).is_ok());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let square = make_pair(3, 16).unwrap();
    let (a, _) = augment(&square, &prior, &mut rng).unwrap();
    assert_eq!((a.nl.height(), a.nl.width()), (16, 16));
}

#[test]
fn training_is_deterministic_and_logs() {
    let a = run(6, Ablation::Full);
    let b = run(6, Ablation::Full);
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
    assert_eq!(a.step, 6);
    assert_eq!(a.opt.step, 6);
    assert_eq!(a.history.iter().map(|h| h.step).collect::<Vec<_>>(), [2, 4, 6]);
    assert!(a.net.params.all_finite());
    let c = Checkpoint::init(tiny_net(), Autoencoder::identity(), TrainConfig { seed: 12, ..tiny_train(6, Ablation::Full) })
        .unwrap();
    let c = train(c, &pairs(4), |_| Ok(())).unwrap();
    assert_ne!(checkpoint_bytes(&a), checkpoint_bytes(&c));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let whole = run(6, Ablation::Full);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.gppl");
    let mut seen = 0;
    let ck = Checkpoint::init(tiny_net(), Autoencoder::identity(), TrainConfig { checkpoint_every: 3, ..tiny_train(3, Ablation::Full) })
        .unwrap();
    train(ck, &pairs(4), |e| {
        if let TrainEvent::Checkpoint(c) = e {
            seen += 1;
            save_checkpoint(c, &path)?;
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 1);
    let mut mid = load_checkpoint(&path).unwrap();
    assert_eq!(mid.step, 3);
    mid.train.iterations = 6;
    mid.train.checkpoint_every = 0;
    let resumed = train(mid, &pairs(4), |_| Ok(())).unwrap();
    assert_eq!(resumed.net.params, whole.net.params);
    assert_eq!(resumed.opt.m, whole.opt.m);
    assert_eq!(resumed.loss_ema, whole.loss_ema);
    // the interrupted run also logged its final step
    let steps: Vec<u64> = resumed.history.iter().map(|h| h.step).collect();
    assert_eq!(steps, [2, 3, 4, 6]);
    assert_eq!(resumed.history.last(), whole.history.last());
}

#[test]
fn checkpoint_files_round_trip_and_fail_loudly() {
    let ck = run(2, Ablation::Variant4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.gppl");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&ck));
    assert_eq!(back.net.config, ck.net.config);
    assert_eq!(back.train, ck.train);

    let bytes = std::fs::read(&path).unwrap();
    let err = checkpoint_from_bytes(&bytes[..bytes.len() - 5], &path).unwrap_err().to_string();
    assert!(err.contains("truncated") && err.contains("adam.v/"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint_from_bytes(&bad, &path).is_err());
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(checkpoint_from_bytes(&bad, &path).unwrap_err().to_string().contains("version"));
    let mut bad = bytes.clone();
    bad[16] = b'#';
    assert!(checkpoint_from_bytes(&bad, &path).unwrap_err().to_string().contains("header"));
    assert!(load_checkpoint(&dir.path().join("missing.gppl")).is_err());
}

#[test]
fn config_is_validated() {
    let ae = Autoencoder::<f32>::identity();
    assert!(Checkpoint::init(tiny_net(), ae.clone(), TrainConfig { crop: 7, ..tiny_train(1, Ablation::Full) }).is_err());
    assert!(Checkpoint::init(tiny_net(), ae.clone(), TrainConfig { lr: 0.0, ..tiny_train(1, Ablation::Full) }).is_err());
    assert!(Checkpoint::init(GppConfig { d: 4, ..tiny_net() }, ae.clone(), tiny_train(1, Ablation::Full)).is_err());
    let ck = Checkpoint::init(tiny_net(), ae, TrainConfig { crop: 32, ..tiny_train(1, Ablation::Full) }).unwrap();
    assert!(train(ck.clone(), &pairs(2), |_| Ok(())).is_err(), "crop larger than the images");
    assert!(train(ck, &[], |_| Ok(())).is_err());
}

struct Counting(AtomicUsize);

impl PriorProvider for Counting {
    fn id(&self) -> &str {
        "counting"
    }
    fn assess(&self, image: &Image, spec: &AttributeSpec, scope: Scope) -> gpp_core::Result<AssessmentLogits> {
        self.0.fetch_add(1, Ordering::SeqCst);
        BuiltinProvider.assess(image, spec, scope)
    }
}

#[test]
fn prior_free_training_never_consults_a_provider() {
    let counting = Counting(AtomicUsize::new(0));
    let ck = Checkpoint::init(tiny_net(), Autoencoder::identity(), tiny_train(2, Ablation::Variant3)).unwrap();
    train_with_provider(ck, &pairs(2), &counting, |_| Ok(())).unwrap();
    assert_eq!(counting.0.load(Ordering::SeqCst), 0);
    let ck = Checkpoint::init(tiny_net(), Autoencoder::identity(), tiny_train(2, Ablation::Full)).unwrap();
    let a = train_with_provider(ck, &pairs(4), &counting, |_| Ok(())).unwrap();
    // 2 iterations × 2 crops × 3 attributes × (1 global + 4 patches)
    assert_eq!(counting.0.load(Ordering::SeqCst), 60);
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&run(2, Ablation::Full)));
}

#[test]
fn evaluation_is_deterministic_across_thread_counts() {
    let ck = run(4, Ablation::Full);
    let held: Vec<ImagePair> = (0..5).map(|s| make_pair(900 + s, 16).unwrap()).collect();
    let one = evaluate(&ck, &held, &PriorSource::builtin(), 5, 3, 1).unwrap();
    let three = evaluate(&ck, &held, &PriorSource::builtin(), 5, 3, 3).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.entries.len(), 5);
    assert_eq!(one.entries.iter().map(|e| e.seed).collect::<Vec<_>>(), [900, 901, 902, 903, 904]);
    assert!(one.entries.iter().all(|e| e.psnr_in.is_finite() && e.psnr_out.is_finite()));
    assert!((one.gain() - (one.mean_psnr_out - one.mean_psnr_in)).abs() < 1e-12);
    assert!(one.table().lines().count() == 7);
    let out = enhance(&ck, &held[0].ll, &PriorSource::builtin(), 5, image_seed(3, 900)).unwrap();
    assert_eq!(gpp_core::imaging::psnr(&out, &held[0].nl).unwrap(), one.entries[0].psnr_out);
    assert!(evaluate(&ck, &[], &PriorSource::builtin(), 5, 3, 1).is_err());
}
