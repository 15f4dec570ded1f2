//! Diffusion training loop, augmentation, the unified checkpoint file and
//! held-out evaluation.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use gpp_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeConfig, Autoencoder};
use crate::container;
use crate::diffusion::{ddim_sample, training_loss, DiffusionSchedule};
use crate::error::{invalid, io_err, CoreError, Result};
use crate::imaging::{psnr, Image, ImagePair, Transform};
use crate::net::{Ablation, GppConfig, GppNet};
use crate::optim::{AdamState, AdamW};
use crate::params::ParamSet;
use crate::priors::{
    default_specs, extract_prior, BuiltinProvider, ExtractOptions, PerceptualPrior, PriorCache, PriorProvider,
};

pub const CKPT_MAGIC: &[u8; 4] = b"GPPL";
pub const CKPT_VERSION: u32 = 1;
pub const LOSS_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_SAMPLING_STEPS: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub iterations: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub augment: bool,
    /// Steps between log records.
    pub log_every: usize,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            crop: 48,
            iterations: 20_000,
            seed: 0,
            ablation: Ablation::Full,
            augment: true,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &GppConfig, ae: &AeConfig) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(CoreError::Config(format!("need lr > 0 and weight_decay >= 0, got {} and {}", self.lr, self.weight_decay)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(CoreError::Config("batch_size and log_every must be positive".into()));
        }
        let unit = net.grid * ae.f;
        if self.crop == 0 || self.crop % unit != 0 {
            return Err(CoreError::Config(format!(
                "crop {} must be a positive multiple of grid·f = {unit}",
                self.crop
            )));
        }
        if net.d != ae.d {
            return Err(CoreError::Config(format!("network expects {} latent channels, codec gives {}", net.d, ae.d)));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, weight_decay: self.weight_decay, ..AdamW::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub loss_ema: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: u64,
    pub loss_ema: f64,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: GppNet<f32>,
    pub ae: Autoencoder<f32>,
    pub train: TrainConfig,
    pub step: u64,
    pub loss_ema: Option<f64>,
    pub history: Vec<HistoryPoint>,
    pub opt: AdamState<f32>,
}

impl Checkpoint {
    /// A fresh checkpoint with initialized network parameters and zero optimizer state.
    pub fn init(net: GppConfig, ae: Autoencoder<f32>, train: TrainConfig) -> Result<Self> {
        let net = net.with_ablation(train.ablation);
        train.validate(&net, &ae.config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let net = GppNet::init(net, &mut rng)?;
        let opt = AdamState::new(&net.params);
        Ok(Self { net, ae, train, step: 0, loss_ema: None, history: Vec::new(), opt })
    }
}

// ---- checkpoint file ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    net: GppConfig,
    ae: AeConfig,
    train: TrainConfig,
    latent_scale: f64,
    step: u64,
    loss_ema: Option<f64>,
    optimizer_step: u64,
    history: Vec<HistoryPoint>,
}

const GROUPS: [&str; 4] = ["ae/", "net/", "adam.m/", "adam.v/"];

pub fn checkpoint_bytes(ck: &Checkpoint) -> Vec<u8> {
    let names = ck.net.params.names();
    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    tensors.extend(ck.ae.params.iter().map(|(n, t)| (format!("ae/{n}"), t)));
    tensors.extend(ck.net.params.iter().map(|(n, t)| (format!("net/{n}"), t)));
    tensors.extend(names.iter().zip(&ck.opt.m).map(|(n, t)| (format!("adam.m/{n}"), t)));
    tensors.extend(names.iter().zip(&ck.opt.v).map(|(n, t)| (format!("adam.v/{n}"), t)));
    let meta = CheckpointMeta {
        net: ck.net.config.clone(),
        ae: ck.ae.config.clone(),
        train: ck.train.clone(),
        latent_scale: ck.ae.latent_scale,
        step: ck.step,
        loss_ema: ck.loss_ema,
        optimizer_step: ck.opt.step,
        history: ck.history.clone(),
    };
    container::encode(CKPT_MAGIC, CKPT_VERSION, &meta, &tensors)
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |detail: String| CoreError::Format { path: path.to_path_buf(), detail };
    let (meta, tensors): (CheckpointMeta, _) = container::decode(CKPT_MAGIC, CKPT_VERSION, bytes, path)?;
    let mut groups: [ParamSet<f32>; 4] = Default::default();
    for (name, t) in tensors {
        let Some(g) = GROUPS.iter().position(|p| name.starts_with(p)) else {
            return Err(fail(format!("tensor {name} belongs to no known group")));
        };
        groups[g].push(&name[GROUPS[g].len()..], t);
    }
    let [ae_params, net_params, m, v] = groups;
    let mirrors = |s: &ParamSet<f32>| {
        s.names() == net_params.names() && s.tensors().iter().zip(net_params.tensors()).all(|(a, b)| a.shape() == b.shape())
    };
    if !mirrors(&m) || !mirrors(&v) {
        return Err(fail("optimizer state does not mirror the network tensors".into()));
    }
    let ae = Autoencoder::from_params(meta.ae, ae_params, meta.latent_scale).map_err(|e| fail(e.to_string()))?;
    let net = GppNet::from_params(meta.net, net_params).map_err(|e| fail(e.to_string()))?;
    let opt = AdamState { m: m.tensors().to_vec(), v: v.tensors().to_vec(), step: meta.optimizer_step };
    Ok(Checkpoint { net, ae, train: meta.train, step: meta.step, loss_ema: meta.loss_ema, history: meta.history, opt })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    container::write_atomic(path, &checkpoint_bytes(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    checkpoint_from_bytes(&bytes, path)
}

// ---- augmentation ------------------------------------------------------------------------

/// Applies `t` to both images and to the prior's G×G map; global scores are kept.
pub fn apply_transform(pair: &ImagePair, prior: &PerceptualPrior, t: Transform) -> Result<(ImagePair, PerceptualPrior)> {
    if t.quarter_turns % 2 == 1 && pair.nl.height() != pair.nl.width() {
        return invalid(format!("cannot rotate a non-square {}x{} crop", pair.nl.height(), pair.nl.width()));
    }
    let out = ImagePair { nl: pair.nl.transformed(t)?, ll: pair.ll.transformed(t)?, ..pair.clone() };
    let mut p = prior.clone();
    p.map = t.apply(&prior.map, 3, prior.grid, prior.grid);
    Ok((out, p))
}

/// Uniform draw from the eight flips and rotations.
pub fn augment<R: Rng + ?Sized>(pair: &ImagePair, prior: &PerceptualPrior, rng: &mut R) -> Result<(ImagePair, PerceptualPrior)> {
    let t = Transform::ALL[rng.random_range(0..Transform::ALL.len())];
    apply_transform(pair, prior, t)
}

// ---- training loop -----------------------------------------------------------------------

pub enum TrainEvent<'a> {
    Log(&'a LogRecord),
    Checkpoint(&'a Checkpoint),
}

/// Prior of a training crop, or the neutral prior when the network reads none.
fn crop_prior(ll: &Image, cfg: &GppConfig, provider: &dyn PriorProvider) -> Result<PerceptualPrior> {
    if !cfg.uses_prior() {
        return Ok(PerceptualPrior::neutral(cfg.grid));
    }
    extract_prior(ll, provider, cfg.grid, &default_specs(), &ExtractOptions::default())
}

fn random_crop<R: Rng + ?Sized>(pair: &ImagePair, size: usize, rng: &mut R) -> Result<ImagePair> {
    let (h, w) = (pair.nl.height(), pair.nl.width());
    if h < size || w < size {
        return invalid(format!("pair {} is {h}x{w}, smaller than the {size} crop", pair.seed));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok(ImagePair {
        nl: pair.nl.crop(top, left, size, size)?,
        ll: pair.ll.crop(top, left, size, size)?,
        ..pair.clone()
    })
}

/// Runs `ck` forward to `ck.train.iterations` with crop priors from the builtin
/// provider. Iteration k draws from its own generator stream, so resuming a
/// saved checkpoint continues the same trajectory.
pub fn train(ck: Checkpoint, pairs: &[ImagePair], observer: impl FnMut(TrainEvent<'_>) -> Result<()>) -> Result<Checkpoint> {
    train_with_provider(ck, pairs, &BuiltinProvider, observer)
}

pub fn train_with_provider(
    mut ck: Checkpoint,
    pairs: &[ImagePair],
    provider: &dyn PriorProvider,
    mut observer: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Checkpoint> {
    if pairs.is_empty() {
        return invalid("training needs at least one pair");
    }
    let cfg = ck.train.clone();
    cfg.validate(&ck.net.config, &ck.ae.config)?;
    let opt = cfg.optimizer();
    let sched = DiffusionSchedule::default();
    let start = Instant::now();
    while (ck.step as usize) < cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(ck.step + 1);
        let mut g = Graph::<f32>::new();
        let bound = ck.net.bind(&mut g, true);
        let mut total = None;
        for _ in 0..cfg.batch_size {
            let pair = &pairs[rng.random_range(0..pairs.len())];
            let crop = random_crop(pair, cfg.crop, &mut rng)?;
            let prior = crop_prior(&crop.ll, &ck.net.config, provider)?;
            let (crop, prior) = if cfg.augment { augment(&crop, &prior, &mut rng)? } else { (crop, prior) };
            let z0 = ck.ae.encode(&crop.nl)?.z;
            let z_ll = ck.ae.encode(&crop.ll)?.z;
            let loss = training_loss(&mut g, &bound, &z0, &z_ll, &prior, &sched, &mut rng)?;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let total = total.expect("batch is nonempty");
        let loss = g.mul_scalar(total, 1.0 / cfg.batch_size as f32)?;
        g.backward(loss)?;
        let grads = ck.net.params.grads(&g, &bound.vars);
        let value = g.value(loss).item() as f64;
        drop(bound);
        opt.step(&mut ck.net.params, &grads, &mut ck.opt)?;
        ck.step += 1;
        let ema = match ck.loss_ema {
            None => value,
            Some(e) => LOSS_EMA_DECAY * e + (1.0 - LOSS_EMA_DECAY) * value,
        };
        ck.loss_ema = Some(ema);
        if ck.step % cfg.log_every as u64 == 0 || ck.step as usize == cfg.iterations {
            ck.history.push(HistoryPoint { step: ck.step, loss_ema: ema });
            let rec = LogRecord { step: ck.step, loss: value, loss_ema: ema, wall_ms: start.elapsed().as_millis() as u64 };
            observer(TrainEvent::Log(&rec))?;
        }
        if cfg.checkpoint_every > 0 && ck.step % cfg.checkpoint_every as u64 == 0 {
            observer(TrainEvent::Checkpoint(&ck))?;
        }
    }
    Ok(ck)
}

/// Appends log records as JSON lines.
pub struct JsonlLog {
    file: fs::File,
    path: std::path::PathBuf,
}

impl JsonlLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn write(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.file, "{line}").map_err(io_err(&self.path))
    }
}

// ---- inference and evaluation ------------------------------------------------------------

/// Where the prior of an inference image comes from.
pub struct PriorSource<'a> {
    pub provider: &'a dyn PriorProvider,
    pub cache: Option<&'a PriorCache>,
    pub parallelism: usize,
}

impl PriorSource<'_> {
    pub fn builtin() -> PriorSource<'static> {
        PriorSource { provider: &BuiltinProvider, cache: None, parallelism: 1 }
    }

    fn prior_for(&self, ll: &Image, cfg: &GppConfig) -> Result<PerceptualPrior> {
        if !cfg.uses_prior() {
            return Ok(PerceptualPrior::neutral(cfg.grid));
        }
        let opts = ExtractOptions { cache: self.cache, parallelism: self.parallelism.max(1), ..ExtractOptions::default() };
        extract_prior(ll, self.provider, cfg.grid, &default_specs(), &opts)
    }
}

/// Whole-image prior, encode, deterministic sampling, decode.
pub fn enhance(ck: &Checkpoint, ll: &Image, source: &PriorSource<'_>, steps: usize, seed: u64) -> Result<Image> {
    let prior = source.prior_for(ll, &ck.net.config)?;
    enhance_with_prior(ck, ll, &prior, steps, seed)
}

pub fn enhance_with_prior(ck: &Checkpoint, ll: &Image, prior: &PerceptualPrior, steps: usize, seed: u64) -> Result<Image> {
    let latent = ck.ae.encode(ll)?;
    let z = ddim_sample(&ck.net, &latent.z, prior, &DiffusionSchedule::default(), steps, seed)?;
    ck.ae.decode(&z, latent.height, latent.width)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub seed: u64,
    pub psnr_in: f64,
    pub psnr_out: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub steps: usize,
    pub seed: u64,
    pub provider: String,
    pub entries: Vec<EvalEntry>,
    pub mean_psnr_in: f64,
    pub mean_psnr_out: f64,
}

impl EvalReport {
    pub fn gain(&self) -> f64 {
        self.mean_psnr_out - self.mean_psnr_in
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>12} {:>10} {:>10} {:>8}\n", "pair", "psnr_in", "psnr_out", "gain");
        for e in &self.entries {
            s += &format!("{:>12} {:>10.3} {:>10.3} {:>+8.3}\n", e.seed, e.psnr_in, e.psnr_out, e.psnr_out - e.psnr_in);
        }
        s += &format!("{:>12} {:>10.3} {:>10.3} {:>+8.3}\n", "mean", self.mean_psnr_in, self.mean_psnr_out, self.gain());
        s
    }
}

/// Sampling seed of one evaluation image.
pub fn image_seed(seed: u64, pair_seed: u64) -> u64 {
    seed ^ pair_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// PSNR of raw and enhanced low-light images against their references,
/// spread over `threads` workers. Results do not depend on `threads`.
pub fn evaluate(
    ck: &Checkpoint,
    pairs: &[ImagePair],
    source: &PriorSource<'_>,
    steps: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return invalid("evaluation needs at least one pair");
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<EvalEntry>>>> = Mutex::new((0..pairs.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(pair) = pairs.get(i) else { break };
        let r = (|| {
            let out = enhance(ck, &pair.ll, source, steps, image_seed(seed, pair.seed))?;
            Ok(EvalEntry { seed: pair.seed, psnr_in: psnr(&pair.ll, &pair.nl)?, psnr_out: psnr(&out, &pair.nl)? })
        })();
        slots.lock().expect("no poisoned workers")[i] = Some(r);
    };
    let threads = threads.clamp(1, pairs.len());
    std::thread::scope(|s| {
        for _ in 1..threads {
            s.spawn(work);
        }
        work();
    });
    let entries = slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect::<Result<Vec<_>>>()?;
    let n = entries.len() as f64;
    Ok(EvalReport {
        steps,
        seed,
        provider: source.provider.id().to_string(),
        mean_psnr_in: entries.iter().map(|e| e.psnr_in).sum::<f64>() / n,
        mean_psnr_out: entries.iter().map(|e| e.psnr_out).sum::<f64>() / n,
        entries,
    })
}
