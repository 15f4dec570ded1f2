use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gpp_core::autoencoder::{ae_train, latent_channel_std, load_autoencoder, save_autoencoder, AeConfig, AeTrainConfig, Autoencoder};
use gpp_core::checks::{network_check_config, network_gradcheck, NETWORK_TOLERANCE};
use gpp_core::imaging::{load_dataset, load_image, make_pair, psnr, save_image, write_pair, Image};
use gpp_core::net::Ablation;
use gpp_core::priors::{
    cache_key, default_specs, extract_prior, prompt_version, BuiltinProvider, ExtractOptions, PriorCache, PriorProvider,
    VlmClientConfig, VlmProvider,
};
use gpp_core::trainer::{
    self, load_checkpoint, save_checkpoint, Checkpoint, JsonlLog, PriorSource, TrainEvent,
};
use gpp_tensor::gradcheck::suite;
use serde_json::json;

use crate::config::FileConfig;
use crate::manifest::RunManifest;
use crate::{Common, Failure, ProviderArgs};

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];
/// Relative-error budget for each primitive op.
const OP_TOLERANCE: f64 = 1e-4;

fn runtime(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> Failure {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn require_exists(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(runtime(format!("creating {}", path.display())))
}

/// A single image file, or the image files directly inside a directory, sorted.
fn list_images(input: &Path) -> Result<Vec<PathBuf>, Failure> {
    require_exists(input, "input")?;
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(input).map_err(runtime(input.display()))? {
        let path = entry.map_err(runtime(input.display()))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn make_provider(name: &str) -> Result<Box<dyn PriorProvider>, Failure> {
    match name {
        "builtin" => Ok(Box::new(BuiltinProvider)),
        "http" | "vlm" => {
            let cfg = VlmClientConfig::from_env()
                .ok_or_else(|| Failure::Usage("provider http needs GPP_VLM_URL to be set".into()))?;
            Ok(Box::new(VlmProvider::new(cfg)))
        }
        other => Err(Failure::Usage(format!("unknown provider {other:?} (builtin|http)"))),
    }
}

pub fn make_dataset(n: usize, size: usize, out: &Path, force: bool, common: &Common) -> Result<(), Failure> {
    let cfg = FileConfig::load(common.config.as_deref())?;
    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let non_empty = out.is_dir() && fs::read_dir(out).map_err(runtime(out.display()))?.next().is_some();
    if non_empty && !force {
        return Err(Failure::Usage(format!("{} is not empty; pass --force to write into it", out.display())));
    }
    let mut manifest = RunManifest::start("make-dataset", json!({ "n": n, "size": size }), Some(seed));
    create_dir(out)?;
    for i in 0..n as u64 {
        let pair = make_pair(seed + i, size)?;
        manifest.outputs.push(write_pair(out, &pair)?);
    }
    println!("wrote {n} pairs of {size}x{size} to {}", out.display());
    manifest.finish(&out.join("manifest.json"))
}

pub fn extract_priors(
    input: &Path,
    out: &Path,
    grid: Option<usize>,
    provider: Option<String>,
    parallelism: Option<usize>,
    common: &Common,
) -> Result<(), Failure> {
    let cfg = FileConfig::load(common.config.as_deref())?;
    let grid = grid.or(cfg.grid).unwrap_or(cfg.net.grid);
    let provider_name = provider.unwrap_or(cfg.provider.clone());
    let provider = make_provider(&provider_name)?;
    require_exists(input, "input")?;
    let images = if input.join("pairs").is_dir() {
        load_dataset(input)?
            .iter()
            .map(|p| gpp_core::imaging::pair_dir(input, p.seed).join("ll.png"))
            .collect()
    } else {
        list_images(input)?
    };
    let cache = PriorCache::open(out)?;
    let opts = ExtractOptions { cache: Some(&cache), parallelism: parallelism.unwrap_or(cfg.parallelism).max(1), ..Default::default() };
    let specs = default_specs();
    let version = prompt_version(&specs);
    let mut manifest = RunManifest::start(
        "extract-priors",
        json!({ "grid": grid, "provider": provider.id(), "prompt_version": version }),
        None,
    );
    let (mut done, mut failed, mut s_sum) = (0usize, 0usize, 0.0f64);
    let mut index = Vec::new();
    for path in &images {
        manifest.inputs.push(path.clone());
        let result = load_image(path).and_then(|img| {
            let prior = extract_prior(&img, provider.as_ref(), grid, &specs, &opts)?;
            Ok((cache_key(&img, provider.id(), &version, grid), prior))
        });
        match result {
            Ok((key, prior)) => {
                done += 1;
                s_sum += prior.s_mean;
                let sidecar = cache.path_for(&key);
                index.push(json!({ "image": path, "sidecar": sidecar, "s_mean": prior.s_mean, "global": prior.global }));
                manifest.outputs.push(sidecar);
            }
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", path.display());
            }
        }
    }
    let index_path = out.join("index.json");
    fs::write(&index_path, serde_json::to_string_pretty(&index).expect("index serializes"))
        .map_err(runtime(index_path.display()))?;
    manifest.outputs.push(index_path);
    manifest.finish(&out.join("manifest.json"))?;
    let mean = if done > 0 { s_sum / done as f64 } else { f64::NAN };
    println!(
        "priors: {done} images ({} cache hits, {} computed), {failed} failed, mean s_mean {mean:.4}",
        cache.hits(),
        cache.misses()
    );
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} images failed", images.len())));
    }
    Ok(())
}

fn mean_recon_psnr(ae: &Autoencoder<f32>, images: &[Image]) -> Result<f64, Failure> {
    let mut total = 0.0;
    for img in images {
        let rec = ae.decode_latent(&ae.encode(img)?)?;
        total += psnr(&rec, img)?;
    }
    Ok(total / images.len() as f64)
}

pub fn train_ae(data: &Path, out: &Path, epochs: Option<usize>, identity: bool, common: &Common) -> Result<(), Failure> {
    let cfg = FileConfig::load(common.config.as_deref())?;
    require_exists(data, "dataset")?;
    let pairs = load_dataset(data)?;
    let images: Vec<Image> = pairs.iter().flat_map(|p| [p.nl.clone(), p.ll.clone()]).collect();
    let config = if identity { AeConfig::identity() } else { cfg.ae.clone() };
    let train = AeTrainConfig {
        epochs: epochs.unwrap_or(cfg.ae_train.epochs),
        seed: common.seed.or(cfg.seed).unwrap_or(cfg.ae_train.seed),
        ..cfg.ae_train
    };
    let mut manifest = RunManifest::start("train-ae", json!({ "ae": config, "ae_train": train }), Some(train.seed));
    manifest.inputs.push(data.to_path_buf());
    let start = Instant::now();
    let (ae, report) = ae_train(&images, config, &train, |epoch, loss| {
        log::info!("epoch {} loss {loss:.6} ({:.1}s)", epoch + 1, start.elapsed().as_secs_f64());
    })?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_autoencoder(&ae, out)?;
    let recon = mean_recon_psnr(&ae, &images)?;
    let stds = latent_channel_std(&ae, &images)?;
    println!(
        "codec f={} d={}: {} epochs, final loss {:.6}, reconstruction PSNR {recon:.2} dB, latent channel std {:?}",
        ae.config.f,
        ae.config.d,
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(0.0),
        stds.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>()
    );
    manifest.outputs.push(out.to_path_buf());
    let mut mpath = out.as_os_str().to_owned();
    mpath.push(".manifest.json");
    manifest.finish(Path::new(&mpath))
}

pub fn train(
    data: &Path,
    ae_path: Option<&Path>,
    out: &Path,
    iterations: Option<usize>,
    ablation: Option<Ablation>,
    resume: Option<&Path>,
    common: &Common,
) -> Result<(), Failure> {
    let cfg = FileConfig::load(common.config.as_deref())?;
    require_exists(data, "dataset")?;
    let mut ck = match resume {
        Some(path) => {
            require_exists(path, "checkpoint")?;
            let mut ck = load_checkpoint(path)?;
            if let Some(n) = iterations {
                ck.train.iterations = n;
            }
            ck
        }
        None => {
            let ae = match ae_path {
                Some(p) => {
                    require_exists(p, "codec")?;
                    load_autoencoder(p)?
                }
                None if cfg.ae.is_identity() => Autoencoder::identity(),
                None => return Err(Failure::Usage("--ae is required unless the config selects the identity codec".into())),
            };
            let mut train = cfg.train.clone();
            train.seed = common.seed.or(cfg.seed).unwrap_or(train.seed);
            train.iterations = iterations.unwrap_or(train.iterations);
            train.ablation = ablation.unwrap_or(train.ablation);
            let mut net = cfg.net.clone();
            net.d = ae.config.d;
            net.grid = cfg.grid.unwrap_or(net.grid);
            Checkpoint::init(net, ae, train)?
        }
    };
    let pairs = load_dataset(data)?;
    create_dir(out)?;
    let mut manifest = RunManifest::start(
        "train",
        json!({ "net": ck.net.config, "ae": ck.ae.config, "train": ck.train, "resumed_from_step": ck.step }),
        Some(ck.train.seed),
    );
    manifest.inputs.push(data.to_path_buf());
    manifest.inputs.extend(ae_path.map(Path::to_path_buf));
    manifest.inputs.extend(resume.map(Path::to_path_buf));
    let log_path = out.join("train_log.jsonl");
    let mut log = JsonlLog::create(&log_path, resume.is_some())?;
    let ckpt_dir = out.join("checkpoints");
    if ck.train.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    log::info!(
        "training {} parameters for {} iterations from step {}",
        ck.net.params.numel(),
        ck.train.iterations,
        ck.step
    );
    let mut saved = Vec::new();
    ck = trainer::train(ck, &pairs, |ev| match ev {
        TrainEvent::Log(rec) => {
            log::info!("step {} loss {:.5} ema {:.5} ({:.1}s)", rec.step, rec.loss, rec.loss_ema, rec.wall_ms as f64 / 1e3);
            log.write(rec)
        }
        TrainEvent::Checkpoint(c) => {
            let path = ckpt_dir.join(format!("step_{:07}.gppl", c.step));
            saved.push(path.clone());
            save_checkpoint(c, &path)
        }
    })?;
    let final_path = out.join("checkpoint.gppl");
    save_checkpoint(&ck, &final_path)?;
    manifest.outputs.extend(saved);
    manifest.outputs.push(log_path);
    manifest.outputs.push(final_path.clone());
    println!(
        "trained to step {} (loss ema {:.5}); checkpoint {}",
        ck.step,
        ck.loss_ema.unwrap_or(f64::NAN),
        final_path.display()
    );
    manifest.finish(&out.join("manifest.json"))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    require_exists(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

struct ProviderSetup {
    provider: Box<dyn PriorProvider>,
    cache: Option<PriorCache>,
    parallelism: usize,
}

impl ProviderSetup {
    fn new(args: &ProviderArgs, cfg: &FileConfig) -> Result<Self, Failure> {
        let provider = make_provider(args.provider.as_deref().unwrap_or(&cfg.provider))?;
        let cache = args.cache.as_ref().map(PriorCache::open).transpose()?;
        Ok(Self { provider, cache, parallelism: args.parallelism.unwrap_or(cfg.parallelism) })
    }

    fn source(&self) -> PriorSource<'_> {
        PriorSource { provider: self.provider.as_ref(), cache: self.cache.as_ref(), parallelism: self.parallelism }
    }
}

pub fn enhance(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    steps: Option<usize>,
    provider: &ProviderArgs,
    common: &Common,
) -> Result<(), Failure> {
    let cfg = FileConfig::load(common.config.as_deref())?;
    let ck = open_checkpoint(ckpt)?;
    let images = list_images(input)?;
    if images.is_empty() {
        return Err(Failure::Usage(format!("no images found in {}", input.display())));
    }
    let setup = ProviderSetup::new(provider, &cfg)?;
    let steps = steps.unwrap_or(cfg.steps);
    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    let mut manifest = RunManifest::start(
        "enhance",
        json!({ "steps": steps, "provider": setup.provider.id(), "checkpoint_step": ck.step }),
        Some(seed),
    );
    manifest.inputs.push(ckpt.to_path_buf());
    create_dir(out)?;
    for path in &images {
        let img = load_image(path)?;
        let result = trainer::enhance(&ck, &img, &setup.source(), steps, seed)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let dest = out.join(format!("{stem}.enhanced.png"));
        save_image(&result, &dest)?;
        println!("{} ({}x{}) -> {}", path.display(), img.height(), img.width(), dest.display());
        manifest.inputs.push(path.clone());
        manifest.outputs.push(dest);
    }
    manifest.finish(&out.join("manifest.json"))
}

pub fn eval(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    steps: Option<usize>,
    threads: usize,
    provider: &ProviderArgs,
    common: &Common,
) -> Result<(), Failure> {
    let cfg = FileConfig::load(common.config.as_deref())?;
    let ck = open_checkpoint(ckpt)?;
    require_exists(data, "dataset")?;
    let pairs = load_dataset(data)?;
    let setup = ProviderSetup::new(provider, &cfg)?;
    let steps = steps.unwrap_or(cfg.steps);
    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    let mut manifest = RunManifest::start("eval", json!({ "steps": steps, "provider": setup.provider.id() }), Some(seed));
    manifest.inputs.extend([ckpt.to_path_buf(), data.to_path_buf()]);
    let report = trainer::evaluate(&ck, &pairs, &setup.source(), steps, seed, threads)?;
    create_dir(out)?;
    let json_path = out.join("report.json");
    let text_path = out.join("report.txt");
    fs::write(&json_path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(runtime(json_path.display()))?;
    let table = report.table();
    fs::write(&text_path, &table).map_err(runtime(text_path.display()))?;
    print!("{table}");
    manifest.outputs.extend([json_path, text_path]);
    manifest.finish(&out.join("manifest.json"))
}

pub fn gradcheck(seeds: u64, common: &Common) -> Result<(), Failure> {
    let seed = common.seed.unwrap_or(0);
    let start = Instant::now();
    let results = suite::run(seeds).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut failures = Vec::new();
    for (name, err) in &results {
        let ok = *err < OP_TOLERANCE;
        println!("{name:<18} max_rel_err {err:.3e} {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    }
    let report = network_gradcheck(network_check_config(), seed, 16)?;
    let ok = report.max_rel_err < NETWORK_TOLERANCE;
    println!(
        "{:<18} max_rel_err {:.3e} {} ({} coordinates)",
        "network",
        report.max_rel_err,
        if ok { "ok" } else { "FAIL" },
        report.checked
    );
    if !ok {
        failures.push("network".into());
    }
    println!("gradcheck finished in {:.1}s", start.elapsed().as_secs_f64());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed for {}", failures.join(", "))))
    }
}
