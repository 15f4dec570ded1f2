//! Deterministic latent codec: images in [0,1] map to d-channel latents at
//! 1/f resolution. `f = 1` is the identity codec on pixels shifted to [-1,1].

use std::path::Path;

use gpp_tensor::{Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{invalid, io_err, CoreError, Result};
use crate::imaging::Image;
use crate::optim::{AdamState, AdamW};
use crate::params::{Init, Layout, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub f: usize,
    pub d: usize,
    pub hidden: [usize; 2],
}

impl Default for AeConfig {
    fn default() -> Self {
        Self { f: 4, d: 4, hidden: [32, 64] }
    }
}

impl AeConfig {
    pub fn identity() -> Self {
        Self { f: 1, d: 3, hidden: [32, 64] }
    }

    pub fn validate(&self) -> Result<()> {
        match self.f {
            1 if self.d != 3 => Err(CoreError::Config("identity codec needs d = 3".into())),
            1 | 4 if self.d > 0 && self.hidden.iter().all(|&h| h > 0) => Ok(()),
            _ => Err(CoreError::Config(format!("unsupported codec {self:?} (f must be 1 or 4)"))),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.f == 1
    }

    fn layout(&self) -> Layout {
        let mut l = Layout::default();
        if self.is_identity() {
            return l;
        }
        let [h1, h2] = self.hidden;
        let d = self.d;
        let mut conv = |name: &str, o: usize, i: usize, k: usize| {
            l.add(format!("ae.{name}.k"), &[o, i, k, k], Init::ConvFanIn);
            l.add(format!("ae.{name}.b"), &[o, 1, 1], Init::Zeros);
        };
        conv("enc1", h1, 3, 3);
        conv("enc2", h2, h1, 3);
        conv("enc3", d, h2, 1);
        conv("dec1", h2, d, 1);
        conv("dec2", h1, h2, 3);
        conv("dec3", h1, h1, 3);
        conv("dec4", 3, h1, 3);
        l
    }
}

/// A latent with the image size it decodes back to.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent<T: Scalar> {
    pub z: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Autoencoder<T: Scalar> {
    pub config: AeConfig,
    pub params: ParamSet<T>,
    /// Multiplies raw encoder output so training latents have unit standard deviation.
    pub latent_scale: f64,
}

fn conv_layer<T: Scalar>(g: &mut Graph<T>, x: Var, k: Var, b: Var, stride: usize) -> Result<Var> {
    let pad = g.shape(k)[2] / 2;
    let y = g.conv2d(x, k, stride, pad)?;
    Ok(g.add(y, b)?)
}

impl<T: Scalar> Autoencoder<T> {
    pub fn init(config: AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config.layout().init(&mut rng);
        Ok(Self { config, params, latent_scale: 1.0 })
    }

    pub fn from_params(config: AeConfig, params: ParamSet<T>, latent_scale: f64) -> Result<Self> {
        config.validate()?;
        config.layout().check(&params)?;
        Ok(Self { config, params, latent_scale })
    }

    pub fn identity() -> Self {
        Self::init(AeConfig::identity(), 0).expect("identity codec")
    }

    pub fn cast<U: Scalar>(&self) -> Autoencoder<U> {
        Autoencoder { config: self.config.clone(), params: self.params.cast(), latent_scale: self.latent_scale }
    }

    /// Unscaled encoder on a 3×H×W input in [-1,1] with H, W multiples of f.
    pub fn encode_graph(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        if self.config.is_identity() {
            return Ok(x);
        }
        let h = conv_layer(g, x, vars[0], vars[1], 2)?;
        let h = g.gelu(h)?;
        let h = conv_layer(g, h, vars[2], vars[3], 2)?;
        let h = g.gelu(h)?;
        conv_layer(g, h, vars[4], vars[5], 1)
    }

    /// Unscaled decoder back to 3×H×W in roughly [-1,1].
    pub fn decode_graph(&self, g: &mut Graph<T>, vars: &[Var], z: Var) -> Result<Var> {
        if self.config.is_identity() {
            return Ok(z);
        }
        let h = conv_layer(g, z, vars[6], vars[7], 1)?;
        let h = g.gelu(h)?;
        let h = g.upsample_nearest(h, 2)?;
        let h = conv_layer(g, h, vars[8], vars[9], 1)?;
        let h = g.gelu(h)?;
        let h = g.upsample_nearest(h, 2)?;
        let h = conv_layer(g, h, vars[10], vars[11], 1)?;
        let h = g.gelu(h)?;
        conv_layer(g, h, vars[12], vars[13], 1)
    }

    /// Pads to a multiple of f, encodes and applies the latent scale.
    pub fn encode(&self, image: &Image) -> Result<Latent<T>> {
        let f = self.config.f;
        let (h, w) = (image.height(), image.width());
        let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        let padded = if (ph, pw) == (h, w) { image.clone() } else { image.pad_reflect(ph, pw) };
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let two = T::lit(2.0);
        let x = g.constant(padded.to_tensor::<T>().map(|v| v * two - T::one()));
        let z = self.encode_graph(&mut g, &vars, x)?;
        let scale = T::lit(self.latent_scale);
        Ok(Latent { z: g.value(z).map(|v| v * scale), height: h, width: w })
    }

    /// Inverse of [`Autoencoder::encode`], cropped to the original size and clipped.
    pub fn decode(&self, z: &Tensor<T>, height: usize, width: usize) -> Result<Image> {
        let f = self.config.f;
        let s = z.shape();
        if s.len() != 3 || s[0] != self.config.d || s[1] * f < height || s[2] * f < width {
            return Err(gpp_tensor::TensorError::Dimension {
                op: "decode",
                detail: format!("latent {s:?} cannot decode to {height}x{width} with d={} f={f}", self.config.d),
            }
            .into());
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let inv = T::lit(1.0 / self.latent_scale);
        let zv = g.constant(z.map(|v| v * inv));
        let x = self.decode_graph(&mut g, &vars, zv)?;
        let half = T::lit(0.5);
        let img = Image::from_tensor(&g.value(x).map(|v| (v + T::one()) * half))?;
        if (img.height(), img.width()) == (height, width) {
            Ok(img)
        } else {
            img.crop(0, 0, height, width)
        }
    }

    pub fn decode_latent(&self, latent: &Latent<T>) -> Result<Image> {
        self.decode(&latent.z, latent.height, latent.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 8, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct AeTrainReport {
    /// Mean reconstruction loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Cosine decay from `base` to 2% of `base` over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let p = step as f64 / total.max(1) as f64;
    let floor = 0.02 * base;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Mean squared reconstruction error in [-1,1] units over `images`,
/// then the latent scale from the trained encoder.
pub fn ae_train(
    images: &[Image],
    config: AeConfig,
    train: &AeTrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Autoencoder<f32>, AeTrainReport)> {
    if images.is_empty() {
        return invalid("autoencoder training needs at least one image");
    }
    let mut ae = Autoencoder::<f32>::init(config, train.seed)?;
    if ae.config.is_identity() {
        return Ok((ae, AeTrainReport { epoch_losses: Vec::new() }));
    }
    if let Some(img) = images.iter().find(|i| i.height() % ae.config.f != 0 || i.width() % ae.config.f != 0) {
        return invalid(format!("training image {}x{} not a multiple of {}", img.height(), img.width(), ae.config.f));
    }
    let mut opt = AdamW { lr: train.lr, weight_decay: 0.0, ..AdamW::default() };
    let mut state = AdamState::new(&ae.params);
    let inputs: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor::<f32>().map(|v| v * 2.0 - 1.0)).collect();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let batch = train.batch_size.max(1);
    let mut losses = Vec::with_capacity(train.epochs);
    let total_steps = train.epochs * images.len().div_ceil(batch);
    let mut step = 0;
    for epoch in 0..train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut g = Graph::new();
            let vars = ae.params.bind(&mut g, true);
            let mut sum = None;
            for &i in chunk {
                let x = g.constant(inputs[i].clone());
                let z = ae.encode_graph(&mut g, &vars, x)?;
                let y = ae.decode_graph(&mut g, &vars, z)?;
                let diff = g.sub(y, x)?;
                let sq = g.square(diff)?;
                let loss = g.mean(sq)?;
                sum = Some(match sum {
                    None => loss,
                    Some(s) => g.add(s, loss)?,
                });
            }
            let sum = sum.expect("chunks are nonempty");
            let loss = g.mul_scalar(sum, 1.0 / chunk.len() as f32)?;
            g.backward(loss)?;
            total += g.value(sum).item() as f64;
            let grads = ae.params.grads(&g, &vars);
            opt.lr = cosine_lr(train.lr, step, total_steps);
            step += 1;
            opt.step(&mut ae.params, &grads, &mut state)?;
        }
        let mean = total / images.len() as f64;
        progress(epoch, mean);
        losses.push(mean);
    }
    ae.latent_scale = latent_scale(&ae, images)?;
    Ok((ae, AeTrainReport { epoch_losses: losses }))
}

/// `1 / std` of raw latents over `images`.
pub fn latent_scale<T: Scalar>(ae: &Autoencoder<T>, images: &[Image]) -> Result<f64> {
    let raw = Autoencoder { latent_scale: 1.0, ..ae.clone() };
    let (mut n, mut s, mut s2) = (0.0f64, 0.0f64, 0.0f64);
    for img in images {
        for v in raw.encode(img)?.z.data() {
            let v = v.as_f64();
            n += 1.0;
            s += v;
            s2 += v * v;
        }
    }
    let var = s2 / n - (s / n).powi(2);
    if !(var > 1e-12) {
        return invalid("encoder collapsed: latent variance is zero");
    }
    Ok(1.0 / var.sqrt())
}

/// Per-channel standard deviation of scaled latents over `images`.
pub fn latent_channel_std<T: Scalar>(ae: &Autoencoder<T>, images: &[Image]) -> Result<Vec<f64>> {
    let d = ae.config.d;
    let mut acc = vec![(0.0f64, 0.0f64, 0.0f64); d];
    for img in images {
        let z = ae.encode(img)?.z;
        let per = z.numel() / d;
        for (i, v) in z.data().iter().enumerate() {
            let a = &mut acc[i / per];
            let v = v.as_f64();
            a.0 += 1.0;
            a.1 += v;
            a.2 += v * v;
        }
    }
    Ok(acc.iter().map(|(n, s, s2)| (s2 / n - (s / n).powi(2)).max(0.0).sqrt()).collect())
}

pub const AE_MAGIC: &[u8; 4] = b"GPPA";
pub const AE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AeMeta {
    config: AeConfig,
    latent_scale: f64,
}

pub fn save_autoencoder(ae: &Autoencoder<f32>, path: &Path) -> Result<()> {
    let meta = AeMeta { config: ae.config.clone(), latent_scale: ae.latent_scale };
    let tensors: Vec<_> = ae.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    container::write_atomic(path, &container::encode(AE_MAGIC, AE_VERSION, &meta, &tensors))
}

pub fn load_autoencoder(path: &Path) -> Result<Autoencoder<f32>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (meta, tensors): (AeMeta, Vec<(String, Tensor<f32>)>) = container::decode(AE_MAGIC, AE_VERSION, &bytes, path)?;
    let mut params = ParamSet::default();
    for (n, t) in tensors {
        params.push(n, t);
    }
    Autoencoder::from_params(meta.config, params, meta.latent_scale)
        .map_err(|e| CoreError::Format { path: path.to_path_buf(), detail: e.to_string() })
}
