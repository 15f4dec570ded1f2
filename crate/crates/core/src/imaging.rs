//! RGB images in [0,1], procedural scenes, low-light degradation, patch grids
//! and PSNR.
//!
//! Pixels are stored planar (channel, row, column) as f32. Luminance is
//! `0.299 R + 0.587 G + 0.114 B`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use gpp_tensor::{Scalar, Tensor};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageEncoder, ImageFormat, ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};

/// Smallest side accepted from disk or synthesis.
pub const MIN_SIDE: usize = 8;
pub const PSNR_CAP: f64 = 99.0;

pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Planar data of length `3·h·w`; every value must lie in [0,1].
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("pixel value {v} outside [0,1]"));
        }
        Ok(Self { height, width, data })
    }

    /// Builds from `f(channel, y, x)`, clamping into [0,1].
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn luminance(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| LUMA[0] * self.data[i] + LUMA[1] * self.data[n + i] + LUMA[2] * self.data[2 * n + i])
            .collect()
    }

    pub fn mean_luminance(&self) -> f64 {
        let y = self.luminance();
        y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return invalid(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            ));
        }
        Ok(Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// Extends the bottom and right edges by mirror reflection.
    pub fn pad_reflect(&self, height: usize, width: usize) -> Image {
        let reflect = |i: usize, n: usize| {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n { r } else { period - r }
        };
        Self::from_fn(height, width, |c, y, x| {
            self.get(c, reflect(y, self.height), reflect(x, self.width))
        })
    }

    /// 3×h×w tensor of the pixel values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![3, self.height, self.width], |i| T::lit(self.data[i] as f64))
    }

    /// Inverse of [`Image::to_tensor`], clipping into [0,1].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Image> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return invalid(format!("expected a 3xHxW tensor, got {s:?}"));
        }
        let (h, w) = (s[1], s[2]);
        let d = t.data();
        Ok(Self::from_fn(h, w, |c, y, x| d[(c * h + y) * w + x].as_f64() as f32))
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push((self.data[c * n + i] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        let n = height * width;
        if bytes.len() != 3 * n {
            return invalid(format!("expected {} bytes, got {}", 3 * n, bytes.len()));
        }
        Ok(Self::from_fn(height, width, |c, y, x| bytes[3 * (y * width + x) + c] as f32 / 255.0))
    }

    pub fn transformed(&self, t: Transform) -> Result<Image> {
        if self.height != self.width && t.quarter_turns % 2 == 1 {
            return invalid(format!(
                "cannot rotate a non-square {}x{} image by 90 degrees",
                self.height, self.width
            ));
        }
        let data = t.apply(&self.data, 3, self.height, self.width);
        let (h, w) = if t.quarter_turns % 2 == 1 {
            (self.width, self.height)
        } else {
            (self.height, self.width)
        };
        Ok(Self { height: h, width: w, data })
    }
}

/// Horizontal flip followed by clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub hflip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub const ALL: [Transform; 8] = [
        Transform { hflip: false, quarter_turns: 0 },
        Transform { hflip: false, quarter_turns: 1 },
        Transform { hflip: false, quarter_turns: 2 },
        Transform { hflip: false, quarter_turns: 3 },
        Transform { hflip: true, quarter_turns: 0 },
        Transform { hflip: true, quarter_turns: 1 },
        Transform { hflip: true, quarter_turns: 2 },
        Transform { hflip: true, quarter_turns: 3 },
    ];

    /// Applies the transform to planar `channels×h×w` data. Odd turns need h == w.
    pub fn apply<T: Copy>(&self, data: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
        let mut cur = data.to_vec();
        let (mut ch, mut cw) = (h, w);
        if self.hflip {
            for c in 0..channels {
                for y in 0..ch {
                    cur[(c * ch + y) * cw..(c * ch + y + 1) * cw].reverse();
                }
            }
        }
        for _ in 0..self.quarter_turns % 4 {
            // clockwise: out[y][x] = in[h-1-x][y], output is w×h
            let mut next = Vec::with_capacity(cur.len());
            for c in 0..channels {
                for y in 0..cw {
                    for x in 0..ch {
                        next.push(cur[(c * ch + (ch - 1 - x)) * cw + y]);
                    }
                }
            }
            cur = next;
            std::mem::swap(&mut ch, &mut cw);
        }
        cur
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let format_err = |detail: String| CoreError::Format { path: path.to_path_buf(), detail };
    let reader = ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?;
    let decoded = reader.decode().map_err(|e| format_err(e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(format_err(format!("image {w}x{h} smaller than {MIN_SIDE}x{MIN_SIDE}")));
    }
    Image::from_rgb8(h, w, rgb.as_raw())
}

/// Writes 8-bit PNG or binary PPM depending on the extension.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let buf = RgbImage::from_raw(image.width as u32, image.height as u32, image.to_rgb8())
        .expect("buffer length matches dimensions");
    let format_err = |e: image::ImageError| CoreError::Format { path: path.to_path_buf(), detail: e.to_string() };
    match ext.as_str() {
        "png" => buf.save_with_format(path, ImageFormat::Png).map_err(format_err),
        "ppm" => {
            let file = fs::File::create(path).map_err(io_err(path))?;
            PnmEncoder::new(BufWriter::new(file))
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(buf.as_raw(), buf.width(), buf.height(), image::ExtendedColorType::Rgb8)
                .map_err(format_err)
        }
        _ => invalid(format!("{}: unsupported image extension {ext:?}", path.display())),
    }
}

// ---- synthesis -------------------------------------------------------------------

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise on a `cells×cells` lattice, smoothly interpolated, in [-1,1].
fn value_noise(rng: &mut ChaCha8Rng, cells: usize, size: usize) -> Vec<f32> {
    let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = (y as f32 + 0.5) / size as f32 * cells as f32;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..size {
            let fx = (x as f32 + 0.5) / size as f32 * cells as f32;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

enum Shape {
    Rect { cx: f32, cy: f32, hw: f32, hh: f32 },
    Disc { cx: f32, cy: f32, r: f32 },
}

impl Shape {
    /// Signed distance in pixels, negative inside.
    fn distance(&self, x: f32, y: f32) -> f32 {
        match *self {
            Shape::Rect { cx, cy, hw, hh } => {
                let dx = (x - cx).abs() - hw;
                let dy = (y - cy).abs() - hh;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
            Shape::Disc { cx, cy, r } => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r,
        }
    }
}

/// Deterministic square scene: a colour gradient, two octaves of value noise
/// and 2 to 6 solid or outlined shapes.
pub fn synth_scene(seed: u64, size: usize) -> Result<Image> {
    if size < 16 {
        return invalid(format!("scene size {size} below 16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let c0: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    let theta: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());

    let cells = [3usize, 4, 6][rng.random_range(0..3)];
    let coarse = value_noise(&mut rng, cells, size);
    let fine = value_noise(&mut rng, cells * 2, size);
    let amp: f32 = rng.random_range(0.06..0.16);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));

    let n_shapes = rng.random_range(2..=6);
    let thickness = (s / 24.0).max(1.0);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let cx = rng.random_range(0.1..0.9) * s;
        let cy = rng.random_range(0.1..0.9) * s;
        let shape = if rng.random_bool(0.5) {
            Shape::Rect {
                cx,
                cy,
                hw: rng.random_range(0.06..0.25) * s,
                hh: rng.random_range(0.06..0.25) * s,
            }
        } else {
            Shape::Disc { cx, cy, r: rng.random_range(0.06..0.25) * s }
        };
        let colour: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let outline = rng.random_bool(0.35);
        shapes.push((shape, colour, outline));
    }

    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = (((px / s - 0.5) * dx + (py / s - 0.5) * dy) * std::f32::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let i = y * size + x;
            let texture = amp * (coarse[i] + 0.5 * fine[i]);
            let mut rgb: [f32; 3] = std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t + texture * tint[c]);
            for (shape, colour, outline) in &shapes {
                let d = shape.distance(px, py);
                let inside = if *outline { d.abs() <= thickness * 0.5 } else { d <= 0.0 };
                if inside {
                    rgb = std::array::from_fn(|c| colour[c] + 0.5 * texture);
                }
            }
            for c in 0..3 {
                data[c * size * size + i] = rgb[c].clamp(0.0, 1.0);
            }
        }
    }
    Image::new(size, size, data)
}

// ---- degradation ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub gamma: f64,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        if !(1.0..=4.0).contains(&self.gamma) {
            return invalid(format!("gamma {} outside [1,4]", self.gamma));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return invalid(format!("scale {} outside (0,1]", self.scale));
        }
        if !(0.0..=0.1).contains(&self.noise_sigma) {
            return invalid(format!("noise sigma {} outside [0,0.1]", self.noise_sigma));
        }
        Ok(())
    }

    /// Random parameters used for generated datasets.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            gamma: rng.random_range(1.2..2.8),
            scale: rng.random_range(0.15..0.6),
            noise_sigma: rng.random_range(0.0..0.03),
        }
    }
}

/// `clip(nl^gamma · scale + N(0, sigma²), 0, 1)` per channel.
pub fn degrade(nl: &Image, gamma: f64, scale: f64, noise_sigma: f64, seed: u64) -> Result<Image> {
    Degradation { gamma, scale, noise_sigma }.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = nl
        .data
        .iter()
        .map(|&v| {
            let mut out = (v as f64).powf(gamma) * scale;
            if noise_sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                out += noise_sigma * z;
            }
            out.clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(nl.height, nl.width, data)
}

// ---- patches and metrics -------------------------------------------------------------

/// Region `(top, left, height, width)` left after centre-cropping to a multiple of `grid`.
pub fn grid_crop(height: usize, width: usize, grid: usize) -> (usize, usize, usize, usize) {
    let (rh, rw) = (height % grid, width % grid);
    (rh / 2, rw / 2, height - rh, width - rw)
}

/// Row-major `grid²` patches tiling the centre-cropped image.
pub fn patchify(image: &Image, grid: usize) -> Result<Vec<Image>> {
    if grid == 0 {
        return invalid("grid must be at least 1");
    }
    if image.height < grid || image.width < grid {
        return invalid(format!("{}x{} image cannot hold a {grid}x{grid} grid", image.height, image.width));
    }
    let (top, left, h, w) = grid_crop(image.height, image.width, grid);
    let (ph, pw) = (h / grid, w / grid);
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            out.push(image.crop(top + gy * ph, left + gx * pw, ph, pw)?);
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] on the cropped region.
pub fn reassemble(patches: &[Image], grid: usize) -> Result<Image> {
    if grid == 0 || patches.len() != grid * grid {
        return invalid(format!("expected {} patches, got {}", grid * grid, patches.len()));
    }
    let (ph, pw) = (patches[0].height, patches[0].width);
    if patches.iter().any(|p| p.height != ph || p.width != pw) {
        return invalid("patches differ in size");
    }
    Ok(Image::from_fn(ph * grid, pw * grid, |c, y, x| {
        patches[(y / ph) * grid + x / pw].get(c, y % ph, x % pw)
    }))
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return invalid(format!(
            "size mismatch {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        ));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak-1 PSNR in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

// ---- paired datasets ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub nl: Image,
    pub ll: Image,
    pub seed: u64,
    pub degradation: Degradation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairMeta {
    pub seed: u64,
    pub size: [usize; 2],
    #[serde(flatten)]
    pub degradation: Degradation,
}

/// Scene `seed`, degraded with parameters drawn from a stream of the same seed.
pub fn make_pair(seed: u64, size: usize) -> Result<ImagePair> {
    let nl = synth_scene(seed, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let degradation = Degradation::sample(&mut rng);
    let noise_seed: u64 = rng.random();
    let ll = degrade(&nl, degradation.gamma, degradation.scale, degradation.noise_sigma, noise_seed)?;
    Ok(ImagePair { nl, ll, seed, degradation })
}

pub fn pair_dir(root: &Path, seed: u64) -> PathBuf {
    root.join("pairs").join(seed.to_string())
}

pub fn write_pair(root: &Path, pair: &ImagePair) -> Result<PathBuf> {
    let dir = pair_dir(root, pair.seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    save_image(&pair.nl, dir.join("nl.png"))?;
    save_image(&pair.ll, dir.join("ll.png"))?;
    let meta = PairMeta {
        seed: pair.seed,
        size: [pair.nl.height, pair.nl.width],
        degradation: pair.degradation,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(dir)
}

pub fn read_pair(dir: &Path) -> Result<ImagePair> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: PairMeta = serde_json::from_str(&text).map_err(|e| CoreError::Format {
        path: meta_path.clone(),
        detail: e.to_string(),
    })?;
    let nl = load_image(dir.join("nl.png"))?;
    let ll = load_image(dir.join("ll.png"))?;
    if nl.height != ll.height || nl.width != ll.width {
        return Err(CoreError::Format { path: dir.to_path_buf(), detail: "nl and ll sizes differ".into() });
    }
    Ok(ImagePair { nl, ll, seed: meta.seed, degradation: meta.degradation })
}

/// Every pair under `root/pairs`, ordered by seed.
pub fn load_dataset(root: &Path) -> Result<Vec<ImagePair>> {
    let pairs = root.join("pairs");
    let mut seeds = Vec::new();
    for entry in fs::read_dir(&pairs).map_err(io_err(&pairs))? {
        let entry = entry.map_err(io_err(&pairs))?;
        if let Some(seed) = entry.file_name().to_str().and_then(|s| s.parse::<u64>().ok()) {
            seeds.push(seed);
        }
    }
    seeds.sort_unstable();
    seeds.iter().map(|&s| read_pair(&pair_dir(root, s))).collect()
}
