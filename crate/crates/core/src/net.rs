//! The prior-conditioned noise predictor.
//!
//! Latents `d×h×w` become `N×c` token matrices (N = h·w, row-major positions).
//! Each block concatenates the projected low-light tokens, runs two channel
//! attention branches and a feed-forward layer at width 2w under prior
//! modulated layer norms, then keeps the first w channels.

use gpp_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{EpsModel, DEFAULT_T};
use crate::error::{CoreError, Result};
use crate::params::{Init, Layout, ParamSet};
use crate::priors::PerceptualPrior;

pub const TEMB_DIM: usize = 64;
pub const MOD_HIDDEN: usize = 128;
const COND_DIM: usize = 3 + TEMB_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalInject {
    GppLn,
    AddToLatent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Full,
    Variant1,
    Variant3,
    Variant4,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Ablation::Full),
            "variant1" => Ok(Ablation::Variant1),
            "variant3" => Ok(Ablation::Variant3),
            "variant4" => Ok(Ablation::Variant4),
            _ => Err(format!("unknown ablation {s:?} (full|variant1|variant3|variant4)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GppConfig {
    pub d: usize,
    pub w: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub grid: usize,
    pub use_global_prior: bool,
    pub use_local_prior: bool,
    pub global_inject: GlobalInject,
    /// Largest timestep the embedding table covers.
    pub t_max: usize,
}

impl Default for GppConfig {
    fn default() -> Self {
        Self {
            d: 4,
            w: 64,
            blocks: 4,
            heads: 4,
            ffn_mult: 2,
            grid: 4,
            use_global_prior: true,
            use_local_prior: true,
            global_inject: GlobalInject::GppLn,
            t_max: DEFAULT_T,
        }
    }
}

impl GppConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.d == 0 || self.w == 0 || self.blocks == 0 || self.heads == 0 || self.ffn_mult == 0 || self.grid == 0 {
            return bad(format!("all network sizes must be positive: {self:?}"));
        }
        if self.w % self.heads != 0 || (2 * self.w) % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.w, self.heads));
        }
        Ok(())
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.use_global_prior = true;
        self.use_local_prior = true;
        self.global_inject = GlobalInject::GppLn;
        match a {
            Ablation::Full => {}
            Ablation::Variant1 => self.use_local_prior = false,
            Ablation::Variant3 => {
                self.use_global_prior = false;
                self.use_local_prior = false;
            }
            Ablation::Variant4 => self.global_inject = GlobalInject::AddToLatent,
        }
        self
    }

    /// Whether a forward pass reads any prior value.
    pub fn uses_prior(&self) -> bool {
        self.use_global_prior || self.use_local_prior
    }
}

/// Sinusoidal embedding: 32 sines then 32 cosines, frequencies geometric from 1 to 1e-4.
pub fn t_embed(t: usize) -> [f64; TEMB_DIM] {
    let half = TEMB_DIM / 2;
    let mut out = [0.0; TEMB_DIM];
    for k in 0..half {
        let freq = 1e-4f64.powf(k as f64 / (half - 1) as f64);
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

pub fn t_embed_table<T: Scalar>(t_max: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity((t_max + 1) * TEMB_DIM);
    for t in 0..=t_max {
        data.extend(t_embed(t).iter().map(|&v| T::lit(v)));
    }
    Tensor::new(vec![t_max + 1, TEMB_DIM], data).expect("table shape")
}

// ---- building blocks on bound variables ----------------------------------------------------

/// Modulation MLP of one prior-conditioned layer norm.
#[derive(Clone, Copy, Debug)]
pub struct LnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    /// One temperature per head.
    pub tau: Var,
    /// Gate projection `3×c`, present on the prior-guided branch only.
    pub wm: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1: LnVars,
    pub ln2: LnVars,
    pub msa: AttnVars,
    pub lpp: AttnVars,
    pub s_msa: Var,
    pub s_lpp: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// `[S ‖ temb]` as a 1×67 row.
pub fn conditioning<T: Scalar>(g: &mut Graph<T>, s_vec: [f64; 3], temb: Var) -> Result<Var> {
    let s = g.constant(Tensor::from_fn(vec![1, 3], |i| T::lit(s_vec[i])));
    let temb = g.reshape(temb, &[1, TEMB_DIM])?;
    Ok(g.concat(&[s, temb], 1)?)
}

/// `(1 + Δγ) ⊙ LN(x) + β` with `(Δγ, β)` from the modulation MLP of `cond`.
pub fn gpp_ln<T: Scalar>(g: &mut Graph<T>, x: Var, cond: Var, p: &LnVars) -> Result<Var> {
    let c = g.shape(x)[1];
    let h = g.linear(cond, p.w1, Some(p.b1))?;
    let h = g.gelu(h)?;
    let mo = g.linear(h, p.w2, Some(p.b2))?;
    if g.shape(mo) != [1, 2 * c] {
        return Err(CoreError::Config(format!("modulation width {:?} does not match {c} channels", g.shape(mo))));
    }
    let dgamma = g.slice(mo, 1, 0, c)?;
    let beta = g.slice(mo, 1, c, 2 * c)?;
    let gamma = g.add_scalar(dgamma, T::one())?;
    let n = g.layer_norm(x)?;
    let y = g.mul(n, gamma)?;
    Ok(g.add(y, beta)?)
}

/// Per-head channel attention on N×c queries, keys and values.
///
/// Returns the head outputs (before the output projection) and the p×p maps.
pub fn channel_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    tau: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let c = g.shape(q)[1];
    if heads == 0 || c % heads != 0 {
        return Err(CoreError::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    let p = c / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * p, (h + 1) * p);
        let qh = g.slice(q, 1, lo, hi)?;
        let kh = g.slice(k, 1, lo, hi)?;
        let vh = g.slice(v, 1, lo, hi)?;
        let qn = g.l2_normalize(qh, 0)?;
        let kn = g.l2_normalize(kh, 0)?;
        let qt = g.transpose(qn)?;
        let logits = g.matmul(qt, kn)?;
        let tau_h = g.slice(tau, 0, h, h + 1)?;
        let logits = g.mul(logits, tau_h)?;
        let a = g.softmax(logits, 1)?;
        let at = g.transpose(a)?;
        outs.push(g.matmul(vh, at)?);
        maps.push(a);
    }
    let out = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    Ok((out, maps))
}

pub fn channel_msa<T: Scalar>(g: &mut Graph<T>, x: Var, p: &AttnVars, heads: usize) -> Result<(Var, Vec<Var>)> {
    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(x, p.wk)?;
    let v = g.matmul(x, p.wv)?;
    let (o, maps) = channel_attention(g, q, k, v, p.tau, heads)?;
    Ok((g.matmul(o, p.wo)?, maps))
}

/// Channel attention whose keys and values see `x ⊙ (1 + tanh(m_up·W_m))`.
pub fn lpp_attn<T: Scalar>(g: &mut Graph<T>, x: Var, m_up: Var, p: &AttnVars, heads: usize) -> Result<(Var, Vec<Var>)> {
    let (nx, nm) = (g.shape(x)[0], g.shape(m_up)[0]);
    if nx != nm {
        return Err(gpp_tensor::TensorError::Dimension {
            op: "lpp_attn",
            detail: format!("{nx} tokens but {nm} prior rows"),
        }
        .into());
    }
    let wm = p.wm.ok_or_else(|| CoreError::Config("prior-guided attention needs a gate projection".into()))?;
    let gate = g.matmul(m_up, wm)?;
    let gate = g.tanh(gate)?;
    let gate = g.add_scalar(gate, T::one())?;
    let xg = g.mul(x, gate)?;
    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(xg, p.wk)?;
    let v = g.matmul(xg, p.wv)?;
    let (o, maps) = channel_attention(g, q, k, v, p.tau, heads)?;
    Ok((g.matmul(o, p.wo)?, maps))
}

/// `[m_up ‖ coords] · W_pe`.
pub fn pos_embed<T: Scalar>(g: &mut Graph<T>, m_up: Var, coords: Var, w_pe: Var) -> Result<Var> {
    let feat = g.concat(&[m_up, coords], 1)?;
    Ok(g.matmul(feat, w_pe)?)
}

/// Normalised `(x, y)` centres of an `h×w` grid, row-major.
pub fn grid_coords<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(vec![h * w, 2], |i| {
        let (n, axis) = (i / 2, i % 2);
        let v = if axis == 0 { ((n % w) as f64 + 0.5) / w as f64 } else { ((n / w) as f64 + 0.5) / h as f64 };
        T::lit(v)
    })
}

/// One block at width w; internal width 2w.
pub fn gpp_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    ll: Var,
    cond: Var,
    m_up: Var,
    p: &BlockVars,
    cfg: &GppConfig,
) -> Result<Var> {
    let w = g.shape(x)[1];
    let h = g.concat(&[x, ll], 1)?;
    let a = gpp_ln(g, h, cond, &p.ln1)?;
    let (msa, _) = channel_msa(g, a, &p.msa, cfg.heads)?;
    let msa = g.mul(msa, p.s_msa)?;
    let mut h = g.add(h, msa)?;
    if cfg.use_local_prior {
        let (lpp, _) = lpp_attn(g, a, m_up, &p.lpp, cfg.heads)?;
        let lpp = g.mul(lpp, p.s_lpp)?;
        h = g.add(h, lpp)?;
    }
    let f = gpp_ln(g, h, cond, &p.ln2)?;
    let f = g.linear(f, p.ffn_w1, Some(p.ffn_b1))?;
    let f = g.gelu(f)?;
    let f = g.linear(f, p.ffn_w2, Some(p.ffn_b2))?;
    let h = g.add(h, f)?;
    Ok(g.slice(h, 1, 0, w)?)
}

// ---- the full network ---------------------------------------------------------------------

#[derive(Clone, Debug)]
struct LnIdx([usize; 4]);

#[derive(Clone, Debug)]
struct AttnIdx {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    tau: usize,
    m: Option<usize>,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    ln1: LnIdx,
    ln2: LnIdx,
    msa: AttnIdx,
    lpp: AttnIdx,
    s_msa: usize,
    s_lpp: usize,
    ffn: [usize; 4],
}

#[derive(Clone, Debug)]
struct NetIdx {
    in_w: usize,
    in_b: usize,
    ll_w: usize,
    ll_b: usize,
    pe_w: usize,
    blocks: Vec<BlockIdx>,
    out_w: usize,
    out_b: usize,
}

fn ln_layout(l: &mut Layout, prefix: &str, c: usize) -> LnIdx {
    LnIdx([
        l.add(format!("{prefix}.w1"), &[COND_DIM, MOD_HIDDEN], Init::FanIn),
        l.add(format!("{prefix}.b1"), &[MOD_HIDDEN], Init::Zeros),
        l.add(format!("{prefix}.w2"), &[MOD_HIDDEN, 2 * c], Init::Zeros),
        l.add(format!("{prefix}.b2"), &[2 * c], Init::Zeros),
    ])
}

fn attn_layout(l: &mut Layout, prefix: &str, c: usize, heads: usize, gated: bool) -> AttnIdx {
    AttnIdx {
        q: l.add(format!("{prefix}.wq"), &[c, c], Init::FanIn),
        k: l.add(format!("{prefix}.wk"), &[c, c], Init::FanIn),
        v: l.add(format!("{prefix}.wv"), &[c, c], Init::FanIn),
        o: l.add(format!("{prefix}.wo"), &[c, c], Init::FanIn),
        tau: l.add(format!("{prefix}.tau"), &[heads], Init::Const(1.0)),
        m: gated.then(|| l.add(format!("{prefix}.wm"), &[3, c], Init::Zeros)),
    }
}

fn net_layout(cfg: &GppConfig) -> (Layout, NetIdx) {
    let mut l = Layout::default();
    let (d, w) = (cfg.d, cfg.w);
    let c = 2 * w;
    let in_w = l.add("in.w", &[d, w], Init::FanIn);
    let in_b = l.add("in.b", &[w], Init::Zeros);
    let ll_w = l.add("ll.w", &[d, w], Init::FanIn);
    let ll_b = l.add("ll.b", &[w], Init::Zeros);
    let pe_w = l.add("pe.w", &[5, w], Init::FanIn);
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let p = format!("block{b}");
        blocks.push(BlockIdx {
            ln1: ln_layout(&mut l, &format!("{p}.ln1"), c),
            ln2: ln_layout(&mut l, &format!("{p}.ln2"), c),
            msa: attn_layout(&mut l, &format!("{p}.msa"), c, cfg.heads, false),
            lpp: attn_layout(&mut l, &format!("{p}.lpp"), c, cfg.heads, true),
            s_msa: l.add(format!("{p}.s_msa"), &[1], Init::Const(1.0)),
            s_lpp: l.add(format!("{p}.s_lpp"), &[1], Init::Zeros),
            ffn: [
                l.add(format!("{p}.ffn.w1"), &[c, cfg.ffn_mult * c], Init::FanIn),
                l.add(format!("{p}.ffn.b1"), &[cfg.ffn_mult * c], Init::Zeros),
                l.add(format!("{p}.ffn.w2"), &[cfg.ffn_mult * c, c], Init::FanIn),
                l.add(format!("{p}.ffn.b2"), &[c], Init::Zeros),
            ],
        });
    }
    let out_w = l.add("out.w", &[w, d], Init::FanIn);
    let out_b = l.add("out.b", &[d], Init::Zeros);
    (l, NetIdx { in_w, in_b, ll_w, ll_b, pe_w, blocks, out_w, out_b })
}

#[derive(Clone, Debug)]
pub struct GppNet<T: Scalar> {
    pub config: GppConfig,
    pub params: ParamSet<T>,
    idx: NetIdx,
    table: Tensor<T>,
}

impl<T: Scalar> GppNet<T> {
    pub fn init<R: Rng + ?Sized>(config: GppConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, idx) = net_layout(&config);
        let params = layout.init(rng);
        let table = t_embed_table(config.t_max);
        Ok(Self { config, params, idx, table })
    }

    pub fn from_params(config: GppConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (layout, idx) = net_layout(&config);
        layout.check(&params)?;
        let table = t_embed_table(config.t_max);
        Ok(Self { config, params, idx, table })
    }

    pub fn cast<U: Scalar>(&self) -> GppNet<U> {
        GppNet::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    /// Bound variables of one block, for inspection and tests.
    pub fn block_vars(&self, vars: &[Var], b: usize) -> BlockVars {
        let bi = &self.idx.blocks[b];
        let ln = |i: &LnIdx| LnVars { w1: vars[i.0[0]], b1: vars[i.0[1]], w2: vars[i.0[2]], b2: vars[i.0[3]] };
        let at = |a: &AttnIdx| AttnVars {
            wq: vars[a.q],
            wk: vars[a.k],
            wv: vars[a.v],
            wo: vars[a.o],
            tau: vars[a.tau],
            wm: a.m.map(|m| vars[m]),
        };
        BlockVars {
            ln1: ln(&bi.ln1),
            ln2: ln(&bi.ln2),
            msa: at(&bi.msa),
            lpp: at(&bi.lpp),
            s_msa: vars[bi.s_msa],
            s_lpp: vars[bi.s_lpp],
            ffn_w1: vars[bi.ffn[0]],
            ffn_b1: vars[bi.ffn[1]],
            ffn_w2: vars[bi.ffn[2]],
            ffn_b2: vars[bi.ffn[3]],
        }
    }

    /// Prior map at token resolution, N×3.
    pub fn upsampled_map(&self, g: &mut Graph<T>, prior: &PerceptualPrior, h: usize, w: usize) -> Result<Var> {
        if !self.config.use_local_prior {
            return Ok(g.constant(Tensor::full(vec![h * w, 3], T::lit(0.5))));
        }
        if prior.grid != self.config.grid {
            return Err(CoreError::Config(format!(
                "prior grid {} does not match network grid {}",
                prior.grid, self.config.grid
            )));
        }
        let gsz = prior.grid;
        let m = g.constant(Tensor::from_fn(vec![3, gsz, gsz], |i| T::lit(prior.map[i])));
        let up = g.bilinear_resize(m, h, w)?;
        let flat = g.reshape(up, &[3, h * w])?;
        Ok(g.transpose(flat)?)
    }

    /// Noise prediction using parameters already bound as `vars`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        z_t: Var,
        t: usize,
        z_ll: Var,
        prior: &PerceptualPrior,
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(z_t).to_vec();
        if shape.len() != 3 || shape[0] != cfg.d || g.shape(z_ll) != shape.as_slice() {
            return Err(CoreError::Config(format!(
                "latents {:?} and {:?} do not match {} channels",
                shape,
                g.shape(z_ll),
                cfg.d
            )));
        }
        if t > cfg.t_max {
            return Err(CoreError::Validation(format!("timestep {t} beyond {}", cfg.t_max)));
        }
        let (h, w) = (shape[1], shape[2]);
        let n = h * w;
        let ix = &self.idx;

        let global_in_ln = cfg.use_global_prior && cfg.global_inject == GlobalInject::GppLn;
        let s_vec = if global_in_ln { prior.global } else { [0.5; 3] };
        let row = self.table.data()[t * TEMB_DIM..(t + 1) * TEMB_DIM].to_vec();
        let temb = g.constant(Tensor::new(vec![1, TEMB_DIM], row)?);
        let cond = conditioning(g, s_vec, temb)?;
        let m_up = self.upsampled_map(g, prior, h, w)?;

        let mut zt = z_t;
        if cfg.use_global_prior && cfg.global_inject == GlobalInject::AddToLatent {
            zt = g.add_scalar(zt, T::lit(prior.s_mean))?;
        }
        let zt = g.reshape(zt, &[cfg.d, n])?;
        let zt = g.transpose(zt)?;
        let zl = g.reshape(z_ll, &[cfg.d, n])?;
        let zl = g.transpose(zl)?;

        let coords = g.constant(grid_coords(h, w));
        let pe = pos_embed(g, m_up, coords, vars[ix.pe_w])?;
        let x = g.linear(zt, vars[ix.in_w], Some(vars[ix.in_b]))?;
        let mut x = g.add(x, pe)?;
        let ll = g.linear(zl, vars[ix.ll_w], Some(vars[ix.ll_b]))?;
        for b in 0..cfg.blocks {
            let bv = self.block_vars(vars, b);
            x = gpp_block(g, x, ll, cond, m_up, &bv, cfg)?;
        }
        let out = g.linear(x, vars[ix.out_w], Some(vars[ix.out_b]))?;
        let out = g.transpose(out)?;
        Ok(g.reshape(out, &shape)?)
    }

    /// Binds the parameters for training and returns a model view over them.
    pub fn bind<'a>(&'a self, g: &mut Graph<T>, trainable: bool) -> BoundNet<'a, T> {
        BoundNet { net: self, vars: self.params.bind(g, trainable) }
    }
}

pub struct BoundNet<'a, T: Scalar> {
    pub net: &'a GppNet<T>,
    pub vars: Vec<Var>,
}

impl<T: Scalar> EpsModel<T> for BoundNet<'_, T> {
    fn eps(&self, g: &mut Graph<T>, z_t: Var, t: usize, z_ll: Var, prior: &PerceptualPrior) -> Result<Var> {
        self.net.forward(g, &self.vars, z_t, t, z_ll, prior)
    }
}

/// Inference use: parameters are added to each graph as constants.
impl<T: Scalar> EpsModel<T> for GppNet<T> {
    fn eps(&self, g: &mut Graph<T>, z_t: Var, t: usize, z_ll: Var, prior: &PerceptualPrior) -> Result<Var> {
        let vars = self.params.bind(g, false);
        self.forward(g, &vars, z_t, t, z_ll, prior)
    }
}
