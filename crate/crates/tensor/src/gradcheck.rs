//! Central-difference verification of tape gradients (f64 only).

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Lower bound on the relative-error denominator. Without it, coordinates whose
/// true derivative is zero compare rounding noise against rounding noise.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs() + 1e-12).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `per_tensor` coordinates of every input, chosen with `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, xs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::Usage("gradcheck function must be scalar-valued".into()));
    }
    Ok(g.value(out).item())
}

/// Compares tape gradients of the scalar function `f` against central
/// differences with step `h` for every input tensor.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor<f64>], h: f64, coords: Coords) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
        })
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        let n = x.numel();
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_tensor, seed } => {
                if per_tensor >= n {
                    (0..n).collect()
                } else {
                    let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9E37_79B9));
                    let mut v = sample(&mut rng, n, per_tensor).into_vec();
                    v.sort_unstable();
                    v
                }
            }
        };
        for i in picks {
            let orig = x.data()[i];
            probe[ti].data_mut()[i] = orig + h;
            let plus = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[i] = orig - h;
            let minus = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[ti].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((ti, i));
                }
            }
        }
    }
    Ok(report)
}

/// Single-input form: max relative error over all coordinates of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = finite_diff_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h, Coords::All)?;
    Ok(report.max_rel_err)
}

/// Per-op gradient checks on randomised small shapes, shared by the test
/// suite and the command-line gate.
pub mod suite {
    use rand::{Rng, SeedableRng};
    use rand::rngs::StdRng as SmallRng;

    use super::{finite_diff_check_many, Coords, DEFAULT_STEP};
    use crate::error::Result;
    use crate::graph::{Graph, Var};
    use crate::tensor::Tensor;

    type Build = fn(&mut Graph<f64>, &[Var], &mut SmallRng) -> Result<Var>;

    struct Case {
        name: &'static str,
        shapes: fn(&mut SmallRng) -> Vec<Vec<usize>>,
        build: Build,
    }

    fn dim(rng: &mut SmallRng) -> usize {
        rng.random_range(1..=4)
    }

    fn pair(rng: &mut SmallRng) -> Vec<Vec<usize>> {
        let s = vec![dim(rng), dim(rng) + 1];
        vec![s.clone(), s]
    }

    fn single(rng: &mut SmallRng) -> Vec<Vec<usize>> {
        vec![vec![dim(rng), dim(rng) + 1]]
    }

    fn image(rng: &mut SmallRng) -> Vec<Vec<usize>> {
        vec![vec![dim(rng), dim(rng) + 2, dim(rng) + 2]]
    }

    /// Scalarises `y` with fixed random weights so no gradient is trivially uniform.
    fn weigh(g: &mut Graph<f64>, y: Var, rng: &mut SmallRng) -> Result<Var> {
        let w = Tensor::from_fn(g.shape(y).to_vec(), |_| rng.random_range(-1.0..1.0));
        let wv = g.constant(w);
        let p = g.mul(y, wv)?;
        g.sum(p)
    }

    fn cases() -> Vec<Case> {
        vec![
            Case { name: "add", shapes: pair, build: |g, v, r| { let y = g.add(v[0], v[1])?; weigh(g, y, r) } },
            Case { name: "sub", shapes: pair, build: |g, v, r| { let y = g.sub(v[0], v[1])?; weigh(g, y, r) } },
            Case { name: "mul", shapes: pair, build: |g, v, r| { let y = g.mul(v[0], v[1])?; weigh(g, y, r) } },
            Case {
                name: "div",
                shapes: pair,
                build: |g, v, r| {
                    let b = g.exp(v[1])?;
                    let y = g.div(v[0], b)?;
                    weigh(g, y, r)
                },
            },
            Case {
                name: "broadcast",
                shapes: |r| { let (a, b) = (dim(r), dim(r) + 1); vec![vec![a, b], vec![b]] },
                build: |g, v, r| { let y = g.add(v[0], v[1])?; weigh(g, y, r) },
            },
            Case { name: "add_scalar", shapes: single, build: |g, v, r| { let y = g.add_scalar(v[0], 0.7)?; weigh(g, y, r) } },
            Case { name: "mul_scalar", shapes: single, build: |g, v, r| { let y = g.mul_scalar(v[0], -1.3)?; weigh(g, y, r) } },
            Case { name: "exp", shapes: single, build: |g, v, r| { let y = g.exp(v[0])?; weigh(g, y, r) } },
            Case { name: "tanh", shapes: single, build: |g, v, r| { let y = g.tanh(v[0])?; weigh(g, y, r) } },
            Case { name: "gelu", shapes: single, build: |g, v, r| { let y = g.gelu(v[0])?; weigh(g, y, r) } },
            Case {
                name: "sqrt",
                shapes: single,
                build: |g, v, r| {
                    let e = g.exp(v[0])?;
                    let y = g.sqrt(e)?;
                    weigh(g, y, r)
                },
            },
            Case {
                name: "matmul",
                shapes: |r| { let (m, k, n) = (dim(r), dim(r), dim(r)); vec![vec![m, k], vec![k, n]] },
                build: |g, v, r| { let y = g.matmul(v[0], v[1])?; weigh(g, y, r) },
            },
            Case { name: "transpose", shapes: single, build: |g, v, r| { let y = g.transpose(v[0])?; weigh(g, y, r) } },
            Case {
                name: "reshape",
                shapes: single,
                build: |g, v, r| {
                    let n: usize = g.shape(v[0]).iter().product();
                    let y = g.reshape(v[0], &[n])?;
                    weigh(g, y, r)
                },
            },
            Case { name: "sum", shapes: single, build: |g, v, _| { let e = g.exp(v[0])?; g.sum(e) } },
            Case { name: "mean", shapes: single, build: |g, v, _| { let e = g.tanh(v[0])?; g.mean(e) } },
            Case { name: "sum_axis", shapes: image, build: |g, v, r| { let y = g.sum_axis(v[0], 1)?; weigh(g, y, r) } },
            Case { name: "mean_axis", shapes: image, build: |g, v, r| { let y = g.mean_axis(v[0], 2)?; weigh(g, y, r) } },
            Case { name: "var_axis", shapes: image, build: |g, v, r| { let y = g.var_axis(v[0], 2)?; weigh(g, y, r) } },
            Case { name: "softmax", shapes: image, build: |g, v, r| { let y = g.softmax(v[0], 1)?; weigh(g, y, r) } },
            Case {
                name: "layer_norm",
                shapes: |r| vec![vec![dim(r), dim(r) + 1]],
                build: |g, v, r| { let y = g.layer_norm(v[0])?; weigh(g, y, r) },
            },
            Case { name: "l2_normalize", shapes: image, build: |g, v, r| { let y = g.l2_normalize(v[0], 1)?; weigh(g, y, r) } },
            Case { name: "concat", shapes: pair, build: |g, v, r| { let y = g.concat(&[v[0], v[1]], 1)?; weigh(g, y, r) } },
            Case {
                name: "slice",
                shapes: single,
                build: |g, v, r| {
                    let n = g.shape(v[0])[1];
                    let y = g.slice(v[0], 1, 1, n)?;
                    weigh(g, y, r)
                },
            },
            Case {
                name: "conv2d",
                shapes: |r| {
                    let (ci, co) = (dim(r), dim(r));
                    vec![vec![ci, dim(r) + 3, dim(r) + 3], vec![co, ci, 3, 3]]
                },
                build: |g, v, r| {
                    let stride = r.random_range(1..=2);
                    let y = g.conv2d(v[0], v[1], stride, 1)?;
                    weigh(g, y, r)
                },
            },
            Case {
                name: "bilinear_resize",
                shapes: image,
                build: |g, v, r| {
                    let (oh, ow) = (r.random_range(1..=7), r.random_range(1..=7));
                    let y = g.bilinear_resize(v[0], oh, ow)?;
                    weigh(g, y, r)
                },
            },
            Case { name: "upsample_nearest", shapes: image, build: |g, v, r| { let y = g.upsample_nearest(v[0], 2)?; weigh(g, y, r) } },
            Case {
                name: "gather_rows",
                shapes: |r| vec![vec![dim(r) + 2, dim(r)]],
                build: |g, v, r| {
                    let rows = g.shape(v[0])[0];
                    let idx: Vec<usize> = (0..4).map(|_| r.random_range(0..rows)).collect();
                    let y = g.gather_rows(v[0], &idx)?;
                    weigh(g, y, r)
                },
            },
        ]
    }

    pub fn op_names() -> Vec<&'static str> {
        cases().iter().map(|c| c.name).collect()
    }

    /// Worst relative error of each op over `seeds` randomised instances.
    pub fn run(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
        let mut out = Vec::new();
        for case in cases() {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let mut rng = SmallRng::seed_from_u64(seed.wrapping_mul(7919) + 1);
                let shapes = (case.shapes)(&mut rng);
                let xs: Vec<Tensor<f64>> = shapes
                    .into_iter()
                    .map(|s| Tensor::from_fn(s, |_| rng.random_range(-2.0..2.0)))
                    .collect();
                let build_seed: u64 = rng.random();
                let report = finite_diff_check_many(
                    |g, v| {
                        let mut r = SmallRng::seed_from_u64(build_seed);
                        (case.build)(g, v, &mut r)
                    },
                    &xs,
                    DEFAULT_STEP,
                    Coords::All,
                )?;
                worst = worst.max(report.max_rel_err);
            }
            out.push((case.name, worst));
        }
        Ok(out)
    }
}
