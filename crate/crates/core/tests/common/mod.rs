#![allow(dead_code)]

pub mod gradcases;

use std::collections::BTreeMap;
use std::path::Path;

use nlos_ltm::config::TrainConfig;
use nlos_ltm::image::ImageGrid;
use nlos_ltm::nn::{Init, Initializer, ParamSource};
use nlos_tensor::{analytic_gradients, check_gradients, compare_gradients, numeric_gradients, Array, GradCheck, Graph, Scalar, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameters looked up by name among graph variables.
pub struct VarSource<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> ParamSource<'g, T> for VarSource<'g, T> {
    fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    fn param(&self, name: &str, shape: &[usize], _init: Init) -> Var<'g, T> {
        let v = *self.vars.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
        assert_eq!(v.shape(), shape);
        v
    }
}

/// Explicit inputs followed by every parameter `f` creates, with the parameter names.
pub fn with_params<T, F>(inputs: &[Array<T>], seed: u64, f: &F) -> (Vec<Array<T>>, Vec<String>)
where
    T: Scalar,
    F: for<'g> Fn(&dyn ParamLookup<'g, T>, &[Var<'g, T>]) -> Var<'g, T>,
{
    let g = Graph::new();
    let init = Initializer::new(&g, seed);
    let xs: Vec<Var<'_, T>> = inputs.iter().map(|a| g.constant(a.clone())).collect();
    f(&InitLookup(&init), &xs);
    let params = init.into_params();
    let mut all = inputs.to_vec();
    all.extend(params.iter().map(|(_, a)| a.clone()));
    (all, params.names().map(String::from).collect())
}

/// `f` as a function of inputs followed by named parameters.
fn flat<'a, T, F>(
    names: &'a [String],
    n: usize,
    f: &'a F,
) -> impl for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Var<'g, T> + 'a
where
    T: Scalar,
    F: for<'g> Fn(&dyn ParamLookup<'g, T>, &[Var<'g, T>]) -> Var<'g, T>,
{
    move |g, vars| {
        let src = VarSource {
            graph: g,
            vars: names.iter().cloned().zip(vars[n..].iter().copied()).collect(),
        };
        f(&VarLookup(&src), &vars[..n])
    }
}

/// Gradient check of `f(params, inputs)` over both the explicit inputs and
/// every parameter `f` creates.
pub fn check_with_params<T, F>(inputs: &[Array<T>], h: f64, seed: u64, f: F) -> GradCheck
where
    T: Scalar,
    F: for<'g> Fn(&dyn ParamLookup<'g, T>, &[Var<'g, T>]) -> Var<'g, T>,
{
    let (all, names) = with_params(inputs, seed, &f);
    check_gradients(&all, h, flat(&names, inputs.len(), &f))
}

/// Single-precision gradients of `f32_fn` against double-precision central
/// differences of the same function `f64_fn` at the same point.
pub fn check_single_against_double<F, G>(inputs: &[Array<f32>], seed: u64, f32_fn: F, f64_fn: G) -> GradCheck
where
    F: for<'g> Fn(&dyn ParamLookup<'g, f32>, &[Var<'g, f32>]) -> Var<'g, f32>,
    G: for<'g> Fn(&dyn ParamLookup<'g, f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let n = inputs.len();
    let (all, names) = with_params(inputs, seed, &f32_fn);
    let analytic = analytic_gradients(&all, flat(&names, n, &f32_fn));
    let all64: Vec<Array<f64>> = all.iter().map(Array::cast).collect();
    let numeric = numeric_gradients(&all64, 1e-6, flat(&names, n, &f64_fn));
    compare_gradients(&analytic, &numeric)
}

/// Object-safe view of a parameter source for closures.
pub trait ParamLookup<'g, T: Scalar> {
    fn source_graph(&self) -> &'g Graph<T>;
    fn lookup(&self, name: &str, shape: &[usize], init: Init) -> Var<'g, T>;
}

struct InitLookup<'a, 'g, T: Scalar>(&'a Initializer<'g, T>);
struct VarLookup<'a, 'g, T: Scalar>(&'a VarSource<'g, T>);

impl<'g, T: Scalar> ParamLookup<'g, T> for InitLookup<'_, 'g, T> {
    fn source_graph(&self) -> &'g Graph<T> {
        self.0.graph()
    }
    fn lookup(&self, name: &str, shape: &[usize], init: Init) -> Var<'g, T> {
        self.0.param(name, shape, init)
    }
}

impl<'g, T: Scalar> ParamLookup<'g, T> for VarLookup<'_, 'g, T> {
    fn source_graph(&self) -> &'g Graph<T> {
        self.0.graph()
    }
    fn lookup(&self, name: &str, shape: &[usize], init: Init) -> Var<'g, T> {
        self.0.param(name, shape, init)
    }
}

impl<'g, T: Scalar> ParamSource<'g, T> for &dyn ParamLookup<'g, T> {
    fn graph(&self) -> &'g Graph<T> {
        self.source_graph()
    }
    fn param(&self, name: &str, shape: &[usize], init: Init) -> Var<'g, T> {
        self.lookup(name, shape, init)
    }
}

pub fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Array<T> {
    Array::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Fixed random projection so every output element matters.
pub fn weighted_sum<'g, T: Scalar>(x: Var<'g, T>, seed: u64) -> Var<'g, T> {
    let w = x.graph().constant(randn(&x.shape(), seed));
    x.mul(w).sum()
}

pub fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> ImageGrid<f64> {
    let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
    ImageGrid::from_planar(h, w, c, data).unwrap()
}

/// Scalar-loop PSNR with peak 1.
pub fn naive_psnr(a: &ImageGrid<f64>, b: &ImageGrid<f64>) -> f64 {
    let (h, w, c) = a.dims();
    let mut se = 0.0;
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let d = a.get(y, x, k) - b.get(y, x, k);
                se += d * d;
            }
        }
    }
    let mse = se / (h * w * c) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Direct-loop SSIM on the channel-mean image: 11x11 Gaussian window
/// (sigma 1.5), valid positions only, K1 = 0.01, K2 = 0.03, range 1.
pub fn naive_ssim(a: &ImageGrid<f64>, b: &ImageGrid<f64>) -> f64 {
    let (h, w, c) = a.dims();
    let gray = |im: &ImageGrid<f64>, y: usize, x: usize| (0..c).map(|k| im.get(y, x, k)).sum::<f64>() / c as f64;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut n = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = win[i][j] / total;
                    let (p, q) = (gray(a, y0 + i, x0 + j), gray(b, y0 + i, x0 + j));
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    sum / n as f64
}

/// Small, fast configuration over a dataset rooted at `dir`.
pub fn tiny_config(dir: &Path) -> TrainConfig {
    TrainConfig {
        manifest: dir.join("data/manifest.json"),
        out_dir: dir.join("runs"),
        sim_root: dir.join("data"),
        seed: 5,
        sim_train: 6,
        sim_test: 2,
        sim_conditions: vec!["70;1;dark;wall;occ".into(), "100;2;daylight;whiteboard;occ".into()],
        sim_hidden_res: 12,
        sim_wall_res: 12,
        stages: 2,
        base_width: 4,
        latent_channels: 4,
        code_dim: 8,
        cond_encoder_width: 4,
        disc_width: 4,
        perceptual_width: 2,
        batch_size: 4,
        ae_epochs: 2,
        joint_epochs: 2,
        ae_lr_init: 1e-3,
        joint_lr_init: 1e-3,
        ..TrainConfig::default()
    }
}
