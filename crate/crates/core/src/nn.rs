//! Parameter sourcing and small layer helpers shared by every network.
//!
//! Network code is written once against [`ParamSource`]. Running it with an
//! [`Initializer`] creates the parameters; running it with a
//! [`nlos_tensor::Binder`] places existing ones on a graph.

use std::cell::RefCell;

use nlos_tensor::{Array, Binder, Conv2dSpec, Graph, ParamSet, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Normal(f64),
    Zeros,
    Ones,
    /// First half of a vector at one value, second half at another.
    Halves(f64, f64),
    /// Unit Gaussian rows, each scaled to unit L2 norm.
    UnitRows,
}

pub trait ParamSource<'g, T: Scalar> {
    fn graph(&self) -> &'g Graph<T>;
    fn param(&self, name: &str, shape: &[usize], init: Init) -> Var<'g, T>;
}

impl<'g, T: Scalar> ParamSource<'g, T> for Binder<'g, '_, T> {
    fn graph(&self) -> &'g Graph<T> {
        Binder::graph(self)
    }

    fn param(&self, name: &str, shape: &[usize], _init: Init) -> Var<'g, T> {
        let v = self.get(name);
        assert_eq!(v.shape(), shape, "parameter `{name}` has an unexpected shape");
        v
    }
}

/// Creates parameters on first use; each draws from an RNG keyed by
/// `(seed, name)` so creation order never matters.
pub struct Initializer<'g, T: Scalar> {
    graph: &'g Graph<T>,
    seed: u64,
    params: RefCell<ParamSet<T>>,
}

impl<'g, T: Scalar> Initializer<'g, T> {
    pub fn new(graph: &'g Graph<T>, seed: u64) -> Self {
        Self {
            graph,
            seed,
            params: RefCell::new(ParamSet::new()),
        }
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params.into_inner()
    }
}

pub fn init_array<T: Scalar>(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Array<T> {
    match init {
        Init::He { fan_in } => Array::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
        Init::Normal(std) => Array::randn(shape, std, rng),
        Init::Zeros => Array::zeros(shape),
        Init::Ones => Array::full(shape, T::one()),
        Init::Halves(a, b) => {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| T::lit(if i < n / 2 { a } else { b })).collect();
            Array::from_vec(shape, data).expect("init shape")
        }
        Init::UnitRows => {
            let mut a: Array<T> = Array::randn(shape, 1.0, rng);
            normalize_rows(&mut a);
            a
        }
    }
}

/// Scale every row of a `[K, D]` array to unit L2 norm (rows of norm zero are left as is).
pub fn normalize_rows<T: Scalar>(a: &mut Array<T>) {
    let d = *a.shape().last().expect("rows need a trailing axis");
    for row in a.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if n > T::zero() {
            for v in row {
                *v /= n;
            }
        }
    }
}

impl<'g, T: Scalar> ParamSource<'g, T> for Initializer<'g, T> {
    fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    fn param(&self, name: &str, shape: &[usize], init: Init) -> Var<'g, T> {
        let mut params = self.params.borrow_mut();
        if let Some(existing) = params.get(name) {
            assert_eq!(existing.shape(), shape, "parameter `{name}` created twice with different shapes");
            return self.graph.constant(existing.clone());
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let value = init_array(shape, init, &mut rng);
        params.insert(name, value.clone());
        self.graph.constant(value)
    }
}

pub const LEAK: f64 = 0.2;

pub fn lrelu<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    x.leaky_relu(T::lit(LEAK))
}

/// `k x k` convolution with bias, `same` padding, given stride.
pub fn conv<'g, T: Scalar>(
    p: &impl ParamSource<'g, T>,
    name: &str,
    x: Var<'g, T>,
    cout: usize,
    k: usize,
    stride: usize,
) -> Var<'g, T> {
    let cin = x.shape()[1];
    let w = p.param(&format!("{name}.w"), &[cout, cin, k, k], Init::He { fan_in: cin * k * k });
    let b = p.param(&format!("{name}.b"), &[cout], Init::Zeros);
    x.conv2d(w, Some(b), Conv2dSpec::new(stride, k / 2))
}

/// Convolution with explicit weight init and bias init.
pub fn conv_init<'g, T: Scalar>(
    p: &impl ParamSource<'g, T>,
    name: &str,
    x: Var<'g, T>,
    cout: usize,
    k: usize,
    weight: Init,
    bias: Var<'g, T>,
) -> Var<'g, T> {
    let cin = x.shape()[1];
    let w = p.param(&format!("{name}.w"), &[cout, cin, k, k], weight);
    x.conv2d(w, Some(bias), Conv2dSpec::same(k))
}

/// `[N, D_in] -> [N, D_out]` affine map.
pub fn linear<'g, T: Scalar>(p: &impl ParamSource<'g, T>, name: &str, x: Var<'g, T>, dout: usize) -> Var<'g, T> {
    let din = x.shape()[1];
    let w = p.param(&format!("{name}.w"), &[din, dout], Init::Normal((1.0 / din as f64).sqrt()));
    let b = p.param(&format!("{name}.b"), &[dout], Init::Zeros);
    x.matmul(w).add_row_bias(b)
}

/// Resize `x` to `(h, w)` unless it already has that size.
pub fn fit<'g, T: Scalar>(x: Var<'g, T>, h: usize, w: usize) -> Var<'g, T> {
    let s = x.shape();
    if (s[2], s[3]) == (h, w) {
        x
    } else if (s[2] * 2, s[3] * 2) == (h, w) {
        x.upsample2()
    } else {
        x.resize_nearest(h, w)
    }
}
