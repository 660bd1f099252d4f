//! Elementwise arithmetic, activations, reductions and shape ops.
//!
//! Shape mismatches are programming errors and panic with the offending
//! shapes; callers validate user-supplied shapes before building graphs.

use std::rc::Rc;

use crate::{Array, Scalar, Var};

fn assert_same(a: &Array<impl Scalar>, b: &Array<impl Scalar>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'g, T: Scalar> Var<'g, T> {
    fn unary(
        self,
        value: Array<T>,
        back: impl Fn(&Array<T>) -> Array<T> + 'static,
    ) -> Var<'g, T> {
        self.graph.push(
            value,
            &[self.id],
            Box::new(move |g, mask| vec![mask[0].then(|| back(g))]),
        )
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_same(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph.push(
            out,
            &[self.id, other.id],
            Box::new(|g, mask| vec![mask[0].then(|| g.clone()), mask[1].then(|| g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_same(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph.push(
            out,
            &[self.id, other.id],
            Box::new(|g, mask| {
                vec![
                    mask[0].then(|| g.clone()),
                    mask[1].then(|| g.map(|v| -v)),
                ]
            }),
        )
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_same(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.push(
            out,
            &[self.id, other.id],
            Box::new(move |g, mask| {
                vec![
                    mask[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                    mask[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
                ]
            }),
        )
    }

    pub fn scale(self, factor: T) -> Var<'g, T> {
        let out = self.value().map(|v| v * factor);
        self.unary(out, move |g| g.map(|v| v * factor))
    }

    pub fn add_scalar(self, offset: T) -> Var<'g, T> {
        let out = self.value().map(|v| v + offset);
        self.unary(out, |g| g.clone())
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn square(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| gv * (xv + xv)))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v.abs());
        self.unary(out, move |g| {
            g.zip_map(&x, |gv, xv| {
                if xv > T::zero() {
                    gv
                } else if xv < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            })
        })
    }

    pub fn relu(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.unary(out, move |g| {
            g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })
        })
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * slope });
        self.unary(out, move |g| {
            g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { gv * slope })
        })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = self
            .value()
            .map(|v| T::one() / (T::one() + (-v).exp()));
        let y = Rc::new(out.clone());
        self.unary(out, move |g| {
            g.zip_map(&y, |gv, yv| gv * yv * (T::one() - yv))
        })
    }

    pub fn tanh(self) -> Var<'g, T> {
        let out = self.value().map(|v| v.tanh());
        let y = Rc::new(out.clone());
        self.unary(out, move |g| g.zip_map(&y, |gv, yv| gv * (T::one() - yv * yv)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Array::scalar(x.sum());
        self.unary(out, move |g| Array::full(&shape, g.item()))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Var<'g, T> {
        let x = self.value();
        let n = T::from_usize_lossy(x.len());
        self.sum().scale(T::one() / n)
    }

    /// `[N, ...] -> [N]`: sum over every axis but the leading one.
    pub fn sum_per_sample(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = shape[0];
        let per = x.len() / n.max(1);
        let out: Vec<T> = x
            .data()
            .chunks(per.max(1))
            .take(n)
            .map(|c| c.iter().copied().sum())
            .collect();
        let out = Array::from_vec(&[n], out).expect("per-sample sum");
        self.unary(out, move |g| {
            let mut d = Vec::with_capacity(n * per);
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv, per));
            }
            Array::from_vec(&shape, d).expect("per-sample grad")
        })
    }

    /// `[N, ...] -> [N]`: mean over every axis but the leading one.
    pub fn mean_per_sample(self) -> Var<'g, T> {
        let shape = self.shape();
        let per: usize = shape[1..].iter().product();
        self.sum_per_sample()
            .scale(T::one() / T::from_usize_lossy(per.max(1)))
    }

    /// `[N, C, H, W] -> [N, C]`: global average pooling.
    pub fn mean_spatial(self) -> Var<'g, T> {
        let x = self.value();
        let [n, c, h, w] = x.dims4().expect("mean_spatial");
        let hw = h * w;
        let inv = T::one() / T::from_usize_lossy(hw);
        let out: Vec<T> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Array::from_vec(&[n, c], out).expect("mean_spatial");
        self.unary(out, move |g| {
            let mut d = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv * inv, hw));
            }
            Array::from_vec(&[n, c, h, w], d).expect("mean_spatial grad")
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshaped(shape).expect("reshape");
        self.unary(out, move |g| g.clone().reshaped(&old).expect("reshape grad"))
    }

    /// Concatenate along axis 1 (channels for NCHW, features for `[N, D]`).
    pub fn concat(parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of zero variables");
        let graph = parts[0].graph;
        let values: Vec<Rc<Array<T>>> = parts.iter().map(|p| p.value()).collect();
        let n = values[0].shape()[0];
        let tail = values[0].shape()[2..].to_vec();
        let inner: usize = tail.iter().product();
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(v.shape()[0], n, "concat: leading axis mismatch");
                assert_eq!(&v.shape()[2..], tail.as_slice(), "concat: trailing axes mismatch");
                v.shape()[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total * inner);
        for s in 0..n {
            for (v, &c) in values.iter().zip(&widths) {
                let block = c * inner;
                data.extend_from_slice(&v.data()[s * block..(s + 1) * block]);
            }
        }
        let mut shape = vec![n, total];
        shape.extend_from_slice(&tail);
        let out = Array::from_vec(&shape, data).expect("concat");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        graph.push(
            out,
            &ids,
            Box::new(move |g, mask| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (k, &c) in widths.iter().enumerate() {
                    if mask[k] {
                        let block = c * inner;
                        let mut d = Vec::with_capacity(n * block);
                        for s in 0..n {
                            let start = s * total * inner + offset * inner;
                            d.extend_from_slice(&g.data()[start..start + block]);
                        }
                        grads.push(Some(Array::from_vec(&shapes[k], d).expect("concat grad")));
                    } else {
                        grads.push(None);
                    }
                    offset += c;
                }
                grads
            }),
        )
    }

    /// Slice `len` entries of axis 1 starting at `start`.
    pub fn narrow(self, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        assert!(start + len <= c, "narrow: {start}+{len} exceeds axis of {c}");
        let inner: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(n * len * inner);
        for s in 0..n {
            let base = s * c * inner + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let out = Array::from_vec(&out_shape, data).expect("narrow");
        self.unary(out, move |g| {
            let mut d = Array::zeros(&shape);
            let dd = d.data_mut();
            for s in 0..n {
                let base = s * c * inner + start * inner;
                let src = &g.data()[s * len * inner..(s + 1) * len * inner];
                dd[base..base + len * inner].copy_from_slice(src);
            }
            d
        })
    }
}
