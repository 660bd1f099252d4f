//! Spatial ops on NCHW tensors: 2-D convolution (im2col + gemm), nearest
//! resampling and 2x2 average pooling.

use std::rc::Rc;

use crate::{Array, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        assert!(
            input + 2 * self.padding >= kernel,
            "conv2d: kernel {kernel} larger than padded input {input}"
        );
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

struct Geometry {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

/// `cols[k, n * P + p]` with `k = (ci, ki, kj)` and `p = (oy, ox)`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let (np, p) = (g.n * g.p(), g.p());
    let mut cols = vec![T::zero(); g.k() * np];
    for c in 0..g.ci {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for s in 0..g.n {
                    let plane = &x[(s * g.ci + c) * g.h * g.w..(s * g.ci + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[s * p..(s + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let (np, p) = (g.n * g.p(), g.p());
    let mut x = vec![T::zero(); g.n * g.ci * g.h * g.w];
    for c in 0..g.ci {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * np..(row + 1) * np];
                for s in 0..g.n {
                    let base = (s * g.ci + c) * g.h * g.w;
                    let src = &src_row[s * p..(s + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = base + iy as usize * g.w;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[dst_row + ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2-D cross-correlation. `weight` is `[C_out, C_in, KH, KW]`, `bias` is `[C_out]`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, spec: Conv2dSpec) -> Var<'g, T> {
        let x = self.value();
        let wv = weight.value();
        let [n, ci, h, w] = x.dims4().expect("conv2d input");
        let [co, wci, kh, kw] = wv.dims4().expect("conv2d weight");
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, weight expects {wci}");
        let geo = Rc::new(Geometry {
            n,
            ci,
            h,
            w,
            kh,
            kw,
            oh: spec.output_size(h, kh),
            ow: spec.output_size(w, kw),
            stride: spec.stride,
            pad: spec.padding,
        });
        let (k, p) = (geo.k(), geo.p());
        let np = n * p;
        let cols = Rc::new(im2col(x.data(), &geo));
        let mut mat = vec![T::zero(); co * np];
        T::gemm(
            co,
            k,
            np,
            T::one(),
            wv.data(),
            k as isize,
            1,
            &cols,
            np as isize,
            1,
            T::zero(),
            &mut mat,
            np as isize,
            1,
        );
        let bv = bias.map(|b| {
            let b = b.value();
            assert_eq!(b.shape(), &[co], "conv2d bias shape");
            b
        });
        let mut out = vec![T::zero(); n * co * p];
        for s in 0..n {
            for c in 0..co {
                let bias_c = bv.as_ref().map_or(T::zero(), |b| b.data()[c]);
                let src = &mat[c * np + s * p..c * np + (s + 1) * p];
                let dst = &mut out[(s * co + c) * p..(s * co + c + 1) * p];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias_c;
                }
            }
        }
        let out = Array::from_vec(&[n, co, geo.oh, geo.ow], out).expect("conv2d out");

        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        self.graph.push(
            out,
            &parents,
            Box::new(move |gout, mask| {
                // gmat[c, s * P + p]
                let mut gmat = vec![T::zero(); co * np];
                for s in 0..n {
                    for c in 0..co {
                        let src = &gout.data()[(s * co + c) * p..(s * co + c + 1) * p];
                        gmat[c * np + s * p..c * np + (s + 1) * p].copy_from_slice(src);
                    }
                }
                let dx = mask[0].then(|| {
                    let mut dcols = vec![T::zero(); k * np];
                    T::gemm(
                        k,
                        co,
                        np,
                        T::one(),
                        wv.data(),
                        1,
                        k as isize,
                        &gmat,
                        np as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        np as isize,
                        1,
                    );
                    Array::from_vec(&[n, ci, h, w], col2im(&dcols, &geo)).expect("conv dx")
                });
                let dw = mask[1].then(|| {
                    let mut dw = vec![T::zero(); co * k];
                    T::gemm(
                        co,
                        np,
                        k,
                        T::one(),
                        &gmat,
                        np as isize,
                        1,
                        &cols,
                        1,
                        np as isize,
                        T::zero(),
                        &mut dw,
                        k as isize,
                        1,
                    );
                    Array::from_vec(&[co, ci, kh, kw], dw).expect("conv dw")
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(mask[2].then(|| {
                        let db = gmat.chunks(np).map(|r| r.iter().copied().sum()).collect();
                        Array::from_vec(&[co], db).expect("conv db")
                    }));
                }
                grads
            }),
        )
    }

    /// Nearest-neighbour resampling to `(out_h, out_w)`.
    pub fn resize_nearest(self, out_h: usize, out_w: usize) -> Var<'g, T> {
        let x = self.value();
        let [n, c, h, w] = x.dims4().expect("resize input");
        let ys: Vec<usize> = (0..out_h).map(|oy| oy * h / out_h).collect();
        let xs: Vec<usize> = (0..out_w).map(|ox| ox * w / out_w).collect();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in x.data().chunks(h * w) {
            for &iy in &ys {
                for &ix in &xs {
                    out.push(plane[iy * w + ix]);
                }
            }
        }
        let out = Array::from_vec(&[n, c, out_h, out_w], out).expect("resize out");
        let ys = Rc::new(ys);
        let xs = Rc::new(xs);
        self.graph.push(
            out,
            &[self.id],
            Box::new(move |g, mask| {
                vec![mask[0].then(|| {
                    let mut d = vec![T::zero(); n * c * h * w];
                    for (pi, gp) in g.data().chunks(out_h * out_w).enumerate() {
                        let dp = &mut d[pi * h * w..(pi + 1) * h * w];
                        for (oy, &iy) in ys.iter().enumerate() {
                            for (ox, &ix) in xs.iter().enumerate() {
                                dp[iy * w + ix] += gp[oy * out_w + ox];
                            }
                        }
                    }
                    Array::from_vec(&[n, c, h, w], d).expect("resize grad")
                })]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(self) -> Var<'g, T> {
        let [_, _, h, w] = self.value().dims4().expect("upsample2 input");
        self.resize_nearest(2 * h, 2 * w)
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(self) -> Var<'g, T> {
        let x = self.value();
        let [n, c, h, w] = x.dims4().expect("avg_pool2 input");
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "avg_pool2: input {h}x{w} too small");
        let quarter = T::lit(0.25);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (2 * oy, 2 * ox);
                    let s = plane[y0 * w + x0]
                        + plane[y0 * w + x0 + 1]
                        + plane[(y0 + 1) * w + x0]
                        + plane[(y0 + 1) * w + x0 + 1];
                    out.push(s * quarter);
                }
            }
        }
        let out = Array::from_vec(&[n, c, oh, ow], out).expect("avg_pool2 out");
        self.graph.push(
            out,
            &[self.id],
            Box::new(move |g, mask| {
                vec![mask[0].then(|| {
                    let mut d = vec![T::zero(); n * c * h * w];
                    for (pi, gp) in g.data().chunks(oh * ow).enumerate() {
                        let dp = &mut d[pi * h * w..(pi + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = gp[oy * ow + ox] * quarter;
                                let (y0, x0) = (2 * oy, 2 * ox);
                                dp[y0 * w + x0] += v;
                                dp[y0 * w + x0 + 1] += v;
                                dp[(y0 + 1) * w + x0] += v;
                                dp[(y0 + 1) * w + x0 + 1] += v;
                            }
                        }
                    }
                    Array::from_vec(&[n, c, h, w], d).expect("avg_pool2 grad")
                })]
            }),
        )
    }
}
