use crate::{Array, Scalar, Var};

impl<'g, T: Scalar> Var<'g, T> {
    /// Per-sample, per-channel standardization over the spatial extent:
    /// `(x - mean) / sqrt(var + eps)` with the biased variance.
    pub fn instance_standardize(self, eps: T) -> Var<'g, T> {
        let x = self.value();
        let [n, c, h, w] = x.dims4().expect("instance_standardize input");
        let m = h * w;
        let inv_m = T::one() / T::from_usize_lossy(m);
        let mut out = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in x.data().chunks(m) {
            let mean = plane.iter().copied().sum::<T>() * inv_m;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(plane.iter().map(|&v| (v - mean) * is));
        }
        let out = Array::from_vec(&[n, c, h, w], out).expect("instance_standardize");
        let xhat = out.clone();
        self.graph.push(
            out,
            &[self.id],
            Box::new(move |g, mask| {
                vec![mask[0].then(|| {
                    let mut d = Vec::with_capacity(g.len());
                    for ((gp, yp), &is) in g.data().chunks(m).zip(xhat.data().chunks(m)).zip(&inv_std) {
                        let mg = gp.iter().copied().sum::<T>() * inv_m;
                        let mgy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_m;
                        d.extend(gp.iter().zip(yp).map(|(&gv, &yv)| is * (gv - mg - yv * mgy)));
                    }
                    Array::from_vec(&[n, c, h, w], d).expect("instance_standardize grad")
                })]
            }),
        )
    }

    /// `x * scale + shift` with `scale`, `shift` of shape `[N, C]` broadcast
    /// over the spatial extent of `x: [N, C, H, W]`.
    pub fn channel_affine(self, scale: Var<'g, T>, shift: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let (sv, bv) = (scale.value(), shift.value());
        let [n, c, h, w] = x.dims4().expect("channel_affine input");
        assert_eq!(sv.shape(), &[n, c], "channel_affine scale shape");
        assert_eq!(bv.shape(), &[n, c], "channel_affine shift shape");
        let m = h * w;
        let mut out = Vec::with_capacity(x.len());
        for (pi, plane) in x.data().chunks(m).enumerate() {
            let (s, b) = (sv.data()[pi], bv.data()[pi]);
            out.extend(plane.iter().map(|&v| v * s + b));
        }
        let out = Array::from_vec(&[n, c, h, w], out).expect("channel_affine");
        self.graph.push(
            out,
            &[self.id, scale.id, shift.id],
            Box::new(move |g, mask| {
                let dx = mask[0].then(|| {
                    let mut d = Vec::with_capacity(g.len());
                    for (pi, gp) in g.data().chunks(m).enumerate() {
                        let s = sv.data()[pi];
                        d.extend(gp.iter().map(|&gv| gv * s));
                    }
                    Array::from_vec(&[n, c, h, w], d).expect("channel_affine dx")
                });
                let ds = mask[1].then(|| {
                    let d = g
                        .data()
                        .chunks(m)
                        .zip(x.data().chunks(m))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Array::from_vec(&[n, c], d).expect("channel_affine dscale")
                });
                let db = mask[2].then(|| {
                    let d = g.data().chunks(m).map(|gp| gp.iter().copied().sum()).collect();
                    Array::from_vec(&[n, c], d).expect("channel_affine dshift")
                });
                vec![dx, ds, db]
            }),
        )
    }

    /// Row-wise L2 normalization of `[N, D]`. Rows with norm below `1e-12`
    /// are divided by `1e-12` instead.
    pub fn l2_normalize_rows(self) -> Var<'g, T> {
        let x = self.value();
        let [n, d] = x.dims2().expect("l2_normalize_rows input");
        let floor = T::lit(1e-12);
        let norms: Vec<T> = x
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor))
            .collect();
        let mut out = Vec::with_capacity(n * d);
        for (r, &nr) in x.data().chunks(d).zip(&norms) {
            out.extend(r.iter().map(|&v| v / nr));
        }
        let out = Array::from_vec(&[n, d], out).expect("l2_normalize_rows");
        let y = out.clone();
        self.graph.push(
            out,
            &[self.id],
            Box::new(move |g, mask| {
                vec![mask[0].then(|| {
                    let mut dx = Vec::with_capacity(n * d);
                    for ((gr, yr), &nr) in g.data().chunks(d).zip(y.data().chunks(d)).zip(&norms) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| (gv - yv * dot) / nr));
                    }
                    Array::from_vec(&[n, d], dx).expect("l2_normalize_rows grad")
                })]
            }),
        )
    }
}
