use std::rc::Rc;

use crate::{Array, Scalar, Var};

/// `a (m x k) @ b (k x n)` where either operand may be read transposed.
fn matmul_raw<T: Scalar>(a: &Array<T>, ta: bool, b: &Array<T>, tb: bool) -> Array<T> {
    let [ar, ac] = a.dims2().expect("matmul lhs");
    let [br, bc] = b.dims2().expect("matmul rhs");
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac as isize) } else { (ar, ac, ac as isize, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc as isize) } else { (br, bc, bc as isize, 1) };
    assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), rsa, csa, b.data(), rsb, csb, T::zero(), &mut out, n as isize, 1);
    Array::from_vec(&[m, n], out).expect("matmul out")
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `[M, K] @ [K, N]`.
    pub fn matmul(self, rhs: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), rhs.value());
        let out = matmul_raw(&a, false, &b, false);
        self.graph.push(
            out,
            &[self.id, rhs.id],
            Box::new(move |g, mask| {
                vec![
                    mask[0].then(|| matmul_raw(g, false, &b, true)),
                    mask[1].then(|| matmul_raw(&a, true, g, false)),
                ]
            }),
        )
    }

    /// `[M, K] @ [N, K]^T`.
    pub fn matmul_t(self, rhs: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), rhs.value());
        let out = matmul_raw(&a, false, &b, true);
        self.graph.push(
            out,
            &[self.id, rhs.id],
            Box::new(move |g, mask| {
                vec![
                    mask[0].then(|| matmul_raw(g, false, &b, false)),
                    mask[1].then(|| matmul_raw(g, true, &a, false)),
                ]
            }),
        )
    }

    /// `[N, D] + [D]` broadcast over rows.
    pub fn add_row_bias(self, bias: Var<'g, T>) -> Var<'g, T> {
        let (x, b) = (self.value(), bias.value());
        let [n, d] = x.dims2().expect("add_row_bias input");
        assert_eq!(b.shape(), &[d], "add_row_bias bias shape");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Array::from_vec(&[n, d], out).expect("add_row_bias");
        self.graph.push(
            out,
            &[self.id, bias.id],
            Box::new(move |g, mask| {
                let db = mask[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Array::from_vec(&[d], acc).expect("add_row_bias grad")
                });
                vec![mask[0].then(|| g.clone()), db]
            }),
        )
    }

    /// Rows `index[i]` of a `[K, D]` table, stacked to `[N, D]`.
    pub fn gather_rows(self, index: &[usize]) -> Var<'g, T> {
        let table = self.value();
        let [k, d] = table.dims2().expect("gather_rows table");
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            assert!(i < k, "gather_rows: index {i} out of {k} rows");
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let out = Array::from_vec(&[index.len(), d], out).expect("gather_rows");
        let index: Rc<[usize]> = index.into();
        self.graph.push(
            out,
            &[self.id],
            Box::new(move |g, mask| {
                vec![mask[0].then(|| {
                    let mut acc = Array::zeros(&[k, d]);
                    let dst = acc.data_mut();
                    for (row, &i) in g.data().chunks(d).zip(index.iter()) {
                        for (a, &v) in dst[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc
                })]
            }),
        )
    }

    /// Per-row softmax cross-entropy `-log softmax(logits)[label]`, `[N, K] -> [N]`.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'g, T> {
        let logits = self.value();
        let [n, k] = logits.dims2().expect("cross_entropy logits");
        assert_eq!(labels.len(), n, "cross_entropy: one label per row");
        let mut probs = Vec::with_capacity(n * k);
        let mut out = Vec::with_capacity(n);
        for (row, &label) in logits.data().chunks(k).zip(labels) {
            assert!(label < k, "cross_entropy: label {label} out of {k} classes");
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            out.push(log_z - row[label]);
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let out = Array::from_vec(&[n], out).expect("cross_entropy");
        let labels: Rc<[usize]> = labels.into();
        self.graph.push(
            out,
            &[self.id],
            Box::new(move |g, mask| {
                vec![mask[0].then(|| {
                    let mut d = probs.clone();
                    for (i, (row, &gv)) in d.chunks_mut(k).zip(g.data()).enumerate() {
                        row[labels[i]] -= T::one();
                        for v in row.iter_mut() {
                            *v *= gv;
                        }
                    }
                    Array::from_vec(&[n, k], d).expect("cross_entropy grad")
                })]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::{Array, Graph};

    #[test]
    fn cross_entropy_of_two_logits() {
        let g = Graph::<f64>::new();
        let x = g.constant(Array::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let ce = x.cross_entropy(&[0]).item();
        let e = std::f64::consts::E;
        assert!((ce + (e / (e + 1.0)).ln()).abs() < 1e-15);
    }

    #[test]
    fn matmul_t_matches_matmul_of_transpose() {
        let g = Graph::<f64>::new();
        let a = g.constant(Array::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Array::from_vec(&[2, 3], vec![1., 0., 2., 0., 1., 1.]).unwrap());
        let bt = g.constant(Array::from_vec(&[3, 2], vec![1., 0., 0., 1., 2., 1.]).unwrap());
        assert_eq!(a.matmul_t(b).value().data(), a.matmul(bt).value().data());
        assert_eq!(a.matmul_t(b).value().data(), &[7., 5., 16., 11.]);
    }
}
