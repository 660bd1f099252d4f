//! Central finite-difference check of reverse-mode gradients.

use crate::{Array, Graph, Scalar, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per input: `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub relative_errors: Vec<f64>,
    /// Per input: largest absolute entrywise difference.
    pub absolute_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_absolute(&self) -> f64 {
        self.absolute_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare the gradient of the scalar `f(inputs)` with central differences
/// of step `h`. Every input is treated as a differentiable leaf.
pub fn check_gradients<T, F>(inputs: &[Array<T>], h: f64, f: F) -> GradCheck
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Var<'g, T>,
{
    compare_gradients(&analytic_gradients(inputs, &f), &numeric_gradients(inputs, h, &f))
}

/// Reverse-mode gradient of `f` with respect to every input.
pub fn analytic_gradients<T, F>(inputs: &[Array<T>], f: F) -> Vec<Array<T>>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Var<'g, T>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    vars.iter()
        .zip(inputs)
        .map(|(v, a)| grads.get(*v).cloned().unwrap_or_else(|| Array::zeros(a.shape())))
        .collect()
}

/// Central differences of `f` with step `h`, one vector per input.
pub fn numeric_gradients<T, F>(inputs: &[Array<T>], h: f64, f: F) -> Vec<Vec<f64>>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Var<'g, T>,
{
    let eval = |xs: &[Array<T>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var<'_, T>> = xs.iter().map(|a| g.constant(a.clone())).collect();
        f(&g, &vars).item().as_f64()
    };
    let mut work: Vec<Array<T>> = inputs.to_vec();
    (0..inputs.len())
        .map(|i| {
            (0..inputs[i].len())
                .map(|j| {
                    let orig = work[i].data()[j];
                    work[i].data_mut()[j] = orig + T::lit(h);
                    let plus = eval(&work);
                    work[i].data_mut()[j] = orig - T::lit(h);
                    let minus = eval(&work);
                    work[i].data_mut()[j] = orig;
                    (plus - minus) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Error summary of analytic against numeric gradients, possibly computed
/// at different precisions.
pub fn compare_gradients<T: Scalar>(analytic: &[Array<T>], numeric: &[Vec<f64>]) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len(), "gradient lists differ in length");
    let mut relative_errors = Vec::with_capacity(analytic.len());
    let mut absolute_errors = Vec::with_capacity(analytic.len());
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len(), "gradient sizes differ");
        let (mut diff2, mut an2, mut nu2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for (an, &nu) in a.data().iter().zip(n) {
            let an = an.as_f64();
            diff2 += (an - nu).powi(2);
            an2 += an * an;
            nu2 += nu * nu;
            max_abs = max_abs.max((an - nu).abs());
        }
        let scale = f64::sqrt(an2).max(f64::sqrt(nu2));
        relative_errors.push(if scale > 0.0 { diff2.sqrt() / scale } else { 0.0 });
        absolute_errors.push(max_abs);
    }
    GradCheck {
        relative_errors,
        absolute_errors,
    }
}
