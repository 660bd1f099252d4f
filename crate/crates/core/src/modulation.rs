//! Light transport modulation: per-channel standardize-then-affine of a
//! feature map with parameters predicted from a condition representation,
//! and the upsampling chain that produces one representation per scale.

use nlos_tensor::{Scalar, Var};

use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamSource};

pub const LTM_EPS: f64 = 1e-5;

/// Condition representation at one scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaleRep<'g, T: Scalar> {
    pub values: Var<'g, T>,
    pub scale_index: usize,
}

/// Scale and shift for one feature map: `[N, C]` when spatially constant,
/// `[N, C, H, W]` when spatially varying.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams<'g, T: Scalar> {
    pub scale: Var<'g, T>,
    pub shift: Var<'g, T>,
}

/// `t_s * (F - mean) / sqrt(var + eps) + t_b` per sample and channel.
pub fn ltm_modulate<'g, T: Scalar>(f: Var<'g, T>, m: ModulationParams<'g, T>) -> Result<Var<'g, T>> {
    let fs = f.shape();
    if fs.len() != 4 {
        return Err(Error::Dimension(format!("feature map must be NCHW, got {fs:?}")));
    }
    let ss = m.scale.shape();
    let standardized = f.instance_standardize(T::lit(LTM_EPS));
    match ss.len() {
        2 if ss == fs[..2] && m.shift.shape() == ss => Ok(standardized.channel_affine(m.scale, m.shift)),
        4 if ss == fs && m.shift.shape() == ss => Ok(standardized.mul(m.scale).add(m.shift)),
        _ => Err(Error::Dimension(format!(
            "modulation parameters {:?}/{:?} do not fit features {fs:?}",
            ss,
            m.shift.shape()
        ))),
    }
}

/// One 3x3 convolution over `O` to `2C` maps, split into scale and shift.
/// The scale half starts near 1 through its bias.
pub fn modulation_params<'g, T: Scalar>(
    p: &impl ParamSource<'g, T>,
    name: &str,
    o: ScaleRep<'g, T>,
    channels: usize,
    spatial: bool,
) -> ModulationParams<'g, T> {
    let cin = o.values.shape()[1];
    let bias = p.param(&format!("{name}.b"), &[2 * channels], Init::Halves(1.0, 0.0));
    let weight = Init::Normal(0.2 / ((cin * 9) as f64).sqrt());
    let t = nn::conv_init(p, name, o.values, 2 * channels, 3, weight, bias);
    let t = if spatial { t } else { t.mean_spatial() };
    ModulationParams {
        scale: t.narrow(0, channels),
        shift: t.narrow(channels, channels),
    }
}

/// Modulate `F` by parameters derived from `O`. In the spatially varying
/// variant `O` is first resized to `F`'s extent.
pub fn ltm_block<'g, T: Scalar>(
    p: &impl ParamSource<'g, T>,
    name: &str,
    f: Var<'g, T>,
    o: ScaleRep<'g, T>,
    spatial: bool,
) -> Result<Var<'g, T>> {
    let fs = f.shape();
    let o = if spatial {
        ScaleRep {
            values: nn::fit(o.values, fs[2], fs[3]),
            ..o
        }
    } else {
        o
    };
    ltm_modulate(f, modulation_params(p, name, o, fs[1], spatial))
}

/// `[ltm(F, O) || F]`, doubling the channel count.
pub fn inject_encoder<'g, T: Scalar>(
    p: &impl ParamSource<'g, T>,
    name: &str,
    f: Var<'g, T>,
    o: ScaleRep<'g, T>,
    spatial: bool,
) -> Result<Var<'g, T>> {
    Ok(Var::concat(&[ltm_block(p, name, f, o, spatial)?, f]))
}

/// Concatenation alternative to modulation: 1x1 conv of `[F || O]`
/// followed by a residual block, same channel count as `F`.
pub fn concat_block<'g, T: Scalar>(
    p: &impl ParamSource<'g, T>,
    name: &str,
    f: Var<'g, T>,
    o: ScaleRep<'g, T>,
) -> Var<'g, T> {
    let fs = f.shape();
    let ov = nn::fit(o.values, fs[2], fs[3]);
    let m = nn::conv(p, &format!("{name}.mix"), Var::concat(&[f, ov]), fs[1], 1, 1);
    let r = nn::lrelu(nn::conv(p, &format!("{name}.res1"), m, fs[1], 3, 1));
    m.add(nn::conv(p, &format!("{name}.res2"), r, fs[1], 3, 1))
}

/// Nearest 2x upsample (or resize to `target`) then a 3x3 convolution.
pub fn upsample_rep<'g, T: Scalar>(
    p: &impl ParamSource<'g, T>,
    name: &str,
    prev: ScaleRep<'g, T>,
    channels: usize,
    target: Option<(usize, usize)>,
) -> ScaleRep<'g, T> {
    let s = prev.values.shape();
    let (h, w) = target.unwrap_or((2 * s[2], 2 * s[3]));
    let up = nn::fit(prev.values, h, w);
    ScaleRep {
        values: nn::conv(p, name, up, channels, 3, 1),
        scale_index: prev.scale_index + 1,
    }
}

/// `O_0` from a code batch `[N, n_d]`: linear projection to a 1x1 map.
pub fn base_rep<'g, T: Scalar>(
    p: &impl ParamSource<'g, T>,
    name: &str,
    code: Var<'g, T>,
    channels: usize,
) -> ScaleRep<'g, T> {
    let n = code.shape()[0];
    ScaleRep {
        values: nn::linear(p, name, code, channels).reshape(&[n, channels, 1, 1]),
        scale_index: 0,
    }
}

/// Representations matching each target `(channels, h, w)`, ordered from
/// coarsest to finest; `O_0` is the 1x1 base and is not returned.
pub fn representation_chain<'g, T: Scalar>(
    p: &impl ParamSource<'g, T>,
    prefix: &str,
    code: Var<'g, T>,
    targets: &[(usize, usize, usize)],
) -> Vec<ScaleRep<'g, T>> {
    let first = targets.first().map(|t| t.0).unwrap_or(1);
    let mut o = base_rep(p, &format!("{prefix}.base"), code, first);
    let mut out = Vec::with_capacity(targets.len());
    for (k, &(c, h, w)) in targets.iter().enumerate() {
        o = upsample_rep(p, &format!("{prefix}.up{k}"), o, c, Some((h, w)));
        out.push(o);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nlos_tensor::{Array, Graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_parameters_reproduce_standardized_input() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = g.constant(Array::randn(&[2, 3, 4, 4], 1.0, &mut rng));
        let m = ModulationParams {
            scale: g.constant(Array::full(&[2, 3], 1.0)),
            shift: g.constant(Array::zeros(&[2, 3])),
        };
        let out = ltm_modulate(f, m).unwrap().value();
        let expect = f.instance_standardize(LTM_EPS).value();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn zero_scale_gives_constant_shift() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = g.constant(Array::randn(&[1, 2, 3, 3], 1.0, &mut rng));
        let shift = Array::from_vec(&[1, 2], vec![0.3, -1.5]).unwrap();
        let m = ModulationParams {
            scale: g.constant(Array::zeros(&[1, 2])),
            shift: g.constant(shift),
        };
        let out = ltm_modulate(f, m).unwrap().value();
        assert!(out.data()[..9].iter().all(|v| *v == 0.3));
        assert!(out.data()[9..].iter().all(|v| *v == -1.5));
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let g = Graph::<f64>::new();
        let f = g.constant(Array::zeros(&[1, 2, 3, 3]));
        let m = ModulationParams {
            scale: g.constant(Array::zeros(&[1, 3])),
            shift: g.constant(Array::zeros(&[1, 3])),
        };
        assert_eq!(ltm_modulate(f, m).unwrap_err().class(), "dimension");
    }

    #[test]
    fn upsample_shapes_and_identity_kernel() {
        let g = Graph::<f64>::new();
        let init = crate::nn::Initializer::new(&g, 0);
        let o = ScaleRep {
            values: g.constant(Array::full(&[1, 2, 4, 4], 0.7)),
            scale_index: 3,
        };
        let up = upsample_rep(&init, "u", o, 5, None);
        assert_eq!(up.values.shape(), vec![1, 5, 8, 8]);
        assert_eq!(up.scale_index, 4);

        // Identity kernel: center tap 1 on the matching channel.
        let mut params = init.into_params();
        let mut w = Array::zeros(&[2, 2, 3, 3]);
        for c in 0..2 {
            w.data_mut()[(c * 2 + c) * 9 + 4] = 1.0;
        }
        params.insert("id.w", w);
        params.insert("id.b", Array::zeros(&[2]));
        let g2 = Graph::<f64>::new();
        let b = nlos_tensor::Binder::inference(&g2, &params);
        let o = ScaleRep {
            values: g2.constant(Array::full(&[1, 2, 4, 4], 0.7)),
            scale_index: 0,
        };
        let out = upsample_rep(&b, "id", o, 2, None).values.value();
        // Zero padding touches the border, so check the interior.
        for c in 0..2 {
            for y in 1..7 {
                for x in 1..7 {
                    assert!((out.data()[(c * 8 + y) * 8 + x] - 0.7).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn inject_doubles_channels_and_keeps_input() {
        let g = Graph::<f64>::new();
        let init = crate::nn::Initializer::new(&g, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = g.constant(Array::randn(&[2, 3, 4, 4], 1.0, &mut rng));
        let o = ScaleRep {
            values: g.constant(Array::randn(&[2, 4, 4, 4], 1.0, &mut rng)),
            scale_index: 1,
        };
        let out = inject_encoder(&init, "m", f, o, false).unwrap();
        assert_eq!(out.shape(), vec![2, 6, 4, 4]);
        assert_eq!(out.narrow(3, 3).value().data(), f.value().data());
    }

    #[test]
    fn chain_reaches_requested_sizes() {
        let g = Graph::<f32>::new();
        let init = crate::nn::Initializer::new(&g, 2);
        let code = g.constant(Array::full(&[3, 8], 0.1));
        let reps = representation_chain(&init, "r", code, &[(16, 2, 2), (16, 4, 4), (8, 8, 8)]);
        let shapes: Vec<_> = reps.iter().map(|r| (r.values.shape(), r.scale_index)).collect();
        assert_eq!(
            shapes,
            vec![(vec![3, 16, 2, 2], 1), (vec![3, 16, 4, 4], 2), (vec![3, 8, 8, 8], 3)]
        );
    }
}
