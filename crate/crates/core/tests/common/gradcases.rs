//! Finite-difference cases covering every objective and modulation path at toy widths.

use nlos_ltm::codebook;
use nlos_ltm::losses;
use nlos_ltm::modulation::{self, ltm_modulate, ModulationParams, ScaleRep};
use nlos_ltm::networks::{Architecture, ModelFlags, Networks};
use nlos_tensor::{Array, Scalar, Var};

use super::{randn, weighted_sum, ParamLookup};

pub type Case<T> = (
    &'static str,
    Vec<Array<T>>,
    Box<dyn for<'g> Fn(&dyn ParamLookup<'g, T>, &[Var<'g, T>]) -> Var<'g, T>>,
);

fn rep<'g, T: Scalar>(v: Var<'g, T>) -> ScaleRep<'g, T> {
    ScaleRep {
        values: v,
        scale_index: 1,
    }
}

/// Values at least `margin` away from every point in `kinks`.
fn away_from<T: Scalar>(a: Array<T>, kinks: &[f64], margin: f64) -> Array<T> {
    a.map(|v| {
        let mut x = v.as_f64();
        for &k in kinks {
            if (x - k).abs() < margin {
                x = k + if x >= k { margin } else { -margin };
            }
        }
        T::lit(x)
    })
}

fn toy_networks(flags: ModelFlags) -> Networks {
    let arch = Architecture {
        hidden_res: (4, 4),
        wall_res: (4, 4),
        channels: 2,
        stages: 2,
        base_width: 2,
        latent_channels: 2,
        n_conditions: 2,
        code_dim: 3,
        cond_encoder_width: 2,
        disc_width: 2,
        perceptual_width: 2,
        spatial_modulation: false,
    };
    Networks::new(arch, flags).unwrap()
}

pub fn cases<T: Scalar>() -> Vec<Case<T>> {
    let pos = |a: Array<T>| away_from(a, &[0.0], 0.05);
    vec![
        (
            "mean absolute error",
            vec![randn(&[2, 3, 2, 2], 1), pos(randn(&[2, 3, 2, 2], 2))],
            Box::new(|_, v| losses::mae(v[0], v[0].add(v[1])).unwrap()),
        ),
        (
            "mean squared error",
            vec![randn(&[2, 3], 3), randn(&[2, 3], 4)],
            Box::new(|_, v| losses::mse(v[0], v[1]).unwrap()),
        ),
        (
            "reconstruction objective",
            vec![randn(&[1, 2, 2, 2], 5), pos(randn(&[1, 2, 2, 2], 6)), randn(&[1, 2, 2], 7), pos(randn(&[1, 2, 2], 8))],
            Box::new(|_, v| losses::recon_loss(v[0], v[0].add(v[1]), v[2], v[2].add(v[3]), 0.7).unwrap().total),
        ),
        (
            "hinge adversarial objectives",
            vec![
                away_from(randn(&[4], 9), &[1.0, -1.0], 0.05),
                away_from(randn(&[4], 10), &[1.0, -1.0], 0.05),
                away_from(randn(&[4], 11), &[1.0, -1.0], 0.05),
                away_from(randn(&[4], 12), &[1.0, -1.0], 0.05),
            ],
            Box::new(|_, v| {
                let t = losses::gan_losses(&[v[0], v[1]], &[v[2], v[3]]).unwrap();
                t.discriminator.add(t.generator.scale(T::lit(0.3)))
            }),
        ),
        (
            "InfoNCE over latents and codes",
            vec![randn(&[3, 4], 13), randn(&[2, 4], 14)],
            Box::new(|_, v| {
                codebook::vq_terms(v[0].l2_normalize_rows(), v[1], &[1, 0, 1], 0.5).unwrap().infonce
            }),
        ),
        (
            "codebook term with respect to codes",
            vec![randn(&[2, 4], 15)],
            Box::new(|p, v| {
                let l = p.source_graph().constant(randn(&[3, 4], 16));
                codebook::vq_terms(l, v[0], &[1, 0, 1], 1.0).unwrap().codebook
            }),
        ),
        (
            "commitment term with respect to latents",
            vec![randn(&[3, 4], 17)],
            Box::new(|p, v| {
                let codes = p.source_graph().constant(randn(&[2, 4], 18));
                codebook::vq_terms(v[0], codes, &[1, 1, 0], 1.0).unwrap().commit
            }),
        ),
        (
            "perceptual objective",
            vec![randn(&[1, 2, 4, 4], 19), randn(&[1, 2, 4, 4], 20)],
            Box::new(|p, v| losses::perceptual_loss(&toy_networks(ModelFlags::default()), &p, v[0], v[1]).unwrap()),
        ),
        (
            "modulation, pooled parameters",
            vec![randn(&[2, 3, 3, 3], 21), randn(&[2, 3], 22), randn(&[2, 3], 23)],
            Box::new(|_, v| {
                let m = ModulationParams { scale: v[1], shift: v[2] };
                weighted_sum(ltm_modulate(v[0], m).unwrap(), 24)
            }),
        ),
        (
            "modulation, spatial parameters",
            vec![randn(&[1, 2, 3, 3], 25), randn(&[1, 2, 3, 3], 26), randn(&[1, 2, 3, 3], 27)],
            Box::new(|_, v| {
                let m = ModulationParams { scale: v[1], shift: v[2] };
                weighted_sum(ltm_modulate(v[0], m).unwrap(), 28)
            }),
        ),
        (
            "modulation block with predicted parameters",
            vec![randn(&[2, 2, 4, 4], 29), randn(&[2, 3, 2, 2], 30)],
            Box::new(|p, v| weighted_sum(modulation::ltm_block(&p, "m", v[0], rep(v[1]), false).unwrap(), 31)),
        ),
        (
            "spatial block with predicted parameters",
            vec![randn(&[1, 2, 4, 4], 32), randn(&[1, 3, 2, 2], 33)],
            Box::new(|p, v| weighted_sum(modulation::ltm_block(&p, "m", v[0], rep(v[1]), true).unwrap(), 34)),
        ),
        (
            "encoder injection",
            vec![randn(&[1, 2, 2, 2], 35), randn(&[1, 2, 2, 2], 36)],
            Box::new(|p, v| weighted_sum(modulation::inject_encoder(&p, "m", v[0], rep(v[1]), false).unwrap(), 37)),
        ),
        (
            "representation chain",
            vec![randn(&[2, 3], 38)],
            Box::new(|p, v| {
                let reps = modulation::representation_chain(&p, "r", v[0], &[(3, 1, 1), (2, 2, 2), (2, 4, 4)]);
                reps.iter().enumerate().fold(v[0].sum().scale(T::zero()), |acc, (k, r)| acc.add(weighted_sum(r.values, 40 + k as u64)))
            }),
        ),
        (
            "upsampling step",
            vec![randn(&[1, 2, 2, 2], 44)],
            Box::new(|p, v| weighted_sum(modulation::upsample_rep(&p, "u", rep(v[0]), 3, None).values, 45)),
        ),
        (
            "concatenation variant",
            vec![randn(&[1, 2, 2, 2], 46), randn(&[1, 2, 2, 2], 47)],
            Box::new(|p, v| weighted_sum(modulation::concat_block(&p, "c", v[0], rep(v[1])), 48)),
        ),
        (
            "condition encoder through InfoNCE",
            vec![pos(randn::<T>(&[2, 2, 4, 4], 49))],
            Box::new(|p, v| {
                let l = codebook::condition_encoder(&p, v[0], 2, 3);
                let codes = codebook::codes(&p, 2, 3);
                codebook::vq_terms(l, codes, &[0, 1], 0.5).unwrap().infonce
            }),
        ),
    ]
}

