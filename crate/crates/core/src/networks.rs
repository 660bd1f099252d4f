//! Hidden-image autoencoder, reconstruction network, reprojection network,
//! two-scale conditional discriminator and the frozen perceptual feature net.
//!
//! Stage `i` has width `base * 2^min(i, 2)`. Stage 0 runs at full
//! resolution and every later stage halves it, so `S` stages end at
//! `H / 2^(S-1)` before a 1x1 bottleneck to the latent channels.

use nlos_tensor::{Array, Graph, ParamSet, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::codebook;
use crate::error::{Error, Result};
use crate::modulation::{self, ScaleRep};
use crate::nn::{self, Initializer, ParamSource};

pub const HIDDEN_ENCODER: &str = "eh";
pub const HIDDEN_DECODER: &str = "dh";
pub const RECON_ENCODER: &str = "er";
pub const REPROJECTOR: &str = "gp";
pub const DISCRIMINATOR: &str = "disc";
pub const PERCEPTUAL: &str = "perc";

/// Everything that determines parameter shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden_res: (usize, usize),
    pub wall_res: (usize, usize),
    pub channels: usize,
    pub stages: usize,
    pub base_width: usize,
    pub latent_channels: usize,
    pub n_conditions: usize,
    pub code_dim: usize,
    pub cond_encoder_width: usize,
    pub disc_width: usize,
    pub perceptual_width: usize,
    /// Spatially varying scale and shift maps instead of per-channel constants.
    pub spatial_modulation: bool,
}

impl Architecture {
    /// 16 x 16 RGB, four stages.
    pub fn desk(n_conditions: usize) -> Self {
        Self {
            hidden_res: (16, 16),
            wall_res: (16, 16),
            channels: 3,
            stages: 4,
            base_width: 32,
            latent_channels: 32,
            n_conditions,
            code_dim: 128,
            cond_encoder_width: 16,
            disc_width: 16,
            perceptual_width: 8,
            spatial_modulation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        let f = 1usize << (self.stages - 1);
        let (h, w) = self.hidden_res;
        if h % f != 0 || w % f != 0 || h < f || w < f {
            return Err(Error::Config(format!(
                "hidden resolution {h}x{w} must be a multiple of 2^(stages-1) = {f}"
            )));
        }
        let widths = [
            self.base_width,
            self.latent_channels,
            self.n_conditions,
            self.code_dim,
            self.cond_encoder_width,
            self.disc_width,
            self.perceptual_width,
            self.channels,
        ];
        if widths.contains(&0) {
            return Err(Error::Config(format!("architecture widths must be positive: {self:?}")));
        }
        if self.wall_res.0 < 2 || self.wall_res.1 < 2 {
            return Err(Error::Config("wall resolution must be at least 2x2".into()));
        }
        Ok(())
    }

    /// Whether an autoencoder trained under `other` has this one's shapes.
    pub fn same_autoencoder(&self, other: &Self) -> bool {
        (self.hidden_res, self.channels, self.stages, self.base_width, self.latent_channels)
            == (other.hidden_res, other.channels, other.stages, other.base_width, other.latent_channels)
    }

    pub fn stage_width(&self, i: usize) -> usize {
        self.base_width << i.min(2)
    }

    pub fn stage_res(&self, i: usize) -> (usize, usize) {
        (self.hidden_res.0 >> i, self.hidden_res.1 >> i)
    }

    /// `(c, h, w)` of the shared bottleneck.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.stage_res(self.stages - 1);
        (self.latent_channels, h, w)
    }

    /// `(channels, h, w)` per stage, deepest first (the order of the representation chain).
    fn rep_targets(&self) -> Vec<(usize, usize, usize)> {
        (0..self.stages)
            .rev()
            .map(|i| {
                let (h, w) = self.stage_res(i);
                (self.stage_width(i), h, w)
            })
            .collect()
    }
}

/// Ablation switches. `no_modulation` removes every condition input from the
/// reconstruction and reprojection networks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub no_ot: bool,
    pub no_joint: bool,
    pub single_scale_modulation: bool,
    pub concat_modulation: bool,
    pub no_vq: bool,
    #[serde(default)]
    pub no_modulation: bool,
}

impl ModelFlags {
    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (on, name) in [
            (self.no_ot, "no_ot"),
            (self.no_joint, "no_joint"),
            (self.single_scale_modulation, "single_scale_modulation"),
            (self.concat_modulation, "concat_modulation"),
            (self.no_vq, "no_vq"),
            (self.no_modulation, "no_modulation"),
        ] {
            if on {
                out.push(name);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Injection {
    Plain,
    Ltm,
    Concat,
}

/// The complete model description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Networks {
    pub arch: Architecture,
    pub flags: ModelFlags,
}

/// Output of the hidden encoder: bottleneck plus per-stage features.
pub struct Encoded<'g, T: Scalar> {
    pub latent: Var<'g, T>,
    pub features: Vec<Var<'g, T>>,
}

impl Networks {
    pub fn new(arch: Architecture, flags: ModelFlags) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch, flags })
    }

    fn injection(&self, stage: usize) -> Injection {
        if self.flags.no_modulation || (self.flags.single_scale_modulation && stage + 1 != self.arch.stages) {
            Injection::Plain
        } else if self.flags.concat_modulation {
            Injection::Concat
        } else {
            Injection::Ltm
        }
    }

    fn uses_condition(&self) -> bool {
        !self.flags.no_modulation
    }

    /// Conv stack shared by the hidden and reconstruction encoders. `inject`
    /// maps (stage, feature) to the next block's input.
    fn encoder<'g, T: Scalar>(
        &self,
        p: &impl ParamSource<'g, T>,
        prefix: &str,
        x: Var<'g, T>,
        mut inject: impl FnMut(usize, Var<'g, T>) -> Result<Var<'g, T>>,
    ) -> Result<Encoded<'g, T>> {
        let mut h = x;
        let mut features = Vec::with_capacity(self.arch.stages);
        for i in 0..self.arch.stages {
            let c = self.arch.stage_width(i);
            let stride = if i == 0 { 1 } else { 2 };
            h = nn::lrelu(nn::conv(p, &format!("{prefix}.s{i}.c0"), h, c, 3, stride));
            h = nn::lrelu(nn::conv(p, &format!("{prefix}.s{i}.c1"), h, c, 3, 1));
            features.push(h);
            h = inject(i, h)?;
        }
        let latent = nn::conv(p, &format!("{prefix}.bottleneck"), h, self.arch.latent_channels, 1, 1);
        Ok(Encoded { latent, features })
    }

    fn check_input<T: Scalar>(&self, x: Var<'_, T>, res: (usize, usize), what: &str) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.arch.channels || (s[2], s[3]) != res {
            return Err(Error::Dimension(format!(
                "{what} must be [N, {}, {}, {}], got {s:?}",
                self.arch.channels, res.0, res.1
            )));
        }
        Ok(())
    }

    fn check_code<T: Scalar>(&self, code: Var<'_, T>, n: usize) -> Result<()> {
        let s = code.shape();
        if s != [n, self.arch.code_dim] {
            return Err(Error::Dimension(format!(
                "condition code must be [{n}, {}], got {s:?}",
                self.arch.code_dim
            )));
        }
        Ok(())
    }

    /// `E_h`.
    pub fn encode_hidden<'g, T: Scalar>(&self, p: &impl ParamSource<'g, T>, x: Var<'g, T>) -> Result<Encoded<'g, T>> {
        self.check_input(x, self.arch.hidden_res, "hidden image")?;
        self.encoder(p, HIDDEN_ENCODER, x, |_, f| Ok(f))
    }

    /// `D_h`: mirror of the encoder ending in a sigmoid.
    pub fn decode_hidden<'g, T: Scalar>(&self, p: &impl ParamSource<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        let (c, h, w) = self.arch.latent_shape();
        let s = z.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::Dimension(format!("latent must be [N, {c}, {h}, {w}], got {s:?}")));
        }
        let top = self.arch.stages - 1;
        let mut d = nn::lrelu(nn::conv(p, "dh.in", z, self.arch.stage_width(top), 1, 1));
        for i in (1..self.arch.stages).rev() {
            let c = self.arch.stage_width(i - 1);
            d = d.upsample2();
            d = nn::lrelu(nn::conv(p, &format!("dh.s{i}.c0"), d, c, 3, 1));
            d = nn::lrelu(nn::conv(p, &format!("dh.s{i}.c1"), d, c, 3, 1));
        }
        Ok(nn::conv(p, "dh.out", d, self.arch.channels, 3, 1).sigmoid())
    }

    /// `(E_h(x), D_h(E_h(x)))`.
    pub fn autoencoder_forward<'g, T: Scalar>(
        &self,
        p: &impl ParamSource<'g, T>,
        x: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let z = self.encode_hidden(p, x)?.latent;
        let xh = self.decode_hidden(p, z)?;
        Ok((z, xh))
    }

    /// Condition encoder output `l`, `[N, n_d]` with unit rows.
    pub fn encode_condition<'g, T: Scalar>(&self, p: &impl ParamSource<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_input(y, self.arch.wall_res, "projection")?;
        Ok(codebook::condition_encoder(p, y, self.arch.cond_encoder_width, self.arch.code_dim))
    }

    fn stage_inject<'g, T: Scalar>(
        &self,
        p: &impl ParamSource<'g, T>,
        prefix: &str,
        stage: usize,
        f: Var<'g, T>,
        reps: &[ScaleRep<'g, T>],
        concat_skip_input: bool,
    ) -> Result<Var<'g, T>> {
        // reps run deepest first.
        let o = reps.get(self.arch.stages - 1 - stage).copied();
        let name = format!("{prefix}.ltm{stage}");
        Ok(match (self.injection(stage), o) {
            (Injection::Plain, _) | (_, None) => f,
            (Injection::Ltm, Some(o)) => {
                if concat_skip_input {
                    modulation::inject_encoder(p, &name, f, o, self.arch.spatial_modulation)?
                } else {
                    modulation::ltm_block(p, &name, f, o, self.arch.spatial_modulation)?
                }
            }
            (Injection::Concat, Some(o)) => {
                let m = modulation::concat_block(p, &name, f, o);
                if concat_skip_input {
                    Var::concat(&[m, f])
                } else {
                    m
                }
            }
        })
    }

    fn reps<'g, T: Scalar>(&self, p: &impl ParamSource<'g, T>, prefix: &str, code: Var<'g, T>) -> Vec<ScaleRep<'g, T>> {
        if self.uses_condition() {
            modulation::representation_chain(p, &format!("{prefix}.rep"), code, &self.arch.rep_targets())
        } else {
            Vec::new()
        }
    }

    /// `G_r`: modulated encoder `E_r` then the hidden decoder. Returns `(x', E_r(y))`.
    pub fn reconstruct<'g, T: Scalar>(
        &self,
        p: &impl ParamSource<'g, T>,
        y: Var<'g, T>,
        code: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        self.check_input(y, self.arch.wall_res, "projection")?;
        self.check_code(code, y.shape()[0])?;
        let reps = self.reps(p, RECON_ENCODER, code);
        let (h, w) = self.arch.hidden_res;
        let input = nn::fit(y, h, w);
        let enc = self.encoder(p, RECON_ENCODER, input, |i, f| {
            self.stage_inject(p, RECON_ENCODER, i, f, &reps, true)
        })?;
        let x = self.decode_hidden(p, enc.latent)?;
        Ok((x, enc.latent))
    }

    /// `G_p`: encoder-decoder over `x` whose skips carry modulated encoder
    /// features; output resized to the wall resolution.
    pub fn reproject<'g, T: Scalar>(
        &self,
        p: &impl ParamSource<'g, T>,
        x: Var<'g, T>,
        code: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        self.check_input(x, self.arch.hidden_res, "hidden image")?;
        self.check_code(code, x.shape()[0])?;
        let reps = self.reps(p, REPROJECTOR, code);
        let enc = self.encoder(p, "gp.enc", x, |_, f| Ok(f))?;
        let top = self.arch.stages - 1;
        let skip = |i: usize| self.stage_inject(p, REPROJECTOR, i, enc.features[i], &reps, false);
        let mut d = nn::lrelu(nn::conv(p, "gp.dec.in", enc.latent, self.arch.stage_width(top), 1, 1));
        d = nn::lrelu(nn::conv(
            p,
            &format!("gp.dec.s{top}.merge"),
            Var::concat(&[d, skip(top)?]),
            self.arch.stage_width(top),
            3,
            1,
        ));
        for i in (1..self.arch.stages).rev() {
            let c = self.arch.stage_width(i - 1);
            d = d.upsample2();
            d = nn::lrelu(nn::conv(p, &format!("gp.dec.s{i}.up"), d, c, 3, 1));
            d = nn::lrelu(nn::conv(
                p,
                &format!("gp.dec.s{}.merge", i - 1),
                Var::concat(&[d, skip(i - 1)?]),
                c,
                3,
                1,
            ));
        }
        let out = nn::conv(p, "gp.dec.out", d, self.arch.channels, 3, 1).sigmoid();
        Ok(nn::fit(out, self.arch.wall_res.0, self.arch.wall_res.1))
    }

    /// Realness score per sample at full and half resolution, each `[N]`.
    pub fn discriminate<'g, T: Scalar>(
        &self,
        p: &impl ParamSource<'g, T>,
        x: Var<'g, T>,
        y: Var<'g, T>,
    ) -> Result<Vec<Var<'g, T>>> {
        self.check_input(x, self.arch.hidden_res, "hidden image")?;
        self.check_input(y, self.arch.wall_res, "projection")?;
        let pair = Var::concat(&[nn::fit(x, self.arch.wall_res.0, self.arch.wall_res.1), y]);
        let mut out = Vec::with_capacity(2);
        let mut input = pair;
        for k in 0..2 {
            if k > 0 {
                input = input.avg_pool2();
            }
            let w = self.arch.disc_width;
            let mut h = nn::lrelu(nn::conv(p, &format!("disc.h{k}.c0"), input, w, 3, 2));
            h = nn::lrelu(nn::conv(p, &format!("disc.h{k}.c1"), h, 2 * w, 3, 2));
            let score = nn::conv(p, &format!("disc.h{k}.out"), h, 1, 3, 1);
            out.push(score.mean_per_sample());
        }
        Ok(out)
    }

    /// Three feature maps of the fixed random feature network.
    pub fn perceptual_features<'g, T: Scalar>(
        &self,
        p: &impl ParamSource<'g, T>,
        y: Var<'g, T>,
    ) -> Result<Vec<Var<'g, T>>> {
        self.check_input(y, self.arch.wall_res, "projection")?;
        let w = self.arch.perceptual_width;
        let f0 = nn::lrelu(nn::conv(p, "perc.c0", y, w, 3, 1));
        let f1 = nn::lrelu(nn::conv(p, "perc.c1", f0, 2 * w, 3, 2));
        let f2 = nn::lrelu(nn::conv(p, "perc.c2", f1, 4 * w, 3, 2));
        Ok(vec![f0, f1, f2])
    }

    /// Test-time code for each projection: the nearest codebook row, or the
    /// raw latent when quantization is disabled. Also returns the indices.
    pub fn test_code<'g, T: Scalar>(
        &self,
        p: &impl ParamSource<'g, T>,
        y: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Option<Vec<usize>>)> {
        let l = self.encode_condition(p, y)?;
        if self.flags.no_vq {
            return Ok((l, None));
        }
        let codes = codebook::codes(p, self.arch.n_conditions, self.arch.code_dim);
        let cb = codebook::Codebook::from_array(&codes.value())?;
        let idx = codebook::nearest_indices(&l.value(), &cb)?;
        Ok((codes.gather_rows(&idx), Some(idx)))
    }

    /// `reconstruct` with the test-time code.
    pub fn reconstruct_test<'g, T: Scalar>(
        &self,
        p: &impl ParamSource<'g, T>,
        y: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Option<Vec<usize>>)> {
        let (z, idx) = self.test_code(p, y)?;
        Ok((self.reconstruct(p, y, z)?.0, idx))
    }

    /// Fresh parameters: `(generator side, discriminator)`. Without joint
    /// training there is no reprojection network and no discriminator.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<(ParamSet<T>, ParamSet<T>)> {
        let g = Graph::<T>::new();
        let init = Initializer::new(&g, seed);
        let (h, w) = self.arch.hidden_res;
        let (wh, ww) = self.arch.wall_res;
        let c = self.arch.channels;
        let x = g.constant(Array::zeros(&[1, c, h, w]));
        let y = g.constant(Array::zeros(&[1, c, wh, ww]));
        self.autoencoder_forward(&init, x)?;
        let l = self.encode_condition(&init, y)?;
        codebook::codes(&init, self.arch.n_conditions, self.arch.code_dim);
        self.reconstruct(&init, y, l)?;
        if !self.flags.no_joint {
            self.reproject(&init, x, l)?;
        }
        // A fixed seed keeps the perceptual features identical across runs.
        let perc_graph = Graph::<T>::new();
        let perc_init = Initializer::new(&perc_graph, PERCEPTUAL_SEED);
        self.perceptual_features(&perc_init, perc_graph.constant(Array::zeros(&[1, c, wh, ww])))?;
        let mut gen = init.into_params();
        gen.extend(&perc_init.into_params());

        let dg = Graph::<T>::new();
        let dinit = Initializer::new(&dg, seed ^ DISC_SEED_SALT);
        if !self.flags.no_joint {
            self.discriminate(
                &dinit,
                dg.constant(Array::zeros(&[1, c, h, w])),
                dg.constant(Array::zeros(&[1, c, wh, ww])),
            )?;
        }
        Ok((gen, dinit.into_params()))
    }
}

const PERCEPTUAL_SEED: u64 = 0x5eed_f00d;
const DISC_SEED_SALT: u64 = 0xd15c;
