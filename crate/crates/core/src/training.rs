//! Two-stage schedule: autoencoder pretraining, then joint training of the
//! condition encoder, codebook, reconstruction network, reprojection network
//! and discriminator.
//!
//! Each stage writes `<out_dir>/<stage>.jsonl` (one record per step when
//! `log_steps` is set, plus one per epoch) and the checkpoints
//! `<stage>_last.ckpt` and `<stage>_best.ckpt`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nlos_tensor::{clip_grad_norm, cosine_lr, Adam, AdamConfig, Array, Binder, Graph, ParamSet, Scalar};
use serde::Serialize;

use crate::checkpoint::{param_hash, Checkpoint, Stage};
use crate::codebook::{self, AssignmentStats};
use crate::config::TrainConfig;
use crate::dataset::{derive_seed, unique_hidden, Batch, Manifest, Split, SplitData};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::losses::{self, LossReport};
use crate::metrics;
use crate::networks::{Networks, HIDDEN_DECODER, HIDDEN_ENCODER, PERCEPTUAL};
use crate::nn;

/// Images evaluated per forward pass in validation probes.
const PROBE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean: LossReport,
    pub param_hash: String,
    pub validation: BTreeMap<String, f64>,
    pub seconds: f64,
}

pub struct TrainOutcome<T: Scalar> {
    /// State after the final epoch.
    pub last: Checkpoint<T>,
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    kind: &'static str,
    stage: Stage,
    epoch: usize,
    step: usize,
    lr: f64,
    report: &'a LossReport,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    kind: &'static str,
    #[serde(flatten)]
    record: &'a EpochRecord,
    warnings: &'a [String],
}

struct RunLog {
    out: Option<BufWriter<File>>,
}

impl RunLog {
    fn open(dir: &Path, stage: Stage) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}.jsonl", stage_tag(stage)));
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
        })
    }

    fn line(&mut self, v: &impl Serialize) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            serde_json::to_writer(&mut *w, v)?;
            w.write_all(b"\n").map_err(|e| Error::io("log", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            w.flush().map_err(|e| Error::io("log", e))?;
        }
        Ok(())
    }
}

pub fn stage_tag(stage: Stage) -> &'static str {
    match stage {
        Stage::Autoencoder => "autoencoder",
        Stage::Joint => "joint",
    }
}

pub fn last_checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}_last.ckpt", stage_tag(stage)))
}

pub fn best_checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}_best.ckpt", stage_tag(stage)))
}

/// Model description implied by a config and a manifest.
pub fn networks_for(cfg: &TrainConfig, m: &Manifest) -> Result<Networks> {
    Networks::new(cfg.architecture(m.hidden_res, m.wall_res, m.num_conditions()), cfg.flags())
}

fn total_steps(epochs: usize, n: usize, batch: usize) -> usize {
    epochs * n.div_ceil(batch)
}

fn stack<T: Scalar>(images: &[ImageGrid<T>], idx: &[usize]) -> Result<Array<T>> {
    let refs: Vec<&ImageGrid<T>> = idx.iter().map(|&i| &images[i]).collect();
    ImageGrid::stack(&refs)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    order
}

fn finite_or_abort(report: &LossReport, stage: Stage, epoch: usize, batch: usize) -> Result<()> {
    if report.non_finite_terms().is_empty() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            stage: stage_tag(stage).into(),
            epoch,
            batch,
            report: Box::new(report.clone()),
        })
    }
}

/// Mean PSNR of `D_h(E_h(x))` over `images`.
pub fn autoencoder_psnr<T: Scalar>(net: &Networks, params: &ParamSet<T>, images: &[ImageGrid<T>]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(PROBE_BATCH) {
        let g = Graph::new();
        let b = Binder::inference(&g, params);
        let refs: Vec<&ImageGrid<T>> = chunk.iter().collect();
        let (_, xh) = net.autoencoder_forward(&b, g.constant(ImageGrid::stack(&refs)?))?;
        let xh = xh.value();
        for (i, x) in chunk.iter().enumerate() {
            total += metrics::psnr(x, &ImageGrid::from_array(&xh, i)?, 1.0)?;
        }
    }
    Ok(total / images.len() as f64)
}

/// Stage 1: L1 autoencoder on the unique hidden images of the training split.
/// Validation uses the hidden images of the test split.
pub fn pretrain_autoencoder<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let m = Manifest::open(&cfg.manifest)?;
    let train = unique_hidden(&SplitData::<T>::load(&m, Split::Train)?);
    let val = unique_hidden(&SplitData::<T>::load(&m, Split::Test)?);
    pretrain_on(cfg, &networks_for(cfg, &m)?, &train, &val)
}

pub fn pretrain_on<T: Scalar>(
    cfg: &TrainConfig,
    net: &Networks,
    train: &[ImageGrid<T>],
    val: &[ImageGrid<T>],
) -> Result<TrainOutcome<T>> {
    if train.is_empty() {
        return Err(Error::EmptySplit("autoencoder training images".into()));
    }
    let stage = Stage::Autoencoder;
    let (all, _) = net.init_params::<T>(derive_seed(cfg.seed, &[10]))?;
    let mut params = all.subset(&format!("{HIDDEN_ENCODER}."));
    params.extend(&all.subset(&format!("{HIDDEN_DECODER}.")));
    let mut opt = Adam::new(AdamConfig::adam(cfg.ae_beta1, cfg.ae_beta2, cfg.ae_weight_decay));
    let total = total_steps(cfg.ae_epochs, train.len(), cfg.batch_size);
    let mut log = RunLog::open(&cfg.out_dir, stage)?;
    let mut epochs = Vec::with_capacity(cfg.ae_epochs);
    let mut best = f64::NEG_INFINITY;
    let mut step = 0;
    let mut lr = cfg.ae_lr_init;
    for epoch in 0..cfg.ae_epochs {
        let t0 = Instant::now();
        let mut sum = LossReport::default();
        let order = shuffled(train.len(), derive_seed(cfg.seed, &[12, epoch as u64]));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, idx) in batches.iter().enumerate() {
            lr = cosine_lr(step, total, cfg.ae_lr_init, cfg.ae_lr_final);
            let g = Graph::new();
            let b = Binder::new(&g, &params);
            let x = g.constant(stack(train, idx)?);
            let (_, xh) = net.autoencoder_forward(&b, x)?;
            let loss = losses::mae(x, xh)?;
            let report = LossReport {
                l1: loss.item().as_f64(),
                ..Default::default()
            }
            .with_totals(&cfg.effective_weights());
            finite_or_abort(&report, stage, epoch, bi)?;
            let mut grads = g.backward(loss);
            let grads = b.collect(&mut grads);
            drop(b);
            opt.step(&mut params, &grads, lr);
            if cfg.log_steps {
                log.line(&StepRecord {
                    kind: "step",
                    stage,
                    epoch,
                    step,
                    lr,
                    report: &report,
                })?;
            }
            sum.accumulate(&report);
            step += 1;
        }
        let mut validation = BTreeMap::new();
        if !val.is_empty() {
            validation.insert("psnr".to_string(), autoencoder_psnr(net, &params, val)?);
        }
        let rec = EpochRecord {
            stage,
            epoch,
            steps: batches.len(),
            lr,
            mean: sum.scaled(1.0 / batches.len() as f64),
            param_hash: param_hash(&[&params]),
            validation: validation.clone(),
            seconds: t0.elapsed().as_secs_f64(),
        };
        log.line(&EpochLine {
            kind: "epoch",
            record: &rec,
            warnings: &[],
        })?;
        let ckpt = Checkpoint {
            config_hash: cfg.hash(),
            stage,
            epoch,
            networks: net.clone(),
            params: params.clone(),
            disc: ParamSet::new(),
            opt_g: Some(opt.clone()),
            opt_d: None,
            metrics: validation.clone(),
        };
        ckpt.save(&last_checkpoint_path(&cfg.out_dir, stage))?;
        let score = validation.get("psnr").copied().unwrap_or(-rec.mean.l1);
        if score > best {
            best = score;
            ckpt.save(&best_checkpoint_path(&cfg.out_dir, stage))?;
        }
        epochs.push(rec);
    }
    log.flush()?;
    Ok(TrainOutcome {
        last: Checkpoint {
            config_hash: cfg.hash(),
            stage,
            epoch: cfg.ae_epochs.saturating_sub(1),
            networks: net.clone(),
            params,
            disc: ParamSet::new(),
            opt_g: Some(opt),
            opt_d: None,
            metrics: epochs.last().map(|e| e.validation.clone()).unwrap_or_default(),
        },
        epochs,
        warnings: Vec::new(),
    })
}

/// Test-split probe: codebook assignment statistics and reconstruction PSNR.
pub struct Probe {
    pub psnr: f64,
    pub assignments: Option<AssignmentStats>,
}

pub fn probe<T: Scalar>(net: &Networks, params: &ParamSet<T>, data: &SplitData<T>) -> Result<Probe> {
    let mut psnr = 0.0;
    let mut assigned = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(PROBE_BATCH) {
        let g = Graph::new();
        let b = Binder::inference(&g, params);
        let y = g.constant(stack(&data.projection, chunk)?);
        let (x, a) = net.reconstruct_test(&b, y)?;
        let x = x.value();
        for (k, &i) in chunk.iter().enumerate() {
            psnr += metrics::psnr(&data.hidden[i], &ImageGrid::from_array(&x, k)?, 1.0)?;
        }
        if let Some(a) = a {
            assigned.extend(a);
        }
    }
    let assignments = if net.flags.no_vq {
        None
    } else {
        Some(AssignmentStats::new(net.arch.n_conditions, &data.condition_ids, &assigned)?)
    };
    Ok(Probe {
        psnr: psnr / data.len() as f64,
        assignments,
    })
}

/// Stage 2 from a pretrained autoencoder checkpoint.
pub fn train_joint<T: Scalar>(cfg: &TrainConfig, ae: &Checkpoint<T>) -> Result<TrainOutcome<T>> {
    let m = Manifest::open(&cfg.manifest)?;
    let train = SplitData::<T>::load(&m, Split::Train)?;
    let val = SplitData::<T>::load(&m, Split::Test)?;
    train_joint_on(cfg, &networks_for(cfg, &m)?, ae, &train, Some(&val))
}

pub fn train_joint_on<T: Scalar>(
    cfg: &TrainConfig,
    net: &Networks,
    ae: &Checkpoint<T>,
    train: &SplitData<T>,
    val: Option<&SplitData<T>>,
) -> Result<TrainOutcome<T>> {
    if !ae.networks.arch.same_autoencoder(&net.arch) {
        return Err(Error::Contract(format!(
            "autoencoder checkpoint architecture {:?} does not fit {:?}",
            ae.networks.arch, net.arch
        )));
    }
    if ae.stage != Stage::Autoencoder {
        return Err(Error::Contract("joint training starts from an autoencoder checkpoint".into()));
    }
    let stage = Stage::Joint;
    let (mut params, mut disc) = net.init_params::<T>(derive_seed(cfg.seed, &[11]))?;
    params.extend(&ae.params.subset(&format!("{HIDDEN_ENCODER}.")));
    params.extend(&ae.params.subset(&format!("{HIDDEN_DECODER}.")));
    let frozen = joint_frozen_prefixes(cfg);
    let adamw = AdamConfig::adamw(cfg.joint_beta1, cfg.joint_beta2, cfg.joint_weight_decay);
    let mut opt_g = Adam::new(adamw);
    let mut opt_d = Adam::new(adamw);
    let w = cfg.effective_weights();
    let total = total_steps(cfg.joint_epochs, train.len(), cfg.batch_size);
    let mut log = RunLog::open(&cfg.out_dir, stage)?;
    let mut epochs = Vec::with_capacity(cfg.joint_epochs);
    let mut warnings = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut step = 0;
    let mut lr = cfg.joint_lr_init;
    let joint = !net.flags.no_joint;

    for epoch in 0..cfg.joint_epochs {
        let t0 = Instant::now();
        let mut sum = LossReport::default();
        let mut n_batches = 0;
        for (bi, batch) in train
            .batches(cfg.batch_size, derive_seed(cfg.seed, &[13, epoch as u64]))?
            .enumerate()
        {
            lr = cosine_lr(step, total, cfg.joint_lr_init, cfg.joint_lr_final);
            let mut gan_d = 0.0;
            if joint {
                for _ in 0..cfg.disc_steps {
                    gan_d = discriminator_step(cfg, net, &params, &mut disc, &mut opt_d, &batch, lr)?;
                    if !gan_d.is_finite() {
                        let report = LossReport {
                            gan_d,
                            ..Default::default()
                        }
                        .with_totals(&w);
                        finite_or_abort(&report, stage, epoch, bi)?;
                    }
                }
            }
            let mut report = generator_step(cfg, net, &mut params, &disc, &mut opt_g, &batch, &frozen, lr)?;
            report.gan_d = gan_d;
            let report = report.with_totals(&w);
            finite_or_abort(&report, stage, epoch, bi)?;
            if cfg.log_steps {
                log.line(&StepRecord {
                    kind: "step",
                    stage,
                    epoch,
                    step,
                    lr,
                    report: &report,
                })?;
            }
            sum.accumulate(&report);
            n_batches += 1;
            step += 1;
        }

        let mut validation = BTreeMap::new();
        let mut epoch_warnings = Vec::new();
        if let Some(v) = val {
            let p = probe(net, &params, v)?;
            validation.insert("psnr".to_string(), p.psnr);
            if let Some(a) = p.assignments {
                validation.insert("codebook_accuracy".to_string(), a.accuracy());
                let unused = a.unused_codes();
                if !unused.is_empty() {
                    epoch_warnings.push(format!(
                        "codebook collapse: codes {unused:?} received no test assignments in epoch {epoch}"
                    ));
                }
            }
        }
        for msg in &epoch_warnings {
            eprintln!("warning: {msg}");
        }
        let rec = EpochRecord {
            stage,
            epoch,
            steps: n_batches,
            lr,
            mean: sum.scaled(1.0 / n_batches.max(1) as f64),
            param_hash: param_hash(&[&params, &disc]),
            validation: validation.clone(),
            seconds: t0.elapsed().as_secs_f64(),
        };
        log.line(&EpochLine {
            kind: "epoch",
            record: &rec,
            warnings: &epoch_warnings,
        })?;
        warnings.extend(epoch_warnings);
        let ckpt = Checkpoint {
            config_hash: cfg.hash(),
            stage,
            epoch,
            networks: net.clone(),
            params: params.clone(),
            disc: disc.clone(),
            opt_g: Some(opt_g.clone()),
            opt_d: joint.then(|| opt_d.clone()),
            metrics: validation.clone(),
        };
        ckpt.save(&last_checkpoint_path(&cfg.out_dir, stage))?;
        let score = validation.get("psnr").copied().unwrap_or(-rec.mean.total_g);
        if score > best {
            best = score;
            ckpt.save(&best_checkpoint_path(&cfg.out_dir, stage))?;
        }
        epochs.push(rec);
    }
    log.flush()?;
    Ok(TrainOutcome {
        last: Checkpoint {
            config_hash: cfg.hash(),
            stage,
            epoch: cfg.joint_epochs.saturating_sub(1),
            networks: net.clone(),
            params,
            disc,
            opt_g: Some(opt_g),
            opt_d: joint.then_some(opt_d),
            metrics: epochs.last().map(|e| e.validation.clone()).unwrap_or_default(),
        },
        epochs,
        warnings,
    })
}

/// Parameter prefixes held fixed during the joint generator step.
pub fn joint_frozen_prefixes(cfg: &TrainConfig) -> Vec<String> {
    let mut frozen = vec![format!("{HIDDEN_ENCODER}."), format!("{PERCEPTUAL}.")];
    if cfg.decoder_frozen() {
        frozen.push(format!("{HIDDEN_DECODER}."));
    }
    frozen
}

/// One discriminator update on `(x, y)` against `(x, G_p(x, z))`; the
/// generator side is read-only. Returns the hinge loss before the update.
pub fn discriminator_step<T: Scalar>(
    cfg: &TrainConfig,
    net: &Networks,
    params: &ParamSet<T>,
    disc: &mut ParamSet<T>,
    opt_d: &mut Adam<T>,
    batch: &Batch<T>,
    lr: f64,
) -> Result<f64> {
    let g = Graph::new();
    let gb = Binder::inference(&g, params);
    let db = Binder::new(&g, disc);
    let x = g.constant(batch.hidden.clone());
    let y = g.constant(batch.projection.clone());
    let z = train_code(net, &gb, y, &batch.condition_ids)?;
    let fake = net.reproject(&gb, x, z)?;
    let real_s = net.discriminate(&db, x, y)?;
    let fake_s = net.discriminate(&db, x, fake)?;
    let terms = losses::gan_losses(&real_s, &fake_s)?;
    let gan_d = terms.discriminator.item().as_f64();
    if !gan_d.is_finite() {
        return Ok(gan_d);
    }
    let mut grads = g.backward(terms.discriminator);
    let mut grads = db.collect(&mut grads);
    drop(db);
    if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut grads, cfg.grad_clip);
    }
    opt_d.step(disc, &grads, lr);
    Ok(gan_d)
}

/// One generator update; the discriminator is read-only. The returned
/// report has `gan_d = 0` and no totals; a non-finite loss skips the update.
#[allow(clippy::too_many_arguments)]
pub fn generator_step<T: Scalar>(
    cfg: &TrainConfig,
    net: &Networks,
    params: &mut ParamSet<T>,
    disc: &ParamSet<T>,
    opt_g: &mut Adam<T>,
    batch: &Batch<T>,
    frozen: &[String],
    lr: f64,
) -> Result<LossReport> {
    let w = cfg.effective_weights();
    let labels = &batch.condition_ids;
    let (n_c, n_d) = (net.arch.n_conditions, net.arch.code_dim);
    let g = Graph::new();
    let gb = Binder::new(&g, params).with_frozen(frozen.iter().cloned());
    let db = Binder::inference(&g, disc);
    let x = g.constant(batch.hidden.clone());
    let y = g.constant(batch.projection.clone());
    let l = net.encode_condition(&gb, y)?;
    let codes = codebook::codes(&gb, n_c, n_d);
    let z = if net.flags.no_vq { l } else { codes.gather_rows(labels) };
    let (x_rec, lat_r) = net.reconstruct(&gb, y, z)?;
    let lat_h = net.encode_hidden(&gb, x)?.latent;
    let rec = losses::recon_loss(x, x_rec, lat_h, lat_r, w.lambda1)?;
    let mut report = LossReport {
        l1: rec.l1.item().as_f64(),
        ot: rec.ot.item().as_f64(),
        ..Default::default()
    };
    let mut total_g = rec.total;
    if !net.flags.no_vq {
        let vq = codebook::vq_terms(l, codes, labels, w.tau)?;
        report.vq_infonce = vq.infonce.item().as_f64();
        report.vq_codebook = vq.codebook.item().as_f64();
        report.vq_commit = vq.commit.item().as_f64();
        let vq_total = vq
            .infonce
            .add(vq.codebook.scale(T::lit(w.alpha)))
            .add(vq.commit.scale(T::lit(w.beta)));
        total_g = total_g.add(vq_total.scale(T::lit(w.lambda_vq)));
    }
    if !net.flags.no_joint {
        let y_rep = net.reproject(&gb, x, z)?;
        let fake_s = net.discriminate(&db, x, y_rep)?;
        let adv = losses::gan_losses(&fake_s, &fake_s)?.generator;
        let perc = losses::perceptual_loss(net, &gb, y, y_rep)?;
        report.gan_g = adv.item().as_f64();
        report.perceptual = perc.item().as_f64();
        total_g = total_g.add(adv.add(perc.scale(T::lit(w.lambda2))).scale(T::lit(w.lambda_gan)));
    }
    if !report.clone().with_totals(&w).non_finite_terms().is_empty() {
        return Ok(report);
    }
    let mut grads = g.backward(total_g);
    let mut grads = gb.collect(&mut grads);
    drop(gb);
    if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut grads, cfg.grad_clip);
    }
    opt_g.step(params, &grads, lr);
    if let Some(c) = params.get_mut(codebook::CODES) {
        nn::normalize_rows(c);
    }
    Ok(report)
}

/// Training-time code: the labelled codebook row, or the raw latent without quantization.
fn train_code<'g, T: Scalar>(
    net: &Networks,
    p: &Binder<'g, '_, T>,
    y: nlos_tensor::Var<'g, T>,
    labels: &[usize],
) -> Result<nlos_tensor::Var<'g, T>> {
    if net.flags.no_vq {
        net.encode_condition(p, y)
    } else {
        Ok(codebook::codes(p, net.arch.n_conditions, net.arch.code_dim).gather_rows(labels))
    }
}

/// Both stages back to back.
pub fn train_full<T: Scalar>(cfg: &TrainConfig) -> Result<(TrainOutcome<T>, TrainOutcome<T>)> {
    let ae = pretrain_autoencoder::<T>(cfg)?;
    let joint = train_joint(cfg, &ae.last)?;
    Ok((ae, joint))
}
