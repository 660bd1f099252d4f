//! Command-line surface.
//!
//! Every subcommand accepts `--config <file>` and `--seed <n>`. Failures print
//! one line `error: <class>: <message>` to stderr and exit 1; usage errors
//! print the usage text and exit 2.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::TrainConfig;
use crate::dataset::{generate_synthetic_dataset, Manifest, Split, SplitData};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions};
use crate::image::ImageGrid;
use crate::training::{self, last_checkpoint_path};
use crate::Real;

#[derive(Parser, Debug)]
#[command(name = "nlos-ltm", version, about = "Passive NLOS reconstruction with learned transport modulation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat TOML config file; `NLOS_<KEY>` environment variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Tikhonov,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset described by the config.
    Simulate,
    /// Stage 1: train the hidden-image autoencoder.
    PretrainAe,
    /// Stage 2 (and stage 1 first unless `--ae` is given).
    Train {
        /// Pretrained autoencoder checkpoint.
        #[arg(long)]
        ae: Option<PathBuf>,
    },
    /// Per-condition PSNR/SSIM report.
    Eval {
        /// Defaults to `<out_dir>/joint_last.ckpt`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Adds the classical column with this ridge weight.
        #[arg(long)]
        tikhonov_reg: Option<f64>,
        /// Adds a condition-agnostic model column.
        #[arg(long)]
        agnostic: Option<PathBuf>,
        /// Report path stem; `.json` and `.txt` are written. Defaults to `<out_dir>/metrics`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct a hidden image from one projection image.
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a hidden image's projection under a learned condition code.
    Reproject {
        #[arg(long)]
        hidden: PathBuf,
        #[arg(long)]
        condition_id: usize,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Codebook assignment confusion matrix.
    CodebookStats {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Classical reconstruction from the cached transport matrices.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        reg: f64,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Writes the column as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_ckpt(cfg: &TrainConfig, ckpt: Option<PathBuf>) -> PathBuf {
    ckpt.unwrap_or_else(|| last_checkpoint_path(&cfg.out_dir, Stage::Joint))
}

fn images_arg(path: &Path, res: (usize, usize), channels: usize, what: &str) -> Result<ImageGrid<Real>> {
    let im = ImageGrid::<Real>::read_png(path)?.with_channels(channels)?;
    if (im.height(), im.width()) != res {
        return Err(Error::Dimension(format!(
            "{what} {} is {}x{}, the checkpoint expects {}x{}",
            path.display(),
            im.height(),
            im.width(),
            res.0,
            res.1
        )));
    }
    Ok(im)
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn summarize(stage: &str, outcome: &training::TrainOutcome<Real>) {
    if let Some(e) = outcome.epochs.last() {
        let v: Vec<String> = e.validation.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("{stage}: {} epochs, last total_g {:.5}, {}", outcome.epochs.len(), e.mean.total_g, v.join(" "));
    }
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
}

/// Execute one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Simulate => {
            let m = generate_synthetic_dataset(
                &cfg.sim_root,
                &cfg.sim_source(),
                &cfg.sim_conditions()?,
                &cfg.sim_geometry(),
                cfg.sim_counts(),
                cfg.seed,
            )?;
            println!(
                "wrote {} records over {} conditions to {}",
                m.records.len(),
                m.num_conditions(),
                cfg.sim_root.join(crate::dataset::MANIFEST_FILE).display()
            );
        }
        Command::PretrainAe => {
            let out = training::pretrain_autoencoder::<Real>(&cfg)?;
            summarize("autoencoder", &out);
        }
        Command::Train { ae } => {
            let ae = match ae {
                Some(p) => Checkpoint::<Real>::load(&p)?,
                None => {
                    let out = training::pretrain_autoencoder::<Real>(&cfg)?;
                    summarize("autoencoder", &out);
                    out.last
                }
            };
            let out = training::train_joint(&cfg, &ae)?;
            summarize("joint", &out);
        }
        Command::Eval {
            ckpt,
            split,
            tikhonov_reg,
            agnostic,
            out,
        } => {
            let m = Manifest::open(&cfg.manifest)?;
            let ckpt = Checkpoint::<Real>::load(&default_ckpt(&cfg, ckpt))?;
            let agnostic = agnostic.map(|p| Checkpoint::<Real>::load(&p)).transpose()?;
            let opts = EvalOptions {
                tikhonov_reg,
                agnostic: agnostic.as_ref(),
            };
            let report = eval::evaluate(&ckpt, &m, split.into(), &opts)?;
            let stem = out.unwrap_or_else(|| cfg.out_dir.join("metrics"));
            report.save(&stem)?;
            print!("{}", report.to_table());
        }
        Command::Reconstruct { input, ckpt, out } => {
            let ckpt = Checkpoint::<Real>::load(&ckpt)?;
            let arch = &ckpt.networks.arch;
            let y = images_arg(&input, arch.wall_res, arch.channels, "projection")?;
            let (x, idx) = eval::reconstruct_all(&ckpt.networks, &ckpt, std::slice::from_ref(&y))?;
            x[0].write_png16(&out)?;
            match idx {
                Some(i) => println!("wrote {} (code {})", out.display(), i[0]),
                None => println!("wrote {}", out.display()),
            }
        }
        Command::Reproject {
            hidden,
            condition_id,
            ckpt,
            out,
        } => {
            let ckpt = Checkpoint::<Real>::load(&ckpt)?;
            let arch = &ckpt.networks.arch;
            let x = images_arg(&hidden, arch.hidden_res, arch.channels, "hidden image")?;
            let y = eval::reproject_all(&ckpt, std::slice::from_ref(&x), &[condition_id])?;
            y[0].write_png16(&out)?;
            println!("wrote {}", out.display());
        }
        Command::CodebookStats { ckpt, split, json } => {
            let m = Manifest::open(&cfg.manifest)?;
            let ckpt = Checkpoint::<Real>::load(&default_ckpt(&cfg, ckpt))?;
            let data = SplitData::<Real>::load(&m, split.into())?;
            let (_, idx) = eval::reconstruct_all(&ckpt.networks, &ckpt, &data.projection)?;
            let idx = idx.ok_or_else(|| Error::Contract("checkpoint was trained without a codebook".into()))?;
            let stats = crate::codebook::AssignmentStats::new(m.num_conditions(), &data.condition_ids, &idx)?;
            if json {
                println!("{}", serde_json::to_string(&stats)?);
            } else {
                print!("{}", eval::confusion_table(&stats));
            }
        }
        Command::Baseline { method, reg, split, out } => {
            let Method::Tikhonov = method;
            let m = Manifest::open(&cfg.manifest)?;
            let col = eval::tikhonov_baseline::<Real>(&m, split.into(), reg)?;
            if let Some(p) = out {
                write_json(&p, &serde_json::to_string_pretty(&col)?)?;
            }
            print!("{}", col.to_table());
        }
    }
    Ok(())
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.class(), e.to_string().replace('\n', " "));
            1
        }
    }
}
