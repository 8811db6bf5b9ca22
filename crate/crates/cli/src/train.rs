use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::{error, info, warn};

use csd_core::config::RunConfig;
use csd_core::data::{load_pairs, load_unpaired, Manifest};
use csd_core::train::{Checkpoint, FeatureExtractor, TrainReport, Trainer, PERCEPTUAL_SEED};

use crate::common::{
    checkpoint_config, create_dir, echo_config, load_manifest, write_text, CliError, CliResult, ConfigArgs,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Supervised on low/normal pairs.
    Paired,
    /// Adversarial on an unpaired low set and normal set.
    Gan,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "paired")]
    pub mode: Mode,
    /// Paired mode: one paired manifest. Gan mode: the low-light manifest,
    /// then the normal-light manifest.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the `seed` setting.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint; its settings are applied before the
    /// config file and `--set` overrides.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Perceptual feature extractor weights (10 tensor blocks). A seeded
    /// random extractor is used otherwise.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn manifests(args: &TrainArgs) -> CliResult<Vec<Manifest>> {
    let want = match args.mode {
        Mode::Paired => 1,
        Mode::Gan => 2,
    };
    if args.data.len() != want {
        return Err(CliError::Usage(format!(
            "{:?} mode takes {want} --data manifest(s), got {}",
            args.mode,
            args.data.len()
        )));
    }
    let loaded = args.data.iter().map(|p| load_manifest(p)).collect::<CliResult<Vec<_>>>()?;
    for (m, path) in loaded.iter().zip(&args.data) {
        let ok = matches!((args.mode, m), (Mode::Paired, Manifest::Paired(_)) | (Mode::Gan, Manifest::Unpaired(_)));
        if !ok || m.is_empty() {
            let kind = match args.mode {
                Mode::Paired => "a non-empty paired manifest (low<TAB>normal lines)",
                Mode::Gan => "non-empty unpaired manifests (one path per line)",
            };
            return Err(CliError::Data(format!("{}: {:?} mode needs {kind}", path.display(), args.mode)));
        }
    }
    Ok(loaded)
}

fn write_losses(out: &Path, records: &[csd_core::train::StepRecord]) -> CliResult {
    let report = TrainReport {
        records: records.to_vec(),
    };
    write_text(&out.join("losses.csv"), &report.to_csv())
}

pub fn run(args: &TrainArgs) -> CliResult {
    let data = manifests(args)?;
    let mut cfg = RunConfig::default();
    let resumed = args.resume.as_ref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        cfg.apply_text(&checkpoint_config(ck), args.resume.as_deref().unwrap_or(Path::new("checkpoint")))?;
        // Snapshots of the resumed run belong to its own output directory.
        cfg.train.checkpoint_dir = None;
    }
    args.cfg.apply(&mut cfg)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if cfg.train.checkpoint_every > 0 && cfg.train.checkpoint_dir.is_none() {
        cfg.train.checkpoint_dir = Some(args.out.join("checkpoints"));
    }
    cfg.validate()?;
    create_dir(&args.out)?;
    if let Some(dir) = &cfg.train.checkpoint_dir {
        create_dir(dir)?;
    }
    echo_config(&args.out, &cfg.resolved())?;

    let extractor = match &args.extractor {
        Some(p) => FeatureExtractor::load(p)?,
        None => FeatureExtractor::seeded(PERCEPTUAL_SEED),
    };
    let mut trainer = match resumed {
        Some(ck) => {
            if ck.model.config() != &cfg.model {
                warn!("model settings differ from the checkpoint; the checkpoint's network is used");
            }
            if args.mode == Mode::Gan && ck.disc.is_none() {
                return Err(CliError::Usage("gan mode cannot resume a checkpoint without a discriminator".into()));
            }
            Trainer::from_checkpoint(ck, cfg.train.clone(), extractor)?
        }
        None => {
            let disc = (args.mode == Mode::Gan).then_some(&cfg.disc);
            Trainer::new(&cfg.model, disc, cfg.train.clone(), extractor)?
        }
    };
    info!(
        "{:?} training: {} parameters, iterations {}..{}",
        args.mode,
        trainer.model.count_params(),
        trainer.iteration,
        cfg.train.iterations
    );

    let log_every = (cfg.train.iterations / 20).max(1);
    let mut records = Vec::new();
    let mut observe = |r: &csd_core::train::StepRecord| {
        if r.iteration % log_every == 0 || r.iteration + 1 == cfg.train.iterations {
            info!("iteration {} loss {:.6}", r.iteration, r.total);
        }
        records.push(r.clone());
    };
    let outcome = match args.mode {
        Mode::Paired => load_pairs(&data[0]).and_then(|pairs| trainer.run_paired(&pairs, &mut observe)),
        Mode::Gan => load_unpaired(&data[0]).and_then(|lows| {
            let normals = load_unpaired(&data[1])?;
            trainer.run_adversarial(&lows, &normals, &mut observe)
        }),
    };
    write_losses(&args.out, &records)?;
    if let Err(e) = outcome {
        error!("training stopped at iteration {}: {e}", trainer.iteration);
        return Err(e.into());
    }
    let final_path = args.out.join("final.csdc");
    trainer.checkpoint().save(&final_path)?;
    match (records.first(), records.last()) {
        (Some(a), Some(b)) => println!(
            "trained {} iterations: loss {:.6} -> {:.6}; checkpoint {}",
            records.len(),
            a.total,
            b.total,
            final_path.display()
        ),
        _ => println!("nothing to train; checkpoint {}", final_path.display()),
    }
    Ok(())
}
