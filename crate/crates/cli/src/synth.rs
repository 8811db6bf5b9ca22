use std::path::PathBuf;

use clap::Args;
use log::info;

use csd_core::data::{synth_dataset, synth_pair, Manifest, PairedSample, SynthConfig};
use csd_core::model::EXTENT_MULTIPLE;

use crate::common::{create_dir, echo_config, input_images, load, save, write_text, CliError, CliResult, ConfigArgs};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// `builtin` for procedural scenes, or a directory of PPM/PGM base images.
    #[arg(long, default_value = "builtin")]
    pub base: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Overrides `synth.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Side of the builtin scenes; a multiple of 16.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn run(args: &SynthArgs) -> CliResult {
    let mut cfg = args.cfg.resolve()?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    if args.count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let samples = if args.base == "builtin" {
        if args.size == 0 || args.size % EXTENT_MULTIPLE != 0 {
            return Err(CliError::Usage(format!("--size must be a positive multiple of {EXTENT_MULTIPLE}")));
        }
        synth_dataset(args.count, args.size, &cfg.synth)?
    } else {
        let bases = input_images(args.base.as_ref())?
            .iter()
            .map(|p| load(p))
            .collect::<CliResult<Vec<_>>>()?;
        (0..args.count)
            .map(|k| {
                let pair_cfg = SynthConfig {
                    seed: cfg.synth.seed.wrapping_add(k as u64),
                    ..cfg.synth.clone()
                };
                Ok(synth_pair(&bases[k % bases.len()], &pair_cfg)?)
            })
            .collect::<CliResult<Vec<PairedSample>>>()?
    };

    for sub in ["low", "normal", "illum"] {
        create_dir(&args.out.join(sub))?;
    }
    let mut pairs = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        let ext = if s.low.channels() == 1 { "pgm" } else { "ppm" };
        let low = PathBuf::from(format!("low/{k:04}.{ext}"));
        let normal = PathBuf::from(format!("normal/{k:04}.{ext}"));
        save(&args.out.join(&low), &s.low)?;
        save(&args.out.join(&normal), &s.normal)?;
        save(&args.out.join(format!("illum/{k:04}.pgm")), &s.oracle_illum)?;
        pairs.push((low, normal));
    }
    let lows = Manifest::Unpaired(pairs.iter().map(|p| p.0.clone()).collect());
    let normals = Manifest::Unpaired(pairs.iter().map(|p| p.1.clone()).collect());
    write_text(&args.out.join("pairs.txt"), &Manifest::Paired(pairs).to_text())?;
    write_text(&args.out.join("low.txt"), &lows.to_text())?;
    write_text(&args.out.join("normal.txt"), &normals.to_text())?;
    echo_config(&args.out, &cfg.resolved())?;
    info!("wrote {} pairs to {}", samples.len(), args.out.display());
    Ok(())
}
