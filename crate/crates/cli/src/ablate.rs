use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use log::{error, info};

use csd_core::config::RunConfig;
use csd_core::data::load_pairs;
use csd_core::eval::evaluate_pairs;
use csd_core::model::{ModelConfig, Variant};
use csd_core::train::{FeatureExtractor, TrainConfig, Trainer, PERCEPTUAL_SEED};
use csd_core::Image;

use crate::common::{create_dir, echo_config, load_manifest, parallel_map, write_text, CliError, CliResult, ConfigArgs};

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Paired training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Paired manifest to score every cell on; defaults to `--data`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variants (`a`..`f` or `arc_a`..`arc_f`).
    #[arg(long, default_value = "a,b,c,d,e,f", value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Comma-separated guidance settings (`on`, `off`).
    #[arg(long, default_value = "on,off", value_delimiter = ',')]
    pub guidance: Vec<String>,
    /// Overrides the `seed` setting.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

struct Cell {
    variant: Variant,
    guidance: bool,
}

impl Cell {
    fn name(&self) -> String {
        format!("{}_{}", self.variant, if self.guidance { "on" } else { "off" })
    }
}

struct CellResult {
    params: usize,
    final_loss: f64,
    psnr: f64,
    ssim: f64,
}

fn parse_guidance(s: &str) -> CliResult<bool> {
    match s.trim() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(CliError::Usage(format!("--guidance takes on/off, got `{other}`"))),
    }
}

fn run_cell(
    cell: &Cell,
    base: &RunConfig,
    train: &[(Image, Image)],
    held: &[(Image, Image)],
    out: &std::path::Path,
) -> CliResult<CellResult> {
    let model = ModelConfig {
        guidance: cell.guidance,
        ..base.model.clone().with_variant(cell.variant)
    };
    let train_cfg = TrainConfig {
        checkpoint_every: 0,
        checkpoint_dir: None,
        ..base.train.clone()
    };
    let mut trainer = Trainer::new(&model, None, train_cfg, FeatureExtractor::seeded(PERCEPTUAL_SEED))?;
    let report = trainer.run_paired(train, |_| {})?;
    let metrics = evaluate_pairs(
        &trainer.model,
        held.iter().enumerate().map(|(k, (l, n))| (format!("{k:04}"), l, n)),
    );
    let dir = out.join(cell.name());
    create_dir(&dir)?;
    let cell_cfg = RunConfig {
        model,
        ..base.clone()
    };
    echo_config(&dir, &cell_cfg.resolved())?;
    write_text(&dir.join("losses.csv"), &report.to_csv())?;
    write_text(&dir.join("metrics.csv"), &metrics.to_csv())?;
    if let Some((id, msg)) = metrics.failures.first() {
        return Err(CliError::Data(format!("sample {id}: {msg}")));
    }
    Ok(CellResult {
        params: trainer.model.count_params(),
        final_loss: report.last_total().unwrap_or(f64::NAN),
        psnr: metrics.mean_psnr(),
        ssim: metrics.mean_ssim(),
    })
}

pub fn run(args: &AblateArgs) -> CliResult {
    let mut cfg = args.cfg.resolve()?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let variants = args
        .variants
        .iter()
        .map(|v| v.trim().parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    let guidance = args.guidance.iter().map(|g| parse_guidance(g)).collect::<CliResult<Vec<_>>>()?;
    let train = load_pairs(&load_manifest(&args.data)?)?;
    let held = match &args.eval {
        Some(p) => load_pairs(&load_manifest(p)?)?,
        None => train.clone(),
    };
    create_dir(&args.out)?;
    echo_config(&args.out, &cfg.resolved())?;

    let cells: Vec<Cell> = variants
        .iter()
        .flat_map(|&variant| guidance.iter().map(move |&guidance| Cell { variant, guidance }))
        .collect();
    info!("ablation: {} cells, {} training pairs", cells.len(), train.len());
    let results = parallel_map(&cells, |c| run_cell(c, &cfg, &train, &held, &args.out));

    let mut csv = String::from("variant,guidance,params,final_loss,psnr_db,ssim,status\n");
    let mut failed = 0;
    for (cell, r) in cells.iter().zip(&results) {
        let g = if cell.guidance { "on" } else { "off" };
        match r {
            Ok(r) => {
                let _ = writeln!(
                    csv,
                    "{},{g},{},{:.6},{:.4},{:.6},ok",
                    cell.variant, r.params, r.final_loss, r.psnr, r.ssim
                );
                println!("{:<10} PSNR {:>8.4} dB  SSIM {:.4}", cell.name(), r.psnr, r.ssim);
            }
            Err(e) => {
                failed += 1;
                error!("{}: {e}", cell.name());
                let msg = e.to_string().replace([',', '\n'], ";");
                let _ = writeln!(csv, "{},{g},,,,,error: {msg}", cell.variant);
            }
        }
    }
    write_text(&args.out.join("ablation.csv"), &csv)?;
    if failed == cells.len() {
        return Err(CliError::Data("every ablation cell failed".into()));
    }
    Ok(())
}
