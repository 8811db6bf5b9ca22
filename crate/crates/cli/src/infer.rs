use std::path::{Path, PathBuf};

use clap::Args;
use log::{error, info};

use csd_core::eval::{evaluate, Enhancer, Identity};
use csd_core::model::EnhanceModel;
use csd_core::retinex::{illumination_guidance, retinex_reconstruct, to_grayscale};
use csd_core::train::Checkpoint;
use csd_core::Image;

use crate::common::{
    checkpoint_config, create_dir, echo_config, input_images, load, load_manifest, parallel_map, save, stem,
    write_text, CliError, CliResult,
};

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint written by `csd train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// An image or a directory of images.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GuidanceArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint to score; the identity mapping is scored when omitted.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Paired manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn load_model(path: &Path) -> CliResult<(EnhanceModel, String)> {
    let ck = Checkpoint::load(path)?;
    let text = checkpoint_config(&ck);
    Ok((ck.model, text))
}

/// Runs `job` on every input file, logging failures per file. Fails with a
/// data error if any file failed.
fn per_file(inputs: &[PathBuf], job: impl Fn(&Path, &Image) -> CliResult + Sync) -> CliResult {
    let results = parallel_map(inputs, |p| load(p).and_then(|img| job(p, &img)));
    let mut failed = 0;
    for (p, r) in inputs.iter().zip(results) {
        if let Err(e) = r {
            error!("{}: {e}", p.display());
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Data(format!("{failed} of {} inputs failed", inputs.len())));
    }
    info!("processed {} inputs", inputs.len());
    Ok(())
}

pub fn enhance(args: &InferArgs) -> CliResult {
    let (model, text) = load_model(&args.ckpt)?;
    let inputs = input_images(&args.input)?;
    create_dir(&args.out)?;
    echo_config(&args.out, &text)?;
    per_file(&inputs, |p, img| {
        let out = model.enhance(img)?;
        save(&args.out.join(format!("{}.ppm", stem(p))), &out.enhanced)
    })
}

/// Writes `<stem>_reflectance.ppm`, `<stem>_illumination.pgm`,
/// `<stem>_enhanced.ppm` and `<stem>_reconstruction.ppm`.
pub fn decompose(args: &InferArgs) -> CliResult {
    let (model, text) = load_model(&args.ckpt)?;
    let inputs = input_images(&args.input)?;
    create_dir(&args.out)?;
    echo_config(&args.out, &text)?;
    per_file(&inputs, |p, img| {
        let out = model.enhance(img)?;
        let name = stem(p);
        let recon = retinex_reconstruct(&out.enhanced, &out.illumination)?;
        save(&args.out.join(format!("{name}_reflectance.ppm")), &out.reflectance)?;
        save(&args.out.join(format!("{name}_illumination.pgm")), &out.illumination)?;
        save(&args.out.join(format!("{name}_enhanced.ppm")), &out.enhanced)?;
        save(&args.out.join(format!("{name}_reconstruction.ppm")), &recon)
    })
}

/// Writes the min-max normalized guidance map as `<stem>_guidance.pgm`.
pub fn guidance(args: &GuidanceArgs) -> CliResult {
    let inputs = input_images(&args.input)?;
    create_dir(&args.out)?;
    echo_config(&args.out, "")?;
    per_file(&inputs, |p, img| {
        let gray = if img.channels() == 1 { img.clone() } else { to_grayscale(img) };
        let map = illumination_guidance(&gray)?;
        save(&args.out.join(format!("{}_guidance.pgm", stem(p))), &map.normalized())
    })
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> CliResult {
    let manifest = load_manifest(&args.data)?;
    let (enhancer, text): (Box<dyn Enhancer>, String) = match &args.ckpt {
        Some(p) => {
            let (m, t) = load_model(p)?;
            (Box::new(m), t)
        }
        None => (Box::new(Identity), String::new()),
    };
    let report = evaluate(enhancer.as_ref(), &manifest)?;
    create_dir(&args.out)?;
    echo_config(&args.out, &text)?;
    write_text(&args.out.join("metrics.csv"), &report.to_csv())?;
    for (id, msg) in &report.failures {
        error!("{id}: {msg}");
    }
    println!(
        "{} scored, {} failed: mean PSNR {:.4} dB, mean SSIM {:.6}",
        report.rows.len(),
        report.failures.len(),
        report.mean_psnr(),
        report.mean_ssim()
    );
    if report.rows.is_empty() {
        return Err(CliError::Data("no sample could be scored".into()));
    }
    Ok(())
}
