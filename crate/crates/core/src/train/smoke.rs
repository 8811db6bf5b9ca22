//! Controlled synthetic benchmark: train on generated pairs, score on a
//! disjoint generated set.

use std::fmt::Write as _;

use super::losses::FeatureExtractor;
use super::trainer::{TrainConfig, TrainReport, Trainer, PERCEPTUAL_SEED};
use crate::autodiff::{OptimizerConfig, OptimizerKind};
use crate::data::{synth_dataset, SynthConfig};
use crate::error::Result;
use crate::eval::{evaluate_pairs, Identity};
use crate::image::Image;
use crate::model::{ModelConfig, Variant};

/// Seed offset of the held-out pairs relative to the training pairs.
const HELD_OUT_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug, PartialEq)]
pub struct SmokeConfig {
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    pub size: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        SmokeConfig {
            train_pairs: 64,
            held_out_pairs: 16,
            size: 32,
            iterations: 200,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
            synth: SynthConfig::default(),
        }
    }
}

impl SmokeConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: self.lr,
                ..Default::default()
            },
            seed: self.seed,
            ..Default::default()
        }
    }

    fn sets(&self) -> Result<(Vec<(Image, Image)>, Vec<(Image, Image)>)> {
        let make = |count, seed| -> Result<Vec<(Image, Image)>> {
            let cfg = SynthConfig {
                seed,
                ..self.synth.clone()
            };
            Ok(synth_dataset(count, self.size, &cfg)?
                .into_iter()
                .map(|s| (s.low, s.normal))
                .collect())
        };
        Ok((
            make(self.train_pairs, self.synth.seed)?,
            make(self.held_out_pairs, self.synth.seed.wrapping_add(HELD_OUT_OFFSET))?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct SmokeOutcome {
    pub report: TrainReport,
    /// Mean total loss of the first and the last ten iterations.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub input_psnr: f64,
    pub output_psnr: f64,
    pub output_ssim: f64,
    pub params: usize,
}

impl SmokeOutcome {
    pub fn psnr_gain(&self) -> f64 {
        self.output_psnr - self.input_psnr
    }
}

fn window_mean(report: &TrainReport, from_end: bool) -> f64 {
    let n = report.records.len().min(10);
    let slice = if from_end {
        &report.records[report.records.len() - n..]
    } else {
        &report.records[..n]
    };
    slice.iter().map(|r| r.total).sum::<f64>() / n as f64
}

/// Trains `model` on the synthetic training pairs and scores it on the
/// held-out pairs.
pub fn smoke_run(model: &ModelConfig, smoke: &SmokeConfig) -> Result<SmokeOutcome> {
    let (train, held) = smoke.sets()?;
    let mut trainer = Trainer::new(model, None, smoke.train_config(), FeatureExtractor::seeded(PERCEPTUAL_SEED))?;
    let report = trainer.run_paired(&train, |_| {})?;
    let samples = || held.iter().enumerate().map(|(k, (l, n))| (format!("held{k:02}"), l, n));
    let baseline = evaluate_pairs(&Identity, samples());
    let scored = evaluate_pairs(&trainer.model, samples());
    if let Some((id, msg)) = scored.failures.first() {
        return Err(crate::CsdError::invalid("smoke_run", format!("{id}: {msg}")));
    }
    Ok(SmokeOutcome {
        initial_loss: window_mean(&report, false),
        final_loss: window_mean(&report, true),
        input_psnr: baseline.mean_psnr(),
        output_psnr: scored.mean_psnr(),
        output_ssim: scored.mean_ssim(),
        params: trainer.model.count_params(),
        report,
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub guidance: bool,
    pub outcome: SmokeOutcome,
}

/// Runs every `(variant, guidance)` combination under one budget. `base`
/// supplies the channel plan and the remaining model settings.
pub fn ablation(base: &ModelConfig, variants: &[Variant], guidance: &[bool], smoke: &SmokeConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &g in guidance {
            let cfg = ModelConfig {
                guidance: g,
                ..base.clone().with_variant(variant)
            };
            rows.push(AblationRow {
                variant,
                guidance: g,
                outcome: smoke_run(&cfg, smoke)?,
            });
        }
    }
    Ok(rows)
}

/// `variant,guidance,params,initial_loss,final_loss,input_psnr,output_psnr,output_ssim`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,guidance,params,initial_loss,final_loss,input_psnr,output_psnr,output_ssim\n");
    for r in rows {
        let o = &r.outcome;
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.4},{:.4},{:.6}",
            r.variant, r.guidance, o.params, o.initial_loss, o.final_loss, o.input_psnr, o.output_psnr, o.output_ssim
        );
    }
    out
}
