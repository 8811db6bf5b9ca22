//! Paired and adversarial training loops.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{optimizer_pairs, set_optimizer, Checkpoint};
use super::losses::{adversarial_losses, csdgan_loss, csdnet_loss, FeatureExtractor, LossTerms, LossWeights};
use crate::autodiff::{Binding, Optimizer, OptimizerConfig, ParamStore, Tape, Tensor, Var};
use crate::data::{crop, patch_offsets};
use crate::error::{CsdError, Result};
use crate::image::Image;
use crate::model::{Connection, Discriminator, DiscriminatorConfig, EnhanceModel, ForwardHooks, ModelConfig};

/// Seed of the frozen perceptual feature extractor used unless a trained
/// one is loaded.
pub const PERCEPTUAL_SEED: u64 = 0x5eed_f00d;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Side of the random square crop taken from every training image. With
    /// `None` all images must share extents that are multiples of 16.
    pub crop_size: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Snapshot period in iterations; 0 disables snapshots.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 4,
            crop_size: None,
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CsdError::Config("train.batch_size must be positive".into()));
        }
        if let Some(c) = self.crop_size {
            if c == 0 || c % 16 != 0 {
                return Err(CsdError::Config(format!("train.crop_size {c} must be a positive multiple of 16")));
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(CsdError::Config("optim.lr must be positive".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(CsdError::Config("optim betas must lie in [0, 1) and eps must be positive".into()));
        }
        self.weights.validate()
    }

    /// `key = value` pairs for `train.`, `loss.`, `optim.` and `seed`.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        let mut pairs = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("train.iterations".into(), self.iterations.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            (
                "train.crop_size".into(),
                self.crop_size.map_or("none".into(), |c| c.to_string()),
            ),
            ("train.checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("loss.w_mse".into(), w.w_mse.to_string()),
            ("loss.w_perc".into(), w.w_perc.to_string()),
            ("loss.w_smooth".into(), w.w_smooth.to_string()),
            ("loss.w_adv".into(), w.w_adv.to_string()),
            ("loss.w_recon".into(), w.w_recon.to_string()),
        ];
        if let Some(dir) = &self.checkpoint_dir {
            pairs.push(("train.checkpoint_dir".into(), dir.display().to_string()));
        }
        pairs.extend(optimizer_pairs(&self.optimizer));
        pairs
    }

    /// Sets one field from its dotted key; `false` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if set_optimizer(&mut self.optimizer, key, value)? {
            return Ok(true);
        }
        let bad = |e: &dyn std::fmt::Display| CsdError::Config(format!("{key}: {e}"));
        let float = |v: &str| v.parse::<f32>().map_err(|e| bad(&e));
        match key {
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            "train.iterations" => self.iterations = value.parse().map_err(|e| bad(&e))?,
            "train.batch_size" => self.batch_size = value.parse().map_err(|e| bad(&e))?,
            "train.crop_size" => {
                self.crop_size = match value {
                    "none" => None,
                    v => Some(v.parse().map_err(|e| bad(&e))?),
                }
            }
            "train.checkpoint_every" => self.checkpoint_every = value.parse().map_err(|e| bad(&e))?,
            "train.checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(value)),
            "loss.w_mse" => self.weights.w_mse = float(value)?,
            "loss.w_perc" => self.weights.w_perc = float(value)?,
            "loss.w_smooth" => self.weights.w_smooth = float(value)?,
            "loss.w_adv" => self.weights.w_adv = float(value)?,
            "loss.w_recon" => self.weights.w_recon = float(value)?,
            k if k.starts_with("train.") || k.starts_with("loss.") => {
                return Err(CsdError::Config(format!("unknown key `{k}`")))
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// splitmix64 over the combined words.
fn mix(words: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &w in words {
        h = h.wrapping_add(w).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

const STREAM_LOW: u64 = 1;
const STREAM_REAL: u64 = 2;
const STREAM_PATCH_FAKE: u64 = 3;
const STREAM_PATCH_REAL: u64 = 4;

/// Dataset indices of the batch at `iteration`. Samples are consumed
/// epoch by epoch, each epoch in its own seeded permutation, so the batch is
/// a pure function of `(seed, iteration)`.
pub fn batch_indices(seed: u64, iteration: u64, len: usize, batch: usize) -> Vec<usize> {
    let mut perms: HashMap<u64, Vec<usize>> = HashMap::new();
    (0..batch as u64)
        .map(|j| {
            let pos = iteration * batch as u64 + j;
            let epoch = pos / len as u64;
            let perm = perms.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..len).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, epoch])));
                p
            });
            perm[(pos % len as u64) as usize]
        })
        .collect()
}

/// Values of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    /// `iteration,<terms…>,total,wall_ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration");
        if let Some(first) = self.records.first() {
            for (name, _) in &first.terms {
                out.push(',');
                out.push_str(name);
            }
        }
        out.push_str(",total,wall_ms\n");
        for r in &self.records {
            let _ = write!(out, "{}", r.iteration);
            for (_, v) in &r.terms {
                let _ = write!(out, ",{v:.6e}");
            }
            let _ = writeln!(out, ",{:.6e},{:.3}", r.total, r.wall_ms);
        }
        out
    }

    pub fn first_total(&self) -> Option<f64> {
        self.records.first().map(|r| r.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.records.last().map(|r| r.total)
    }
}

/// Rejects a step whose loss or gradients are not finite; nothing has been
/// updated at that point.
fn ensure_finite(tape: &Tape, store: &ParamStore, loss: Var, iteration: u64) -> Result<()> {
    if tape.value(loss).is_finite() && store.all_grads_finite() {
        return Ok(());
    }
    let at = tape
        .first_non_finite()
        .unwrap_or_else(|| "parameter gradients".to_string());
    Err(CsdError::NonFinite {
        what: format!("iteration {iteration}: {at}"),
    })
}

fn apply_update(tape: &mut Tape, loss: Var, bind: &Binding, store: &mut ParamStore, opt: &mut Optimizer, it: u64) -> Result<()> {
    tape.backward(loss)?;
    store.zero_grad();
    store.accumulate_grads(tape, bind);
    ensure_finite(tape, store, loss, it)?;
    store.apply_bn_updates(bind);
    opt.step(store);
    Ok(())
}

/// Global and per-patch critic scores of a real and a fake batch.
struct Scores {
    global_real: Vec<Var>,
    global_fake: Vec<Var>,
    local_real: Vec<Var>,
    local_fake: Vec<Var>,
}

fn critic_scores(
    tape: &mut Tape,
    disc: &Discriminator,
    bind: &mut Binding,
    real: Var,
    fake: Var,
    patches: &[(Vec<(usize, usize)>, Vec<(usize, usize)>)],
) -> Result<Scores> {
    let size = disc.config().patch_size;
    let mut s = Scores {
        global_real: vec![disc.forward(tape, bind, real)?],
        global_fake: vec![disc.forward(tape, bind, fake)?],
        local_real: Vec::new(),
        local_fake: Vec::new(),
    };
    for (n, (real_at, fake_at)) in patches.iter().enumerate() {
        for &(top, left) in real_at {
            let p = tape.crop(real, n, top, left, size, size)?;
            s.local_real.push(disc.forward(tape, bind, p)?);
        }
        for &(top, left) in fake_at {
            let p = tape.crop(fake, n, top, left, size, size)?;
            s.local_fake.push(disc.forward(tape, bind, p)?);
        }
    }
    Ok(s)
}

fn record(iteration: u64, tape: &Tape, terms: &LossTerms, extra: &[(&'static str, f64)], started: Instant) -> StepRecord {
    let mut values: Vec<(&'static str, f64)> = terms
        .names
        .iter()
        .zip(&terms.terms)
        .map(|(&n, &v)| (n, tape.value(v).item() as f64))
        .collect();
    values.extend_from_slice(extra);
    StepRecord {
        iteration,
        terms: values,
        total: tape.value(terms.total).item() as f64,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

/// Owns the networks and optimizer state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: EnhanceModel,
    pub optimizer: Optimizer,
    pub disc: Option<(Discriminator, Optimizer)>,
    /// Completed iterations.
    pub iteration: u64,
    config: TrainConfig,
    extractor: FeatureExtractor,
}

impl Trainer {
    /// Fresh networks initialised from `config.seed`; a discriminator is
    /// built when `disc` is given.
    pub fn new(
        model: &ModelConfig,
        disc: Option<&DiscriminatorConfig>,
        config: TrainConfig,
        extractor: FeatureExtractor,
    ) -> Result<Self> {
        config.validate()?;
        let model = EnhanceModel::build(model, config.seed)?;
        let optimizer = Optimizer::new(config.optimizer, model.store());
        let disc = disc
            .map(|d| {
                let net = Discriminator::build(d, mix(&[config.seed, 0xd15c]))?;
                let opt = Optimizer::new(config.optimizer, net.store());
                Ok::<_, CsdError>((net, opt))
            })
            .transpose()?;
        Ok(Trainer {
            model,
            optimizer,
            disc,
            iteration: 0,
            config,
            extractor,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, config: TrainConfig, extractor: FeatureExtractor) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model: ck.model,
            optimizer: ck.optimizer,
            disc: ck.disc,
            iteration: ck.iteration,
            config,
            extractor,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let settings = self
            .config
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| !k.starts_with("optim."))
            .collect();
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            disc: self.disc.clone(),
            iteration: self.iteration,
            settings,
        }
    }

    /// Stacks the selected images, cropping each at a seeded offset when a
    /// crop size is configured. `companions` are cropped at the same offsets.
    fn assemble(&self, images: &[&Image], companions: Option<&[&Image]>, stream: u64) -> Result<(Tensor, Option<Tensor>)> {
        let Some(size) = self.config.crop_size else {
            let first = images[0];
            if let Some(bad) = images.iter().chain(companions.unwrap_or(&[])).find(|i| !i.same_extents(first)) {
                return Err(CsdError::invalid(
                    "train",
                    format!(
                        "images of {}x{} and {}x{} cannot share a batch; set train.crop_size",
                        first.height(),
                        first.width(),
                        bad.height(),
                        bad.width()
                    ),
                ));
            }
            let a = Image::batch(&images.iter().map(|&i| i.clone()).collect::<Vec<_>>())?;
            let b = companions
                .map(|c| Image::batch(&c.iter().map(|&i| i.clone()).collect::<Vec<_>>()))
                .transpose()?;
            return Ok((a, b));
        };
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (k, img) in images.iter().enumerate() {
            let seed = mix(&[self.config.seed, self.iteration, stream, k as u64]);
            let (top, left) = patch_offsets(img.height(), img.width(), 1, size, seed)?[0];
            first.push(crop(img, top, left, size, size)?);
            if let Some(c) = companions {
                if !c[k].same_extents(img) {
                    return Err(CsdError::invalid("train", "paired images differ in extent"));
                }
                second.push(crop(c[k], top, left, size, size)?);
            }
        }
        let b = companions.map(|_| Image::batch(&second)).transpose()?;
        Ok((Image::batch(&first)?, b))
    }

    /// One paired update on the batch selected for the current iteration.
    pub fn step_paired(&mut self, data: &[(Image, Image)]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(CsdError::Config("training set is empty".into()));
        }
        let started = Instant::now();
        let it = self.iteration;
        let idx = batch_indices(self.config.seed, it, data.len(), self.config.batch_size);
        let lows: Vec<&Image> = idx.iter().map(|&i| &data[i].0).collect();
        let truths: Vec<&Image> = idx.iter().map(|&i| &data[i].1).collect();
        let (low, truth) = self.assemble(&lows, Some(&truths), STREAM_LOW)?;
        let truth = truth.expect("companions requested");

        let mut tape = Tape::new();
        let mut bind = Binding::new(self.model.store(), true);
        let fwd = self.model.forward_vars(&mut tape, &mut bind, &low, ForwardHooks::default())?;
        let input = tape.constant(low);
        let target = tape.constant(truth);
        let recon = self.model.config().connection == Connection::ReconstructionLoss;
        let terms = csdnet_loss(&mut tape, &fwd, input, target, &self.extractor, &self.config.weights, recon)?;
        apply_update(&mut tape, terms.total, &bind, self.model.store_mut(), &mut self.optimizer, it)?;
        self.iteration += 1;
        Ok(record(it, &tape, &terms, &[], started))
    }

    /// One critic update followed by one generator update. `lows` and
    /// `reals` are independent unpaired sets.
    pub fn step_adversarial(&mut self, lows: &[Image], reals: &[Image]) -> Result<StepRecord> {
        if lows.is_empty() || reals.is_empty() {
            return Err(CsdError::Config("adversarial training needs low-light and reference images".into()));
        }
        if self.disc.is_none() {
            return Err(CsdError::Config("adversarial training needs a discriminator".into()));
        }
        let started = Instant::now();
        let it = self.iteration;
        let seed = self.config.seed;
        let b = self.config.batch_size;
        let li = batch_indices(seed, it, lows.len(), b);
        let ri = batch_indices(mix(&[seed, STREAM_REAL]), it, reals.len(), b);
        let (low, _) = self.assemble(&li.iter().map(|&i| &lows[i]).collect::<Vec<_>>(), None, STREAM_LOW)?;
        let (real, _) = self.assemble(&ri.iter().map(|&i| &reals[i]).collect::<Vec<_>>(), None, STREAM_REAL)?;
        if low.shape() != real.shape() {
            return Err(CsdError::ShapeMismatch {
                op: "adversarial batch",
                left: low.shape().0,
                right: real.shape().0,
            });
        }
        let (h, w) = (low.shape().h(), low.shape().w());
        let (disc, disc_opt) = self.disc.as_mut().expect("checked above");
        let dc = disc.config();
        let patches = (0..b as u64)
            .map(|n| {
                let real_at = patch_offsets(h, w, dc.patch_count, dc.patch_size, mix(&[seed, it, STREAM_PATCH_REAL, n]))?;
                let fake_at = patch_offsets(h, w, dc.patch_count, dc.patch_size, mix(&[seed, it, STREAM_PATCH_FAKE, n]))?;
                Ok((real_at, fake_at))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let mut bind = Binding::new(self.model.store(), true);
        let fwd = self.model.forward_vars(&mut tape, &mut bind, &low, ForwardHooks::default())?;

        // Critic update on a detached copy of the current output.
        let mut dtape = Tape::new();
        let mut dbind = Binding::new(disc.store(), true);
        let fake_c = dtape.constant(tape.value(fwd.enhanced).clone());
        let real_c = dtape.constant(real.clone());
        let s = critic_scores(&mut dtape, disc, &mut dbind, real_c, fake_c, &patches)?;
        let (d_loss, _) = adversarial_losses(&mut dtape, &s.global_real, &s.global_fake, &s.local_real, &s.local_fake)?;
        let d_value = dtape.value(d_loss).item() as f64;
        let mut d_store = disc.store().clone();
        apply_update(&mut dtape, d_loss, &dbind, &mut d_store, disc_opt, it)?;
        *disc.store_mut() = d_store;

        // Generator update against the refreshed critic.
        let mut frozen = Binding::frozen(disc.store());
        let real_v = tape.constant(real);
        let s = critic_scores(&mut tape, disc, &mut frozen, real_v, fwd.enhanced, &patches)?;
        let (_, g_loss) = adversarial_losses(&mut tape, &s.global_real, &s.global_fake, &s.local_real, &s.local_fake)?;
        let input = tape.constant(low);
        let terms = csdgan_loss(&mut tape, &fwd, input, g_loss, &self.extractor, &self.config.weights)?;
        apply_update(&mut tape, terms.total, &bind, self.model.store_mut(), &mut self.optimizer, it)?;
        self.iteration += 1;
        Ok(record(it, &tape, &terms, &[("critic", d_value)], started))
    }

    fn after_step(&self, rec: &StepRecord) -> Result<()> {
        debug!("iteration {} total {:.6}", rec.iteration, rec.total);
        let every = self.config.checkpoint_every;
        if every > 0 && self.iteration % every == 0 {
            if let Some(dir) = &self.config.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| CsdError::io(dir, e))?;
                let path = dir.join(format!("ckpt_{:06}.csdc", self.iteration));
                self.checkpoint().save(&path)?;
                info!("saved {}", path.display());
            }
        }
        Ok(())
    }

    /// Runs paired steps until `config.iterations` are complete.
    pub fn run_paired(&mut self, data: &[(Image, Image)], mut observe: impl FnMut(&StepRecord)) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while self.iteration < self.config.iterations {
            let rec = self.step_paired(data)?;
            self.after_step(&rec)?;
            observe(&rec);
            report.records.push(rec);
        }
        Ok(report)
    }

    /// Runs adversarial steps until `config.iterations` are complete.
    pub fn run_adversarial(
        &mut self,
        lows: &[Image],
        reals: &[Image],
        mut observe: impl FnMut(&StepRecord),
    ) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while self.iteration < self.config.iterations {
            let rec = self.step_adversarial(lows, reals)?;
            self.after_step(&rec)?;
            observe(&rec);
            report.records.push(rec);
        }
        Ok(report)
    }
}
