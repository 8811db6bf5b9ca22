//! Training objectives. Every function records onto a tape so the same code
//! serves training and gradient checks.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{read_tensor, DumpError, Real, Shape, Tape, Tensor, Var};
use crate::error::{CsdError, Result};
use crate::model::ForwardVars;

fn same_shape<T: Real>(op: &'static str, tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(CsdError::ShapeMismatch {
            op,
            left: sa.0,
            right: sb.0,
        });
    }
    Ok(())
}

/// Mean of squared differences.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, out: Var, target: Var) -> Result<Var> {
    same_shape("mse_loss", tape, out, target)?;
    let d = tape.sub(out, target)?;
    let sq = tape.square(d);
    Ok(tape.mean_all(sq))
}

/// Mean smooth-L1 of `illum − gray`.
pub fn smooth_l1_illum<T: Real>(tape: &mut Tape<T>, illum: Var, gray: Var) -> Result<Var> {
    same_shape("smooth_l1_illum", tape, illum, gray)?;
    let d = tape.sub(illum, gray)?;
    let s = tape.smooth_l1(d);
    Ok(tape.mean_all(s))
}

/// Frozen convolutional feature stack standing in for a pretrained
/// perceptual network: four conv 3×3 + ReLU + 2×2 max-pool stages, then a
/// fifth conv 3×3 + ReLU. Output extents are 1/16 of the input.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<(Tensor, Tensor)>,
    seed: Option<u64>,
}

/// Stage widths of the seeded extractor.
pub const EXTRACTOR_WIDTHS: [usize; 5] = [8, 16, 32, 32, 32];

impl FeatureExtractor {
    /// He-normal weights from `seed`, zero biases.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let layers = EXTRACTOR_WIDTHS
            .iter()
            .map(|&w| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let weight = Tensor::randn(Shape::new(w, cin, 3, 3), std, &mut rng);
                cin = w;
                (weight, Tensor::zeros(Shape::new(1, w, 1, 1)))
            })
            .collect();
        FeatureExtractor {
            layers,
            seed: Some(seed),
        }
    }

    /// Five `(weight, bias)` pairs; weights are `out×in×3×3` with 3 input
    /// channels at the first stage, biases `1×out×1×1`.
    pub fn from_layers(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.len() != 5 {
            return Err(CsdError::invalid("feature_extractor", format!("{} stages, expected 5", layers.len())));
        }
        let mut cin = 3;
        for (k, (w, b)) in layers.iter().enumerate() {
            let s = w.shape();
            if s.c() != cin || s.h() != 3 || s.w() != 3 || b.shape() != Shape::new(1, s.n(), 1, 1) {
                return Err(CsdError::invalid(
                    "feature_extractor",
                    format!("stage {k}: weight {s:?} / bias {:?} do not chain", b.shape()),
                ));
            }
            cin = s.n();
        }
        Ok(FeatureExtractor { layers, seed: None })
    }

    /// Reads ten consecutive tensor blocks (weight, bias per stage).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| CsdError::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut read = || {
            read_tensor(&mut r).map_err(|e| match e {
                DumpError::Io(io) => CsdError::io(path, io),
                other => CsdError::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    msg: other.to_string(),
                },
            })
        };
        let layers = (0..5).map(|_| Ok((read()?, read()?))).collect::<Result<Vec<_>>>()?;
        FeatureExtractor::from_layers(layers)
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Feature shape for an input of shape `input`.
    pub fn output_shape(&self, input: Shape) -> Shape {
        let c = self.layers.last().map(|(w, _)| w.shape().n()).unwrap_or(0);
        Shape::new(input.n(), c, input.h() / 16, input.w() / 16)
    }

    /// Features of an N×3×H×W batch; H and W must be multiples of 16.
    /// Gradients flow to `x` but never to the extractor weights.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let wv = tape.constant(w.cast());
            let bv = tape.constant(b.cast());
            h = tape.conv2d(h, wv, Some(bv), 1, 1)?;
            h = tape.relu(h);
            if k + 1 < self.layers.len() {
                h = tape.maxpool2x2(h)?;
            }
        }
        Ok(h)
    }
}

/// Mean absolute difference of extractor features.
pub fn perceptual_loss<T: Real>(tape: &mut Tape<T>, fe: &FeatureExtractor, a: Var, b: Var) -> Result<Var> {
    same_shape("perceptual_loss", tape, a, b)?;
    let fa = fe.forward(tape, a)?;
    let fb = fe.forward(tape, b)?;
    let d = tape.sub(fa, fb)?;
    let abs = tape.abs(d);
    Ok(tape.mean_all(abs))
}

/// Mean of 1×1×1×1 vars. Stacking them and reducing once keeps the `1/n`
/// weight at the tape's precision.
fn mean_of<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.concat_channels(acc, v)?;
    }
    Ok(tape.mean_all(acc))
}

/// Mean score over a set of equally shaped score maps, as a 1×1×1×1 var.
fn mean_score<T: Real>(tape: &mut Tape<T>, maps: &[Var]) -> Result<Var> {
    let means: Vec<Var> = maps.iter().map(|&m| tape.mean_all(m)).collect();
    mean_of(tape, &means)
}

/// `E[(maps − reference + offset)²]` over all maps.
fn relative_square<T: Real>(tape: &mut Tape<T>, maps: &[Var], reference: Var, offset: f32) -> Result<Var> {
    let terms = maps
        .iter()
        .map(|&m| {
            let d = tape.sub(m, reference)?;
            let d = tape.affine(d, 1.0, offset);
            let sq = tape.square(d);
            Ok(tape.mean_all(sq))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(tape, &terms)
}

/// Relativistic-average least-squares objectives for one scale, given the
/// critic's score maps on real and fake samples. Returns `(d_loss, g_loss)`:
///
/// `d = E[(D_r − E[D_f] − 1)²] + E[(D_f − E[D_r])²]`
/// `g = E[(D_f − E[D_r] − 1)²] + E[(D_r − E[D_f])²]`
pub fn relativistic_losses<T: Real>(tape: &mut Tape<T>, real: &[Var], fake: &[Var]) -> Result<(Var, Var)> {
    if real.is_empty() || fake.is_empty() {
        return Err(CsdError::invalid("adversarial_losses", "empty real or fake score set"));
    }
    let s0 = tape.shape(real[0]);
    if let Some(&bad) = real.iter().chain(fake).find(|&&m| tape.shape(m) != s0) {
        return Err(CsdError::ShapeMismatch {
            op: "adversarial_losses",
            left: s0.0,
            right: tape.shape(bad).0,
        });
    }
    let mean_real = mean_score(tape, real)?;
    let mean_fake = mean_score(tape, fake)?;
    let d_real = relative_square(tape, real, mean_fake, -1.0)?;
    let d_fake = relative_square(tape, fake, mean_real, 0.0)?;
    let g_fake = relative_square(tape, fake, mean_real, -1.0)?;
    let g_real = relative_square(tape, real, mean_fake, 0.0)?;
    Ok((tape.add(d_real, d_fake)?, tape.add(g_fake, g_real)?))
}

/// Global term plus the mean of the per-patch terms. `local_real[k]` and
/// `local_fake[k]` are the score maps of patch set `k`.
pub fn adversarial_losses<T: Real>(
    tape: &mut Tape<T>,
    global_real: &[Var],
    global_fake: &[Var],
    local_real: &[Var],
    local_fake: &[Var],
) -> Result<(Var, Var)> {
    let (dg, gg) = relativistic_losses(tape, global_real, global_fake)?;
    let (dl, gl) = relativistic_losses(tape, local_real, local_fake)?;
    Ok((tape.add(dg, dl)?, tape.add(gg, gl)?))
}

/// Term weights of the composite objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_mse: f32,
    pub w_perc: f32,
    pub w_smooth: f32,
    pub w_adv: f32,
    /// `‖L − R⊙I‖²` bridge of the reconstruction-loss variants.
    pub w_recon: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mse: 1.0,
            w_perc: 1.0,
            w_smooth: 1.0,
            w_adv: 1.0,
            w_recon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_mse, self.w_perc, self.w_smooth, self.w_adv, self.w_recon];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CsdError::Config("loss weights must be finite and nonnegative".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(CsdError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Individually evaluated loss terms and their weighted total.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub names: Vec<&'static str>,
    pub terms: Vec<Var>,
    pub total: Var,
}

fn weighted_sum<T: Real>(tape: &mut Tape<T>, parts: &[(f32, Var)]) -> Result<Var> {
    let mut total = tape.affine(parts[0].1, parts[0].0, 0.0);
    for &(w, v) in &parts[1..] {
        let scaled = tape.affine(v, w, 0.0);
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// Paired objective: MSE and perceptual distance to the ground truth,
/// smooth-L1 tie of the illumination to the input luma, and for
/// reconstruction-loss variants the `‖L − R⊙I‖²` bridge.
pub fn csdnet_loss(
    tape: &mut Tape,
    fwd: &ForwardVars,
    input: Var,
    truth: Var,
    fe: &FeatureExtractor,
    w: &LossWeights,
    reconstruction: bool,
) -> Result<LossTerms> {
    let mse = mse_loss(tape, fwd.enhanced, truth)?;
    let perc = perceptual_loss(tape, fe, fwd.enhanced, truth)?;
    let gray = tape.constant(fwd.gray.clone());
    let smooth = smooth_l1_illum(tape, fwd.illumination, gray)?;
    let mut names = vec!["mse", "perceptual", "smooth"];
    let mut parts = vec![(w.w_mse, mse), (w.w_perc, perc), (w.w_smooth, smooth)];
    if reconstruction {
        let rebuilt = crate::retinex::reconstruct_var(tape, fwd.reflectance, fwd.illumination)?;
        let recon = mse_loss(tape, rebuilt, input)?;
        names.push("reconstruction");
        parts.push((w.w_recon, recon));
    }
    let total = weighted_sum(tape, &parts)?;
    Ok(LossTerms {
        names,
        terms: parts.iter().map(|p| p.1).collect(),
        total,
    })
}

/// Unpaired generator objective: adversarial term, perceptual distance
/// between the low-light input and the enhanced output, smooth-L1 tie of the
/// illumination to the input luma.
pub fn csdgan_loss(
    tape: &mut Tape,
    fwd: &ForwardVars,
    input: Var,
    g_loss: Var,
    fe: &FeatureExtractor,
    w: &LossWeights,
) -> Result<LossTerms> {
    let perc = perceptual_loss(tape, fe, input, fwd.enhanced)?;
    let gray = tape.constant(fwd.gray.clone());
    let smooth = smooth_l1_illum(tape, fwd.illumination, gray)?;
    let parts = [(w.w_adv, g_loss), (w.w_perc, perc), (w.w_smooth, smooth)];
    let total = weighted_sum(tape, &parts)?;
    Ok(LossTerms {
        names: vec!["adversarial", "perceptual", "smooth"],
        terms: parts.iter().map(|p| p.1).collect(),
        total,
    })
}
