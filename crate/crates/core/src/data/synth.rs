//! Synthetic low-light pairs with known illumination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CsdError, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub i_min: f32,
    pub i_max: f32,
    /// Side of the coarse random grid the illumination is interpolated from.
    pub field_grid: usize,
    pub gamma: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            i_min: 0.1,
            i_max: 0.6,
            field_grid: 4,
            gamma: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.i_min > 0.0 && self.i_min <= self.i_max && self.i_max <= 1.0) {
            return Err(CsdError::Config(format!(
                "illumination range [{}, {}] must satisfy 0 < i_min <= i_max <= 1",
                self.i_min, self.i_max
            )));
        }
        if self.field_grid < 2 {
            return Err(CsdError::Config("synth.field_grid must be at least 2".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(CsdError::Config("synth.gamma must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CsdError::Config("synth.noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthMeta {
    pub seed: u64,
    pub gamma: f32,
    pub noise_sigma: f32,
}

/// A low-light image, its ground truth and the illumination that produced it.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub low: Image,
    pub normal: Image,
    pub oracle_illum: Image,
    pub meta: SynthMeta,
}

/// Smooth illumination of the given extents: a `field_grid`² grid of
/// uniform draws in `[0, 1]`, bilinearly interpolated (corner aligned),
/// shaped by `gamma` and mapped into `[i_min, i_max]`.
pub fn illumination_field(height: usize, width: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Image> {
    let g = cfg.field_grid;
    let grid: Vec<f32> = (0..g * g).map(|_| rng.random::<f32>()).collect();
    let coord = |i: usize, n: usize| -> (usize, usize, f32) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let t = i as f32 * (g - 1) as f32 / (n - 1) as f32;
        let lo = (t.floor() as usize).min(g - 2);
        (lo, lo + 1, t - lo as f32)
    };
    let span = cfg.i_max - cfg.i_min;
    Image::from_fn(height, width, 1, |y, x, _| {
        let (y0, y1, fy) = coord(y, height);
        let (x0, x1, fx) = coord(x, width);
        let top = grid[y0 * g + x0] * (1.0 - fx) + grid[y0 * g + x1] * fx;
        let bottom = grid[y1 * g + x0] * (1.0 - fx) + grid[y1 * g + x1] * fx;
        let t = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
        cfg.i_min + span * t.powf(cfg.gamma)
    })
}

/// `low = clamp(base ⊙ I* + noise, 0, 1)`.
pub fn synth_pair(base: &Image, cfg: &SynthConfig) -> Result<PairedSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let illum = illumination_field(base.height(), base.width(), cfg, &mut rng)?;
    let c = base.channels();
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0f32, cfg.noise_sigma).expect("finite sigma"));
    let low: Vec<f32> = base
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let lit = v * illum.data()[k / c];
            match &noise {
                Some(n) => lit + n.sample(&mut rng),
                None => lit,
            }
        })
        .collect();
    Ok(PairedSample {
        low: Image::new(base.height(), base.width(), c, low)?,
        normal: base.clone(),
        oracle_illum: illum,
        meta: SynthMeta {
            seed: cfg.seed,
            gamma: cfg.gamma,
            noise_sigma: cfg.noise_sigma,
        },
    })
}

/// Procedural ground-truth scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasePattern {
    Gradient,
    Checker,
    Blobs,
    Stripes,
}

impl BasePattern {
    pub const ALL: [BasePattern; 4] = [
        BasePattern::Gradient,
        BasePattern::Checker,
        BasePattern::Blobs,
        BasePattern::Stripes,
    ];
}

/// A colourful `size`×`size` scene with values in `[0.05, 0.95]`.
pub fn procedural_base(pattern: BasePattern, size: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || -> [f32; 3] { std::array::from_fn(|_| rng.random_range(0.05f32..0.95)) };
    let (c0, c1) = (color(), color());
    let n = size as f32;
    match pattern {
        BasePattern::Gradient => {
            let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (dy, dx) = angle.sin_cos();
            Image::from_fn(size, size, 3, |y, x, c| {
                let t = 0.5 + ((y as f32 / n - 0.5) * dy + (x as f32 / n - 0.5) * dx) * 0.7;
                c0[c] * (1.0 - t) + c1[c] * t
            })
        }
        BasePattern::Checker => {
            let cell = [4usize, 8, 16][rng.random_range(0..3)];
            Image::from_fn(size, size, 3, |y, x, c| if (y / cell + x / cell) % 2 == 0 { c0[c] } else { c1[c] })
        }
        BasePattern::Blobs => {
            let blobs: Vec<([f32; 2], f32, [f32; 3])> = (0..4)
                .map(|_| {
                    let centre = [rng.random_range(0.0..n), rng.random_range(0.0..n)];
                    let radius = rng.random_range(n / 8.0..n / 3.0);
                    (centre, radius, std::array::from_fn(|_| rng.random_range(0.05f32..0.95)))
                })
                .collect();
            Image::from_fn(size, size, 3, |y, x, c| {
                let mut v = c0[c];
                for (centre, r, col) in &blobs {
                    let d2 = (y as f32 - centre[0]).powi(2) + (x as f32 - centre[1]).powi(2);
                    let w = (-d2 / (r * r)).exp();
                    v = v * (1.0 - w) + col[c] * w;
                }
                v
            })
        }
        BasePattern::Stripes => {
            let period: f32 = rng.random_range(4.0..12.0);
            let vertical = rng.random_bool(0.5);
            Image::from_fn(size, size, 3, |y, x, c| {
                let p = if vertical { x } else { y } as f32;
                let t = 0.5 + 0.5 * (std::f32::consts::TAU * p / period).sin();
                c0[c] * (1.0 - t) + c1[c] * t
            })
        }
    }
}

/// `count` pairs over cycling procedural bases. Pair `k` uses seed
/// `cfg.seed + k` for both its base and its illumination.
pub fn synth_dataset(count: usize, size: usize, cfg: &SynthConfig) -> Result<Vec<PairedSample>> {
    (0..count)
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k as u64);
            let base = procedural_base(BasePattern::ALL[k % BasePattern::ALL.len()], size, seed)?;
            synth_pair(
                &base,
                &SynthConfig {
                    seed,
                    ..cfg.clone()
                },
            )
        })
        .collect()
}
