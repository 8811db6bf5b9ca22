//! Central finite-difference gradient checking.
//!
//! The function under test maps leaf tensors to an output of any shape. The
//! checker contracts that output with a fixed random projection `r`, so the
//! scalar being differentiated is `Σ r·y`. Finite differences evaluate that
//! sum from forward values only; they never touch the backward rules.
//!
//! Checks run on the f64 instantiation of the tape. The kernels are generic,
//! so this exercises the same backward rules the f32 networks use, without
//! f32 rounding noise swamping a 1e-3 step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    pub rel_tol: f32,
    pub abs_floor: f32,
    pub seed: u64,
    /// Check this many randomly chosen elements per input instead of all.
    pub sample: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            rel_tol: 1e-3,
            abs_floor: 1e-5,
            seed: 0,
            sample: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f32,
    pub numeric: f32,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f32,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f32, b: f32, floor: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients of `Σ r·f(inputs)` against central differences
/// for every element of every input in `check` (indices into `inputs`), or
/// for `cfg.sample` seeded elements per input.
///
/// An element passes when `|a − n| ≤ rel_tol · max(|a|, |n|) + abs_floor`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], check: &[usize], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::<f64>::default();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), check.contains(&i)))
        .collect();
    let y = f(&mut tape, &vars)?;
    let yshape = tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let proj = Tensor::<f64>::rand_uniform(yshape, -1.0, 1.0, &mut rng);
    let r = tape.constant(proj.clone());
    let prod = tape.mul(y, r)?;
    let mean = tape.mean_all(prod);
    let loss = tape.affine(mean, yshape.numel() as f32, 0.0);
    tape.backward(loss)?;

    let objective = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::default();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t
            .value(out)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(&a, &b)| a * b)
            .sum())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &i in check {
        let analytic: Vec<f32> = match tape.grad(vars[i]) {
            Some(g) => g.iter().map(|&v| v as f32).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        let n = inputs[i].numel();
        let elements: Vec<usize> = match cfg.sample {
            Some(m) if m < n => rand::seq::index::sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for k in elements {
            let orig = inputs[i].data()[k];
            let h = cfg.step as f64;
            work[i].data_mut()[k] = orig + h;
            let plus = objective(&work)?;
            work[i].data_mut()[k] = orig - h;
            let minus = objective(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = ((plus - minus) / (2.0 * h)) as f32;
            let a = analytic[k];
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric, cfg.abs_floor));
            if (a - numeric).abs() > cfg.rel_tol * a.abs().max(numeric.abs()) + cfg.abs_floor {
                report.mismatches.push(Mismatch {
                    input: i,
                    element: k,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
