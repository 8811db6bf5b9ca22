//! Full-reference metrics and per-sample reports.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::data::{load_image, Manifest};
use crate::error::{CsdError, Result};
use crate::image::Image;
use crate::model::EnhanceModel;
use crate::retinex::{fnv1a, to_grayscale};

/// SSIM window side.
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_shapes(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_extents(b) || a.channels() != b.channels() {
        return Err(CsdError::ShapeMismatch {
            op,
            left: [1, a.channels(), a.height(), a.width()],
            right: [1, b.channels(), b.height(), b.width()],
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for peak 1, over all channels.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// The SSIM expression for one window's statistics.
pub fn ssim_from_stats(mean_a: f64, mean_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mean_a * mean_b + C1) * (2.0 * cov + C2))
        / ((mean_a * mean_a + mean_b * mean_b + C1) * (var_a + var_b + C2))
}

/// Mean SSIM over all 8×8 windows at stride 1 on luma, with population
/// (1/64) variance and covariance.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CsdError::invalid("ssim", format!("image {h}x{w} is smaller than the 8x8 window")));
    }
    let (ga, gb) = (to_grayscale(a), to_grayscale(b));
    let (x, y) = (ga.data(), gb.data());
    // Summed-area tables of a, b, a², b², ab.
    let stride = w + 1;
    let mut tables = vec![[0.0f64; 5]; (h + 1) * stride];
    for r in 0..h {
        let mut row = [0.0f64; 5];
        for c in 0..w {
            let (p, q) = (x[r * w + c] as f64, y[r * w + c] as f64);
            for (acc, v) in row.iter_mut().zip([p, q, p * p, q * q, p * q]) {
                *acc += v;
            }
            let above = tables[r * stride + c + 1];
            let cell = &mut tables[(r + 1) * stride + c + 1];
            for k in 0..5 {
                cell[k] = above[k] + row[k];
            }
        }
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let (r1, c1) = (r + SSIM_WINDOW, c + SSIM_WINDOW);
            let s: [f64; 5] = std::array::from_fn(|k| {
                tables[r1 * stride + c1][k] - tables[r * stride + c1][k] - tables[r1 * stride + c][k]
                    + tables[r * stride + c][k]
            });
            let (ma, mb) = (s[0] / n, s[1] / n);
            let va = s[2] / n - ma * ma;
            let vb = s[3] / n - mb * mb;
            let cov = s[4] / n - ma * mb;
            total += ssim_from_stats(ma, mb, va, vb, cov);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-sample scores in input order plus the rows that could not be scored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// `(id, error message)` of excluded samples.
    pub failures: Vec<(String, String)>,
    pub fingerprint: String,
}

fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// `id,psnr_db,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6}", r.id, format_db(r.psnr_db), r.ssim);
        }
        if !self.rows.is_empty() {
            let _ = writeln!(out, "mean,{},{:.6}", format_db(self.mean_psnr()), self.mean_ssim());
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Anything that maps a low-light image to an enhanced one of equal extent.
pub trait Enhancer {
    fn enhance_image(&self, low: &Image) -> Result<Image>;

    fn fingerprint(&self) -> String;
}

impl Enhancer for EnhanceModel {
    fn enhance_image(&self, low: &Image) -> Result<Image> {
        Ok(self.enhance(low)?.enhanced)
    }

    fn fingerprint(&self) -> String {
        let text: String = self
            .config()
            .to_pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v};"))
            .collect();
        format!("{:016x}", fnv1a(text.bytes().map(u32::from)))
    }
}

/// Output equals input.
pub struct Identity;

impl Enhancer for Identity {
    fn enhance_image(&self, low: &Image) -> Result<Image> {
        Ok(low.clone())
    }

    fn fingerprint(&self) -> String {
        "identity".into()
    }
}

pub fn score(enhanced: &Image, truth: &Image) -> Result<(f64, f64)> {
    Ok((psnr(enhanced, truth)?, ssim(enhanced, truth)?))
}

/// Scores in-memory `(id, low, truth)` triples.
pub fn evaluate_pairs<'a>(
    enhancer: &dyn Enhancer,
    samples: impl IntoIterator<Item = (String, &'a Image, &'a Image)>,
) -> MetricReport {
    let mut report = MetricReport {
        fingerprint: enhancer.fingerprint(),
        ..Default::default()
    };
    for (id, low, truth) in samples {
        match enhancer.enhance_image(low).and_then(|out| score(&out, truth)) {
            Ok((psnr_db, ssim)) => report.rows.push(MetricRow { id, psnr_db, ssim }),
            Err(e) => report.failures.push((id, e.to_string())),
        }
    }
    report
}

fn sample_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Enhances every low image of a paired manifest and scores it against its
/// ground truth. Unreadable or mismatched rows are recorded as failures.
pub fn evaluate(enhancer: &dyn Enhancer, manifest: &Manifest) -> Result<MetricReport> {
    let Manifest::Paired(pairs) = manifest else {
        return Err(CsdError::Config("evaluation needs a paired manifest".into()));
    };
    let mut report = MetricReport {
        fingerprint: enhancer.fingerprint(),
        ..Default::default()
    };
    for (low_path, truth_path) in pairs {
        let id = sample_id(low_path);
        let row = load_image(low_path).and_then(|low| {
            let truth = load_image(truth_path)?;
            let out = enhancer.enhance_image(&low)?;
            score(&out, &truth)
        });
        match row {
            Ok((psnr_db, ssim)) => report.rows.push(MetricRow { id, psnr_db, ssim }),
            Err(e) => {
                warn!("skipping {id}: {e}");
                report.failures.push((id, e.to_string()));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |y, x, ch| ((y * 5 + x * 3 + ch * 7) % 17) as f32 / 17.0).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(4, 4, 3, 0.2).unwrap();
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let b = Image::filled(4, 4, 3, 0.7).unwrap();
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-3);
        let c = a.map(|v| v + 0.1).unwrap();
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(4, 5, 3, 0.2).unwrap()).is_err());
    }

    #[test]
    fn ssim_identity_and_inverse() {
        let a = ramp(12, 10, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert_eq!(ssim(&a, &inv).unwrap(), ssim(&inv, &a).unwrap());
        assert!(ssim(&ramp(7, 10, 1), &ramp(7, 10, 1)).is_err());
    }

    /// Direct evaluation of the SSIM formula on a single 8×8 window.
    fn single_window(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
        let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4)) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4))
    }

    #[test]
    fn ssim_single_window_oracle() {
        let a = ramp(8, 8, 1);
        let b = Image::from_fn(8, 8, 1, |y, x, _| ((y * x) % 9) as f32 / 9.0).unwrap();
        let f = |img: &Image| img.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let expect = single_window(&f(&a), &f(&b));
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn report_csv_and_means() {
        let truth = ramp(16, 16, 3);
        let low = truth.map(|v| v * 0.5).unwrap();
        let r = evaluate_pairs(&Identity, [("s0".to_string(), &truth, &truth), ("s1".to_string(), &low, &truth)]);
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows[0].psnr_db.is_infinite());
        assert_eq!(r.rows[0].ssim, 1.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("id,psnr_db,ssim\ns0,inf,1.000000\ns1,"));
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
        let only = evaluate_pairs(&Identity, [("s1".to_string(), &low, &truth)]);
        assert!((only.mean_psnr() - only.rows[0].psnr_db).abs() < 1e-9);
    }
}
