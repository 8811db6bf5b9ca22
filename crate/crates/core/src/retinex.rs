//! Closed-form Retinex operators: grayscale, illumination guidance, feature
//! and image division, and reconstruction.

use crate::autodiff::{Real, Shape, Tape, Tensor, Var, DIV_EPS};
use crate::error::{CsdError, Result};
use crate::image::Image;

/// Luma weights for RGB → gray.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Stabilizer shared by feature division and the final image division.
pub const EPS: f32 = DIV_EPS;

pub fn to_grayscale(rgb: &Image) -> Image {
    if rgb.channels() == 1 {
        return rgb.clone();
    }
    let data = rgb
        .data()
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect();
    Image::new(rgb.height(), rgb.width(), 1, data).expect("extents preserved")
}

/// N×3×H×W → N×1×H×W luma. Single-channel input is returned as is.
pub fn grayscale_tensor(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    match s.c() {
        1 => Ok(t.clone()),
        3 => {
            let plane = s.plane();
            let mut out = Vec::with_capacity(s.n() * plane);
            for n in 0..s.n() {
                let base = n * 3 * plane;
                let d = &t.data()[base..base + 3 * plane];
                out.extend(
                    (0..plane).map(|i| LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i]),
                );
            }
            Tensor::new(s.with_channels(1), out)
        }
        c => Err(CsdError::invalid("grayscale", format!("{c} channels"))),
    }
}

/// Edge-aware guidance map of a gray image, kept together with its two parts.
///
/// `neighborhood_max` is the max over the forward 2×2 block `(i..=i+1,
/// j..=j+1)`, and `edge_term` is a quarter of the summed absolute differences
/// to the four axial neighbours. Both use replicate padding, so every map has
/// the source extents. Values are not clamped and can exceed 1.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
    neighborhood_max: Vec<f32>,
    edge_term: Vec<f32>,
    source_hash: u64,
}

impl GuidanceMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn neighborhood_max(&self) -> &[f32] {
        &self.neighborhood_max
    }

    pub fn edge_term(&self) -> &[f32] {
        &self.edge_term
    }

    /// FNV-1a digest of the gray image the map was computed from.
    pub fn source_hash(&self) -> u64 {
        self.source_hash
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(Shape::new(1, 1, self.height, self.width), self.values.clone()).expect("extents match")
    }

    /// Min-max normalized copy for display. A constant map becomes all zeros.
    pub fn normalized(&self) -> Image {
        let lo = self.values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = hi - lo;
        let data = if range > 0.0 {
            self.values.iter().map(|v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        Image::new(self.height, self.width, 1, data).expect("extents match")
    }
}

pub fn fnv1a(words: impl IntoIterator<Item = u32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// The two guidance parts of one row-major plane.
pub fn guidance_parts<T: Real>(height: usize, width: usize, plane: &[T]) -> (Vec<T>, Vec<T>) {
    debug_assert_eq!(plane.len(), height * width);
    let at = |y: usize, x: usize| plane[y.min(height - 1) * width + x.min(width - 1)];
    let quarter = T::lit(0.25);
    let mut amax = Vec::with_capacity(plane.len());
    let mut edge = Vec::with_capacity(plane.len());
    for y in 0..height {
        for x in 0..width {
            let v = at(y, x);
            let rows = |xx: usize| at(y, xx).max(at(y + 1, xx));
            amax.push(rows(x).max(rows(x + 1)));
            let left = at(y, x.saturating_sub(1));
            let right = at(y, x + 1);
            let up = at(y.saturating_sub(1), x);
            let down = at(y + 1, x);
            let sum = (v - left).abs() + (v - right).abs() + (up - v).abs() + (down - v).abs();
            edge.push(quarter * sum);
        }
    }
    (amax, edge)
}

pub fn illumination_guidance(gray: &Image) -> Result<GuidanceMap> {
    if gray.channels() != 1 {
        return Err(CsdError::invalid(
            "illumination_guidance",
            format!("expected a 1-channel image, got {}", gray.channels()),
        ));
    }
    let (h, w) = (gray.height(), gray.width());
    if h < 2 || w < 2 {
        return Err(CsdError::invalid("illumination_guidance", format!("image {h}x{w} is smaller than 2x2")));
    }
    let (neighborhood_max, edge_term) = guidance_parts(h, w, gray.data());
    let values = neighborhood_max.iter().zip(&edge_term).map(|(a, b)| a + b).collect();
    let source_hash = fnv1a([h as u32, w as u32].into_iter().chain(gray.data().iter().map(|v| v.to_bits())));
    Ok(GuidanceMap {
        height: h,
        width: w,
        values,
        neighborhood_max,
        edge_term,
        source_hash,
    })
}

/// Guidance for every plane of an N×1×H×W tensor.
pub fn guidance_tensor(gray: &Tensor) -> Result<Tensor> {
    let s = gray.shape();
    if s.c() != 1 {
        return Err(CsdError::invalid("illumination_guidance", format!("expected 1 channel, got {}", s.c())));
    }
    if s.h() < 2 || s.w() < 2 {
        return Err(CsdError::invalid("illumination_guidance", format!("extent {s:?} is smaller than 2x2")));
    }
    let mut out = Vec::with_capacity(s.numel());
    for plane in gray.data().chunks_exact(s.plane()) {
        let (a, b) = guidance_parts(s.h(), s.w(), plane);
        out.extend(a.iter().zip(&b).map(|(x, y)| x + y));
    }
    Tensor::new(s, out)
}

/// Reflectance-stream feature divided by the same-shape illumination feature:
/// `f_r / (f_i + eps)`.
pub fn csd_divide<T: Real>(tape: &mut Tape<T>, f_r: Var, f_i: Var, eps: f32) -> Result<Var> {
    let (a, b) = (tape.shape(f_r), tape.shape(f_i));
    if a != b {
        return Err(CsdError::ShapeMismatch {
            op: "csd_divide",
            left: a.0,
            right: b.0,
        });
    }
    tape.div_eps(f_r, f_i, eps)
}

/// `clamp(r / max(i, eps), 0, 1)` on the tape. `i` is single-channel and
/// broadcasts over the channels of `r`.
pub fn final_enhance_var<T: Real>(tape: &mut Tape<T>, r: Var, i: Var, eps: f32) -> Result<Var> {
    check_illum("final_enhance", tape.shape(r), tape.shape(i))?;
    let floor = tape.clamp(i, eps, f32::INFINITY);
    let q = tape.div_eps(r, floor, 0.0)?;
    Ok(tape.clamp(q, 0.0, 1.0))
}

/// `r ⊙ i` on the tape, with `i` broadcast over channels.
pub fn reconstruct_var<T: Real>(tape: &mut Tape<T>, r: Var, i: Var) -> Result<Var> {
    check_illum("retinex_reconstruct", tape.shape(r), tape.shape(i))?;
    tape.mul(r, i)
}

fn check_illum(op: &'static str, r: Shape, i: Shape) -> Result<()> {
    if i.c() != 1 || r.n() != i.n() || r.h() != i.h() || r.w() != i.w() {
        return Err(CsdError::ShapeMismatch {
            op,
            left: r.0,
            right: i.0,
        });
    }
    Ok(())
}

fn pixelwise(
    op: &'static str,
    r: &Image,
    i: &Image,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Image> {
    if i.channels() != 1 && i.channels() != r.channels() || !r.same_extents(i) {
        return Err(CsdError::ShapeMismatch {
            op,
            left: [1, r.channels(), r.height(), r.width()],
            right: [1, i.channels(), i.height(), i.width()],
        });
    }
    let (rc, ic) = (r.channels(), i.channels());
    let data = r
        .data()
        .iter()
        .enumerate()
        .map(|(k, &rv)| {
            let px = k / rc;
            let iv = if ic == 1 { i.data()[px] } else { i.data()[k] };
            f(rv, iv)
        })
        .collect();
    Image::new(r.height(), r.width(), rc, data)
}

/// Enhanced image `clamp(r / max(i, eps), 0, 1)`.
pub fn final_enhance(r: &Image, i: &Image, eps: f32) -> Result<Image> {
    pixelwise("final_enhance", r, i, |rv, iv| (rv / iv.max(eps)).clamp(0.0, 1.0))
}

/// Observed image `r ⊙ i`.
pub fn retinex_reconstruct(r: &Image, i: &Image) -> Result<Image> {
    pixelwise("retinex_reconstruct", r, i, |rv, iv| rv * iv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: &[f32]) -> Image {
        Image::new(h, w, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn grayscale_weights() {
        let px = Image::new(1, 2, 3, vec![0.4, 0.4, 0.4, 1.0, 0.0, 0.0]).unwrap();
        let g = to_grayscale(&px);
        assert!((g.data()[0] - 0.4).abs() < 1e-6);
        assert!((g.data()[1] - 0.299).abs() < 1e-7);
        assert_eq!(to_grayscale(&g), g);
    }

    #[test]
    fn grayscale_tensor_matches_image_path() {
        let img = Image::from_fn(4, 5, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0).unwrap();
        let t = grayscale_tensor(&img.to_tensor()).unwrap();
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), to_grayscale(&img));
    }

    #[test]
    fn guidance_two_by_two_example() {
        let g = illumination_guidance(&gray(2, 2, &[0.0, 1.0, 0.0, 1.0])).unwrap();
        assert_eq!(g.neighborhood_max(), &[1.0; 4]);
        assert_eq!(g.edge_term(), &[0.25; 4]);
        assert_eq!(g.values(), &[1.25; 4]);
    }

    #[test]
    fn guidance_constant_image() {
        let g = illumination_guidance(&Image::filled(5, 4, 1, 0.37).unwrap()).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.37));
        assert!(g.normalized().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guidance_rejects_bad_input() {
        assert!(illumination_guidance(&Image::filled(4, 4, 3, 0.1).unwrap()).is_err());
        assert!(illumination_guidance(&Image::filled(1, 4, 1, 0.1).unwrap()).is_err());
    }

    #[test]
    fn guidance_tensor_matches_image_path() {
        let img = gray(3, 4, &[0.1, 0.5, 0.2, 0.9, 0.3, 0.3, 0.8, 0.0, 1.0, 0.6, 0.4, 0.7]);
        let t = guidance_tensor(&img.to_tensor()).unwrap();
        assert_eq!(t.data(), illumination_guidance(&img).unwrap().values());
    }

    #[test]
    fn guidance_hash_tracks_source() {
        let a = illumination_guidance(&gray(2, 2, &[0.0, 1.0, 0.0, 1.0])).unwrap();
        let b = illumination_guidance(&gray(2, 2, &[0.0, 1.0, 0.0, 0.5])).unwrap();
        assert_ne!(a.source_hash(), b.source_hash());
    }

    #[test]
    fn csd_divide_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.8));
        let b = tape.constant(Tensor::scalar(0.5));
        let q = csd_divide(&mut tape, a, b, EPS).unwrap();
        assert!((tape.value(q).item() - 1.59968).abs() < 1e-5);
    }

    #[test]
    fn csd_divide_requires_equal_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(Shape::new(1, 2, 2, 2)));
        let b = tape.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
        assert!(csd_divide(&mut tape, a, b, EPS).is_err());
    }

    #[test]
    fn final_enhance_cases() {
        let r = Image::filled(2, 2, 3, 0.3).unwrap();
        let half = Image::filled(2, 2, 1, 0.5).unwrap();
        let out = final_enhance(&r, &half, EPS).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
        let one = Image::filled(2, 2, 1, 1.0).unwrap();
        assert_eq!(final_enhance(&r, &one, EPS).unwrap(), r);
        let zero = Image::filled(2, 2, 1, 0.0).unwrap();
        assert!(final_enhance(&r, &zero, EPS).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn final_enhance_tape_matches_image_path() {
        let r = Image::from_fn(4, 4, 3, |y, x, c| ((y + 2 * x + c) % 5) as f32 / 5.0).unwrap();
        let i = Image::from_fn(4, 4, 1, |y, x, _| 0.2 + ((y * x) % 4) as f32 / 5.0).unwrap();
        let mut tape = Tape::new();
        let rv = tape.constant(r.to_tensor());
        let iv = tape.constant(i.to_tensor());
        let out = final_enhance_var(&mut tape, rv, iv, EPS).unwrap();
        let via_tape = Image::from_tensor(tape.value(out), 0).unwrap();
        assert_eq!(via_tape, final_enhance(&r, &i, EPS).unwrap());
    }

    #[test]
    fn reconstruct_cases() {
        let r = Image::filled(2, 3, 3, 0.4).unwrap();
        assert_eq!(retinex_reconstruct(&r, &Image::filled(2, 3, 1, 1.0).unwrap()).unwrap(), r);
        let zero = Image::filled(2, 3, 3, 0.0).unwrap();
        let i = Image::filled(2, 3, 1, 0.7).unwrap();
        assert!(retinex_reconstruct(&zero, &i).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(retinex_reconstruct(&r, &Image::filled(3, 3, 1, 0.7).unwrap()).is_err());
    }

    #[test]
    fn enhance_then_reconstruct_roundtrip() {
        let i = Image::from_fn(4, 4, 1, |y, x, _| 0.2 + 0.1 * ((y + x) % 4) as f32).unwrap();
        let r = Image::from_fn(4, 4, 3, |y, x, c| {
            let iv = 0.2 + 0.1 * ((y + x) % 4) as f32;
            iv * ((y + x + c) % 3) as f32 / 3.0
        })
        .unwrap();
        let back = retinex_reconstruct(&final_enhance(&r, &i, EPS).unwrap(), &i).unwrap();
        assert!(back.max_abs_diff(&r) < 2.0 * EPS);
    }
}
