//! Image files, synthetic pairs, padding and patch sampling, manifests.

mod netpbm;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use netpbm::{decode as decode_netpbm, encode as encode_netpbm, load_image, quantize, save_image};
pub use synth::{
    illumination_field, procedural_base, synth_dataset, synth_pair, BasePattern, PairedSample, SynthConfig,
    SynthMeta,
};

use crate::error::{CsdError, Result};
use crate::image::Image;

/// Replicate-pads the right and bottom edges up to the next multiple of `k`.
/// Returns the padded image and the original `(height, width)`.
pub fn pad_to_multiple(img: &Image, k: usize) -> Result<(Image, (usize, usize))> {
    if k == 0 {
        return Err(CsdError::invalid("pad_to_multiple", "multiple must be positive"));
    }
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h.div_ceil(k) * k, w.div_ceil(k) * k);
    if (ph, pw) == (h, w) {
        return Ok((img.clone(), (h, w)));
    }
    let padded = Image::from_fn(ph, pw, img.channels(), |y, x, c| img.get(y.min(h - 1), x.min(w - 1), c))?;
    Ok((padded, (h, w)))
}

/// Top-left `(height, width)` window; inverse of [`pad_to_multiple`].
pub fn crop_back(img: &Image, extents: (usize, usize)) -> Result<Image> {
    crop(img, 0, 0, extents.0, extents.1)
}

pub fn crop(img: &Image, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
    if top + height > img.height() || left + width > img.width() {
        return Err(CsdError::invalid(
            "crop",
            format!(
                "window {height}x{width} at ({top},{left}) exceeds {}x{}",
                img.height(),
                img.width()
            ),
        ));
    }
    Image::from_fn(height, width, img.channels(), |y, x, c| img.get(top + y, left + x, c))
}

/// Top-left corners of `count` square windows of side `size`, drawn
/// uniformly from `seed`.
pub fn patch_offsets(height: usize, width: usize, count: usize, size: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if size == 0 || size % 8 != 0 {
        return Err(CsdError::invalid("sample_patches", format!("patch size {size} is not a positive multiple of 8")));
    }
    if size > height.min(width) {
        return Err(CsdError::invalid(
            "sample_patches",
            format!("patch size {size} exceeds image {height}x{width}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| (rng.random_range(0..=height - size), rng.random_range(0..=width - size)))
        .collect())
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub top: usize,
    pub left: usize,
    pub image: Image,
}

pub fn sample_patches(img: &Image, count: usize, size: usize, seed: u64) -> Result<Vec<Patch>> {
    patch_offsets(img.height(), img.width(), count, size, seed)?
        .into_iter()
        .map(|(top, left)| {
            Ok(Patch {
                top,
                left,
                image: crop(img, top, left, size, size)?,
            })
        })
        .collect()
}

/// Image list of a dataset: `low<TAB>normal` lines for paired data, one
/// path per line otherwise. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq)]
pub enum Manifest {
    Paired(Vec<(PathBuf, PathBuf)>),
    Unpaired(Vec<PathBuf>),
}

impl Manifest {
    pub fn len(&self) -> usize {
        match self {
            Manifest::Paired(p) => p.len(),
            Manifest::Unpaired(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut paired = Vec::new();
        let mut single = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len();
            let entry = line.trim_end_matches(['\n', '\r']);
            if entry.trim().is_empty() || entry.starts_with('#') {
                continue;
            }
            match entry.split('\t').collect::<Vec<_>>()[..] {
                [low, normal] => paired.push((resolve(low), resolve(normal))),
                [path] => single.push(resolve(path)),
                _ => {
                    return Err(CsdError::Format {
                        path: origin.to_path_buf(),
                        offset: at,
                        msg: "expected `low<TAB>normal` or a single path".into(),
                    })
                }
            }
            if !paired.is_empty() && !single.is_empty() {
                return Err(CsdError::Format {
                    path: origin.to_path_buf(),
                    offset: at,
                    msg: "manifest mixes paired and unpaired lines".into(),
                });
            }
        }
        Ok(if single.is_empty() {
            Manifest::Paired(paired)
        } else {
            Manifest::Unpaired(single)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CsdError::io(path, e))?;
        Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    /// Lines as written: paths are emitted verbatim.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self {
            Manifest::Paired(pairs) => {
                for (l, n) in pairs {
                    out.push_str(&format!("{}\t{}\n", l.display(), n.display()));
                }
            }
            Manifest::Unpaired(paths) => {
                for p in paths {
                    out.push_str(&format!("{}\n", p.display()));
                }
            }
        }
        out
    }
}

/// Loads every pair of a paired manifest.
pub fn load_pairs(manifest: &Manifest) -> Result<Vec<(Image, Image)>> {
    match manifest {
        Manifest::Paired(pairs) => pairs
            .iter()
            .map(|(l, n)| Ok((load_image(l)?, load_image(n)?)))
            .collect(),
        Manifest::Unpaired(_) => Err(CsdError::Config("expected a paired manifest (low<TAB>normal lines)".into())),
    }
}

/// Loads every image of an unpaired manifest.
pub fn load_unpaired(manifest: &Manifest) -> Result<Vec<Image>> {
    match manifest {
        Manifest::Unpaired(paths) => paths.iter().map(load_image).collect(),
        Manifest::Paired(_) => Err(CsdError::Config("expected an unpaired manifest (one path per line)".into())),
    }
}
