use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Connection, CsdPlacement, Framework, ModelConfig};
use crate::autodiff::{BatchNorm2d, Binding, Conv2d, EntryKind, ParamStore, Shape, Tape, Tensor, Var};
use crate::data::{crop_back, pad_to_multiple};
use crate::error::{CsdError, Result};
use crate::image::Image;
use crate::retinex::{self, csd_divide, final_enhance_var, grayscale_tensor, guidance_tensor};

/// Spatial extents must be multiples of this (four 2×2 pools).
pub const EXTENT_MULTIPLE: usize = 16;

/// conv 3×3 → batch norm → ReLU
#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, 1, 1, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, bind: &mut Binding, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, bind, x)?;
        let y = self.bn.forward(tape, store, bind, y)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<Block>,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, input: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut cin = input;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let b = Block::new(store, &format!("{name}.enc{k}"), cin, w, rng);
                cin = w;
                b
            })
            .collect();
        Encoder { blocks }
    }

    /// Outputs of all five blocks, before pooling.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, bind: &mut Binding, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (k, block) in self.blocks.iter().enumerate() {
            if k > 0 {
                h = tape.maxpool2x2(h)?;
            }
            h = block.forward(tape, store, bind, h)?;
            outs.push(h);
        }
        Ok(outs)
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    blocks: Vec<Block>,
    head: Conv2d,
}

impl Decoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        plan: &[usize],
        head_in_extra: usize,
        head_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut cin = plan[4];
        let blocks = plan[5..]
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let b = Block::new(store, &format!("{name}.dec{k}"), cin, w, rng);
                cin = w;
                b
            })
            .collect();
        let head = Conv2d::new(store, &format!("{name}.head"), cin + head_in_extra, head_out, 3, 1, 1, rng);
        Decoder { blocks, head }
    }
}

#[derive(Clone, Debug)]
enum Streams {
    Single {
        encoder: Encoder,
        decoder: Decoder,
    },
    Shared {
        encoder: Encoder,
        illum: Decoder,
        refl: Decoder,
    },
    Two {
        illum_enc: Encoder,
        illum_dec: Decoder,
        refl_enc: Encoder,
        refl_dec: Decoder,
    },
}

/// Test and inspection switches for [`EnhanceModel::forward_vars`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardHooks {
    /// Every illumination feature used as a divisor, and the final
    /// illumination, is replaced by ones.
    pub unit_illumination: bool,
    /// Skip every feature division, running the reflectance stream alone.
    pub reflectance_only: bool,
    /// Record decoder features in [`ForwardVars::traces`].
    pub trace: bool,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub enhanced: Var,
    pub reflectance: Var,
    pub illumination: Var,
    /// Input luma, N×1×H×W.
    pub gray: Tensor,
    pub traces: Vec<(String, Var)>,
}

/// Images of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub enhanced: Image,
    pub illumination: Image,
    pub reflectance: Image,
    pub decoder_traces: Option<Vec<(String, Tensor)>>,
}

/// An illumination/reflectance network pair with its parameters.
#[derive(Clone, Debug)]
pub struct EnhanceModel {
    config: ModelConfig,
    store: ParamStore,
    streams: Streams,
}

impl EnhanceModel {
    /// Builds the network with He-normal weights drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let plan = &config.channel_plan;
        let g = config.guidance as usize;
        let streams = match config.variant.framework() {
            Framework::Single => Streams::Single {
                encoder: Encoder::new(&mut store, "net", 3, &plan[..5], &mut rng),
                decoder: Decoder::new(&mut store, "net", plan, g, 4, &mut rng),
            },
            Framework::SharedEncoder => Streams::Shared {
                encoder: Encoder::new(&mut store, "shared", 3, &plan[..5], &mut rng),
                illum: Decoder::new(&mut store, "ienet", plan, 0, 1, &mut rng),
                refl: Decoder::new(&mut store, "renet", plan, 0, 3, &mut rng),
            },
            Framework::TwoStream => Streams::Two {
                illum_enc: Encoder::new(&mut store, "ienet", 1 + g, &plan[..5], &mut rng),
                illum_dec: Decoder::new(&mut store, "ienet", plan, 0, 1, &mut rng),
                refl_enc: Encoder::new(&mut store, "renet", 3, &plan[..5], &mut rng),
                refl_dec: Decoder::new(&mut store, "renet", plan, 0, 3, &mut rng),
            },
        };
        Ok(EnhanceModel {
            config: config.clone(),
            store,
            streams,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Learnable scalar count.
    pub fn count_params(&self) -> usize {
        self.store.count_learnable()
    }

    /// Input channel count of the first convolution of each stream, as
    /// `(illumination, reflectance)`. Single-network variants report their
    /// one encoder twice.
    pub fn input_channels(&self) -> (usize, usize) {
        let first = |e: &Encoder| e.blocks[0].conv.in_ch;
        match &self.streams {
            Streams::Single { encoder, .. } | Streams::Shared { encoder, .. } => (first(encoder), first(encoder)),
            Streams::Two { illum_enc, refl_enc, .. } => (first(illum_enc), first(refl_enc)),
        }
    }

    /// Runs the network on an N×3×H×W batch.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        input: &Tensor,
        hooks: ForwardHooks,
    ) -> Result<ForwardVars> {
        let s = input.shape();
        if s.c() != 3 {
            return Err(CsdError::invalid("forward", format!("expected 3 input channels, got {}", s.c())));
        }
        if s.h() % EXTENT_MULTIPLE != 0 || s.w() % EXTENT_MULTIPLE != 0 {
            return Err(CsdError::invalid(
                "forward",
                format!(
                    "extents {}x{} are not multiples of {EXTENT_MULTIPLE}; pad the input first (pad_to_multiple)",
                    s.h(),
                    s.w()
                ),
            ));
        }
        let cfg = &self.config;
        let store = &self.store;
        let gray = grayscale_tensor(input)?;
        let guide = if cfg.guidance { Some(guidance_tensor(&gray)?) } else { None };
        let csd = (cfg.connection == Connection::Csd && !hooks.reflectance_only).then_some(cfg.csd_placement);
        let x = tape.constant(input.clone());
        let mut traces = Vec::new();

        let (refl_raw, illum) = match &self.streams {
            Streams::Single { encoder, decoder } => {
                let skips = encoder.forward(tape, store, bind, x)?;
                let mut h = skips[4];
                for (d, block) in decoder.blocks.iter().enumerate() {
                    h = tape.upsample_nearest2x(h)?;
                    h = block.forward(tape, store, bind, h)?;
                    h = tape.add(h, skips[3 - d])?;
                    if hooks.trace {
                        traces.push((format!("net.dec{d}"), h));
                    }
                }
                if let Some(g) = &guide {
                    let gv = tape.constant(g.clone());
                    h = tape.concat_channels(h, gv)?;
                }
                let out = decoder.head.forward(tape, store, bind, h)?;
                let r = tape.narrow_channels(out, 0, 3)?;
                let i = tape.narrow_channels(out, 3, 1)?;
                (r, tape.sigmoid(i))
            }
            Streams::Shared { encoder, illum, refl } => {
                let skips = encoder.forward(tape, store, bind, x)?;
                let mut ih = skips[4];
                if let Some(g) = &guide {
                    let small = box_downsample(g, EXTENT_MULTIPLE)?;
                    let gv = tape.constant(small);
                    ih = tape.add(ih, gv)?;
                }
                decode_pair(
                    tape,
                    store,
                    bind,
                    (illum, ih, &skips),
                    (refl, skips[4], &skips),
                    csd,
                    cfg.feature_floor,
                    hooks,
                    &mut traces,
                )?
            }
            Streams::Two {
                illum_enc,
                illum_dec,
                refl_enc,
                refl_dec,
            } => {
                let gv = tape.constant(gray.clone());
                let ie_in = match &guide {
                    Some(g) => {
                        let g = tape.constant(g.clone());
                        tape.concat_channels(gv, g)?
                    }
                    None => gv,
                };
                let iskips = illum_enc.forward(tape, store, bind, ie_in)?;
                let rskips = refl_enc.forward(tape, store, bind, x)?;
                decode_pair(
                    tape,
                    store,
                    bind,
                    (illum_dec, iskips[4], &iskips),
                    (refl_dec, rskips[4], &rskips),
                    csd,
                    cfg.feature_floor,
                    hooks,
                    &mut traces,
                )?
            }
        };

        let reflectance = if cfg.residual_output {
            tape.add(x, refl_raw)?
        } else {
            tape.sigmoid(refl_raw)
        };
        let illumination = if hooks.unit_illumination {
            tape.constant(Tensor::ones(s.with_channels(1)))
        } else {
            illum
        };
        let enhanced = match cfg.connection {
            Connection::Csd => final_enhance_var(tape, reflectance, illumination, cfg.eps)?,
            Connection::ReconstructionLoss => reflectance,
        };
        Ok(ForwardVars {
            enhanced,
            reflectance,
            illumination,
            gray,
            traces,
        })
    }

    /// Enhances every image of a batch. Spatial extents must be multiples of
    /// [`EXTENT_MULTIPLE`].
    pub fn forward(&self, input: &Tensor, training: bool, hooks: ForwardHooks) -> Result<Vec<ForwardResult>> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.store, training);
        let vars = self.forward_vars(&mut tape, &mut bind, input, hooks)?;
        let n = input.shape().n();
        (0..n)
            .map(|k| {
                let traces = hooks.trace.then(|| {
                    vars.traces
                        .iter()
                        .map(|(name, v)| (name.clone(), tape.value(*v).sample(k)))
                        .collect()
                });
                Ok(ForwardResult {
                    enhanced: Image::from_tensor(tape.value(vars.enhanced), k)?,
                    illumination: Image::from_tensor(tape.value(vars.illumination), k)?,
                    reflectance: Image::from_tensor(tape.value(vars.reflectance), k)?,
                    decoder_traces: traces,
                })
            })
            .collect()
    }

    /// Inference on one image of any extent: replicate-padded to a multiple
    /// of [`EXTENT_MULTIPLE`], then every output is cropped back.
    pub fn enhance(&self, image: &Image) -> Result<ForwardResult> {
        let (padded, extents) = pad_to_multiple(&to_rgb(image), EXTENT_MULTIPLE)?;
        let mut out = self.forward(&padded.to_tensor(), false, ForwardHooks::default())?.remove(0);
        if extents != (padded.height(), padded.width()) {
            out.enhanced = crop_back(&out.enhanced, extents)?;
            out.illumination = crop_back(&out.illumination, extents)?;
            out.reflectance = crop_back(&out.reflectance, extents)?;
        }
        Ok(out)
    }

    /// One row per stored tensor: name, shape, learnable scalar count (zero
    /// for running statistics).
    pub fn param_table(&self) -> Vec<ParamRow> {
        param_rows(&self.store)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRow {
    pub name: String,
    pub shape: Shape,
    pub count: usize,
}

pub fn param_rows(store: &ParamStore) -> Vec<ParamRow> {
    store
        .entries()
        .iter()
        .map(|e| ParamRow {
            name: e.name.clone(),
            shape: e.value.shape(),
            count: if e.kind == EntryKind::Weight { e.value.numel() } else { 0 },
        })
        .collect()
}

fn to_rgb(image: &Image) -> Image {
    if image.channels() == 3 {
        return image.clone();
    }
    let data = image.data().iter().flat_map(|&v| [v, v, v]).collect();
    Image::new(image.height(), image.width(), 3, data).expect("extents preserved")
}

/// Lockstep decoding of the illumination and reflectance decoders, dividing
/// reflectance features by illumination features where `csd` says so.
/// Returns the reflectance head output (before its output transform) and
/// the illumination after its sigmoid.
#[allow(clippy::too_many_arguments)]
fn decode_pair(
    tape: &mut Tape,
    store: &ParamStore,
    bind: &mut Binding,
    illum: (&Decoder, Var, &[Var]),
    refl: (&Decoder, Var, &[Var]),
    csd: Option<CsdPlacement>,
    floor: f32,
    hooks: ForwardHooks,
    traces: &mut Vec<(String, Var)>,
) -> Result<(Var, Var)> {
    let (idec, mut ih, iskips) = illum;
    let (rdec, mut rh, rskips) = refl;
    // Post-ReLU illumination features are often exactly zero; dividing by
    // them unfloored scales activations by 1/eps and saturates the output.
    let divide = |tape: &mut Tape, rh: Var, ih: Var| -> Result<Var> {
        let denom = if hooks.unit_illumination {
            tape.constant(Tensor::ones(tape.shape(ih)))
        } else {
            tape.clamp(ih, floor, f32::INFINITY)
        };
        csd_divide(tape, rh, denom, retinex::EPS)
    };
    for d in 0..idec.blocks.len() {
        ih = tape.upsample_nearest2x(ih)?;
        rh = tape.upsample_nearest2x(rh)?;
        if csd.is_some_and(CsdPlacement::at_upsample) {
            rh = divide(tape, rh, ih)?;
        }
        if hooks.trace {
            traces.push((format!("ienet.up{d}"), ih));
            traces.push((format!("renet.up{d}"), rh));
        }
        ih = idec.blocks[d].forward(tape, store, bind, ih)?;
        ih = tape.add(ih, iskips[3 - d])?;
        rh = rdec.blocks[d].forward(tape, store, bind, rh)?;
        rh = tape.add(rh, rskips[3 - d])?;
        if csd.is_some_and(CsdPlacement::at_skip) {
            rh = divide(tape, rh, ih)?;
        }
        if hooks.trace {
            traces.push((format!("ienet.skip{d}"), ih));
            traces.push((format!("renet.skip{d}"), rh));
        }
    }
    let i = idec.head.forward(tape, store, bind, ih)?;
    let i = tape.sigmoid(i);
    let r = rdec.head.forward(tape, store, bind, rh)?;
    Ok((r, i))
}

/// Block-mean downsampling of each plane by `factor`.
pub fn box_downsample(t: &Tensor, factor: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.h() % factor != 0 || s.w() % factor != 0 {
        return Err(CsdError::invalid("box_downsample", format!("{s:?} not divisible by {factor}")));
    }
    let (oh, ow) = (s.h() / factor, s.w() / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Vec::with_capacity(s.n() * s.c() * oh * ow);
    for plane in t.data().chunks_exact(s.plane()) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        acc += plane[y * s.w() + x] as f64;
                    }
                }
                out.push((acc * norm) as f32);
            }
        }
    }
    Tensor::new(Shape::new(s.n(), s.c(), oh, ow), out)
}
