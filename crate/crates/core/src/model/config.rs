use std::fmt;
use std::str::FromStr;

use crate::error::{CsdError, Result};
use crate::retinex::EPS;

/// How the two streams are laid out and bridged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One U-Net, 4-channel head split into reflectance and illumination.
    ArcA,
    ArcB,
    /// Shared encoder, separate illumination and reflectance decoders.
    ArcC,
    ArcD,
    /// Two full U-Nets.
    ArcE,
    ArcF,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Framework {
    Single,
    SharedEncoder,
    TwoStream,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Connection {
    ReconstructionLoss,
    Csd,
}

/// Where reflectance decoder features are divided by illumination features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CsdPlacement {
    UpsampleOnly,
    SkipAddOnly,
    Both,
}

impl CsdPlacement {
    pub fn at_upsample(self) -> bool {
        matches!(self, CsdPlacement::UpsampleOnly | CsdPlacement::Both)
    }

    pub fn at_skip(self) -> bool {
        matches!(self, CsdPlacement::SkipAddOnly | CsdPlacement::Both)
    }
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::ArcA,
        Variant::ArcB,
        Variant::ArcC,
        Variant::ArcD,
        Variant::ArcE,
        Variant::ArcF,
    ];

    pub fn framework(self) -> Framework {
        match self {
            Variant::ArcA | Variant::ArcB => Framework::Single,
            Variant::ArcC | Variant::ArcD => Framework::SharedEncoder,
            Variant::ArcE | Variant::ArcF => Framework::TwoStream,
        }
    }

    pub fn connection(self) -> Connection {
        match self {
            Variant::ArcA | Variant::ArcC | Variant::ArcE => Connection::ReconstructionLoss,
            _ => Connection::Csd,
        }
    }

    /// The variant with the same framework and the other connection.
    pub fn sibling(self) -> Variant {
        match self {
            Variant::ArcA => Variant::ArcB,
            Variant::ArcB => Variant::ArcA,
            Variant::ArcC => Variant::ArcD,
            Variant::ArcD => Variant::ArcC,
            Variant::ArcE => Variant::ArcF,
            Variant::ArcF => Variant::ArcE,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Variant::ArcA => 'a',
            Variant::ArcB => 'b',
            Variant::ArcC => 'c',
            Variant::ArcD => 'd',
            Variant::ArcE => 'e',
            Variant::ArcF => 'f',
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "arc_{}", self.letter())
    }
}

impl FromStr for Variant {
    type Err = CsdError;

    fn from_str(s: &str) -> Result<Self> {
        let letter = s.strip_prefix("arc_").unwrap_or(s);
        Variant::ALL
            .into_iter()
            .find(|v| letter.len() == 1 && letter.starts_with(v.letter()))
            .ok_or_else(|| CsdError::Config(format!("unknown variant `{s}`")))
    }
}

impl fmt::Display for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connection::ReconstructionLoss => "reconstruction_loss",
            Connection::Csd => "csd",
        })
    }
}

impl FromStr for Connection {
    type Err = CsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction_loss" => Ok(Connection::ReconstructionLoss),
            "csd" => Ok(Connection::Csd),
            _ => Err(CsdError::Config(format!("unknown connection `{s}`"))),
        }
    }
}

impl fmt::Display for CsdPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CsdPlacement::UpsampleOnly => "upsample_only",
            CsdPlacement::SkipAddOnly => "skip_add_only",
            CsdPlacement::Both => "both",
        })
    }
}

impl FromStr for CsdPlacement {
    type Err = CsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upsample_only" => Ok(CsdPlacement::UpsampleOnly),
            "skip_add_only" => Ok(CsdPlacement::SkipAddOnly),
            "both" => Ok(CsdPlacement::Both),
            _ => Err(CsdError::Config(format!("unknown csd placement `{s}`"))),
        }
    }
}

pub const DEFAULT_CHANNEL_PLAN: [usize; 9] = [32, 64, 128, 256, 512, 256, 128, 64, 32];
pub const DEFAULT_FEATURE_FLOOR: f32 = 1.0;
pub const LITE_CHANNEL_PLAN: [usize; 9] = [12; 9];

/// Architecture of an enhancement model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub connection: Connection,
    pub csd_placement: CsdPlacement,
    pub guidance: bool,
    /// Reflectance output is `input + delta` (adversarial generator).
    pub residual_output: bool,
    /// Widths of the five encoder blocks then the four decoder blocks.
    pub channel_plan: Vec<usize>,
    pub eps: f32,
    /// Illumination-stream features are raised to at least this value before
    /// they divide reflectance features.
    pub feature_floor: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_variant(Variant::ArcF)
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        ModelConfig {
            variant,
            connection: variant.connection(),
            csd_placement: CsdPlacement::Both,
            guidance: true,
            residual_output: false,
            channel_plan: DEFAULT_CHANNEL_PLAN.to_vec(),
            eps: EPS,
            feature_floor: DEFAULT_FEATURE_FLOOR,
        }
    }

    /// Named configurations: `csdnet`, `csdgan`, `litecsdnet`, `slitecsdnet`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ModelConfig::for_variant(Variant::ArcF);
        match name {
            "csdnet" => {}
            "csdgan" => cfg.residual_output = true,
            "litecsdnet" => cfg.channel_plan = LITE_CHANNEL_PLAN.to_vec(),
            "slitecsdnet" => {
                cfg = ModelConfig::for_variant(Variant::ArcD);
                cfg.channel_plan = LITE_CHANNEL_PLAN.to_vec();
            }
            _ => return Err(CsdError::Config(format!("unknown preset `{name}`"))),
        }
        Ok(cfg)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.connection = variant.connection();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let plan = &self.channel_plan;
        if plan.len() != 9 {
            return Err(CsdError::Config(format!(
                "channel plan needs 9 widths, got {}",
                plan.len()
            )));
        }
        if plan.contains(&0) {
            return Err(CsdError::Config("channel widths must be positive".into()));
        }
        for d in 0..4 {
            if plan[5 + d] != plan[3 - d] {
                return Err(CsdError::Config(format!(
                    "decoder width {} at position {} must equal encoder width {} for the additive skip",
                    plan[5 + d],
                    5 + d,
                    plan[3 - d]
                )));
            }
        }
        if self.connection != self.variant.connection() {
            return Err(CsdError::Config(format!(
                "{} requires connection {}, got {}",
                self.variant,
                self.variant.connection(),
                self.connection
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(CsdError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.feature_floor >= 0.0 && self.feature_floor.is_finite()) {
            return Err(CsdError::Config(format!(
                "feature_floor must be nonnegative, got {}",
                self.feature_floor
            )));
        }
        Ok(())
    }

    pub fn encoder_widths(&self) -> &[usize] {
        &self.channel_plan[..5]
    }

    pub fn decoder_widths(&self) -> &[usize] {
        &self.channel_plan[5..]
    }

    /// `key = value` pairs under the `model.` prefix.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let plan: Vec<String> = self.channel_plan.iter().map(usize::to_string).collect();
        vec![
            ("model.variant".into(), self.variant.to_string()),
            ("model.connection".into(), self.connection.to_string()),
            ("model.csd_placement".into(), self.csd_placement.to_string()),
            ("model.guidance".into(), self.guidance.to_string()),
            ("model.residual_output".into(), self.residual_output.to_string()),
            ("model.channel_plan".into(), plan.join(",")),
            ("model.eps".into(), format!("{:e}", self.eps)),
            ("model.feature_floor".into(), self.feature_floor.to_string()),
        ]
    }

    /// Sets one field from its dotted key. Returns `false` for keys outside
    /// the `model.` namespace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("model.") else {
            return Ok(false);
        };
        match field {
            "variant" => {
                self.variant = value.parse()?;
                self.connection = self.variant.connection();
            }
            "connection" => self.connection = value.parse()?,
            "csd_placement" => self.csd_placement = value.parse()?,
            "guidance" => self.guidance = parse_bool(key, value)?,
            "residual_output" => self.residual_output = parse_bool(key, value)?,
            "channel_plan" => {
                self.channel_plan = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| CsdError::Config(format!("{key}: {e}")))?
            }
            "eps" => {
                self.eps = value
                    .parse()
                    .map_err(|e| CsdError::Config(format!("{key}: {e}")))?
            }
            "feature_floor" => {
                self.feature_floor = value
                    .parse()
                    .map_err(|e| CsdError::Config(format!("{key}: {e}")))?
            }
            _ => return Err(CsdError::Config(format!("unknown key `{key}`"))),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(CsdError::Config(format!("unknown key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CsdError::Config(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

/// Layout of the global-local patch discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub channels: [usize; 3],
    pub patch_count: usize,
    pub patch_size: usize,
    pub leaky_slope: f32,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: [16, 32, 64],
            patch_count: 5,
            patch_size: 32,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(CsdError::Config("discriminator widths must be positive".into()));
        }
        if self.patch_size == 0 || self.patch_size % 8 != 0 {
            return Err(CsdError::Config(format!(
                "patch size {} must be a positive multiple of 8",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// `key = value` pairs under the `disc.` prefix.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let widths: Vec<String> = self.channels.iter().map(usize::to_string).collect();
        vec![
            ("disc.channels".into(), widths.join(",")),
            ("disc.patch_count".into(), self.patch_count.to_string()),
            ("disc.patch_size".into(), self.patch_size.to_string()),
            ("disc.leaky_slope".into(), self.leaky_slope.to_string()),
        ]
    }

    /// Sets one field from its dotted key. Returns `false` for keys outside
    /// the `disc.` namespace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("disc.") else {
            return Ok(false);
        };
        let bad = |e: &dyn fmt::Display| CsdError::Config(format!("{key}: {e}"));
        match field {
            "channels" => {
                let widths: Vec<usize> = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(&e))?;
                self.channels = widths
                    .try_into()
                    .map_err(|w: Vec<usize>| bad(&format!("expected 3 widths, got {}", w.len())))?;
            }
            "patch_count" => self.patch_count = value.parse().map_err(|e| bad(&e))?,
            "patch_size" => self.patch_size = value.parse().map_err(|e| bad(&e))?,
            "leaky_slope" => self.leaky_slope = value.parse().map_err(|e| bad(&e))?,
            _ => return Err(CsdError::Config(format!("unknown key `{key}`"))),
        }
        Ok(true)
    }
}
