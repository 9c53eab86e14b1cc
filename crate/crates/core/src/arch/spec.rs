//! Declarative model description and its flat `key = value` config form.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Two-path network: BU_f and BU_s in parallel after BU_i.
    GmNet,
    /// Single path with BU_m in place of the two paths.
    Baseline,
}

/// How the conv units inside one basic unit are joined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connection {
    /// BU_A: every conv unit after the first reads the sum of all earlier
    /// unit outputs, and the block emits the sum of all of them.
    Dense,
    /// BU_B: the block emits the last unit output plus the first.
    Straight,
    /// Plain chain.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Merge {
    Sum,
    Concat,
}

/// Group count of a grouped layer, either fixed or derived from its width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Groups {
    Fixed(usize),
    /// `channels / n`: each group holds `n` channels.
    PerChannels(usize),
}

impl Groups {
    pub fn resolve(self, channels: usize) -> Result<usize> {
        match self {
            Groups::Fixed(0) | Groups::PerChannels(0) => Err(Error::Config("group setting must be >= 1".into())),
            Groups::Fixed(g) => Ok(g),
            Groups::PerChannels(n) if channels.is_multiple_of(n) => Ok(channels / n),
            Groups::PerChannels(n) => Err(Error::Config(format!(
                "{channels} channels cannot be split into groups of {n}"
            ))),
        }
    }
}

impl fmt::Display for Groups {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Groups::Fixed(g) => write!(f, "{g}"),
            Groups::PerChannels(n) => write!(f, "c/{n}"),
        }
    }
}

impl FromStr for Groups {
    type Err = Error;

    /// `"8"` for a fixed count, `"c/8"` for eight channels per group.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (per, digits) = match s.strip_prefix("c/") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let n: usize = digits
            .parse()
            .map_err(|_| Error::Config(format!("bad group setting `{s}`, expected N or c/N")))?;
        if n == 0 {
            return Err(Error::Config("group setting must be >= 1".into()));
        }
        Ok(if per { Groups::PerChannels(n) } else { Groups::Fixed(n) })
    }
}

/// Group counts for every grouped layer of the two architectures. BU_f is
/// always ungrouped and BU_s always channel-wise, so neither appears here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupProfile {
    /// 3×3 convs of BU_i's conv units.
    pub bu_i: Groups,
    /// 3×3 convs of BU_m's conv units (baseline only).
    pub bu_m: Groups,
    /// 3×3 convs of BU_e's conv units.
    pub bu_e: Groups,
    /// Adaption unit closing BU_i.
    pub au_i: Groups,
    /// Adaption unit closing BU_m (baseline only).
    pub au_m: Groups,
    /// Shared adaption unit after the two-path merge (GM-Net only).
    pub au_merge: Groups,
    /// 1×1 tail conv of BU_e.
    pub tail: Groups,
}

impl Default for GroupProfile {
    fn default() -> Self {
        Self::uniform(Groups::Fixed(8), Groups::Fixed(4))
    }
}

impl GroupProfile {
    pub fn uniform(conv: Groups, adaption: Groups) -> Self {
        Self {
            bu_i: conv,
            bu_m: conv,
            bu_e: conv,
            au_i: adaption,
            au_m: adaption,
            au_merge: adaption,
            tail: adaption,
        }
    }

    /// Named group-count settings: `8+4` (default), `8+2`, `4+4` and
    /// `8+4&16+8` (eight channels per group in conv units, sixteen in
    /// adaption units).
    pub fn preset(name: &str) -> Result<Self> {
        let f = Groups::Fixed;
        Ok(match name {
            "8+4" => Self::uniform(f(8), f(4)),
            "8+2" => Self::uniform(f(8), f(2)),
            "4+4" => Self::uniform(f(4), f(4)),
            "8+4&16+8" => Self::uniform(Groups::PerChannels(8), Groups::PerChannels(16)),
            other => {
                return Err(Error::Config(format!(
                    "unknown group preset `{other}` (expected 8+4, 8+2, 4+4 or 8+4&16+8)"
                )))
            }
        })
    }

    /// Restrict grouping to the first block (BU_i), the last (BU_e), both,
    /// or neither. Layers outside the selected blocks become ungrouped; the
    /// middle of the network keeps its setting unless `none` is chosen.
    pub fn with_placement(mut self, placement: &str) -> Result<Self> {
        let one = Groups::Fixed(1);
        let (first, last) = match placement {
            "both" => (true, true),
            "block1" => (true, false),
            "block3" => (false, true),
            "none" => {
                return Ok(Self::uniform(one, one));
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown group placement `{other}` (expected none, block1, block3 or both)"
                )))
            }
        };
        if !first {
            self.bu_i = one;
            self.au_i = one;
        }
        if !last {
            self.bu_e = one;
            self.tail = one;
        }
        Ok(self)
    }
}

/// How the 1×1 bottleneck conv inside each conv unit is grouped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bottleneck {
    /// Shares the group count of the unit's 3×3 conv, so each group runs
    /// through the whole unit without mixing.
    Grouped,
    /// Always a full 1×1 conv that mixes all channels.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    Cifar10,
    Cifar100,
}

impl Dataset {
    pub fn in_channels(self) -> usize {
        match self {
            Dataset::Mnist => 1,
            _ => 3,
        }
    }

    pub fn input_size(self) -> usize {
        match self {
            Dataset::Mnist => 28,
            _ => 32,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Dataset::Cifar100 => 100,
            _ => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Cifar10 => "cifar10",
            Dataset::Cifar100 => "cifar100",
        }
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Dataset::Mnist),
            "cifar10" | "c10" => Ok(Dataset::Cifar10),
            "cifar100" | "c100" => Ok(Dataset::Cifar100),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected mnist, cifar10 or cifar100)"
            ))),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmnet" | "gm-net" => Ok(Variant::GmNet),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected gmnet or baseline)"))),
        }
    }
}

impl FromStr for Connection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "dense" => Ok(Connection::Dense),
            "b" | "straight" => Ok(Connection::Straight),
            "none" => Ok(Connection::None),
            other => Err(Error::Config(format!("unknown connection `{other}` (expected A, B or none)"))),
        }
    }
}

impl FromStr for Merge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Merge::Sum),
            "concat" => Ok(Merge::Concat),
            other => Err(Error::Config(format!("unknown merge `{other}` (expected sum or concat)"))),
        }
    }
}

impl FromStr for Bottleneck {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grouped" => Ok(Bottleneck::Grouped),
            "dense" | "ungrouped" => Ok(Bottleneck::Dense),
            other => Err(Error::Config(format!("unknown bottleneck `{other}` (expected grouped or dense)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::GmNet => "gmnet",
            Variant::Baseline => "baseline",
        })
    }
}

impl fmt::Display for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connection::Dense => "A",
            Connection::Straight => "B",
            Connection::None => "none",
        })
    }
}

impl fmt::Display for Merge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Merge::Sum => "sum",
            Merge::Concat => "concat",
        })
    }
}

impl fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bottleneck::Grouped => "grouped",
            Bottleneck::Dense => "dense",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub connection: Connection,
    pub merge: Merge,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Height and width of the (square) input images.
    pub input_size: usize,
    pub groups: GroupProfile,
    pub bottleneck: Bottleneck,
    /// Scales every channel count; 0.25 gives the desk-scale model.
    pub width: f64,
    pub dropout_keep: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            variant: Variant::GmNet,
            connection: Connection::Dense,
            merge: Merge::Sum,
            num_classes: 10,
            in_channels: 3,
            input_size: 32,
            groups: GroupProfile::default(),
            bottleneck: Bottleneck::Grouped,
            width: 1.0,
            dropout_keep: 0.8,
        }
    }
}

impl ModelSpec {
    pub fn gmnet() -> Self {
        Self::default()
    }

    pub fn baseline() -> Self {
        Self {
            variant: Variant::Baseline,
            ..Self::default()
        }
    }

    pub fn for_dataset(mut self, dataset: Dataset) -> Self {
        self.in_channels = dataset.in_channels();
        self.input_size = dataset.input_size();
        self.num_classes = dataset.num_classes();
        self
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    /// Channel count after applying the width multiplier.
    pub fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!("width must be > 0, got {}", self.width)));
        }
        if self.num_classes < 1 || self.in_channels < 1 || self.input_size < 1 {
            return Err(Error::Config(
                "num_classes, in_channels and input_size must be >= 1".into(),
            ));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout_keep must be in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        Ok(())
    }

    /// Parse a flat `key = value` config. Blank lines and `#` comments are
    /// ignored; unknown keys are rejected. Unset keys keep their defaults.
    pub fn from_config(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let mut placement = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", lineno + 1)));
            };
            spec.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(e))))?;
            if key.trim() == "groups.placement" {
                placement = Some(value.trim().to_string());
            }
        }
        // placement applies after any per-layer overrides regardless of order
        if let Some(p) = placement {
            spec.groups = spec.groups.with_placement(&p)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Apply one config key. `groups.placement` is recorded but only takes
    /// effect through [`ModelSpec::from_config`] or [`GroupProfile::with_placement`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got `{v}`")))
        };
        let real = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got `{v}`")))
        };
        match key {
            "variant" => self.variant = value.parse()?,
            "connection" => self.connection = value.parse()?,
            "merge" => self.merge = value.parse()?,
            "width" => self.width = real(value)?,
            "num_classes" => self.num_classes = num(value)?,
            "in_channels" => self.in_channels = num(value)?,
            "input_size" => self.input_size = num(value)?,
            "dropout_keep" => self.dropout_keep = real(value)?,
            "bottleneck" => self.bottleneck = value.parse()?,
            "dataset" => {
                let d: Dataset = value.parse()?;
                *self = self.clone().for_dataset(d);
            }
            "groups" => self.groups = GroupProfile::preset(value)?,
            "groups.placement" => {
                GroupProfile::default().with_placement(value)?;
            }
            "groups.bu_i" => self.groups.bu_i = value.parse()?,
            "groups.bu_m" => self.groups.bu_m = value.parse()?,
            "groups.bu_e" => self.groups.bu_e = value.parse()?,
            "groups.au_i" => self.groups.au_i = value.parse()?,
            "groups.au_m" => self.groups.au_m = value.parse()?,
            "groups.au_merge" => self.groups.au_merge = value.parse()?,
            "groups.tail" => self.groups.tail = value.parse()?,
            "groups.adaption" => {
                let g: Groups = value.parse()?;
                self.groups.au_i = g;
                self.groups.au_m = g;
                self.groups.au_merge = g;
                self.groups.tail = g;
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Serialize to the config form accepted by [`ModelSpec::from_config`].
    pub fn to_config(&self) -> String {
        let g = &self.groups;
        format!(
            "variant = {}\nconnection = {}\nmerge = {}\nwidth = {}\nnum_classes = {}\nin_channels = {}\n\
             input_size = {}\ndropout_keep = {}\nbottleneck = {}\ngroups.bu_i = {}\ngroups.bu_m = {}\n\
             groups.bu_e = {}\ngroups.au_i = {}\ngroups.au_m = {}\ngroups.au_merge = {}\ngroups.tail = {}\n",
            self.variant,
            self.connection,
            self.merge,
            self.width,
            self.num_classes,
            self.in_channels,
            self.input_size,
            self.dropout_keep,
            self.bottleneck,
            g.bu_i,
            g.bu_m,
            g.bu_e,
            g.au_i,
            g.au_m,
            g.au_merge,
            g.tail,
        )
    }
}

fn strip_prefix(e: Error) -> String {
    let s = e.to_string();
    s.strip_prefix("config: ").map(str::to_string).unwrap_or(s)
}
