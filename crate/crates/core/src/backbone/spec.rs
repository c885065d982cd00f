use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::tensor::ops::window_out;

/// 1-based indices of the blocks whose outputs pass through attention.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlacementSet(BTreeSet<usize>);

impl PlacementSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, block: usize) -> bool {
        self.0.contains(&block)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_subset(&self, other: &PlacementSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        match self.0.iter().find(|&&k| k == 0 || k > num_blocks) {
            Some(k) => Err(Error::Config(format!(
                "placement index {k} outside blocks 1..={num_blocks}"
            ))),
            None => Ok(()),
        }
    }

    /// Compact label such as `3,4`, or `none` for the empty set.
    pub fn label(&self) -> String {
        if self.0.is_empty() {
            return "none".into();
        }
        self.0.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl<I: IntoIterator<Item = usize>> From<I> for PlacementSet {
    fn from(iter: I) -> Self {
        PlacementSet(iter.into_iter().collect())
    }
}

impl fmt::Display for PlacementSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.label().replace("none", ""))
    }
}

impl FromStr for PlacementSet {
    type Err = Error;

    /// Parses `3,4`, `{3,4}`, `none` or the empty string.
    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim().trim_start_matches('{').trim_end_matches('}').trim();
        if body.is_empty() || body.eq_ignore_ascii_case("none") {
            return Ok(Self::empty());
        }
        body.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad placement index {p:?} in {s:?}")))
            })
            .collect::<Result<BTreeSet<_>>>()
            .map(PlacementSet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseBlockSpec {
    pub layers: usize,
    pub growth: usize,
    /// Channel compression of the transition following this block; `None`
    /// means no transition (the final block).
    #[serde(default)]
    pub compression: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VggBlockSpec {
    pub convs: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum Backbone {
    /// Stem (3x3 conv, norm, relu, 2x2 max-pool) then dense blocks joined
    /// by norm-relu-1x1-conv-avgpool transitions.
    Dense {
        stem_channels: usize,
        blocks: Vec<DenseBlockSpec>,
    },
    /// Blocks of 3x3 conv+relu layers, each closed by a 2x2 max-pool.
    Vgg { blocks: Vec<VggBlockSpec> },
}

impl Backbone {
    pub fn num_blocks(&self) -> usize {
        match self {
            Backbone::Dense { blocks, .. } => blocks.len(),
            Backbone::Vgg { blocks } => blocks.len(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Backbone::Dense { .. } => "dense",
            Backbone::Vgg { .. } => "vgg",
        }
    }
}

/// Output geometry of one block, before and after its attention site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: InputShape,
    pub backbone: Backbone,
    pub placement: PlacementSet,
    pub attention: AttentionConfig,
    pub num_labels: usize,
}

impl ModelSpec {
    /// Checks the block-to-block channel and spatial arithmetic and returns
    /// the output shape of every block.
    pub fn stage_shapes(&self) -> Result<Vec<StageShape>> {
        let block_err = |k: usize, msg: String| Error::Config(format!("block {k}: {msg}"));
        let InputShape { channels, height, width } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", self.input)));
        }
        let halve = |k: usize, h: usize, w: usize| -> Result<(usize, usize)> {
            match (window_out(h, 2, 2, 0), window_out(w, 2, 2, 0)) {
                (Some(a), Some(b)) => Ok((a, b)),
                _ => Err(block_err(k, format!("cannot downsample {h}x{w} by 2"))),
            }
        };
        let mut shapes = Vec::new();
        match &self.backbone {
            Backbone::Dense { stem_channels, blocks } => {
                if *stem_channels == 0 {
                    return Err(block_err(1, "stem has zero channels".into()));
                }
                let (mut h, mut w) = halve(1, height, width)?;
                let mut c = *stem_channels;
                for (i, b) in blocks.iter().enumerate() {
                    let k = i + 1;
                    if b.layers > 0 && b.growth == 0 {
                        return Err(block_err(k, "growth rate must be positive".into()));
                    }
                    c += b.layers * b.growth;
                    shapes.push(StageShape { channels: c, height: h, width: w });
                    if let Some(theta) = b.compression {
                        if !(theta > 0.0 && theta <= 1.0) {
                            return Err(block_err(k, format!("compression {theta} outside (0, 1]")));
                        }
                        let out = (c as f64 * theta).floor() as usize;
                        if out == 0 {
                            return Err(block_err(k, format!("transition compresses {c} channels to zero")));
                        }
                        c = out;
                        (h, w) = halve(k + 1, h, w)?;
                    }
                }
            }
            Backbone::Vgg { blocks } => {
                let (mut h, mut w) = (height, width);
                for (i, b) in blocks.iter().enumerate() {
                    let k = i + 1;
                    if b.convs == 0 || b.channels == 0 {
                        return Err(block_err(k, "needs at least one conv and one channel".into()));
                    }
                    (h, w) = halve(k, h, w)?;
                    shapes.push(StageShape { channels: b.channels, height: h, width: w });
                }
            }
        }
        if shapes.is_empty() {
            return Err(Error::Config("backbone has no blocks".into()));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<Vec<StageShape>> {
        if self.num_labels == 0 {
            return Err(Error::Config("num_labels must be at least 1".into()));
        }
        let shapes = self.stage_shapes()?;
        self.placement.validate(shapes.len())?;
        for k in self.placement.iter() {
            self.attention
                .validate(shapes[k - 1].channels)
                .map_err(|e| Error::Config(format!("attention at block {k}: {e}")))?;
        }
        Ok(shapes)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("model spec serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const DESK_INPUT: InputShape = InputShape {
    channels: 1,
    height: 32,
    width: 32,
};
pub const DESK_LABELS: usize = 6;

/// Four dense blocks of two layers, growth 8, compression 0.5.
pub fn dense_mini_backbone() -> Backbone {
    let block = |compression| DenseBlockSpec {
        layers: 2,
        growth: 8,
        compression,
    };
    Backbone::Dense {
        stem_channels: 16,
        blocks: vec![block(Some(0.5)), block(Some(0.5)), block(Some(0.5)), block(None)],
    }
}

/// Five blocks of (1, 1, 2, 2, 2) convs with (8, 16, 32, 32, 32) channels.
pub fn vgg_mini_backbone() -> Backbone {
    let blocks = [(1, 8), (1, 16), (2, 32), (2, 32), (2, 32)]
        .into_iter()
        .map(|(convs, channels)| VggBlockSpec { convs, channels })
        .collect();
    Backbone::Vgg { blocks }
}

/// Placement sets compared in the placement ablation, per family.
pub fn placement_options(family: &str) -> Vec<PlacementSet> {
    match family {
        "dense" => vec![[1, 2, 3, 4].into(), [3, 4].into(), [4].into()],
        "vgg" => vec![[1, 2, 3, 4, 5].into(), [3, 4, 5].into(), [5].into()],
        _ => Vec::new(),
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "dense-mini",
    "dense-mini-plain",
    "dense-mini-s1234",
    "dense-mini-s34",
    "dense-mini-s4",
    "vgg-mini",
    "vgg-mini-plain",
    "vgg-mini-s12345",
    "vgg-mini-s345",
    "vgg-mini-s5",
];

/// Desk-scale model specs. The bare family names carry the deep placement
/// ({3,4} for dense, {3,4,5} for vgg); suffixes select other sets.
pub fn preset(name: &str) -> Result<ModelSpec> {
    let (backbone, rest) = if let Some(rest) = name.strip_prefix("dense-mini") {
        (dense_mini_backbone(), rest)
    } else if let Some(rest) = name.strip_prefix("vgg-mini") {
        (vgg_mini_backbone(), rest)
    } else {
        return Err(unknown_preset(name));
    };
    let placement: PlacementSet = match (backbone.family(), rest) {
        ("dense", "") | ("dense", "-s34") => [3, 4].into(),
        ("dense", "-s1234") => [1, 2, 3, 4].into(),
        ("dense", "-s4") => [4].into(),
        ("vgg", "") | ("vgg", "-s345") => [3, 4, 5].into(),
        ("vgg", "-s12345") => [1, 2, 3, 4, 5].into(),
        ("vgg", "-s5") => [5].into(),
        (_, "-plain") => PlacementSet::empty(),
        _ => return Err(unknown_preset(name)),
    };
    Ok(ModelSpec {
        input: DESK_INPUT,
        backbone,
        placement,
        attention: AttentionConfig::MINI,
        num_labels: DESK_LABELS,
    })
}

fn unknown_preset(name: &str) -> Error {
    Error::Config(format!(
        "unknown preset {name:?}; valid presets: {}",
        PRESET_NAMES.join(", ")
    ))
}
