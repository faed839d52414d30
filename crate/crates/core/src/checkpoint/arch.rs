//! Structural architecture inference from raw parameter names and shapes.
//!
//! Rules are evaluated in table order and the first structural match wins.
//! Filename heuristics only fill in what structure leaves open.

use serde::{Deserialize, Serialize};

use super::container::{TensorMap, TensorRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Vit,
    Swin,
    Resnet,
    Unet,
    Mobilenet,
    Mlp,
    YoloLike,
    Unknown,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Vit => "vit",
            Family::Swin => "swin",
            Family::Resnet => "resnet",
            Family::Unet => "unet",
            Family::Mobilenet => "mobilenet",
            Family::Mlp => "mlp",
            Family::YoloLike => "yolo_like",
            Family::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Multispectral,
    Sar,
    Unknown,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Multispectral => "multispectral",
            Modality::Sar => "sar",
            Modality::Unknown => "unknown",
        }
    }

    pub fn from_channels(channels: usize) -> Self {
        match channels {
            2 => Modality::Sar,
            3 => Modality::Rgb,
            c if c >= 4 => Modality::Multispectral,
            _ => Modality::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub rule_id: String,
    pub matched_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchInference {
    pub family: Family,
    pub in_channels: Option<usize>,
    pub embed_dim: Option<usize>,
    pub modality_hint: Modality,
    pub evidence: Vec<Evidence>,
}

/// How a structural rule matches a record.
#[derive(Debug, Clone, Copy)]
pub enum Matcher {
    /// Name contains the needle and the tensor is 4-D `[E, C, ph, pw]`.
    PatchEmbed { needle: &'static str },
    /// Name contains the needle and the tensor is a square `k x k` conv.
    StemConv { needle: &'static str, kernel: usize },
    /// Both an encoder and a decoder carry 4-D conv weights.
    EncoderDecoderConv,
    /// Name contains the needle (any shape).
    KeyFragment { needle: &'static str },
    /// Every record is rank <= 2 and at least one rank-2 `weight` exists.
    DenseOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct ArchRule {
    pub id: &'static str,
    pub family: Family,
    pub matcher: Matcher,
}

/// Ordered structural rule table. Swin is tested before ViT because both carry
/// a patch embedding; the relative-position table is what separates them.
pub static ARCH_RULES: &[ArchRule] = &[
    ArchRule { id: "swin.patch_embed", family: Family::Swin, matcher: Matcher::PatchEmbed { needle: "patch_embed" } },
    ArchRule { id: "vit.patch_embed", family: Family::Vit, matcher: Matcher::PatchEmbed { needle: "patch_embed" } },
    ArchRule { id: "resnet.stem_conv1", family: Family::Resnet, matcher: Matcher::StemConv { needle: "conv1.weight", kernel: 7 } },
    ArchRule { id: "resnet.stem", family: Family::Resnet, matcher: Matcher::StemConv { needle: "stem", kernel: 7 } },
    ArchRule { id: "unet.encoder_decoder", family: Family::Unet, matcher: Matcher::EncoderDecoderConv },
    ArchRule { id: "yolo.cv1_block", family: Family::YoloLike, matcher: Matcher::KeyFragment { needle: ".cv1.conv.weight" } },
    ArchRule { id: "mobilenet.inverted_residual", family: Family::Mobilenet, matcher: Matcher::KeyFragment { needle: ".conv.0.0.weight" } },
    ArchRule { id: "mlp.dense_only", family: Family::Mlp, matcher: Matcher::DenseOnly },
];

/// Filename tokens and the modality they indicate. Checked in order.
pub static MODALITY_KEYWORDS: &[(&str, Modality)] = &[
    ("sar", Modality::Sar),
    ("s1", Modality::Sar),
    ("sentinel1", Modality::Sar),
    ("radar", Modality::Sar),
    ("s2", Modality::Multispectral),
    ("sentinel2", Modality::Multispectral),
    ("multispectral", Modality::Multispectral),
    ("hyperspectral", Modality::Multispectral),
    ("landsat", Modality::Multispectral),
    ("ms", Modality::Multispectral),
    ("rgb", Modality::Rgb),
    ("naip", Modality::Rgb),
    ("aerial", Modality::Rgb),
];

fn is_swin(map: &TensorMap) -> bool {
    map.records().iter().any(|r| r.name().contains("relative_position_bias_table"))
}

fn conv4(r: &TensorRecord) -> Option<(usize, usize, usize, usize)> {
    match *r.shape() {
        [o, c, kh, kw] => Some((o, c, kh, kw)),
        _ => None,
    }
}

fn apply_rule(rule: &ArchRule, map: &TensorMap) -> Option<ArchInference> {
    let hit = |key: &str| vec![Evidence { rule_id: rule.id.to_string(), matched_key: key.to_string() }];
    match rule.matcher {
        Matcher::PatchEmbed { needle } => {
            if (rule.family == Family::Swin) != is_swin(map) {
                return None;
            }
            map.records()
                .iter()
                .filter(|r| r.name().contains(needle) && r.name().ends_with("weight"))
                .find_map(|r| conv4(r).map(|(e, c, _, _)| (r, e, c)))
                .map(|(r, e, c)| ArchInference {
                    family: rule.family,
                    in_channels: Some(c),
                    embed_dim: Some(e),
                    modality_hint: Modality::Unknown,
                    evidence: hit(r.name()),
                })
        }
        Matcher::StemConv { needle, kernel } => map
            .records()
            .iter()
            .filter(|r| r.name().contains(needle))
            .find_map(|r| match conv4(r) {
                Some((_, c, kh, kw)) if kh == kernel && kw == kernel => Some((r, c)),
                _ => None,
            })
            .map(|(r, c)| ArchInference {
                family: rule.family,
                in_channels: Some(c),
                embed_dim: None,
                modality_hint: Modality::Unknown,
                evidence: hit(r.name()),
            }),
        Matcher::EncoderDecoderConv => {
            let enc = map.records().iter().find(|r| r.name().contains("encoder") && conv4(r).is_some())?;
            let dec = map.records().iter().find(|r| r.name().contains("decoder") && conv4(r).is_some())?;
            let mut evidence = hit(enc.name());
            evidence.extend(hit(dec.name()));
            Some(ArchInference {
                family: rule.family,
                in_channels: conv4(enc).map(|(_, c, _, _)| c),
                embed_dim: None,
                modality_hint: Modality::Unknown,
                evidence,
            })
        }
        Matcher::KeyFragment { needle } => {
            let r = map.records().iter().find(|r| r.name().contains(needle))?;
            let in_channels = map.records().iter().find_map(|r| conv4(r).map(|(_, c, _, _)| c));
            Some(ArchInference {
                family: rule.family,
                in_channels,
                embed_dim: None,
                modality_hint: Modality::Unknown,
                evidence: hit(r.name()),
            })
        }
        Matcher::DenseOnly => {
            if map.is_empty() || map.records().iter().any(|r| r.rank() > 2) {
                return None;
            }
            // Input width of the first dense layer in canonical order.
            let first = map.records().iter().find(|r| r.rank() == 2 && r.name().ends_with("weight"))?;
            Some(ArchInference {
                family: rule.family,
                in_channels: Some(first.shape()[1]).filter(|&c| c > 0),
                embed_dim: None,
                modality_hint: Modality::Unknown,
                evidence: hit(first.name()),
            })
        }
    }
}

/// Lower-cased alphanumeric tokens of a filename; "sentinel-1" also yields
/// the joined form "sentinel1".
fn filename_tokens(filename: &str) -> Vec<String> {
    let base = filename.rsplit(['/', '\\']).next().unwrap_or(filename).to_ascii_lowercase();
    let parts: Vec<&str> = base.split(|c: char| !c.is_ascii_alphanumeric()).filter(|s| !s.is_empty()).collect();
    let mut tokens: Vec<String> = parts.iter().map(|s| s.to_string()).collect();
    for pair in parts.windows(2) {
        tokens.push(format!("{}{}", pair[0], pair[1]));
    }
    tokens
}

fn modality_from_filename(filename: &str) -> Option<(&'static str, Modality)> {
    let tokens = filename_tokens(filename);
    MODALITY_KEYWORDS
        .iter()
        .find(|(kw, _)| tokens.iter().any(|t| t == kw))
        .map(|&(kw, m)| (kw, m))
}

/// Infers family, input channels and modality. Pure function of its inputs.
pub fn infer_architecture(map: &TensorMap, filename: &str) -> ArchInference {
    let mut inference = ARCH_RULES
        .iter()
        .find_map(|rule| apply_rule(rule, map))
        .unwrap_or(ArchInference {
            family: Family::Unknown,
            in_channels: None,
            embed_dim: None,
            modality_hint: Modality::Unknown,
            evidence: Vec::new(),
        });

    let structural = inference.family != Family::Unknown && inference.family != Family::Mlp;
    if let Some(c) = inference.in_channels.filter(|_| structural) {
        inference.modality_hint = Modality::from_channels(c);
    }
    if inference.modality_hint == Modality::Unknown {
        if let Some((kw, modality)) = modality_from_filename(filename) {
            inference.modality_hint = modality;
            inference.evidence.push(Evidence { rule_id: "filename.modality".into(), matched_key: kw.into() });
        }
    }
    inference
}
