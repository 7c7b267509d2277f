use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Spatial reduction of both stems.
pub const PATCH_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    Single,
    PerClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    LayerNorm,
    BatchNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemKind {
    Conv,
    LinearProjection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    ClassAttention,
    AveragePool,
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $text),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(format!(
                        "unknown value {other:?}, expected one of: {}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(TokenMode { Single => "single", PerClass => "per_class" });
keyword_enum!(NormKind { LayerNorm => "layer_norm", BatchNorm => "batch_norm" });
keyword_enum!(StemKind { Conv => "conv", LinearProjection => "linear_projection" });
keyword_enum!(HeadMode { ClassAttention => "class_attention", AveragePool => "average_pool" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub token_mode: TokenMode,
    pub norm_kind: NormKind,
    pub stem_kind: StemKind,
    pub head_mode: HeadMode,
    pub attention_heads: usize,
    pub drop_path: f64,
    pub layerscale_init: f64,
    pub se_reduction: usize,
    pub ffn_ratio: usize,
    pub ln_eps: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 384,
            depth: 60,
            num_classes: 1000,
            token_mode: TokenMode::Single,
            norm_kind: NormKind::LayerNorm,
            stem_kind: StemKind::Conv,
            head_mode: HeadMode::ClassAttention,
            attention_heads: 1,
            drop_path: 0.0,
            layerscale_init: 1e-4,
            se_reduction: 4,
            ffn_ratio: 4,
            ln_eps: 1e-6,
            bn_eps: 1e-5,
        }
    }
}

const DESK_LAYERSCALE: f64 = 0.1;

/// Names accepted by [`ModelConfig::preset`].
pub const PRESETS: &[&str] = &[
    "S20", "S36", "S60", "S120", "B36", "B60", "B120", "L60", "L120", "desk8", "desk32",
];

impl ModelConfig {
    /// Paper-scale presets (`S`, `B`, `L` width followed by the depth, with
    /// 1000 classes) and the desk presets `desk8` / `desk32`. The shallow
    /// desk models start LayerScale at 0.1.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk8" | "desk" => {
                return Ok(Self {
                    width: 8,
                    depth: 2,
                    num_classes: 3,
                    layerscale_init: DESK_LAYERSCALE,
                    ..Self::default()
                })
            }
            "desk32" => {
                return Ok(Self {
                    width: 32,
                    depth: 4,
                    num_classes: 3,
                    layerscale_init: DESK_LAYERSCALE,
                    ..Self::default()
                })
            }
            _ => {}
        }
        let unknown = || {
            Error::Config(format!(
                "unknown preset {name:?}; known presets: {}",
                PRESETS.join(", ")
            ))
        };
        let mut chars = name.chars();
        let width = match chars.next() {
            Some('S') => 384,
            Some('B') => 768,
            Some('L') => 1024,
            _ => return Err(unknown()),
        };
        let depth: usize = chars.as_str().parse().map_err(|_| unknown())?;
        if depth == 0 {
            return Err(unknown());
        }
        Ok(Self {
            width,
            depth,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.width == 0 {
            return bad("width", "must be positive".into());
        }
        if self.depth == 0 {
            return bad("depth", "must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive".into());
        }
        if self.attention_heads == 0 || self.width % self.attention_heads != 0 {
            return bad(
                "attention_heads",
                format!("{} must be positive and divide width {}", self.attention_heads, self.width),
            );
        }
        if self.se_reduction == 0 || self.width % self.se_reduction != 0 {
            return bad(
                "se_reduction",
                format!("{} must be positive and divide width {}", self.se_reduction, self.width),
            );
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad("drop_path", format!("{} outside [0, 1)", self.drop_path));
        }
        if !(self.layerscale_init > 0.0) || !self.layerscale_init.is_finite() {
            return bad("layerscale_init", format!("{} must be positive", self.layerscale_init));
        }
        if !(self.ln_eps > 0.0) || !(self.bn_eps > 0.0) {
            return bad("ln_eps/bn_eps", "must be positive".into());
        }
        if self.head_mode == HeadMode::AveragePool && self.token_mode == TokenMode::PerClass {
            return bad(
                "head_mode",
                "average_pool has no tokens; use token_mode = single".into(),
            );
        }
        Ok(())
    }

    /// Output channels of the four stem convolutions.
    pub fn is_desk(name: &str) -> bool {
        matches!(name, "desk" | "desk8" | "desk32")
    }

    pub fn stem_widths(&self) -> [usize; 4] {
        let d = self.width;
        [(d / 8).max(1), (d / 4).max(1), (d / 2).max(1), d]
    }

    pub fn tokens(&self) -> usize {
        match self.token_mode {
            TokenMode::Single => 1,
            TokenMode::PerClass => self.num_classes,
        }
    }

    pub fn se_hidden(&self) -> usize {
        self.width / self.se_reduction
    }

    /// Line-oriented `key=value` form used inside checkpoints.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("width".into(), self.width.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("token_mode".into(), self.token_mode.to_string()),
            ("norm_kind".into(), self.norm_kind.to_string()),
            ("stem_kind".into(), self.stem_kind.to_string()),
            ("head_mode".into(), self.head_mode.to_string()),
            ("attention_heads".into(), self.attention_heads.to_string()),
            ("drop_path".into(), format!("{:?}", self.drop_path)),
            ("layerscale_init".into(), format!("{:?}", self.layerscale_init)),
            ("se_reduction".into(), self.se_reduction.to_string()),
            ("ffn_ratio".into(), self.ffn_ratio.to_string()),
            ("ln_eps".into(), format!("{:?}", self.ln_eps)),
            ("bn_eps".into(), format!("{:?}", self.bn_eps)),
        ]
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.trim()
                .parse()
                .map_err(|_| format!("cannot parse {v:?} as a number"))
        }
        match key {
            "width" => self.width = num(value)?,
            "depth" => self.depth = num(value)?,
            "num_classes" => self.num_classes = num(value)?,
            "token_mode" => self.token_mode = value.trim().parse()?,
            "norm_kind" => self.norm_kind = value.trim().parse()?,
            "stem_kind" => self.stem_kind = value.trim().parse()?,
            "head_mode" => self.head_mode = value.trim().parse()?,
            "attention_heads" => self.attention_heads = num(value)?,
            "drop_path" => self.drop_path = num(value)?,
            "layerscale_init" => self.layerscale_init = num(value)?,
            "se_reduction" => self.se_reduction = num(value)?,
            "ffn_ratio" => self.ffn_ratio = num(value)?,
            "ln_eps" => self.ln_eps = num(value)?,
            "bn_eps" => self.bn_eps = num(value)?,
            other => return Err(format!("unknown model key {other:?}")),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigKey {
                key: line.to_string(),
                line: Some(i + 1),
                detail: "expected key=value".into(),
            })?;
            cfg.set(k.trim(), v).map_err(|detail| Error::ConfigKey {
                key: k.trim().to_string(),
                line: Some(i + 1),
                detail,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Checks that `h`×`w` is a valid input size.
pub fn check_resolution(h: usize, w: usize) -> Result<()> {
    let suggest = |v: usize| {
        let lo = v / PATCH_STRIDE * PATCH_STRIDE;
        let hi = lo + PATCH_STRIDE;
        if lo == 0 {
            format!("{hi}")
        } else {
            format!("{lo} or {hi}")
        }
    };
    for (axis, v) in [("height", h), ("width", w)] {
        if v == 0 || v % PATCH_STRIDE != 0 {
            return Err(Error::Resolution(format!(
                "input {axis} {v} is not a positive multiple of {PATCH_STRIDE}; nearest valid sizes: {}",
                suggest(v)
            )));
        }
    }
    Ok(())
}
