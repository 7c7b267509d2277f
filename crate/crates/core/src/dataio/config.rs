use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{check_resolution, ModelConfig};
use crate::trainer::{PlanMode, TrainPlan};

/// Where a resolved setting came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File { line: usize },
    Flag,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Default => f.write_str("default"),
            Provenance::File { line } => write!(f, "file:{line}"),
            Provenance::Flag => f.write_str("flag"),
        }
    }
}

/// Model, training plan and paths of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub resolution: usize,
    /// Synthetic images per class when no data directory is given.
    pub n_per_class: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub provenance: BTreeMap<String, Provenance>,
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "preset",
    "width",
    "depth",
    "num_classes",
    "token_mode",
    "norm_kind",
    "stem_kind",
    "head_mode",
    "attention_heads",
    "layerscale_init",
    "se_reduction",
    "ffn_ratio",
    "ln_eps",
    "bn_eps",
    "mode",
    "epochs",
    "batch_size",
    "lr",
    "min_lr",
    "weight_decay",
    "drop_path",
    "label_smoothing",
    "warmup_frac",
    "seed",
    "optimizer",
    "beta1",
    "beta2",
    "opt_eps",
    "trust_min",
    "trust_max",
    "augment",
    "resolution",
    "n_per_class",
    "data",
    "out",
    "checkpoint",
];

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::preset("desk32").expect("desk32 preset exists");
        Self {
            preset: Some("desk32".into()),
            model,
            plan: TrainPlan::desk(),
            resolution: 32,
            n_per_class: 100,
            data: None,
            out: None,
            checkpoint: None,
            provenance: KEYS.iter().map(|k| (k.to_string(), Provenance::Default)).collect(),
        }
    }
}

impl RunConfig {
    /// Resolved settings as `key = value  # source` lines.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let src = self.provenance.get(&k).copied().unwrap_or(Provenance::Default);
            out.push_str(&format!("{k} = {v}  # {src}\n"));
        }
        out
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let p = &self.plan;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut e: Vec<(String, String)> = vec![("preset".into(), self.preset.clone().unwrap_or_default())];
        e.extend(self.model.entries().into_iter().filter(|(k, _)| k != "drop_path"));
        e.extend([
            ("mode".into(), p.mode.to_string()),
            ("epochs".into(), p.epochs.to_string()),
            ("batch_size".into(), p.batch_size.to_string()),
            ("lr".into(), format!("{:?}", p.base_lr)),
            ("min_lr".into(), format!("{:?}", p.min_lr)),
            ("weight_decay".into(), format!("{:?}", p.weight_decay)),
            ("drop_path".into(), format!("{:?}", p.drop_path)),
            ("label_smoothing".into(), format!("{:?}", p.label_smoothing)),
            ("warmup_frac".into(), format!("{:?}", p.warmup_frac)),
            ("seed".into(), p.seed.to_string()),
            ("optimizer".into(), p.optimizer.to_string()),
            ("beta1".into(), format!("{:?}", p.beta1)),
            ("beta2".into(), format!("{:?}", p.beta2)),
            ("opt_eps".into(), format!("{:?}", p.opt_eps)),
            ("trust_min".into(), format!("{:?}", p.trust_clip.0)),
            ("trust_max".into(), format!("{:?}", p.trust_clip.1)),
            ("augment".into(), p.augment.to_string()),
            ("resolution".into(), self.resolution.to_string()),
            ("n_per_class".into(), self.n_per_class.to_string()),
            ("data".into(), path(&self.data)),
            ("out".into(), path(&self.out)),
            ("checkpoint".into(), path(&self.checkpoint)),
        ]);
        e
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as {}", std::any::type_name::<T>()))
}

fn positive<T: FromStr + PartialOrd + Default>(v: &str) -> std::result::Result<T, String> {
    let x: T = parse(v)?;
    if x > T::default() {
        Ok(x)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn in_range(v: &str, lo: f64, hi: f64, hi_open: bool) -> std::result::Result<f64, String> {
    let x: f64 = parse(v)?;
    let ok = x >= lo && if hi_open { x < hi } else { x <= hi };
    if ok && x.is_finite() {
        Ok(x)
    } else {
        let close = if hi_open { ")" } else { "]" };
        Err(format!("{v} outside [{lo}, {hi}{close}"))
    }
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    in_range(v, 0.0, f64::MAX, false)
}

fn set(cfg: &mut RunConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let p = &mut cfg.plan;
    match key {
        "width" | "depth" | "num_classes" | "attention_heads" | "se_reduction" | "ffn_ratio" => {
            positive::<usize>(v)?;
            cfg.model.set(key, v)?
        }
        "layerscale_init" | "ln_eps" | "bn_eps" => {
            positive::<f64>(v)?;
            cfg.model.set(key, v)?
        }
        "token_mode" | "norm_kind" | "stem_kind" | "head_mode" => cfg.model.set(key, v)?,
        "epochs" => p.epochs = parse(v)?,
        "batch_size" => p.batch_size = positive(v)?,
        "lr" => p.base_lr = positive(v)?,
        "min_lr" => p.min_lr = non_negative(v)?,
        "weight_decay" => p.weight_decay = non_negative(v)?,
        "drop_path" => p.drop_path = in_range(v, 0.0, 1.0, true)?,
        "label_smoothing" => p.label_smoothing = in_range(v, 0.0, 1.0, true)?,
        "warmup_frac" => p.warmup_frac = in_range(v, 0.0, 1.0, true)?,
        "seed" => p.seed = parse(v)?,
        "optimizer" => p.optimizer = v.parse()?,
        "beta1" => p.beta1 = in_range(v, 0.0, 1.0, true)?,
        "beta2" => p.beta2 = in_range(v, 0.0, 1.0, true)?,
        "opt_eps" => p.opt_eps = positive(v)?,
        "trust_min" => p.trust_clip.0 = positive(v)?,
        "trust_max" => p.trust_clip.1 = positive(v)?,
        "augment" => p.augment = parse(v)?,
        "resolution" => {
            let r: usize = parse(v)?;
            check_resolution(r, r).map_err(|e| e.to_string())?;
            cfg.resolution = r;
        }
        "n_per_class" => cfg.n_per_class = positive(v)?,
        "data" => cfg.data = Some(PathBuf::from(v)),
        "out" => cfg.out = Some(PathBuf::from(v)),
        "checkpoint" => cfg.checkpoint = Some(PathBuf::from(v)),
        other => return Err(format!("unknown key {other:?}")),
    }
    Ok(())
}

struct Assignment {
    value: String,
    source: Provenance,
}

fn key_error(key: &str, source: Provenance, detail: String) -> Error {
    Error::ConfigKey {
        key: key.to_string(),
        line: match source {
            Provenance::File { line } => Some(line),
            _ => None,
        },
        detail,
    }
}

/// Parses `key = value` text (with `#` comments) and applies `flags` on top.
/// A preset and a plan mode are applied first and then refined by the
/// individual keys.
pub fn parse_config_str(text: &str, flags: &[(String, String)]) -> Result<RunConfig> {
    let mut assigned: BTreeMap<String, Assignment> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let source = Provenance::File { line: i + 1 };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| key_error(line, source, "expected `key = value`".into()))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(key_error(k, source, "unknown key".into()));
        }
        assigned.insert(
            k.to_string(),
            Assignment {
                value: v.trim().to_string(),
                source,
            },
        );
    }
    for (k, v) in flags {
        if !KEYS.contains(&k.as_str()) {
            return Err(key_error(k, Provenance::Flag, "unknown key".into()));
        }
        assigned.insert(
            k.clone(),
            Assignment {
                value: v.trim().to_string(),
                source: Provenance::Flag,
            },
        );
    }

    let mut cfg = RunConfig::default();
    if let Some(a) = assigned.get("preset") {
        cfg.model = ModelConfig::preset(&a.value).map_err(|e| key_error("preset", a.source, e.to_string()))?;
        cfg.preset = Some(a.value.clone());
        if !ModelConfig::is_desk(&a.value) {
            cfg.plan = TrainPlan::default();
            cfg.resolution = 224;
        }
    }
    if let Some(a) = assigned.get("mode") {
        let mode: PlanMode = a.value.parse().map_err(|e| key_error("mode", a.source, e))?;
        if mode == PlanMode::Finetune {
            cfg.plan = TrainPlan::for_mode(mode);
        }
    }
    for (k, a) in &assigned {
        if k != "preset" && k != "mode" {
            set(&mut cfg, k, &a.value).map_err(|e| key_error(k, a.source, e))?;
        }
        cfg.provenance.insert(k.clone(), a.source);
    }
    if cfg.plan.trust_clip.0 > cfg.plan.trust_clip.1 {
        let src = assigned
            .get("trust_min")
            .or_else(|| assigned.get("trust_max"))
            .map_or(Provenance::Default, |a| a.source);
        return Err(key_error(
            "trust_min",
            src,
            format!("{} exceeds trust_max {}", cfg.plan.trust_clip.0, cfg.plan.trust_clip.1),
        ));
    }
    cfg.model.drop_path = cfg.plan.drop_path;
    cfg.model.validate()?;
    Ok(cfg)
}

/// Reads the config file (if any) and applies `flags` on top.
pub fn parse_config(path: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, flags)
}
