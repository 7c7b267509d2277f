//! Closed-form parameter, FLOP and activation-memory accounting.
//!
//! FLOPs follow the MAC convention: one multiply-add counts as one FLOP.
//! Only contractions are counted (convolutions, linear maps, attention
//! products); norms, activations, softmax and pooling are excluded.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{check_resolution, HeadMode, ModelConfig, StemKind, PATCH_STRIDE};

pub const FLOP_CONVENTION: &str = "FLOPs counted as multiply-accumulates (1 MAC = 1 FLOP); norms, activations, softmax and pooling excluded";

/// Per-stage sub-counts. `trunk_gating` is the squeeze-excitation MLP,
/// which acts on the pooled vector and so does not scale with the patch
/// count. `aggregation_patch` is everything in the aggregation stage that
/// touches the patches (key/value projections, logits, weighted sum);
/// `aggregation_token` is the per-token work (query and output projections,
/// FFN) plus the tokens and norms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Breakdown {
    pub stem: u64,
    pub trunk_spatial: u64,
    pub trunk_gating: u64,
    pub aggregation_patch: u64,
    pub aggregation_token: u64,
    pub classifier: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.stem + self.trunk() + self.aggregation() + self.classifier
    }

    pub fn trunk(&self) -> u64 {
        self.trunk_spatial + self.trunk_gating
    }

    pub fn aggregation(&self) -> u64 {
        self.aggregation_patch + self.aggregation_token
    }

    fn rows(&self) -> [(&'static str, u64); 6] {
        [
            ("stem", self.stem),
            ("trunk_spatial", self.trunk_spatial),
            ("trunk_gating", self.trunk_gating),
            ("aggregation_patch", self.aggregation_patch),
            ("aggregation_token", self.aggregation_token),
            ("classifier", self.classifier),
        ]
    }
}

/// Live activation elements per image at the peak of each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryBreakdown {
    pub stem_peak: u64,
    pub trunk_steady: u64,
    pub aggregation_peak: u64,
}

impl MemoryBreakdown {
    pub fn peak(&self) -> u64 {
        self.stem_peak.max(self.trunk_steady).max(self.aggregation_peak)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub config: ModelConfig,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub bytes_per_elem: usize,
    pub params: u64,
    pub flops: u64,
    pub activation_bytes: u64,
    pub param_breakdown: Breakdown,
    pub flop_breakdown: Breakdown,
    pub memory: MemoryBreakdown,
}

fn stem_params(c: &ModelConfig) -> u64 {
    let d = c.width as u64;
    match c.stem_kind {
        StemKind::Conv => {
            let w = c.stem_widths().map(|v| v as u64);
            let cins = [3, w[0], w[1], w[2]];
            (0..4).map(|i| cins[i] * w[i] * 9 + w[i]).sum()
        }
        StemKind::LinearProjection => 3 * (PATCH_STRIDE * PATCH_STRIDE) as u64 * d + d,
    }
}

pub fn param_breakdown(c: &ModelConfig) -> Breakdown {
    let d = c.width as u64;
    let n_blocks = c.depth as u64;
    let h = c.se_hidden() as u64;
    let t = c.tokens() as u64;
    let r = c.ffn_ratio as u64;
    let k = c.num_classes as u64;

    // norm, conv1, depthwise, conv2, LayerScale
    let block_spatial = 2 * d + (d * d + d) + (9 * d + d) + (d * d + d) + d;
    let block_gating = (d * h + h) + (h * d + d);

    let (agg_patch, agg_token) = match c.head_mode {
        HeadMode::AveragePool => (0, 0),
        HeadMode::ClassAttention => {
            // patch norm, key (no bias), value
            let patch = 2 * d + d * d + (d * d + d);
            // token(s), token norm, query, output, two LayerScales, FFN norm, FFN
            let token = t * d + 2 * d + (d * d + d) + (d * d + d) + 2 * d + 2 * d + (r * d * d + r * d) + (r * d * d + d);
            (patch, token)
        }
    };
    Breakdown {
        stem: stem_params(c),
        trunk_spatial: n_blocks * block_spatial,
        trunk_gating: n_blocks * block_gating,
        aggregation_patch: agg_patch,
        aggregation_token: agg_token,
        classifier: 2 * d + k * d + k,
    }
}

/// Number of scalar parameters; independent of resolution and batch.
pub fn count_params(c: &ModelConfig) -> u64 {
    param_breakdown(c).total()
}

/// Per-image MACs by stage at input size `h` x `w`.
pub fn flop_breakdown(c: &ModelConfig, h: usize, w: usize) -> Result<Breakdown> {
    check_resolution(h, w)?;
    let d = c.width as u64;
    let n = ((h / PATCH_STRIDE) * (w / PATCH_STRIDE)) as u64;
    let hid = c.se_hidden() as u64;
    let t = c.tokens() as u64;
    let r = c.ffn_ratio as u64;
    let k = c.num_classes as u64;

    let stem = match c.stem_kind {
        StemKind::Conv => {
            let widths = c.stem_widths().map(|v| v as u64);
            let cins = [3, widths[0], widths[1], widths[2]];
            let (mut oh, mut ow) = (h as u64, w as u64);
            let mut total = 0;
            for i in 0..4 {
                oh /= 2;
                ow /= 2;
                total += oh * ow * widths[i] * cins[i] * 9;
            }
            total
        }
        StemKind::LinearProjection => n * d * 3 * (PATCH_STRIDE * PATCH_STRIDE) as u64,
    };
    let blocks = c.depth as u64;
    let (agg_patch, agg_token) = match c.head_mode {
        HeadMode::AveragePool => (0, 0),
        // keys and values, then q.K^T and A.V summed over heads
        HeadMode::ClassAttention => (2 * n * d * d + 2 * t * n * d, t * d * d + t * d * d + 2 * r * t * d * d),
    };
    Ok(Breakdown {
        stem,
        trunk_spatial: blocks * (2 * n * d * d + 9 * n * d),
        trunk_gating: blocks * 2 * d * hid,
        aggregation_patch: agg_patch,
        aggregation_token: agg_token,
        classifier: k * d,
    })
}

pub fn count_flops(c: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    Ok(flop_breakdown(c, h, w)?.total())
}

/// Live activation elements per image. Stem: input plus output of the
/// widest convolution step. Trunk: residual stream, branch input and
/// branch output (`3 n d`), independent of depth. Aggregation: patches,
/// normalized patches, keys and values (`4 n d`) plus the `t x n` logits.
pub fn memory_breakdown(c: &ModelConfig, h: usize, w: usize) -> Result<MemoryBreakdown> {
    check_resolution(h, w)?;
    let d = c.width as u64;
    let (h, w) = (h as u64, w as u64);
    let n = (h / PATCH_STRIDE as u64) * (w / PATCH_STRIDE as u64);
    let stem_peak = match c.stem_kind {
        StemKind::Conv => {
            let widths = c.stem_widths().map(|v| v as u64);
            let mut prev = 3 * h * w;
            let (mut oh, mut ow) = (h, w);
            let mut peak = 0;
            for &cout in &widths {
                oh /= 2;
                ow /= 2;
                let out = cout * oh * ow;
                peak = peak.max(prev + out);
                prev = out;
            }
            peak
        }
        StemKind::LinearProjection => 3 * h * w + n * d,
    };
    let aggregation_peak = match c.head_mode {
        HeadMode::ClassAttention => 4 * n * d + c.tokens() as u64 * n,
        HeadMode::AveragePool => n * d + d,
    };
    Ok(MemoryBreakdown {
        stem_peak,
        trunk_steady: 3 * n * d,
        aggregation_peak,
    })
}

pub fn activation_memory(c: &ModelConfig, h: usize, w: usize, batch: usize, bytes_per_elem: usize) -> Result<u64> {
    Ok(memory_breakdown(c, h, w)?.peak() * batch as u64 * bytes_per_elem as u64)
}

pub fn cost_report(c: &ModelConfig, h: usize, w: usize, batch: usize, bytes_per_elem: usize) -> Result<CostReport> {
    c.validate()?;
    let param_breakdown = param_breakdown(c);
    let flop_breakdown = flop_breakdown(c, h, w)?;
    let memory = memory_breakdown(c, h, w)?;
    Ok(CostReport {
        config: c.clone(),
        height: h,
        width: w,
        batch,
        bytes_per_elem,
        params: param_breakdown.total(),
        flops: flop_breakdown.total(),
        activation_bytes: memory.peak() * batch as u64 * bytes_per_elem as u64,
        param_breakdown,
        flop_breakdown,
        memory,
    })
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "model: width {} depth {} classes {} ({}, {}, {}, {})",
            c.width, c.depth, c.num_classes, c.token_mode, c.norm_kind, c.stem_kind, c.head_mode
        );
        let _ = writeln!(s, "input: {}x{}  batch {}  {} bytes/elem", self.height, self.width, self.batch, self.bytes_per_elem);
        let _ = writeln!(s, "{FLOP_CONVENTION}");
        let _ = writeln!(s, "{:<20} {:>16} {:>18}", "stage", "params", "flops");
        for ((name, p), (_, f)) in self.param_breakdown.rows().iter().zip(self.flop_breakdown.rows()) {
            let _ = writeln!(s, "{name:<20} {p:>16} {f:>18}");
        }
        let _ = writeln!(s, "{:<20} {:>16} {:>18}", "total", self.params, self.flops);
        let _ = writeln!(s, "params {:.4e}  flops {:.4e}", self.params as f64, self.flops as f64);
        let m = &self.memory;
        let _ = writeln!(
            s,
            "activation peak elements/image: stem {} trunk {} aggregation {}",
            m.stem_peak, m.trunk_steady, m.aggregation_peak
        );
        let _ = writeln!(s, "activation bytes {}", self.activation_bytes);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,params,flops\n");
        for ((name, p), (_, f)) in self.param_breakdown.rows().iter().zip(self.flop_breakdown.rows()) {
            let _ = writeln!(s, "{name},{p},{f}");
        }
        let _ = writeln!(s, "total,{},{}", self.params, self.flops);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingRow {
    pub resolution: usize,
    pub flops: u64,
    pub activation_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Coefficient of determination of a least-squares line through
    /// (H*W, activation bytes). `None` for fewer than two distinct sizes.
    pub r_squared: Option<f64>,
}

pub fn scaling_report(c: &ModelConfig, resolutions: &[usize], batch: usize, bytes_per_elem: usize) -> Result<ScalingReport> {
    c.validate()?;
    let rows = resolutions
        .iter()
        .map(|&r| {
            Ok(ScalingRow {
                resolution: r,
                flops: count_flops(c, r, r)?,
                activation_bytes: activation_memory(c, r, r, batch, bytes_per_elem)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| (r.resolution * r.resolution) as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.activation_bytes as f64).collect();
    Ok(ScalingReport {
        r_squared: linear_fit_r2(&xs, &ys),
        rows,
    })
}

/// R^2 of the ordinary least-squares line through `(xs, ys)`.
pub fn linear_fit_r2(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    if syy == 0.0 {
        return Some(1.0);
    }
    let slope = sxy / sxx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    Some(1.0 - ss_res / syy)
}

impl ScalingReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{FLOP_CONVENTION}\n{:>10} {:>18} {:>18}\n", "resolution", "flops", "activation_bytes");
        for r in &self.rows {
            let _ = writeln!(s, "{:>10} {:>18} {:>18}", r.resolution, r.flops, r.activation_bytes);
        }
        match self.r_squared {
            Some(r2) => {
                let _ = writeln!(s, "linear fit of activation bytes vs H*W: R^2 = {r2:.6}");
            }
            None => s.push_str("linear fit needs at least two resolutions\n"),
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("resolution,flops,activation_bytes\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.resolution, r.flops, r.activation_bytes);
        }
        s
    }
}

/// Parses a comma-separated resolution list such as `32,64,96`.
/// Comma-separated resolutions; an item `a:b:s` expands to `a, a+s, ..., <= b`.
pub fn parse_resolutions(text: &str) -> Result<Vec<usize>> {
    let int = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("resolutions: cannot parse {t:?} as an integer")))
    };
    let mut out = Vec::new();
    for item in text.split(',').filter(|t| !t.trim().is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        match parts[..] {
            [one] => out.push(int(one)?),
            [a, b, step] => {
                let (a, b, step) = (int(a)?, int(b)?, int(step)?);
                if step == 0 || a > b {
                    return Err(Error::Config(format!("resolutions: empty range {item:?}")));
                }
                out.extend((a..=b).step_by(step));
            }
            _ => return Err(Error::Config(format!("resolutions: expected N or START:STOP:STEP, got {item:?}"))),
        }
    }
    Ok(out)
}
