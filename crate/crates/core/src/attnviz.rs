//! Attention maps of the aggregation layer rendered as image overlays.

use std::fmt;
use std::str::FromStr;

use crate::dataio::{GrayImage, RgbImage};
use crate::error::{Error, Result};
use crate::model::{check_resolution, AttentionMap, PatchConvNet, TokenMode};
use crate::numerics::Tensor;

pub type SaliencyImage = RgbImage;

pub const DEFAULT_ALPHA: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Bilinear,
    Nearest,
}

impl fmt::Display for Upsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Upsample::Bilinear => "bilinear",
            Upsample::Nearest => "nearest",
        })
    }
}

impl FromStr for Upsample {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bilinear" => Ok(Upsample::Bilinear),
            "nearest" => Ok(Upsample::Nearest),
            other => Err(format!("unknown upsampling {other:?}, expected bilinear or nearest")),
        }
    }
}

/// Eval-mode forward of a single image; returns its attention map and logits `[k]`.
pub fn extract_map(model: &PatchConvNet, image: &Tensor) -> Result<(AttentionMap, Tensor)> {
    let &[1, 3, h, w] = image.shape() else {
        return Err(Error::dim("extract_map", format!("expected [1, 3, H, W], got {:?}", image.shape())));
    };
    check_resolution(h, w)?;
    let out = model.eval(image)?;
    let k = model.config.num_classes;
    let logits = out.logits.reshape(&[k])?;
    let map = out.maps.into_iter().next().expect("one map per image");
    Ok((map, logits))
}

/// Resamples an `[h, w]` map to `[out_h, out_w]` and rescales it to `[0, 1]`
/// by min-max (a constant map becomes 0.5 everywhere). Bilinear sampling
/// aligns the corner samples of input and output.
pub fn upsample_map(map: &Tensor, out_h: usize, out_w: usize, method: Upsample) -> Result<Tensor> {
    let &[h, w] = map.shape() else {
        return Err(Error::dim("upsample_map", format!("expected [h, w], got {:?}", map.shape())));
    };
    if out_h < h || out_w < w {
        return Err(Error::dim(
            "upsample_map",
            format!("cannot shrink {h}x{w} to {out_h}x{out_w}"),
        ));
    }
    let d = map.data();
    let corner = |o: usize, olen: usize, len: usize| {
        if olen == 1 {
            0.0
        } else {
            o as f64 * (len - 1) as f64 / (olen - 1) as f64
        }
    };
    let mut out = Tensor::from_fn(&[out_h, out_w], |i| {
        let (oy, ox) = (i / out_w, i % out_w);
        match method {
            Upsample::Nearest => d[(oy * h / out_h) * w + ox * w / out_w],
            Upsample::Bilinear => {
                let (y, x) = (corner(oy, out_h, h), corner(ox, out_w, w));
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
                let bottom = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
                top * (1.0 - fy) + bottom * fy
            }
        }
    });
    let (lo, hi) = out
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    for v in out.data_mut() {
        *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
    }
    Ok(out)
}

/// Blends each pixel toward a red-tinted copy of itself by `alpha * heat`.
pub fn render_overlay(base: &SaliencyImage, heat: &Tensor, alpha: f64) -> Result<SaliencyImage> {
    if heat.shape() != [base.height, base.width] {
        return Err(Error::dim(
            "render_overlay",
            format!("heat {:?} for a {}x{} image", heat.shape(), base.width, base.height),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut pixels = base.pixels.clone();
    for (p, &h) in heat.data().iter().enumerate() {
        let a = alpha * h.clamp(0.0, 1.0);
        if a == 0.0 {
            continue;
        }
        let px = &mut pixels[3 * p..3 * p + 3];
        let tint = [255.0, 0.25 * px[1] as f64, 0.25 * px[2] as f64];
        for c in 0..3 {
            let v = (1.0 - a) * px[c] as f64 + a * tint[c];
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    RgbImage::new(base.width, base.height, pixels)
}

/// Heat map in `[0, 1]` as an 8-bit grayscale image.
pub fn heat_to_gray(heat: &Tensor) -> Result<GrayImage> {
    let &[h, w] = heat.shape() else {
        return Err(Error::dim("heat_to_gray", format!("expected [h, w], got {:?}", heat.shape())));
    };
    Ok(GrayImage {
        width: w,
        height: h,
        pixels: heat.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct ClassMap {
    pub class: usize,
    pub probability: f64,
    pub overlay: SaliencyImage,
}

/// Overlays for the `k_top` most probable classes, most probable first.
pub fn topk_class_maps(
    model: &PatchConvNet,
    image: &Tensor,
    base: &SaliencyImage,
    k_top: usize,
    alpha: f64,
    method: Upsample,
) -> Result<Vec<ClassMap>> {
    if model.config.token_mode != TokenMode::PerClass {
        return Err(Error::Mode(
            "per-class maps need a model with token_mode = per_class; this model has a single token".into(),
        ));
    }
    let k = model.config.num_classes;
    if k_top == 0 || k_top > k {
        return Err(Error::Config(format!("topk {k_top} outside 1..={k}")));
    }
    let (map, logits) = extract_map(model, image)?;
    let mut probs = logits.into_data();
    crate::numerics::tape::softmax_in_place(&mut probs);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k_top)
        .map(|class| {
            let heat = upsample_map(&map.grid(class), base.height, base.width, method)?;
            Ok(ClassMap {
                class,
                probability: probs[class],
                overlay: render_overlay(base, &heat, alpha)?,
            })
        })
        .collect()
}

/// Attention mass of row `t` on patches whose centers lie in `quadrant`
/// (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
pub fn quadrant_mass(map: &AttentionMap, t: usize, quadrant: usize) -> f64 {
    let row = map.row(t);
    let mut mass = 0.0;
    for i in 0..map.h {
        for j in 0..map.w {
            // compare doubled patch centers against the grid size
            let right = 2 * j + 1 > map.w;
            let bottom = 2 * i + 1 > map.h;
            if usize::from(right) + 2 * usize::from(bottom) == quadrant {
                mass += row[i * map.w + j];
            }
        }
    }
    mass
}
