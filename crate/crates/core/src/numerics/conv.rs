//! Direct 2-D cross-correlation kernels over NCHW buffers.
//!
//! Each output element accumulates its terms in (input channel, kernel row,
//! kernel column) order and adds the bias last, so results are reproducible
//! bit-for-bit against a naive seven-loop evaluation.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvShape {
    pub fn resolve(x: &[usize], k: &[usize], geom: ConvGeom) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("expected rank-4 input and kernel, got {x:?} and {k:?}"),
            ));
        }
        if geom.stride == 0 || geom.groups == 0 {
            return Err(Error::Config("conv2d stride and groups must be positive".into()));
        }
        let (batch, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (k[0], k[1], k[2], k[3]);
        let g = geom.groups;
        if cin % g != 0 || cout % g != 0 {
            return Err(Error::Config(format!(
                "conv2d groups={g} must divide input channels {cin} and output channels {cout}"
            )));
        }
        if cin / g != cin_g {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k:?} expects {} input channels per group, input {x:?} has {}", cin_g, cin / g),
            ));
        }
        let ph = h + 2 * geom.padding;
        let pw = w + 2 * geom.padding;
        if ph < kh || pw < kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: (ph - kh) / geom.stride + 1,
            ow: (pw - kw) / geom.stride + 1,
            geom,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.oh, self.ow]
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * (self.cin / self.geom.groups) * self.kh * self.kw * self.oh * self.ow)
            as u64
    }

    /// Valid output columns `[lo, hi)` for kernel column `kx`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        axis_range(self.w, self.ow, kx, self.geom)
    }

    fn row_range(&self, ky: usize) -> (usize, usize) {
        axis_range(self.h, self.oh, ky, self.geom)
    }
}

/// Output positions `o` with `o*stride + k - padding` inside `[0, len)`.
fn axis_range(len: usize, out_len: usize, k: usize, geom: ConvGeom) -> (usize, usize) {
    let s = geom.stride;
    let p = geom.padding;
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // largest o with o*s + k - p <= len - 1
    let hi = if len + p < k + 1 {
        0
    } else {
        ((len + p - k - 1) / s + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

pub fn forward(cs: &ConvShape, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let ConvShape {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        geom,
    } = *cs;
    let g = geom.groups;
    let cin_g = cin / g;
    let cout_g = cout / g;
    let s = geom.stride;
    let p = geom.padding;
    let mut out = vec![0.0; batch * cout * oh * ow];
    for b in 0..batch {
        for co in 0..cout {
            let group = co / cout_g;
            let obase = ((b * cout) + co) * oh * ow;
            for ci in 0..cin_g {
                let cabs = group * cin_g + ci;
                let xbase = ((b * cin) + cabs) * h * w;
                for ky in 0..kh {
                    let (ylo, yhi) = cs.row_range(ky);
                    for kx in 0..kw {
                        let wv = k[((co * cin_g + ci) * kh + ky) * kw + kx];
                        let (xlo, xhi) = cs.col_range(kx);
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            let orow = &mut out[obase + oy * ow..obase + (oy + 1) * ow];
                            let xrow = &x[xbase + iy * w..xbase + (iy + 1) * w];
                            for ox in xlo..xhi {
                                orow[ox] += xrow[ox * s + kx - p] * wv;
                            }
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias[co];
                out[obase..obase + oh * ow].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients for upstream gradient `gout`.
pub fn backward(
    cs: &ConvShape,
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let ConvShape {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        geom,
    } = *cs;
    let g = geom.groups;
    let cin_g = cin / g;
    let cout_g = cout / g;
    let s = geom.stride;
    let p = geom.padding;
    for b in 0..batch {
        for co in 0..cout {
            let group = co / cout_g;
            let obase = ((b * cout) + co) * oh * ow;
            for ci in 0..cin_g {
                let cabs = group * cin_g + ci;
                let xbase = ((b * cin) + cabs) * h * w;
                for ky in 0..kh {
                    let (ylo, yhi) = cs.row_range(ky);
                    for kx in 0..kw {
                        let kidx = ((co * cin_g + ci) * kh + ky) * kw + kx;
                        let wv = k[kidx];
                        let (xlo, xhi) = cs.col_range(kx);
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            let grow = &gout[obase + oy * ow..obase + (oy + 1) * ow];
                            let xoff = xbase + iy * w;
                            if let Some(gx) = gx.as_deref_mut() {
                                for ox in xlo..xhi {
                                    gx[xoff + ox * s + kx - p] += grow[ox] * wv;
                                }
                            }
                            for ox in xlo..xhi {
                                acc += grow[ox] * x[xoff + ox * s + kx - p];
                            }
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for b in 0..batch {
            for (co, gbv) in gb.iter_mut().enumerate() {
                let obase = ((b * cout) + co) * oh * ow;
                *gbv += gout[obase..obase + oh * ow].iter().sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_range_matches_bruteforce() {
        for len in 1..7 {
            for kk in 1..=3 {
                for p in 0..3 {
                    for s in 1..3 {
                        if len + 2 * p < kk {
                            continue;
                        }
                        let out_len = (len + 2 * p - kk) / s + 1;
                        let geom = ConvGeom::new(s, p, 1);
                        for k in 0..kk {
                            let (lo, hi) = axis_range(len, out_len, k, geom);
                            let valid: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let i = (o * s + k) as isize - p as isize;
                                    i >= 0 && (i as usize) < len
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, valid, "len={len} k={k} p={p} s={s}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_groups_and_oversized_kernel() {
        let e = ConvShape::resolve(&[1, 3, 5, 5], &[2, 1, 3, 3], ConvGeom::new(1, 0, 2));
        assert!(matches!(e, Err(Error::Config(_))));
        let e = ConvShape::resolve(&[1, 1, 2, 2], &[1, 1, 3, 3], ConvGeom::new(1, 0, 1));
        assert!(matches!(e, Err(Error::Dimension { .. })));
        assert!(ConvShape::resolve(&[1, 1, 2, 2], &[1, 1, 3, 3], ConvGeom::new(1, 1, 1)).is_ok());
    }
}
