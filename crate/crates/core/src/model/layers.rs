//! Building blocks of the network, written against the tape so that tests
//! can feed hand-set weights.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::model::config::{check_resolution, PATCH_STRIDE};
use crate::numerics::{BatchNormState, ConvGeom, NormMode, Tape, Tensor, Var};

pub type Mode = NormMode;

/// Weight plus optional bias of a linear map or convolution.
#[derive(Clone, Copy, Debug)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: Option<T>,
}

/// Scale/shift pair of a normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct Affine<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Copy, Debug)]
pub struct SqueezeExcite<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrunkBlock<T> {
    pub norm: Affine<T>,
    pub conv1: Dense<T>,
    pub dwconv: Dense<T>,
    pub se: SqueezeExcite<T>,
    pub conv2: Dense<T>,
    pub gamma: T,
}

#[derive(Clone, Copy, Debug)]
pub struct Aggregation<T> {
    pub token: T,
    pub norm_token: Affine<T>,
    pub norm_patches: Affine<T>,
    pub q: Dense<T>,
    pub k: Dense<T>,
    pub v: Dense<T>,
    pub o: Dense<T>,
    pub gamma1: T,
    pub norm_ffn: Affine<T>,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    pub gamma2: T,
}

impl<T: Copy> Dense<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> Dense<U> {
        Dense {
            weight: f(self.weight),
            bias: self.bias.map(f),
        }
    }
}

impl<T: Copy> Affine<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> Affine<U> {
        Affine {
            weight: f(self.weight),
            bias: f(self.bias),
        }
    }
}

impl<T: Copy> TrunkBlock<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> TrunkBlock<U> {
        TrunkBlock {
            norm: self.norm.map(f),
            conv1: self.conv1.map(f),
            dwconv: self.dwconv.map(f),
            se: SqueezeExcite {
                fc1: self.se.fc1.map(f),
                fc2: self.se.fc2.map(f),
            },
            conv2: self.conv2.map(f),
            gamma: f(self.gamma),
        }
    }
}

impl<T: Copy> Aggregation<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> Aggregation<U> {
        Aggregation {
            token: f(self.token),
            norm_token: self.norm_token.map(f),
            norm_patches: self.norm_patches.map(f),
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
            gamma1: f(self.gamma1),
            norm_ffn: self.norm_ffn.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
            gamma2: f(self.gamma2),
        }
    }
}

/// Mode, drop rate and random stream for one forward evaluation.
pub struct Stochastic<'a> {
    pub mode: Mode,
    pub drop_path: f64,
    pub rng: &'a mut dyn RngCore,
}

/// Normalization used by a trunk block.
pub enum TrunkNorm<'a> {
    Layer { eps: f64 },
    Batch(&'a mut BatchNormState),
}

fn image_dims(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [b, 3, h, w] => {
            check_resolution(h, w)?;
            Ok((b, h, w))
        }
        ref s => Err(Error::dim(op, format!("expected [B, 3, H, W] image batch, got {s:?}"))),
    }
}

/// Four stride-2 3x3 convolutions, GELU after the first three.
pub fn conv_stem(tape: &mut Tape, x: Var, convs: &[Dense<Var>; 4]) -> Result<Var> {
    image_dims(tape, x, "conv_stem")?;
    let mut h = x;
    for (i, c) in convs.iter().enumerate() {
        h = tape.conv2d(h, c.weight, c.bias, ConvGeom::new(2, 1, 1))?;
        if i < 3 {
            h = tape.gelu(h);
        }
    }
    Ok(h)
}

/// One 16x16 stride-16 convolution (a linear map on flattened patches).
pub fn linear_patch_stem(tape: &mut Tape, x: Var, proj: Dense<Var>) -> Result<Var> {
    image_dims(tape, x, "linear_patch_stem")?;
    tape.conv2d(x, proj.weight, proj.bias, ConvGeom::new(PATCH_STRIDE, 0, 1))
}

/// Channel gating `x * sigmoid(fc2(gelu(fc1(mean_hw(x)))))`.
pub fn squeeze_excitation(tape: &mut Tape, x: Var, se: SqueezeExcite<Var>) -> Result<Var> {
    let [b, c, _, _] = *tape.shape(x) else {
        return Err(Error::dim("squeeze_excitation", format!("expected NCHW, got {:?}", tape.shape(x))));
    };
    let s = tape.global_avg_pool(x)?;
    let s = tape.linear(s, se.fc1.weight, se.fc1.bias)?;
    let s = tape.gelu(s);
    let s = tape.linear(s, se.fc2.weight, se.fc2.bias)?;
    let gate = tape.sigmoid(s);
    let gate = tape.reshape(gate, &[b, c, 1, 1])?;
    tape.mul(x, gate)
}

/// Per-sample stochastic depth. Kept samples are scaled by `1/(1-p)`.
pub fn drop_path(tape: &mut Tape, branch: Var, p: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("drop_path rate {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(branch);
    }
    let shape = tape.shape(branch).to_vec();
    let batch = shape[0];
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..batch)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect();
    let mut mshape = vec![1; shape.len()];
    mshape[0] = batch;
    let mask = tape.constant(&Tensor::new(&mshape, mask)?);
    tape.mul(branch, mask)
}

/// `x + drop_path(gamma * conv2(se(gelu(dw3x3(gelu(conv1(norm(x))))))))`.
pub fn trunk_block(
    tape: &mut Tape,
    x: Var,
    block: &TrunkBlock<Var>,
    norm: TrunkNorm<'_>,
    st: &mut Stochastic<'_>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d = tape.shape(block.gamma)[0];
    if shape.len() != 4 || shape[1] != d {
        return Err(Error::dim("trunk_block", format!("input {shape:?} for a width-{d} block")));
    }
    let h = match norm {
        TrunkNorm::Layer { eps } => tape.layer_norm_axis(x, 1, block.norm.weight, block.norm.bias, eps)?,
        TrunkNorm::Batch(state) => tape.batch_norm(x, block.norm.weight, block.norm.bias, state, st.mode)?,
    };
    let h = tape.conv2d(h, block.conv1.weight, block.conv1.bias, ConvGeom::new(1, 0, 1))?;
    let h = tape.gelu(h);
    let h = tape.conv2d(h, block.dwconv.weight, block.dwconv.bias, ConvGeom::new(1, 1, d))?;
    let h = tape.gelu(h);
    let h = squeeze_excitation(tape, h, block.se)?;
    let h = tape.conv2d(h, block.conv2.weight, block.conv2.bias, ConvGeom::new(1, 0, 1))?;
    let gamma = tape.reshape(block.gamma, &[d, 1, 1])?;
    let h = tape.mul(h, gamma)?;
    let h = drop_path(tape, h, st.drop_path, st.mode, st.rng)?;
    tape.add(x, h)
}

/// Intermediate values of the aggregation stage.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    /// Output tokens `[B, t, d]`.
    pub out: Var,
    /// Attention weights per head `[B, heads, t, n]`.
    pub attention: Var,
    /// Value vectors `[B, n, d]`.
    pub values: Var,
    /// Attention-weighted value sum before the output projection `[B, t, d]`.
    pub weighted: Var,
    /// Output projection of `weighted`, the vector added to the token `[B, t, d]`.
    pub z: Var,
}

/// Cross-attention from `t` learned tokens to `n` patches followed by a
/// pre-norm FFN, both on LayerScaled residual branches.
pub fn attention_pool(
    tape: &mut Tape,
    patches: Var,
    agg: &Aggregation<Var>,
    heads: usize,
    ln_eps: f64,
    st: &mut Stochastic<'_>,
) -> Result<Pooled> {
    let [b, n, d] = *tape.shape(patches) else {
        return Err(Error::dim("attention_pool", format!("patches must be [B, n, d], got {:?}", tape.shape(patches))));
    };
    let [t, dt] = *tape.shape(agg.token) else {
        return Err(Error::dim("attention_pool", format!("tokens must be [t, d], got {:?}", tape.shape(agg.token))));
    };
    if dt != d {
        return Err(Error::dim("attention_pool", format!("token width {dt} vs patch width {d}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;

    let token = tape.expand(agg.token, &[b, t, d])?;
    let tn = tape.layer_norm(token, agg.norm_token.weight, agg.norm_token.bias, ln_eps)?;
    let pn = tape.layer_norm(patches, agg.norm_patches.weight, agg.norm_patches.bias, ln_eps)?;
    let q = tape.linear(tn, agg.q.weight, agg.q.bias)?;
    let k = tape.linear(pn, agg.k.weight, agg.k.bias)?;
    let values = tape.linear(pn, agg.v.weight, agg.v.bias)?;

    let q = tape.reshape(q, &[b, t, heads, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, &[b, n, heads, dh])?;
    let kt = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.reshape(values, &[b, n, heads, dh])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    let attention = tape.softmax(logits);
    let mixed = tape.matmul(attention, v)?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let weighted = tape.reshape(mixed, &[b, t, d])?;
    let z = tape.linear(weighted, agg.o.weight, agg.o.bias)?;

    let branch = tape.mul(z, agg.gamma1)?;
    let branch = drop_path(tape, branch, st.drop_path, st.mode, st.rng)?;
    let u = tape.add(token, branch)?;

    let h = tape.layer_norm(u, agg.norm_ffn.weight, agg.norm_ffn.bias, ln_eps)?;
    let h = tape.linear(h, agg.fc1.weight, agg.fc1.bias)?;
    let h = tape.gelu(h);
    let h = tape.linear(h, agg.fc2.weight, agg.fc2.bias)?;
    let h = tape.mul(h, agg.gamma2)?;
    let h = drop_path(tape, h, st.drop_path, st.mode, st.rng)?;
    let out = tape.add(u, h)?;
    Ok(Pooled {
        out,
        attention,
        values,
        weighted,
        z,
    })
}
