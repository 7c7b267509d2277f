//! Dynamic reverse-mode tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes are appended in evaluation order, so
//! the node list is already topologically sorted and `backward` is a single
//! reverse sweep.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::numerics::conv::{self, ConvGeom, ConvShape};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        cs: ConvShape,
    },
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        stats: NormStats,
    },
    GlobalAvgPool {
        x: Var,
        spatial: usize,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        map: Option<(Vec<usize>, Vec<usize>)>,
    },
    Expand {
        x: Var,
        map: Vec<usize>,
    },
    Scale(Var, f64),
    Reshape(Var),
    Permute {
        x: Var,
        src_index: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum(Var),
    Mean(Var),
    SumLast {
        x: Var,
        len: usize,
    },
    SoftTargetCe {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
        batch: usize,
    },
    ClassDot {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        classes: usize,
        dim: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormStats {
    /// Layer norm: one mean/variance per (outer, inner) position.
    PerPosition,
    /// Batch norm with batch statistics, one per channel.
    Batch,
    /// Batch norm with frozen running statistics.
    Running,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// `[outer, len, inner]` view of the normalized axis. For layer norm the
/// statistics run over `len` with the affine indexed by `len`; for batch
/// norm the statistics run over `outer * inner` for each channel in `len`.
#[derive(Clone, Copy, Debug)]
struct NormLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Recording of one forward evaluation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    record_grads: bool,
    check_finite: bool,
    inputs_finite: bool,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record_grads: true,
            check_finite: cfg!(debug_assertions),
            inputs_finite: true,
            macs: 0,
        }
    }

    /// A tape on which no leaf ever requires a gradient.
    pub fn inference() -> Self {
        Self {
            record_grads: false,
            ..Self::new()
        }
    }

    /// Disables the debug-build finite-value assertion (training loops
    /// detect divergence themselves).
    pub fn allow_non_finite(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by the contraction kernels so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records `t`; it is differentiable when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.inputs_finite &= t.is_finite();
        let needs = t.requires_grad && self.record_grads;
        self.push(t.shape().to_vec(), t.data().to_vec(), needs, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.inputs_finite &= t.is_finite();
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.check_finite && self.inputs_finite && !matches!(op, Op::Leaf) {
            assert!(
                value.iter().all(|v| v.is_finite()),
                "non-finite value produced from finite inputs"
            );
        }
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---------------------------------------------------------------- ops

    /// `y[.., o] = sum_i x[.., i] * w[o, i] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fan_in = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(Error::dim(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let fan_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} does not match weight {ws:?}", self.shape(b)),
                ));
            }
        }
        let rows = xs.iter().product::<usize>() / fan_in;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let xr = &xv[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let wr = &wv[o * fan_in..(o + 1) * fan_in];
                let mut acc = 0.0;
                for i in 0..fan_in {
                    acc += xr[i] * wr[i];
                }
                out[r * fan_out + o] = acc;
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                for o in 0..fan_out {
                    out[r * fan_out + o] += bv[o];
                }
            }
        }
        self.macs += (rows * fan_in * fan_out) as u64;
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(
            shape,
            out,
            needs,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
        ))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let cs = ConvShape::resolve(self.shape(x), self.shape(k), geom)?;
        if let Some(b) = b {
            if self.shape(b) != [cs.cout] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} does not match {} output channels", self.shape(b), cs.cout),
                ));
            }
        }
        let out = conv::forward(
            &cs,
            self.value(x),
            self.value(k),
            b.map(|b| self.value(b)),
        );
        self.macs += cs.macs();
        let mut deps = vec![x, k];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(cs.out_shape().to_vec(), out, needs, Op::Conv2d { x, k, b, cs }))
    }

    /// Exact erf form `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, needs, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, needs, Op::Sigmoid(x))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let needs = self.needs(&[x]);
        self.push(shape, out, needs, Op::Softmax(x))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let axis = self.shape(x).len() - 1;
        self.layer_norm_axis(x, axis, gamma, beta, eps)
    }

    /// Layer normalization over `axis` (e.g. the channel axis of NCHW).
    pub fn layer_norm_axis(
        &mut self,
        x: Var,
        axis: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be non-negative, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let layout = norm_layout(&shape, axis, "layer_norm")?;
        self.check_affine("layer_norm", gamma, beta, layout.len)?;
        let xv = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let NormLayout { outer, len, inner } = layout;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| xv[at(j)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|j| (xv[at(j)] - mean).powi(2)).sum::<f64>() / len as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..len {
                    let h = (xv[at(j)] - mean) * is;
                    xhat[at(j)] = h;
                    out[at(j)] = h * g[j] + bt[j];
                }
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            needs,
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                stats: NormStats::PerPosition,
            },
        ))
    }

    /// Per-channel batch normalization of an NCHW tensor. Train mode uses
    /// batch statistics and updates `state`; eval mode reads `state` only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: NormMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("batch_norm", format!("expected NCHW input, got {shape:?}")));
        }
        let layout = NormLayout {
            outer: shape[0],
            len: shape[1],
            inner: shape[2] * shape[3],
        };
        self.check_affine("batch_norm", gamma, beta, layout.len)?;
        if state.running_mean.len() != layout.len || state.running_var.len() != layout.len {
            return Err(Error::dim(
                "batch_norm",
                format!("running state has {} channels, input has {}", state.running_mean.len(), layout.len),
            ));
        }
        let count = layout.outer * layout.inner;
        if mode == NormMode::Train && count < 2 {
            return Err(Error::Statistics(format!(
                "batch_norm needs at least 2 values per channel in train mode, got B*H*W = {count}"
            )));
        }
        let NormLayout { outer, len, inner } = layout;
        let xv = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; len];
        for c in 0..len {
            let idx = |o: usize, i: usize| (o * len + c) * inner + i;
            let (mean, var) = match mode {
                NormMode::Train => {
                    let mut sum = 0.0;
                    for o in 0..outer {
                        for i in 0..inner {
                            sum += xv[idx(o, i)];
                        }
                    }
                    let mean = sum / count as f64;
                    let mut ss = 0.0;
                    for o in 0..outer {
                        for i in 0..inner {
                            ss += (xv[idx(o, i)] - mean).powi(2);
                        }
                    }
                    let var = ss / count as f64;
                    let unbiased = ss / (count - 1) as f64;
                    let m = state.momentum;
                    state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mean;
                    state.running_var[c] = (1.0 - m) * state.running_var[c] + m * unbiased;
                    (mean, var)
                }
                NormMode::Eval => (state.running_mean[c], state.running_var[c]),
            };
            let is = 1.0 / (var + state.eps).sqrt();
            inv_std[c] = is;
            for o in 0..outer {
                for i in 0..inner {
                    let h = (xv[idx(o, i)] - mean) * is;
                    xhat[idx(o, i)] = h;
                    out[idx(o, i)] = h * g[c] + bt[c];
                }
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            needs,
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                stats: match mode {
                    NormMode::Train => NormStats::Batch,
                    NormMode::Eval => NormStats::Running,
                },
            },
        ))
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, len: usize) -> Result<()> {
        if self.shape(gamma) != [len] || self.shape(beta) != [len] {
            return Err(Error::dim(
                op,
                format!(
                    "affine parameters {:?}/{:?} do not match normalized length {len}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    /// Mean over the spatial axes of an NCHW tensor, giving `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("global_avg_pool", format!("expected NCHW input, got {shape:?}")));
        }
        let spatial = shape[2] * shape[3];
        let out = self
            .value(x)
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(vec![shape[0], shape[1]], out, needs, Op::GlobalAvgPool { x, spatial }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let av = self.value(a);
        let bv = self.value(b);
        let (shape, out, map) = if sa == sb {
            let out = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
            (sa, out, None)
        } else {
            let shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
                Error::dim("broadcast", format!("shapes {sa:?} and {sb:?} are not broadcastable"))
            })?;
            let ma = broadcast_map(&sa, &shape);
            let mb = broadcast_map(&sb, &shape);
            let out = ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect();
            (shape, out, Some((ma, mb)))
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, needs, Op::Binary { kind, a, b, map }))
    }

    /// Broadcasts `x` to `shape` (right-aligned rules).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if broadcast_shape(&sx, shape).as_deref() != Some(shape) {
            return Err(Error::dim("expand", format!("cannot expand {sx:?} to {shape:?}")));
        }
        let map = broadcast_map(&sx, shape);
        let xv = self.value(x);
        let out = map.iter().map(|&i| xv[i]).collect();
        let needs = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), out, needs, Op::Expand { x, map }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, needs, Op::Scale(x, c))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), out, needs, Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of {} axes", sx.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let in_strides = strides(&sx);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src_index = iter_index(&out_shape, &src_strides);
        let xv = self.value(x);
        let out = src_index.iter().map(|&i| xv[i]).collect();
        let needs = self.needs(&[x]);
        Ok(self.push(out_shape, out, needs, Op::Permute { x, src_index }))
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]` with equal leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ra = sa.len();
        if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] || sa[ra - 1] != sb[ra - 2] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[ra - 1]);
        let batch: usize = sa[..ra - 2].iter().product();
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = &bv[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += ab[i * k + l] * bb[l * n + j];
                    }
                    ob[i * n + j] = acc;
                }
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, needs, Op::MatMul { a, b, batch, m, k, n }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s], needs, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s], needs, Op::Mean(x))
    }

    /// Sum over the last axis (the axis is dropped).
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().unwrap();
        let out = self.value(x).chunks(len).map(|c| c.iter().sum()).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(&[x]);
        self.push(out_shape, out, needs, Op::SumLast { x, len })
    }

    /// Mean cross-entropy of `logits [B, k]` against soft targets `[B, k]`
    /// (each target row sums to one), via log-softmax.
    pub fn soft_target_cross_entropy(&mut self, logits: Var, target: Vec<f64>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || target.len() != shape[0] * shape[1] {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {shape:?} with {} target values", target.len()),
            ));
        }
        let (batch, k) = (shape[0], shape[1]);
        let lv = self.value(logits);
        let mut probs = vec![0.0; batch * k];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &lv[b * k..(b + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..k {
                let logp = row[c] - lse;
                probs[b * k + c] = logp.exp();
                loss -= target[b * k + c] * logp;
            }
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss / batch as f64],
            needs,
            Op::SoftTargetCe {
                logits,
                target,
                probs,
                batch,
            },
        ))
    }

    /// `y[b, c] = <x[b, c, :], w[c, :]> + bias[c]` — each class reads its own row.
    pub fn class_dot(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sx[1..] != sw[..] {
            return Err(Error::dim("class_dot", format!("tokens {sx:?} with weight {sw:?}")));
        }
        let (batch, classes, dim) = (sx[0], sx[1], sx[2]);
        if let Some(b) = b {
            if self.shape(b) != [classes] {
                return Err(Error::dim("class_dot", format!("bias {:?}", self.shape(b))));
            }
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; batch * classes];
        for bi in 0..batch {
            for c in 0..classes {
                let xr = &xv[(bi * classes + c) * dim..(bi * classes + c + 1) * dim];
                let wr = &wv[c * dim..(c + 1) * dim];
                let mut acc = 0.0;
                for j in 0..dim {
                    acc += xr[j] * wr[j];
                }
                out[bi * classes + c] = acc;
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for bi in 0..batch {
                for c in 0..classes {
                    out[bi * classes + c] += bv[c];
                }
            }
        }
        self.macs += (batch * classes * dim) as u64;
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(
            vec![batch, classes],
            out,
            needs,
            Op::ClassDot {
                x,
                w,
                b,
                batch,
                classes,
                dim,
            },
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Gradients are then available
    /// through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward call with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when `v` did not influence the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    /// Adds the gradient of `v` into `t.grad` (allocating it if absent).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        let n = t.numel();
        let g = t.grad.get_or_insert_with(|| vec![0.0; n]);
        if let Some(src) = self.grad(v) {
            g.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        // Borrow helper: gradient buffer of an input, allocated on first use.
        let needs = |v: Var| nodes[v.0].needs_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let n = nodes[$v.0].value.len();
                grads[$v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                let (rows, fi, fo) = (*rows, *fan_in, *fan_out);
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                if needs(*x) {
                    let gx = slot!(x);
                    for r in 0..rows {
                        for o in 0..fo {
                            let go = g[r * fo + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv[o * fi..(o + 1) * fi];
                            let gr = &mut gx[r * fi..(r + 1) * fi];
                            for i in 0..fi {
                                gr[i] += go * wr[i];
                            }
                        }
                    }
                }
                if needs(*w) {
                    let gw = slot!(w);
                    for r in 0..rows {
                        let xr = &xv[r * fi..(r + 1) * fi];
                        for o in 0..fo {
                            let go = g[r * fo + o];
                            let gr = &mut gw[o * fi..(o + 1) * fi];
                            for i in 0..fi {
                                gr[i] += go * xr[i];
                            }
                        }
                    }
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let gb = slot!(b);
                    for r in 0..rows {
                        for o in 0..fo {
                            gb[o] += g[r * fo + o];
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, cs } => {
                let mut gx = needs(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; nodes[x.0].value.len()]));
                let mut gk = needs(*k).then(|| grads[k.0].take().unwrap_or_else(|| vec![0.0; nodes[k.0].value.len()]));
                let mut gb = b
                    .filter(|b| needs(*b))
                    .map(|b| grads[b.0].take().unwrap_or_else(|| vec![0.0; nodes[b.0].value.len()]));
                conv::backward(
                    cs,
                    &nodes[x.0].value,
                    &nodes[k.0].value,
                    g,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gk {
                    grads[k.0] = Some(v);
                }
                if let (Some(b), Some(v)) = (b, gb) {
                    grads[b.0] = Some(v);
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                let gx = slot!(x);
                for i in 0..g.len() {
                    gx[i] += g[i] * gelu_grad(xv[i]);
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = slot!(x);
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *node.shape.last().unwrap();
                let gx = slot!(x);
                for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                stats,
            } => {
                let NormLayout { outer, len, inner } = *layout;
                let gv = &nodes[gamma.0].value;
                if needs(*gamma) {
                    let gg = slot!(gamma);
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                let t = (o * len + j) * inner + i;
                                gg[j] += g[t] * xhat[t];
                            }
                        }
                    }
                }
                if needs(*beta) {
                    let gb = slot!(beta);
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gb[j] += g[(o * len + j) * inner + i];
                            }
                        }
                    }
                }
                if needs(*x) {
                    let gx = slot!(x);
                    if *stats == NormStats::Batch {
                        // statistics over (outer, inner) for each channel j
                        let count = (outer * inner) as f64;
                        for j in 0..len {
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for o in 0..outer {
                                for i in 0..inner {
                                    let t = (o * len + j) * inner + i;
                                    let d = g[t] * gv[j];
                                    mean_d += d;
                                    mean_dh += d * xhat[t];
                                }
                            }
                            mean_d /= count;
                            mean_dh /= count;
                            for o in 0..outer {
                                for i in 0..inner {
                                    let t = (o * len + j) * inner + i;
                                    let d = g[t] * gv[j];
                                    gx[t] += inv_std[j] * (d - mean_d - xhat[t] * mean_dh);
                                }
                            }
                        }
                    } else if *stats == NormStats::PerPosition {
                        let n = len as f64;
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| (o * len + j) * inner + i;
                                let mut mean_d = 0.0;
                                let mut mean_dh = 0.0;
                                for j in 0..len {
                                    let d = g[at(j)] * gv[j];
                                    mean_d += d;
                                    mean_dh += d * xhat[at(j)];
                                }
                                mean_d /= n;
                                mean_dh /= n;
                                let is = inv_std[o * inner + i];
                                for j in 0..len {
                                    let d = g[at(j)] * gv[j];
                                    gx[at(j)] += is * (d - mean_d - xhat[at(j)] * mean_dh);
                                }
                            }
                        }
                    } else {
                        // batch norm with running statistics: affine in x
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    let t = (o * len + j) * inner + i;
                                    gx[t] += g[t] * gv[j] * inv_std[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x, spatial } => {
                let gx = slot!(x);
                let s = *spatial;
                for (c, &gc) in g.iter().enumerate() {
                    for v in &mut gx[c * s..(c + 1) * s] {
                        *v += gc / s as f64;
                    }
                }
            }
            Op::Binary { kind, a, b, map } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let n = g.len();
                let ia = |t: usize| map.as_ref().map_or(t, |m| m.0[t]);
                let ib = |t: usize| map.as_ref().map_or(t, |m| m.1[t]);
                if needs(*a) {
                    let ga = slot!(a);
                    for t in 0..n {
                        ga[ia(t)] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[t],
                            BinaryKind::Mul => g[t] * bv[ib(t)],
                        };
                    }
                }
                if needs(*b) {
                    let gb = slot!(b);
                    for t in 0..n {
                        gb[ib(t)] += match kind {
                            BinaryKind::Add => g[t],
                            BinaryKind::Sub => -g[t],
                            BinaryKind::Mul => g[t] * av[ia(t)],
                        };
                    }
                }
            }
            Op::Expand { x, map } => {
                let gx = slot!(x);
                for (t, &src) in map.iter().enumerate() {
                    gx[src] += g[t];
                }
            }
            Op::Scale(x, c) => {
                let gx = slot!(x);
                for (a, b) in gx.iter_mut().zip(g) {
                    *a += b * c;
                }
            }
            Op::Reshape(x) => {
                let gx = slot!(x);
                for (a, b) in gx.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Permute { x, src_index } => {
                let gx = slot!(x);
                for (t, &src) in src_index.iter().enumerate() {
                    gx[src] += g[t];
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if needs(*a) {
                    let ga = slot!(a);
                    for bi in 0..batch {
                        for i in 0..m {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[bi * m * n + i * n + j] * bv[bi * k * n + l * n + j];
                                }
                                ga[bi * m * k + i * k + l] += acc;
                            }
                        }
                    }
                }
                if needs(*b) {
                    let gb = slot!(b);
                    for bi in 0..batch {
                        for l in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += av[bi * m * k + i * k + l] * g[bi * m * n + i * n + j];
                                }
                                gb[bi * k * n + l * n + j] += acc;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gx = slot!(x);
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let gx = slot!(x);
                let n = gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += g[0] / n);
            }
            Op::SumLast { x, len } => {
                let gx = slot!(x);
                for (r, chunk) in gx.chunks_mut(*len).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += g[r]);
                }
            }
            Op::SoftTargetCe {
                logits,
                target,
                probs,
                batch,
            } => {
                let gl = slot!(logits);
                let scale = g[0] / *batch as f64;
                for t in 0..gl.len() {
                    gl[t] += scale * (probs[t] - target[t]);
                }
            }
            Op::ClassDot {
                x,
                w,
                b,
                batch,
                classes,
                dim,
            } => {
                let (batch, classes, dim) = (*batch, *classes, *dim);
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                if needs(*x) {
                    let gx = slot!(x);
                    for bi in 0..batch {
                        for c in 0..classes {
                            let go = g[bi * classes + c];
                            for j in 0..dim {
                                gx[(bi * classes + c) * dim + j] += go * wv[c * dim + j];
                            }
                        }
                    }
                }
                if needs(*w) {
                    let gw = slot!(w);
                    for bi in 0..batch {
                        for c in 0..classes {
                            let go = g[bi * classes + c];
                            for j in 0..dim {
                                gw[c * dim + j] += go * xv[(bi * classes + c) * dim + j];
                            }
                        }
                    }
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let gb = slot!(b);
                    for bi in 0..batch {
                        for c in 0..classes {
                            gb[c] += g[bi * classes + c];
                        }
                    }
                }
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn norm_layout(shape: &[usize], axis: usize, op: &'static str) -> Result<NormLayout> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(NormLayout {
        outer: shape[..axis].iter().product(),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    })
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat source offsets for every element of `shape` given per-axis source strides.
fn iter_index(shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(offset);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            offset -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let s = strides(src);
    let src_strides: Vec<usize> = (0..rank)
        .map(|i| {
            if i + src.len() < rank {
                0
            } else {
                let j = i + src.len() - rank;
                if src[j] == 1 {
                    0
                } else {
                    s[j]
                }
            }
        })
        .collect();
    iter_index(out, &src_strides)
}
