use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::config::{check_resolution, HeadMode, ModelConfig, NormKind, StemKind, TokenMode, PATCH_STRIDE};
use crate::model::layers::{
    attention_pool, conv_stem, linear_patch_stem, trunk_block, Affine, Aggregation, Dense, Mode, Pooled,
    SqueezeExcite, Stochastic, TrunkBlock, TrunkNorm,
};
use crate::model::params::ParamStore;
use crate::numerics::{BatchNormState, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub enum Stem<T> {
    Conv([Dense<T>; 4]),
    Linear(Dense<T>),
}

/// Parameter indices of every layer.
#[derive(Clone, Debug)]
pub struct Layout<T> {
    pub stem: Stem<T>,
    pub blocks: Vec<TrunkBlock<T>>,
    pub aggregation: Option<Aggregation<T>>,
    pub norm: Affine<T>,
    pub head: Dense<T>,
}

impl<T: Copy> Layout<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> Layout<U> {
        Layout {
            stem: match &self.stem {
                Stem::Conv(c) => Stem::Conv([c[0].map(f), c[1].map(f), c[2].map(f), c[3].map(f)]),
                Stem::Linear(p) => Stem::Linear(p.map(f)),
            },
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            aggregation: self.aggregation.as_ref().map(|a| a.map(f)),
            norm: self.norm.map(f),
            head: self.head.map(f),
        }
    }
}

/// Per-image aggregation weights, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// `[tokens, h * w]`, rows are probability vectors over patches.
    pub weights: Tensor,
    pub h: usize,
    pub w: usize,
}

impl AttentionMap {
    pub fn tokens(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.weights.data()[t * n..(t + 1) * n]
    }

    /// Row `t` as an `[h, w]` grid.
    pub fn grid(&self, t: usize) -> Tensor {
        Tensor::new(&[self.h, self.w], self.row(t).to_vec()).expect("row length is h*w")
    }

    pub fn uniform(tokens: usize, h: usize, w: usize) -> Self {
        let n = h * w;
        Self {
            weights: Tensor::full(&[tokens, n], 1.0 / n as f64),
            h,
            w,
        }
    }
}

/// Aggregation intermediates kept for interpretability checks.
#[derive(Clone, Debug)]
pub struct AggregationTrace {
    /// Value vectors `[B, n, d]`.
    pub values: Tensor,
    /// `A V` before the output projection, `[B, t, d]`.
    pub weighted: Tensor,
    /// Output projection of `weighted`, `[B, t, d]`.
    pub z: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub maps: Vec<AttentionMap>,
    pub trace: Option<AggregationTrace>,
    /// Running statistics after this pass (changed only by batch-norm
    /// models in train mode).
    pub bn_states: Vec<BatchNormState>,
    pub macs: u64,
}

/// Tape handles produced by [`PatchConvNet::graph`].
#[derive(Clone, Copy, Debug)]
pub struct Graph {
    pub logits: Var,
    pub patches: Var,
    pub pooled: Option<Pooled>,
    pub grid: (usize, usize),
}

impl Graph {
    /// Head-averaged attention maps, one per batch element.
    pub fn attention_maps(&self, tape: &Tape, tokens: usize) -> Vec<AttentionMap> {
        let (h, w) = self.grid;
        let n = h * w;
        let Some(p) = self.pooled else {
            let b = tape.shape(self.patches)[0];
            return vec![AttentionMap::uniform(tokens, h, w); b];
        };
        let &[b, heads, t, _] = tape.shape(p.attention) else {
            unreachable!("attention weights are [B, heads, t, n]")
        };
        let a = tape.value(p.attention);
        (0..b)
            .map(|bi| {
                let mut rows = vec![0.0; t * n];
                for hd in 0..heads {
                    let base = (bi * heads + hd) * t * n;
                    for (r, v) in rows.iter_mut().zip(&a[base..base + t * n]) {
                        *r += v;
                    }
                }
                if heads > 1 {
                    rows.iter_mut().for_each(|r| *r /= heads as f64);
                }
                AttentionMap {
                    weights: Tensor::new(&[t, n], rows).expect("t*n rows"),
                    h,
                    w,
                }
            })
            .collect()
    }
}

/// The assembled network: stem, columnar trunk, aggregation and head.
#[derive(Clone, Debug)]
pub struct PatchConvNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// One running-statistics record per trunk block for batch-norm models.
    pub bn_states: Vec<BatchNormState>,
    layout: Layout<usize>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn trunc_normal(&mut self, name: String, shape: &[usize], decay: bool) -> usize {
        const STD: f64 = 0.02;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * STD;
            }
        });
        self.store.add(name, t, decay)
    }

    /// He-uniform: keeps activation scale roughly constant through GELU layers.
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.store.add(name, t, true)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.store.add(name, Tensor::full(shape, value), false)
    }

    fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize) -> Dense<usize> {
        let weight = self.uniform(format!("{name}.weight"), &[cout, cin_per_group, k, k], cin_per_group * k * k);
        let bias = self.fill(format!("{name}.bias"), &[cout], 0.0);
        Dense {
            weight,
            bias: Some(bias),
        }
    }

    /// Squeeze-excitation bottleneck: same init family as the convolutions.
    fn fc_uniform(&mut self, name: &str, out: usize, inp: usize) -> Dense<usize> {
        let weight = self.uniform(format!("{name}.weight"), &[out, inp], inp);
        let bias = self.fill(format!("{name}.bias"), &[out], 0.0);
        Dense {
            weight,
            bias: Some(bias),
        }
    }

    fn projection(&mut self, name: &str, out: usize, inp: usize, bias: bool) -> Dense<usize> {
        let weight = self.trunc_normal(format!("{name}.weight"), &[out, inp], true);
        let bias = bias.then(|| self.fill(format!("{name}.bias"), &[out], 0.0));
        Dense { weight, bias }
    }

    fn norm(&mut self, name: &str, d: usize) -> Affine<usize> {
        Affine {
            weight: self.fill(format!("{name}.weight"), &[d], 1.0),
            bias: self.fill(format!("{name}.bias"), &[d], 0.0),
        }
    }
}

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<PatchConvNet> {
    config.validate()?;
    let c = config;
    let d = c.width;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };

    let stem = match c.stem_kind {
        StemKind::Conv => {
            let w = c.stem_widths();
            let cins = [3, w[0], w[1], w[2]];
            let convs: Vec<Dense<usize>> = (0..4)
                .map(|i| init.conv(&format!("stem.{i}"), w[i], cins[i], 3))
                .collect();
            Stem::Conv([convs[0], convs[1], convs[2], convs[3]])
        }
        StemKind::LinearProjection => Stem::Linear(init.conv("stem.proj", d, 3, PATCH_STRIDE)),
    };

    let se = c.se_hidden();
    let blocks = (0..c.depth)
        .map(|i| {
            let p = format!("blocks.{i}");
            TrunkBlock {
                norm: init.norm(&format!("{p}.norm"), d),
                conv1: init.conv(&format!("{p}.conv1"), d, d, 1),
                dwconv: init.conv(&format!("{p}.dwconv"), d, 1, 3),
                se: SqueezeExcite {
                    fc1: init.fc_uniform(&format!("{p}.se.fc1"), se, d),
                    fc2: init.fc_uniform(&format!("{p}.se.fc2"), d, se),
                },
                conv2: init.conv(&format!("{p}.conv2"), d, d, 1),
                gamma: init.fill(format!("{p}.gamma"), &[d], c.layerscale_init),
            }
        })
        .collect();

    let aggregation = match c.head_mode {
        HeadMode::AveragePool => None,
        HeadMode::ClassAttention => {
            let hidden = c.ffn_ratio * d;
            Some(Aggregation {
                token: init.trunc_normal("agg.token".into(), &[c.tokens(), d], false),
                norm_token: init.norm("agg.norm_token", d),
                norm_patches: init.norm("agg.norm_patches", d),
                q: init.projection("agg.q", d, d, true),
                // A key bias shifts every logit of a query row equally.
                k: init.projection("agg.k", d, d, false),
                v: init.projection("agg.v", d, d, true),
                o: init.projection("agg.o", d, d, true),
                gamma1: init.fill("agg.gamma1".into(), &[d], c.layerscale_init),
                norm_ffn: init.norm("agg.norm_ffn", d),
                fc1: init.projection("agg.fc1", hidden, d, true),
                fc2: init.projection("agg.fc2", d, hidden, true),
                gamma2: init.fill("agg.gamma2".into(), &[d], c.layerscale_init),
            })
        }
    };

    let norm = init.norm("norm", d);
    let head = init.projection("head", c.num_classes, d, true);

    let bn_states = match c.norm_kind {
        NormKind::BatchNorm => (0..c.depth)
            .map(|_| BatchNormState {
                eps: c.bn_eps,
                ..BatchNormState::new(d)
            })
            .collect(),
        NormKind::LayerNorm => Vec::new(),
    };

    Ok(PatchConvNet {
        config: config.clone(),
        params: store,
        bn_states,
        layout: Layout {
            stem,
            blocks,
            aggregation,
            norm,
            head,
        },
    })
}

impl PatchConvNet {
    pub fn layout(&self) -> &Layout<usize> {
        &self.layout
    }

    /// Number of scalar parameters (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    /// Records the forward pass on `tape` with parameters `vars` (as
    /// returned by [`bind`](Self::bind) or any same-shaped substitute).
    pub fn graph(
        &self,
        tape: &mut Tape,
        x: Var,
        vars: &[Var],
        bn: &mut [BatchNormState],
        st: &mut Stochastic<'_>,
    ) -> Result<Graph> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let c = &self.config;
        let is_bn = c.norm_kind == NormKind::BatchNorm;
        if is_bn && bn.len() != c.depth {
            return Err(Error::Contract(format!("expected {} batch-norm states, got {}", c.depth, bn.len())));
        }
        let l = self.layout.map(&|i: usize| vars[i]);

        let mut h = match &l.stem {
            Stem::Conv(convs) => conv_stem(tape, x, convs)?,
            Stem::Linear(proj) => linear_patch_stem(tape, x, *proj)?,
        };
        for (i, block) in l.blocks.iter().enumerate() {
            let norm = if is_bn {
                TrunkNorm::Batch(&mut bn[i])
            } else {
                TrunkNorm::Layer { eps: c.ln_eps }
            };
            h = trunk_block(tape, h, block, norm, st)?;
        }

        let [b, d, gh, gw] = *tape.shape(h) else {
            unreachable!("trunk output is NCHW")
        };
        let n = gh * gw;
        let flat = tape.reshape(h, &[b, d, n])?;
        let patches = tape.permute(flat, &[0, 2, 1])?;

        let (logits, pooled) = match &l.aggregation {
            None => {
                let s = tape.global_avg_pool(h)?;
                let s = tape.layer_norm(s, l.norm.weight, l.norm.bias, c.ln_eps)?;
                (tape.linear(s, l.head.weight, l.head.bias)?, None)
            }
            Some(agg) => {
                let p = attention_pool(tape, patches, agg, c.attention_heads, c.ln_eps, st)?;
                let out = tape.layer_norm(p.out, l.norm.weight, l.norm.bias, c.ln_eps)?;
                let logits = match c.token_mode {
                    TokenMode::Single => {
                        let out = tape.reshape(out, &[b, d])?;
                        tape.linear(out, l.head.weight, l.head.bias)?
                    }
                    TokenMode::PerClass => tape.class_dot(out, l.head.weight, l.head.bias)?,
                };
                (logits, Some(p))
            }
        };
        Ok(Graph {
            logits,
            patches,
            pooled,
            grid: (gh, gw),
        })
    }

    /// Evaluates a batch without recording gradients.
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<ForwardOutput> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dim("forward", format!("expected [B, 3, H, W] input, got {shape:?}")));
        }
        check_resolution(shape[2], shape[3])?;
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x);
        let mut bn = self.bn_states.clone();
        let mut st = Stochastic {
            mode,
            drop_path: self.config.drop_path,
            rng,
        };
        let g = self.graph(&mut tape, xv, &vars, &mut bn, &mut st)?;
        Ok(ForwardOutput {
            logits: tape.tensor(g.logits),
            maps: g.attention_maps(&tape, self.config.tokens()),
            trace: g.pooled.map(|p| AggregationTrace {
                values: tape.tensor(p.values),
                weighted: tape.tensor(p.weighted),
                z: tape.tensor(p.z),
            }),
            bn_states: bn,
            macs: tape.macs(),
        })
    }

    /// Eval-mode forward; the result does not depend on any random stream.
    pub fn eval(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.forward(x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Sets every LayerScale diagonal (trunk and aggregation) to `value`.
    pub fn set_layerscale(&mut self, value: f64) {
        for p in self.params.iter_mut() {
            if p.name.ends_with(".gamma") || p.name.ends_with(".gamma1") || p.name.ends_with(".gamma2") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = value);
            }
        }
    }
}
