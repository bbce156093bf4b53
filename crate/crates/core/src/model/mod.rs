//! Pre-LN transformer over token ids with learned absolute positions and an
//! output projection tied to the token embedding. The attention mode decides
//! between the bidirectional fill-in model and the causal baseline.

mod checkpoint;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TensorEntry, FORMAT_VERSION, MAGIC};

use crate::rng::{self, streams};
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};
use crate::{Error, Result, TokenId};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_max: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    pub attention_mode: AttentionMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.n_max == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("vocab_size, n_max, d_model and d_ff must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0,1)", self.dropout_p));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter blocks in slot order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.n_max, d]),
            ("out_bias".to_string(), vec![v]),
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.bias".to_string(), vec![d]),
        ];
        for l in 0..self.n_layers {
            let blocks: [(&str, Vec<usize>); LAYER_SLOTS] = [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.bq", vec![d]),
                ("attn.wk", vec![d, d]),
                ("attn.wv", vec![d, d]),
                ("attn.bv", vec![d]),
                ("attn.wo", vec![d, d]),
                ("attn.bo", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("mlp.w1", vec![d, f]),
                ("mlp.b1", vec![f]),
                ("mlp.w2", vec![f, d]),
                ("mlp.b2", vec![d]),
            ];
            out.extend(blocks.into_iter().map(|(n, s)| (format!("layer{l}.{n}"), s)));
        }
        out
    }

    /// `V·d + n_max·d + V + 2d + L·(4d² + 2d·d_ff + 8d + d_ff)`
    pub fn param_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.d_model, self.d_ff, self.n_layers);
        v * d + self.n_max * d + v + 2 * d + l * (4 * d * d + 2 * d * f + 8 * d + f)
    }
}

const GLOBAL_SLOTS: usize = 5;
const LAYER_SLOTS: usize = 15;

mod slot {
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;
    pub const OUT_BIAS: usize = 2;
    pub const LNF_GAIN: usize = 3;
    pub const LNF_BIAS: usize = 4;

    pub const LN1_GAIN: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const WV: usize = 5;
    pub const BV: usize = 6;
    pub const WO: usize = 7;
    pub const BO: usize = 8;
    pub const LN2_GAIN: usize = 9;
    pub const LN2_BIAS: usize = 10;
    pub const W1: usize = 11;
    pub const B1: usize = 12;
    pub const W2: usize = 13;
    pub const B2: usize = 14;
}

/// Model weights plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<F: Scalar> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<F>>,
}

/// Parameter handles on a particular graph.
pub struct Bound(Vec<Var>);

impl<F: Scalar> Transformer<F> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, streams::INIT);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let (names, params) = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<F> = if name.ends_with("gain") {
                    vec![F::one(); n]
                } else if shape.len() == 1 {
                    vec![F::zero(); n]
                } else {
                    (0..n).map(|_| F::lit(normal.sample(&mut r))).collect()
                };
                (name, Tensor::new(shape, data).expect("shape matches data"))
            })
            .unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter blocks, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter block",
                    lhs: shape.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
            if !p.all_finite() {
                return Err(Error::InvalidConfig(format!("parameter block `{name}` is not finite")));
            }
        }
        Ok(Self {
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Transformer<G> {
        Transformer {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Register every parameter block on `g`, slot `i` for block `i`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, F>) -> Bound {
        Bound(self.params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect())
    }

    /// Logits `[batch, n, vocab_size]` for equal-length rows of ids. Dropout
    /// is active only when a dropout rng is supplied.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, F>,
        bound: &Bound,
        batch: &[&[TokenId]],
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let b = batch.len();
        let n = batch.first().map_or(0, |r| r.len());
        if b == 0 || n == 0 {
            return Err(Error::InvalidArgument("forward needs a non-empty batch".into()));
        }
        if let Some(row) = batch.iter().find(|r| r.len() != n) {
            return Err(Error::ShapeMismatch {
                op: "forward batch",
                lhs: vec![n],
                rhs: vec![row.len()],
            });
        }
        if n > cfg.n_max {
            return Err(Error::SequenceTooLong {
                len: n,
                n_max: cfg.n_max,
            });
        }
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let p = &bound.0;
        let layer = |l: usize, s: usize| p[GLOBAL_SLOTS + l * LAYER_SLOTS + s];
        let drop = F::lit(cfg.dropout_p);

        let flat: Vec<TokenId> = batch.iter().flat_map(|r| r.iter().copied()).collect();
        let positions: Vec<TokenId> = (0..b).flat_map(|_| 0..n as TokenId).collect();
        let tok = g.embedding(p[slot::TOK_EMB], &flat)?;
        let pos = g.embedding(p[slot::POS_EMB], &positions)?;
        let mut x = g.add(tok, pos)?;
        if let Some(r) = dropout_rng.as_deref_mut() {
            x = g.dropout(x, drop, r)?;
        }

        let att_scale = F::one() / F::lit(dh as f64).sqrt();
        let eps = F::lit(LAYER_NORM_EPS);
        for l in 0..cfg.n_layers {
            let hn = g.layer_norm(x, layer(l, slot::LN1_GAIN), layer(l, slot::LN1_BIAS), eps)?;
            // keys carry no bias: it would shift every score in a row equally
            let heads = |w: usize, bias: Option<usize>, g: &mut Graph<'_, F>| -> Result<Var> {
                let mut y = g.matmul(hn, layer(l, w))?;
                if let Some(bias) = bias {
                    y = g.add_bias(y, layer(l, bias))?;
                }
                let y = g.reshape(y, &[b, n, h, dh])?;
                g.permute(y, &[0, 2, 1, 3])
            };
            let q = heads(slot::WQ, Some(slot::BQ), g)?;
            let k = heads(slot::WK, None, g)?;
            let v = heads(slot::WV, Some(slot::BV), g)?;
            let scores = g.matmul_t(q, k)?;
            let mut scores = g.scale(scores, att_scale);
            if cfg.attention_mode == AttentionMode::Causal {
                scores = g.causal_mask(scores)?;
            }
            let att = g.softmax(scores, F::one())?;
            let ctx = g.matmul(att, v)?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b * n, d])?;
            let o = g.matmul(ctx, layer(l, slot::WO))?;
            let mut o = g.add_bias(o, layer(l, slot::BO))?;
            if let Some(r) = dropout_rng.as_deref_mut() {
                o = g.dropout(o, drop, r)?;
            }
            x = g.add(x, o)?;

            let hn = g.layer_norm(x, layer(l, slot::LN2_GAIN), layer(l, slot::LN2_BIAS), eps)?;
            let f = g.matmul(hn, layer(l, slot::W1))?;
            let f = g.add_bias(f, layer(l, slot::B1))?;
            let f = g.gelu(f);
            let f = g.matmul(f, layer(l, slot::W2))?;
            let mut f = g.add_bias(f, layer(l, slot::B2))?;
            if let Some(r) = dropout_rng.as_deref_mut() {
                f = g.dropout(f, drop, r)?;
            }
            x = g.add(x, f)?;
        }
        let x = g.layer_norm(x, p[slot::LNF_GAIN], p[slot::LNF_BIAS], eps)?;
        let logits = g.matmul_t(x, p[slot::TOK_EMB])?;
        let logits = g.add_bias(logits, p[slot::OUT_BIAS])?;
        g.reshape(logits, &[b, n, cfg.vocab_size])
    }

    /// Eval-mode logits `[batch, n, vocab_size]`.
    pub fn forward(&self, batch: &[&[TokenId]]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward_graph(&mut g, &bound, batch, None)?;
        Ok(g.value(out).clone())
    }

    /// Apply `update` to each parameter block with its gradient.
    pub fn for_each_block(&mut self, grads: &Gradients<F>, mut update: impl FnMut(usize, &str, &mut Tensor<F>, &Tensor<F>)) {
        for (i, (name, p)) in self.names.iter().zip(&mut self.params).enumerate() {
            if let Some(gr) = grads.get(i) {
                update(i, name, p, gr);
            }
        }
    }
}
