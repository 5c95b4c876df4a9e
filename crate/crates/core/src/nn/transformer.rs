//! Pre-norm transformer encoder scorer with a learned classification token.

use serde::{Deserialize, Serialize};

use super::{init_normal, Affine, Graph, Linear, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig { model_dim: 128, heads: 8, layers: 6, ff_dim: 512 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidConfig("transformer dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Affine,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Affine,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct TransformerScorer {
    config: TransformerConfig,
    input_dim: usize,
    items: usize,
    proj: Linear,
    proj_norm: Affine,
    positions: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    final_norm: Affine,
    pub head: Linear,
}

impl TransformerScorer {
    /// `items` is the task sequence length; the encoder sees `items + 1`.
    pub fn new(
        params: &mut ParamSet,
        config: &TransformerConfig,
        input_dim: usize,
        items: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let proj = Linear::new(params, "tf.proj", input_dim, d, rng);
        let proj_norm = Affine::new(params, "tf.proj_norm", d);
        let positions = params.add("tf.positions", init_normal(rng, items + 1, d, 0.02));
        let cls = params.add("tf.cls", init_normal(rng, 1, d, 0.02));
        let blocks = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("tf.layer{l}.{s}");
                Block {
                    ln1: Affine::new(params, &p("ln1"), d),
                    q: Linear::new(params, &p("q"), d, d, rng),
                    k: Linear::new(params, &p("k"), d, d, rng),
                    v: Linear::new(params, &p("v"), d, d, rng),
                    o: Linear::new(params, &p("o"), d, d, rng),
                    ln2: Affine::new(params, &p("ln2"), d),
                    ff1: Linear::new(params, &p("ff1"), d, config.ff_dim, rng),
                    ff2: Linear::new(params, &p("ff2"), config.ff_dim, d, rng),
                }
            })
            .collect();
        let final_norm = Affine::new(params, "tf.final_norm", d);
        let head = Linear::new(params, "tf.head", d, 1, rng);
        Ok(TransformerScorer {
            config: config.clone(),
            input_dim,
            items,
            proj,
            proj_norm,
            positions,
            cls,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Zeroes the query/key/value/output projections of every layer.
    pub fn zero_attention(&self, params: &mut ParamSet) {
        for b in &self.blocks {
            for l in [b.q, b.k, b.v, b.o] {
                l.zero(params);
            }
        }
    }

    /// `x` holds `sequences·items` rows (row `s·items + t` is item `t` of
    /// sequence `s`); returns one score per sequence.
    pub fn score(&self, g: &mut Graph, x: Var) -> Var {
        let (n, c) = g.value(x).shape();
        assert_eq!(c, self.input_dim, "transformer input width");
        assert_eq!(n % self.items, 0, "ragged transformer batch");
        let len = self.items + 1;
        let p = self.proj.forward(g, x);
        let p = g.layer_norm(p, LN_EPS);
        let p = self.proj_norm.forward(g, p);
        let cls = g.param(self.cls);
        let mut h = g.prepend_token(p, cls, self.items);
        let pos = g.param(self.positions);
        h = g.add_tiled(h, pos);
        for b in &self.blocks {
            let a = g.layer_norm(h, LN_EPS);
            let a = b.ln1.forward(g, a);
            let q = b.q.forward(g, a);
            let k = b.k.forward(g, a);
            let v = b.v.forward(g, a);
            let att = g.attention(q, k, v, self.config.heads, len);
            let att = b.o.forward(g, att);
            h = g.add(h, att);
            let f = g.layer_norm(h, LN_EPS);
            let f = b.ln2.forward(g, f);
            let f = b.ff1.forward(g, f);
            let f = g.relu(f);
            let f = b.ff2.forward(g, f);
            h = g.add(h, f);
        }
        let seqs = n / self.items;
        let tokens = g.gather_rows(h, (0..seqs).map(|s| s * len).collect());
        let t = g.layer_norm(tokens, LN_EPS);
        let t = self.final_norm.forward(g, t);
        self.head.forward(g, t)
    }
}
