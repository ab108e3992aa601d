//! Layers built from tape primitives. Each layer only holds [`ParamId`]s;
//! values live in the [`ParamStore`].

use rand::Rng;

use super::{ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, R>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut sub = Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut sub)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.add(full, value)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        b.scoped(name, |b| {
            let w = Tensor::xavier(b.rng, fan_in, fan_out, gain);
            let weight = b.add("weight", w);
            let bias = Some(b.add("bias", Tensor::zeros(&[fan_out])));
            Linear { weight, bias }
        })
    }

    pub fn no_bias<R: Rng>(b: &mut Builder<'_, R>, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        b.scoped(name, |b| {
            let w = Tensor::xavier(b.rng, fan_in, fan_out, gain);
            Linear {
                weight: b.add("weight", w),
                bias: None,
            }
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d: usize) -> Self {
        b.scoped(name, |b| LayerNorm {
            gamma: b.add("gamma", Tensor::full(&[d], 1.0)),
            beta: b.add("beta", Tensor::zeros(&[d])),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d_in: usize, hidden: usize, d_out: usize, out_gain: f64) -> Self {
        b.scoped(name, |b| FeedForward {
            up: Linear::new(b, "up", d_in, hidden, 1.0),
            down: Linear::new(b, "down", hidden, d_out, out_gain),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Multi-head attention with learned projections.
///
/// The key/value projections are optional: when the caller already supplies
/// projected keys and values (the BEV adapters do), they are used as is.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q_proj: Linear,
    pub k_proj: Option<Linear>,
    pub v_proj: Option<Linear>,
    pub out_proj: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d: usize, heads: usize, project_kv: bool) -> Self {
        b.scoped(name, |b| MultiHeadAttention {
            heads,
            q_proj: Linear::new(b, "q", d, d, 1.0),
            k_proj: project_kv.then(|| Linear::new(b, "k", d, d, 1.0)),
            v_proj: project_kv.then(|| Linear::new(b, "v", d, d, 1.0)),
            out_proj: Linear::new(b, "out", d, d, 1.0),
        })
    }

    pub fn forward(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
        let q = self.q_proj.forward(tape, q)?;
        let k = match &self.k_proj {
            Some(p) => p.forward(tape, k)?,
            None => k,
        };
        let v = match &self.v_proj {
            Some(p) => p.forward(tape, v)?,
            None => v,
        };
        let a = tape.attention(q, k, v, self.heads)?;
        self.out_proj.forward(tape, a)
    }
}

/// Post-norm transformer layer: attention + residual + norm, then
/// feed-forward + residual + norm.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d: usize, heads: usize, ffn_hidden: usize, project_kv: bool) -> Self {
        b.scoped(name, |b| TransformerLayer {
            attn: MultiHeadAttention::new(b, "attn", d, heads, project_kv),
            norm1: LayerNorm::new(b, "norm1", d),
            ffn: FeedForward::new(b, "ffn", d, ffn_hidden, d, 1.0),
            norm2: LayerNorm::new(b, "norm2", d),
        })
    }

    /// Cross-attention of `x` onto `(k, v)`; self-attention when both are `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var, k: Var, v: Var) -> Result<Var> {
        let a = self.attn.forward(tape, x, k, v)?;
        let h = tape.add(x, a)?;
        let h = self.norm1.forward(tape, h)?;
        let f = self.ffn.forward(tape, h)?;
        let h2 = tape.add(h, f)?;
        self.norm2.forward(tape, h2)
    }

    pub fn self_attend(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward(tape, x, x, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_scoped() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let l = b.scoped("enc", |b| Linear::new(b, "proj", 3, 4, 1.0));
        assert_eq!(store.name(l.weight), "enc.proj.weight");
        assert_eq!(store.get(l.weight).shape(), &[3, 4]);
    }

    #[test]
    fn layer_norm_output_is_standardised_before_affine() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ln = LayerNorm::new(&mut Builder::new(&mut store, &mut rng), "ln", 16);
        let x = Tensor::normal(&mut rng, &[5, 16], 3.0);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let y = ln.forward(&mut tape, xv).unwrap();
        for r in 0..5 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn transformer_layer_preserves_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = TransformerLayer::new(&mut Builder::new(&mut store, &mut rng), "t", 8, 2, 16, true);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::normal(&mut rng, &[5, 8], 1.0));
        let kv = tape.constant(Tensor::normal(&mut rng, &[3, 8], 1.0));
        let y = layer.forward(&mut tape, x, kv, kv).unwrap();
        assert_eq!(tape.shape(y), &[5, 8]);
    }
}
