use ndarray::{Array2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var};

/// Graph plus the parameter values it reads from.
#[derive(Clone, Copy)]
pub(crate) struct Ctx<'a> {
    pub g: &'a Graph,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn p(&self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), uniform(rng, &[din, dout], bound)),
            b: store.add(format!("{name}.b"), uniform(rng, &[dout], bound)),
        }
    }

    /// Square layer starting as the identity map.
    pub fn identity(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), ndarray::Array2::<f64>::eye(d).into_dyn()),
            b: store.add(format!("{name}.b"), Tensor::zeros(IxDyn(&[d]))),
        }
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Var {
        cx.g.linear(x, cx.p(self.w), Some(cx.p(self.b)))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[d]))),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(IxDyn(&[d]))),
            eps,
        }
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Var {
        cx.g.layer_norm(x, cx.p(self.gamma), cx.p(self.beta), self.eps)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[c]))),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(IxDyn(&[c]))),
            mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(IxDyn(&[c]))),
            var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(IxDyn(&[c]))),
            eps,
        }
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Var {
        cx.g.batch_norm2d(
            x,
            cx.p(self.gamma),
            cx.p(self.beta),
            (self.mean, cx.store.get(self.mean)),
            (self.var, cx.store.get(self.var)),
            self.eps,
        )
    }
}

/// Convolution (or transposed convolution) with optional BN + ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub bn: Option<BatchNorm>,
    pub spec: Conv2dSpec,
    pub transposed: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        spec: Conv2dSpec,
        transposed: bool,
        bn_eps: Option<f64>,
    ) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = cin * kh * kw;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let shape = if transposed { [cin, cout, kh, kw] } else { [cout, cin, kh, kw] };
        Self {
            w: store.add(format!("{name}.w"), uniform(rng, &shape, bound)),
            b: store.add(format!("{name}.b"), uniform(rng, &[cout], bound)),
            bn: bn_eps.map(|eps| BatchNorm::new(store, &format!("{name}.bn"), cout, eps)),
            spec,
            transposed,
        }
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Var {
        let (w, b) = (cx.p(self.w), Some(cx.p(self.b)));
        let y = if self.transposed {
            cx.g.conv_transpose2d(x, w, b, self.spec)
        } else {
            cx.g.conv2d(x, w, b, self.spec)
        };
        match &self.bn {
            Some(bn) => {
                let y = bn.forward(cx, y);
                cx.g.relu(y)
            }
            None => y,
        }
    }
}

/// Pre-norm transformer encoder layer: self-attention then a ReLU
/// feed-forward block, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub(crate) struct TransformerLayer {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub width: usize,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
        ff: usize,
        ln_eps: f64,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width, ln_eps),
            q: Linear::new(store, rng, &format!("{name}.q"), width, width),
            k: Linear::new(store, rng, &format!("{name}.k"), width, width),
            v: Linear::new(store, rng, &format!("{name}.v"), width, width),
            o: Linear::new(store, rng, &format!("{name}.o"), width, width),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width, ln_eps),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), width, ff),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ff, width),
            heads,
            width,
        }
    }

    /// `x: [B, N, width]`.
    pub fn forward(&self, cx: Ctx, x: Var) -> Var {
        let g = cx.g;
        let sh = g.shape(x);
        let (b, n) = (sh[0], sh[1]);
        let h = self.heads;
        let dh = self.width / h;
        let split = |t: Var| {
            let t = g.reshape(t, &[b, n, h, dh]);
            let t = g.permute(t, &[0, 2, 1, 3]);
            g.reshape(t, &[b * h, n, dh])
        };
        let xn = self.ln1.forward(cx, x);
        let q = split(self.q.forward(cx, xn));
        let k = split(self.k.forward(cx, xn));
        let v = split(self.v.forward(cx, xn));
        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(scores);
        let ctx = g.bmm(att, v, false, false);
        let ctx = g.reshape(ctx, &[b, h, n, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, n, self.width]);
        let x = g.add(x, self.o.forward(cx, ctx));
        let xn = self.ln2.forward(cx, x);
        let f = self.ff1.forward(cx, xn);
        let f = g.relu(f);
        let f = self.ff2.forward(cx, f);
        g.add(x, f)
    }
}

/// Sinusoidal positional encoding `[n, d]`.
pub(crate) fn positional_encoding(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
