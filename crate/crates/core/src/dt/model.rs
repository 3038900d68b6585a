use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AgentContext, DtConfig, Normalization};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub(super) struct Linear<T> {
    /// `(out, in)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn apply(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(super) struct LayerNorm<T> {
    pub weight: Array1<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(d: usize) -> Self {
        Self {
            weight: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    fn apply(&self, x: &Array2<T>) -> Array2<T> {
        let d = T::cast_f64(x.ncols() as f64);
        let eps = T::cast_f64(LN_EPS);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(T::zero(), |a, &v| a + v * v) / d;
            let inv = (var + eps).sqrt().recip();
            for ((v, &w), &b) in row.iter_mut().zip(&self.weight).zip(&self.bias) {
                *v = *v * inv * w + b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(super) struct Block<T> {
    pub ln1: LayerNorm<T>,
    /// Query, key and value projections stacked along the output axis.
    pub qkv: Linear<T>,
    pub attn_proj: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc: Linear<T>,
    pub mlp_proj: Linear<T>,
}

/// Decision transformer over interleaved (return, previous action, state)
/// tokens. The action distribution for a tuple is read from its state token.
#[derive(Debug, Clone, PartialEq)]
pub struct DtModel<T> {
    pub(super) config: DtConfig,
    pub(super) norm: Normalization,
    pub(super) embed_return: Linear<T>,
    pub(super) embed_state: Linear<T>,
    /// `n_actions + 1` rows; the last one stands for "no previous action".
    pub(super) embed_action: Array2<T>,
    pub(super) embed_timestep: Array2<T>,
    pub(super) embed_ln: LayerNorm<T>,
    pub(super) blocks: Vec<Block<T>>,
    pub(super) ln_f: LayerNorm<T>,
    pub(super) head: Linear<T>,
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::cast_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::cast_f64(0.5);
    half * x * (T::one() + (c * (x + T::cast_f64(0.044715) * x * x * x)).tanh())
}

impl<T: Scalar> DtModel<T> {
    /// All-zero weights with unit layer-norm gains.
    pub fn zeros(config: DtConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let block = Block {
            ln1: LayerNorm::new(d),
            qkv: Linear::zeros(3 * d, d),
            attn_proj: Linear::zeros(d, d),
            ln2: LayerNorm::new(d),
            fc: Linear::zeros(4 * d, d),
            mlp_proj: Linear::zeros(d, 4 * d),
        };
        Ok(Self {
            norm: Normalization::identity(config.state_dim),
            embed_return: Linear::zeros(d, 1),
            embed_state: Linear::zeros(d, config.state_dim),
            embed_action: Array2::zeros((config.n_actions + 1, d)),
            embed_timestep: Array2::zeros((config.max_timestep, d)),
            embed_ln: LayerNorm::new(d),
            blocks: vec![block; config.n_layers],
            ln_f: LayerNorm::new(d),
            head: Linear::zeros(config.n_actions, d),
            config,
        })
    }

    /// Seeded initialization: weight matrices and embeddings from
    /// N(0, 0.02²) drawn in `f32`, biases zero, layer-norm gains one.
    pub fn init(config: DtConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        for (_, mut t) in model.named_tensors_mut() {
            if t.ndim() == 2 {
                t.map_inplace(|v| *v = T::cast_f32(normal.sample(&mut rng)));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &DtConfig {
        &self.config
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        norm.validate(self.config.state_dim)?;
        self.norm = norm;
        Ok(())
    }

    /// Every parameter tensor in file order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out: Vec<(String, ArrayViewD<'_, T>)> = vec![
            (
                "embed_return.weight".into(),
                self.embed_return.weight.view().into_dyn(),
            ),
            (
                "embed_return.bias".into(),
                self.embed_return.bias.view().into_dyn(),
            ),
            (
                "embed_state.weight".into(),
                self.embed_state.weight.view().into_dyn(),
            ),
            (
                "embed_state.bias".into(),
                self.embed_state.bias.view().into_dyn(),
            ),
            (
                "embed_action.weight".into(),
                self.embed_action.view().into_dyn(),
            ),
            (
                "embed_timestep.weight".into(),
                self.embed_timestep.view().into_dyn(),
            ),
            (
                "embed_ln.weight".into(),
                self.embed_ln.weight.view().into_dyn(),
            ),
            ("embed_ln.bias".into(), self.embed_ln.bias.view().into_dyn()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("ln1.weight"), b.ln1.weight.view().into_dyn()));
            out.push((p("ln1.bias"), b.ln1.bias.view().into_dyn()));
            out.push((p("attn.qkv.weight"), b.qkv.weight.view().into_dyn()));
            out.push((p("attn.qkv.bias"), b.qkv.bias.view().into_dyn()));
            out.push((p("attn.proj.weight"), b.attn_proj.weight.view().into_dyn()));
            out.push((p("attn.proj.bias"), b.attn_proj.bias.view().into_dyn()));
            out.push((p("ln2.weight"), b.ln2.weight.view().into_dyn()));
            out.push((p("ln2.bias"), b.ln2.bias.view().into_dyn()));
            out.push((p("mlp.fc.weight"), b.fc.weight.view().into_dyn()));
            out.push((p("mlp.fc.bias"), b.fc.bias.view().into_dyn()));
            out.push((p("mlp.proj.weight"), b.mlp_proj.weight.view().into_dyn()));
            out.push((p("mlp.proj.bias"), b.mlp_proj.bias.view().into_dyn()));
        }
        out.push(("ln_f.weight".into(), self.ln_f.weight.view().into_dyn()));
        out.push(("ln_f.bias".into(), self.ln_f.bias.view().into_dyn()));
        out.push(("head.weight".into(), self.head.weight.view().into_dyn()));
        out.push(("head.bias".into(), self.head.bias.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, T>)> = vec![
            (
                "embed_return.weight".into(),
                self.embed_return.weight.view_mut().into_dyn(),
            ),
            (
                "embed_return.bias".into(),
                self.embed_return.bias.view_mut().into_dyn(),
            ),
            (
                "embed_state.weight".into(),
                self.embed_state.weight.view_mut().into_dyn(),
            ),
            (
                "embed_state.bias".into(),
                self.embed_state.bias.view_mut().into_dyn(),
            ),
            (
                "embed_action.weight".into(),
                self.embed_action.view_mut().into_dyn(),
            ),
            (
                "embed_timestep.weight".into(),
                self.embed_timestep.view_mut().into_dyn(),
            ),
            (
                "embed_ln.weight".into(),
                self.embed_ln.weight.view_mut().into_dyn(),
            ),
            (
                "embed_ln.bias".into(),
                self.embed_ln.bias.view_mut().into_dyn(),
            ),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("ln1.weight"), b.ln1.weight.view_mut().into_dyn()));
            out.push((p("ln1.bias"), b.ln1.bias.view_mut().into_dyn()));
            out.push((p("attn.qkv.weight"), b.qkv.weight.view_mut().into_dyn()));
            out.push((p("attn.qkv.bias"), b.qkv.bias.view_mut().into_dyn()));
            out.push((
                p("attn.proj.weight"),
                b.attn_proj.weight.view_mut().into_dyn(),
            ));
            out.push((p("attn.proj.bias"), b.attn_proj.bias.view_mut().into_dyn()));
            out.push((p("ln2.weight"), b.ln2.weight.view_mut().into_dyn()));
            out.push((p("ln2.bias"), b.ln2.bias.view_mut().into_dyn()));
            out.push((p("mlp.fc.weight"), b.fc.weight.view_mut().into_dyn()));
            out.push((p("mlp.fc.bias"), b.fc.bias.view_mut().into_dyn()));
            out.push((
                p("mlp.proj.weight"),
                b.mlp_proj.weight.view_mut().into_dyn(),
            ));
            out.push((p("mlp.proj.bias"), b.mlp_proj.bias.view_mut().into_dyn()));
        }
        out.push(("ln_f.weight".into(), self.ln_f.weight.view_mut().into_dyn()));
        out.push(("ln_f.bias".into(), self.ln_f.bias.view_mut().into_dyn()));
        out.push(("head.weight".into(), self.head.weight.view_mut().into_dyn()));
        out.push(("head.bias".into(), self.head.bias.view_mut().into_dyn()));
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_context(&self, ctx: &AgentContext) -> Result<()> {
        if ctx.is_empty() {
            return Err(Error::Usage("empty context".into()));
        }
        if ctx.len() > self.config.context_k {
            return Err(Error::Usage(format!(
                "context holds {} tuples, model accepts at most {}",
                ctx.len(),
                self.config.context_k
            )));
        }
        for e in ctx.entries() {
            if e.state.len() != self.config.state_dim {
                return Err(Error::Usage(format!(
                    "state has {} values, model expects {}",
                    e.state.len(),
                    self.config.state_dim
                )));
            }
            if e.prev_action.is_some_and(|a| a >= self.config.n_actions) {
                return Err(Error::Usage("previous action out of range".into()));
            }
        }
        Ok(())
    }

    /// Token embeddings: three rows per tuple (return, action, state).
    fn embed(&self, ctx: &AgentContext) -> Array2<T> {
        let d = self.config.embed_dim;
        let mut x = Array2::zeros((3 * ctx.len(), d));
        let scale = T::cast_f64(self.norm.return_scale);
        let mut state = Array2::zeros((1, self.config.state_dim));
        for (i, e) in ctx.entries().enumerate() {
            let t = e.timestep.min(self.config.max_timestep - 1);
            let pos = self.embed_timestep.row(t);

            let r = T::cast_f64(e.return_to_go as f64) * scale;
            let mut row = x.row_mut(3 * i);
            row.assign(&self.embed_return.weight.column(0));
            row.mapv_inplace(|w| w * r);
            row += &self.embed_return.bias;
            row += &pos;

            let a = e.prev_action.unwrap_or(self.config.no_action_index());
            let mut row = x.row_mut(3 * i + 1);
            row.assign(&self.embed_action.row(a));
            row += &pos;

            for (j, v) in state.row_mut(0).iter_mut().enumerate() {
                let z = (f64::from(e.state[j]) - self.norm.state_mean[j]) / self.norm.state_std[j];
                *v = T::cast_f64(z);
            }
            let s_tok = self.embed_state.apply(&state);
            let mut row = x.row_mut(3 * i + 2);
            row.assign(&s_tok.row(0));
            row += &pos;
        }
        self.embed_ln.apply(&x)
    }

    fn attention(&self, block: &Block<T>, h: &Array2<T>) -> Array2<T> {
        let n = h.nrows();
        let d = self.config.embed_dim;
        let hd = d / self.config.n_heads;
        let qkv = block.qkv.apply(h);
        let scale = T::cast_f64(1.0 / (hd as f64).sqrt());
        let mut y = Array2::zeros((n, d));
        for head in 0..self.config.n_heads {
            let q = qkv.slice(s![.., head * hd..(head + 1) * hd]);
            let k = qkv.slice(s![.., d + head * hd..d + (head + 1) * hd]);
            let v = qkv.slice(s![.., 2 * d + head * hd..2 * d + (head + 1) * hd]);
            let mut att = q.dot(&k.t());
            for (i, mut row) in att.axis_iter_mut(Axis(0)).enumerate() {
                let max = row
                    .slice(s![..=i])
                    .iter()
                    .copied()
                    .fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for (j, a) in row.iter_mut().enumerate() {
                    *a = if j <= i {
                        ((*a - max) * scale).exp()
                    } else {
                        T::zero()
                    };
                    sum += *a;
                }
                row.mapv_inplace(|a| a / sum);
            }
            y.slice_mut(s![.., head * hd..(head + 1) * hd])
                .assign(&att.dot(&v));
        }
        block.attn_proj.apply(&y)
    }

    /// Final hidden states for every token.
    fn hidden(&self, ctx: &AgentContext) -> Array2<T> {
        let mut x = self.embed(ctx);
        for block in &self.blocks {
            x = &x + &self.attention(block, &block.ln1.apply(&x));
            let mut m = block.fc.apply(&block.ln2.apply(&x));
            m.mapv_inplace(gelu);
            x = &x + &block.mlp_proj.apply(&m);
        }
        self.ln_f.apply(&x)
    }

    /// Logits at every tuple's state token, one row per tuple.
    pub fn forward_all(&self, ctx: &AgentContext) -> Result<Array2<T>> {
        self.check_context(ctx)?;
        let h = self.hidden(ctx);
        let states = h.slice(s![2..;3, ..]).to_owned();
        Ok(self.head.apply(&states))
    }

    /// Action logits for the latest tuple.
    pub fn forward(&self, ctx: &AgentContext) -> Result<Vec<T>> {
        let all = self.forward_all(ctx)?;
        Ok(all.row(all.nrows() - 1).to_vec())
    }
}
