//! Parameter storage and the transformer building blocks shared by every
//! module of the model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnKind, Tape, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

/// Named, ordered collection of every learnable tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-forward settings: parameters, train/eval mode and the dropout stream.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'a> Ctx<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self { store, train: false, dropout: 0.0, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(store: &'a ParamStore, dropout: f64, seed: u64) -> Self {
        Self { store, train: true, dropout, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.store, id)
    }

    /// Inverted dropout; identity outside training or when the rate is zero.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Var {
        if !self.train || self.dropout <= 0.0 {
            return x;
        }
        let (r, c) = tape.shape(x);
        let keep = 1.0 - self.dropout;
        let data = (0..r * c)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Matrix::from_vec(r, c, data));
        tape.mul(x, mask)
    }
}

/// Builds parameters in a fixed order from one seeded stream.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'s> Init<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let m = Matrix::uniform(fan_in, fan_out, bound, &mut self.rng);
        self.store.add(name, m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let m = Matrix::randn(rows, cols, std, &mut self.rng);
        self.store.add(name, m)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Matrix::filled(rows, cols, value))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = init.xavier(&format!("{name}.w"), fan_in, fan_out);
        let b = init.constant(&format!("{name}.b"), 1, fan_out, 0.0);
        Self { w, b }
    }

    /// Linear map whose weights start at zero.
    pub fn zeroed(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = init.constant(&format!("{name}.w"), fan_in, fan_out, 0.0);
        let b = init.constant(&format!("{name}.b"), 1, fan_out, 0.0);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx<'_>, x: Var) -> Var {
        let w = ctx.p(tape, self.w);
        let b = ctx.p(tape, self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        let gamma = init.constant(&format!("{name}.gamma"), 1, dim, 1.0);
        let beta = init.constant(&format!("{name}.beta"), 1, dim, 0.0);
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx<'_>, x: Var) -> Var {
        let g = ctx.p(tape, self.gamma);
        let b = ctx.p(tape, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head attention with separate query, key, value and output maps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            o: Linear::new(init, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / ((self.dim / self.heads) as f64).sqrt()
    }

    /// Returns the attended output (`n × dim`) and the stacked per-head
    /// weights (`heads·n × keys`). Values are taken from `values`, which may
    /// cover only a prefix of the keys.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &Ctx<'_>,
        queries: Var,
        keys: Var,
        values: Var,
        kind: AttnKind,
    ) -> (Var, Var) {
        let q = self.q.forward(tape, ctx, queries);
        let k = self.k.forward(tape, ctx, keys);
        let v = self.v.forward(tape, ctx, values);
        let p = tape.attn_probs(q, k, self.heads, kind, self.scale());
        let a = tape.attn_apply(p, v, self.heads);
        let out = self.o.forward(tape, ctx, a);
        (out, p)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            l1: Linear::new(init, &format!("{name}.l1"), dim, hidden),
            l2: Linear::new(init, &format!("{name}.l2"), hidden, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let h = self.l1.forward(tape, ctx, x);
        let h = tape.relu(h);
        let h = ctx.dropout(tape, h);
        self.l2.forward(tape, ctx, h)
    }
}

/// Pre-norm self-attention block: `x += SA(LN(x)); x += FFN(LN(x))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl SelfBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, ff: usize) -> Self {
        Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim),
            attn: Attention::new(init, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dim, ff),
        }
    }

    /// `pos`, when given, is added to queries and keys but not to values.
    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx<'_>, x: Var, pos: Option<Var>) -> Var {
        let n = self.ln1.forward(tape, ctx, x);
        let qk = match pos {
            Some(p) => tape.add(n, p),
            None => n,
        };
        let (a, _) = self.attn.forward(tape, ctx, qk, qk, n, AttnKind::Softmax);
        let a = ctx.dropout(tape, a);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, ctx, x);
        let f = self.ffn.forward(tape, ctx, n);
        let f = ctx.dropout(tape, f);
        tape.add(x, f)
    }
}

/// Pre-norm cross-attention block: `x += CA(LN(x), keys, values); x += FFN(LN(x))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, ff: usize) -> Self {
        Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim),
            attn: Attention::new(init, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dim, ff),
        }
    }

    /// Returns the updated queries and the stacked attention weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx<'_>,
        x: Var,
        keys: Var,
        values: Var,
        kind: AttnKind,
    ) -> (Var, Var) {
        let n = self.ln1.forward(tape, ctx, x);
        let (a, p) = self.attn.forward(tape, ctx, n, keys, values, kind);
        let a = ctx.dropout(tape, a);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, ctx, x);
        let f = self.ffn.forward(tape, ctx, n);
        let f = ctx.dropout(tape, f);
        (tape.add(x, f), p)
    }
}

/// Pre-norm decoder layer: self-attention, cross-attention, FFN.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, ff: usize) -> Self {
        Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim),
            self_attn: Attention::new(init, &format!("{name}.self"), dim, heads),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim),
            cross_attn: Attention::new(init, &format!("{name}.cross"), dim, heads),
            ln3: LayerNorm::new(init, &format!("{name}.ln3"), dim),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dim, ff),
        }
    }

    /// `query_pos` is added to query-side inputs, `memory_pos` to memory keys.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx<'_>,
        x: Var,
        query_pos: Var,
        memory: Var,
        memory_pos: Var,
    ) -> Var {
        let n = self.ln1.forward(tape, ctx, x);
        let qk = tape.add(n, query_pos);
        let (a, _) = self.self_attn.forward(tape, ctx, qk, qk, n, AttnKind::Softmax);
        let a = ctx.dropout(tape, a);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, ctx, x);
        let q = tape.add(n, query_pos);
        let k = tape.add(memory, memory_pos);
        let (a, _) = self.cross_attn.forward(tape, ctx, q, k, memory, AttnKind::Softmax);
        let a = ctx.dropout(tape, a);
        let x = tape.add(x, a);
        let n = self.ln3.forward(tape, ctx, x);
        let f = self.ffn.forward(tape, ctx, n);
        let f = ctx.dropout(tape, f);
        tape.add(x, f)
    }
}

/// Sinusoidal position codes for `len` positions in `dim` dimensions.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            m.set(pos, 2 * i, (pos as f64 * freq).sin());
            m.set(pos, 2 * i + 1, (pos as f64 * freq).cos());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_created_in_order_and_named() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 1);
        let lin = Linear::new(&mut init, "proj", 3, 2);
        assert_eq!(store.name(lin.w), "proj.w");
        assert_eq!(store.value(lin.b).shape(), (1, 2));
        assert_eq!(store.numel(), 8);
        assert_eq!(store.find("proj.b"), Some(lin.b));
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut store = ParamStore::new();
            let mut init = Init::new(&mut store, 9);
            SelfBlock::new(&mut init, "b", 8, 2, 16);
            store
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let store = ParamStore::new();
        let mut ctx = Ctx::eval(&store);
        let mut tape = Tape::new();
        let x = tape.input(Matrix::filled(2, 2, 1.0));
        assert_eq!(ctx.dropout(&mut tape, x), x);
    }

    #[test]
    fn positions_are_bounded() {
        let p = sinusoidal_positions(10, 8);
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p.row(0)[1], 1.0);
    }
}
