//! Variational graph self-attention encoder.
//!
//! One branch maps a left-padded batch of sequences to a diagonal Gaussian
//! per position:
//!
//! 1. relational item embeddings: `H⁰` propagated `L` times through the
//!    row-normalised item graph, averaged over layers `0..=L`;
//! 2. input row = item embedding + positional embedding + relational embedding;
//! 3. a pre-norm causal multi-head self-attention stack;
//! 4. a shared trunk output feeding a mean head and a clamped log-variance head.
//!
//! Each client holds two branches with identical shapes: the shared one,
//! which the server averages, and the exclusive one, which stays local.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datasets::{ItemGraph, PAD};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Log-variance clamp; keeps σ within `[e⁻⁴, e⁴]`.
pub const LOGVAR_BOUND: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub vocab_size: usize,
    pub dim: usize,
    pub max_len: usize,
    pub gnn_layers: usize,
    pub attn_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl EncoderShape {
    pub fn new(dim: usize, max_len: usize, vocab_size: usize, gnn_layers: usize) -> Self {
        Self {
            vocab_size,
            dim,
            max_len,
            gnn_layers,
            attn_layers: 2,
            heads: 2,
            ffn_dim: dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.dim == 0 || self.max_len == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias", "ff_w1", "ff_b1",
    "ff_w2", "ff_b2",
];

impl AttentionLayer {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff_w1,
            &self.ff_b1,
            &self.ff_w2,
            &self.ff_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
        ]
    }
}

/// Parameters of one encoder branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    pub item_emb: Tensor,
    pub pos_emb: Tensor,
    pub gnn_base_emb: Tensor,
    pub layers: Vec<AttentionLayer>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub logvar_w: Tensor,
    pub logvar_b: Tensor,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

impl EncoderParams {
    /// Deterministic initialisation: embeddings `N(0, 1/d)`, projections
    /// `N(0, 1/fan_in)`, layer-norm gains one, biases zero.
    pub fn init(shape: EncoderShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.dim;
        let emb_std = 1.0 / (d as f64).sqrt();
        let rng = &mut rng;
        let item_emb = normal(rng, shape.vocab_size, d, emb_std);
        let pos_emb = normal(rng, shape.max_len, d, emb_std);
        let gnn_base_emb = normal(rng, shape.vocab_size, d, emb_std);
        let layers = (0..shape.attn_layers)
            .map(|_| AttentionLayer {
                ln1_gain: Tensor::full(1, d, 1.0),
                ln1_bias: Tensor::zeros(1, d),
                wq: normal(rng, d, d, emb_std),
                bq: Tensor::zeros(1, d),
                wk: normal(rng, d, d, emb_std),
                bk: Tensor::zeros(1, d),
                wv: normal(rng, d, d, emb_std),
                bv: Tensor::zeros(1, d),
                wo: normal(rng, d, d, emb_std),
                bo: Tensor::zeros(1, d),
                ln2_gain: Tensor::full(1, d, 1.0),
                ln2_bias: Tensor::zeros(1, d),
                ff_w1: normal(rng, d, shape.ffn_dim, emb_std),
                ff_b1: Tensor::zeros(1, shape.ffn_dim),
                ff_w2: normal(rng, shape.ffn_dim, d, 1.0 / (shape.ffn_dim as f64).sqrt()),
                ff_b2: Tensor::zeros(1, d),
            })
            .collect();
        Ok(Self {
            shape,
            item_emb,
            pos_emb,
            gnn_base_emb,
            layers,
            final_gain: Tensor::full(1, d, 1.0),
            final_bias: Tensor::zeros(1, d),
            mu_w: normal(rng, d, d, emb_std),
            mu_b: Tensor::zeros(1, d),
            logvar_w: normal(rng, d, d, 0.1 * emb_std),
            logvar_b: Tensor::zeros(1, d),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("item_emb".to_owned(), &self.item_emb),
            ("pos_emb".to_owned(), &self.pos_emb),
            ("gnn_base_emb".to_owned(), &self.gnn_base_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.extend([
            ("final_gain".to_owned(), &self.final_gain),
            ("final_bias".to_owned(), &self.final_bias),
            ("mu_w".to_owned(), &self.mu_w),
            ("mu_b".to_owned(), &self.mu_b),
            ("logvar_w".to_owned(), &self.logvar_w),
            ("logvar_b".to_owned(), &self.logvar_b),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.item_emb, &mut self.pos_emb, &mut self.gnn_base_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.mu_w,
            &mut self.mu_b,
            &mut self.logvar_w,
            &mut self.logvar_b,
        ]);
        out
    }

    pub fn to_param_set(&self, prefix: &str) -> ParamSet {
        ParamSet::from_named(
            self.named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("{prefix}{n}"), t.clone())),
        )
    }

    /// Overwrites every tensor from `set` (names with `prefix`); shapes must match.
    pub fn assign_from(&mut self, set: &ParamSet, prefix: &str) -> Result<()> {
        let names: Vec<String> = self
            .named_tensors()
            .into_iter()
            .map(|(n, _)| format!("{prefix}{n}"))
            .collect();
        let mut sources = Vec::with_capacity(names.len());
        for (name, dst) in names.iter().zip(self.named_tensors()) {
            let src = set
                .get(name)
                .ok_or_else(|| Error::Protocol(format!("parameter `{name}` missing")))?;
            if src.shape() != dst.1.shape() {
                return Err(Error::Protocol(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.1.shape()
                )));
            }
            sources.push(src.clone());
        }
        for (dst, src) in self.tensors_mut().into_iter().zip(sources) {
            *dst = src;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Puts every tensor on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let leaves: Vec<Var> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let mut vars = leaves.clone().into_iter();
        let mut next = || vars.next().expect("tensor count");
        let item_emb = next();
        let pos_emb = next();
        let gnn_base_emb = next();
        let layers = (0..self.layers.len())
            .map(|_| {
                let v: Vec<Var> = (0..LAYER_FIELDS.len()).map(|_| next()).collect();
                LayerVars {
                    ln1: (v[0], v[1]),
                    q: (v[2], v[3]),
                    k: (v[4], v[5]),
                    v: (v[6], v[7]),
                    o: (v[8], v[9]),
                    ln2: (v[10], v[11]),
                    ff1: (v[12], v[13]),
                    ff2: (v[14], v[15]),
                }
            })
            .collect();
        EncoderVars {
            shape: self.shape,
            leaves,
            item_emb,
            pos_emb,
            gnn_base_emb,
            layers,
            final_ln: (next(), next()),
            mu: (next(), next()),
            logvar: (next(), next()),
        }
    }
}

struct LayerVars {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    ln2: (Var, Var),
    ff1: (Var, Var),
    ff2: (Var, Var),
}

/// An [`EncoderParams`] bound onto a [`Graph`].
pub struct EncoderVars {
    shape: EncoderShape,
    leaves: Vec<Var>,
    pub item_emb: Var,
    pos_emb: Var,
    gnn_base_emb: Var,
    layers: Vec<LayerVars>,
    final_ln: (Var, Var),
    mu: (Var, Var),
    logvar: (Var, Var),
}

/// Dropout state for a training pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let (r, c) = g.value(x).shape();
        let mask = Tensor::from_fn(r, c, |_, _| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        g.mul_const(x, mask)
    }
}

fn dropout(g: &mut Graph, x: Var, d: &mut Option<Dropout<'_>>) -> Var {
    match d {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

fn linear(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Variables of one branch's posterior.
#[derive(Clone, Copy, Debug)]
pub struct DistVars {
    pub mu: Var,
    pub sigma: Var,
}

impl EncoderVars {
    pub fn shape(&self) -> EncoderShape {
        self.shape
    }

    /// Leaf nodes in [`EncoderParams::named_tensors`] order.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    /// Mean of `H⁰ … H^L` with `H^l = A·H^{l−1}`.
    pub fn relational(&self, g: &mut Graph, graph: &ItemGraph) -> Var {
        let layers = self.shape.gnn_layers;
        if layers == 0 {
            return self.gnn_base_emb;
        }
        let mut h = self.gnn_base_emb;
        let mut terms = vec![h];
        for _ in 0..layers {
            h = g.spmm(graph.adjacency(), h);
            terms.push(h);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t);
        }
        g.scale(acc, 1.0 / (layers + 1) as f64)
    }

    /// Posterior over every position of `batch`, given precomputed relational embeddings.
    pub fn forward(
        &self,
        g: &mut Graph,
        relational: Var,
        batch: &SequenceBatch,
        mut drop: Option<Dropout<'_>>,
    ) -> DistVars {
        let t = batch.seq_len();
        assert_eq!(t, self.shape.max_len, "batch length must equal the encoder length");
        let idx = batch.items().to_vec();
        let e = g.gather(self.item_emb, idx.clone());
        let r = g.gather(relational, idx);
        let x = g.add(e, r);
        let x = g.add_tiled(x, self.pos_emb);
        let mut x = dropout(g, x, &mut drop);
        let mask = batch.attention_mask();
        for layer in &self.layers {
            let h = g.layer_norm(x, layer.ln1.0, layer.ln1.1);
            let q = linear(g, h, layer.q);
            let k = linear(g, h, layer.k);
            let v = linear(g, h, layer.v);
            let a = g.attention(q, k, v, self.shape.heads, t, &mask);
            let a = linear(g, a, layer.o);
            let a = dropout(g, a, &mut drop);
            x = g.add(x, a);
            let h = g.layer_norm(x, layer.ln2.0, layer.ln2.1);
            let f = linear(g, h, layer.ff1);
            let f = g.gelu(f);
            let f = linear(g, f, layer.ff2);
            let f = dropout(g, f, &mut drop);
            x = g.add(x, f);
        }
        let h = g.layer_norm(x, self.final_ln.0, self.final_ln.1);
        let mu = linear(g, h, self.mu);
        let lv = linear(g, h, self.logvar);
        let lv = g.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND);
        let half = g.scale(lv, 0.5);
        let sigma = g.exp(half);
        DistVars { mu, sigma }
    }
}

/// `Z = μ + σ ⊙ ε` on the graph.
pub fn sample_var(g: &mut Graph, dist: DistVars, noise: Tensor) -> Var {
    let scaled = g.mul_const(dist.sigma, noise);
    g.add(dist.mu, scaled)
}

/// Left-padded batch of item sequences flattened to `batch·T` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    seq_len: usize,
    items: Vec<usize>,
}

impl SequenceBatch {
    /// Keeps the most recent `seq_len` items of each sequence and pads on the left.
    pub fn left_padded<S: AsRef<[usize]>>(sequences: &[S], seq_len: usize) -> Self {
        let mut items = Vec::with_capacity(sequences.len() * seq_len);
        for s in sequences {
            let s = s.as_ref();
            let tail = &s[s.len().saturating_sub(seq_len)..];
            items.extend(std::iter::repeat_n(PAD, seq_len - tail.len()));
            items.extend_from_slice(tail);
        }
        Self { seq_len, items }
    }

    pub fn from_padded(seq_len: usize, items: Vec<usize>) -> Result<Self> {
        if seq_len == 0 || !items.len().is_multiple_of(seq_len) {
            return Err(Error::Shape(format!(
                "{} slots do not form rows of {seq_len}",
                items.len()
            )));
        }
        Ok(Self { seq_len, items })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn batch_size(&self) -> usize {
        self.items.len() / self.seq_len
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.items[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn is_real(&self, slot: usize) -> bool {
        self.items[slot] != PAD
    }

    /// Flat slot indices of each sequence's final (most recent) position.
    pub fn last_slots(&self) -> Vec<usize> {
        (0..self.batch_size())
            .map(|b| b * self.seq_len + self.seq_len - 1)
            .collect()
    }

    /// Flat slot indices of all real positions.
    pub fn real_slots(&self) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.is_real(i)).collect()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.items.iter().find(|&&i| i >= vocab) {
            Some(&index) => Err(Error::Index { index, vocab }),
            None => Ok(()),
        }
    }

    /// Causal mask with padded keys hidden; a padded query sees only itself.
    pub fn attention_mask(&self) -> Vec<bool> {
        let t = self.seq_len;
        let mut mask = vec![false; self.items.len() * t];
        for b in 0..self.batch_size() {
            for q in 0..t {
                for k in 0..=q {
                    mask[(b * t + q) * t + k] = k == q || self.is_real(b * t + k);
                }
            }
        }
        mask
    }
}

/// Gaussian posterior per position: rows are `batch·T` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDist {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub seq_len: usize,
}

/// Sampled representations of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle {
    pub z_shared: Tensor,
    pub z_exclusive: Tensor,
    pub z_exclusive_aug: Option<Tensor>,
    /// Row of `z_exclusive` at each sequence's final position.
    pub user_vec: Tensor,
}

impl LatentBundle {
    pub fn new(z_shared: Tensor, z_exclusive: Tensor, z_exclusive_aug: Option<Tensor>, batch: &SequenceBatch) -> Self {
        let user_vec = z_exclusive.gather_rows(&batch.last_slots());
        Self {
            z_shared,
            z_exclusive,
            z_exclusive_aug,
            user_vec,
        }
    }
}

/// Relational item embeddings: mean of `H⁰ … H^L`.
pub fn propagate_graph(graph: &ItemGraph, params: &EncoderParams) -> Result<Tensor> {
    if graph.vocab_size() != params.shape.vocab_size {
        return Err(Error::Shape(format!(
            "graph covers {} items, encoder {}",
            graph.vocab_size(),
            params.shape.vocab_size
        )));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let r = vars.relational(&mut g, graph);
    Ok(g.value(r).clone())
}

/// Runs one branch without recording gradients. `dropout` is applied only when given.
pub fn encode(
    batch: &SequenceBatch,
    graph: &ItemGraph,
    params: &EncoderParams,
    dropout: Option<Dropout<'_>>,
) -> Result<LatentDist> {
    batch.check_vocab(params.shape.vocab_size)?;
    if batch.seq_len() != params.shape.max_len {
        return Err(Error::Shape(format!(
            "batch length {} differs from encoder length {}",
            batch.seq_len(),
            params.shape.max_len
        )));
    }
    if graph.vocab_size() != params.shape.vocab_size {
        return Err(Error::Shape("item graph and encoder vocabularies differ".into()));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let rel = vars.relational(&mut g, graph);
    let d = vars.forward(&mut g, rel, batch, dropout);
    Ok(LatentDist {
        mu: g.value(d.mu).clone(),
        sigma: g.value(d.sigma).clone(),
        seq_len: batch.seq_len(),
    })
}

/// Reparameterised draw `μ + σ ⊙ ε`; `None` noise means `ε = 0`.
pub fn sample(dist: &LatentDist, noise: Option<&Tensor>) -> Result<Tensor> {
    let Some(eps) = noise else {
        return Ok(dist.mu.clone());
    };
    if eps.shape() != dist.mu.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} differs from {:?}",
            eps.shape(),
            dist.mu.shape()
        )));
    }
    let mut z = dist.mu.clone();
    for ((z, s), e) in z.data_mut().iter_mut().zip(dist.sigma.data()).zip(eps.data()) {
        *z += s * e;
    }
    Ok(z)
}

/// Standard-normal noise tensor.
pub fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    normal(rng, rows, cols, 1.0)
}

/// Default-layout branch (two attention layers, two heads).
pub fn init_params(dim: usize, max_len: usize, vocab: usize, gnn_layers: usize, seed: u64) -> Result<EncoderParams> {
    EncoderParams::init(EncoderShape::new(dim, max_len, vocab, gnn_layers), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (EncoderParams, ItemGraph, SequenceBatch) {
        let p = init_params(4, 5, 12, 2, 3).unwrap();
        let graph = ItemGraph::from_sequences(12, [&[1usize, 2, 3, 4][..], &[5, 6, 2][..], &[7, 8, 9, 10, 11][..]]);
        let batch = SequenceBatch::left_padded(&[vec![1, 2, 3], vec![5, 6, 2, 9, 11], vec![4]], 5);
        (p, graph, batch)
    }

    #[test]
    fn identity_graph_and_zero_layers_return_base() {
        let mut p = init_params(4, 5, 12, 3, 1).unwrap();
        let r = propagate_graph(&ItemGraph::identity(12), &p).unwrap();
        assert!(r.max_abs_diff(&p.gnn_base_emb) < 1e-15);
        p.shape.gnn_layers = 0;
        let g = ItemGraph::from_sequences(12, [&[1usize, 2][..]]);
        assert_eq!(propagate_graph(&g, &p).unwrap(), p.gnn_base_emb);
    }

    #[test]
    fn two_item_uniform_graph_one_layer() {
        // vocab {pad, a}; a row of all-uniform weights over two slots
        let mut p = init_params(2, 1, 2, 1, 0).unwrap();
        p.gnn_base_emb = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 6.0]]);
        let g = ItemGraph::from_sequences(2, [&[0usize, 1][..]]);
        let r = propagate_graph(&g, &p).unwrap();
        // A·H⁰ rows are both (2, 4); mean with H⁰ gives (1.5, 3), (2.5, 5)
        let expect = Tensor::from_rows(&[&[1.5, 3.0], &[2.5, 5.0]]);
        assert!(r.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn propagation_is_linear() {
        let (mut p, g, _) = toy();
        let once = propagate_graph(&g, &p).unwrap();
        p.gnn_base_emb = p.gnn_base_emb.scale(2.0);
        let twice = propagate_graph(&g, &p).unwrap();
        assert!(twice.max_abs_diff(&once.scale(2.0)) < 1e-12);
    }

    #[test]
    fn shape_contract_and_seed_sensitivity() {
        let a = init_params(8, 16, 50, 2, 1).unwrap();
        assert_eq!(a.item_emb.shape(), (50, 8));
        assert_eq!(a.pos_emb.shape(), (16, 8));
        assert_eq!(a, init_params(8, 16, 50, 2, 1).unwrap());
        assert_ne!(a.item_emb, init_params(8, 16, 50, 2, 2).unwrap().item_emb);
        assert!(matches!(init_params(0, 16, 50, 2, 1), Err(Error::Config(_))));
        assert!(matches!(init_params(5, 16, 50, 2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn causal_positions_ignore_the_future() {
        let (p, g, _) = toy();
        let base = SequenceBatch::left_padded(&[vec![1, 2, 3, 4, 5]], 5);
        let d0 = encode(&base, &g, &p, None).unwrap();
        for t in 0..4 {
            let mut items = base.items().to_vec();
            for slot in items.iter_mut().skip(t + 1) {
                *slot = (*slot + 5) % 11 + 1;
            }
            let d1 = encode(&SequenceBatch::from_padded(5, items).unwrap(), &g, &p, None).unwrap();
            for s in 0..=t {
                assert_eq!(d0.mu.row(s), d1.mu.row(s), "position {s} after perturbing > {t}");
                assert_eq!(d0.sigma.row(s), d1.sigma.row(s));
            }
        }
    }

    #[test]
    fn all_pad_rows_are_finite_and_sigma_bounded() {
        let (p, g, _) = toy();
        let batch = SequenceBatch::left_padded(&[Vec::<usize>::new(), vec![3]], 5);
        let d = encode(&batch, &g, &p, None).unwrap();
        assert!(d.mu.is_finite() && d.sigma.is_finite());
        let (lo, hi) = ((-LOGVAR_BOUND / 2.0).exp(), (LOGVAR_BOUND / 2.0).exp());
        assert!(d.sigma.data().iter().all(|&s| s >= lo && s <= hi && s > 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic_and_dropout_changes_output() {
        let (p, g, b) = toy();
        let a = encode(&b, &g, &p, None).unwrap();
        assert_eq!(a, encode(&b, &g, &p, None).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dropped = encode(
            &b,
            &g,
            &p,
            Some(Dropout {
                rate: 0.5,
                rng: &mut rng,
            }),
        )
        .unwrap();
        assert_ne!(a.mu, dropped.mu);
    }

    #[test]
    fn out_of_range_item_is_an_index_error() {
        let (p, g, _) = toy();
        let b = SequenceBatch::left_padded(&[vec![12]], 5);
        assert!(matches!(
            encode(&b, &g, &p, None),
            Err(Error::Index { index: 12, vocab: 12 })
        ));
    }

    #[test]
    fn sampling_edge_cases() {
        let dist = LatentDist {
            mu: Tensor::from_rows(&[&[0.5, -1.0]]),
            sigma: Tensor::from_rows(&[&[1e-300, 1e-300]]),
            seq_len: 1,
        };
        assert_eq!(sample(&dist, None).unwrap(), dist.mu);
        let eps = Tensor::from_rows(&[&[3.0, -2.0]]);
        assert!(sample(&dist, Some(&eps)).unwrap().max_abs_diff(&dist.mu) < 1e-250);
        let unit = LatentDist {
            mu: Tensor::zeros(1, 2),
            sigma: Tensor::full(1, 2, 1.0),
            seq_len: 1,
        };
        assert_eq!(sample(&unit, Some(&eps)).unwrap(), eps);
        assert!(sample(&unit, Some(&Tensor::zeros(2, 2))).is_err());
    }

    #[test]
    fn user_vec_is_last_slot_of_exclusive() {
        let b = SequenceBatch::left_padded(&[vec![1, 2], vec![3]], 3);
        let ze = Tensor::from_fn(6, 2, |i, j| (i * 2 + j) as f64);
        let bundle = LatentBundle::new(Tensor::zeros(6, 2), ze.clone(), None, &b);
        assert_eq!(bundle.user_vec.row(0), ze.row(2));
        assert_eq!(bundle.user_vec.row(1), ze.row(5));
    }

    #[test]
    fn param_set_round_trip_through_assign() {
        let a = init_params(4, 5, 12, 2, 1).unwrap();
        let mut b = init_params(4, 5, 12, 2, 9).unwrap();
        b.assign_from(&a.to_param_set("s."), "s.").unwrap();
        assert_eq!(a, b);
        let other = init_params(4, 5, 13, 2, 1).unwrap();
        assert!(b.assign_from(&other.to_param_set("s."), "s.").is_err());
    }
}
