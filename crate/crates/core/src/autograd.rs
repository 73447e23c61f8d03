//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! Every node records its value, its input nodes, and a boxed [`Backward`]
//! rule. Loss modules plug their own fused rules in through
//! [`Graph::apply`]; the layer primitives the encoder needs live here.

use crate::tensor::{SparseMatrix, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local derivative rule of one operation.
pub trait Backward {
    /// Maps the gradient of the output to one gradient per input. `None`
    /// means no contribution.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, rule: Option<Box<dyn Backward>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a custom operation whose forward value was computed by the caller.
    pub fn apply(&mut self, inputs: &[Var], value: Tensor, rule: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let rule: Option<Box<dyn Backward>> = if requires_grad { Some(Box::new(rule)) } else { None };
        self.push(value, inputs.to_vec(), rule, requires_grad)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = shapes[loss.0];
        grads[loss.0] = Some(Tensor::full(r, c, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = &node.rule else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let local = rule.backward(&inputs, &node.value, &grad);
            debug_assert_eq!(local.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), shapes[input.0], "gradient shape for node {}", input.0);
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(grad);
        }
        Gradients { grads, shapes }
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.apply(&[a, b], value, MatMul)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.apply(&[a, b], value, MatMulNt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.apply(&[a, b], value, Add)
    }

    /// Adds a `1 × n` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, y) in value.row_mut(i).iter_mut().zip(b.row(0)) {
                *x += y;
            }
        }
        self.apply(&[a, bias], value, AddRow)
    }

    /// Adds `tile` (`T × n`) to each consecutive block of `T` rows of `a`.
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Var {
        let t = self.value(tile);
        let period = t.rows();
        assert_eq!(self.value(a).rows() % period, 0, "add_tiled period mismatch");
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, y) in value.row_mut(i).iter_mut().zip(t.row(i % period)) {
                *x += y;
            }
        }
        self.apply(&[a, tile], value, AddTiled { period })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.apply(&[a], value, Scale(c))
    }

    /// Elementwise product with a constant tensor (masks, noise).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Var {
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(k.data()) {
            *x *= y;
        }
        self.apply(&[a], value, MulConst(k))
    }

    /// Row lookup (embedding lookup, row selection).
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let value = self.value(table).gather_rows(&idx);
        let rows = self.value(table).rows();
        self.apply(&[table], value, Gather { idx, rows })
    }

    /// `m · h` for a constant sparse `m`.
    pub fn spmm(&mut self, m: &SparseMatrix, h: Var) -> Var {
        let value = m.matmul(self.value(h));
        self.apply(&[h], value, SpMm(m.clone()))
    }

    /// Row-wise layer normalisation with learned gain and bias (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-6;
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = xv.cols();
        let mut xhat = Tensor::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut value = Tensor::zeros(xv.rows(), n);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + EPS).sqrt();
            inv_std.push(s);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * s;
                xhat.set(i, j, h);
                value.set(i, j, h * g.get(0, j) + b.get(0, j));
            }
        }
        self.apply(&[x, gain, bias], value, LayerNorm { xhat, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.apply(&[x], value, Gelu)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.apply(&[x], value, Clamp { lo, hi })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.apply(&[x], value, Exp)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Masked multi-head scaled dot-product attention over sequences of
    /// `seq_len` rows. `allowed(t, j)` for sequence `b` is read from `mask`
    /// at `b·T·T + t·T + j`; every query must allow at least one key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize, mask: &[bool]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        assert_eq!(d % heads, 0, "model width must divide into heads");
        assert_eq!(rows % seq_len, 0);
        let batch = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = Tensor::zeros(rows, d);
        let mut scores = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for t in 0..seq_len {
                    let qi = &qv.row(b * seq_len + t)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq_len {
                        if mask[(b * seq_len + t) * seq_len + j] {
                            let kj = &kv.row(b * seq_len + j)[cols.clone()];
                            scores[j] = crate::tensor::dot(qi, kj) * scale;
                            max = max.max(scores[j]);
                        } else {
                            scores[j] = f64::NEG_INFINITY;
                        }
                    }
                    assert!(max.is_finite(), "attention row without any allowed key");
                    let base = ((b * heads + h) * seq_len + t) * seq_len;
                    let mut z = 0.0;
                    for j in 0..seq_len {
                        let e = if scores[j].is_finite() {
                            (scores[j] - max).exp()
                        } else {
                            0.0
                        };
                        probs[base + j] = e;
                        z += e;
                    }
                    let o = &mut out.row_mut(b * seq_len + t)[cols.clone()];
                    for j in 0..seq_len {
                        let p = probs[base + j] / z;
                        probs[base + j] = p;
                        if p != 0.0 {
                            let vj = &vv.row(b * seq_len + j)[cols.clone()];
                            for (x, y) in o.iter_mut().zip(vj) {
                                *x += p * y;
                            }
                        }
                    }
                }
            }
        }
        self.apply(
            &[q, k, v],
            out,
            Attention {
                probs,
                heads,
                seq_len,
                scale,
            },
        )
    }

    /// Sum of 1×1 scalars, each with a weight.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let value = terms.iter().map(|&(w, v)| w * self.value(v).item()).sum();
        let weights = terms.iter().map(|&(w, _)| w).collect();
        let inputs: Vec<Var> = terms.iter().map(|&(_, v)| v).collect();
        self.apply(&inputs, Tensor::scalar(value), WeightedSum(weights))
    }
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct MatMul;
impl Backward for MatMul {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.matmul_nt(i[1])), Some(i[0].matmul_tn(g))]
    }
}

struct MatMulNt;
impl Backward for MatMulNt {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        // out = a bᵀ: da = g b, db = gᵀ a
        vec![Some(g.matmul(i[1])), Some(g.matmul_tn(i[0]))]
    }
}

struct Add;
impl Backward for Add {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct AddRow;
impl Backward for AddRow {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut db = Tensor::zeros(1, g.cols());
        for i in 0..g.rows() {
            for (x, y) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                *x += y;
            }
        }
        vec![Some(g.clone()), Some(db)]
    }
}

struct AddTiled {
    period: usize,
}
impl Backward for AddTiled {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut dt = Tensor::zeros(self.period, g.cols());
        for i in 0..g.rows() {
            for (x, y) in dt.row_mut(i % self.period).iter_mut().zip(g.row(i)) {
                *x += y;
            }
        }
        vec![Some(g.clone()), Some(dt)]
    }
}

struct Scale(f64);
impl Backward for Scale {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.scale(self.0))]
    }
}

struct MulConst(Tensor);
impl Backward for MulConst {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut d = g.clone();
        for (x, y) in d.data_mut().iter_mut().zip(self.0.data()) {
            *x *= y;
        }
        vec![Some(d)]
    }
}

struct Gather {
    idx: Vec<usize>,
    rows: usize,
}
impl Backward for Gather {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut d = Tensor::zeros(self.rows, g.cols());
        for (r, &i) in self.idx.iter().enumerate() {
            for (x, y) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                *x += y;
            }
        }
        vec![Some(d)]
    }
}

struct SpMm(SparseMatrix);
impl Backward for SpMm {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(self.0.matmul_transposed(g))]
    }
}

struct LayerNorm {
    xhat: Tensor,
    inv_std: Vec<f64>,
}
impl Backward for LayerNorm {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let gain = i[1];
        let (rows, n) = g.shape();
        let mut dx = Tensor::zeros(rows, n);
        let mut dgain = Tensor::zeros(1, n);
        let mut dbias = Tensor::zeros(1, n);
        let mut dxhat = vec![0.0; n];
        for r in 0..rows {
            let gr = g.row(r);
            let xh = self.xhat.row(r);
            for j in 0..n {
                dgain.data_mut()[j] += gr[j] * xh[j];
                dbias.data_mut()[j] += gr[j];
                dxhat[j] = gr[j] * gain.get(0, j);
            }
            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            let s = self.inv_std[r];
            for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = s * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        vec![Some(dx), Some(dgain), Some(dbias)]
    }
}

struct Gelu;
impl Backward for Gelu {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut d = g.clone();
        for (x, &v) in d.data_mut().iter_mut().zip(i[0].data()) {
            *x *= gelu_grad(v);
        }
        vec![Some(d)]
    }
}

struct Clamp {
    lo: f64,
    hi: f64,
}
impl Backward for Clamp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut d = g.clone();
        for (x, &v) in d.data_mut().iter_mut().zip(i[0].data()) {
            if v < self.lo || v > self.hi {
                *x = 0.0;
            }
        }
        vec![Some(d)]
    }
}

struct Exp;
impl Backward for Exp {
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut d = g.clone();
        for (x, &y) in d.data_mut().iter_mut().zip(out.data()) {
            *x *= y;
        }
        vec![Some(d)]
    }
}

struct WeightedSum(Vec<f64>);
impl Backward for WeightedSum {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let g = g.item();
        self.0.iter().map(|&w| Some(Tensor::scalar(w * g))).collect()
    }
}

struct Attention {
    probs: Vec<f64>,
    heads: usize,
    seq_len: usize,
    scale: f64,
}
impl Backward for Attention {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (q, k, v) = (i[0], i[1], i[2]);
        let (rows, d) = q.shape();
        let t_len = self.seq_len;
        let batch = rows / t_len;
        let dh = d / self.heads;
        let mut dq = Tensor::zeros(rows, d);
        let mut dk = Tensor::zeros(rows, d);
        let mut dv = Tensor::zeros(rows, d);
        let mut dp = vec![0.0; t_len];
        for b in 0..batch {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                for t in 0..t_len {
                    let base = ((b * self.heads + h) * t_len + t) * t_len;
                    let p = &self.probs[base..base + t_len];
                    let go = &g.row(b * t_len + t)[cols.clone()];
                    let mut weighted = 0.0;
                    for j in 0..t_len {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &v.row(b * t_len + j)[cols.clone()];
                        dp[j] = crate::tensor::dot(go, vj);
                        weighted += p[j] * dp[j];
                        for (x, y) in dv.row_mut(b * t_len + j)[cols.clone()].iter_mut().zip(go) {
                            *x += p[j] * y;
                        }
                    }
                    for j in 0..t_len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * self.scale;
                        let kj: Vec<f64> = k.row(b * t_len + j)[cols.clone()].to_vec();
                        let qt: Vec<f64> = q.row(b * t_len + t)[cols.clone()].to_vec();
                        for (x, y) in dq.row_mut(b * t_len + t)[cols.clone()].iter_mut().zip(&kj) {
                            *x += ds * y;
                        }
                        for (x, y) in dk.row_mut(b * t_len + j)[cols.clone()].iter_mut().zip(&qt) {
                            *x += ds * y;
                        }
                    }
                }
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }
}

/// Central finite-difference gradient of `f` with respect to `x`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Gradient norms below this count as vanishing in [`relative_error`].
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖, GRADIENT_FLOOR)`. The floor matters only for
/// parameters the loss does not depend on (such as attention key biases),
/// where finite differences see nothing but rounding noise.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(GRADIENT_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = build(&mut g, xv);
        // reduce to a scalar with fixed weights so every element matters
        let w = Tensor::from_fn(g.value(y).rows(), g.value(y).cols(), |i, j| {
            0.3 + 0.1 * i as f64 - 0.07 * j as f64
        });
        let yw = g.mul_const(y, w.clone());
        let ones_r = g.constant(Tensor::full(1, g.value(yw).rows(), 1.0));
        let s = g.matmul(ones_r, yw);
        let ones_c = g.constant(Tensor::full(g.value(s).cols(), 1, 1.0));
        let loss = g.matmul(s, ones_c);
        let analytic = g.backward(loss).get_or_zero(xv);
        let numeric = finite_difference(&x, 1e-5, |p| {
            let mut g = Graph::new();
            let pv = g.constant(p.clone());
            let y = build(&mut g, pv);
            g.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    fn sample(r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin())
    }

    #[test]
    fn layer_norm_gradient() {
        let gain = sample(1, 5).map(|v| 1.0 + v);
        let bias = sample(1, 5);
        check(sample(4, 5), |g, x| {
            let gv = g.constant(gain.clone());
            let bv = g.constant(bias.clone());
            g.layer_norm(x, gv, bv)
        });
    }

    #[test]
    fn gelu_and_exp_gradient() {
        check(sample(3, 3), |g, x| {
            let y = g.gelu(x);
            g.exp(y)
        });
    }

    #[test]
    fn attention_gradient_each_input() {
        let t = 4;
        let mask: Vec<bool> = (0..2 * t * t).map(|k| (k % t) <= (k / t) % t).collect();
        let other = sample(8, 4).map(|v| 0.5 * v + 0.1);
        for which in 0..3 {
            let other = other.clone();
            let mask = mask.clone();
            check(sample(8, 4), move |g, x| {
                let o = g.constant(other.clone());
                let (q, k, v) = match which {
                    0 => (x, o, o),
                    1 => (o, x, o),
                    _ => (o, o, x),
                };
                g.attention(q, k, v, 2, t, &mask)
            });
        }
    }

    #[test]
    fn gather_tiled_row_and_matmul_gradients() {
        let b = sample(3, 2);
        check(sample(5, 3), |g, x| {
            let rows = g.gather(x, vec![4, 0, 0, 2]);
            let bias = g.constant(Tensor::from_rows(&[&[0.1, 0.2, 0.3]]));
            let rows = g.add_row(rows, bias);
            let tile = g.constant(sample(2, 3));
            let rows = g.add_tiled(rows, tile);
            let bv = g.constant(b.clone());
            g.matmul(rows, bv)
        });
        check(sample(3, 4), |g, x| {
            let a = g.constant(sample(5, 4));
            g.matmul_nt(a, x)
        });
    }

    #[test]
    fn spmm_gradient() {
        let m = SparseMatrix::from_rows(
            3,
            vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 1.0)], vec![(0, 0.2), (2, 0.8)]],
        );
        check(sample(3, 2), move |g, x| g.spmm(&m, x));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.weighted_sum(&[(3.0, x), (5.0, d)]);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
        assert_eq!(g.value(y).item(), 16.0);
    }
}
