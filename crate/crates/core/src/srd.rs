//! Disentanglement objective for the two encoder branches.
//!
//! * difference term: KL of both posteriors to `N(0, I)` plus the joint
//!   reconstruction likelihood of the summed representation `Z^s + Z^e`;
//! * similarity term: a Jensen-Shannon mutual information bound between the
//!   shared representation and the server's global representation, with the
//!   exclusive representation as the negative sample;
//! * exclusive reconstruction term: next-item likelihood from `Z^e` alone.
//!
//! Every term is available both as a plain function on tensors and as a
//! fused node on a [`Graph`] for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, Graph, Var};
use crate::encoder::{LatentBundle, LatentDist, SequenceBatch};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{dot, Tensor};

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "lambda")]
    pub lambda_: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            gamma: 20.0,
            lambda_: 5.0,
            tau: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.lambda_];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Bilinear critic `T(a, b) = aᵀ W b + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub w: Tensor,
    pub bias: Tensor,
}

impl Discriminator {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.1 / (dim as f64).sqrt();
        Self {
            w: Tensor::from_fn(dim, dim, |_, _| std * rng.sample::<f64, _>(StandardNormal)),
            bias: Tensor::zeros(1, 1),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            w: Tensor::zeros(dim, dim),
            bias: Tensor::zeros(1, 1),
        }
    }

    pub fn score(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = b.len();
        let mut s = self.bias.item();
        for (i, ai) in a.iter().enumerate() {
            s += ai * dot(&self.w.data()[i * d..(i + 1) * d], b);
        }
        s
    }

    pub fn to_param_set(&self, prefix: &str) -> ParamSet {
        ParamSet::from_named([
            (format!("{prefix}w"), self.w.clone()),
            (format!("{prefix}bias"), self.bias.clone()),
        ])
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.bias]
    }

    pub fn bind(&self, g: &mut Graph) -> DiscriminatorVars {
        DiscriminatorVars {
            w: g.param(self.w.clone()),
            bias: g.param(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    pub w: Var,
    pub bias: Var,
}

/// Residual prediction layer `f(Z) = Z + gelu(Z W₁ + b₁) W₂ + b₂`; logits are
/// inner products of `f(Z)` rows with an item embedding table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PredictorParams {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (dim as f64).sqrt();
        let mut normal = |r, c| Tensor::from_fn(r, c, |_, _| std * rng.sample::<f64, _>(StandardNormal));
        Self {
            w1: normal(dim, dim),
            b1: Tensor::zeros(1, dim),
            w2: normal(dim, dim),
            b2: Tensor::zeros(1, dim),
        }
    }

    pub fn to_param_set(&self, prefix: &str) -> ParamSet {
        ParamSet::from_named([
            (format!("{prefix}w1"), self.w1.clone()),
            (format!("{prefix}b1"), self.b1.clone()),
            (format!("{prefix}w2"), self.w2.clone()),
            (format!("{prefix}b2"), self.b2.clone()),
        ])
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PredictorVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        PredictorVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    /// `f(Z)` row by row on plain tensors.
    pub fn transform(&self, z: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = vars.transform(&mut g, zv);
        g.value(out).clone()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PredictorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl PredictorVars {
    pub fn transform(&self, g: &mut Graph, z: Var) -> Var {
        let h = g.matmul(z, self.w1);
        let h = g.add_row(h, self.b1);
        let h = g.gelu(h);
        let h = g.matmul(h, self.w2);
        let h = g.add_row(h, self.b2);
        g.add(z, h)
    }
}

// ---- KL ------------------------------------------------------------------

struct KlRule {
    rows: Vec<usize>,
}

impl Backward for KlRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (mu, sigma) = (inputs[0], inputs[1]);
        let scale = grad.item() / self.rows.len() as f64;
        let mut dmu = Tensor::zeros(mu.rows(), mu.cols());
        let mut dsigma = Tensor::zeros(mu.rows(), mu.cols());
        for &r in &self.rows {
            for (j, (m, s)) in mu.row(r).iter().zip(sigma.row(r)).enumerate() {
                dmu.row_mut(r)[j] = scale * m;
                dsigma.row_mut(r)[j] = scale * (s - 1.0 / s);
            }
        }
        vec![Some(dmu), Some(dsigma)]
    }
}

fn kl_value(mu: &Tensor, sigma: &Tensor, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows
        .iter()
        .map(|&r| {
            mu.row(r)
                .iter()
                .zip(sigma.row(r))
                .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
                .sum::<f64>()
        })
        .sum();
    total / rows.len() as f64
}

/// Mean over the selected rows of `KL(N(μ, σ²) ‖ N(0, I))`.
pub fn kl_var(g: &mut Graph, mu: Var, sigma: Var, rows: &[usize]) -> Var {
    let value = kl_value(g.value(mu), g.value(sigma), rows);
    g.apply(&[mu, sigma], Tensor::scalar(value), KlRule { rows: rows.to_vec() })
}

/// Mean over unmasked positions of `Σ_dim ½(μ² + σ² − 1 − 2 ln σ)`.
pub fn kl_to_standard_normal(dist: &LatentDist, mask: &[bool]) -> Result<f64> {
    if mask.len() != dist.mu.rows() || dist.mu.shape() != dist.sigma.shape() {
        return Err(Error::Shape("mask and posterior shapes disagree".into()));
    }
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    Ok(kl_value(&dist.mu, &dist.sigma, &rows))
}

// ---- reconstruction ------------------------------------------------------

struct SoftmaxXent {
    targets: Vec<usize>,
}

impl Backward for SoftmaxXent {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let logits = inputs[0];
        let scale = grad.item() / self.targets.len() as f64;
        let mut d = Tensor::zeros(logits.rows(), logits.cols());
        for (r, &t) in self.targets.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let out = d.row_mut(r);
            for (o, v) in out.iter_mut().zip(row) {
                *o = scale * (v - max).exp() / z;
            }
            out[t] -= scale;
        }
        vec![Some(d)]
    }
}

/// Mean softmax cross-entropy of `logits` rows against `targets`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum();
    total / targets.len() as f64
}

pub fn xent_var(g: &mut Graph, logits: Var, targets: Vec<usize>) -> Var {
    let value = softmax_cross_entropy(g.value(logits), &targets);
    g.apply(&[logits], Tensor::scalar(value), SoftmaxXent { targets })
}

/// Predictor input slots and their next-item targets: slot `t−1` predicts
/// `s_t` wherever both positions hold real items.
pub fn next_item_pairs(batch: &SequenceBatch) -> (Vec<usize>, Vec<usize>) {
    let t = batch.seq_len();
    let mut slots = Vec::new();
    let mut targets = Vec::new();
    for b in 0..batch.batch_size() {
        for p in 1..t {
            let (prev, cur) = (b * t + p - 1, b * t + p);
            if batch.is_real(prev) && batch.is_real(cur) {
                slots.push(prev);
                targets.push(batch.items()[cur]);
            }
        }
    }
    (slots, targets)
}

/// Autoregressive next-item NLL of `z` on the graph; logits tied to `item_emb`.
pub fn reconstruction_var(
    g: &mut Graph,
    z: Var,
    batch: &SequenceBatch,
    predictor: &PredictorVars,
    item_emb: Var,
) -> Result<Var> {
    let (slots, targets) = next_item_pairs(batch);
    if slots.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let vocab = g.value(item_emb).rows();
    if let Some(&index) = targets.iter().find(|&&i| i >= vocab) {
        return Err(Error::Index { index, vocab });
    }
    let rows = g.gather(z, slots);
    let h = predictor.transform(g, rows);
    let logits = g.matmul_nt(h, item_emb);
    Ok(xent_var(g, logits, targets))
}

/// Next-item NLL of representations `z` (rows are `batch·T` slots).
pub fn reconstruction_nll(
    z: &Tensor,
    batch: &SequenceBatch,
    theta: &PredictorParams,
    item_emb: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = theta.bind(&mut g, false);
    let zv = g.constant(z.clone());
    let e = g.constant(item_emb.clone());
    let loss = reconstruction_var(&mut g, zv, batch, &p, e)?;
    Ok(g.value(loss).item())
}

// ---- JSD similarity ------------------------------------------------------

struct JsdRule;

/// Per-row bilinear scores `aᵢᵀ W bᵢ + c`.
fn bilinear_rows(a: &Tensor, w: &Tensor, b: &Tensor, c: f64) -> Vec<f64> {
    let wb = b.matmul_nt(w); // row i = W bᵢ
    (0..a.rows()).map(|i| dot(a.row(i), wb.row(i)) + c).collect()
}

impl Backward for JsdRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let [zs, zneg, zg, w, bias] = [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]];
        let n = zs.rows() as f64;
        let c = bias.item();
        let tp = bilinear_rows(zs, w, zg, c);
        let tn = bilinear_rows(zneg, w, zg, c);
        // dÎ/dt for positives and negatives
        let gp: Vec<f64> = tp.iter().map(|&t| grad.item() * sigmoid(-t) / n).collect();
        let gn: Vec<f64> = tn.iter().map(|&t| -grad.item() * sigmoid(t) / n).collect();
        let wzg = zg.matmul_nt(w); // W zgᵢ
        let wt_zs = zs.matmul(w); // Wᵀ zsᵢ as rows
        let wt_zn = zneg.matmul(w);
        let d = zs.cols();
        let mut dzs = Tensor::zeros(zs.rows(), d);
        let mut dzn = Tensor::zeros(zs.rows(), d);
        let mut dzg = Tensor::zeros(zs.rows(), d);
        let mut dw = Tensor::zeros(d, d);
        for i in 0..zs.rows() {
            for j in 0..d {
                dzs.row_mut(i)[j] = gp[i] * wzg.get(i, j);
                dzn.row_mut(i)[j] = gn[i] * wzg.get(i, j);
                dzg.row_mut(i)[j] = gp[i] * wt_zs.get(i, j) + gn[i] * wt_zn.get(i, j);
            }
            for r in 0..d {
                let coef = gp[i] * zs.get(i, r) + gn[i] * zneg.get(i, r);
                if coef != 0.0 {
                    for (o, v) in dw.row_mut(r).iter_mut().zip(zg.row(i)) {
                        *o += coef * v;
                    }
                }
            }
        }
        let dbias = Tensor::scalar(gp.iter().sum::<f64>() + gn.iter().sum::<f64>());
        vec![Some(dzs), Some(dzn), Some(dzg), Some(dw), Some(dbias)]
    }
}

fn jsd_value(zs: &Tensor, zneg: &Tensor, zg: &Tensor, w: &Tensor, bias: f64) -> f64 {
    let n = zs.rows() as f64;
    let pos: f64 = bilinear_rows(zs, w, zg, bias).iter().map(|&t| -softplus(-t)).sum();
    let neg: f64 = bilinear_rows(zneg, w, zg, bias).iter().map(|&t| softplus(t)).sum();
    (pos - neg) / n
}

fn check_jsd_shapes(zs: &Tensor, zg: &Tensor, zneg: &Tensor, w: &Tensor) -> Result<()> {
    if zs.rows() == 0 {
        return Err(Error::Shape("similarity term needs at least one user".into()));
    }
    if zs.shape() != zg.shape() || zs.shape() != zneg.shape() || w.shape() != (zs.cols(), zs.cols()) {
        return Err(Error::Shape(format!(
            "similarity inputs disagree: shared {:?}, global {:?}, negative {:?}, weight {:?}",
            zs.shape(),
            zg.shape(),
            zneg.shape(),
            w.shape()
        )));
    }
    Ok(())
}

/// The JSD bound `Î`; `zneg` should already be detached when its encoder
/// must not receive this gradient.
pub fn jsd_var(g: &mut Graph, zs: Var, zneg: Var, zg: Var, disc: DiscriminatorVars) -> Result<Var> {
    let (a, n, gl, w) = (g.value(zs), g.value(zneg), g.value(zg), g.value(disc.w));
    check_jsd_shapes(a, gl, n, w)?;
    let value = jsd_value(a, n, gl, w, g.value(disc.bias).item());
    Ok(g.apply(&[zs, zneg, zg, disc.w, disc.bias], Tensor::scalar(value), JsdRule))
}

/// `Î = mean(−sp(−T(z_s, z_g))) − mean(sp(T(z_neg, z_g)))`.
pub fn jsd_similarity(
    z_shared_user: &Tensor,
    z_global_user: &Tensor,
    z_neg_user: &Tensor,
    disc: &Discriminator,
) -> Result<f64> {
    check_jsd_shapes(z_shared_user, z_global_user, z_neg_user, &disc.w)?;
    Ok(jsd_value(
        z_shared_user,
        z_neg_user,
        z_global_user,
        &disc.w,
        disc.bias.item(),
    ))
}

// ---- combined objective --------------------------------------------------

/// Values of every loss term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl_shared: f64,
    pub kl_exclusive: f64,
    /// Reconstruction inside the α bracket: `NLL(Z^s + Z^e)`, or
    /// `NLL(Z^s) + NLL(Z^e)` when each branch keeps its own ELBO.
    pub joint_nll: f64,
    /// The JSD bound `Î` (the similarity loss is `−Î`); zero when skipped.
    pub jsd: f64,
    pub exclusive_nll: f64,
    pub infonce: f64,
}

impl LossBreakdown {
    pub fn difference(&self) -> f64 {
        self.kl_shared + self.kl_exclusive + self.joint_nll
    }

    /// `α·L_diff − β·Î + γ·L_recon`.
    pub fn disentanglement(&self, w: &LossWeights) -> f64 {
        w.alpha * self.kl_shared + w.alpha * self.kl_exclusive + w.alpha * self.joint_nll - w.beta * self.jsd
            + w.gamma * self.exclusive_nll
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        self.disentanglement(w) + w.lambda_ * self.infonce
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, c: f64) {
        self.kl_shared += c * other.kl_shared;
        self.kl_exclusive += c * other.kl_exclusive;
        self.joint_nll += c * other.joint_nll;
        self.jsd += c * other.jsd;
        self.exclusive_nll += c * other.exclusive_nll;
        self.infonce += c * other.infonce;
    }
}

/// Graph nodes of the individual terms.
#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub kl_shared: Var,
    pub kl_exclusive: Var,
    pub joint_nll: Var,
    pub jsd: Option<Var>,
    pub exclusive_nll: Var,
    pub infonce: Option<Var>,
}

impl TermVars {
    /// Weighted total on the graph (terms with zero weight are left out) and
    /// the breakdown of term values.
    pub fn combine(&self, g: &mut Graph, w: &LossWeights) -> (Var, LossBreakdown) {
        let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let breakdown = LossBreakdown {
            kl_shared: g.value(self.kl_shared).item(),
            kl_exclusive: g.value(self.kl_exclusive).item(),
            joint_nll: g.value(self.joint_nll).item(),
            jsd: val(g, self.jsd),
            exclusive_nll: g.value(self.exclusive_nll).item(),
            infonce: val(g, self.infonce),
        };
        let mut terms = Vec::new();
        let mut push = |c: f64, v: Option<Var>| {
            if let (true, Some(v)) = (c != 0.0, v) {
                terms.push((c, v));
            }
        };
        push(w.alpha, Some(self.kl_shared));
        push(w.alpha, Some(self.kl_exclusive));
        push(w.alpha, Some(self.joint_nll));
        push(-w.beta, self.jsd);
        push(w.gamma, Some(self.exclusive_nll));
        push(w.lambda_, self.infonce);
        let total = if terms.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            g.weighted_sum(&terms)
        };
        (total, breakdown)
    }
}

/// Global representation input to the similarity term.
pub struct GlobalTarget<'a> {
    /// One row per sequence of the batch: the global representation at the final position.
    pub z_global_user: &'a Tensor,
    pub disc: &'a Discriminator,
}

/// `L_disen` on fixed tensors: sampled representations in `bundle`,
/// posteriors in `shared`/`exclusive`. Returns the value and its breakdown
/// (the InfoNCE entry stays zero).
#[allow(clippy::too_many_arguments)]
pub fn disentanglement_loss(
    bundle: &LatentBundle,
    shared: &LatentDist,
    exclusive: &LatentDist,
    batch: &SequenceBatch,
    global: Option<GlobalTarget<'_>>,
    theta: &PredictorParams,
    item_emb: &Tensor,
    w: &LossWeights,
) -> Result<(f64, LossBreakdown)> {
    w.validate()?;
    let mut g = Graph::new();
    let rows = batch.real_slots();
    let c = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
    let (mus, sis, mue, sie) = (
        c(&mut g, &shared.mu),
        c(&mut g, &shared.sigma),
        c(&mut g, &exclusive.mu),
        c(&mut g, &exclusive.sigma),
    );
    let zs = c(&mut g, &bundle.z_shared);
    let ze = c(&mut g, &bundle.z_exclusive);
    let e = c(&mut g, item_emb);
    let p = theta.bind(&mut g, false);
    let kl_shared = kl_var(&mut g, mus, sis, &rows);
    let kl_exclusive = kl_var(&mut g, mue, sie, &rows);
    let joint = g.add(zs, ze);
    let joint_nll = reconstruction_var(&mut g, joint, batch, &p, e)?;
    let exclusive_nll = reconstruction_var(&mut g, ze, batch, &p, e)?;
    let jsd = match global {
        Some(t) => {
            let last = batch.last_slots();
            let a = c(&mut g, &bundle.z_shared.gather_rows(&last));
            let n = c(&mut g, &bundle.user_vec);
            let gl = c(&mut g, t.z_global_user);
            let d = t.disc.bind(&mut g);
            Some(jsd_var(&mut g, a, n, gl, d)?)
        }
        None => None,
    };
    let terms = TermVars {
        kl_shared,
        kl_exclusive,
        joint_nll,
        jsd,
        exclusive_nll,
        infonce: None,
    };
    let (total, breakdown) = terms.combine(&mut g, w);
    Ok((g.value(total).item(), breakdown))
}
