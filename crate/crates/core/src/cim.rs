//! Contrastive objective on the exclusive branch.
//!
//! Each sequence is paired with a copy whose real items are shuffled. The
//! exclusive user vectors of the `N` originals and `N` shuffled copies form
//! `2N` views; every view must pick its partner out of the other `2N − 1`
//! views by cosine similarity (NT-Xent).

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Backward, Graph, Var};
use crate::datasets::PAD;
use crate::encoder::SequenceBatch;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Anchor user vectors and their augmented counterparts, row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
}

impl ContrastiveBatch {
    pub fn new(anchors: Tensor, positives: Tensor) -> Result<Self> {
        if anchors.shape() != positives.shape() || anchors.rows() == 0 {
            return Err(Error::Shape(format!(
                "contrastive views must be non-empty and aligned: {:?} vs {:?}",
                anchors.shape(),
                positives.shape()
            )));
        }
        Ok(Self { anchors, positives })
    }
}

/// Permutes the real positions of every sequence; padding stays in place.
pub fn augment_shuffle(batch: &SequenceBatch, rng: &mut ChaCha8Rng) -> SequenceBatch {
    let t = batch.seq_len();
    let mut items = batch.items().to_vec();
    for row in items.chunks_mut(t) {
        let start = row.iter().position(|&i| i != PAD).unwrap_or(t);
        row[start..].shuffle(rng);
    }
    SequenceBatch::from_padded(t, items).expect("same layout as the input batch")
}

struct Views {
    /// Unit-normalised rows (zero for zero-norm rows).
    unit: Vec<Vec<f64>>,
    norms: Vec<f64>,
    zero_norm: usize,
}

fn views(a: &Tensor, p: &Tensor) -> Views {
    let mut unit = Vec::with_capacity(2 * a.rows());
    let mut norms = Vec::with_capacity(2 * a.rows());
    let mut zero_norm = 0;
    for r in (0..a.rows()).map(|i| a.row(i)).chain((0..p.rows()).map(|i| p.row(i))) {
        let n = dot(r, r).sqrt();
        if n > 0.0 && n.is_finite() {
            unit.push(r.iter().map(|v| v / n).collect());
        } else {
            zero_norm += 1;
            unit.push(vec![0.0; r.len()]);
        }
        norms.push(n);
    }
    Views { unit, norms, zero_norm }
}

/// Loss value and `∂L/∂S` for the `2N × 2N` similarity matrix.
fn ntxent(v: &Views, tau: f64) -> (f64, Vec<Vec<f64>>) {
    let m = v.unit.len();
    let n = m / 2;
    let partner = |i: usize| if i < n { i + n } else { i - n };
    let mut loss = 0.0;
    let mut ds = vec![vec![0.0; m]; m];
    for i in 0..m {
        let logits: Vec<f64> = (0..m).map(|j| dot(&v.unit[i], &v.unit[j]) / tau).collect();
        let max = (0..m)
            .filter(|&j| j != i)
            .map(|j| logits[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m).filter(|&j| j != i).map(|j| (logits[j] - max).exp()).sum();
        loss += max + z.ln() - logits[partner(i)];
        for j in (0..m).filter(|&j| j != i) {
            ds[i][j] += (logits[j] - max).exp() / z / (tau * m as f64);
        }
        ds[i][partner(i)] -= 1.0 / (tau * m as f64);
    }
    (loss / m as f64, ds)
}

struct InfoNceRule {
    tau: f64,
}

impl Backward for InfoNceRule {
    // the view-pair gradient reads ds[i][j] and ds[j][i] together
    #[allow(clippy::needless_range_loop)]
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, p) = (inputs[0], inputs[1]);
        let v = views(a, p);
        let (_, ds) = ntxent(&v, self.tau);
        let m = v.unit.len();
        let d = a.cols();
        let mut out = [Tensor::zeros(a.rows(), d), Tensor::zeros(p.rows(), d)];
        for i in 0..m {
            if v.norms[i] == 0.0 || !v.norms[i].is_finite() {
                continue;
            }
            // gradient w.r.t. the unit vector, then through the normalisation
            let mut du = vec![0.0; d];
            for j in 0..m {
                let c = ds[i][j] + ds[j][i];
                if c != 0.0 {
                    for (o, x) in du.iter_mut().zip(&v.unit[j]) {
                        *o += c * x;
                    }
                }
            }
            let proj = dot(&du, &v.unit[i]);
            let (half, row) = if i < a.rows() { (0, i) } else { (1, i - a.rows()) };
            for (k, o) in out[half].row_mut(row).iter_mut().enumerate() {
                *o = grad.item() * (du[k] - proj * v.unit[i][k]) / v.norms[i];
            }
        }
        let [da, dp] = out;
        vec![Some(da), Some(dp)]
    }
}

/// InfoNCE on the graph; `anchors` and `positives` are `N × d` nodes.
pub fn infonce_var(g: &mut Graph, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    let cb = ContrastiveBatch::new(g.value(anchors).clone(), g.value(positives).clone())?;
    let (loss, zero_norm) = infonce_with_stats(&cb, tau)?;
    if zero_norm > 0 {
        log::warn!("{zero_norm} zero-norm contrastive views treated as similarity 0");
    }
    Ok(g.apply(&[anchors, positives], Tensor::scalar(loss), InfoNceRule { tau }))
}

/// Symmetric NT-Xent loss and the number of zero-norm views encountered.
pub fn infonce_with_stats(cb: &ContrastiveBatch, tau: f64) -> Result<(f64, usize)> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let v = views(&cb.anchors, &cb.positives);
    let (loss, _) = ntxent(&v, tau);
    Ok((loss, v.zero_norm))
}

/// Symmetric NT-Xent loss with cosine similarity and temperature `tau`.
pub fn infonce_loss(cb: &ContrastiveBatch, tau: f64) -> Result<f64> {
    infonce_with_stats(cb, tau).map(|(loss, _)| loss)
}
