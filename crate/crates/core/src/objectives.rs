//! Training objectives: supervised contrastive loss, the GELU-headed
//! cross-entropy classification loss, and their weighted combination.

use crate::config::HeadActivation;
use crate::error::{Error, Result};
use crate::tensor::{concat, Tensor};

/// L2-normalised embeddings with labels and temperature.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    embeddings: Tensor,
    labels: Vec<usize>,
    temperature: f64,
}

impl ContrastiveBatch {
    /// Normalises each row of `raw` (`[N, d]`) to unit length.
    pub fn new(raw: &Tensor, labels: Vec<usize>, temperature: f64) -> Result<Self> {
        if raw.rank() != 2 || raw.shape()[0] != labels.len() {
            return Err(Error::Invalid(format!(
                "embeddings {:?} do not match {} labels",
                raw.shape(),
                labels.len()
            )));
        }
        if labels.len() < 2 {
            return Err(Error::Invalid("contrastive batch needs at least 2 samples".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
        }
        Ok(ContrastiveBatch {
            embeddings: raw.normalize_rows()?,
            labels,
            temperature,
        })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Supervised contrastive loss.
///
/// For anchor `i`, `A(i)` is every other index and `P(i) ⊂ A(i)` the ones
/// sharing its label. The anchor term is
/// `−1/|P(i)| Σ_{p∈P(i)} log( exp(z_i·z_p/τ) / Σ_{a∈A(i)} exp(z_i·z_a/τ) )`.
/// Anchors with empty `P(i)` are skipped and the result is the mean over the
/// remaining anchors.
pub fn supcon_loss(batch: &ContrastiveBatch) -> Result<Tensor> {
    let n = batch.len();
    let z = batch.embeddings();
    let sim = z.matmul(&z.transpose()?)?.scale(1.0 / batch.temperature);
    let labels = batch.labels();
    let mut terms = Vec::new();
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&a| a != i).collect();
        let positives: Vec<usize> = others
            .iter()
            .enumerate()
            .filter(|(_, &a)| labels[a] == labels[i])
            .map(|(k, _)| k)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let log_prob = sim
            .row(i)?
            .reshape(&[n, 1])?
            .gather_rows(&others)?
            .log_softmax(0)?;
        let term = log_prob
            .gather_rows(&positives)?
            .sum()?
            .scale(-1.0 / positives.len() as f64);
        terms.push(term.reshape(&[1])?);
    }
    if terms.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let count = terms.len() as f64;
    Ok(concat(&terms, 0)?.sum()?.scale(1.0 / count))
}

/// `GELU(R′·W_sc + b_sc)` as a `[K]` vector (or without GELU when the head
/// activation is disabled).
pub fn classification_logits(
    pooled: &Tensor,
    w_sc: &Tensor,
    b_sc: &Tensor,
    activation: HeadActivation,
) -> Result<Tensor> {
    let d = pooled.numel();
    if w_sc.rank() != 2 || w_sc.shape()[0] != d {
        return Err(Error::shape("classification_logits", pooled.shape(), w_sc.shape()));
    }
    let k = w_sc.shape()[1];
    let affine = pooled.reshape(&[1, d])?.matmul(w_sc)?.add_bias(b_sc)?;
    let out = match activation {
        HeadActivation::Gelu => affine.gelu(),
        HeadActivation::None => affine,
    };
    out.reshape(&[k])
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<Tensor> {
    if logits.rank() != 1 {
        return Err(Error::Invalid(format!(
            "cross_entropy expects a logit vector, got {:?}",
            logits.shape()
        )));
    }
    let k = logits.numel();
    if label >= k {
        return Err(Error::Index {
            index: label,
            extent: k,
        });
    }
    logits
        .log_softmax(0)?
        .slice(0, label..label + 1)?
        .scale(-1.0)
        .reshape(&[])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_sc: f64,
    pub lambda_supcon: f64,
}

impl LossWeights {
    pub fn new(lambda_sc: f64, lambda_supcon: f64) -> Result<Self> {
        if !(lambda_sc >= 0.0 && lambda_supcon >= 0.0) {
            return Err(Error::Invalid("loss weights must be non-negative".into()));
        }
        if lambda_sc == 0.0 && lambda_supcon == 0.0 {
            return Err(Error::Invalid("loss weights cannot both be zero".into()));
        }
        Ok(LossWeights {
            lambda_sc,
            lambda_supcon,
        })
    }
}

/// `λ_sc·L_SC + λ_Supcon·L_SupCon`. A zero-weighted term is left out of the
/// graph entirely.
pub fn combined_loss(l_sc: &Tensor, l_supcon: &Tensor, w: LossWeights) -> Result<Tensor> {
    match (w.lambda_sc == 0.0, w.lambda_supcon == 0.0) {
        (false, true) => Ok(l_sc.scale(w.lambda_sc)),
        (true, false) => Ok(l_supcon.scale(w.lambda_supcon)),
        _ => l_sc.scale(w.lambda_sc).add(&l_supcon.scale(w.lambda_supcon)),
    }
}
