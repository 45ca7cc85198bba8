//! AdamW, embedding-level augmentation, dataset splitting and the epoch loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AugmentConfig, ExperimentConfig, OptimizerConfig};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::model::{argmax, MultimodalModel};
use crate::objectives::{combined_loss, cross_entropy, supcon_loss, ContrastiveBatch, LossWeights};
use crate::rng::{normal_vec, stream, TAG_AUGMENT, TAG_SHUFFLE, TAG_SPLIT};
use crate::tensor::{concat, Tensor};
use crate::text::MASK_TOKEN;

/// One AdamW update of a flat parameter in place. `t` is the 1-based step.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hp: &OptimizerConfig,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape("adamw_step", &[n], &[grad.len()]));
    }
    if t == 0 {
        return Err(Error::Invalid("adamw step count starts at 1".into()));
    }
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..n {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * param[i]);
    }
    Ok(())
}

/// Moment estimates for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub hp: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(hp: OptimizerConfig, sizes: &[usize]) -> Self {
        AdamWState {
            hp,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Updates every parameter from its accumulated gradient (absent
    /// gradients count as zero) and replaces it with a fresh leaf.
    pub fn step(&mut self, params: Vec<&mut Tensor>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        for (i, p) in params.into_iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let mut data = p.to_vec();
            adamw_update(&mut data, &grad, &mut self.m[i], &mut self.v[i], self.step, &self.hp)?;
            *p = Tensor::param(p.shape(), data)?;
        }
        Ok(())
    }
}

/// Augmented view of `sample`: each non-class token becomes the mask token
/// with probability `token_drop_prob`, and Gaussian noise is added to the
/// image features. Determined by `(seed, sample.id, epoch)`.
pub fn augment(sample: &SampleRecord, spec: &AugmentConfig, seed: u64, epoch: u64) -> SampleRecord {
    let mut out = sample.clone();
    let mut rng = stream(seed, &[TAG_AUGMENT, sample.id, epoch]);
    if spec.token_drop_prob > 0.0 {
        for tok in out.tokens.iter_mut().skip(1) {
            if rng.random::<f64>() < spec.token_drop_prob {
                *tok = MASK_TOKEN;
            }
        }
    }
    if spec.gaussian_sigma > 0.0 {
        let noise = normal_vec(&mut rng, out.image.data.len(), spec.gaussian_sigma);
        out.image.data.iter_mut().zip(noise).for_each(|(x, n)| *x += n);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// Seeded 8:1:1 split: `val = test = ⌊n/10⌋`, the rest is training data.
pub fn split_dataset(records: &[SampleRecord], seed: u64) -> Result<Split> {
    let n = records.len();
    if n < 10 {
        return Err(Error::Dataset(format!("need at least 10 records to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[TAG_SPLIT]));
    let tenth = n / 10;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        test: pick(&order[..tenth]),
        val: pick(&order[tenth..2 * tenth]),
        train: pick(&order[2 * tenth..]),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss_total: f64,
    pub loss_sc: f64,
    pub loss_supcon: f64,
    /// Accuracy of the original (unaugmented) views during the epoch.
    pub train_acc: f64,
}

/// Order in which an epoch visits the training set.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, &[TAG_SHUFFLE, epoch]));
    order
}

/// Runs one epoch of two-view training. `model.params` must be trainable
/// leaves; they are replaced after every optimizer step.
pub fn train_epoch(
    model: &mut MultimodalModel,
    opt: &mut AdamWState,
    train: &[SampleRecord],
    config: &ExperimentConfig,
    epoch: u64,
) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if config.batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2, got {}",
            config.batch_size
        )));
    }
    let weights = LossWeights::new(config.loss.lambda_sc, config.effective_lambda_supcon())
        .map_err(|e| Error::Config(e.to_string()))?;
    let order = epoch_order(train.len(), config.seed, epoch);

    let (mut sum_total, mut sum_sc, mut sum_sup) = (0.0, 0.0, 0.0);
    let mut correct = 0usize;
    let mut batches = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let mut ce_terms = Vec::with_capacity(2 * chunk.len());
        let mut pooled = Vec::with_capacity(2 * chunk.len());
        let mut labels = Vec::with_capacity(2 * chunk.len());
        for &i in chunk {
            let original = &train[i];
            let views = [
                original.clone(),
                augment(original, &config.augment, config.seed, epoch),
            ];
            for (v, view) in views.iter().enumerate() {
                let out = model.forward(view)?;
                if v == 0 && argmax(out.logits.data()) == original.label {
                    correct += 1;
                }
                ce_terms.push(cross_entropy(&out.logits, original.label)?.reshape(&[1])?);
                pooled.push(out.pooled.vector);
                labels.push(original.label);
            }
        }
        let l_sc = concat(&ce_terms, 0)?.mean_all()?;
        let r = concat(&pooled, 0)?;
        let r = if weights.lambda_supcon == 0.0 { r.detach() } else { r };
        let l_sup = supcon_loss(&ContrastiveBatch::new(&r, labels, config.loss.temperature)?)?;
        let loss = combined_loss(&l_sc, &l_sup, weights)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        loss.backward()?;
        opt.step(model.params.tensors_mut())?;

        sum_total += value;
        sum_sc += l_sc.item()?;
        sum_sup += l_sup.item()?;
        batches += 1;
    }
    let b = batches as f64;
    Ok(EpochStats {
        loss_total: sum_total / b,
        loss_sc: sum_sc / b,
        loss_supcon: sum_sup / b,
        train_acc: correct as f64 / train.len() as f64,
    })
}
