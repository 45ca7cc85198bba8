//! Finite-difference verification suite over every differentiable operation
//! and module, shared by the `gradcheck` command and the test suites.
//!
//! Non-scalar outputs are reduced with a fixed random weighting `Σ R⊙y` so
//! that every output element contributes to the checked gradient.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::HeadActivation;
use crate::error::Result;
use crate::fusion::{attention_pool, cbam, cbam_channel, cbam_spatial, fusion_cnn, CbamParams, FusionCnnParams, PoolParams};
use crate::gradcheck::{GradCheck, GradReport};
use crate::image::{encode_image, project_flatten, ImageFeatureMap};
use crate::objectives::{classification_logits, combined_loss, cross_entropy, supcon_loss, ContrastiveBatch, LossWeights};
use crate::rng::{normal_vec, stream};
use crate::tensor::{concat, conv1d, Tensor};
use crate::text::{double_bilstm, lstm_cell, BiLstmParams, LstmParams};
use crate::transformer::{multi_head_attention, transformer_block, EncoderBlockParams};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub instances: usize,
    pub report: GradReport,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.instances >= 5 && self.report.max_rel_err < GRADCHECK_TOL
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<GradReport>;

fn t(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    Tensor::new(shape, normal_vec(rng, shape.iter().product(), std))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.3..3.0)).collect())
}

/// Checks `Σ R⊙f(inputs)` (or `f` itself when scalar) at `inputs`.
fn check<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor], probes: Option<usize>, f: F) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let out = f(inputs)?;
    let weights = if out.numel() == 1 {
        None
    } else {
        Some(t(rng, out.shape(), 1.0)?)
    };
    let objective = |xs: &[Tensor]| -> Result<Tensor> {
        let y = f(xs)?;
        match &weights {
            Some(w) => y.mul(w)?.sum(),
            None => y.reshape(&[]),
        }
    };
    let mut gc = GradCheck::new(GRADCHECK_EPS)?;
    if let Some(n) = probes {
        gc = gc.probes(n, rng.random());
    }
    gc.run(objective, inputs)
}

fn block_from(x: &[Tensor], heads: usize) -> EncoderBlockParams {
    EncoderBlockParams {
        heads,
        w_q: x[0].clone(),
        w_k: x[1].clone(),
        w_v: x[2].clone(),
        w_o: x[3].clone(),
        w_1: x[4].clone(),
        b_1: x[5].clone(),
        w_2: x[6].clone(),
        b_2: x[7].clone(),
        ln1_gain: x[8].clone(),
        ln1_bias: x[9].clone(),
        ln2_gain: x[10].clone(),
        ln2_bias: x[11].clone(),
    }
}

fn block_inputs(rng: &mut ChaCha8Rng, d: usize, f: usize) -> Result<Vec<Tensor>> {
    let s = 1.0 / (d as f64).sqrt();
    let gain = Tensor::new(&[d], normal_vec(rng, d, 0.2).iter().map(|v| 1.0 + v).collect())?;
    let gain2 = Tensor::new(&[d], normal_vec(rng, d, 0.2).iter().map(|v| 1.0 + v).collect())?;
    Ok(vec![
        t(rng, &[d, d], s)?,
        t(rng, &[d, d], s)?,
        t(rng, &[d, d], s)?,
        t(rng, &[d, d], s)?,
        t(rng, &[d, f], s)?,
        t(rng, &[f], 0.1)?,
        t(rng, &[f, d], 1.0 / (f as f64).sqrt())?,
        t(rng, &[d], 0.1)?,
        gain,
        t(rng, &[d], 0.1)?,
        gain2,
        t(rng, &[d], 0.1)?,
    ])
}

fn lstm_from(x: &[Tensor]) -> LstmParams {
    LstmParams {
        w_ih: x[0].clone(),
        w_hh: x[1].clone(),
        bias: x[2].clone(),
    }
}

fn cbam_from(x: &[Tensor]) -> CbamParams {
    CbamParams {
        w0: x[0].clone(),
        w1: x[1].clone(),
        spatial_kernel: x[2].clone(),
        spatial_bias: x[3].clone(),
    }
}

fn cbam_inputs(rng: &mut ChaCha8Rng, d: usize, r: usize) -> Result<Vec<Tensor>> {
    Ok(vec![
        t(rng, &[d, r], 0.5)?,
        t(rng, &[r, d], 0.5)?,
        t(rng, &[7, 2, 1], 0.4)?,
        t(rng, &[1], 0.1)?,
    ])
}

fn labels_with_pairs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| (i / 2) % k).collect();
    labels.shuffle(rng);
    labels
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |r| {
            let x = [t(r, &[3, 4], 1.0)?, t(r, &[4, 5], 1.0)?];
            check(r, &x, None, |x| x[0].matmul(&x[1]))
        }),
        ("add", |r| {
            let x = [t(r, &[3, 4], 1.0)?, t(r, &[3, 4], 1.0)?];
            check(r, &x, None, |x| x[0].add(&x[1]))
        }),
        ("sub", |r| {
            let x = [t(r, &[3, 4], 1.0)?, t(r, &[3, 4], 1.0)?];
            check(r, &x, None, |x| x[0].sub(&x[1]))
        }),
        ("mul", |r| {
            let x = [t(r, &[3, 4], 1.0)?, t(r, &[3, 4], 1.0)?, t(r, &[], 1.0)?];
            check(r, &x, None, |x| x[0].mul(&x[1])?.mul(&x[2]))
        }),
        ("scale", |r| {
            let x = [t(r, &[2, 3], 1.0)?];
            let k = r.random_range(-2.0..2.0);
            check(r, &x, None, move |x| Ok(x[0].scale(k)))
        }),
        ("sigmoid", |r| {
            let x = [t(r, &[3, 4], 2.0)?];
            check(r, &x, None, |x| Ok(x[0].sigmoid()))
        }),
        ("tanh", |r| {
            let x = [t(r, &[3, 4], 1.5)?];
            check(r, &x, None, |x| Ok(x[0].tanh()))
        }),
        ("gelu", |r| {
            let x = [t(r, &[3, 4], 1.0)?];
            check(r, &x, None, |x| Ok(x[0].gelu()))
        }),
        ("relu", |r| {
            let x = [t(r, &[3, 4], 1.0)?];
            check(r, &x, None, |x| Ok(x[0].relu()))
        }),
        ("exp", |r| {
            let x = [t(r, &[3, 4], 1.0)?];
            check(r, &x, None, |x| Ok(x[0].exp()))
        }),
        ("log", |r| {
            let x = [positive(r, &[3, 4])?];
            check(r, &x, None, |x| x[0].log())
        }),
        ("softmax", |r| {
            let x = [t(r, &[4, 5], 2.0)?];
            let axis = r.random_range(0..2);
            check(r, &x, None, move |x| x[0].softmax(axis))
        }),
        ("log_softmax", |r| {
            let x = [t(r, &[4, 5], 2.0)?];
            let axis = r.random_range(0..2);
            check(r, &x, None, move |x| x[0].log_softmax(axis))
        }),
        ("sum", |r| {
            let x = [t(r, &[3, 4], 1.0)?];
            check(r, &x, None, |x| x[0].sum())
        }),
        ("mean_all", |r| {
            let x = [t(r, &[3, 4], 1.0)?];
            check(r, &x, None, |x| x[0].mean_all())
        }),
        ("mean", |r| {
            let x = [t(r, &[3, 4], 1.0)?];
            let axis = r.random_range(0..2);
            check(r, &x, None, move |x| x[0].mean(axis))
        }),
        ("max", |r| {
            let x = [t(r, &[4, 5], 1.0)?];
            let axis = r.random_range(0..2);
            check(r, &x, None, move |x| x[0].max(axis))
        }),
        ("layer_norm", |r| {
            let x = [t(r, &[3, 6], 1.5)?, t(r, &[6], 1.0)?, t(r, &[6], 1.0)?];
            check(r, &x, None, |x| x[0].layer_norm(&x[1], &x[2]))
        }),
        ("normalize_rows", |r| {
            let x = [t(r, &[4, 3], 1.0)?];
            check(r, &x, None, |x| x[0].normalize_rows())
        }),
        ("add_bias", |r| {
            let x = [t(r, &[3, 4], 1.0)?, t(r, &[4], 1.0)?];
            check(r, &x, None, |x| x[0].add_bias(&x[1]))
        }),
        ("mul_cols", |r| {
            let x = [t(r, &[3, 4], 1.0)?, t(r, &[4], 1.0)?];
            check(r, &x, None, |x| x[0].mul_cols(&x[1]))
        }),
        ("mul_rows", |r| {
            let x = [t(r, &[3, 4], 1.0)?, t(r, &[3], 1.0)?];
            check(r, &x, None, |x| x[0].mul_rows(&x[1]))
        }),
        ("gather_rows", |r| {
            let x = [t(r, &[5, 3], 1.0)?];
            let ids: Vec<usize> = (0..7).map(|_| r.random_range(0..5)).collect();
            check(r, &x, None, move |x| x[0].gather_rows(&ids))
        }),
        ("concat", |r| {
            let x = [t(r, &[2, 3], 1.0)?, t(r, &[4, 3], 1.0)?];
            check(r, &x, None, |x| concat(&[x[0].clone(), x[1].clone(), x[0].clone()], 0))
        }),
        ("slice", |r| {
            let x = [t(r, &[4, 6], 1.0)?];
            check(r, &x, None, |x| x[0].slice(1, 1..4))
        }),
        ("transpose_reshape", |r| {
            let x = [t(r, &[3, 4], 1.0)?];
            check(r, &x, None, |x| x[0].transpose()?.reshape(&[2, 6])?.mul(&x[0].reshape(&[2, 6])?))
        }),
        ("conv1d", |r| {
            let k = [1, 3, 5][r.random_range(0..3)];
            let x = [t(r, &[6, 3], 1.0)?, t(r, &[k, 3, 2], 0.5)?, t(r, &[2], 0.5)?];
            check(r, &x, None, |x| conv1d(&x[0], &x[1], &x[2]))
        }),
        ("lstm_cell", |r| {
            let x = [
                t(r, &[1, 6], 1.0)?,
                t(r, &[1, 4], 0.5)?,
                t(r, &[1, 4], 0.5)?,
                t(r, &[6, 16], 0.5)?,
                t(r, &[4, 16], 0.5)?,
                t(r, &[16], 0.2)?,
            ];
            check(r, &x, None, |x| {
                let (h, c) = lstm_cell(&x[0], &x[1], &x[2], &lstm_from(&x[3..6]))?;
                concat(&[h, c], 1)
            })
        }),
        ("double_bilstm", |r| {
            let mut x = vec![t(r, &[4, 6], 1.0)?];
            for _ in 0..2 {
                x.push(t(r, &[6, 12], 0.5)?);
                x.push(t(r, &[3, 12], 0.5)?);
                x.push(t(r, &[12], 0.2)?);
            }
            for _ in 0..2 {
                x.push(t(r, &[6, 12], 0.5)?);
                x.push(t(r, &[3, 12], 0.5)?);
                x.push(t(r, &[12], 0.2)?);
            }
            check(r, &x, Some(120), |x| {
                let l1 = BiLstmParams {
                    forward: lstm_from(&x[1..4]),
                    backward: lstm_from(&x[4..7]),
                };
                let l2 = BiLstmParams {
                    forward: lstm_from(&x[7..10]),
                    backward: lstm_from(&x[10..13]),
                };
                double_bilstm(&x[0], &l1, &l2)
            })
        }),
        ("multi_head_attention", |r| {
            let mut x = vec![t(r, &[5, 8], 1.0)?];
            x.extend(block_inputs(r, 8, 16)?);
            check(r, &x, Some(150), |x| Ok(multi_head_attention(&x[0], &block_from(&x[1..], 2))?.out))
        }),
        ("transformer_block", |r| {
            let mut x = vec![t(r, &[5, 8], 1.0)?];
            x.extend(block_inputs(r, 8, 16)?);
            check(r, &x, Some(150), |x| Ok(transformer_block(&x[0], &block_from(&x[1..], 2))?.out))
        }),
        ("image_encoder", |r| {
            let map = ImageFeatureMap {
                channels: 3,
                height: 2,
                width: 2,
                data: normal_vec(r, 12, 1.0),
            };
            let mut x = vec![t(r, &[3, 8], 0.5)?, t(r, &[8], 0.1)?];
            x.extend(block_inputs(r, 8, 16)?);
            check(r, &x, Some(150), move |x| {
                let m1 = project_flatten(&map, &x[0], &x[1])?;
                Ok(encode_image(&m1, &[block_from(&x[2..], 2)], true)?.out)
            })
        }),
        ("fusion_cnn", |r| {
            let x = [t(r, &[6, 4], 1.0)?, t(r, &[3, 4, 4], 0.4)?, t(r, &[4], 0.2)?];
            check(r, &x, None, |x| {
                fusion_cnn(
                    &x[0],
                    &FusionCnnParams {
                        kernel: x[1].clone(),
                        bias: x[2].clone(),
                    },
                )
            })
        }),
        ("cbam_channel", |r| {
            let mut x = vec![t(r, &[6, 8], 1.0)?];
            x.extend(cbam_inputs(r, 8, 2)?);
            check(r, &x, None, |x| Ok(cbam_channel(&x[0], &cbam_from(&x[1..]))?.0))
        }),
        ("cbam_spatial", |r| {
            let mut x = vec![t(r, &[9, 8], 1.0)?];
            x.extend(cbam_inputs(r, 8, 2)?);
            check(r, &x, None, |x| Ok(cbam_spatial(&x[0], &cbam_from(&x[1..]))?.0))
        }),
        ("cbam", |r| {
            let mut x = vec![t(r, &[9, 8], 1.0)?];
            x.extend(cbam_inputs(r, 8, 4)?);
            check(r, &x, None, |x| cbam(&x[0], &cbam_from(&x[1..])))
        }),
        ("attention_pool", |r| {
            let x = [
                t(r, &[6, 8], 1.0)?,
                t(r, &[8, 5], 0.5)?,
                t(r, &[5], 0.5)?,
                t(r, &[8, 8], 0.4)?,
                t(r, &[8], 0.2)?,
            ];
            check(r, &x, None, |x| {
                let p = PoolParams {
                    w_a: x[1].clone(),
                    v_a: x[2].clone(),
                    w_r: x[3].clone(),
                    b_r: x[4].clone(),
                };
                Ok(attention_pool(&x[0], &p)?.vector)
            })
        }),
        ("supcon_loss", |r| {
            let n = r.random_range(4..=8);
            let labels = labels_with_pairs(r, n, 3);
            let tau = [0.07, 0.1, 0.5][r.random_range(0..3)];
            let x = [t(r, &[n, 5], 1.0)?];
            check(r, &x, None, move |x| supcon_loss(&ContrastiveBatch::new(&x[0], labels.clone(), tau)?))
        }),
        ("classification_ce", |r| {
            let label = r.random_range(0..3);
            let x = [t(r, &[1, 6], 1.0)?, t(r, &[6, 3], 0.4)?, t(r, &[3], 0.3)?];
            check(r, &x, None, move |x| {
                let logits = classification_logits(&x[0], &x[1], &x[2], HeadActivation::Gelu)?;
                cross_entropy(&logits, label)
            })
        }),
        ("combined_loss", |r| {
            let labels = labels_with_pairs(r, 6, 3);
            let w = LossWeights::new(r.random_range(0.1..2.0), r.random_range(0.1..2.0))?;
            let x = [t(r, &[6, 4], 1.0)?, t(r, &[4, 3], 0.5)?, t(r, &[3], 0.3)?];
            check(r, &x, None, move |x| {
                let mut ce = Vec::new();
                for (i, &l) in labels.iter().enumerate() {
                    let logits = classification_logits(&x[0].row(i)?, &x[1], &x[2], HeadActivation::Gelu)?;
                    ce.push(cross_entropy(&logits, l)?.reshape(&[1])?);
                }
                let l_sc = concat(&ce, 0)?.mean_all()?;
                let l_sup = supcon_loss(&ContrastiveBatch::new(&x[0], labels.clone(), 0.1)?)?;
                combined_loss(&l_sc, &l_sup, w)
            })
        }),
    ]
}

/// Runs every case on `instances` random instances drawn from `seed`.
pub fn gradcheck_suite(seed: u64, instances: usize) -> Result<Vec<CheckRow>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut report = GradReport {
                max_abs_err: 0.0,
                max_rel_err: 0.0,
                probed_count: 0,
            };
            for k in 0..instances {
                let mut rng = stream(seed, &[0x6763, i as u64, k as u64]);
                report = report.merge(case(&mut rng)?);
            }
            Ok(CheckRow {
                name: name.to_string(),
                instances,
                report,
            })
        })
        .collect()
}

/// Fixed-width table of suite results.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!(
        "{:<22} {:>9} {:>8} {:>12} {:>12}  status\n",
        "operation", "instances", "probes", "max_abs_err", "max_rel_err"
    );
    for row in rows {
        out.push_str(&format!(
            "{:<22} {:>9} {:>8} {:>12.3e} {:>12.3e}  {}\n",
            row.name,
            row.instances,
            row.report.probed_count,
            row.report.max_abs_err,
            row.report.max_rel_err,
            if row.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}
