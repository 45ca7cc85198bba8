//! Finite-difference checks of composite gradients through the encoders,
//! the fusion stage and the full model.

use msa_core::checks::{gradcheck_suite, GRADCHECK_EPS, GRADCHECK_TOL};
use msa_core::config::{ExperimentConfig, HeadActivation};
use msa_core::data::{generate_synthetic, SyntheticSpec};
use msa_core::fusion::{fuse, fusion_cnn, FusionCnnParams, FusionSwitches};
use msa_core::gradcheck::{relative_error, GradCheck};
use msa_core::image::{encode_image, project_flatten};
use msa_core::model::MultimodalModel;
use msa_core::objectives::{
    classification_logits, combined_loss, cross_entropy, supcon_loss, ContrastiveBatch, LossWeights,
};
use msa_core::rng::{normal_vec, stream};
use msa_core::tensor::{concat, Tensor};
use msa_core::text::{double_bilstm, embed_tokens, TokenSequence};
use msa_core::Result;

fn randn(seed: u64, shape: &[usize], std: f64) -> Tensor {
    Tensor::new(shape, normal_vec(&mut stream(seed, &[]), shape.iter().product(), std)).unwrap()
}

/// Central difference of `f` with respect to one coordinate of `params[k]`.
fn numeric<F: Fn(&[Tensor]) -> Result<Tensor>>(f: &F, params: &[Tensor], k: usize, i: usize, eps: f64) -> f64 {
    let eval = |delta: f64| {
        let probe: Vec<Tensor> = params
            .iter()
            .enumerate()
            .map(|(j, t)| {
                if j == k {
                    let mut d = t.to_vec();
                    d[i] += delta;
                    Tensor::new(t.shape(), d).unwrap()
                } else {
                    t.detach()
                }
            })
            .collect();
        f(&probe).unwrap().item().unwrap()
    };
    (eval(eps) - eval(-eps)) / (2.0 * eps)
}

#[test]
fn operation_suite_passes() {
    let rows = gradcheck_suite(7, 5).unwrap();
    assert!(rows.len() >= 30);
    for row in &rows {
        assert!(row.passed(), "{} rel err {:e}", row.name, row.report.max_rel_err);
    }
}

#[test]
fn matmul_sum_gradient() {
    let inputs = [randn(1, &[3, 4], 1.0), randn(2, &[4, 2], 1.0)];
    let report = GradCheck::new(1e-5)
        .unwrap()
        .run(|x| x[0].matmul(&x[1])?.sum(), &inputs)
        .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn gelu_at_random_points() {
    let inputs = [randn(3, &[10], 1.0)];
    let report = GradCheck::new(1e-5).unwrap().run(|x| x[0].gelu().sum(), &inputs).unwrap();
    assert_eq!(report.probed_count, 10);
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn mean_reduce_gradient() {
    let inputs = [randn(4, &[4, 5], 1.0)];
    let w = randn(5, &[5], 1.0);
    let report = GradCheck::new(1e-5)
        .unwrap()
        .run(|x| x[0].mean(0)?.mul(&w)?.sum(), &inputs)
        .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn embedding_gradient_touches_only_used_rows() {
    let table = randn(6, &[5, 4], 1.0).to_param();
    let seq = TokenSequence::new(vec![0, 3, 3, 1], 5, 8).unwrap();
    let upstream = randn(7, &[4, 4], 1.0);
    embed_tokens(&seq, &table).unwrap().mul(&upstream).unwrap().sum().unwrap().backward().unwrap();
    let g = table.grad().unwrap();
    let u = upstream.data();
    for row in 0..5 {
        for c in 0..4 {
            let expect: f64 = seq
                .ids()
                .iter()
                .enumerate()
                .filter(|(_, &id)| id == row)
                .map(|(pos, _)| u[pos * 4 + c])
                .sum();
            assert_eq!(g[row * 4 + c], expect);
        }
    }
    // Dense finite differences agree as well.
    let f = |x: &[Tensor]| embed_tokens(&seq, &x[0])?.mul(&upstream)?.sum();
    let report = GradCheck::new(1e-5).unwrap().run(f, &[table.detach()]).unwrap();
    assert!(report.max_abs_err < 1e-9);
}

#[test]
fn bilstm_layer_one_gate_weight() {
    let model = MultimodalModel::new(&ExperimentConfig::default()).unwrap();
    let [l1, l2] = model.params.text_layers.clone();
    let seq = randn(8, &[6, 32], 1.0);
    let upstream = randn(9, &[6, 32], 1.0);
    let f = |x: &[Tensor]| {
        let mut l1 = l1.clone();
        l1.forward.w_ih = x[0].clone();
        double_bilstm(&seq, &l1, &l2)?.mul(&upstream)?.sum()
    };
    let w = l1.forward.w_ih.detach();
    let leaf = w.to_param();
    f(std::slice::from_ref(&leaf)).unwrap().backward().unwrap();
    let g = leaf.grad().unwrap();
    // Entries in the input, forget, cell and output gate blocks.
    for i in [5, 16 + 3, 32 + 7, 48 + 11] {
        let n = numeric(&f, std::slice::from_ref(&w), 0, i, GRADCHECK_EPS);
        assert!(relative_error(g[i], n) < 1e-4, "entry {i}: {} vs {n}", g[i]);
    }
}

#[test]
fn image_value_projection_entry() {
    let model = MultimodalModel::new(&ExperimentConfig::default()).unwrap();
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let map = ds.records[0].image.clone();
    let p = model.params.clone();
    let upstream = randn(10, &[16, 32], 1.0);
    let f = |x: &[Tensor]| {
        let mut blocks = p.image_blocks.clone();
        blocks[0].w_v = x[0].clone();
        let m1 = project_flatten(&map, &p.image_proj_w, &p.image_proj_b)?;
        encode_image(&m1, &blocks, true)?.out.mul(&upstream)?.sum()
    };
    let w = p.image_blocks[0].w_v.detach();
    let report = GradCheck::new(GRADCHECK_EPS)
        .unwrap()
        .probes(20, 3)
        .run(f, &[w])
        .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn fusion_cnn_kernel() {
    let x = randn(11, &[8, 6], 1.0);
    let upstream = randn(12, &[8, 6], 1.0);
    let bias = randn(13, &[6], 0.2);
    let f = |k: &[Tensor]| {
        fusion_cnn(
            &x,
            &FusionCnnParams {
                kernel: k[0].clone(),
                bias: bias.clone(),
            },
        )?
        .mul(&upstream)?
        .sum()
    };
    let report = GradCheck::new(1e-5).unwrap().run(f, &[randn(14, &[3, 6, 6], 0.3)]).unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn fused_sum_to_text_entry() {
    let model = MultimodalModel::new(&ExperimentConfig::default()).unwrap();
    let mut fusion = model.params.fusion.clone();
    // With unit gain and zero bias every post-norm row sums to zero, which
    // would make the gradient vanish identically.
    let last = fusion.blocks.last_mut().unwrap();
    last.ln2_gain = Tensor::new(&[32], normal_vec(&mut stream(22, &[]), 32, 0.3).iter().map(|v| 1.0 + v).collect()).unwrap();
    let image = randn(15, &[16, 32], 1.0);
    let f = |x: &[Tensor]| fuse(&x[0], &image, &fusion, FusionSwitches::default())?.tokens.sum();
    let report = GradCheck::new(GRADCHECK_EPS)
        .unwrap()
        .probes(20, 4)
        .run(f, &[randn(16, &[12, 32], 1.0)])
        .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn head_weight_gradient() {
    let pooled = randn(17, &[1, 8], 1.0);
    let b = randn(18, &[3], 0.3);
    let f = |x: &[Tensor]| cross_entropy(&classification_logits(&pooled, &x[0], &b, HeadActivation::Gelu)?, 2);
    let report = GradCheck::new(1e-5).unwrap().run(f, &[randn(19, &[8, 3], 0.35)]).unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn combined_gradient_is_weighted_sum() {
    let labels = vec![0, 1, 0, 1, 2, 2];
    let w = randn(20, &[4, 3], 0.5);
    let head = |z: &Tensor| -> Result<Tensor> {
        let mut ce = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            let logits = classification_logits(&z.row(i)?, &w, &Tensor::zeros(&[3])?, HeadActivation::Gelu)?;
            ce.push(cross_entropy(&logits, l)?.reshape(&[1])?);
        }
        concat(&ce, 0)?.mean_all()
    };
    let sup = |z: &Tensor| supcon_loss(&ContrastiveBatch::new(z, labels.clone(), 0.1)?);
    let z0 = randn(21, &[6, 4], 1.0);
    let grad_of = |f: &dyn Fn(&Tensor) -> Result<Tensor>| {
        let leaf = z0.to_param();
        f(&leaf).unwrap().backward().unwrap();
        leaf.grad().unwrap()
    };
    let (g_sc, g_sup) = (grad_of(&head), grad_of(&sup));
    let weights = LossWeights::new(0.7, 1.9).unwrap();
    let f = |x: &[Tensor]| combined_loss(&head(&x[0])?, &sup(&x[0])?, weights);
    let g = grad_of(&|z: &Tensor| f(std::slice::from_ref(z)));
    for i in 0..g.len() {
        let linear = 0.7 * g_sc[i] + 1.9 * g_sup[i];
        assert!((g[i] - linear).abs() < 1e-12);
        let n = numeric(&f, std::slice::from_ref(&z0), 0, i, 1e-5);
        assert!(relative_error(g[i], n) < 1e-5);
    }
}

#[test]
fn full_model_loss_on_sampled_parameters() {
    let config = ExperimentConfig::default();
    let model = MultimodalModel::new(&config).unwrap().frozen();
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let batch: Vec<_> = ds.records[..4].to_vec();
    let base: Vec<Tensor> = model.params.named().iter().map(|(_, t)| t.detach()).collect();
    let f = |x: &[Tensor]| -> Result<Tensor> {
        let mut m = model.clone();
        for (slot, v) in m.params.tensors_mut().into_iter().zip(x) {
            *slot = v.clone();
        }
        let mut ce = Vec::new();
        let mut pooled = Vec::new();
        let mut labels = Vec::new();
        for s in batch.iter().chain(batch.iter()) {
            let out = m.forward(s)?;
            ce.push(cross_entropy(&out.logits, s.label)?.reshape(&[1])?);
            pooled.push(out.pooled.vector);
            labels.push(s.label);
        }
        let l_sc = concat(&ce, 0)?.mean_all()?;
        let l_sup = supcon_loss(&ContrastiveBatch::new(&concat(&pooled, 0)?, labels, config.loss.temperature)?)?;
        combined_loss(&l_sc, &l_sup, LossWeights::new(1.0, 1.0)?)
    };
    let report = GradCheck::new(GRADCHECK_EPS)
        .unwrap()
        .probes(20, 11)
        .run(f, &base)
        .unwrap();
    assert_eq!(report.probed_count, 20);
    assert!(report.max_rel_err < GRADCHECK_TOL, "{report:?}");
}
