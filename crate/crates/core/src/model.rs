//! The full multimodal network: parameter layout, initialisation and forward
//! pass from a [`SampleRecord`] to the pooled representation and logits.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig, HeadActivation, ModelDims};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::fusion::{
    attention_pool, fuse, CbamParams, FusionCnnParams, FusionParams, FusionSwitches, PoolParams,
    PooledRepresentation,
};
use crate::image::{encode_image, project_flatten};
use crate::objectives::classification_logits;
use crate::rng::{derive_seed, normal_vec, stream, TAG_INIT};
use crate::tensor::Tensor;
use crate::text::{double_bilstm, embed_tokens, BiLstmParams, LstmParams, TokenSequence};
use crate::transformer::EncoderBlockParams;

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
}

fn name_tag(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Each parameter draws from its own stream keyed by name, so adding or
/// removing a parameter never shifts another's initial values.
fn init_param(seed: u64, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut rng = stream(seed, &[TAG_INIT, name_tag(name)]);
    let data = match init {
        Init::Normal(std) => normal_vec(&mut rng, n, std),
        Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    };
    Tensor::param(shape, data)
}

fn xavier(fan_in: usize, fan_out: usize) -> Init {
    Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    /// `[V, d_t]`
    pub embedding: Tensor,
    pub text_layers: [BiLstmParams; 2],
    /// `W_M`, `[c, d_t]`
    pub image_proj_w: Tensor,
    /// `b_M`, `[d_t]`
    pub image_proj_b: Tensor,
    pub image_blocks: Vec<EncoderBlockParams>,
    pub fusion: FusionParams,
    pub pool: PoolParams,
    /// `W_sc`, `[d_t, K]`
    pub head_w: Tensor,
    /// `b_sc`, `[K]`
    pub head_b: Tensor,
}

fn push_block<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: String, b: &'a EncoderBlockParams) {
    for (n, t) in EncoderBlockParams::NAMES.iter().zip(b.tensors()) {
        out.push((format!("{prefix}.{n}"), t));
    }
}

impl ModelParams {
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let d = dims.d_t;
        let h = d / 2;
        let p = |name: &str, shape: &[usize], init: Init| init_param(seed, name, shape, init);

        let lstm = |prefix: &str| -> Result<LstmParams> {
            let bound = 1.0 / (h as f64).sqrt();
            Ok(LstmParams {
                w_ih: p(&format!("{prefix}.w_ih"), &[d, 4 * h], Init::Uniform(bound))?,
                w_hh: p(&format!("{prefix}.w_hh"), &[h, 4 * h], Init::Uniform(bound))?,
                bias: p(&format!("{prefix}.bias"), &[4 * h], Init::Zeros)?,
            })
        };
        let bilstm = |prefix: &str| -> Result<BiLstmParams> {
            Ok(BiLstmParams {
                forward: lstm(&format!("{prefix}.fwd"))?,
                backward: lstm(&format!("{prefix}.bwd"))?,
            })
        };
        let block = |prefix: &str| -> Result<EncoderBlockParams> {
            let f = dims.ffn_mult * d;
            let n = |s: &str| format!("{prefix}.{s}");
            Ok(EncoderBlockParams {
                heads: dims.heads,
                w_q: p(&n("w_q"), &[d, d], xavier(d, d))?,
                w_k: p(&n("w_k"), &[d, d], xavier(d, d))?,
                w_v: p(&n("w_v"), &[d, d], xavier(d, d))?,
                w_o: p(&n("w_o"), &[d, d], xavier(d, d))?,
                w_1: p(&n("w_1"), &[d, f], xavier(d, f))?,
                b_1: p(&n("b_1"), &[f], Init::Zeros)?,
                w_2: p(&n("w_2"), &[f, d], xavier(f, d))?,
                b_2: p(&n("b_2"), &[d], Init::Zeros)?,
                ln1_gain: p(&n("ln1_gain"), &[d], Init::Ones)?,
                ln1_bias: p(&n("ln1_bias"), &[d], Init::Zeros)?,
                ln2_gain: p(&n("ln2_gain"), &[d], Init::Ones)?,
                ln2_bias: p(&n("ln2_bias"), &[d], Init::Zeros)?,
            })
        };
        let r = d / dims.cbam_reduction;
        let k = dims.fusion_kernel;
        Ok(ModelParams {
            embedding: p("embedding", &[dims.vocab_size, d], Init::Normal(0.5))?,
            text_layers: [bilstm("text.l1")?, bilstm("text.l2")?],
            image_proj_w: p("image.proj_w", &[dims.channels, d], xavier(dims.channels, d))?,
            image_proj_b: p("image.proj_b", &[d], Init::Zeros)?,
            image_blocks: (0..dims.image_blocks)
                .map(|i| block(&format!("image.block{i}")))
                .collect::<Result<_>>()?,
            fusion: FusionParams {
                cnn: FusionCnnParams {
                    kernel: p(
                        "fusion.cnn.kernel",
                        &[k, d, d],
                        Init::Uniform(0.5 / ((k * d) as f64).sqrt()),
                    )?,
                    bias: p("fusion.cnn.bias", &[d], Init::Zeros)?,
                },
                cbam: CbamParams {
                    w0: p("fusion.cbam.w0", &[d, r], xavier(d, r))?,
                    w1: p("fusion.cbam.w1", &[r, d], xavier(r, d))?,
                    spatial_kernel: p(
                        "fusion.cbam.spatial_kernel",
                        &[dims.cbam_kernel, 2, 1],
                        Init::Uniform(1.0 / ((2 * dims.cbam_kernel) as f64).sqrt()),
                    )?,
                    spatial_bias: p("fusion.cbam.spatial_bias", &[1], Init::Zeros)?,
                },
                blocks: (0..dims.fusion_blocks)
                    .map(|i| block(&format!("fusion.block{i}")))
                    .collect::<Result<_>>()?,
            },
            pool: PoolParams {
                w_a: p("pool.w_a", &[d, dims.attn_dim], xavier(d, dims.attn_dim))?,
                v_a: p(
                    "pool.v_a",
                    &[dims.attn_dim],
                    Init::Uniform(1.0 / (dims.attn_dim as f64).sqrt()),
                )?,
                w_r: p("pool.w_r", &[d, d], xavier(d, d))?,
                b_r: p("pool.b_r", &[d], Init::Zeros)?,
            },
            head_w: p("head.w", &[d, dims.classes], xavier(d, dims.classes))?,
            head_b: p("head.b", &[dims.classes], Init::Zeros)?,
        })
    }

    /// Every parameter with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embedding".into(), &self.embedding)];
        for (l, layer) in self.text_layers.iter().enumerate() {
            for (dir, p) in [("fwd", &layer.forward), ("bwd", &layer.backward)] {
                for (n, t) in ["w_ih", "w_hh", "bias"].iter().zip(p.tensors()) {
                    out.push((format!("text.l{}.{dir}.{n}", l + 1), t));
                }
            }
        }
        out.push(("image.proj_w".into(), &self.image_proj_w));
        out.push(("image.proj_b".into(), &self.image_proj_b));
        for (i, b) in self.image_blocks.iter().enumerate() {
            push_block(&mut out, format!("image.block{i}"), b);
        }
        let f = &self.fusion;
        out.push(("fusion.cnn.kernel".into(), &f.cnn.kernel));
        out.push(("fusion.cnn.bias".into(), &f.cnn.bias));
        out.push(("fusion.cbam.w0".into(), &f.cbam.w0));
        out.push(("fusion.cbam.w1".into(), &f.cbam.w1));
        out.push(("fusion.cbam.spatial_kernel".into(), &f.cbam.spatial_kernel));
        out.push(("fusion.cbam.spatial_bias".into(), &f.cbam.spatial_bias));
        for (i, b) in f.blocks.iter().enumerate() {
            push_block(&mut out, format!("fusion.block{i}"), b);
        }
        out.push(("pool.w_a".into(), &self.pool.w_a));
        out.push(("pool.v_a".into(), &self.pool.v_a));
        out.push(("pool.w_r".into(), &self.pool.w_r));
        out.push(("pool.b_r".into(), &self.pool.b_r));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Mutable access in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding];
        for layer in self.text_layers.iter_mut() {
            out.extend(layer.forward.tensors_mut());
            out.extend(layer.backward.tensors_mut());
        }
        out.push(&mut self.image_proj_w);
        out.push(&mut self.image_proj_b);
        for b in self.image_blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        let f = &mut self.fusion;
        out.push(&mut f.cnn.kernel);
        out.push(&mut f.cnn.bias);
        out.push(&mut f.cbam.w0);
        out.push(&mut f.cbam.w1);
        out.push(&mut f.cbam.spatial_kernel);
        out.push(&mut f.cbam.spatial_bias);
        for b in f.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.pool.w_a);
        out.push(&mut self.pool.v_a);
        out.push(&mut self.pool.w_r);
        out.push(&mut self.pool.b_r);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy with every parameter re-created as a leaf (`trainable`) or a
    /// constant.
    pub fn rebound(&self, trainable: bool) -> ModelParams {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            *t = if trainable { t.to_param() } else { t.detach() };
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self
                .named()
                .into_iter()
                .map(|(n, t)| {
                    (
                        n,
                        StoredTensor {
                            shape: t.shape().to_vec(),
                            data: t.to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Overwrites every parameter from a checkpoint with matching names and
    /// shapes.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != ckpt.params.len() {
            return Err(Error::Invalid(format!(
                "checkpoint holds {} tensors, model has {}",
                ckpt.params.len(),
                names.len()
            )));
        }
        for (name, t) in names.iter().zip(self.tensors_mut()) {
            let stored = ckpt
                .params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint is missing {name}")))?;
            if stored.shape != t.shape() {
                return Err(Error::shape("load_checkpoint", t.shape(), &stored.shape));
            }
            *t = Tensor::param(&stored.shape, stored.data.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: BTreeMap<String, StoredTensor>,
}

/// Trained weights together with the config that shaped the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub config: ExperimentConfig,
    pub params: Checkpoint,
}

/// Everything produced by one forward pass over a sample.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub text: Tensor,
    pub image: Tensor,
    pub fused: Tensor,
    pub pooled: PooledRepresentation,
    /// `[K]`
    pub logits: Tensor,
    pub image_attention: Vec<Tensor>,
    pub fusion_attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct MultimodalModel {
    pub dims: ModelDims,
    pub ablation: Ablation,
    pub head_activation: HeadActivation,
    pub params: ModelParams,
}

impl MultimodalModel {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let seed = derive_seed(config.seed, &[TAG_INIT]);
        Ok(MultimodalModel {
            dims: config.model.clone(),
            ablation: config.ablation,
            head_activation: config.loss.head_activation,
            params: ModelParams::init(&config.model, seed)?,
        })
    }

    pub fn save(&self, config: &ExperimentConfig) -> SavedModel {
        SavedModel {
            config: config.clone(),
            params: self.params.to_checkpoint(),
        }
    }

    pub fn from_saved(saved: &SavedModel) -> Result<Self> {
        let mut model = MultimodalModel::new(&saved.config)?;
        model.params.load_checkpoint(&saved.params)?;
        Ok(model)
    }

    /// Constant copy for inference; no graph is recorded.
    pub fn frozen(&self) -> MultimodalModel {
        MultimodalModel {
            params: self.params.rebound(false),
            ..self.clone()
        }
    }

    /// Text features `T`, `[n_t, d_t]`.
    pub fn encode_text(&self, tokens: &[usize]) -> Result<Tensor> {
        let seq = TokenSequence::new(tokens.to_vec(), self.dims.vocab_size, self.dims.n_t_max)?;
        let embedded = embed_tokens(&seq, &self.params.embedding)?;
        if self.ablation.use_bilstm {
            let [l1, l2] = &self.params.text_layers;
            double_bilstm(&embedded, l1, l2)
        } else {
            Ok(embedded)
        }
    }

    pub fn forward(&self, sample: &SampleRecord) -> Result<ForwardOutput> {
        let p = &self.params;
        let text = self.encode_text(&sample.tokens)?;
        let m1 = project_flatten(&sample.image, &p.image_proj_w, &p.image_proj_b)?;
        let image = encode_image(&m1, &p.image_blocks, self.dims.positional_encoding)?;
        let switches = FusionSwitches {
            use_cnn: self.ablation.use_cnn,
            use_cbam: self.ablation.use_cbam,
        };
        let fused = fuse(&text, &image.out, &p.fusion, switches)?;
        let pooled = attention_pool(&fused.tokens, &p.pool)?;
        let logits = classification_logits(&pooled.vector, &p.head_w, &p.head_b, self.head_activation)?;
        Ok(ForwardOutput {
            text,
            image: image.out,
            fused: fused.tokens,
            pooled,
            logits,
            image_attention: image.attention,
            fusion_attention: fused.attention,
        })
    }
}

/// Index of the largest logit (first on ties).
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_and_mut_orders_agree() {
        let mut p = ModelParams::init(&ModelDims::default(), 3).unwrap();
        let shapes: Vec<Vec<usize>> = p.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut_shapes: Vec<Vec<usize>> = p.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        let names: std::collections::HashSet<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), shapes.len());
        assert!(p.named().iter().all(|(_, t)| t.requires_grad()));
    }

    #[test]
    fn init_depends_on_name_not_position() {
        let a = ModelParams::init(&ModelDims::default(), 5).unwrap();
        let dims = ModelDims {
            image_blocks: 1,
            ..ModelDims::default()
        };
        let b = ModelParams::init(&dims, 5).unwrap();
        assert_eq!(a.head_w.data(), b.head_w.data());
        assert_ne!(
            a.head_w.data(),
            ModelParams::init(&ModelDims::default(), 6).unwrap().head_w.data()
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(&ModelDims::default(), 1).unwrap();
        let ckpt = p.to_checkpoint();
        let text = serde_json::to_string(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ckpt);
        let mut q = ModelParams::init(&ModelDims::default(), 2).unwrap();
        q.load_checkpoint(&back).unwrap();
        for ((_, a), (_, b)) in p.named().iter().zip(q.named()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn argmax_ties_first() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[-1.0, -2.0]), 0);
    }
}
