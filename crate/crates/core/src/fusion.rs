//! Fusion stage: `Transformer(CBAM(CNN(concat(T, M))))` followed by additive
//! attention pooling into the pooled representation `R′`.
//!
//! CBAM is applied to a token sequence rather than an image: the channel
//! branch pools over sequence positions, the spatial branch pools over
//! channels and convolves along the sequence.

use crate::error::{Error, Result};
use crate::tensor::{concat, conv1d, Tensor};
use crate::transformer::{encode, EncoderBlockParams};

/// Text rows first, then image rows.
pub fn concat_modalities(text: &Tensor, image: &Tensor) -> Result<Tensor> {
    if text.rank() != 2 || image.rank() != 2 || text.shape()[1] != image.shape()[1] {
        return Err(Error::shape("concat_modalities", text.shape(), image.shape()));
    }
    concat(&[text.clone(), image.clone()], 0)
}

#[derive(Clone, Debug)]
pub struct FusionCnnParams {
    /// `[K, d, d]`
    pub kernel: Tensor,
    /// `[d]`
    pub bias: Tensor,
}

/// `x + GELU(conv1d(x))`, same padding.
pub fn fusion_cnn(x: &Tensor, p: &FusionCnnParams) -> Result<Tensor> {
    x.add(&conv1d(x, &p.kernel, &p.bias)?.gelu())
}

#[derive(Clone, Debug)]
pub struct CbamParams {
    /// `[d, d/r]`, shared by the average and max branches.
    pub w0: Tensor,
    /// `[d/r, d]`
    pub w1: Tensor,
    /// `[K, 2, 1]`: (channel-mean, channel-max) → one gate per position.
    pub spatial_kernel: Tensor,
    /// `[1]`
    pub spatial_bias: Tensor,
}

impl CbamParams {
    fn check(&self, d: usize) -> Result<()> {
        let (rows, hidden) = match *self.w0.shape() {
            [a, b] => (a, b),
            _ => return Err(Error::shape("cbam", self.w0.shape(), self.w1.shape())),
        };
        if rows != d || hidden == 0 || !d.is_multiple_of(hidden) || self.w1.shape() != [hidden, d] {
            return Err(Error::Invalid(format!(
                "cbam MLP {:?}/{:?} does not reduce width {d} by an integer ratio",
                self.w0.shape(),
                self.w1.shape()
            )));
        }
        Ok(())
    }
}

fn channel_mlp(v: &Tensor, p: &CbamParams) -> Result<Tensor> {
    v.matmul(&p.w0)?.relu().matmul(&p.w1)
}

/// Channel gate `w = σ(MLP(avgpool x) + MLP(maxpool x))`, pooled over the
/// sequence; returns `(x·w, w)`.
pub fn cbam_channel(x: &Tensor, p: &CbamParams) -> Result<(Tensor, Tensor)> {
    let (_, d) = (x.shape()[0], x.shape()[1]);
    p.check(d)?;
    let avg = x.mean(0)?.reshape(&[1, d])?;
    let max = x.max(0)?.reshape(&[1, d])?;
    let w = channel_mlp(&avg, p)?
        .add(&channel_mlp(&max, p)?)?
        .sigmoid()
        .reshape(&[d])?;
    Ok((x.mul_cols(&w)?, w))
}

/// Position gate `s = σ(conv1d([mean_c x ; max_c x]))`; returns `(x·s, s)`.
pub fn cbam_spatial(x: &Tensor, p: &CbamParams) -> Result<(Tensor, Tensor)> {
    let l = x.shape()[0];
    let avg = x.mean(1)?.reshape(&[l, 1])?;
    let max = x.max(1)?.reshape(&[l, 1])?;
    let pooled = concat(&[avg, max], 1)?;
    let s = conv1d(&pooled, &p.spatial_kernel, &p.spatial_bias)?
        .sigmoid()
        .reshape(&[l])?;
    Ok((x.mul_rows(&s)?, s))
}

/// Channel attention, then spatial attention on its output.
pub fn cbam(x: &Tensor, p: &CbamParams) -> Result<Tensor> {
    let (channel, _) = cbam_channel(x, p)?;
    let (spatial, _) = cbam_spatial(&channel, p)?;
    Ok(spatial)
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub cnn: FusionCnnParams,
    pub cbam: CbamParams,
    pub blocks: Vec<EncoderBlockParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionSwitches {
    pub use_cnn: bool,
    pub use_cbam: bool,
}

impl Default for FusionSwitches {
    fn default() -> Self {
        FusionSwitches {
            use_cnn: true,
            use_cbam: true,
        }
    }
}

/// The fused token sequence `F′`, `[n_t + n_i, d]`.
#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub tokens: Tensor,
    /// Attention matrices of the fusion transformer.
    pub attention: Vec<Tensor>,
}

/// `F′ = Transformer(CBAM(CNN(concat(T, M))))`; disabled stages are skipped.
/// No positional encoding is added here.
pub fn fuse(
    text: &Tensor,
    image: &Tensor,
    p: &FusionParams,
    switches: FusionSwitches,
) -> Result<FusedSequence> {
    let mut x = concat_modalities(text, image)?;
    if switches.use_cnn {
        x = fusion_cnn(&x, &p.cnn)?;
    }
    if switches.use_cbam {
        x = cbam(&x, &p.cbam)?;
    }
    let out = encode(&x, &p.blocks)?;
    Ok(FusedSequence {
        tokens: out.out,
        attention: out.attention,
    })
}

#[derive(Clone, Debug)]
pub struct PoolParams {
    /// `[d, d_a]`
    pub w_a: Tensor,
    /// `[d_a]`
    pub v_a: Tensor,
    /// `[d, d]`
    pub w_r: Tensor,
    /// `[d]`
    pub b_r: Tensor,
}

/// Pooled multimodal representation `R′`, `[1, d]`.
#[derive(Clone, Debug)]
pub struct PooledRepresentation {
    pub vector: Tensor,
    /// Pooling weights over positions, `[L]`.
    pub alpha: Tensor,
}

/// Additive attention pooling: `α = softmax_i(v_a·tanh(W_aᵀ f_i))`,
/// `R′ = GELU(W_rᵀ Σ α_i f_i + b_r)`.
pub fn attention_pool(fused: &Tensor, p: &PoolParams) -> Result<PooledRepresentation> {
    if fused.rank() != 2 {
        return Err(Error::shape("attention_pool", fused.shape(), p.w_a.shape()));
    }
    let l = fused.shape()[0];
    let da = p.v_a.numel();
    let scores = fused
        .matmul(&p.w_a)?
        .tanh()
        .matmul(&p.v_a.reshape(&[da, 1])?)?
        .reshape(&[l])?;
    let alpha = scores.softmax(0)?;
    let pooled = alpha.reshape(&[1, l])?.matmul(fused)?;
    let vector = pooled.matmul(&p.w_r)?.add_bias(&p.b_r)?.gelu();
    Ok(PooledRepresentation { vector, alpha })
}

/// Weighted row sum `Σ α_i f_i`, exposed for inspecting the pooling step.
pub fn pooled_sum(fused: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let l = fused.shape()[0];
    alpha.reshape(&[1, l])?.matmul(fused)
}
