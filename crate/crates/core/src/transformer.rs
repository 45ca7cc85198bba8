//! Post-norm transformer encoder block shared by the image encoder and the
//! fusion stage.

use crate::error::{Error, Result};
use crate::tensor::{concat, Tensor};

#[derive(Clone, Debug)]
pub struct EncoderBlockParams {
    pub heads: usize,
    /// `[d, d]` projections.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    /// Feed-forward `d → ffn → d`.
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl EncoderBlockParams {
    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w_1, &self.b_1, &self.w_2,
            &self.b_2, &self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    pub const NAMES: [&'static str; 12] = [
        "w_q", "w_k", "w_v", "w_o", "w_1", "b_1", "w_2", "b_2", "ln1_gain", "ln1_bias",
        "ln2_gain", "ln2_bias",
    ];
}

/// Block output plus the per-head attention matrices (`[n, n]`, row-stochastic).
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub out: Tensor,
    pub attention: Vec<Tensor>,
}

/// H-head scaled dot-product self-attention, scale `1/√(d/H)`.
pub fn multi_head_attention(x: &Tensor, p: &EncoderBlockParams) -> Result<BlockOutput> {
    let d = p.width();
    if p.heads == 0 || !d.is_multiple_of(p.heads) {
        return Err(Error::Invalid(format!(
            "width {d} not divisible by {} heads",
            p.heads
        )));
    }
    if x.rank() != 2 || x.shape()[1] != d {
        return Err(Error::shape("multi_head_attention", x.shape(), p.w_q.shape()));
    }
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.matmul(&p.w_q)?;
    let k = x.matmul(&p.w_k)?;
    let v = x.matmul(&p.w_v)?;
    let mut heads = Vec::with_capacity(p.heads);
    let mut attention = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(1, cols.clone())?;
        let kh = k.slice(1, cols.clone())?;
        let vh = v.slice(1, cols)?;
        let a = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1)?;
        heads.push(a.matmul(&vh)?);
        attention.push(a);
    }
    let out = concat(&heads, 1)?.matmul(&p.w_o)?;
    Ok(BlockOutput { out, attention })
}

/// `y = LN(x + MHA(x))`, `out = LN(y + FFN(y))`, FFN = `W₂·GELU(W₁·y + b₁) + b₂`.
pub fn transformer_block(x: &Tensor, p: &EncoderBlockParams) -> Result<BlockOutput> {
    let mha = multi_head_attention(x, p)?;
    let y = x.add(&mha.out)?.layer_norm(&p.ln1_gain, &p.ln1_bias)?;
    let ffn = y
        .matmul(&p.w_1)?
        .add_bias(&p.b_1)?
        .gelu()
        .matmul(&p.w_2)?
        .add_bias(&p.b_2)?;
    let out = y.add(&ffn)?.layer_norm(&p.ln2_gain, &p.ln2_bias)?;
    Ok(BlockOutput {
        out,
        attention: mha.attention,
    })
}

/// Applies `blocks` in order, collecting every attention matrix.
pub fn encode(x: &Tensor, blocks: &[EncoderBlockParams]) -> Result<BlockOutput> {
    let mut out = x.clone();
    let mut attention = Vec::new();
    for b in blocks {
        let r = transformer_block(&out, b)?;
        out = r.out;
        attention.extend(r.attention);
    }
    Ok(BlockOutput { out, attention })
}
