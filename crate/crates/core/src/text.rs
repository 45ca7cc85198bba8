//! Text branch: token embeddings followed by a two-layer bidirectional LSTM.

use crate::error::{Error, Result};
use crate::tensor::{concat, Tensor};

/// Reserved id occupying position 0 of every sequence.
pub const CLASS_TOKEN: usize = 0;
/// Reserved id substituted for dropped tokens during augmentation.
pub const MASK_TOKEN: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize, max_len: usize) -> Result<Self> {
        if ids.is_empty() || ids.len() > max_len {
            return Err(Error::Invalid(format!(
                "token sequence length {} outside 1..={max_len}",
                ids.len()
            )));
        }
        if ids[0] != CLASS_TOKEN {
            return Err(Error::Invalid(format!(
                "position 0 must hold the class token, found {}",
                ids[0]
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::Index {
                index: bad,
                extent: vocab_size,
            });
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Looks up one table row per token.
pub fn embed_tokens(seq: &TokenSequence, table: &Tensor) -> Result<Tensor> {
    table.gather_rows(seq.ids())
}

/// One LSTM direction. Gate blocks along the `4h` axis are ordered
/// input, forget, cell candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    /// `[d_in, 4h]`
    pub w_ih: Tensor,
    /// `[h, 4h]`
    pub w_hh: Tensor,
    /// `[4h]`
    pub bias: Tensor,
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn input_width(&self) -> usize {
        self.w_ih.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let ok = self.w_ih.rank() == 2
            && self.w_ih.shape()[1] == 4 * h
            && self.w_hh.shape() == [h, 4 * h]
            && self.bias.shape() == [4 * h];
        if !ok {
            return Err(Error::shape("lstm", self.w_ih.shape(), self.w_hh.shape()));
        }
        Ok(())
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_ih, &self.w_hh, &self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

/// Gate update given the precomputed input projection `x·W_ih` (`[1, 4h]`).
fn lstm_step(x_proj: &Tensor, h: &Tensor, c: &Tensor, p: &LstmParams) -> Result<(Tensor, Tensor)> {
    let hid = p.hidden();
    let z = x_proj.add(&h.matmul(&p.w_hh)?)?.add_bias(&p.bias)?;
    let i = z.slice(1, 0..hid)?.sigmoid();
    let f = z.slice(1, hid..2 * hid)?.sigmoid();
    let g = z.slice(1, 2 * hid..3 * hid)?.tanh();
    let o = z.slice(1, 3 * hid..4 * hid)?.sigmoid();
    let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
    let h_next = o.mul(&c_next.tanh())?;
    Ok((h_next, c_next))
}

/// Single LSTM step on `[1, d_in]` input with `[1, h]` states.
pub fn lstm_cell(x: &Tensor, h: &Tensor, c: &Tensor, p: &LstmParams) -> Result<(Tensor, Tensor)> {
    p.validate()?;
    let hid = p.hidden();
    if x.shape() != [1, p.input_width()] || h.shape() != [1, hid] || c.shape() != [1, hid] {
        return Err(Error::shape("lstm_cell", x.shape(), p.w_ih.shape()));
    }
    lstm_step(&x.matmul(&p.w_ih)?, h, c, p)
}

/// Runs one direction over the rows of `seq` (already in processing order),
/// returning the hidden state for each step.
fn run_direction(seq: &Tensor, p: &LstmParams, reverse: bool) -> Result<Vec<Tensor>> {
    let n = seq.shape()[0];
    let hid = p.hidden();
    let proj = seq.matmul(&p.w_ih)?;
    let mut h = Tensor::zeros(&[1, hid])?;
    let mut c = Tensor::zeros(&[1, hid])?;
    let mut out = vec![None; n];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    };
    for t in order {
        let (h2, c2) = lstm_step(&proj.row(t)?, &h, &c, p)?;
        out[t] = Some(h2.clone());
        h = h2;
        c = c2;
    }
    Ok(out.into_iter().map(|h| h.expect("every step visited")).collect())
}

/// Bidirectional layer: row `i` of the output is `[fwd_h_i ; bwd_h_i]`, where
/// the backward direction reads the sequence from the end. Zero initial
/// states.
pub fn bilstm_layer(seq: &Tensor, p_fwd: &LstmParams, p_bwd: &LstmParams) -> Result<Tensor> {
    p_fwd.validate()?;
    p_bwd.validate()?;
    if seq.rank() != 2 {
        return Err(Error::shape("bilstm_layer", seq.shape(), p_fwd.w_ih.shape()));
    }
    if seq.shape()[1] != p_fwd.input_width() || seq.shape()[1] != p_bwd.input_width() {
        return Err(Error::shape("bilstm_layer", seq.shape(), p_fwd.w_ih.shape()));
    }
    let fwd = concat(&run_direction(seq, p_fwd, false)?, 0)?;
    let bwd = concat(&run_direction(seq, p_bwd, true)?, 0)?;
    concat(&[fwd, bwd], 1)
}

/// Two stacked bidirectional layers with `h = d_t / 2`, so `[n, d_t]` maps to
/// `[n, d_t]`.
pub fn double_bilstm(seq: &Tensor, layer1: &BiLstmParams, layer2: &BiLstmParams) -> Result<Tensor> {
    let d = *seq.shape().last().unwrap_or(&0);
    if !d.is_multiple_of(2) {
        return Err(Error::Invalid(format!("double_bilstm needs an even width, got {d}")));
    }
    for p in [&layer1.forward, &layer1.backward, &layer2.forward, &layer2.backward] {
        if p.hidden() * 2 != d {
            return Err(Error::Invalid(format!(
                "hidden size {} does not preserve width {d}",
                p.hidden()
            )));
        }
    }
    let mid = bilstm_layer(seq, &layer1.forward, &layer1.backward)?;
    bilstm_layer(&mid, &layer2.forward, &layer2.backward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};

    fn rand_lstm(d_in: usize, h: usize, seed: u64) -> LstmParams {
        let mut rng = stream(seed, &[]);
        LstmParams {
            w_ih: Tensor::new(&[d_in, 4 * h], normal_vec(&mut rng, d_in * 4 * h, 0.4)).unwrap(),
            w_hh: Tensor::new(&[h, 4 * h], normal_vec(&mut rng, h * 4 * h, 0.4)).unwrap(),
            bias: Tensor::new(&[4 * h], normal_vec(&mut rng, 4 * h, 0.4)).unwrap(),
        }
    }

    fn zero_lstm(d_in: usize, h: usize) -> LstmParams {
        LstmParams {
            w_ih: Tensor::zeros(&[d_in, 4 * h]).unwrap(),
            w_hh: Tensor::zeros(&[h, 4 * h]).unwrap(),
            bias: Tensor::zeros(&[4 * h]).unwrap(),
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn token_sequence_invariants() {
        assert!(TokenSequence::new(vec![0, 5, 9], 10, 16).is_ok());
        assert!(TokenSequence::new(vec![], 10, 16).is_err());
        assert!(TokenSequence::new(vec![3, 4], 10, 16).is_err());
        assert!(TokenSequence::new(vec![0, 10], 10, 16).is_err());
        assert!(TokenSequence::new(vec![0; 17], 10, 16).is_err());
    }

    #[test]
    fn embedding_rows() {
        let table = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let one = TokenSequence::new(vec![0], 3, 4).unwrap();
        assert_eq!(embed_tokens(&one, &table).unwrap().data(), &[1., 2.]);
        let rep = TokenSequence::new(vec![0, 2, 2], 3, 4).unwrap();
        let e = embed_tokens(&rep, &table).unwrap();
        assert_eq!(e.row(1).unwrap().data(), e.row(2).unwrap().data());
    }

    #[test]
    fn zero_params_cell() {
        let p = zero_lstm(3, 2);
        let x = Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let z = Tensor::zeros(&[1, 2]).unwrap();
        let (h, c) = lstm_cell(&x, &z, &z, &p).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        assert_eq!(c.data(), &[0.0, 0.0]);

        let v = [0.8, -1.4];
        let c0 = Tensor::matrix(1, 2, v.to_vec()).unwrap();
        let (h, c) = lstm_cell(&x, &z, &c0, &p).unwrap();
        for j in 0..2 {
            assert!((c.data()[j] - 0.5 * v[j]).abs() < 1e-15);
            assert!((h.data()[j] - 0.5 * (0.5 * v[j]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn cell_matches_naive_transcription() {
        let (d, h) = (4, 4);
        let p = rand_lstm(d, h, 11);
        let mut rng = stream(12, &[]);
        let x = normal_vec(&mut rng, d, 1.0);
        let h0 = normal_vec(&mut rng, h, 0.5);
        let c0 = normal_vec(&mut rng, h, 0.5);
        let (hn, cn) = lstm_cell(
            &Tensor::matrix(1, d, x.clone()).unwrap(),
            &Tensor::matrix(1, h, h0.clone()).unwrap(),
            &Tensor::matrix(1, h, c0.clone()).unwrap(),
            &p,
        )
        .unwrap();

        // Per-gate scalar loops, written independently of the tensor path.
        let wih = p.w_ih.data();
        let whh = p.w_hh.data();
        let b = p.bias.data();
        let pre = |gate: usize, j: usize| {
            let col = gate * h + j;
            let mut s = b[col];
            for k in 0..d {
                s += x[k] * wih[k * 4 * h + col];
            }
            for k in 0..h {
                s += h0[k] * whh[k * 4 * h + col];
            }
            s
        };
        for j in 0..h {
            let i = sig(pre(0, j));
            let f = sig(pre(1, j));
            let g = pre(2, j).tanh();
            let o = sig(pre(3, j));
            let c = f * c0[j] + i * g;
            assert!((cn.data()[j] - c).abs() < 1e-12);
            assert!((hn.data()[j] - o * c.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_rejects_mismatch() {
        let p = rand_lstm(3, 2, 1);
        let x = Tensor::zeros(&[1, 4]).unwrap();
        let z = Tensor::zeros(&[1, 2]).unwrap();
        assert!(lstm_cell(&x, &z, &z, &p).is_err());
    }

    #[test]
    fn single_element_bilstm() {
        let (pf, pb) = (rand_lstm(3, 2, 1), rand_lstm(3, 2, 2));
        let x = Tensor::matrix(1, 3, vec![0.5, -0.2, 0.9]).unwrap();
        let out = bilstm_layer(&x, &pf, &pb).unwrap();
        let z = Tensor::zeros(&[1, 2]).unwrap();
        let (hf, _) = lstm_cell(&x, &z, &z, &pf).unwrap();
        let (hb, _) = lstm_cell(&x, &z, &z, &pb).unwrap();
        assert_eq!(&out.data()[..2], hf.data());
        assert_eq!(&out.data()[2..], hb.data());
    }

    #[test]
    fn reversal_symmetry() {
        let (n, d, h) = (6, 4, 3);
        let (pf, pb) = (rand_lstm(d, h, 5), rand_lstm(d, h, 6));
        let mut rng = stream(7, &[]);
        let data = normal_vec(&mut rng, n * d, 1.0);
        let seq = Tensor::matrix(n, d, data.clone()).unwrap();
        let rev: Vec<f64> = (0..n).rev().flat_map(|r| data[r * d..(r + 1) * d].to_vec()).collect();
        let rseq = Tensor::matrix(n, d, rev).unwrap();

        let a = bilstm_layer(&seq, &pf, &pb).unwrap();
        let b = bilstm_layer(&rseq, &pb, &pf).unwrap();
        for i in 0..n {
            let ra = &a.data()[i * 2 * h..(i + 1) * 2 * h];
            let rb = &b.data()[(n - 1 - i) * 2 * h..(n - i) * 2 * h];
            for j in 0..h {
                assert!((ra[j] - rb[h + j]).abs() < 1e-12);
                assert!((ra[h + j] - rb[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn double_layer_shapes_and_zero_params() {
        let (n, d) = (12, 32);
        let zero = BiLstmParams {
            forward: zero_lstm(d, d / 2),
            backward: zero_lstm(d, d / 2),
        };
        let mut rng = stream(3, &[]);
        let seq = Tensor::matrix(n, d, normal_vec(&mut rng, n * d, 1.0)).unwrap();
        let t = double_bilstm(&seq, &zero, &zero).unwrap();
        assert_eq!(t.shape(), &[n, d]);
        assert!(t.data().iter().all(|&v| v == 0.0));

        let l1 = BiLstmParams {
            forward: rand_lstm(d, d / 2, 1),
            backward: rand_lstm(d, d / 2, 2),
        };
        let l2 = BiLstmParams {
            forward: rand_lstm(d, d / 2, 3),
            backward: rand_lstm(d, d / 2, 4),
        };
        let mid = bilstm_layer(&seq, &l1.forward, &l1.backward).unwrap();
        assert_eq!(mid.shape(), &[n, d]);
        let t = double_bilstm(&seq, &l1, &l2).unwrap();
        assert_eq!(t.shape(), &[n, d]);
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        let again = double_bilstm(&seq, &l1, &l2).unwrap();
        assert!(t.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn odd_width_rejected() {
        let p = BiLstmParams {
            forward: zero_lstm(3, 1),
            backward: zero_lstm(3, 1),
        };
        let seq = Tensor::zeros(&[2, 3]).unwrap();
        assert!(double_bilstm(&seq, &p, &p).is_err());
    }
}
