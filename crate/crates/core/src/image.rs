//! Image branch: feature-map projection to a token sequence, sinusoidal
//! positions, and a transformer encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{encode, BlockOutput, EncoderBlockParams};

/// A `[channels, height, width]` feature map, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatureMap {
    #[serde(rename = "c")]
    pub channels: usize,
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageFeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageFeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Checks a map against the expected `(c, h, w)`.
    pub fn ingest(self, channels: usize, height: usize, width: usize) -> Result<Self> {
        if (self.channels, self.height, self.width) != (channels, height, width) {
            return Err(Error::Dataset(format!(
                "feature map is {}x{}x{}, expected {channels}x{height}x{width}",
                self.channels, self.height, self.width
            )));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Dataset("feature map extents must be positive".into()));
        }
        let expected = self.channels * self.height * self.width;
        if self.data.len() != expected {
            return Err(Error::Dataset(format!(
                "feature map holds {} values, expected {expected}",
                self.data.len()
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("non-finite feature value at index {pos}")));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// `[h·w, c]` matrix: one row per spatial position, row-major over (h, w).
    pub fn position_matrix(&self) -> Result<Tensor> {
        let (c, n) = (self.channels, self.positions());
        let mut data = vec![0.0; n * c];
        for ch in 0..c {
            for pos in 0..n {
                data[pos * c + ch] = self.data[ch * n + pos];
            }
        }
        Tensor::matrix(n, c, data)
    }
}

/// `M₁ = flatten(M_c·W_M + b_M)`: each spatial position's channel vector is
/// projected to `d_t`, giving `[h·w, d_t]`.
pub fn project_flatten(map: &ImageFeatureMap, w_m: &Tensor, b_m: &Tensor) -> Result<Tensor> {
    if w_m.rank() != 2 || w_m.shape()[0] != map.channels {
        return Err(Error::shape(
            "project_flatten",
            &[map.channels, map.height, map.width],
            w_m.shape(),
        ));
    }
    map.position_matrix()?.matmul(w_m)?.add_bias(b_m)
}

/// Fixed sinusoidal encodings, `[n, d]`.
pub fn positional_encoding(n: usize, d: usize) -> Result<Tensor> {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let k = (i / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(k as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(n, d, data)
}

/// Image tokens `M₁` → globally contextualised tokens `M`.
pub fn encode_image(
    m1: &Tensor,
    blocks: &[EncoderBlockParams],
    positional: bool,
) -> Result<BlockOutput> {
    if blocks.is_empty() {
        return Err(Error::Config("image encoder needs at least one block".into()));
    }
    let x = if positional {
        let (n, d) = (m1.shape()[0], m1.shape()[1]);
        m1.add(&positional_encoding(n, d)?)?
    } else {
        m1.clone()
    };
    encode(&x, blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};
    use crate::transformer::tests::random_block;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> ImageFeatureMap {
        ImageFeatureMap {
            channels: c,
            height: h,
            width: w,
            data: normal_vec(&mut stream(seed, &[]), c * h * w, 1.0),
        }
    }

    #[test]
    fn ingest_checks() {
        assert!(ImageFeatureMap::zeros(8, 4, 4).ingest(8, 4, 4).is_ok());
        assert!(ImageFeatureMap::zeros(8, 2, 8).ingest(8, 4, 4).is_err());
        let mut bad = ImageFeatureMap::zeros(2, 2, 2);
        bad.data[3] = f64::NAN;
        assert!(bad.ingest(2, 2, 2).is_err());
        let mut short = ImageFeatureMap::zeros(2, 2, 2);
        short.data.pop();
        assert!(short.ingest(2, 2, 2).is_err());
    }

    #[test]
    fn zero_projection_gives_bias_rows() {
        let map = random_map(3, 2, 2, 1);
        let b = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
        let m1 = project_flatten(&map, &Tensor::zeros(&[3, 4]).unwrap(), &b).unwrap();
        assert_eq!(m1.shape(), &[4, 4]);
        for r in 0..4 {
            assert_eq!(m1.row(r).unwrap().data(), b.data());
        }
    }

    #[test]
    fn identity_projection_reads_channel_vectors() {
        let (c, h, w) = (4, 2, 3);
        let map = random_map(c, h, w, 2);
        let mut eye = vec![0.0; c * c];
        (0..c).for_each(|i| eye[i * c + i] = 1.0);
        let m1 = project_flatten(
            &map,
            &Tensor::matrix(c, c, eye).unwrap(),
            &Tensor::zeros(&[c]).unwrap(),
        )
        .unwrap();
        for k in 0..h * w {
            for ch in 0..c {
                assert_eq!(m1.data()[k * c + ch], map.data[ch * h * w + k]);
            }
        }
    }

    #[test]
    fn projection_matches_naive_loop() {
        let (c, h, w, d) = (5, 3, 2, 6);
        let map = random_map(c, h, w, 3);
        let mut rng = stream(4, &[]);
        let wm = normal_vec(&mut rng, c * d, 1.0);
        let bm = normal_vec(&mut rng, d, 1.0);
        let m1 = project_flatten(
            &map,
            &Tensor::matrix(c, d, wm.clone()).unwrap(),
            &Tensor::vector(bm.clone()),
        )
        .unwrap();
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                for j in 0..d {
                    let mut s = bm[j];
                    for ch in 0..c {
                        s += map.data[(ch * h + y) * w + x] * wm[ch * d + j];
                    }
                    assert!((m1.data()[k * d + j] - s).abs() < 1e-12);
                }
            }
        }
        assert!(project_flatten(&map, &Tensor::zeros(&[4, d]).unwrap(), &Tensor::vector(bm)).is_err());
    }

    #[test]
    fn encoder_shapes_and_block_requirement() {
        let (n, d) = (16, 32);
        let m1 = Tensor::matrix(n, d, normal_vec(&mut stream(5, &[]), n * d, 1.0)).unwrap();
        assert!(matches!(encode_image(&m1, &[], true), Err(Error::Config(_))));
        let blocks = vec![random_block(d, 4, 6), random_block(d, 4, 7)];
        let out = encode_image(&m1, &blocks, true).unwrap();
        assert_eq!(out.out.shape(), &[16, 32]);
        assert_eq!(out.attention.len(), 8);
    }

    #[test]
    fn equivariant_without_positions() {
        let (n, d) = (5, 8);
        let blocks = vec![random_block(d, 2, 8), random_block(d, 2, 9)];
        let data = normal_vec(&mut stream(10, &[]), n * d, 1.0);
        let perm = [4, 2, 0, 3, 1];
        let pdata: Vec<f64> = perm.iter().flat_map(|&r| data[r * d..(r + 1) * d].to_vec()).collect();
        let a = encode_image(&Tensor::matrix(n, d, data).unwrap(), &blocks, false).unwrap().out;
        let b = encode_image(&Tensor::matrix(n, d, pdata).unwrap(), &blocks, false).unwrap().out;
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..d {
                assert!((b.data()[i * d + j] - a.data()[src * d + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 4).unwrap();
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[6] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }
}
