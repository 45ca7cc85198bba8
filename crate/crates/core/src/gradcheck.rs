//! Central finite-difference verification of autodiff gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub probed_count: usize,
}

impl GradReport {
    /// Folds another report into this one.
    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            probed_count: self.probed_count + other.probed_count,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    eps: f64,
    max_probes: Option<usize>,
    seed: u64,
}

impl GradCheck {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 1e-2) {
            return Err(Error::Invalid(format!("gradcheck eps must be in (0, 1e-2], got {eps}")));
        }
        Ok(GradCheck {
            eps,
            max_probes: None,
            seed: 0,
        })
    }

    /// Probe at most `count` coordinates, chosen uniformly with `seed`.
    pub fn probes(mut self, count: usize, seed: u64) -> Self {
        self.max_probes = Some(count.max(1));
        self.seed = seed;
        self
    }

    /// Runs `f` once with trainable copies of `inputs`, back-propagates, and
    /// compares the resulting gradients with central differences.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradReport>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let leaves: Vec<Tensor> = inputs.iter().map(Tensor::to_param).collect();
        let out = f(&leaves)?;
        out.backward()?;
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect();
        self.compare(f, inputs, &analytic)
    }

    /// Compares supplied gradients against central differences of `f`.
    pub fn compare<F>(&self, f: F, inputs: &[Tensor], analytic: &[Vec<f64>]) -> Result<GradReport>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        if analytic.len() != inputs.len()
            || analytic.iter().zip(inputs).any(|(a, t)| a.len() != t.numel())
        {
            return Err(Error::Invalid("analytic gradients do not match inputs".into()));
        }
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i)))
            .collect();
        if coords.is_empty() {
            return Err(Error::Invalid("gradcheck needs at least one coordinate".into()));
        }
        let chosen: Vec<(usize, usize)> = match self.max_probes {
            Some(n) if n < coords.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut picked = sample(&mut rng, coords.len(), n).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|i| coords[i]).collect()
            }
            _ => coords,
        };

        let eval = |t: usize, i: usize, delta: f64| -> Result<f64> {
            let probe: Vec<Tensor> = inputs
                .iter()
                .enumerate()
                .map(|(k, x)| {
                    if k == t {
                        let mut d = x.to_vec();
                        d[i] += delta;
                        Tensor::new(x.shape(), d)
                    } else {
                        Ok(x.detach())
                    }
                })
                .collect::<Result<_>>()?;
            let v = f(&probe)?.item()?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradcheck objective at input {t}, coordinate {i}"
                )));
            }
            Ok(v)
        };

        let mut report = GradReport {
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            probed_count: 0,
        };
        for (t, i) in chosen {
            let numeric = (eval(t, i, self.eps)? - eval(t, i, -self.eps)?) / (2.0 * self.eps);
            let a = analytic[t][i];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.probed_count += 1;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(randn(6, 1));
        let w = Tensor::vector(randn(6, 2));
        let report = GradCheck::new(1e-5)
            .unwrap()
            .run(|v| v[0].mul(&w)?.sum(), &[x])
            .unwrap();
        assert!(report.max_abs_err < 1e-9, "{report:?}");
        assert_eq!(report.probed_count, 6);
    }

    #[test]
    fn sigmoid_sum() {
        let x = Tensor::vector(randn(10, 3));
        let report = GradCheck::new(1e-5)
            .unwrap()
            .run(|v| v[0].sigmoid().sum(), &[x])
            .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn detects_corrupted_gradient() {
        // Doubling every gradient gives |2n − n| / max(2n, n) = 1/2 exactly.
        let x = Tensor::vector(randn(8, 4));
        let f = |v: &[Tensor]| v[0].tanh().sum();
        let leaf = x.to_param();
        f(std::slice::from_ref(&leaf)).unwrap().backward().unwrap();
        let doubled: Vec<f64> = leaf.grad().unwrap().iter().map(|g| 2.0 * g).collect();
        let report = GradCheck::new(1e-5)
            .unwrap()
            .compare(f, &[x], &[doubled])
            .unwrap();
        assert!((report.max_rel_err - 0.5).abs() < 1e-6, "{report:?}");
    }

    #[test]
    fn eps_range_and_non_finite() {
        assert!(GradCheck::new(0.0).is_err());
        assert!(GradCheck::new(0.1).is_err());
        let x = Tensor::vector(vec![1e-6]);
        let err = GradCheck::new(1e-2)
            .unwrap()
            .run(|v| v[0].log()?.sum(), &[x])
            .unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
        let big = Tensor::vector(vec![800.0]);
        let err = GradCheck::new(1e-5)
            .unwrap()
            .run(|v| v[0].exp().sum(), &[big])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn probes_subsample() {
        let x = Tensor::vector(randn(100, 5));
        let r = GradCheck::new(1e-5)
            .unwrap()
            .probes(7, 9)
            .run(|v| v[0].exp().sum(), &[x])
            .unwrap();
        assert_eq!(r.probed_count, 7);
    }
}
