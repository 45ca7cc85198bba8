//! Labelled multimodal samples, the on-disk dataset format and a
//! class-conditioned synthetic generator.
//!
//! A dataset directory holds `manifest.json` and `records.jsonl` (one JSON
//! record per line). Reals are written with shortest round-trip formatting,
//! so save → load reproduces every value bit-exactly.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageFeatureMap;
use crate::rng::{normal_vec, stream, TAG_SYNTH};
use crate::text::{TokenSequence, CLASS_TOKEN};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";

/// Number of indicative tokens in each class's token profile.
const PROFILE_TOKENS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub label: usize,
    pub tokens: Vec<usize>,
    pub image: ImageFeatureMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub per_class: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub classes: usize,
    pub vocab_size: usize,
    pub n_t_max: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
}

impl Manifest {
    /// Checks one record against the manifest's dimensions and label space.
    pub fn validate_record(&self, r: &SampleRecord) -> Result<()> {
        let ctx = |m: String| Error::Dataset(format!("record {}: {m}", r.id));
        if r.label >= self.classes {
            return Err(ctx(format!("label {} ≥ classes {}", r.label, self.classes)));
        }
        TokenSequence::new(r.tokens.clone(), self.vocab_size, self.n_t_max)
            .map_err(|e| ctx(e.to_string()))?;
        r.image
            .clone()
            .ingest(self.channels, self.height, self.width)
            .map_err(|e| ctx(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn new(manifest: Manifest, records: Vec<SampleRecord>) -> Result<Self> {
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset version {} (expected {FORMAT_VERSION})",
                manifest.version
            )));
        }
        if records.len() != manifest.count {
            return Err(Error::Dataset(format!(
                "manifest declares {} records, found {}",
                manifest.count,
                records.len()
            )));
        }
        let mut seen = HashSet::new();
        for r in &records {
            manifest.validate_record(r)?;
            if !seen.insert(r.id) {
                return Err(Error::Dataset(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(Dataset { manifest, records })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)? + "\n";
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let rpath = dir.join(RECORDS_FILE);
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(&rpath).map_err(|e| Error::io(&rpath, e))?;
        f.write_all(&out).map_err(|e| Error::io(&rpath, e))?;
        Ok(())
    }

    /// Loads and validates a dataset directory; violations name the record.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.is_file() {
            return Err(Error::Dataset(format!("no manifest found in {}", dir.display())));
        }
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("malformed manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset version {} (expected {FORMAT_VERSION})",
                manifest.version
            )));
        }
        let rpath = dir.join(RECORDS_FILE);
        let body = fs::read_to_string(&rpath).map_err(|e| Error::io(&rpath, e))?;
        let mut records = Vec::new();
        for (lineno, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(line).map_err(|e| {
                let who = leading_id(line)
                    .map(|id| format!("record {id}"))
                    .unwrap_or_else(|| format!("line {}", lineno + 1));
                Error::Dataset(format!("{who}: malformed record: {e}"))
            })?;
            records.push(record);
        }
        Dataset::new(manifest, records)
    }
}

/// Best-effort id recovery from a damaged record line.
fn leading_id(line: &str) -> Option<u64> {
    let rest = &line[line.find("\"id\"")? + 4..];
    let rest = rest.trim_start().strip_prefix(':')?.trim_start();
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub vocab_size: usize,
    pub n_t_max: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation of image noise around the class centroid; also sets
    /// the share of off-profile tokens (`min(noise, 1) / 2`).
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            per_class: 30,
            vocab_size: 256,
            n_t_max: 16,
            channels: 8,
            height: 4,
            width: 4,
            seed: 42,
            noise: 1.0,
        }
    }
}

/// Class-conditioned generator. Each class gets a token profile (a few
/// indicative tokens with random weights) and an image centroid; samples
/// mix profile and uniform tokens and add Gaussian noise to the centroid.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
    if spec.classes < 2 {
        return fail("need at least 2 classes");
    }
    if spec.per_class < 4 {
        return fail("per_class must be at least 4");
    }
    if spec.vocab_size < 2 + PROFILE_TOKENS {
        return fail("vocab_size too small for class token profiles");
    }
    if spec.n_t_max < 2 || spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return fail("n_t_max must be ≥ 2 and feature-map extents positive");
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return fail("noise must be finite and non-negative");
    }

    let map_len = spec.channels * spec.height * spec.width;
    let mut class_rng = stream(spec.seed, &[TAG_SYNTH, 0]);
    let profiles: Vec<(Vec<usize>, Vec<f64>)> = (0..spec.classes)
        .map(|_| {
            let tokens: Vec<usize> = sample(&mut class_rng, spec.vocab_size - 2, PROFILE_TOKENS)
                .into_iter()
                .map(|t| t + 2)
                .collect();
            let weights = (0..PROFILE_TOKENS)
                .map(|_| class_rng.random_range(0.5..1.5))
                .collect();
            (tokens, weights)
        })
        .collect();
    let centroids: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| normal_vec(&mut class_rng, map_len, 1.0))
        .collect();

    let off_profile = spec.noise.min(1.0) / 2.0;
    let min_len = (spec.n_t_max / 2).max(2);
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    for i in 0..spec.per_class {
        for (label, ((ptoks, pweights), centroid)) in profiles.iter().zip(&centroids).enumerate() {
            let id = records.len() as u64;
            let mut rng = stream(spec.seed, &[TAG_SYNTH, 1, id]);
            let len = rng.random_range(min_len..=spec.n_t_max);
            let total: f64 = pweights.iter().sum();
            let mut tokens = vec![CLASS_TOKEN];
            for _ in 1..len {
                let tok = if rng.random::<f64>() < off_profile {
                    rng.random_range(2..spec.vocab_size)
                } else {
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = ptoks[PROFILE_TOKENS - 1];
                    for (t, w) in ptoks.iter().zip(pweights) {
                        if u < *w {
                            pick = *t;
                            break;
                        }
                        u -= w;
                    }
                    pick
                };
                tokens.push(tok);
            }
            let noise = normal_vec(&mut rng, map_len, spec.noise);
            let data = centroid.iter().zip(&noise).map(|(c, n)| c + n).collect();
            records.push(SampleRecord {
                id,
                label,
                tokens,
                image: ImageFeatureMap {
                    channels: spec.channels,
                    height: spec.height,
                    width: spec.width,
                    data,
                },
            });
            let _ = i;
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        count: records.len(),
        classes: spec.classes,
        vocab_size: spec.vocab_size,
        n_t_max: spec.n_t_max,
        channels: spec.channels,
        height: spec.height,
        width: spec.width,
        generator: Some(GeneratorInfo {
            seed: spec.seed,
            per_class: spec.per_class,
            noise: spec.noise,
        }),
    };
    Dataset::new(manifest, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_shares_centroids() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.records.len(), 90);
        for k in 0..3 {
            let of_class: Vec<&SampleRecord> = ds.records.iter().filter(|r| r.label == k).collect();
            assert_eq!(of_class.len(), 30);
            assert!(of_class.iter().all(|r| r.image.data == of_class[0].image.data));
        }
    }

    #[test]
    fn generator_validation() {
        let bad = SyntheticSpec {
            per_class: 3,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn leading_id_recovery() {
        assert_eq!(leading_id(r#"{"id":17,"label":0,"tok"#), Some(17));
        assert_eq!(leading_id(r#"{"id": 5"#), Some(5));
        assert_eq!(leading_id(r#"{"lab"#), None);
    }

    #[test]
    fn manifest_rejects_bad_records() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let m = &ds.manifest;
        let mut r = ds.records[0].clone();
        r.label = 3;
        assert!(m.validate_record(&r).is_err());
        let mut r = ds.records[0].clone();
        r.image.height = 2;
        r.image.width = 8;
        let err = m.validate_record(&r).unwrap_err().to_string();
        assert!(err.contains("record 0"), "{err}");
        let mut r = ds.records[0].clone();
        r.tokens[0] = 5;
        assert!(m.validate_record(&r).is_err());
    }
}
