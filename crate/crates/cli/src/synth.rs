//! Seeded synthetic multi-modal multi-label data. Every active label injects
//! a label-specific rank-1 temporal pattern into a subset of the modalities
//! on top of Gaussian noise, so a model has to combine modalities to read all
//! labels. One pairwise co-occurrence is planted: the last label raises the
//! probability of the third-from-last, giving correlation heads a recoverable
//! signal. Generation is a pure function of (spec, seed).

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::manifest::{
    Alignment, DatasetManifest, ModalityShape, ModalityShapes, SplitEntry,
};
use crate::records::{write_split, RawMatrix, RawRecord};
use mmer_core::rng::{next_normal, RngPool};

#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub visual_len: usize,
    pub audio_len: usize,
    pub text_len: usize,
    pub aligned: bool,
    pub labels: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Gaussian noise standard deviation under the patterns.
    pub noise: f64,
    /// Pattern strength per injected modality.
    pub amplitude: f64,
    /// Marginal probability of each label before the planted boost.
    pub base_rate: f64,
    /// Added to the target label's probability when the source label fired.
    pub cooccur_boost: f64,
    /// How many modalities each label's pattern spans (1..=3).
    pub pattern_modalities: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            visual_dim: 8,
            audio_dim: 8,
            text_dim: 12,
            visual_len: 10,
            audio_len: 10,
            text_len: 10,
            aligned: true,
            labels: 6,
            train: 200,
            valid: 50,
            test: 50,
            noise: 0.5,
            amplitude: 3.0,
            base_rate: 0.3,
            cooccur_boost: 0.4,
            pattern_modalities: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labels == 0 {
            return Err(contract("synthetic spec: labels must be positive"));
        }
        if self.train == 0 || self.valid == 0 {
            return Err(contract(
                "synthetic spec: train and valid splits must be non-empty",
            ));
        }
        for (name, v) in [
            ("visual_dim", self.visual_dim),
            ("audio_dim", self.audio_dim),
            ("text_dim", self.text_dim),
            ("visual_len", self.visual_len),
            ("audio_len", self.audio_len),
            ("text_len", self.text_len),
        ] {
            if v == 0 {
                return Err(contract(format!("synthetic spec: {name} must be positive")));
            }
        }
        if self.aligned && !(self.visual_len == self.audio_len && self.audio_len == self.text_len)
        {
            return Err(contract(
                "synthetic spec: aligned generation needs equal sequence lengths",
            ));
        }
        if self.noise < 0.0 || self.amplitude < 0.0 {
            return Err(contract("synthetic spec: noise and amplitude must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.base_rate)
            || !(0.0..=1.0).contains(&self.cooccur_boost)
        {
            return Err(contract("synthetic spec: rates must lie in [0,1]"));
        }
        if !(1..=3).contains(&self.pattern_modalities) {
            return Err(contract("synthetic spec: pattern_modalities must be 1..=3"));
        }
        Ok(())
    }

    fn dims(&self) -> [(usize, usize); 3] {
        [
            (self.visual_dim, self.visual_len),
            (self.audio_dim, self.audio_len),
            (self.text_dim, self.text_len),
        ]
    }

    /// Planted dependency: `source` fires → `target` becomes more likely.
    pub fn planted_pair(&self) -> (usize, usize) {
        let source = self.labels - 1;
        let target = if self.labels >= 3 { self.labels - 3 } else { 0 };
        (source, target)
    }

    pub fn manifest(&self, name: &str) -> DatasetManifest {
        DatasetManifest {
            name: name.to_string(),
            alignment: if self.aligned {
                Alignment::Aligned
            } else {
                Alignment::Unaligned
            },
            label_names: (0..self.labels).map(|i| format!("label{i}")).collect(),
            instance_count: self.train + self.valid + self.test,
            modalities: ModalityShapes {
                visual: ModalityShape {
                    dim: self.visual_dim,
                    len: self.visual_len,
                },
                audio: ModalityShape {
                    dim: self.audio_dim,
                    len: self.audio_len,
                },
                text: ModalityShape {
                    dim: self.text_dim,
                    len: self.text_len,
                },
            },
            splits: [
                ("train", "train.bin", self.train),
                ("valid", "valid.bin", self.valid),
                ("test", "test.bin", self.test),
            ]
            .into_iter()
            .filter(|(_, _, n)| *n > 0)
            .map(|(name, file, count)| SplitEntry {
                name: name.into(),
                file: file.into(),
                count,
            })
            .collect(),
        }
    }
}

/// A label's rank-1 pattern in one modality: `amplitude · u vᵀ` with unit
/// `u ∈ R^{d}`, `v ∈ R^{τ_max}` (truncated to each record's length).
pub struct LabelPattern {
    pub modality: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| next_normal::<f64>(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// The full pattern bank, deterministic in (spec, seed): label `j` spans
/// modalities `j % 3, (j+1) % 3, ...`.
pub fn pattern_bank(spec: &SynthSpec, seed: u64) -> Vec<Vec<LabelPattern>> {
    let pool = RngPool::new(seed);
    let mut rng = pool.stream("synth.patterns");
    let dims = spec.dims();
    (0..spec.labels)
        .map(|j| {
            (0..spec.pattern_modalities)
                .map(|k| {
                    let modality = (j + k) % 3;
                    let (d, len) = dims[modality];
                    LabelPattern {
                        modality,
                        u: unit_vec(&mut rng, d),
                        v: unit_vec(&mut rng, len),
                    }
                })
                .collect()
        })
        .collect()
}

fn draw_labels(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (source, target) = spec.planted_pair();
    let mut labels = vec![0u8; spec.labels];
    // descending order so the source label exists before its target
    for j in (0..spec.labels).rev() {
        let mut p = spec.base_rate;
        if j == target && target != source && labels[source] == 1 {
            p = (p + spec.cooccur_boost).min(0.95);
        }
        labels[j] = u8::from(rng.gen::<f64>() < p);
    }
    labels
}

fn generate_record(
    spec: &SynthSpec,
    patterns: &[Vec<LabelPattern>],
    rng: &mut ChaCha8Rng,
) -> RawRecord {
    let labels = draw_labels(spec, rng);
    let dims = spec.dims();
    let lens: Vec<usize> = dims
        .iter()
        .map(|(_, max_len)| {
            if spec.aligned {
                *max_len
            } else {
                let lo = (max_len / 2).max(1);
                rng.gen_range(lo..=*max_len)
            }
        })
        .collect();

    let mut mats: Vec<RawMatrix> = dims
        .iter()
        .zip(&lens)
        .map(|((d, _), len)| {
            let data: Vec<f32> = (0..d * len)
                .map(|_| (next_normal::<f64>(rng) * spec.noise) as f32)
                .collect();
            RawMatrix::new(*d, *len, data)
        })
        .collect();

    for (j, label_patterns) in patterns.iter().enumerate() {
        if labels[j] == 0 {
            continue;
        }
        for p in label_patterns {
            let mat = &mut mats[p.modality];
            let cols = mat.cols;
            for (r, ur) in p.u.iter().enumerate() {
                for (c, vc) in p.v[..cols].iter().enumerate() {
                    mat.data[r * cols + c] += (spec.amplitude * ur * vc) as f32;
                }
            }
        }
    }

    let mut it = mats.into_iter();
    RawRecord {
        visual: it.next().unwrap(),
        audio: it.next().unwrap(),
        text: it.next().unwrap(),
        labels,
    }
}

/// All splits in memory, in manifest order.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<(DatasetManifest, Vec<Vec<RawRecord>>)> {
    spec.validate()?;
    let manifest = spec.manifest(&format!("synthetic-{seed}"));
    let patterns = pattern_bank(spec, seed);
    let pool = RngPool::new(seed);
    let mut rng = pool.stream("synth.records");
    let splits = manifest
        .splits
        .iter()
        .map(|entry| {
            (0..entry.count)
                .map(|_| generate_record(spec, &patterns, &mut rng))
                .collect()
        })
        .collect();
    Ok((manifest, splits))
}

/// Generates and writes `manifest.json` plus one binary file per split.
pub fn generate_to_dir(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let (manifest, splits) = generate(spec, seed)?;
    manifest.save(dir)?;
    for (entry, records) in manifest.splits.iter().zip(&splits) {
        write_split(&dir.join(&entry.file), &manifest, records)?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn same_seed_gives_byte_identical_datasets() {
        let spec = SynthSpec {
            train: 12,
            valid: 4,
            test: 4,
            ..SynthSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_to_dir(&spec, 7, d1.path()).unwrap();
        generate_to_dir(&spec, 7, d2.path()).unwrap();
        for file in ["manifest.json", "train.bin", "valid.bin", "test.bin"] {
            let a = fs::read(d1.path().join(file)).unwrap();
            let b = fs::read(d2.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs across identical seeds");
        }
        // a different seed changes the data
        let d3 = tempfile::tempdir().unwrap();
        generate_to_dir(&spec, 8, d3.path()).unwrap();
        assert_ne!(
            fs::read(d1.path().join("train.bin")).unwrap(),
            fs::read(d3.path().join("train.bin")).unwrap()
        );
    }

    #[test]
    fn planted_cooccurrence_shows_up_in_frequencies() {
        let spec = SynthSpec {
            train: 10_000,
            valid: 1,
            test: 0,
            ..SynthSpec::default()
        };
        let (_, splits) = generate(&spec, 11).unwrap();
        let records = &splits[0];
        let (source, target) = spec.planted_pair();
        let n = records.len() as f64;
        let p_target = records.iter().filter(|r| r.labels[target] == 1).count() as f64 / n;
        let with_source: Vec<_> = records.iter().filter(|r| r.labels[source] == 1).collect();
        let p_target_given_source = with_source
            .iter()
            .filter(|r| r.labels[target] == 1)
            .count() as f64
            / with_source.len() as f64;
        assert!(
            p_target_given_source > p_target + 0.2,
            "P(target|source)={p_target_given_source} vs P(target)={p_target}"
        );
    }

    #[test]
    fn unaligned_lengths_vary_within_bounds() {
        let spec = SynthSpec {
            aligned: false,
            visual_len: 12,
            audio_len: 9,
            text_len: 5,
            train: 50,
            valid: 5,
            test: 0,
            ..SynthSpec::default()
        };
        let (_, splits) = generate(&spec, 3).unwrap();
        let mut seen_lengths = std::collections::BTreeSet::new();
        for r in &splits[0] {
            assert!(r.visual.cols >= 6 && r.visual.cols <= 12);
            assert!(r.audio.cols >= 4 && r.audio.cols <= 9);
            assert!(r.text.cols >= 2 && r.text.cols <= 5);
            seen_lengths.insert(r.visual.cols);
        }
        assert!(seen_lengths.len() > 1, "lengths should actually vary");
    }

    #[test]
    fn noiseless_features_are_linearly_separable_by_least_squares() {
        // Ridge-regularized least squares on the concatenated raw features
        // must recover every label exactly when the noise floor is zero.
        let spec = SynthSpec {
            noise: 0.0,
            train: 120,
            valid: 1,
            test: 0,
            visual_len: 6,
            audio_len: 6,
            text_len: 6,
            visual_dim: 5,
            audio_dim: 5,
            text_dim: 7,
            ..SynthSpec::default()
        };
        let (_, splits) = generate(&spec, 21).unwrap();
        let records = &splits[0];
        let n = records.len();
        let f: usize = 5 * 6 + 5 * 6 + 7 * 6;

        let mut x = vec![0.0f64; n * (f + 1)];
        for (i, r) in records.iter().enumerate() {
            let row = &mut x[i * (f + 1)..(i + 1) * (f + 1)];
            let mut k = 0;
            for m in [&r.visual, &r.audio, &r.text] {
                for v in &m.data {
                    row[k] = *v as f64;
                    k += 1;
                }
            }
            row[f] = 1.0;
        }

        // normal equations with a small ridge, solved by Gaussian elimination
        let dim = f + 1;
        let mut xtx = vec![0.0f64; dim * dim];
        for i in 0..n {
            let row = &x[i * dim..(i + 1) * dim];
            for a in 0..dim {
                if row[a] == 0.0 {
                    continue;
                }
                for b in 0..dim {
                    xtx[a * dim + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..dim {
            xtx[a * dim + a] += 1e-8;
        }

        for label in 0..spec.labels {
            let mut rhs = vec![0.0f64; dim];
            for (i, r) in records.iter().enumerate() {
                let y = r.labels[label] as f64;
                for a in 0..dim {
                    rhs[a] += x[i * dim + a] * y;
                }
            }
            let w = solve(&mut xtx.clone(), &mut rhs.clone());
            let mut correct = 0;
            for (i, r) in records.iter().enumerate() {
                let score: f64 = (0..dim).map(|a| x[i * dim + a] * w[a]).sum();
                let pred = u8::from(score >= 0.5);
                if pred == r.labels[label] {
                    correct += 1;
                }
            }
            assert_eq!(correct, n, "label {label} not perfectly separable");
        }
    }

    fn solve(a: &mut [f64], b: &mut [f64]) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if a[r * n + col].abs() > a[pivot * n + col].abs() {
                    pivot = r;
                }
            }
            if pivot != col {
                for c in 0..n {
                    a.swap(col * n + c, pivot * n + c);
                }
                b.swap(col, pivot);
            }
            let diag = a[col * n + col];
            if diag.abs() < 1e-15 {
                continue;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a[r * n + col] / diag;
                if factor == 0.0 {
                    continue;
                }
                for c in col..n {
                    a[r * n + c] -= factor * a[col * n + c];
                }
                b[r] -= factor * b[col];
            }
        }
        (0..n)
            .map(|i| {
                let diag = a[i * n + i];
                if diag.abs() < 1e-15 {
                    0.0
                } else {
                    b[i] / diag
                }
            })
            .collect()
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SynthSpec::default();
        spec.labels = 0;
        assert!(generate(&spec, 1).is_err());
        let mut spec = SynthSpec::default();
        spec.aligned = true;
        spec.text_len = 99;
        assert!(generate(&spec, 1).is_err());
    }
}
