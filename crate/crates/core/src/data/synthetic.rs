//! Planted-modality synthetic datasets.
//!
//! Each sample draws a latent codon signal `z_t = u + jitter·e_t` (one
//! `latent_dim` vector per codon). The planted modality carries `z` through
//! fixed random mixing matrices at its native token rate:
//!
//! * DNA: six-mer token `i` is `B₀ z_{2i} + B₁ z_{2i+1}`,
//! * RNA: nucleotide `3t + j` is `A_j z_t`,
//! * protein: residue `t` is `P z_t`,
//!
//! plus `noise`-scaled Gaussian noise. The other two modalities are standard
//! normal draws from a separate nuisance stream, so the label (a fixed linear
//! functional of the mean latent, optionally binned into classes by
//! quantiles) depends on the planted track alone.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Sample};
use super::manifest::{DatasetManifest, Provenance, SampleEntry, Split, TaskKind};
use super::track::write_track;
use crate::alignment::{EmbeddingTrack, Modality, ModalityDims};
use crate::error::{Error, Result};
use crate::seed::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub samples: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
    /// Inclusive range of codon counts.
    pub t_prime_min: usize,
    pub t_prime_max: usize,
    pub dims: ModalityDims,
    pub planted: Modality,
    pub noise: f64,
    /// Per-codon deviation of the latent around its sample mean.
    pub jitter: f64,
    pub task: TaskKind,
    pub num_classes: Option<usize>,
    pub latent_dim: usize,
    pub seed: u64,
    /// Seed of the non-planted tracks; derived from `seed` when absent.
    pub nuisance_seed: Option<u64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            samples: 640,
            test_fraction: 0.2,
            val_fraction: 0.0,
            t_prime_min: 8,
            t_prime_max: 16,
            dims: ModalityDims {
                dna: 16,
                rna: 16,
                protein: 16,
            },
            planted: Modality::Rna,
            noise: 0.1,
            jitter: 0.3,
            task: TaskKind::Regression,
            num_classes: None,
            latent_dim: 4,
            seed: 0,
            nuisance_seed: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.samples == 0 {
            return bad("synthetic spec needs at least one sample".into());
        }
        if self.t_prime_min == 0 || self.t_prime_min > self.t_prime_max {
            return bad(format!("bad codon range {}..={}", self.t_prime_min, self.t_prime_max));
        }
        if self.dims.as_array().contains(&0) || self.latent_dim == 0 {
            return bad("dims and latent_dim must be positive".into());
        }
        let frac_ok = |f: f64| f.is_finite() && (0.0..1.0).contains(&f);
        if !frac_ok(self.test_fraction) || !frac_ok(self.val_fraction) || self.test_fraction + self.val_fraction >= 1.0
        {
            return bad(format!(
                "split fractions test={} val={} must be in [0, 1) and sum below 1",
                self.test_fraction, self.val_fraction
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0 && self.jitter.is_finite() && self.jitter >= 0.0) {
            return bad("noise and jitter must be finite and non-negative".into());
        }
        if self.task == TaskKind::Classification && self.num_classes.is_none_or(|k| k < 2) {
            return bad("classification needs num_classes >= 2".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| scale * randn(rng)).collect()
}

/// `out[r] += m · z` with `m: [dim, latent]` row-major.
fn mix_into(out: &mut [f64], m: &[f64], z: &[f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += m[r * z.len()..(r + 1) * z.len()]
            .iter()
            .zip(z)
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
}

fn to_track(m: Modality, rows: usize, cols: usize, data: Vec<f64>) -> Result<EmbeddingTrack> {
    // Stored tracks are f32; generate at that precision so in-memory and on-disk data agree.
    let data = data.into_iter().map(|v| f64::from(v as f32)).collect();
    EmbeddingTrack::new(m, Tensor::matrix(rows, cols, data)?)
}

/// Raw token count of each modality for `t` codons.
pub fn raw_lengths(t: usize) -> [usize; 3] {
    [t.div_ceil(2), 3 * t, t]
}

/// Generates the dataset in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let dims = spec.dims;
    let k = spec.latent_dim;
    let mut structure = stream(spec.seed, "structure");
    let mix_scale = 1.0 / (k as f64).sqrt();
    let dna_mix = [
        gaussian(&mut structure, dims.dna, k, mix_scale),
        gaussian(&mut structure, dims.dna, k, mix_scale),
    ];
    let rna_mix = [
        gaussian(&mut structure, dims.rna, k, mix_scale),
        gaussian(&mut structure, dims.rna, k, mix_scale),
        gaussian(&mut structure, dims.rna, k, mix_scale),
    ];
    let prot_mix = gaussian(&mut structure, dims.protein, k, mix_scale);
    let readout = gaussian(&mut structure, k, 1, mix_scale);

    let mut signal = stream(spec.seed, "signal");
    let nuisance_seed = spec.nuisance_seed.unwrap_or(spec.seed ^ 0x6e75_6973_616e_6365);
    let mut nuisance = stream(nuisance_seed, "nuisance");

    let mut scores = Vec::with_capacity(spec.samples);
    let mut tracks = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let t = signal.gen_range(spec.t_prime_min..=spec.t_prime_max);
        let u = gaussian(&mut signal, 1, k, 1.0);
        let mut z = vec![0.0; t * k];
        let mut mean = vec![0.0; k];
        for p in 0..t {
            for j in 0..k {
                let v = u[j] + spec.jitter * randn(&mut signal);
                z[p * k + j] = v;
                mean[j] += v / t as f64;
            }
        }
        scores.push(mean.iter().zip(&readout).map(|(a, b)| a * b).sum::<f64>());

        let lens = raw_lengths(t);
        let mut sample_tracks = Vec::with_capacity(3);
        for m in Modality::ALL {
            let (rows, cols) = (lens[m.index()], dims.get(m));
            if m != spec.planted {
                sample_tracks.push(to_track(m, rows, cols, gaussian(&mut nuisance, rows, cols, 1.0))?);
                continue;
            }
            let mut data = gaussian(&mut signal, rows, cols, spec.noise);
            for r in 0..rows {
                let out = &mut data[r * cols..(r + 1) * cols];
                match m {
                    Modality::Dna => {
                        for (half, mix) in dna_mix.iter().enumerate() {
                            let codon = 2 * r + half;
                            if codon < t {
                                mix_into(out, mix, &z[codon * k..(codon + 1) * k]);
                            }
                        }
                    }
                    Modality::Rna => mix_into(out, &rna_mix[r % 3], &z[(r / 3) * k..(r / 3 + 1) * k]),
                    Modality::Protein => mix_into(out, &prot_mix, &z[r * k..(r + 1) * k]),
                }
            }
            sample_tracks.push(to_track(m, rows, cols, data)?);
        }
        let [d, r, p]: [EmbeddingTrack; 3] = sample_tracks.try_into().expect("three modalities");
        tracks.push([d, r, p]);
    }

    let labels = match spec.task {
        TaskKind::Regression => scores,
        TaskKind::Classification => quantile_bins(&scores, spec.num_classes.expect("validated")),
    };
    let splits = assign_splits(spec, &mut signal);
    let samples = tracks
        .into_iter()
        .enumerate()
        .map(|(i, tracks)| Sample {
            id: format!("s{i:05}"),
            label: labels[i],
            split: splits[i],
            tracks,
        })
        .collect();
    Ok(Dataset {
        name: spec.name.clone(),
        task: spec.task,
        num_classes: if spec.task == TaskKind::Classification {
            spec.num_classes
        } else {
            None
        },
        dims,
        samples,
    })
}

/// Class `c` holds the scores between the `c/k` and `(c+1)/k` empirical quantiles.
fn quantile_bins(scores: &[f64], classes: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut labels = vec![0.0; scores.len()];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = (rank * classes / scores.len()) as f64;
    }
    labels
}

fn assign_splits(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let n = spec.samples;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut splits = vec![Split::Train; n];
    for (pos, &i) in order.iter().enumerate() {
        if pos < n_test {
            splits[i] = Split::Test;
        } else if pos < n_test + n_val {
            splits[i] = Split::Val;
        }
    }
    splits
}

/// Writes `tracks/{id}.{dna,rna,protein}.blf` and `manifest.json` under
/// `out_dir` and returns the manifest path.
pub fn write_dataset(dataset: &Dataset, out_dir: &Path, provenance: Option<Provenance>) -> Result<PathBuf> {
    let track_dir = out_dir.join("tracks");
    fs::create_dir_all(&track_dir).map_err(|e| Error::io(&track_dir, e))?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let mut paths: [PathBuf; 3] = Default::default();
        for m in Modality::ALL {
            let rel = PathBuf::from("tracks").join(format!("{}.{}.blf", s.id, m.as_str()));
            write_track(out_dir.join(&rel), s.track(m))?;
            paths[m.index()] = rel;
        }
        let [dna, rna, protein] = paths;
        entries.push(SampleEntry {
            id: s.id.clone(),
            label: s.label,
            split: s.split,
            dna: Some(dna),
            rna: Some(rna),
            protein: Some(protein),
        });
    }
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        task: dataset.task,
        num_classes: dataset.num_classes,
        samples: entries,
        provenance,
    };
    manifest.validate()?;
    let path = out_dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

/// Generates the dataset described by `spec` into `out_dir`; returns the manifest path.
pub fn make_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dataset = synthesize(spec)?;
    let label = |m: Modality| {
        Some(if m == spec.planted {
            format!("synthetic-planted(seed={})", spec.seed)
        } else {
            "synthetic-noise".to_string()
        })
    };
    let provenance = Provenance {
        dna: label(Modality::Dna),
        rna: label(Modality::Rna),
        protein: label(Modality::Protein),
    };
    write_dataset(&dataset, out_dir.as_ref(), Some(provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::spearman;

    fn spec(samples: usize) -> SyntheticSpec {
        SyntheticSpec {
            samples,
            noise: 0.0,
            ..SyntheticSpec::default()
        }
    }

    /// Least-squares fit `y ≈ X β` (with intercept) via normal equations and
    /// Gauss-Jordan elimination; returns β.
    #[allow(clippy::needless_range_loop)]
    fn least_squares(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let p = x[0].len() + 1;
        let mut a = vec![vec![0.0; p + 1]; p];
        for (row, &t) in x.iter().zip(y) {
            let f: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += f[i] * f[j];
                }
                a[i][p] += f[i] * t;
            }
        }
        for i in 0..p {
            a[i][i] += 1e-9;
        }
        for c in 0..p {
            let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            for r in 0..p {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=p {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        (0..p).map(|i| a[i][p] / a[i][i]).collect()
    }

    /// Mean over codons of the mean-pooled track (RNA) or of the raw rows.
    fn probe_features(ds: &Dataset, m: Modality) -> Vec<Vec<f64>> {
        ds.samples
            .iter()
            .map(|s| {
                let v = s.track(m).values();
                let rows = if m == Modality::Rna {
                    3 * (v.rows() / 3)
                } else {
                    v.rows()
                };
                (0..v.cols())
                    .map(|c| (0..rows).map(|r| v.at(r, c)).sum::<f64>() / rows as f64)
                    .collect()
            })
            .collect()
    }

    fn probe_spearman(ds: &Dataset, m: Modality, n_fit: usize) -> f64 {
        let x = probe_features(ds, m);
        let y: Vec<f64> = ds.samples.iter().map(|s| s.label).collect();
        let beta = least_squares(&x[..n_fit], &y[..n_fit]);
        let pred: Vec<f64> = x[n_fit..]
            .iter()
            .map(|r| beta[0] + r.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        spearman(&pred, &y[n_fit..]).unwrap()
    }

    #[test]
    fn planted_rna_is_linearly_recoverable_and_dna_is_not() {
        let ds = synthesize(&spec(1024)).unwrap();
        let rna = probe_spearman(&ds, Modality::Rna, 512);
        assert!(rna > 0.99, "rna probe {rna}");
        let dna = probe_spearman(&ds, Modality::Dna, 512);
        assert!(dna.abs() < 0.2, "dna probe {dna}");
    }

    #[test]
    fn lengths_follow_token_rates() {
        let ds = synthesize(&spec(20)).unwrap();
        for s in &ds.samples {
            let t = s.t_prime();
            assert!((8..=16).contains(&t));
            assert_eq!(s.track(Modality::Rna).len(), 3 * t);
            assert_eq!(s.track(Modality::Dna).len(), t.div_ceil(2));
        }
        assert_eq!(ds.samples.iter().filter(|s| s.split == Split::Test).count(), 4);
    }

    #[test]
    fn labels_ignore_the_nuisance_seed() {
        let a = synthesize(&SyntheticSpec {
            nuisance_seed: Some(1),
            ..spec(50)
        })
        .unwrap();
        let b = synthesize(&SyntheticSpec {
            nuisance_seed: Some(2),
            ..spec(50)
        })
        .unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.split, y.split);
            assert_eq!(x.track(Modality::Rna), y.track(Modality::Rna));
            assert_ne!(x.track(Modality::Dna), y.track(Modality::Dna));
        }
    }

    #[test]
    fn classification_bins_are_balanced() {
        let s = SyntheticSpec {
            task: TaskKind::Classification,
            num_classes: Some(3),
            ..spec(90)
        };
        let ds = synthesize(&s).unwrap();
        for c in 0..3 {
            assert_eq!(ds.samples.iter().filter(|x| x.label == c as f64).count(), 30);
        }
        assert!(SyntheticSpec { num_classes: None, ..s }.validate().is_err());
    }

    #[test]
    fn written_files_are_deterministic_and_load_back() {
        let s = SyntheticSpec {
            samples: 12,
            ..SyntheticSpec::default()
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = make_synthetic(&s, d1.path()).unwrap();
        make_synthetic(&s, d2.path()).unwrap();
        let mut names: Vec<PathBuf> = fs::read_dir(d1.path().join("tracks"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        assert_eq!(names.len(), 36);
        for p in names {
            let other = d2.path().join("tracks").join(p.file_name().unwrap());
            assert_eq!(fs::read(&p).unwrap(), fs::read(other).unwrap());
        }
        assert_eq!(
            fs::read(&m1).unwrap(),
            fs::read(d2.path().join("manifest.json")).unwrap()
        );
        let loaded = Dataset::load(&m1).unwrap();
        let fresh = synthesize(&s).unwrap();
        for (a, b) in loaded.samples.iter().zip(&fresh.samples) {
            assert_eq!(a.tracks, b.tracks);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn missing_track_names_the_sample() {
        let s = SyntheticSpec {
            samples: 3,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = make_synthetic(&s, dir.path()).unwrap();
        fs::remove_file(dir.path().join("tracks/s00001.rna.blf")).unwrap();
        let err = Dataset::load(&m).unwrap_err().to_string();
        assert!(err.contains("s00001") && err.contains("RNA"), "{err}");
    }

    #[test]
    fn spec_json_rejects_unknown_keys() {
        assert!(SyntheticSpec::from_json(r#"{"samples": 10, "planted": "protein"}"#).is_ok());
        assert!(SyntheticSpec::from_json(r#"{"sample": 10}"#).is_err());
        assert!(SyntheticSpec::from_json(r#"{"planted": "lipid"}"#).is_err());
    }
}
