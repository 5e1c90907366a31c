use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Split, TaskKind};
use super::track::read_track;
use crate::alignment::{EmbeddingTrack, Modality, ModalityDims};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: f64,
    pub split: Split,
    /// Indexed by [`Modality::index`].
    pub tracks: [EmbeddingTrack; 3],
}

impl Sample {
    pub fn track(&self, m: Modality) -> &EmbeddingTrack {
        &self.tracks[m.index()]
    }

    /// Codon count of the protein frame.
    pub fn t_prime(&self) -> usize {
        self.track(Modality::Protein).len()
    }
}

/// A manifest with all of its tracks loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub task: TaskKind,
    pub num_classes: Option<usize>,
    pub dims: ModalityDims,
    pub samples: Vec<Sample>,
}

/// One mini-batch: sample indices plus per-sample masks right-padded to the
/// longest protein frame in the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub t_prime: usize,
    pub masks: Vec<Vec<bool>>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = DatasetManifest::read(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_manifest(&manifest, &base)
    }

    pub fn from_manifest(manifest: &DatasetManifest, base_dir: &Path) -> Result<Self> {
        manifest.validate()?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        let mut dims: Option<ModalityDims> = None;
        for entry in &manifest.samples {
            let load = |m: Modality| -> Result<EmbeddingTrack> {
                let wrap = |source: Error| Error::SampleTrack {
                    sample: entry.id.clone(),
                    modality: m,
                    source: Box::new(source),
                };
                let rel = entry.track_path(m).expect("validated manifest");
                let full: PathBuf = base_dir.join(rel);
                let t = read_track(&full).map_err(wrap)?;
                if t.modality() != m {
                    return Err(wrap(Error::WrongModality {
                        expected: m,
                        found: t.modality(),
                    }));
                }
                Ok(t)
            };
            let tracks = [load(Modality::Dna)?, load(Modality::Rna)?, load(Modality::Protein)?];
            let d = ModalityDims {
                dna: tracks[0].dim(),
                rna: tracks[1].dim(),
                protein: tracks[2].dim(),
            };
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Manifest(format!(
                        "sample `{}` has dims {d:?}, earlier samples {prev:?}",
                        entry.id
                    )))
                }
                Some(_) => {}
            }
            samples.push(Sample {
                id: entry.id.clone(),
                label: entry.label,
                split: entry.split,
                tracks,
            });
        }
        Ok(Self {
            name: manifest.name.clone(),
            task: manifest.task,
            num_classes: manifest.num_classes,
            dims: dims.ok_or_else(|| Error::Manifest("manifest has no samples".into()))?,
            samples,
        })
    }

    pub fn outputs(&self) -> usize {
        match self.task {
            TaskKind::Regression => 1,
            TaskKind::Classification => self.num_classes.unwrap_or(2),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// Padded batches over `split`, shuffled when `seed` is given.
    pub fn batch_iter(&self, split: Split, batch_size: usize, seed: Option<u64>) -> Result<std::vec::IntoIter<Batch>> {
        let idx = self.indices(split);
        if idx.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        Ok(self.batches(&idx, batch_size, seed)?.into_iter())
    }

    /// Splits `indices` into batches of `batch_size` (the last may be partial).
    pub fn batches(&self, indices: &[usize], batch_size: usize, seed: Option<u64>) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut order = indices.to_vec();
        if let Some(seed) = seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(order
            .chunks(batch_size)
            .map(|chunk| {
                let t_prime = chunk.iter().map(|&i| self.samples[i].t_prime()).max().unwrap_or(0);
                let masks = chunk
                    .iter()
                    .map(|&i| {
                        let len = self.samples[i].t_prime();
                        (0..t_prime).map(|t| t < len).collect()
                    })
                    .collect();
                Batch {
                    indices: chunk.to_vec(),
                    t_prime,
                    masks,
                }
            })
            .collect())
    }
}
