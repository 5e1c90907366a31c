//! Codon-level alignment of DNA, RNA and protein embedding tracks.
//!
//! For a coding sequence of `T` nucleotides the DNA model emits `T/6` six-mer
//! tokens, the RNA model `T` nucleotide tokens and the protein model `T/3`
//! residues. The protein frame is the reference: DNA tokens are upsampled
//! with a learnable transposed convolution (each six-mer covers two codons)
//! and RNA tokens are mean-pooled over non-overlapping triples. Both are then
//! truncated or zero-padded on the right to the protein length.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{apply_row_mask, uniform};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Dna,
    Rna,
    Protein,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Dna, Modality::Rna, Modality::Protein];

    pub fn code(self) -> u8 {
        match self {
            Modality::Dna => 0,
            Modality::Rna => 1,
            Modality::Protein => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Dna),
            1 => Ok(Modality::Rna),
            2 => Ok(Modality::Protein),
            c => Err(Error::UnknownModality(c)),
        }
    }

    pub fn index(self) -> usize {
        self.code() as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Dna => "dna",
            Modality::Rna => "rna",
            Modality::Protein => "protein",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Dna => "DNA",
            Modality::Rna => "RNA",
            Modality::Protein => "PROTEIN",
        })
    }
}

/// Embedding width per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub dna: usize,
    pub rna: usize,
    pub protein: usize,
}

impl Default for ModalityDims {
    /// Widths of the default DNA, RNA and protein foundation models.
    fn default() -> Self {
        Self {
            dna: 4107,
            rna: 640,
            protein: 320,
        }
    }
}

impl ModalityDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Dna => self.dna,
            Modality::Rna => self.rna,
            Modality::Protein => self.protein,
        }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.dna, self.rna, self.protein]
    }
}

/// Per-token embeddings from one modality's foundation model: `length × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTrack {
    modality: Modality,
    values: Tensor,
}

impl EmbeddingTrack {
    pub fn new(modality: Modality, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::InvalidShape(format!(
                "{modality} track must be a matrix, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::InvalidArgument(format!(
                "{modality} track has non-finite values"
            )));
        }
        Ok(Self { modality, values })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    fn expect(&self, modality: Modality) -> Result<()> {
        if self.modality != modality {
            return Err(Error::WrongModality {
                expected: modality,
                found: self.modality,
            });
        }
        Ok(())
    }
}

/// Geometry of the DNA transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsampleGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for UpsampleGeometry {
    /// Kernel 2, stride 2: every six-mer token yields exactly two codon rows.
    fn default() -> Self {
        Self {
            kernel: 2,
            stride: 2,
            padding: 0,
        }
    }
}

impl UpsampleGeometry {
    /// The kernel-3 / stride-2 / padding-2 variant.
    pub fn wide() -> Self {
        Self {
            kernel: 3,
            stride: 2,
            padding: 2,
        }
    }
}

/// Learnable transposed convolution mapping DNA tokens to codon positions.
#[derive(Clone, Copy, Debug)]
pub struct DnaUpsampler {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: UpsampleGeometry,
}

impl DnaUpsampler {
    /// Weights uniform in `±1/√(dim·kernel)`.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize, geometry: UpsampleGeometry) -> Result<Self> {
        let bound = 1.0 / ((dim * geometry.kernel) as f64).sqrt();
        let weight = store.insert(
            "align.dna_upsample.weight",
            uniform(rng, &[dim, dim, geometry.kernel], bound),
        )?;
        let bias = store.insert("align.dna_upsample.bias", uniform(rng, &[dim], bound))?;
        Ok(Self { weight, bias, geometry })
    }

    /// Kernel that copies each token into every output position it covers, zero bias.
    pub fn identity_kernel(dim: usize, kernel: usize) -> (Tensor, Tensor) {
        let mut w = Tensor::zeros(&[dim, dim, kernel]);
        for c in 0..dim {
            for k in 0..kernel {
                w.data_mut()[(c * dim + c) * kernel + k] = 1.0;
            }
        }
        (w, Tensor::zeros(&[dim]))
    }
}

/// Transposed convolution of a DNA track. With the default geometry the output
/// has exactly twice as many rows as the input.
pub fn upsample_dna(g: &mut Graph<'_>, track: &EmbeddingTrack, upsampler: &DnaUpsampler) -> Result<NodeId> {
    track.expect(Modality::Dna)?;
    let x = g.constant(track.values().clone());
    let w = g.param(upsampler.weight);
    let b = g.param(upsampler.bias);
    let geo = upsampler.geometry;
    if geo.kernel != g.shape(w)[2] {
        return Err(Error::InvalidArgument(format!(
            "upsampler geometry kernel {} does not match weight {:?}",
            geo.kernel,
            g.shape(w)
        )));
    }
    g.conv_transpose1d(x, w, Some(b), geo.stride, geo.padding)
}

/// Non-overlapping mean over nucleotide triples: `floor(len/3)` codon rows.
pub fn downsample_rna(g: &mut Graph<'_>, track: &EmbeddingTrack) -> Result<NodeId> {
    track.expect(Modality::Rna)?;
    if track.len() < 3 {
        return Err(Error::TrackTooShort {
            modality: Modality::Rna,
            length: track.len(),
            min: 3,
        });
    }
    let x = g.constant(track.values().clone());
    g.avg_pool1d(x, 3, 3)
}

/// Three codon-aligned tracks of common length `t_prime`.
///
/// `mask[t]` is false where any track had to be padded; such rows are zero in
/// every track.
#[derive(Clone, Debug)]
pub struct AlignedBundle {
    pub t_prime: usize,
    /// Indexed by [`Modality::index`].
    pub tracks: [NodeId; 3],
    pub mask: Vec<bool>,
}

impl AlignedBundle {
    pub fn track(&self, m: Modality) -> NodeId {
        self.tracks[m.index()]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn fit_length(g: &mut Graph<'_>, x: NodeId, target: usize) -> Result<NodeId> {
    let (len, dim) = g.value(x).dims2();
    match len.cmp(&target) {
        std::cmp::Ordering::Equal => Ok(x),
        std::cmp::Ordering::Greater => g.slice(x, Axis::Rows, 0, target),
        std::cmp::Ordering::Less => {
            let pad = g.constant(Tensor::zeros(&[target - len, dim]));
            g.concat_time(&[x, pad])
        }
    }
}

/// Aligns the three tracks of one sequence to the protein frame.
///
/// `target_len` overrides the frame length (used to right-pad every sample in
/// a batch to the batch maximum); it defaults to the protein length.
pub fn align_bundle(
    g: &mut Graph<'_>,
    dna: &EmbeddingTrack,
    rna: &EmbeddingTrack,
    protein: &EmbeddingTrack,
    upsampler: &DnaUpsampler,
    target_len: Option<usize>,
) -> Result<AlignedBundle> {
    for (t, m) in [(dna, Modality::Dna), (rna, Modality::Rna), (protein, Modality::Protein)] {
        t.expect(m)?;
        if t.is_empty() {
            return Err(Error::TrackTooShort {
                modality: m,
                length: 0,
                min: 1,
            });
        }
    }
    let t_prime = target_len.unwrap_or(protein.len());
    if t_prime == 0 {
        return Err(Error::InvalidArgument("target length must be positive".into()));
    }
    let up = upsample_dna(g, dna, upsampler)?;
    let pooled = downsample_rna(g, rna)?;
    let prot = g.constant(protein.values().clone());

    let valid = g
        .value(up)
        .rows()
        .min(g.value(pooled).rows())
        .min(protein.len())
        .min(t_prime);
    let mask: Vec<bool> = (0..t_prime).map(|t| t < valid).collect();

    let mut tracks = [up, pooled, prot];
    for x in &mut tracks {
        let fitted = fit_length(g, *x, t_prime)?;
        *x = apply_row_mask(g, fitted, &mask)?;
    }
    Ok(AlignedBundle { t_prime, tracks, mask })
}
