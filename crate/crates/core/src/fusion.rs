//! Fusion of codon-aligned modality tracks into one sequence.
//!
//! Strategies:
//! - [`concat_fusion`]: per-position feature concatenation with the DNA track
//!   reduced by a small MLP.
//! - [`mil_fusion`]: gated attention over the three modalities computed from
//!   mask-aware mean-pooled summaries; one weight per modality per sequence.
//! - [`token_level_mil`]: the same gate applied at every position.
//! - [`cross_modal_fusion`]: each modality queries the time-concatenated
//!   context of all three with multi-head attention.
//! - [`vanilla_concat`]: unaligned baseline that concatenates projected raw
//!   tracks along time.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignedBundle, EmbeddingTrack, Modality};
use crate::autodiff::{Axis, Graph, NodeId, ParamId, ParamStore, SoftmaxOpts};
use crate::error::{Error, Result};
use crate::nn::{apply_row_mask, masked_mean_weights, LayerNorm, Linear};
use crate::tensor::Tensor;

/// Bounds the learnable softmax temperature is projected onto after each step.
pub const TAU_MIN: f64 = 0.02;
pub const TAU_MAX: f64 = 20.0;

/// Simplex tolerance used when validating attention rows.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Concat,
    Mil,
    MilToken,
    Cross,
    VanillaConcat,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Concat,
        Strategy::Mil,
        Strategy::MilToken,
        Strategy::Cross,
        Strategy::VanillaConcat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Concat => "concat",
            Strategy::Mil => "mil",
            Strategy::MilToken => "mil_token",
            Strategy::Cross => "cross",
            Strategy::VanillaConcat => "vanilla_concat",
        }
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Strategy::Mil | Strategy::MilToken)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown strategy `{s}`; expected one of concat, mil, mil_token, cross, vanilla_concat"
            ))
        })
    }
}

#[derive(Clone, Debug)]
pub struct FusionResult {
    /// `t × d_out` fused sequence.
    pub fused: NodeId,
    /// Modality weights: `[1, 3]` per sequence or `[t, 3]` per position.
    pub alpha: Option<NodeId>,
    /// Rows of `alpha` that count towards the entropy and summaries.
    pub alpha_mask: Option<Vec<bool>>,
    /// Mean attention entropy over the valid rows of `alpha`.
    pub entropy: Option<NodeId>,
}

// -------------------------------------------------------------------------
// Projections
// -------------------------------------------------------------------------

/// Maps each modality to the shared width `d_shared` followed by tanh.
#[derive(Clone, Debug)]
pub enum ProjectionSet {
    PerModality([Linear; 3]),
    /// One map reused for all modalities. When input widths differ, a
    /// per-modality linear adapter first brings each to `d_shared`.
    Shared {
        adapters: Option<[Linear; 3]>,
        map: Linear,
    },
}

impl ProjectionSet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        dims: [usize; 3],
        d_shared: usize,
        shared: bool,
    ) -> Result<Self> {
        if !shared {
            let maps =
                per_modality(|m| Linear::new(store, rng, &format!("proj.{}", m.as_str()), dims[m.index()], d_shared))?;
            return Ok(Self::PerModality(maps));
        }
        let uniform_width = dims.iter().all(|&d| d == dims[0]);
        let adapters = if uniform_width {
            None
        } else {
            Some(per_modality(|m| {
                Linear::new(
                    store,
                    rng,
                    &format!("proj.adapter.{}", m.as_str()),
                    dims[m.index()],
                    d_shared,
                )
            })?)
        };
        let d_in = if uniform_width { dims[0] } else { d_shared };
        let map = Linear::new(store, rng, "proj.shared", d_in, d_shared)?;
        Ok(Self::Shared { adapters, map })
    }

    pub fn d_shared(&self) -> usize {
        match self {
            Self::PerModality(maps) => maps[0].d_out,
            Self::Shared { map, .. } => map.d_out,
        }
    }

    /// `tanh(linear(x))` for modality `m`, with masked rows zeroed.
    pub fn project(&self, g: &mut Graph<'_>, m: Modality, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let h = match self {
            Self::PerModality(maps) => maps[m.index()].forward(g, x)?,
            Self::Shared { adapters, map } => {
                let x = match adapters {
                    Some(a) => a[m.index()].forward(g, x)?,
                    None => x,
                };
                map.forward(g, x)?
            }
        };
        let h = g.tanh(h)?;
        match mask {
            Some(mask) => apply_row_mask(g, h, mask),
            None => Ok(h),
        }
    }

    fn project_bundle(&self, g: &mut Graph<'_>, bundle: &AlignedBundle) -> Result<[NodeId; 3]> {
        let mut out = [bundle.tracks[0]; 3];
        for m in Modality::ALL {
            out[m.index()] = self.project(g, m, bundle.track(m), Some(&bundle.mask))?;
        }
        Ok(out)
    }
}

fn per_modality<T>(mut f: impl FnMut(Modality) -> Result<T>) -> Result<[T; 3]> {
    Ok([f(Modality::Dna)?, f(Modality::Rna)?, f(Modality::Protein)?])
}

// -------------------------------------------------------------------------
// Gated attention (MIL)
// -------------------------------------------------------------------------

/// Gate `s = Wᵀ[tanh(V h + b) ⊙ σ(U h + c)]`, weights `softmax(s / τ)`.
#[derive(Clone, Debug)]
pub struct GatedAttention {
    /// `V_m, b_m`; a single entry when shared across modalities.
    pub v: Vec<Linear>,
    /// `U_m, c_m`; a single entry when shared across modalities.
    pub u: Vec<Linear>,
    /// `W: [d_attn, 1]`.
    pub w: ParamId,
    /// Scalar temperature.
    pub tau: ParamId,
}

impl GatedAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_shared: usize,
        d_attn: usize,
        shared: bool,
        tau_init: f64,
    ) -> Result<Self> {
        let names: Vec<&str> = if shared {
            vec!["shared"]
        } else {
            Modality::ALL.iter().map(|m| m.as_str()).collect()
        };
        let mut v = Vec::new();
        let mut u = Vec::new();
        for n in &names {
            v.push(Linear::new(store, rng, &format!("gate.v.{n}"), d_shared, d_attn)?);
            u.push(Linear::new(store, rng, &format!("gate.u.{n}"), d_shared, d_attn)?);
        }
        let bound = 1.0 / (d_attn as f64).sqrt();
        let w = store.insert("gate.w", crate::nn::uniform(rng, &[d_attn, 1], bound))?;
        let tau = store.insert("gate.tau", Tensor::scalar(tau_init.clamp(TAU_MIN, TAU_MAX)))?;
        Ok(Self { v, u, w, tau })
    }

    fn pick(list: &[Linear], m: Modality) -> &Linear {
        if list.len() == 1 {
            &list[0]
        } else {
            &list[m.index()]
        }
    }

    /// Gate score per row of `h: [rows, d_shared]` → `[rows, 1]`.
    pub fn scores(&self, g: &mut Graph<'_>, m: Modality, h: NodeId) -> Result<NodeId> {
        let a = Self::pick(&self.v, m).forward(g, h)?;
        let a = g.tanh(a)?;
        let b = Self::pick(&self.u, m).forward(g, h)?;
        let b = g.sigmoid(b)?;
        let gated = g.mul(a, b)?;
        let w = g.param(self.w);
        g.matmul(gated, w)
    }

    /// Row-wise `softmax(scores / τ)` over the modality axis.
    pub fn weights(&self, g: &mut Graph<'_>, scores: NodeId) -> Result<NodeId> {
        let tau = g.param(self.tau);
        g.softmax_with(
            scores,
            Axis::Cols,
            SoftmaxOpts {
                temperature: Some(tau),
                mask: None,
            },
        )
    }
}

/// Checks that every selected row of `alpha` lies on the probability simplex.
pub fn check_simplex(alpha: &Tensor, rows: Option<&[bool]>) -> Result<()> {
    for r in 0..alpha.rows() {
        if rows.is_some_and(|m| !m[r]) {
            continue;
        }
        let row = alpha.row(r);
        let sum: f64 = row.iter().sum();
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > SIMPLEX_TOL || min < -SIMPLEX_TOL {
            return Err(Error::OffSimplex { row: r, sum, min });
        }
    }
    Ok(())
}

/// Mean entropy `−(1/rows) Σ_rows Σ_m α_m ln α_m` over the selected rows, with `0·ln 0 = 0`.
pub fn attention_entropy(g: &mut Graph<'_>, alpha: NodeId, rows: Option<&[bool]>) -> Result<NodeId> {
    let av = g.value(alpha);
    check_simplex(av, rows)?;
    let n_rows = av.rows();
    let all = vec![true; n_rows];
    let weights = masked_mean_weights(rows.unwrap_or(&all)).ok_or(Error::NoValidPositions)?;
    let plogp = g.xlogx(alpha)?;
    let per_row = g.sum(plogp, Some(Axis::Cols))?;
    let w = g.constant(weights);
    let mean = g.matmul(w, per_row)?;
    let mean = g.sum(mean, None)?;
    g.scale(mean, -1.0)
}

/// Plain-value form of [`attention_entropy`] for reporting.
pub fn attention_entropy_rows(rows: &[[f64; 3]]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::NoValidPositions);
    }
    let mut total = 0.0;
    for (i, r) in rows.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        let min = r.iter().copied().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > SIMPLEX_TOL || min < -SIMPLEX_TOL {
            return Err(Error::OffSimplex { row: i, sum, min });
        }
        total -= r.iter().map(|&a| if a > 0.0 { a * a.ln() } else { 0.0 }).sum::<f64>();
    }
    Ok(total / rows.len() as f64)
}

/// Sequence-level gated attention over the three projected tracks.
pub fn mil_fusion(
    g: &mut Graph<'_>,
    bundle: &AlignedBundle,
    proj: &ProjectionSet,
    gate: &GatedAttention,
) -> Result<FusionResult> {
    let pool = masked_mean_weights(&bundle.mask).ok_or(Error::NoValidPositions)?;
    let h = proj.project_bundle(g, bundle)?;
    let pool = g.constant(pool);
    let mut scores = Vec::with_capacity(3);
    for m in Modality::ALL {
        let summary = g.matmul(pool, h[m.index()])?;
        scores.push(gate.scores(g, m, summary)?);
    }
    let scores = g.concat_feature(&scores)?;
    let alpha = gate.weights(g, scores)?;
    let fused = weighted_sum(g, &h, alpha)?;
    let entropy = attention_entropy(g, alpha, None)?;
    Ok(FusionResult {
        fused,
        alpha: Some(alpha),
        alpha_mask: None,
        entropy: Some(entropy),
    })
}

/// Per-position gated attention; `alpha` is `[t, 3]`.
pub fn token_level_mil(
    g: &mut Graph<'_>,
    bundle: &AlignedBundle,
    proj: &ProjectionSet,
    gate: &GatedAttention,
) -> Result<FusionResult> {
    if bundle.valid_count() == 0 {
        return Err(Error::NoValidPositions);
    }
    let h = proj.project_bundle(g, bundle)?;
    let mut scores = Vec::with_capacity(3);
    for m in Modality::ALL {
        scores.push(gate.scores(g, m, h[m.index()])?);
    }
    let scores = g.concat_feature(&scores)?;
    let alpha = gate.weights(g, scores)?;
    let fused = weighted_sum(g, &h, alpha)?;
    let entropy = attention_entropy(g, alpha, Some(&bundle.mask))?;
    Ok(FusionResult {
        fused,
        alpha: Some(alpha),
        alpha_mask: Some(bundle.mask.clone()),
        entropy: Some(entropy),
    })
}

/// `Σ_m alpha[:, m] · h_m`, where `alpha` is `[1, 3]` or `[t, 3]`.
fn weighted_sum(g: &mut Graph<'_>, h: &[NodeId; 3], alpha: NodeId) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for m in Modality::ALL {
        let a = g.slice(alpha, Axis::Cols, m.index(), 1)?;
        let term = g.mul(h[m.index()], a)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, term)?,
            None => term,
        });
    }
    Ok(acc.expect("three modalities"))
}

// -------------------------------------------------------------------------
// Concatenation
// -------------------------------------------------------------------------

/// `d_DNA → hidden → d_out` with tanh on the hidden layer.
#[derive(Clone, Debug)]
pub struct DnaMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl DnaMlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_dna: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, "concat.dna_mlp.hidden", d_dna, hidden)?,
            out: Linear::new(store, rng, "concat.dna_mlp.out", hidden, d_out)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tanh(h)?;
        self.out.forward(g, h)
    }
}

/// `[MLP(DNA[t]) ‖ RNA[t] ‖ Protein[t]]` at every aligned position.
pub fn concat_fusion(g: &mut Graph<'_>, bundle: &AlignedBundle, mlp: &DnaMlp) -> Result<FusionResult> {
    let dna = mlp.forward(g, bundle.track(Modality::Dna))?;
    let dna = apply_row_mask(g, dna, &bundle.mask)?;
    let fused = g.concat_feature(&[dna, bundle.track(Modality::Rna), bundle.track(Modality::Protein)])?;
    Ok(FusionResult {
        fused,
        alpha: None,
        alpha_mask: None,
        entropy: None,
    })
}

/// Projects raw (unaligned) tracks to the shared width and stacks them along
/// time in DNA, RNA, protein order.
pub fn vanilla_concat(g: &mut Graph<'_>, tracks: [&EmbeddingTrack; 3], proj: &ProjectionSet) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(3);
    for m in Modality::ALL {
        let t = tracks[m.index()];
        if t.modality() != m {
            return Err(Error::WrongModality {
                expected: m,
                found: t.modality(),
            });
        }
        let x = g.constant(t.values().clone());
        parts.push(proj.project(g, m, x, None)?);
    }
    g.concat_time(&parts)
}

// -------------------------------------------------------------------------
// Cross-modal multi-head attention
// -------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ModalityAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    /// Probability of dropping an attention weight during training.
    pub dropout: f64,
    pub per_modality: [ModalityAttention; 3],
    /// `3·d_shared → d_shared`.
    pub merge: Linear,
    pub final_norm: LayerNorm,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_shared: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        if heads == 0 || !d_shared.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_shared {d_shared} is not divisible by {heads} heads"
            )));
        }
        let per_modality = per_modality(|m| {
            let p = format!("xattn.{}", m.as_str());
            Ok(ModalityAttention {
                query: Linear::new(store, rng, &format!("{p}.query"), d_shared, d_shared)?,
                key: Linear::new(store, rng, &format!("{p}.key"), d_shared, d_shared)?,
                value: Linear::new(store, rng, &format!("{p}.value"), d_shared, d_shared)?,
                output: Linear::new(store, rng, &format!("{p}.output"), d_shared, d_shared)?,
                norm: LayerNorm::new(store, &format!("{p}.norm"), d_shared)?,
            })
        })?;
        Ok(Self {
            heads,
            dropout,
            per_modality,
            merge: Linear::new(store, rng, "xattn.merge", 3 * d_shared, d_shared)?,
            final_norm: LayerNorm::new(store, "xattn.final_norm", d_shared)?,
        })
    }
}

/// Scaled dot-product attention split over heads. `key_mask` marks valid key rows.
fn multi_head(
    g: &mut Graph<'_>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    key_mask: &[bool],
    dropout: f64,
) -> Result<NodeId> {
    let (n_q, d) = g.value(q).dims2();
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mask: Vec<bool> = (0..n_q).flat_map(|_| key_mask.iter().copied()).collect();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, Axis::Cols, h * d_head, d_head)?;
        let kh = g.slice(k, Axis::Cols, h * d_head, d_head)?;
        let vh = g.slice(v, Axis::Cols, h * d_head, d_head)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax_with(
            s,
            Axis::Cols,
            SoftmaxOpts {
                temperature: None,
                mask: Some(mask.clone()),
            },
        )?;
        let a = g.dropout(a, 1.0 - dropout)?;
        outs.push(g.matmul(a, vh)?);
    }
    g.concat_feature(&outs)
}

/// Cross-modal attention: every modality queries the time-concatenated
/// context `[H_DNA; H_RNA; H_Prot]`, followed by residual + layer norm per
/// modality, a merge projection, and a residual-average layer norm.
pub fn cross_modal_fusion(
    g: &mut Graph<'_>,
    bundle: &AlignedBundle,
    proj: &ProjectionSet,
    xattn: &CrossAttention,
) -> Result<FusionResult> {
    if bundle.valid_count() == 0 {
        return Err(Error::NoValidPositions);
    }
    let h = proj.project_bundle(g, bundle)?;
    let context = g.concat_time(&h)?;
    let key_mask: Vec<bool> = bundle.mask.iter().copied().cycle().take(3 * bundle.t_prime).collect();

    let mut z = [h[0]; 3];
    for m in Modality::ALL {
        let p = &xattn.per_modality[m.index()];
        let q = p.query.forward(g, h[m.index()])?;
        let k = p.key.forward(g, context)?;
        let v = p.value.forward(g, context)?;
        let att = multi_head(g, q, k, v, xattn.heads, &key_mask, xattn.dropout)?;
        let att = p.output.forward(g, att)?;
        let res = g.add(h[m.index()], att)?;
        z[m.index()] = p.norm.forward(g, res)?;
    }
    let stacked = g.concat_feature(&z)?;
    let merged = xattn.merge.forward(g, stacked)?;
    let sum = g.add(z[0], z[1])?;
    let sum = g.add(sum, z[2])?;
    let avg = g.scale(sum, 1.0 / 3.0)?;
    let pre = g.add(avg, merged)?;
    let fused = xattn.final_norm.forward(g, pre)?;
    let fused = apply_row_mask(g, fused, &bundle.mask)?;
    Ok(FusionResult {
        fused,
        alpha: None,
        alpha_mask: None,
        entropy: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn bundle_from(g: &mut Graph<'_>, tracks: [Tensor; 3], mask: Vec<bool>) -> AlignedBundle {
        let t_prime = tracks[0].rows();
        let [a, b, c] = tracks;
        AlignedBundle {
            t_prime,
            tracks: [g.constant(a), g.constant(b), g.constant(c)],
            mask,
        }
    }

    /// Copies modality DNA's projection and gate parameters onto RNA and protein.
    fn tie_modalities(store: &mut ParamStore) {
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for n in names.iter().filter(|n| n.contains(".dna")) {
            let src = store.value(store.id(n).unwrap()).clone();
            for other in ["rna", "protein"] {
                let id = store.id(&n.replace(".dna", &format!(".{other}"))).unwrap();
                *store.value_mut(id) = src.clone();
            }
        }
    }

    #[test]
    fn identical_inputs_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let proj = ProjectionSet::new(&mut store, &mut rng, [4, 4, 4], 6, false).unwrap();
        let gate = GatedAttention::new(&mut store, &mut rng, 6, 5, false, 1.0).unwrap();
        tie_modalities(&mut store);
        let x = randn(&mut rng, 7, 4);
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let b = bundle_from(&mut g, [x.clone(), x.clone(), x], vec![true; 7]);
        let r = mil_fusion(&mut g, &b, &proj, &gate).unwrap();
        let alpha = g.value(r.alpha.unwrap());
        for &a in alpha.data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        let h = g.value(r.entropy.unwrap()).item();
        assert!((h - 3f64.ln()).abs() < 1e-12);
        assert!((3f64.ln() - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(attention_entropy_rows(&[[1.0, 0.0, 0.0]]).unwrap(), 0.0);
        let h = attention_entropy_rows(&[[0.5, 0.25, 0.25]]).unwrap();
        assert!((h - 1.03972).abs() < 1e-5);
        let third = 1.0 / 3.0;
        let h = attention_entropy_rows(&[[third; 3]; 5]).unwrap();
        assert!((h - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(
            attention_entropy_rows(&[[0.5, 0.5, 0.5]]),
            Err(Error::OffSimplex { .. })
        ));
    }

    #[test]
    fn graph_entropy_matches_rows_and_rejects_off_simplex() {
        let mut g = Graph::new(Mode::Eval, 0);
        let a = g.constant(Tensor::from_rows(&[vec![0.5, 0.25, 0.25], vec![1.0, 0.0, 0.0]]).unwrap());
        let h = attention_entropy(&mut g, a, None).unwrap();
        let want = attention_entropy_rows(&[[0.5, 0.25, 0.25], [1.0, 0.0, 0.0]]).unwrap();
        assert!((g.value(h).item() - want).abs() < 1e-12);
        let masked = attention_entropy(&mut g, a, Some(&[true, false])).unwrap();
        assert!((g.value(masked).item() - 1.0397207708399179).abs() < 1e-12);
        let bad = g.constant(Tensor::from_rows(&[vec![0.7, 0.7, 0.0]]).unwrap());
        assert!(attention_entropy(&mut g, bad, None).is_err());
    }

    #[test]
    fn token_level_reduces_to_sequence_level_on_constant_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let proj = ProjectionSet::new(&mut store, &mut rng, [3, 4, 2], 6, false).unwrap();
        let gate = GatedAttention::new(&mut store, &mut rng, 6, 4, false, 0.7).unwrap();
        let rows = |rng: &mut ChaCha8Rng, d: usize| {
            let r = randn(rng, 1, d);
            Tensor::matrix(5, d, r.data().repeat(5)).unwrap()
        };
        let tracks = [rows(&mut rng, 3), rows(&mut rng, 4), rows(&mut rng, 2)];
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let b = bundle_from(&mut g, tracks, vec![true; 5]);
        let seq = mil_fusion(&mut g, &b, &proj, &gate).unwrap();
        let tok = token_level_mil(&mut g, &b, &proj, &gate).unwrap();
        let sa = g.value(seq.alpha.unwrap()).clone();
        let ta = g.value(tok.alpha.unwrap()).clone();
        assert_eq!(ta.shape(), &[5, 3]);
        for t in 0..5 {
            for m in 0..3 {
                assert!((ta.at(t, m) - sa.at(0, m)).abs() < 1e-12);
            }
        }
        let diff = g.value(seq.fused).max_abs_diff(g.value(tok.fused));
        assert!(diff < 1e-12);
    }

    #[test]
    fn mil_rejects_fully_masked_bundle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let proj = ProjectionSet::new(&mut store, &mut rng, [2, 2, 2], 4, false).unwrap();
        let gate = GatedAttention::new(&mut store, &mut rng, 4, 3, false, 1.0).unwrap();
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let z = Tensor::zeros(&[3, 2]);
        let b = bundle_from(&mut g, [z.clone(), z.clone(), z], vec![false; 3]);
        assert!(matches!(
            mil_fusion(&mut g, &b, &proj, &gate),
            Err(Error::NoValidPositions)
        ));
        assert!(matches!(
            token_level_mil(&mut g, &b, &proj, &gate),
            Err(Error::NoValidPositions)
        ));
    }

    #[test]
    fn mil_fused_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let proj = ProjectionSet::new(&mut store, &mut rng, [3, 5, 2], 4, false).unwrap();
        let gate = GatedAttention::new(&mut store, &mut rng, 4, 3, false, 1.0).unwrap();
        let tracks = [randn(&mut rng, 6, 3), randn(&mut rng, 6, 5), randn(&mut rng, 6, 2)];
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let b = bundle_from(&mut g, tracks, vec![true, true, true, true, false, false]);
        let h: Vec<NodeId> = Modality::ALL
            .iter()
            .map(|&m| proj.project(&mut g, m, b.track(m), Some(&b.mask)).unwrap())
            .collect();
        let r = mil_fusion(&mut g, &b, &proj, &gate).unwrap();
        let alpha = g.value(r.alpha.unwrap()).clone();
        let fused = g.value(r.fused);
        for i in 0..fused.numel() {
            let want: f64 = (0..3).map(|m| alpha.data()[m] * g.value(h[m]).data()[i]).sum();
            assert!((fused.data()[i] - want).abs() < 1e-12);
        }
        assert!(fused.row(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_width_and_zero_dna() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mlp = DnaMlp::new(&mut store, &mut rng, 4107, 600, 600).unwrap();
        for id in [mlp.hidden.bias, mlp.out.bias] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let tracks = [
            Tensor::zeros(&[4, 4107]),
            randn(&mut rng, 4, 640),
            randn(&mut rng, 4, 320),
        ];
        let b = bundle_from(&mut g, tracks, vec![true; 4]);
        let r = concat_fusion(&mut g, &b, &mlp).unwrap();
        let v = g.value(r.fused);
        assert_eq!(v.shape(), &[4, 1560]);
        for t in 0..4 {
            assert!(v.row(t)[..600].iter().all(|&x| x == 0.0));
        }
        assert!(r.alpha.is_none());
    }

    #[test]
    fn cross_attention_shapes_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let proj = ProjectionSet::new(&mut store, &mut rng, [16, 12, 8], 600, false).unwrap();
        let xattn = CrossAttention::new(&mut store, &mut rng, 600, 4, 0.1).unwrap();
        let tracks = [randn(&mut rng, 5, 16), randn(&mut rng, 5, 12), randn(&mut rng, 5, 8)];
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let b = bundle_from(&mut g, tracks, vec![true; 5]);
        let h: Vec<NodeId> = Modality::ALL
            .iter()
            .map(|&m| proj.project(&mut g, m, b.track(m), None).unwrap())
            .collect();
        let ctx = g.concat_time(&h).unwrap();
        assert_eq!(g.shape(ctx), &[15, 600]);
        let r = cross_modal_fusion(&mut g, &b, &proj, &xattn).unwrap();
        let v = g.value(r.fused);
        assert_eq!(v.shape(), &[5, 600]);
        for t in 0..5 {
            let row = v.row(t);
            let mean = row.iter().sum::<f64>() / 600.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 600.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
        }
    }

    #[test]
    fn cross_attention_ignores_padded_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let proj = ProjectionSet::new(&mut store, &mut rng, [3, 3, 3], 8, false).unwrap();
        let xattn = CrossAttention::new(&mut store, &mut rng, 8, 4, 0.1).unwrap();
        let base = [randn(&mut rng, 4, 3), randn(&mut rng, 4, 3), randn(&mut rng, 4, 3)];
        let padded = base.clone().map(|t| {
            let mut d = t.into_data();
            d.extend([0.0; 6]);
            Tensor::matrix(6, 3, d).unwrap()
        });
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let b0 = bundle_from(&mut g, base, vec![true; 4]);
        let mut mask = vec![true; 4];
        mask.extend([false, false]);
        let b1 = bundle_from(&mut g, padded, mask);
        let r0 = cross_modal_fusion(&mut g, &b0, &proj, &xattn).unwrap();
        let r1 = cross_modal_fusion(&mut g, &b1, &proj, &xattn).unwrap();
        let (v0, v1) = (g.value(r0.fused).clone(), g.value(r1.fused).clone());
        for t in 0..4 {
            for (a, b) in v0.row(t).iter().zip(v1.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(v1.row(5).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vanilla_concat_length_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let proj = ProjectionSet::new(&mut store, &mut rng, [5, 4, 3], 600, false).unwrap();
        let dna = EmbeddingTrack::new(Modality::Dna, randn(&mut rng, 3, 5)).unwrap();
        let rna = EmbeddingTrack::new(Modality::Rna, randn(&mut rng, 18, 4)).unwrap();
        let prot = EmbeddingTrack::new(Modality::Protein, randn(&mut rng, 6, 3)).unwrap();
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let out = vanilla_concat(&mut g, [&dna, &rna, &prot], &proj).unwrap();
        let v = g.value(out).clone();
        assert_eq!(v.shape(), &[27, 600]);
        let x = g.constant(rna.values().clone());
        let r = proj.project(&mut g, Modality::Rna, x, None).unwrap();
        assert_eq!(v.row(3), g.value(r).row(0));
        assert!(vanilla_concat(&mut g, [&rna, &dna, &prot], &proj).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("attention".parse::<Strategy>().is_err());
    }
}
