//! Full per-sequence model: alignment, one fusion strategy, TextCNN head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_bundle, DnaUpsampler, EmbeddingTrack, Modality, ModalityDims, UpsampleGeometry};
use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::fusion::{
    concat_fusion, cross_modal_fusion, mil_fusion, token_level_mil, vanilla_concat, CrossAttention, DnaMlp,
    GatedAttention, ProjectionSet, Strategy,
};
use crate::head::{TextCnn, HEAD_DROPOUT};

/// Architecture hyperparameters that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub d_shared: usize,
    pub d_attn: usize,
    pub heads: usize,
    pub attn_dropout: f64,
    /// Per-strategy default when absent (see [`ArchConfig::channels_for`]).
    pub head_channels: Option<usize>,
    pub head_dropout: f64,
    /// Hidden and output width of the DNA MLP used by `concat`.
    pub dna_mlp_width: usize,
    pub upsample: UpsampleGeometry,
    pub shared_projection: bool,
    pub tau_init: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_shared: 600,
            d_attn: 100,
            heads: 4,
            attn_dropout: 0.1,
            head_channels: None,
            head_dropout: HEAD_DROPOUT,
            dna_mlp_width: 600,
            upsample: UpsampleGeometry::default(),
            shared_projection: false,
            tau_init: 1.0,
        }
    }
}

impl ArchConfig {
    pub fn channels_for(&self, strategy: Strategy) -> usize {
        self.head_channels.unwrap_or(match strategy {
            Strategy::Mil | Strategy::MilToken => 1280,
            Strategy::Cross => 100,
            Strategy::Concat | Strategy::VanillaConcat => 256,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.d_shared,
            self.d_attn,
            self.heads,
            self.dna_mlp_width,
            self.upsample.kernel,
            self.upsample.stride,
        ];
        if widths.contains(&0) || self.head_channels == Some(0) {
            return Err(Error::Config("architecture widths must be positive".into()));
        }
        for (name, p) in [("attn_dropout", self.attn_dropout), ("head_dropout", self.head_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if !self.tau_init.is_finite() || self.tau_init <= 0.0 {
            return Err(Error::Config(format!("tau_init {} must be positive", self.tau_init)));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub strategy: Strategy,
    pub arch: ArchConfig,
    pub dims: ModalityDims,
    pub task: TaskKind,
    pub outputs: usize,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub upsampler: Option<DnaUpsampler>,
    pub projection: Option<ProjectionSet>,
    pub gate: Option<GatedAttention>,
    pub cross: Option<CrossAttention>,
    pub dna_mlp: Option<DnaMlp>,
    pub head: TextCnn,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[1, outputs]`
    pub pred: NodeId,
    pub alpha: Option<NodeId>,
    pub alpha_mask: Option<Vec<bool>>,
    pub entropy: Option<NodeId>,
}

impl FusionModel {
    /// Registers all parameters in a fresh store.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        config.arch.validate()?;
        let a = &config.arch;
        let dims = config.dims.as_array();
        let mut store = ParamStore::new();
        let s = config.strategy;
        let upsampler = match s {
            Strategy::VanillaConcat => None,
            _ => Some(DnaUpsampler::new(&mut store, rng, config.dims.dna, a.upsample)?),
        };
        let projection = match s {
            Strategy::Concat => None,
            _ => Some(ProjectionSet::new(
                &mut store,
                rng,
                dims,
                a.d_shared,
                a.shared_projection,
            )?),
        };
        let gate = match s {
            Strategy::Mil | Strategy::MilToken => Some(GatedAttention::new(
                &mut store,
                rng,
                a.d_shared,
                a.d_attn,
                a.shared_projection,
                a.tau_init,
            )?),
            _ => None,
        };
        let cross = match s {
            Strategy::Cross => Some(CrossAttention::new(
                &mut store,
                rng,
                a.d_shared,
                a.heads,
                a.attn_dropout,
            )?),
            _ => None,
        };
        let dna_mlp = match s {
            Strategy::Concat => Some(DnaMlp::new(
                &mut store,
                rng,
                config.dims.dna,
                a.dna_mlp_width,
                a.dna_mlp_width,
            )?),
            _ => None,
        };
        let d_fused = match s {
            Strategy::Concat => a.dna_mlp_width + config.dims.rna + config.dims.protein,
            _ => a.d_shared,
        };
        let head = TextCnn::new(
            &mut store,
            rng,
            d_fused,
            a.channels_for(s),
            config.outputs,
            a.head_dropout,
        )?;
        Ok((
            Self {
                config,
                upsampler,
                projection,
                gate,
                cross,
                dna_mlp,
                head,
            },
            store,
        ))
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    /// Runs one sequence. `target_len` pads the aligned frame (batch padding).
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        tracks: &[EmbeddingTrack; 3],
        target_len: Option<usize>,
    ) -> Result<ModelOutput> {
        for m in Modality::ALL {
            let (want, got) = (self.config.dims.get(m), tracks[m.index()].dim());
            if want != got {
                return Err(Error::DimMismatch {
                    what: format!("{m} embedding dim"),
                    checkpoint: want,
                    data: got,
                });
            }
        }
        let fusion = if self.strategy() == Strategy::VanillaConcat {
            let proj = self.projection.as_ref().expect("vanilla_concat has a projection");
            let fused = vanilla_concat(g, [&tracks[0], &tracks[1], &tracks[2]], proj)?;
            crate::fusion::FusionResult {
                fused,
                alpha: None,
                alpha_mask: None,
                entropy: None,
            }
        } else {
            let up = self.upsampler.as_ref().expect("aligned strategies have an upsampler");
            let bundle = align_bundle(g, &tracks[0], &tracks[1], &tracks[2], up, target_len)?;
            match self.strategy() {
                Strategy::Concat => concat_fusion(g, &bundle, self.dna_mlp.as_ref().expect("concat mlp"))?,
                Strategy::Mil => mil_fusion(g, &bundle, self.proj(), self.gate.as_ref().expect("gate"))?,
                Strategy::MilToken => token_level_mil(g, &bundle, self.proj(), self.gate.as_ref().expect("gate"))?,
                Strategy::Cross => cross_modal_fusion(g, &bundle, self.proj(), self.cross.as_ref().expect("cross"))?,
                Strategy::VanillaConcat => unreachable!(),
            }
        };
        let pred = self.head.forward(g, fusion.fused)?;
        Ok(ModelOutput {
            pred,
            alpha: fusion.alpha,
            alpha_mask: fusion.alpha_mask,
            entropy: fusion.entropy,
        })
    }

    fn proj(&self) -> &ProjectionSet {
        self.projection.as_ref().expect("projection")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::data::{synthesize, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_arch() -> ArchConfig {
        ArchConfig {
            d_shared: 8,
            d_attn: 4,
            heads: 2,
            head_channels: Some(4),
            dna_mlp_width: 6,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn every_strategy_predicts_one_value() {
        let ds = synthesize(&SyntheticSpec {
            samples: 3,
            dims: ModalityDims {
                dna: 5,
                rna: 4,
                protein: 3,
            },
            ..SyntheticSpec::default()
        })
        .unwrap();
        for s in Strategy::ALL {
            let cfg = ModelConfig {
                strategy: s,
                arch: small_arch(),
                dims: ds.dims,
                task: TaskKind::Regression,
                outputs: 1,
            };
            let (model, store) = FusionModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let mut g = Graph::with_params(&store, Mode::Train, 0);
            let out = model.forward(&mut g, &ds.samples[0].tracks, None).unwrap();
            assert_eq!(g.shape(out.pred), &[1, 1], "{s}");
            assert_eq!(out.alpha.is_some(), s.has_attention(), "{s}");
        }
    }

    #[test]
    fn wrong_track_width_names_both_dims() {
        let ds = synthesize(&SyntheticSpec {
            samples: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            strategy: Strategy::Mil,
            arch: small_arch(),
            dims: ModalityDims {
                dna: 16,
                rna: 32,
                protein: 16,
            },
            task: TaskKind::Regression,
            outputs: 1,
        };
        let (model, store) = FusionModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let err = model
            .forward(&mut g, &ds.samples[0].tracks, None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("32") && err.contains("16") && err.contains("RNA"), "{err}");
    }
}
