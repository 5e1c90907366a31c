use blf_core::alignment::{align_bundle, AlignedBundle, DnaUpsampler, ModalityDims, UpsampleGeometry};
use blf_core::autodiff::{grad_check, GradCheckOpts, Graph, Mode, ParamStore};
use blf_core::data::{synthesize, SyntheticSpec, TaskKind};
use blf_core::fusion::{mil_fusion, token_level_mil, GatedAttention, ProjectionSet, Strategy};
use blf_core::model::{ArchConfig, FusionModel, ModelConfig};
use blf_core::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn bundle(g: &mut Graph<'_>, tracks: [Tensor; 3]) -> AlignedBundle {
    let t_prime = tracks[0].rows();
    let [a, b, c] = tracks;
    AlignedBundle {
        t_prime,
        tracks: [g.constant(a), g.constant(b), g.constant(c)],
        mask: vec![true; t_prime],
    }
}

fn small_arch(shared: bool, upsample: UpsampleGeometry) -> ArchConfig {
    ArchConfig {
        d_shared: 6,
        d_attn: 4,
        heads: 2,
        head_channels: Some(3),
        dna_mlp_width: 5,
        upsample,
        shared_projection: shared,
        ..ArchConfig::default()
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let ds = synthesize(&SyntheticSpec {
        samples: 2,
        t_prime_min: 6,
        t_prime_max: 7,
        dims: ModalityDims {
            dna: 4,
            rna: 3,
            protein: 5,
        },
        ..SyntheticSpec::default()
    })
    .unwrap();
    let tracks = &ds.samples[0].tracks;
    for geometry in [UpsampleGeometry::default(), UpsampleGeometry::wide()] {
        for strategy in Strategy::ALL {
            for shared in [false, true] {
                let cfg = ModelConfig {
                    strategy,
                    arch: small_arch(shared, geometry),
                    dims: ds.dims,
                    task: TaskKind::Regression,
                    outputs: 1,
                };
                let (model, mut store) = FusionModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
                let opts = GradCheckOpts {
                    mode: Mode::Train,
                    dropout_seed: 3,
                    ..GradCheckOpts::default()
                };
                let report = grad_check(
                    |g| {
                        let out = model.forward(g, tracks, Some(tracks[2].len() + 1))?;
                        let p = g.mul(out.pred, out.pred)?;
                        let p = g.sum(p, None)?;
                        match out.entropy {
                            Some(h) => g.add(p, h),
                            None => Ok(p),
                        }
                    },
                    &mut store,
                    &opts,
                )
                .unwrap();
                assert!(report.passed(), "{strategy} shared={shared} {geometry:?}: {report:#?}");
            }
        }
    }
}

fn mil_parts(seed: u64, d_in: usize, shared: bool) -> (ParamStore, ProjectionSet, GatedAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let proj = ProjectionSet::new(&mut store, &mut rng, [d_in; 3], 5, shared).unwrap();
    let gate = GatedAttention::new(&mut store, &mut rng, 5, 4, shared, 1.0).unwrap();
    (store, proj, gate)
}

#[test]
fn mil_weights_lie_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for draw in 0..300 {
        let (store, proj, gate) = mil_parts(draw, 3, draw % 2 == 0);
        let t = 1 + draw as usize % 7;
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let scale = 1.0 + (draw % 10) as f64;
        let b = bundle(
            &mut g,
            std::array::from_fn(|_| randn(&mut rng, t, 3).map(|v| v * scale)),
        );
        for r in [
            mil_fusion(&mut g, &b, &proj, &gate).unwrap(),
            token_level_mil(&mut g, &b, &proj, &gate).unwrap(),
        ] {
            let alpha = g.value(r.alpha.unwrap());
            for row in 0..alpha.rows() {
                assert!(alpha.row(row).iter().all(|&a| a >= 0.0));
                assert!((alpha.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn gate_weights_ignore_constant_score_shifts() {
    let (store, _, gate) = mil_parts(1, 3, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for shift in [-7.5, -0.3, 0.0, 2.0, 11.0] {
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let s = randn(&mut rng, 4, 3);
        let a = g.constant(s.clone());
        let b = g.constant(s.map(|v| v + shift));
        let wa = gate.weights(&mut g, a).unwrap();
        let wb = gate.weights(&mut g, b).unwrap();
        assert!(g.value(wa).max_abs_diff(g.value(wb)) < 1e-12);
    }
}

fn entropy_at(tau: f64, store: &ParamStore, proj: &ProjectionSet, gate: &GatedAttention, tracks: &[Tensor; 3]) -> f64 {
    let mut store = store.clone();
    *store.value_mut(gate.tau) = Tensor::scalar(tau);
    let mut g = Graph::with_params(&store, Mode::Eval, 0);
    let b = bundle(&mut g, tracks.clone());
    let r = mil_fusion(&mut g, &b, proj, gate).unwrap();
    g.value(r.entropy.unwrap()).item()
}

#[test]
fn higher_temperature_never_sharpens_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let (store, proj, gate) = mil_parts(seed, 3, false);
        let tracks = std::array::from_fn(|_| randn(&mut rng, 6, 3).map(|v| 3.0 * v));
        let taus = [0.05, 0.2, 0.5, 1.0, 2.0, 8.0];
        let h: Vec<f64> = taus
            .iter()
            .map(|&t| entropy_at(t, &store, &proj, &gate, &tracks))
            .collect();
        for w in h.windows(2) {
            assert!(w[0] <= w[1] + 1e-12, "{h:?}");
        }
        assert!(h[taus.len() - 1] <= 3f64.ln() + 1e-12);
    }
}

#[test]
fn shared_projection_fusion_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (store, proj, gate) = mil_parts(4, 3, true);
    let x: [Tensor; 3] = std::array::from_fn(|_| randn(&mut rng, 5, 3));
    let fused = |order: [usize; 3]| -> Result<(Tensor, Tensor)> {
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let b = bundle(&mut g, order.map(|i| x[i].clone()));
        let r = mil_fusion(&mut g, &b, &proj, &gate)?;
        Ok((g.value(r.fused).clone(), g.value(r.alpha.unwrap()).clone()))
    };
    let (base, base_alpha) = fused([0, 1, 2]).unwrap();
    for order in [[1, 0, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1], [0, 2, 1]] {
        let (f, alpha) = fused(order).unwrap();
        assert!(f.max_abs_diff(&base) < 1e-9);
        for (pos, &src) in order.iter().enumerate() {
            assert!((alpha.data()[pos] - base_alpha.data()[src]).abs() < 1e-9);
        }
    }
}

#[test]
fn aligned_lengths_follow_the_codon_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let up = DnaUpsampler::new(&mut store, &mut rng, 2, UpsampleGeometry::default()).unwrap();
    for k in 1..=40 {
        let t = 6 * k;
        let tracks = blf_core::data::synthetic::raw_lengths(t / 3);
        assert_eq!(tracks, [t / 6, t, t / 3]);
        let mk =
            |m, len, rng: &mut ChaCha8Rng| blf_core::alignment::EmbeddingTrack::new(m, randn(rng, len, 2)).unwrap();
        use blf_core::alignment::Modality::*;
        let (d, r, p) = (
            mk(Dna, t / 6, &mut rng),
            mk(Rna, t, &mut rng),
            mk(Protein, t / 3, &mut rng),
        );
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let b = align_bundle(&mut g, &d, &r, &p, &up, None).unwrap();
        assert_eq!(b.t_prime, t / 3);
        assert!(b.mask.iter().all(|&m| m));
        for n in b.tracks {
            assert_eq!(g.shape(n)[0], t / 3);
        }
    }
}
