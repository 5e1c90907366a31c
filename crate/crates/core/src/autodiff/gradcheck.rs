//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOpts {
    /// Finite-difference step.
    pub eps: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// At most this many scalar coordinates are probed across all parameters.
    pub max_coords: usize,
    /// Denominator floor for the relative error, `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
    /// Mode the builder's graph is created in. Dropout masks are frozen by the fixed seed.
    pub mode: Mode,
    pub dropout_seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: 200,
            floor: 1e-4,
            seed: 0,
            mode: Mode::Eval,
            dropout_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn eval_loss<F>(build: &F, params: &ParamStore, opts: &GradCheckOpts) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::with_params(params, opts.mode, opts.dropout_seed);
    let loss = build(&mut g)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares tape gradients of `build`'s scalar output against central
/// differences on a random subset of parameter coordinates.
///
/// `build` must be deterministic for a fixed parameter state.
pub fn grad_check<F>(build: F, params: &mut ParamStore, opts: &GradCheckOpts) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let analytic: Vec<_> = {
        let mut g = Graph::with_params(params, opts.mode, opts.dropout_seed);
        let loss = build(&mut g)?;
        g.backward(loss)?;
        let mut grads: Vec<_> = params
            .ids()
            .map(|id| crate::Tensor::zeros(params.value(id).shape()))
            .collect();
        for (id, grad) in g.param_grads() {
            grads[id.index()] = grad.clone();
        }
        grads
    };

    let total = params.num_scalars();
    let picks = if total <= opts.max_coords {
        (0..total).collect::<Vec<_>>()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut v = sample(&mut rng, total, opts.max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut offsets = Vec::with_capacity(params.len());
    let mut acc = 0;
    for id in params.ids() {
        offsets.push(acc);
        acc += params.value(id).numel();
    }

    let mut checks: Vec<ParamCheck> = params
        .ids()
        .map(|id| ParamCheck {
            name: params.name(id).to_string(),
            coords: 0,
            max_rel_err: 0.0,
        })
        .collect();

    for flat in picks {
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let id = params.ids().nth(pi).expect("offset index");
        let j = flat - offsets[pi];
        let orig = params.value(id).data()[j];
        params.value_mut(id).data_mut()[j] = orig + opts.eps;
        let plus = eval_loss(&build, params, opts);
        params.value_mut(id).data_mut()[j] = orig - opts.eps;
        let minus = eval_loss(&build, params, opts);
        params.value_mut(id).data_mut()[j] = orig;
        let numeric = (plus? - minus?) / (2.0 * opts.eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                op: "finite difference",
            });
        }
        let a = analytic[pi].data()[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        let c = &mut checks[pi];
        c.coords += 1;
        c.max_rel_err = c.max_rel_err.max(err);
    }

    checks.retain(|c| c.coords > 0);
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_err,
        tol: opts.tol,
    })
}
