//! Finite-difference verification of the analytic backward pass.
//!
//! A tiny model is checked end to end through the batch loss: every parameter
//! tensor is probed at a few entries and the analytic gradient is compared
//! against a central-difference estimate. The 64-bit check differentiates the
//! exact function it evaluates; the 32-bit check compares single-precision
//! analytic gradients against a double-precision finite-difference oracle
//! evaluated at the cast-up parameter values, so the tolerance absorbs only
//! the rounding of the 32-bit forward/backward pass itself.

use crate::dataset::synthetic::random_episode;
use crate::dataset::{compute_norm_stats, Episode, NormStats};
use crate::embodiment::{builtin, EmbodimentSpec};
use crate::mxt::{MxtConfig, MxtModel};
use crate::nn::{backward, gather_grads, Scalar};
use crate::training::batch_loss;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const FD_STEP: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub precision: String,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "gradcheck {}: {} params probed, max rel err {:.3e} (tol {:.0e}, worst {}) -> {}",
            self.precision,
            self.params.len(),
            self.max_rel_err,
            self.tolerance,
            self.worst_param,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

struct Fixture {
    config: MxtConfig,
    spec: EmbodimentSpec,
    episodes: Vec<Episode>,
    stats: NormStats,
}

/// Uses an embodiment with every modality populated (both camera views,
/// full proprioception) so all parameter groups sit on the gradient path.
fn fixture() -> Fixture {
    let spec = builtin("locoman-uni-r").expect("builtin embodiment");
    let episodes = vec![random_episode(&spec, 901, 6), random_episode(&spec, 902, 6)];
    let stats = compute_norm_stats(&episodes).expect("norm stats");
    Fixture {
        config: MxtConfig::tiny(2),
        spec,
        episodes,
        stats,
    }
}

fn loss_value<F: Scalar>(model: &MxtModel<F>, fx: &Fixture) -> f64 {
    let samples = [(&fx.episodes[0], 1usize), (&fx.episodes[1], 2usize)];
    // Eval mode: no dropout, the rng is threaded but unused.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bl = batch_loss(model, &samples, &fx.stats, false, &mut rng);
    bl.total.value()[[0, 0]].to_f64()
}

fn analytic_grads<F: Scalar>(model: &MxtModel<F>, fx: &Fixture) -> Vec<Option<Array2<F>>> {
    let samples = [(&fx.episodes[0], 1usize), (&fx.episodes[1], 2usize)];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bl = batch_loss(model, &samples, &fx.stats, false, &mut rng);
    backward(&bl.total);
    gather_grads(&model.store, &bl.leafs)
}

fn probe_indices(len: usize) -> Vec<usize> {
    let mut idx = vec![0, len / 2, len.saturating_sub(1)];
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn central_difference(oracle: &mut MxtModel<f64>, fx: &Fixture, slot: usize, flat: usize) -> f64 {
    let base = {
        let v = oracle.store.get(slot).value.as_slice().expect("contiguous")[flat];
        v
    };
    oracle.store.get_mut(slot).value.as_slice_mut().unwrap()[flat] = base + FD_STEP;
    let up = loss_value(oracle, fx);
    oracle.store.get_mut(slot).value.as_slice_mut().unwrap()[flat] = base - FD_STEP;
    let down = loss_value(oracle, fx);
    oracle.store.get_mut(slot).value.as_slice_mut().unwrap()[flat] = base;
    (up - down) / (2.0 * FD_STEP)
}

/// Compares analytic gradients of `model` against finite differences computed
/// on `oracle` in f64. The two must hold the same parameter values (up to the
/// precision of `F`).
fn check<F: Scalar>(
    model: &MxtModel<F>,
    oracle: &mut MxtModel<f64>,
    fx: &Fixture,
    precision: &str,
    tolerance: f64,
) -> GradCheckReport {
    let grads = analytic_grads(model, fx);
    let mut params = Vec::new();
    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    for slot in 0..oracle.store.len() {
        let name = oracle.store.get(slot).name.clone();
        let n = oracle.store.get(slot).value.len();
        let analytic = grads[slot]
            .as_ref()
            .unwrap_or_else(|| panic!("parameter {name} received no gradient"));
        let aflat = analytic.as_slice().expect("contiguous grad");
        let idx = probe_indices(n);
        let mut param_err = 0.0f64;
        for &i in &idx {
            let fd = central_difference(oracle, fx, slot, i);
            let an = aflat[i].to_f64();
            // Relative error with an absolute floor so near-zero pairs
            // do not blow up on finite-difference noise.
            let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-4);
            param_err = param_err.max(rel);
        }
        if param_err > max_rel_err {
            max_rel_err = param_err;
            worst_param = name.clone();
        }
        params.push(ParamCheck {
            name,
            probes: idx.len(),
            max_rel_err: param_err,
        });
    }
    GradCheckReport {
        precision: precision.to_string(),
        tolerance,
        params,
        max_rel_err,
        worst_param,
        pass: max_rel_err < tolerance,
    }
}

/// 64-bit self-check: analytic vs central differences on the same model.
pub fn run_gradcheck_f64() -> GradCheckReport {
    let fx = fixture();
    let model = MxtModel::<f64>::build(fx.config.clone(), &fx.spec, 7);
    let mut oracle = MxtModel {
        config: model.config.clone(),
        spec: model.spec.clone(),
        store: model.store.clone(),
        prefix: String::new(),
    };
    check(&model, &mut oracle, &fx, "64-bit", TOL_F64)
}

/// 32-bit check against a 64-bit finite-difference oracle holding the
/// cast-up copies of the same parameter values.
pub fn run_gradcheck_f32() -> GradCheckReport {
    let fx = fixture();
    let model = MxtModel::<f32>::build(fx.config.clone(), &fx.spec, 7);
    let mut oracle = MxtModel {
        config: model.config.clone(),
        spec: model.spec.clone(),
        store: model.store.cast::<f64>(),
        prefix: String::new(),
    };
    check(&model, &mut oracle, &fx, "32-bit", TOL_F32)
}
