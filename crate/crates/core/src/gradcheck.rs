//! Central finite-difference checks of analytic gradients.
//!
//! Perturbed evaluations replay the branch decisions (abs signs, min picks,
//! clamps, sampling cells) of the unperturbed pass, so every loss is checked
//! on one smooth piece.

use serde::{Deserialize, Serialize};

use crate::autograd::{BranchTape, Graph, Var};
use crate::error::Result;
use crate::losses::LossWeights;
use crate::model::{ArchConfig, Binder, Model, ModelParams};
use crate::preprocess::{build_sample, Sample, SampleConfig};
use crate::synthworld::{CameraMode, SceneSpec};
use crate::tensor::Tensor;
use crate::trainer::{sample_objective, Strategy};

pub const FD_STEP: f64 = 1e-4;
/// Gradient magnitudes below this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub path: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter element with the largest error, as `name[index]`.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub param_count: usize,
    pub paths: Vec<PathReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Checks `f` against central differences in every element of `inputs`.
/// Returns `(max relative error, flat index of the worst element)`.
pub fn check_function(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> (f64, usize) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let tape = g.branch_tape();
    let grads = g.backward(out);
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::replaying(&tape);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut xs = inputs.to_vec();
    let mut worst = (0.0, 0);
    let mut flat = 0;
    for (k, v) in vars.iter().enumerate() {
        let a = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].len() {
            let x0 = xs[k].data()[j];
            xs[k].data_mut()[j] = x0 + FD_STEP;
            let lp = eval(&xs);
            xs[k].data_mut()[j] = x0 - FD_STEP;
            let lm = eval(&xs);
            xs[k].data_mut()[j] = x0;
            let e = relative_error(a.data()[j], (lp - lm) / (2.0 * FD_STEP));
            if e > worst.0 {
                worst = (e, flat);
            }
            flat += 1;
        }
    }
    worst
}

fn objective_value(model: &Model, params: &ModelParams, sample: &Sample, strategy: Strategy, w: &LossWeights, tape: &BranchTape) -> Result<f64> {
    let mut g = Graph::replaying(tape);
    let mut b = Binder::frozen(params);
    let (loss, _) = sample_objective(&mut g, model, &mut b, sample, strategy, w)?;
    Ok(g.value(loss).item())
}

/// Checks the gradient of the strategy's objective in every trainable
/// parameter. `flip_sign` negates the analytic gradient as a negative
/// control.
pub fn check_strategy(model: &Model, sample: &Sample, strategy: Strategy, flip_sign: bool) -> Result<PathReport> {
    let w = LossWeights::default();
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, |grp| strategy.trains(grp));
    let (loss, _) = sample_objective(&mut g, model, &mut b, sample, strategy, &w)?;
    let tape = g.branch_tape();
    let grads = g.backward(loss);
    let mut params = model.params.clone();
    let mut rep = PathReport {
        path: path_name(strategy).to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, v) in b.trainable_vars() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.params.params()[i].value.shape()));
        for j in 0..analytic.len() {
            let x0 = params.params()[i].value.data()[j];
            params.params_mut()[i].value.data_mut()[j] = x0 + FD_STEP;
            let lp = objective_value(model, &params, sample, strategy, &w, &tape)?;
            params.params_mut()[i].value.data_mut()[j] = x0 - FD_STEP;
            let lm = objective_value(model, &params, sample, strategy, &w, &tape)?;
            params.params_mut()[i].value.data_mut()[j] = x0;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = if flip_sign { -analytic.data()[j] } else { analytic.data()[j] };
            let e = relative_error(a, numeric);
            rep.checked += 1;
            if e > rep.max_rel_error || rep.worst.is_empty() {
                rep.max_rel_error = e;
                rep.worst = format!("{}[{j}]", model.params.params()[i].name);
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
    }
    Ok(rep)
}

fn path_name(s: Strategy) -> &'static str {
    match s {
        Strategy::TrackOnlyLarge | Strategy::TrackOnlySmall => "tracking",
        Strategy::SupervisedAux => "supervised-depth",
        Strategy::SelfSupAux => "self-supervised-depth",
    }
}

/// Sample from a small moving-camera scene, sized for `arch`.
pub fn probe_sample(arch: &ArchConfig, seed: u64) -> Result<Sample> {
    let scene = SceneSpec::random(seed, 8, 128, 96, CameraMode::Moving)?;
    let seq = scene.render_sequence("probe")?;
    let cfg = SampleConfig {
        search_side: arch.input_side,
        template_side: arch.template_side,
        ..SampleConfig::default()
    }
    .without_augmentation();
    build_sample(&seq, 4, &cfg, true, seed)
}

/// Runs all three loss paths on the tiny architecture.
pub fn run(seed: u64, flip_sign: bool) -> Result<GradCheckReport> {
    let arch = ArchConfig::tiny();
    let model = Model::new(arch.clone(), seed)?;
    let sample = probe_sample(&arch, seed)?;
    let paths = [Strategy::TrackOnlyLarge, Strategy::SupervisedAux, Strategy::SelfSupAux]
        .into_iter()
        .map(|s| check_strategy(&model, &sample, s, flip_sign))
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = paths.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        seed,
        param_count: model.param_count(),
        paths,
        max_rel_error,
        passed: max_rel_error < TOLERANCE,
    })
}
