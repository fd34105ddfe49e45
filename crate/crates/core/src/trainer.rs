//! Training strategies, AdamW, the training loop and sequence inference.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bbox::BoxXywh;
use crate::checkpoint::{self, Checkpoint};
use crate::dataset::{Dataset, Sequence};
use crate::error::{invalid, Error, Result};
use crate::geometry::Intrinsics;
use crate::losses::{
    selfsup_depth_loss_var, supervised_depth_loss_var, total_loss_var, tracking_loss_var, LossReport,
    LossWeights, SelfSupInputs,
};
use crate::model::{disparity_to_depth_var, ArchConfig, Binder, Model, ParamGroup};
use crate::preprocess::{build_sample, crop_pad, Sample, SampleConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "TRACK_ONLY_LARGE")]
    TrackOnlyLarge,
    #[serde(rename = "TRACK_ONLY_SMALL")]
    TrackOnlySmall,
    #[serde(rename = "SUPERVISED_AUX")]
    SupervisedAux,
    #[serde(rename = "SELFSUP_AUX")]
    SelfSupAux,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::TrackOnlyLarge,
        Strategy::TrackOnlySmall,
        Strategy::SupervisedAux,
        Strategy::SelfSupAux,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::TrackOnlyLarge => "TRACK_ONLY_LARGE",
            Strategy::TrackOnlySmall => "TRACK_ONLY_SMALL",
            Strategy::SupervisedAux => "SUPERVISED_AUX",
            Strategy::SelfSupAux => "SELFSUP_AUX",
        }
    }

    pub fn uses_depth_head(self) -> bool {
        matches!(self, Strategy::SupervisedAux | Strategy::SelfSupAux)
    }

    pub fn uses_pose_net(self) -> bool {
        self == Strategy::SelfSupAux
    }

    pub fn trains(self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::DepthHead => self.uses_depth_head(),
            ParamGroup::PoseNet => self.uses_pose_net(),
            _ => true,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy `{s}` (expected one of TRACK_ONLY_LARGE, TRACK_ONLY_SMALL, SUPERVISED_AUX, SELFSUP_AUX)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_drop_factor: f64,
    /// Fraction of `total_steps` after which the learning rate drops.
    pub lr_drop_at: f64,
    /// Learning-rate multiplier for the pose network.
    pub pose_lr_scale: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Zero keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub arch: ArchConfig,
    pub loss: LossWeights,
    pub sample: SampleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 1e-4,
            lr_drop_factor: 0.1,
            lr_drop_at: 0.8,
            pose_lr_scale: 4.0,
            batch_size: 4,
            total_steps: 300,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
            arch: ArchConfig::default(),
            loss: LossWeights {
                tie_break: 1e-5,
                ..Default::default()
            },
            sample: SampleConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced-resolution settings for CPU runs.
    pub fn desk() -> Self {
        let arch = ArchConfig::desk();
        TrainConfig {
            sample: SampleConfig {
                search_side: arch.input_side,
                template_side: arch.template_side,
                ..Default::default()
            },
            arch,
            batch_size: 2,
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be nonnegative");
        }
        if !(self.pose_lr_scale >= 0.0 && self.pose_lr_scale.is_finite()) {
            return bad("pose_lr_scale must be nonnegative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if !(self.lr_drop_factor > 0.0) || !(0.0..=1.0).contains(&self.lr_drop_at) {
            return bad("lr_drop_factor must be positive and lr_drop_at in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be positive");
        }
        self.arch.validate()?;
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.sample.search_side != self.arch.input_side
            || self.sample.template_side != self.arch.template_side
        {
            return bad("sample sides must match arch input_side/template_side");
        }
        if self.sample.range == 0 {
            return bad("sample.range must be at least 1");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let drop = (self.lr_drop_at * self.total_steps as f64).floor() as u64;
        if step >= drop {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

// --------------------------------------------------------------------
// objective

/// Per-sample breakdown collected while building the objective.
#[derive(Clone, Debug, Default)]
pub struct ObjectiveParts {
    pub tracking: f64,
    pub depth_aux: f64,
    pub per_scale: Vec<f64>,
    pub mask_coverage: f64,
}

/// Builds the strategy's loss for one sample on `g`.
pub fn sample_objective(
    g: &mut Graph,
    model: &Model,
    b: &mut Binder,
    sample: &Sample,
    strategy: Strategy,
    w: &LossWeights,
) -> Result<(Var, ObjectiveParts)> {
    let template = g.constant(sample.template.clone());
    let search = g.constant(sample.search_t.clone());
    let pair = if strategy.uses_pose_net() {
        Some((
            g.constant(sample.search_prev.clone()),
            g.constant(sample.search_next.clone()),
        ))
    } else {
        None
    };
    let out = model.forward_graph(g, b, template, search, pair, strategy)?;
    let tracking = tracking_loss_var(g, out.track.bbox, sample.normalized_box(), w);
    let mut parts = ObjectiveParts {
        tracking: g.value(tracking).item(),
        ..Default::default()
    };
    let side = sample.search_side();
    let aux = match strategy {
        Strategy::TrackOnlyLarge | Strategy::TrackOnlySmall => None,
        Strategy::SupervisedAux => {
            let gt = sample
                .gt_depth
                .as_ref()
                .ok_or_else(|| Error::Config("supervised auxiliary training needs ground-truth depth".into()))?;
            if sample.pad_mask.data().iter().all(|&m| m >= 1.0) {
                return Err(Error::UndefinedLoss("sample is entirely padding".into()));
            }
            let gt = Rc::new(gt.clone());
            let disps = out.disparities.as_ref().unwrap();
            let mut terms = Vec::with_capacity(disps.len());
            for &d in disps {
                let up = g.resize_bilinear(d, side, side);
                let depth = disparity_to_depth_var(g, up);
                let l = supervised_depth_loss_var(g, depth, &gt, &sample.pad_mask);
                parts.per_scale.push(g.value(l).item());
                terms.push(l);
            }
            let stacked = g.concat0(&terms);
            Some(g.mean(stacked))
        }
        Strategy::SelfSupAux => {
            let k = Intrinsics::pseudo(side, side);
            let disps = out.disparities.as_ref().unwrap();
            let [pp, pn] = out.poses.unwrap();
            let (prev, next) = pair.unwrap();
            let inp = SelfSupInputs {
                disparities: disps,
                target: search,
                prev,
                next,
                poses: [pp, pn],
                intrinsics: &k,
                pad_mask: &sample.pad_mask,
                tie_seed: sample.rng_seed,
            };
            let (l, stats) = selfsup_depth_loss_var(g, &inp, w)?;
            parts.per_scale = stats.per_scale;
            parts.mask_coverage = stats.mask_coverage;
            Some(l)
        }
    };
    if let Some(a) = aux {
        parts.depth_aux = g.value(a).item();
    }
    let total = total_loss_var(g, strategy, tracking, aux, w.alpha);
    Ok((total, parts))
}

// --------------------------------------------------------------------
// optimizer state

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub strategy: Strategy,
    pub step: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

impl TrainState {
    pub fn new(model: Model, strategy: Strategy) -> Self {
        let zeros: Vec<Tensor> = model
            .params
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        TrainState {
            model,
            strategy,
            step: 0,
            adam_m: zeros.clone(),
            adam_v: zeros,
        }
    }
}

/// Per-step log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub tracking: f64,
    pub depth_aux: f64,
    pub per_scale: Vec<f64>,
    pub mask_coverage: f64,
}

fn report_text(step: u64, r: &LossReport) -> String {
    format!(
        "step {step}: total={} tracking={} depth_aux={} per_scale={:?}",
        r.total, r.tracking, r.depth_aux, r.per_scale
    )
}

/// Loss and gradients of a batch, averaged over samples. Gradients are
/// indexed like the model parameters; untouched entries are zero.
pub fn batch_gradients(
    model: &Model,
    batch: &[Sample],
    strategy: Strategy,
    w: &LossWeights,
) -> Result<(LossReport, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let params = model.params.params();
    let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut rep = LossReport::default();
    let n = batch.len() as f64;
    for sample in batch {
        let mut g = Graph::new();
        let mut b = Binder::new(&model.params, |grp| strategy.trains(grp));
        let (loss, parts) = sample_objective(&mut g, model, &mut b, sample, strategy, w)?;
        let total = g.value(loss).item();
        rep.total += total / n;
        rep.tracking += parts.tracking / n;
        rep.depth_aux += parts.depth_aux / n;
        rep.mask_coverage += parts.mask_coverage / n;
        if rep.per_scale.len() < parts.per_scale.len() {
            rep.per_scale.resize(parts.per_scale.len(), 0.0);
        }
        for (a, v) in rep.per_scale.iter_mut().zip(&parts.per_scale) {
            *a += v / n;
        }
        if !total.is_finite() {
            continue;
        }
        let mut gr = g.backward(loss);
        for (i, v) in b.trainable_vars() {
            if let Some(t) = gr.take(v) {
                for (a, x) in grads[i].data_mut().iter_mut().zip(t.data()) {
                    *a += x / n;
                }
            }
        }
    }
    Ok((rep, grads))
}

/// One AdamW update over the strategy's trainable groups.
pub fn apply_adamw(state: &mut TrainState, grads: &[Tensor], cfg: &TrainConfig) {
    let lr = cfg.lr_at(state.step);
    let t = (state.step + 1) as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let strategy = state.strategy;
    let params = state.model.params.params_mut();
    for (i, p) in params.iter_mut().enumerate() {
        if !strategy.trains(p.group) {
            continue;
        }
        let lr = if p.group == ParamGroup::PoseNet { lr * cfg.pose_lr_scale } else { lr };
        let m = state.adam_m[i].data_mut();
        let v = state.adam_v[i].data_mut();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = grads[i].data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let decayed = *w - lr * cfg.weight_decay * *w;
            *w = decayed - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    state.step += 1;
}

/// Forward, backward and one optimizer update.
pub fn train_step(state: &mut TrainState, batch: &[Sample], cfg: &TrainConfig) -> Result<LossReport> {
    let (rep, grads) = batch_gradients(&state.model, batch, state.strategy, &cfg.loss)?;
    let finite = rep.total.is_finite()
        && grads.iter().all(Tensor::all_finite);
    if !finite {
        return Err(Error::NonFinite {
            step: state.step,
            report: report_text(state.step, &rep),
        });
    }
    apply_adamw(state, &grads, cfg);
    Ok(rep)
}

// --------------------------------------------------------------------
// data

/// Checks that the dataset can feed the strategy.
pub fn check_dataset(ds: &Dataset, strategy: Strategy) -> Result<()> {
    if ds.sequences.is_empty() {
        return Err(Error::Config("dataset has no sequences".into()));
    }
    if strategy == Strategy::SupervisedAux && !ds.has_depth() {
        return Err(Error::Config(
            "SUPERVISED_AUX needs ground-truth depth for every sequence".into(),
        ));
    }
    for s in &ds.sequences {
        if s.meta.valid_frames.is_empty() {
            return Err(Error::Config(format!("sequence {} has no valid frames", s.name)));
        }
    }
    Ok(())
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Batch for `step`, a pure function of `(dataset, cfg.seed, step)`.
pub fn make_batch(ds: &Dataset, cfg: &TrainConfig, strategy: Strategy, step: u64) -> Result<Vec<Sample>> {
    let mut rng = step_rng(cfg.seed, step);
    (0..cfg.batch_size)
        .map(|_| {
            let seq = &ds.sequences[rng.random_range(0..ds.sequences.len())];
            let valid = &seq.meta.valid_frames;
            let t = valid[rng.random_range(0..valid.len())];
            let seed = rng.next_u64();
            build_sample(seq, t, &cfg.sample, strategy == Strategy::SupervisedAux, seed)
        })
        .collect()
}

// --------------------------------------------------------------------
// loop

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs from `state.step` to `cfg.total_steps`. With `out_dir`, appends to
/// `train_log.jsonl` and writes checkpoints there.
pub fn train_loop(
    ds: &Dataset,
    mut state: TrainState,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(ds, state.strategy)?;
    if state.model.arch != cfg.arch {
        return Err(Error::Config("model architecture differs from the config".into()));
    }
    let mut log_file = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("train_log.jsonl");
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Some((p, BufWriter::new(f)))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    while state.step < cfg.total_steps {
        let step = state.step;
        let batch = make_batch(ds, cfg, state.strategy, step)?;
        let lr = cfg.lr_at(step);
        let rep = train_step(&mut state, &batch, cfg)?;
        let rec = LogRecord {
            step: step + 1,
            lr,
            total: rep.total,
            tracking: rep.tracking,
            depth_aux: rep.depth_aux,
            per_scale: rep.per_scale,
            mask_coverage: rep.mask_coverage,
        };
        if let Some((p, f)) = &mut log_file {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
        }
        on_step(&rec);
        log.push(rec);
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.total_steps {
                let p = d.join(format!("ckpt_{:06}.json", state.step));
                Checkpoint::from_state(&state, cfg).save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some((p, f)) = &mut log_file {
        f.flush().map_err(|e| Error::io(&*p, e))?;
    }
    if let Some(d) = out_dir {
        let p = d.join("final.json");
        Checkpoint::from_state(&state, cfg).save(&p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome {
        state,
        log,
        checkpoints,
    })
}

/// Resumes from a checkpoint written by [`train_loop`].
pub fn resume(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let ck = checkpoint::Checkpoint::load(path)?;
    let cfg = ck
        .config
        .clone()
        .ok_or_else(|| Error::Config("checkpoint has no training config".into()))?;
    Ok((ck.into_state()?, cfg))
}

// --------------------------------------------------------------------
// inference

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub bbox: BoxXywh,
    /// The tracker produced no usable box and kept the previous one.
    pub lost: bool,
}

/// Tracks through `seq` from the ground-truth box of frame 0.
pub fn infer_sequence(model: &Model, seq: &Sequence, cfg: &SampleConfig) -> Result<Vec<FramePrediction>> {
    if seq.is_empty() {
        return Err(invalid!("empty sequence"));
    }
    let init = seq.boxes[0];
    let (template, _, _) = crop_pad(&seq.frames[0], &init, cfg.template_factor, cfg.template_side)?;
    let mut out = vec![FramePrediction {
        bbox: init,
        lost: false,
    }];
    let mut prev = init;
    for f in &seq.frames[1..] {
        let (fw, fh) = (f.width as f64, f.height as f64);
        let (search, _, crop) = crop_pad(f, &prev, cfg.search_factor, cfg.search_side)?;
        let track = model.track(&template, &search)?;
        let side = cfg.search_side as f64;
        let pred = crop.box_to_source(&track.bbox.scaled(side)).clip(fw, fh);
        let (cx, cy) = pred.center();
        let usable = pred.is_finite()
            && pred.w >= 1.0
            && pred.h >= 1.0
            && (0.0..=fw).contains(&cx)
            && (0.0..=fh).contains(&cy);
        if usable {
            prev = pred;
        }
        out.push(FramePrediction {
            bbox: prev,
            lost: !usable,
        });
    }
    Ok(out)
}

pub fn save_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in log {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
