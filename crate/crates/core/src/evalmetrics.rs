//! Tracking and depth metrics.
//!
//! Overlap thresholds use strict `>`; distance thresholds use `<=`.

use serde::{Deserialize, Serialize};

use crate::bbox::BoxXywh;
use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::losses::supervised_depth_loss;
use crate::model::{depth_at, Model};
use crate::preprocess::{build_sample, Sample, SampleConfig};
use crate::tensor::Tensor;
use crate::trainer::infer_sequence;

pub const PRECISION_PX: f64 = 20.0;

pub fn iou(a: &BoxXywh, b: &BoxXywh) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn check_nonempty(n: usize) -> Result<()> {
    if n == 0 {
        return Err(invalid!("metric needs at least one frame"));
    }
    Ok(())
}

fn frac_above(ious: &[f64], t: f64) -> f64 {
    ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64
}

/// Mean over thresholds `0, 0.05, ..., 1` of the fraction of IoUs above
/// each threshold, in percent.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    check_nonempty(ious.len())?;
    let s: f64 = (0..=20).map(|k| frac_above(ious, k as f64 / 20.0)).sum();
    Ok(100.0 * s / 21.0)
}

/// `(AO, SR_0.5, SR_0.75)` in percent.
pub fn ao_sr(ious: &[f64]) -> Result<(f64, f64, f64)> {
    check_nonempty(ious.len())?;
    let ao = 100.0 * ious.iter().sum::<f64>() / ious.len() as f64;
    Ok((ao, 100.0 * frac_above(ious, 0.5), 100.0 * frac_above(ious, 0.75)))
}

/// Center-error precision at 20 px and the normalized-precision AUC over
/// thresholds `0, 0.01, ..., 0.5` of error divided by the ground-truth
/// box diagonal, both in percent.
pub fn precision_metrics(pred: &[(f64, f64)], gt: &[(f64, f64)], gt_boxes: &[BoxXywh]) -> Result<(f64, f64)> {
    check_nonempty(pred.len())?;
    if pred.len() != gt.len() || gt.len() != gt_boxes.len() {
        return Err(invalid!(
            "misaligned inputs: {} predictions, {} centers, {} boxes",
            pred.len(),
            gt.len(),
            gt_boxes.len()
        ));
    }
    let n = pred.len() as f64;
    let errs: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt())
        .collect();
    let p = 100.0 * errs.iter().filter(|&&e| e <= PRECISION_PX).count() as f64 / n;
    let norm: Vec<f64> = errs
        .iter()
        .zip(gt_boxes)
        .map(|(e, b)| {
            let diag = (b.w * b.w + b.h * b.h).sqrt();
            if diag > 0.0 {
                e / diag
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let np: f64 = (0..=50)
        .map(|k| {
            let t = k as f64 / 100.0;
            norm.iter().filter(|&&e| e <= t).count() as f64 / n
        })
        .sum::<f64>()
        / 51.0;
    Ok((p, 100.0 * np))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub name: String,
    pub frames: usize,
    pub lost_frames: usize,
    pub auc: f64,
    pub precision_20px: f64,
    pub norm_precision: f64,
    pub ao: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackEvalReport {
    pub auc: f64,
    pub precision_20px: f64,
    pub norm_precision: f64,
    pub ao: f64,
    pub sr_050: f64,
    pub sr_075: f64,
    pub per_sequence: Vec<SequenceEval>,
}

/// Metrics over aligned predicted and ground-truth boxes.
pub fn track_metrics(pred: &[BoxXywh], gt: &[BoxXywh]) -> Result<TrackEvalReport> {
    if pred.len() != gt.len() {
        return Err(invalid!("{} predictions for {} ground-truth boxes", pred.len(), gt.len()));
    }
    check_nonempty(pred.len())?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let (ao, sr_050, sr_075) = ao_sr(&ious)?;
    let pc: Vec<(f64, f64)> = pred.iter().map(BoxXywh::center).collect();
    let gc: Vec<(f64, f64)> = gt.iter().map(BoxXywh::center).collect();
    let (p, np) = precision_metrics(&pc, &gc, gt)?;
    Ok(TrackEvalReport {
        auc: success_auc(&ious)?,
        precision_20px: p,
        norm_precision: np,
        ao,
        sr_050,
        sr_075,
        per_sequence: Vec::new(),
    })
}

/// Tracks every sequence from its first box and scores frames after the
/// first.
pub fn evaluate_tracking(model: &Model, ds: &Dataset, cfg: &SampleConfig) -> Result<TrackEvalReport> {
    let mut all_pred = Vec::new();
    let mut all_gt = Vec::new();
    let mut per_sequence = Vec::new();
    for seq in &ds.sequences {
        if seq.len() < 2 {
            continue;
        }
        let preds = infer_sequence(model, seq, cfg)?;
        let p: Vec<BoxXywh> = preds[1..].iter().map(|f| f.bbox).collect();
        let g = &seq.boxes[1..];
        let r = track_metrics(&p, g)?;
        per_sequence.push(SequenceEval {
            name: seq.name.clone(),
            frames: p.len(),
            lost_frames: preds.iter().filter(|f| f.lost).count(),
            auc: r.auc,
            precision_20px: r.precision_20px,
            norm_precision: r.norm_precision,
            ao: r.ao,
        });
        all_pred.extend(p);
        all_gt.extend_from_slice(g);
    }
    let mut rep = track_metrics(&all_pred, &all_gt)?;
    rep.per_sequence = per_sequence;
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct DepthEvalReport {
    pub rmse: f64,
    pub abs_rel: f64,
    /// Median-scaling factor applied to the prediction.
    pub scale: f64,
    pub pixels: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median-scaled RMSE and absolute relative error over unpadded pixels with
/// positive ground truth.
pub fn depth_eval(pred: &Tensor, gt: &Tensor, pad_mask: &Tensor) -> Result<DepthEvalReport> {
    if pred.shape() != gt.shape() || gt.shape() != pad_mask.shape() {
        return Err(invalid!(
            "shapes differ: {:?} {:?} {:?}",
            pred.shape(),
            gt.shape(),
            pad_mask.shape()
        ));
    }
    let idx: Vec<usize> = (0..gt.len())
        .filter(|&i| pad_mask.data()[i] < 0.5 && gt.data()[i] > 0.0)
        .collect();
    if idx.is_empty() {
        return Err(invalid!("no valid depth pixels"));
    }
    let mut p: Vec<f64> = idx.iter().map(|&i| pred.data()[i]).collect();
    let mut g: Vec<f64> = idx.iter().map(|&i| gt.data()[i]).collect();
    if p.iter().any(|v| !(*v > 0.0)) {
        return Err(invalid!("predicted depth must be positive"));
    }
    let scale = median(&mut g.clone()) / median(&mut p.clone());
    for v in &mut p {
        *v *= scale;
    }
    let n = idx.len() as f64;
    let mut se = 0.0;
    let mut rel = 0.0;
    for (a, b) in p.iter().zip(g.iter_mut()) {
        se += (a - *b).powi(2);
        rel += (a - *b).abs() / *b;
    }
    Ok(DepthEvalReport {
        rmse: (se / n).sqrt(),
        abs_rel: rel / n,
        scale,
        pixels: idx.len(),
    })
}

/// Average of per-image reports.
pub fn mean_depth_eval(reports: &[DepthEvalReport]) -> Result<DepthEvalReport> {
    check_nonempty(reports.len())?;
    let n = reports.len() as f64;
    Ok(DepthEvalReport {
        rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / n,
        abs_rel: reports.iter().map(|r| r.abs_rel).sum::<f64>() / n,
        scale: reports.iter().map(|r| r.scale).sum::<f64>() / n,
        pixels: reports.iter().map(|r| r.pixels).sum(),
    })
}

/// Unaugmented samples at every `stride`-th valid frame, with depth when the
/// sequence has it.
pub fn heldout_samples(ds: &Dataset, cfg: &SampleConfig, stride: usize) -> Result<Vec<Sample>> {
    let cfg = cfg.clone().without_augmentation();
    let mut out = Vec::new();
    for seq in &ds.sequences {
        for &t in seq.meta.valid_frames.iter().step_by(stride.max(1)) {
            out.push(build_sample(seq, t, &cfg, seq.has_depth(), t as u64)?);
        }
    }
    Ok(out)
}

/// Finest-scale depth of the model on each sample's search crop.
pub fn predict_depth(model: &Model, sample: &Sample) -> Result<Vec<Tensor>> {
    if !model.has_depth_head() {
        return Err(invalid!("model has no depth head"));
    }
    let (_, disp) = model.track_and_depth(&sample.template, &sample.search_t)?;
    depth_at(&disp, sample.search_side())
}

/// Median-scaled depth error averaged over samples with ground truth.
pub fn evaluate_depth(model: &Model, samples: &[Sample]) -> Result<DepthEvalReport> {
    let mut reports = Vec::new();
    for s in samples {
        let Some(gt) = &s.gt_depth else { continue };
        let depth = predict_depth(model, s)?;
        let finest = depth.last().expect("four scales");
        reports.push(depth_eval(finest, gt, &s.pad_mask)?);
    }
    mean_depth_eval(&reports)
}

/// Masked L1 depth error averaged over the four upsampled scales and the
/// samples with ground truth.
pub fn masked_depth_l1(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let Some(gt) = &s.gt_depth else { continue };
        for d in predict_depth(model, s)? {
            total += supervised_depth_loss(&d, gt, &s.pad_mask)?;
            n += 1;
        }
    }
    check_nonempty(n)?;
    Ok(total / n as f64)
}
