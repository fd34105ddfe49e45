//! Objective terms for tracking and the auxiliary depth task.
//!
//! Each loss has a graph form (`*_var`) used for training and gradient
//! checks, and a plain form that validates its inputs and evaluates the
//! same graph on constants.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bbox::BoxXywh;
use crate::error::{invalid, shape_err, Error, Result};
use crate::geometry::{grid_sample_var, warp_coords_var, Intrinsics, Pose6DoF};
use crate::model::disparity_to_depth_var;
use crate::tensor::{Role, Tensor};
use crate::trainer::Strategy;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Blend between tracking and the auxiliary depth loss.
    pub alpha: f64,
    /// SSIM share of the photometric error.
    pub beta: f64,
    pub lambda_smooth: f64,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    /// Divide masked sums by the number of contributing pixels rather than
    /// by the pixel count.
    pub normalize_by_mask: bool,
    /// Upper bound of a uniform offset added to the unwarped error before
    /// the stationary comparison. Zero keeps exact ties masked out.
    pub tie_break: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.4,
            beta: 0.85,
            lambda_smooth: 1e-3,
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            normalize_by_mask: true,
            tie_break: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid!("beta {} outside [0, 1]", self.beta));
        }
        for (name, v) in [
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_giou", self.lambda_giou),
            ("lambda_l1", self.lambda_l1),
            ("tie_break", self.tie_break),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid!("{name} must be nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Per-step loss breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub total: f64,
    pub tracking: f64,
    pub depth_aux: f64,
    pub per_scale: Vec<f64>,
    /// Fraction of unpadded pixels kept by the stationary mask.
    pub mask_coverage: f64,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

// --------------------------------------------------------------------
// photometric terms

/// Per-pixel, per-channel SSIM over 3x3 windows with reflection padding.
pub fn ssim_var(g: &mut Graph, a: Var, b: Var) -> Var {
    let mu_a = g.box3_reflect(a);
    let mu_b = g.box3_reflect(b);
    let aa = g.square(a);
    let bb = g.square(b);
    let ab = g.mul(a, b);
    let e_aa = g.box3_reflect(aa);
    let e_bb = g.box3_reflect(bb);
    let e_ab = g.box3_reflect(ab);
    let mu_a2 = g.square(mu_a);
    let mu_b2 = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_a2);
    let var_b = g.sub(e_bb, mu_b2);
    let cov = g.sub(e_ab, mu_ab);

    let n1 = g.scale(mu_ab, 2.0);
    let n1 = g.add_scalar(n1, SSIM_C1);
    let n2 = g.scale(cov, 2.0);
    let n2 = g.add_scalar(n2, SSIM_C2);
    let num = g.mul(n1, n2);

    let d1 = g.add(mu_a2, mu_b2);
    let d1 = g.add_scalar(d1, SSIM_C1);
    let d2 = g.add(var_a, var_b);
    let d2 = g.add_scalar(d2, SSIM_C2);
    let den = g.mul(d1, d2);
    g.div(num, den)
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "ssim")?;
    a.chw()?;
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let s = ssim_var(&mut g, va, vb);
    Ok(g.value(s).clone())
}

/// `beta (1 - SSIM) / 2 + (1 - beta) |a - b|`, both averaged over channels;
/// `[C, H, W] -> [1, H, W]`.
pub fn photometric_error_var(g: &mut Graph, reference: Var, candidate: Var, beta: f64) -> Var {
    let s = ssim_var(g, reference, candidate);
    let s = g.channel_mean(s);
    let one_minus = g.scale(s, -0.5 * beta);
    let dssim = g.add_scalar(one_minus, 0.5 * beta);
    let diff = g.sub(reference, candidate);
    let l1 = g.abs(diff);
    let l1 = g.channel_mean(l1);
    let l1 = g.scale(l1, 1.0 - beta);
    g.add(dssim, l1)
}

pub fn photometric_error(reference: &Tensor, candidate: &Tensor, beta: f64) -> Result<Tensor> {
    check_same(reference, candidate, "photometric_error")?;
    reference.chw()?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(reference.clone()), g.constant(candidate.clone()));
    let pe = photometric_error_var(&mut g, a, b, beta);
    Ok(g.value(pe).clone())
}

/// Per-pixel minimum over the two source frames.
pub fn min_reprojection(pe_prev: &Tensor, pe_next: &Tensor) -> Result<Tensor> {
    pe_prev.zip_map(pe_next, f64::min)
}

/// Pixels whose best warped error is strictly below the best unwarped
/// error; ties are excluded.
pub fn stationary_mask(
    target: &Tensor,
    warped: &[Tensor],
    sources: &[Tensor],
    beta: f64,
) -> Result<Tensor> {
    if warped.is_empty() || warped.len() != sources.len() {
        return Err(invalid!(
            "need matching warped/source lists, got {} and {}",
            warped.len(),
            sources.len()
        ));
    }
    for t in warped.iter().chain(sources) {
        check_same(target, t, "stationary_mask")?;
    }
    let min_err = |imgs: &[Tensor]| -> Result<Tensor> {
        let mut best: Option<Tensor> = None;
        for im in imgs {
            let pe = photometric_error(target, im, beta)?;
            best = Some(match best {
                None => pe,
                Some(b) => min_reprojection(&b, &pe)?,
            });
        }
        Ok(best.unwrap())
    };
    let w = min_err(warped)?;
    let s = min_err(sources)?;
    Ok(w.zip_map(&s, |a, b| f64::from(u8::from(a < b)))?.with_role(Role::Mask))
}

/// Edge-aware smoothness of mean-normalized disparity. `valid` is the
/// unpadded-pixel indicator `[1, H, W]`; differences touching a padded
/// pixel are dropped, and normalization uses unpadded pixels only.
pub fn smoothness_var(g: &mut Graph, disp: Var, image: Var, valid: &Rc<Tensor>) -> Var {
    let (_, h, w) = g.value(disp).chw().expect("smoothness disparity");
    let mean = g.masked_mean(disp, valid.clone());
    let dn = g.div_scalar(disp, mean);

    let mut terms = Vec::with_capacity(2);
    for axis in 0..2 {
        let (dd, di) = if axis == 0 {
            (g.diff_x(dn), g.diff_x(image))
        } else {
            (g.diff_y(dn), g.diff_y(image))
        };
        let dd = g.abs(dd);
        let di = g.abs(di);
        let di = g.channel_mean(di);
        let di = g.scale(di, -1.0);
        let weight = g.exp(di);
        let weighted = g.mul(dd, weight);
        let pair = pair_mask(valid, h, w, axis);
        terms.push(g.masked_mean(weighted, Rc::new(pair)));
    }
    g.add(terms[0], terms[1])
}

/// Product of `valid` at both ends of each forward difference.
fn pair_mask(valid: &Tensor, h: usize, w: usize, axis: usize) -> Tensor {
    let v = valid.data();
    if axis == 0 {
        let mut out = Vec::with_capacity(h * (w - 1));
        for y in 0..h {
            for x in 0..w - 1 {
                out.push(v[y * w + x] * v[y * w + x + 1]);
            }
        }
        Tensor::new(vec![1, h, w - 1], out).unwrap()
    } else {
        let mut out = Vec::with_capacity((h - 1) * w);
        for y in 0..h - 1 {
            for x in 0..w {
                out.push(v[y * w + x] * v[(y + 1) * w + x]);
            }
        }
        Tensor::new(vec![1, h - 1, w], out).unwrap()
    }
}

pub fn smoothness_loss(disp: &Tensor, image: &Tensor) -> Result<f64> {
    let (c, h, w) = disp.chw()?;
    let (_, ih, iw) = image.chw()?;
    if c != 1 || (h, w) != (ih, iw) {
        return Err(shape_err!(
            "disparity {:?} vs image {:?}",
            disp.shape(),
            image.shape()
        ));
    }
    if let Some(bad) = disp.data().iter().find(|d| !(**d > 0.0)) {
        return Err(invalid!("disparity must be positive, found {bad}"));
    }
    let mut g = Graph::new();
    let d = g.constant(disp.clone());
    let i = g.constant(image.clone());
    let valid = Rc::new(Tensor::full(&[1, h, w], 1.0));
    let l = smoothness_var(&mut g, d, i, &valid);
    Ok(g.value(l).item())
}

// --------------------------------------------------------------------
// supervised depth

/// Mean absolute depth error over unpadded pixels (`pad_mask == 0`).
pub fn supervised_depth_loss_var(g: &mut Graph, pred: Var, gt: &Rc<Tensor>, pad_mask: &Tensor) -> Var {
    let gt_v = g.constant_rc(gt.clone());
    let diff = g.sub(pred, gt_v);
    let a = g.abs(diff);
    let valid = pad_mask.map(|m| 1.0 - m);
    g.masked_mean(a, Rc::new(valid))
}

pub fn supervised_depth_loss(pred: &Tensor, gt: &Tensor, pad_mask: &Tensor) -> Result<f64> {
    check_same(pred, gt, "supervised_depth_loss")?;
    check_same(pred, pad_mask, "supervised_depth_loss mask")?;
    if pad_mask.data().iter().all(|&m| m >= 1.0) {
        return Err(Error::UndefinedLoss(
            "every pixel is padding; no valid region".into(),
        ));
    }
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = supervised_depth_loss_var(&mut g, p, &Rc::new(gt.clone()), pad_mask);
    Ok(g.value(l).item())
}

// --------------------------------------------------------------------
// tracking

/// `1 - GIoU` of a predicted box `[x, y, w, h]` against a fixed target.
pub fn giou_loss_var(g: &mut Graph, pred: Var, target: BoxXywh) -> Var {
    let px = g.slice0(pred, 0, 1);
    let py = g.slice0(pred, 1, 1);
    let pw = g.slice0(pred, 2, 1);
    let ph = g.slice0(pred, 3, 1);
    let px2 = g.add(px, pw);
    let py2 = g.add(py, ph);
    let c = |g: &mut Graph, v: f64| g.constant(Tensor::scalar(v));
    let (tx, ty, tx2, ty2) = (
        c(g, target.x),
        c(g, target.y),
        c(g, target.x2()),
        c(g, target.y2()),
    );
    let zero = c(g, 0.0);

    let ix1 = g.max2(px, tx);
    let iy1 = g.max2(py, ty);
    let ix2 = g.min2(px2, tx2);
    let iy2 = g.min2(py2, ty2);
    let iw = g.sub(ix2, ix1);
    let iw = g.max2(iw, zero);
    let ih = g.sub(iy2, iy1);
    let ih = g.max2(ih, zero);
    let inter = g.mul(iw, ih);

    let parea = g.mul(pw, ph);
    let union = g.add_scalar(parea, target.area());
    let union = g.sub(union, inter);
    let iou = g.div(inter, union);

    let cx1 = g.min2(px, tx);
    let cy1 = g.min2(py, ty);
    let cx2 = g.max2(px2, tx2);
    let cy2 = g.max2(py2, ty2);
    let cw = g.sub(cx2, cx1);
    let ch = g.sub(cy2, cy1);
    let carea = g.mul(cw, ch);
    let gap = g.sub(carea, union);
    let frac = g.div(gap, carea);
    // 1 - (iou - frac)
    let giou = g.sub(iou, frac);
    let neg = g.scale(giou, -1.0);
    g.add_scalar(neg, 1.0)
}

pub fn giou_loss(pred: BoxXywh, target: BoxXywh) -> Result<f64> {
    for b in [pred, target] {
        if !(b.w >= 0.0 && b.h >= 0.0 && b.is_finite()) {
            return Err(invalid!("box needs finite nonnegative size: {:?}", b));
        }
    }
    let union = pred.area() + target.area() - pred.intersection_area(&target);
    if union <= 0.0 {
        return Err(invalid!("GIoU undefined for two empty boxes"));
    }
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![4], pred.to_array().to_vec())?);
    let l = giou_loss_var(&mut g, p, target);
    Ok(g.value(l).item())
}

/// `lambda_giou * (1 - GIoU) + lambda_l1 * mean |pred - target|` over the
/// four box coordinates.
pub fn tracking_loss_var(g: &mut Graph, pred: Var, target: BoxXywh, w: &LossWeights) -> Var {
    let gl = giou_loss_var(g, pred, target);
    let t = g.constant(Tensor::new(vec![4], target.to_array().to_vec()).unwrap());
    let d = g.sub(pred, t);
    let a = g.abs(d);
    let l1 = g.mean(a);
    let gl = g.scale(gl, w.lambda_giou);
    let l1 = g.scale(l1, w.lambda_l1);
    g.add(gl, l1)
}

pub fn tracking_loss(pred: BoxXywh, target: BoxXywh, w: &LossWeights) -> Result<f64> {
    giou_loss(pred, target)?;
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![4], pred.to_array().to_vec())?);
    let l = tracking_loss_var(&mut g, p, target, w);
    Ok(g.value(l).item())
}

// --------------------------------------------------------------------
// self-supervised depth

/// Differentiable inputs of the self-supervised depth loss.
pub struct SelfSupInputs<'a> {
    /// Disparity maps `[1, s, s]`, one per decoder scale.
    pub disparities: &'a [Var],
    pub target: Var,
    pub prev: Var,
    pub next: Var,
    /// Target-to-source poses `[6]` for `prev` and `next`.
    pub poses: [Var; 2],
    pub intrinsics: &'a Intrinsics,
    pub pad_mask: &'a Tensor,
    /// Seeds the tie-break offsets.
    pub tie_seed: u64,
}

/// Statistics gathered while building the loss.
#[derive(Clone, Debug, Default)]
pub struct SelfSupStats {
    pub per_scale: Vec<f64>,
    pub mask_coverage: f64,
}

pub const NUM_SCALES: usize = 4;

/// Multi-scale photometric reconstruction with minimum reprojection,
/// stationary and padding masks, plus edge-aware smoothness.
pub fn selfsup_depth_loss_var(
    g: &mut Graph,
    inp: &SelfSupInputs<'_>,
    w: &LossWeights,
) -> Result<(Var, SelfSupStats)> {
    if inp.disparities.len() != NUM_SCALES {
        return Err(invalid!(
            "expected {NUM_SCALES} disparity scales, got {}",
            inp.disparities.len()
        ));
    }
    let (c, h, wd) = g.value(inp.target).chw()?;
    for v in [inp.prev, inp.next] {
        if g.value(v).shape() != [c, h, wd] {
            return Err(shape_err!("source frame {:?}", g.value(v).shape()));
        }
    }
    if inp.pad_mask.shape() != [1, h, wd] {
        return Err(shape_err!("padding mask {:?}", inp.pad_mask.shape()));
    }
    if (inp.intrinsics.height, inp.intrinsics.width) != (h, wd) {
        return Err(shape_err!(
            "intrinsics are {}x{}, frames {}x{}",
            inp.intrinsics.height,
            inp.intrinsics.width,
            h,
            wd
        ));
    }
    let valid = Rc::new(inp.pad_mask.map(|m| 1.0 - m).with_role(Role::Mask));
    let n_valid = valid.sum();
    let valid_v = g.constant_rc(valid.clone());
    let target = g.mul_tiled(inp.target, valid_v);
    let sources = [
        g.mul_tiled(inp.prev, valid_v),
        g.mul_tiled(inp.next, valid_v),
    ];

    // unwarped error, used only through its value
    let ident: Vec<Tensor> = sources
        .iter()
        .map(|&s| {
            let (a, b) = (g.detach(target), g.detach(s));
            let pe = photometric_error_var(g, a, b, w.beta);
            g.value(pe).clone()
        })
        .collect();
    let mut ident_min = min_reprojection(&ident[0], &ident[1])?;
    if w.tie_break > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(inp.tie_seed);
        let offsets = Tensor::from_fn(ident_min.shape(), |_| w.tie_break * rng.random::<f64>());
        ident_min = ident_min.zip_map(&offsets, |e, o| e + o)?;
    }
    let ident_min = Rc::new(ident_min);

    let mut per_scale_vars = Vec::with_capacity(NUM_SCALES);
    let mut stats = SelfSupStats::default();
    for &disp in inp.disparities {
        let (dc, _, _) = g.value(disp).chw()?;
        if dc != 1 {
            return Err(shape_err!("disparity needs one channel"));
        }
        let disp_up = g.resize_bilinear(disp, h, wd);
        let depth = disparity_to_depth_var(g, disp_up);
        let mut errs = Vec::with_capacity(2);
        for (src, &pose) in sources.iter().zip(&inp.poses) {
            let (coords, _) = warp_coords_var(g, depth, pose, inp.intrinsics);
            let warped = grid_sample_var(g, *src, coords);
            errs.push(photometric_error_var(g, target, warped, w.beta));
        }
        let best = g.min2(errs[0], errs[1]);
        let best_val = g.value_rc(best);
        let ident_min = ident_min.clone();
        let stationary = g.decide(|| {
            best_val
                .data()
                .iter()
                .zip(ident_min.data())
                .map(|(a, b)| i32::from(a < b))
                .collect()
        });
        let weight: Vec<f64> = stationary
            .iter()
            .zip(valid.data())
            .map(|(&m, &v)| m as f64 * v)
            .collect();
        let kept: f64 = weight.iter().sum();
        stats.mask_coverage += if n_valid > 0.0 { kept / n_valid } else { 0.0 };
        let weight = Tensor::new(vec![1, h, wd], weight)?;
        let photometric = if w.normalize_by_mask {
            g.masked_mean(best, Rc::new(weight))
        } else {
            let m = g.constant(weight);
            let wb = g.mul(best, m);
            g.mean(wb)
        };
        let smooth = smoothness_var(g, disp_up, target, &valid);
        let smooth = g.scale(smooth, w.lambda_smooth);
        let term = g.add(photometric, smooth);
        stats.per_scale.push(g.value(term).item());
        per_scale_vars.push(term);
    }
    stats.mask_coverage /= NUM_SCALES as f64;
    let stacked = g.concat0(&per_scale_vars);
    let loss = g.mean(stacked);
    Ok((loss, stats))
}

/// Plain evaluation of [`selfsup_depth_loss_var`]. The report total is the
/// depth term alone.
#[allow(clippy::too_many_arguments)]
pub fn selfsup_depth_loss(
    disparities: &[Tensor],
    target: &Tensor,
    prev: &Tensor,
    next: &Tensor,
    poses: [&Pose6DoF; 2],
    k: &Intrinsics,
    pad_mask: &Tensor,
    w: &LossWeights,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let disp: Vec<Var> = disparities.iter().map(|d| g.constant(d.clone())).collect();
    for d in disparities {
        if let Some(bad) = d.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(invalid!("disparity must lie in (0, 1), found {bad}"));
        }
    }
    let t = g.constant(target.clone());
    let p = g.constant(prev.clone());
    let n = g.constant(next.clone());
    let pv = [
        g.constant(Tensor::new(vec![6], poses[0].to_vec6().to_vec())?),
        g.constant(Tensor::new(vec![6], poses[1].to_vec6().to_vec())?),
    ];
    let inp = SelfSupInputs {
        disparities: &disp,
        target: t,
        prev: p,
        next: n,
        poses: pv,
        intrinsics: k,
        pad_mask,
        tie_seed: 0,
    };
    let (l, stats) = selfsup_depth_loss_var(&mut g, &inp, w)?;
    let depth_aux = g.value(l).item();
    Ok(LossReport {
        total: depth_aux,
        tracking: 0.0,
        depth_aux,
        per_scale: stats.per_scale,
        mask_coverage: stats.mask_coverage,
    })
}

// --------------------------------------------------------------------
// totals

/// `(1 - alpha) * tracking + alpha * depth_aux`; tracking-only strategies
/// ignore the auxiliary term.
pub fn total_loss(strategy: Strategy, tracking: f64, depth_aux: f64, alpha: f64) -> f64 {
    let a = if strategy.uses_depth_head() { alpha } else { 0.0 };
    (1.0 - a) * tracking + a * depth_aux
}

pub fn total_loss_var(g: &mut Graph, strategy: Strategy, tracking: Var, depth_aux: Option<Var>, alpha: f64) -> Var {
    match depth_aux {
        Some(d) if strategy.uses_depth_head() => {
            let t = g.scale(tracking, 1.0 - alpha);
            let d = g.scale(d, alpha);
            g.add(t, d)
        }
        _ => tracking,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_img(v: f64, h: usize, w: usize) -> Tensor {
        Tensor::full(&[3, h, w], v)
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = Tensor::from_fn(&[3, 6, 7], |i| ((i * 31) % 17) as f64 / 17.0);
        let s = ssim(&a, &a).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_of_constant_images_is_closed_form() {
        let (v1, v2) = (0.2, 0.7);
        let s = ssim(&const_img(v1, 5, 5), &const_img(v2, 5, 5)).unwrap();
        let expected = (2.0 * v1 * v2 + SSIM_C1) / (v1 * v1 + v2 * v2 + SSIM_C1);
        assert!(s.data().iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = Tensor::from_fn(&[3, 6, 6], |i| ((i * 13) % 7) as f64 / 7.0);
        let b = Tensor::from_fn(&[3, 6, 6], |i| ((i * 5) % 11) as f64 / 11.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_rejects_shape_mismatch() {
        assert!(ssim(&const_img(0.1, 4, 4), &const_img(0.1, 4, 5)).is_err());
    }

    #[test]
    fn photometric_error_cases() {
        let a = Tensor::from_fn(&[3, 5, 5], |i| ((i * 7) % 9) as f64 / 9.0);
        let pe = photometric_error(&a, &a, 0.85).unwrap();
        assert!(pe.data().iter().all(|v| v.abs() < 1e-12));

        let b = a.map(|v| (v + 0.3).min(1.0));
        let pe0 = photometric_error(&a, &b, 0.0).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let l1: f64 = (0..3).map(|c| (a.at3(c, y, x) - b.at3(c, y, x)).abs()).sum::<f64>() / 3.0;
                assert!((pe0.at3(0, y, x) - l1).abs() < 1e-12);
            }
        }

        // constant 0.2 vs 0.4 evaluated directly from the formula
        let (v1, v2, beta) = (0.2f64, 0.4f64, 0.85f64);
        let s = (2.0 * v1 * v2 + SSIM_C1) * SSIM_C2 / ((v1 * v1 + v2 * v2 + SSIM_C1) * SSIM_C2);
        let expected = beta * (1.0 - s) / 2.0 + (1.0 - beta) * (v1 - v2).abs();
        let pe = photometric_error(&const_img(v1, 4, 4), &const_img(v2, 4, 4), beta).unwrap();
        assert!(pe.data().iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn min_reprojection_cases() {
        let a = Tensor::from_fn(&[1, 3, 3], |i| i as f64);
        let b = a.map(|v| v + 1.0);
        assert_eq!(min_reprojection(&a, &b).unwrap(), a);
        assert_eq!(min_reprojection(&a, &a).unwrap(), a);
    }

    #[test]
    fn stationary_mask_degenerate_and_full() {
        let it = Tensor::from_fn(&[3, 6, 6], |i| ((i * 7) % 13) as f64 / 13.0);
        // static pair: warped = sources = target
        let m = stationary_mask(&it, &[it.clone(), it.clone()], &[it.clone(), it.clone()], 0.85).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        // perfect warp, different sources
        let other = it.map(|v| 1.0 - v);
        let m = stationary_mask(&it, &[it.clone(), it.clone()], &[other.clone(), other], 0.85).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn smoothness_cases() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i % 8) as f64 / 8.0);
        let flat = Tensor::full(&[1, 8, 8], 0.3);
        assert_eq!(smoothness_loss(&flat, &img).unwrap(), 0.0);

        let disp = Tensor::from_fn(&[1, 8, 8], |i| if i % 8 < 4 { 0.2 } else { 0.6 });
        let scaled = disp.map(|v| v * 3.7);
        let (a, b) = (smoothness_loss(&disp, &img).unwrap(), smoothness_loss(&scaled, &img).unwrap());
        assert!((a - b).abs() < 1e-12);

        assert!(smoothness_loss(&disp.map(|v| v - 0.5), &img).is_err());
    }

    #[test]
    fn supervised_depth_cases() {
        let d = Tensor::from_fn(&[1, 4, 4], |i| 1.0 + i as f64);
        let none = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(supervised_depth_loss(&d, &d, &none).unwrap(), 0.0);

        // errors only inside padding
        let mut pad = Tensor::zeros(&[1, 4, 4]);
        let mut pred = d.clone();
        for x in 0..4 {
            pad.set3(0, 0, x, 1.0);
            pred.set3(0, 0, x, 99.0);
        }
        assert_eq!(supervised_depth_loss(&pred, &d, &pad).unwrap(), 0.0);

        // half the valid pixels off by one
        let pred = Tensor::from_fn(&[1, 4, 4], |i| d.data()[i] + f64::from(u8::from(i % 2 == 0)));
        assert_eq!(supervised_depth_loss(&pred, &d, &none).unwrap(), 0.5);

        let all = Tensor::full(&[1, 4, 4], 1.0);
        assert!(matches!(
            supervised_depth_loss(&d, &d, &all),
            Err(Error::UndefinedLoss(_))
        ));
    }

    #[test]
    fn giou_cases() {
        let a = BoxXywh::new(0.1, 0.2, 0.3, 0.4);
        assert!(giou_loss(a, a).unwrap().abs() < 1e-12);
        let l = giou_loss(BoxXywh::new(0.0, 0.0, 1.0, 1.0), BoxXywh::new(2.0, 0.0, 1.0, 1.0)).unwrap();
        assert!((l - 4.0 / 3.0).abs() < 1e-12);
        let b = BoxXywh::new(0.2, 0.1, 0.5, 0.2);
        let l1 = giou_loss(a, b).unwrap();
        let l2 = giou_loss(a.scaled(7.0), b.scaled(7.0)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        let empty = BoxXywh::new(0.0, 0.0, 0.0, 0.0);
        assert!(giou_loss(empty, empty).is_err());
    }

    #[test]
    fn tracking_loss_cases() {
        let w = LossWeights::default();
        let b = BoxXywh::new(0.3, 0.3, 0.2, 0.2);
        assert!(tracking_loss(b, b, &w).unwrap().abs() < 1e-12);
        // offsetting every coordinate by 0.1: L1 part is 5 * 0.1
        let shifted = BoxXywh::new(0.4, 0.4, 0.3, 0.3);
        let giou_part = w.lambda_giou * giou_loss(shifted, b).unwrap();
        let total = tracking_loss(shifted, b, &w).unwrap();
        assert!((total - giou_part - 5.0 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn total_loss_blend() {
        assert_eq!(total_loss(Strategy::SelfSupAux, 1.0, 2.0, 0.0), 1.0);
        assert!((total_loss(Strategy::SelfSupAux, 1.0, 2.0, 0.4) - 1.4).abs() < 1e-12);
        assert_eq!(total_loss(Strategy::SupervisedAux, 1.0, 2.0, 1.0), 2.0);
        assert_eq!(total_loss(Strategy::TrackOnlyLarge, 1.0, 2.0, 0.4), 1.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
