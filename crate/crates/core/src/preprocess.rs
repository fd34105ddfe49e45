//! Frame-pair sampling, square crop-and-pad with padding masks, and
//! photometric/flip augmentation.
//!
//! Crop coordinates are continuous with pixel `k` covering `[k, k + 1)`.
//! A crop window has left edge `x0 = center.x - side / 2`, and crop
//! position `u` maps to source position `x0 + u / scale`. Pixel values are
//! read at pixel centers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoxXywh;
use crate::dataset::{DepthFrame, Frame, Sequence};
use crate::error::{invalid, Result};
use crate::tensor::{Role, Tensor};

/// Target frame plus one earlier and one later frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameTriplet {
    pub t: usize,
    pub t_prev: usize,
    pub t_next: usize,
}

/// Draws `t_prev` from `{i in P : t - R < i < t}` and `t_next` from
/// `{i in P : t < i < t + R}`, each falling back to `t` when empty.
/// `valid` must be sorted.
pub fn sample_frame_pair(valid: &[usize], t: usize, range: usize, rng: &mut impl Rng) -> Result<FrameTriplet> {
    if range == 0 {
        return Err(invalid!("selection range must be at least 1"));
    }
    if valid.binary_search(&t).is_err() {
        return Err(invalid!("frame {t} is not in the valid set"));
    }
    let mut pick = |lo: isize, hi: isize| -> usize {
        let cand: Vec<usize> = valid
            .iter()
            .copied()
            .filter(|&i| (i as isize) > lo && (i as isize) < hi)
            .collect();
        if cand.is_empty() {
            t
        } else {
            cand[rng.random_range(0..cand.len())]
        }
    };
    let (ti, r) = (t as isize, range as isize);
    let t_prev = pick(ti - r, ti);
    let t_next = pick(ti, ti + r);
    Ok(FrameTriplet { t, t_prev, t_next })
}

/// Shifts the box center by up to `center_jitter * sqrt(w h)` per axis and
/// scales its size by a log-uniform factor in
/// `[1 / (1 + scale_jitter), 1 + scale_jitter]`, then clips to the frame.
pub fn jitter_box(
    b: BoxXywh,
    center_jitter: f64,
    scale_jitter: f64,
    frame: (usize, usize),
    rng: &mut impl Rng,
) -> Result<BoxXywh> {
    b.require_nondegenerate()?;
    if !(center_jitter >= 0.0 && scale_jitter >= 0.0) {
        return Err(invalid!("jitter magnitudes must be nonnegative"));
    }
    let (fw, fh) = (frame.0 as f64, frame.1 as f64);
    if center_jitter == 0.0 && scale_jitter == 0.0 {
        return Ok(b);
    }
    let side = (b.w * b.h).sqrt();
    let (cx, cy) = b.center();
    let mut draw = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let dx = draw(center_jitter * side);
    let dy = draw(center_jitter * side);
    let ls = (1.0 + scale_jitter).ln();
    let s = draw(ls).exp();
    let (w, h) = (b.w * s, b.h * s);
    let (cx, cy) = ((cx + dx).clamp(0.0, fw), (cy + dy).clamp(0.0, fh));
    let out = BoxXywh::new(cx - w / 2.0, cy - h / 2.0, w, h).clip(fw, fh);
    if out.is_degenerate() {
        // the clipped box collapsed against a frame edge
        let w = w.min(fw);
        let h = h.min(fh);
        let x = (cx - w / 2.0).clamp(0.0, fw - w);
        let y = (cy - h / 2.0).clamp(0.0, fh - h);
        return Ok(BoxXywh::new(x, y, w, h));
    }
    Ok(out)
}

/// Square crop window and its resampling scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub center: (f64, f64),
    pub side: f64,
    /// Output pixels per source pixel.
    pub scale: f64,
    pub out_side: usize,
}

impl CropSpec {
    pub fn around(b: &BoxXywh, crop_factor: f64, out_side: usize) -> Result<CropSpec> {
        b.require_nondegenerate()?;
        if out_side == 0 {
            return Err(invalid!("output side must be positive"));
        }
        let side = crop_factor * (b.w * b.h).sqrt();
        if !(side >= 2.0) {
            return Err(invalid!("crop window side {side} below 2 px"));
        }
        Ok(CropSpec {
            center: b.center(),
            side,
            scale: out_side as f64 / side,
            out_side,
        })
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.center.0 - self.side / 2.0, self.center.1 - self.side / 2.0)
    }

    pub fn to_source(&self, u: f64, v: f64) -> (f64, f64) {
        let (x0, y0) = self.origin();
        (x0 + u / self.scale, y0 + v / self.scale)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, y0) = self.origin();
        ((x - x0) * self.scale, (y - y0) * self.scale)
    }

    pub fn box_to_crop(&self, b: &BoxXywh) -> BoxXywh {
        let (x, y) = self.to_crop(b.x, b.y);
        BoxXywh::new(x, y, b.w * self.scale, b.h * self.scale)
    }

    pub fn box_to_source(&self, b: &BoxXywh) -> BoxXywh {
        let (x, y) = self.to_source(b.x, b.y);
        BoxXywh::new(x, y, b.w / self.scale, b.h / self.scale)
    }

    /// Source position of the center of crop pixel `(i, j)`.
    pub fn pixel_source(&self, i: usize, j: usize) -> (f64, f64) {
        self.to_source(i as f64 + 0.5, j as f64 + 0.5)
    }

    /// `[1, S, S]`, one where the crop pixel center lies outside a
    /// `width x height` frame.
    pub fn padding_mask(&self, width: usize, height: usize) -> Tensor {
        let n = self.out_side;
        let mut m = Tensor::zeros(&[1, n, n]).with_role(Role::Mask);
        for j in 0..n {
            for i in 0..n {
                let (x, y) = self.pixel_source(i, j);
                let inside = x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64;
                if !inside {
                    m.set3(0, j, i, 1.0);
                }
            }
        }
        m
    }

    /// Resamples a frame; padded pixels are 0.
    pub fn crop_frame(&self, f: &Frame) -> Tensor {
        let n = self.out_side;
        // supersample when shrinking
        let k = (1.0 / self.scale).ceil().clamp(1.0, 4.0) as usize;
        let (w, h) = (f.width, f.height);
        let mut out = Tensor::zeros(&[3, n, n]).with_role(Role::Image);
        for j in 0..n {
            for i in 0..n {
                let (x, y) = self.pixel_source(i, j);
                if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
                    continue;
                }
                let mut acc = [0.0; 3];
                for sy in 0..k {
                    for sx in 0..k {
                        let u = i as f64 + (sx as f64 + 0.5) / k as f64;
                        let v = j as f64 + (sy as f64 + 0.5) / k as f64;
                        let (x, y) = self.to_source(u, v);
                        // pixel-center coordinates for bilinear taps
                        let px = (x - 0.5).clamp(0.0, (w - 1) as f64);
                        let py = (y - 0.5).clamp(0.0, (h - 1) as f64);
                        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
                        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
                        for (c, a) in acc.iter_mut().enumerate() {
                            let top = f.at(c, x0, y0) * (1.0 - fx) + f.at(c, x1, y0) * fx;
                            let bot = f.at(c, x0, y1) * (1.0 - fx) + f.at(c, x1, y1) * fx;
                            *a += top * (1.0 - fy) + bot * fy;
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    out.set3(c, j, i, a / (k * k) as f64);
                }
            }
        }
        out
    }

    /// Nearest-neighbor depth crop; padded pixels are 0.
    pub fn crop_depth(&self, d: &DepthFrame) -> Tensor {
        let n = self.out_side;
        let mut out = Tensor::zeros(&[1, n, n]).with_role(Role::Depth);
        for j in 0..n {
            for i in 0..n {
                let (x, y) = self.pixel_source(i, j);
                if x >= 0.0 && x < d.width as f64 && y >= 0.0 && y < d.height as f64 {
                    out.set3(0, j, i, d.at(x.floor() as usize, y.floor() as usize));
                }
            }
        }
        out
    }
}

/// Crops `frame` around `b` to an `out_side` square. Returns the crop, its
/// padding mask and the window.
pub fn crop_pad(frame: &Frame, b: &BoxXywh, crop_factor: f64, out_side: usize) -> Result<(Tensor, Tensor, CropSpec)> {
    let (cx, cy) = b.center();
    if !(cx >= 0.0 && cx <= frame.width as f64 && cy >= 0.0 && cy <= frame.height as f64) {
        return Err(invalid!("box center ({cx}, {cy}) outside the frame"));
    }
    let spec = CropSpec::around(b, crop_factor, out_side)?;
    Ok((
        spec.crop_frame(frame),
        spec.padding_mask(frame.width, frame.height),
        spec,
    ))
}

/// One training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub template: Tensor,
    pub search_t: Tensor,
    pub search_prev: Tensor,
    pub search_next: Tensor,
    /// One on padded pixels.
    pub pad_mask: Tensor,
    /// Target box in search-crop pixels.
    pub gt_box: BoxXywh,
    pub gt_depth: Option<Tensor>,
    pub crop: CropSpec,
    pub frames: FrameTriplet,
    pub rng_seed: u64,
}

impl Sample {
    pub fn search_side(&self) -> usize {
        self.crop.out_side
    }

    /// Ground-truth box divided by the crop side.
    pub fn normalized_box(&self) -> BoxXywh {
        self.gt_box.scaled(1.0 / self.search_side() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub search_side: usize,
    pub template_side: usize,
    pub search_factor: f64,
    pub template_factor: f64,
    pub center_jitter: f64,
    pub scale_jitter: f64,
    /// Selection range for adjacent frames.
    pub range: usize,
    /// Template frames are drawn within this many frames of `t`.
    pub template_window: usize,
    pub p_grayscale: f64,
    pub p_brightness: f64,
    pub p_flip: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            search_side: 256,
            template_side: 128,
            search_factor: 4.0,
            template_factor: 2.0,
            center_jitter: 0.25,
            scale_jitter: 0.25,
            range: 5,
            template_window: 100,
            p_grayscale: 0.05,
            p_brightness: 0.2,
            p_flip: 0.5,
        }
    }
}

impl SampleConfig {
    pub fn without_augmentation(mut self) -> Self {
        self.center_jitter = 0.0;
        self.scale_jitter = 0.0;
        self.p_grayscale = 0.0;
        self.p_brightness = 0.0;
        self.p_flip = 0.0;
        self
    }
}

/// Builds the sample centered on frame `t` of `seq` from `seed`.
pub fn build_sample(seq: &Sequence, t: usize, cfg: &SampleConfig, with_depth: bool, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let valid = &seq.meta.valid_frames;
    let frames = sample_frame_pair(valid, t, cfg.range, &mut rng)?;

    let lo = t.saturating_sub(cfg.template_window);
    let hi = t + cfg.template_window;
    let near: Vec<usize> = valid.iter().copied().filter(|&i| i >= lo && i <= hi).collect();
    let tpl_idx = near[rng.random_range(0..near.len())];
    let (template, _, _) = crop_pad(
        &seq.frames[tpl_idx],
        &seq.boxes[tpl_idx],
        cfg.template_factor,
        cfg.template_side,
    )?;

    let f = &seq.frames[t];
    let gt = seq.boxes[t];
    let jittered = jitter_box(gt, cfg.center_jitter, cfg.scale_jitter, (f.width, f.height), &mut rng)?;
    let (search_t, pad_mask, crop) = crop_pad(f, &jittered, cfg.search_factor, cfg.search_side)?;
    let search_prev = crop.crop_frame(&seq.frames[frames.t_prev]);
    let search_next = crop.crop_frame(&seq.frames[frames.t_next]);
    let gt_depth = if with_depth {
        let d = seq
            .depth
            .as_ref()
            .ok_or_else(|| invalid!("sequence {} has no depth", seq.name))?;
        Some(crop.crop_depth(&d[t]))
    } else {
        None
    };
    let sample = Sample {
        template,
        search_t,
        search_prev,
        search_next,
        pad_mask,
        gt_box: crop.box_to_crop(&gt),
        gt_depth,
        crop,
        frames,
        rng_seed: seed,
    };
    let draw = AugmentDraw::sample(cfg, &mut rng);
    Ok(augment(&sample, &draw))
}

/// One draw of the augmentation choices, shared by every tensor of a
/// sample.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub grayscale: bool,
    pub brightness: Option<f64>,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn sample(cfg: &SampleConfig, rng: &mut impl RngCore) -> AugmentDraw {
        let grayscale = rng.random_bool(cfg.p_grayscale.clamp(0.0, 1.0));
        let bright = rng.random_bool(cfg.p_brightness.clamp(0.0, 1.0));
        let factor: f64 = rng.random_range(0.8..=1.2);
        let flip = rng.random_bool(cfg.p_flip.clamp(0.0, 1.0));
        AugmentDraw {
            grayscale,
            brightness: bright.then_some(factor),
            flip,
        }
    }
}

fn photometric(img: &Tensor, d: &AugmentDraw) -> Tensor {
    let mut out = img.clone();
    if d.grayscale {
        let (_, h, w) = img.chw().unwrap();
        for y in 0..h {
            for x in 0..w {
                let l = 0.299 * img.at3(0, y, x) + 0.587 * img.at3(1, y, x) + 0.114 * img.at3(2, y, x);
                for c in 0..3 {
                    out.set3(c, y, x, l);
                }
            }
        }
    }
    if let Some(f) = d.brightness {
        out = out.map(|v| (v * f).clamp(0.0, 1.0));
    }
    out
}

/// Applies `draw` consistently to every image, the mask, the box and the
/// depth map. Padded pixels stay 0.
pub fn augment(s: &Sample, draw: &AugmentDraw) -> Sample {
    let flip = |t: &Tensor| if draw.flip { t.flip_horizontal().unwrap() } else { t.clone() };
    let img = |t: &Tensor| flip(&photometric(t, draw));
    let side = s.search_side() as f64;
    let gt_box = if draw.flip {
        BoxXywh::new(side - s.gt_box.x - s.gt_box.w, s.gt_box.y, s.gt_box.w, s.gt_box.h)
    } else {
        s.gt_box
    };
    Sample {
        template: img(&s.template),
        search_t: img(&s.search_t),
        search_prev: img(&s.search_prev),
        search_next: img(&s.search_next),
        pad_mask: flip(&s.pad_mask),
        gt_box,
        gt_depth: s.gt_depth.as_ref().map(flip),
        crop: s.crop,
        frames: s.frames,
        rng_seed: s.rng_seed,
    }
}
