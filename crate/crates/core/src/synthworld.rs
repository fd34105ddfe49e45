//! Procedural scenes of textured rectangles seen by a moving pinhole camera,
//! with exact depth, target boxes and camera poses.
//!
//! World frame matches the camera convention at the identity pose: x right,
//! y down, z forward. Every rectangle is axis-aligned in the world and lies in
//! a plane of constant z.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoxXywh;
use crate::dataset::{save_sequence, write_manifest, DepthFrame, Frame, Manifest, ManifestEntry, Sequence, SequenceMeta};
use crate::error::{invalid, Error, Result};
use crate::geometry::{reconstruct, Intrinsics, Pose6DoF};
use crate::tensor::{Role, Tensor};

pub const FRAME_WIDTH: usize = 320;
pub const FRAME_HEIGHT: usize = 240;
pub const MIN_PLANE_DEPTH: f64 = 0.5;
pub const MAX_PLANE_DEPTH: f64 = 50.0;
/// Per-pair mean absolute error bound of the warp oracle.
pub const WARP_MAE_BOUND: f64 = 0.02;
/// Largest per-frame camera translation as a fraction of mean plane depth.
pub const MAX_STEP_FRACTION: f64 = 0.018;
/// Relative depth tolerance for covisibility.
pub const DEPTH_CONSISTENCY: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraMode {
    Moving,
    Static,
}

impl CameraMode {
    pub fn name(self) -> &'static str {
        match self {
            CameraMode::Moving => "moving",
            CameraMode::Static => "static",
        }
    }
}

impl std::str::FromStr for CameraMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving" => Ok(CameraMode::Moving),
            "static" => Ok(CameraMode::Static),
            _ => Err(Error::Config(format!("unknown camera mode {s:?}, expected moving or static"))),
        }
    }
}

/// Band-limited value noise; `cell` is the lattice spacing in scene units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    pub cell: f64,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, ch: u64) -> f64 {
    let h = mix64(seed ^ mix64((ix as u64) ^ mix64((iy as u64) ^ mix64(ch))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, ch: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(x - fx), smooth(y - fy));
    let v00 = lattice(seed, ix, iy, ch);
    let v10 = lattice(seed, ix + 1, iy, ch);
    let v01 = lattice(seed, ix, iy + 1, ch);
    let v11 = lattice(seed, ix + 1, iy + 1, ch);
    let a = v00 + (v10 - v00) * sx;
    let b = v01 + (v11 - v01) * sx;
    a + (b - a) * sy
}

impl Texture {
    /// RGB in `[0.05, 0.95]` at plane-local coordinates.
    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let (u, v) = (x / self.cell, y / self.cell);
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let ch = ch as u64;
            let n = 0.7 * value_noise(self.seed, ch, u, v) + 0.3 * value_noise(self.seed, ch + 3, 2.0 * u, 2.0 * v);
            *o = (0.5 + 1.8 * (n - 0.5)).clamp(0.05, 0.95);
        }
        out
    }
}

/// Axis-aligned rectangle at world depth `depth`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneRect {
    /// World (x, y) of the rectangle center.
    pub center: [f64; 2],
    pub depth: f64,
    pub half_size: [f64; 2],
    pub texture: Texture,
}

impl PlaneRect {
    fn hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, [f64; 2])> {
        if dir[2].abs() < 1e-12 {
            return None;
        }
        let s = (self.depth - origin[2]) / dir[2];
        if !(s > 0.0) {
            return None;
        }
        let lx = origin[0] + s * dir[0] - (self.center[0] - self.half_size[0]);
        let ly = origin[1] + s * dir[1] - (self.center[1] - self.half_size[1]);
        if lx < 0.0 || ly < 0.0 || lx >= 2.0 * self.half_size[0] || ly >= 2.0 * self.half_size[1] {
            return None;
        }
        Some((s, [lx, ly]))
    }

    fn corners(&self) -> [[f64; 3]; 4] {
        let [cx, cy] = self.center;
        let [hx, hy] = self.half_size;
        [
            [cx - hx, cy - hy, self.depth],
            [cx + hx, cy - hy, self.depth],
            [cx - hx, cy + hy, self.depth],
            [cx + hx, cy + hy, self.depth],
        ]
    }
}

/// Rectangle that moves; `trajectory[t]` is its world center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub half_size: [f64; 2],
    pub texture: Texture,
    pub trajectory: Vec<[f64; 3]>,
}

impl TargetSpec {
    pub fn rect_at(&self, t: usize) -> PlaneRect {
        let c = self.trajectory[t];
        PlaneRect {
            center: [c[0], c[1]],
            depth: c[2],
            half_size: self.half_size,
            texture: self.texture,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub planes: Vec<PlaneRect>,
    pub target: Option<TargetSpec>,
    /// Camera-to-world pose per frame.
    pub camera_path: Vec<Pose6DoF>,
    pub k: Intrinsics,
    pub n_frames: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[1, H, W]` camera-frame z.
    pub depth: Tensor,
    /// Pixels showing the target.
    pub target_mask: Vec<bool>,
    pub bbox: BoxXywh,
    pub cam_pose: Pose6DoF,
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl SceneSpec {
    /// Random scene: a far backdrop, mid-depth clutter, two distractors
    /// sharing the target texture, and a near target on a smooth walk.
    pub fn random(seed: u64, n_frames: usize, width: usize, height: usize, mode: CameraMode) -> Result<SceneSpec> {
        if n_frames == 0 {
            return Err(invalid!("scene needs at least one frame"));
        }
        if width < 64 || height < 64 {
            return Err(invalid!("frame {width}x{height} is too small, need at least 64x64"));
        }
        let k = Intrinsics::pseudo(width, height);
        let f = k.focal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // fixed world-space grain, so distant planes look finer
        let grain = FRAME_WIDTH as f64 / width as f64;
        let tex = |rng: &mut ChaCha8Rng| Texture {
            seed: rng.random(),
            cell: rng.random_range(0.6..0.9) * grain,
        };

        let mut camera_path: Vec<Pose6DoF> = match mode {
            CameraMode::Static => vec![Pose6DoF::identity(); n_frames],
            CameraMode::Moving => {
                let amp_t = [1.6, 0.8, 0.4];
                let amp_r = [0.02, 0.02, 0.01];
                let mut waves = Vec::new();
                for i in 0..6 {
                    let amp = if i < 3 { amp_r[i] } else { amp_t[i - 3] };
                    let period: f64 = rng.random_range(40.0..60.0);
                    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    waves.push((amp * rng.random_range(0.5..1.0), std::f64::consts::TAU / period, phase));
                }
                (0..n_frames)
                    .map(|t| {
                        let v: Vec<f64> = waves
                            .iter()
                            .map(|&(a, w, p)| a * ((w * t as f64 + p).sin() - p.sin()))
                            .collect();
                        Pose6DoF {
                            rotation: [v[0], v[1], v[2]],
                            translation: [v[3], v[4], v[5]],
                        }
                    })
                    .collect()
            }
        };

        let aspect = height as f64 / width as f64;
        let mut planes = Vec::new();
        let back = 20.0;
        planes.push(PlaneRect {
            center: [0.0, 0.0],
            depth: back,
            half_size: [3.0 * back, 3.0 * back],
            texture: tex(&mut rng),
        });
        let n_clutter = rng.random_range(4..=6);
        for _ in 0..n_clutter {
            let z: f64 = rng.random_range(10.0..16.0);
            let half_w = z * width as f64 / (2.0 * f);
            planes.push(PlaneRect {
                center: [rng.random_range(-half_w..half_w), rng.random_range(-half_w * aspect..half_w * aspect)],
                depth: z,
                half_size: [rng.random_range(1.0..3.5), rng.random_range(1.0..3.5)],
                texture: tex(&mut rng),
            });
        }

        let z0: f64 = rng.random_range(3.5..5.5);
        let side_px: f64 = rng.random_range(0.0875..0.1375) * width as f64;
        let ratio: f64 = rng.random_range(0.7..1.4);
        let half_size = [0.5 * side_px * ratio.sqrt() * z0 / f, 0.5 * side_px / ratio.sqrt() * z0 / f];
        let target_tex = tex(&mut rng);
        for _ in 0..2 {
            let z: f64 = rng.random_range(7.0..9.5);
            let half_w = 0.7 * z * width as f64 / (2.0 * f);
            planes.push(PlaneRect {
                center: [rng.random_range(-half_w..half_w), rng.random_range(-half_w * aspect..half_w * aspect)],
                depth: z,
                half_size,
                texture: target_tex,
            });
        }

        let mean_depth = planes.iter().map(|p| p.depth).sum::<f64>() / planes.len() as f64;
        let largest_step = camera_path
            .windows(2)
            .map(|w| norm(w[1].inverse().compose(&w[0]).translation))
            .fold(0.0, f64::max);
        if largest_step > MAX_STEP_FRACTION * mean_depth {
            let s = MAX_STEP_FRACTION * mean_depth / largest_step;
            for pose in &mut camera_path {
                pose.translation = pose.translation.map(|c| c * s);
            }
        }

        // slow world-space walk, nudged back when the camera would lose it
        let (w, h) = (width as f64, height as f64);
        let margin = side_px.min(0.35 * h);
        let start = k.ray(rng.random_range(margin..w - margin), rng.random_range(margin..h - margin));
        let mut p = camera_path[0].apply([start[0] * z0, start[1] * z0, z0]);
        let mut vel = [0.0f64; 3];
        let mut trajectory = Vec::with_capacity(n_frames);
        for cam in &camera_path {
            let q = cam.inverse().apply(p);
            let u = k.focal * q[0] / q[2] + k.cx;
            let v = k.focal * q[1] / q[2] + k.cy;
            let (uc, vc) = (u.clamp(margin, w - margin), v.clamp(margin, h - margin));
            if uc != u || vc != v {
                let r = k.ray(uc, vc);
                p = cam.apply([r[0] * q[2], r[1] * q[2], q[2]]);
                if uc != u {
                    vel[0] = 0.0;
                }
                if vc != v {
                    vel[1] = 0.0;
                }
            }
            trajectory.push(p);
            for i in 0..2 {
                vel[i] = (0.9 * vel[i] + 0.01 * normal(&mut rng)).clamp(-0.04, 0.04);
                p[i] += vel[i];
            }
            vel[2] = (0.9 * vel[2] + 0.005 * normal(&mut rng)).clamp(-0.02, 0.02);
            p[2] = (p[2] + vel[2]).clamp(3.0, 6.0);
        }

        let scene = SceneSpec {
            planes,
            target: Some(TargetSpec {
                half_size,
                texture: target_tex,
                trajectory,
            }),
            camera_path,
            k,
            n_frames,
            seed,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.k.validate()?;
        if self.camera_path.len() != self.n_frames {
            return Err(invalid!("{} camera poses for {} frames", self.camera_path.len(), self.n_frames));
        }
        if let Some(t) = &self.target {
            if t.trajectory.len() != self.n_frames {
                return Err(invalid!("{} target positions for {} frames", t.trajectory.len(), self.n_frames));
            }
        }
        let depths = self
            .planes
            .iter()
            .map(|p| p.depth)
            .chain(self.target.iter().flat_map(|t| t.trajectory.iter().map(|c| c[2])));
        for d in depths {
            if !(MIN_PLANE_DEPTH..=MAX_PLANE_DEPTH).contains(&d) {
                return Err(invalid!("plane depth {d} outside [{MIN_PLANE_DEPTH}, {MAX_PLANE_DEPTH}]"));
            }
        }
        Ok(())
    }

    /// Mean world depth of the static planes.
    pub fn mean_plane_depth(&self) -> f64 {
        self.planes.iter().map(|p| p.depth).sum::<f64>() / self.planes.len().max(1) as f64
    }

    /// Transform from camera-`t` coordinates to camera-`t2` coordinates.
    pub fn relative_pose(&self, t: usize, t2: usize) -> Pose6DoF {
        if t == t2 {
            return Pose6DoF::identity();
        }
        self.camera_path[t2].inverse().compose(&self.camera_path[t])
    }

    /// Exact bounding box of the projected target, clipped to the frame.
    pub fn target_box(&self, t: usize) -> Option<BoxXywh> {
        let target = self.target.as_ref()?;
        let to_cam = self.camera_path[t].inverse();
        let (mut x1, mut y1, mut x2, mut y2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for c in target.rect_at(t).corners() {
            let p = to_cam.apply(c);
            if p[2] <= 0.0 {
                return None;
            }
            let u = self.k.focal * p[0] / p[2] + self.k.cx + 0.5;
            let v = self.k.focal * p[1] / p[2] + self.k.cy + 0.5;
            x1 = x1.min(u);
            y1 = y1.min(v);
            x2 = x2.max(u);
            y2 = y2.max(v);
        }
        Some(BoxXywh::from_corners(x1, y1, x2, y2).clip(self.k.width as f64, self.k.height as f64))
    }

    /// Ray-casts pixel centers against the rectangles in painter order
    /// (nearest surface wins).
    pub fn render_frame(&self, t: usize) -> Result<RenderedFrame> {
        if self.planes.is_empty() && self.target.is_none() {
            return Err(invalid!("empty scene"));
        }
        if t >= self.n_frames {
            return Err(invalid!("frame {t} out of range for {} frames", self.n_frames));
        }
        let (w, h) = (self.k.width, self.k.height);
        let pose = self.camera_path[t];
        let r = pose.rotation_matrix();
        let origin = pose.translation;
        let mut rects: Vec<(PlaneRect, bool)> = self.planes.iter().map(|p| (*p, false)).collect();
        if let Some(target) = &self.target {
            rects.push((target.rect_at(t), true));
        }
        rects.sort_by(|a, b| (a.0.depth - origin[2]).total_cmp(&(b.0.depth - origin[2])));

        let mut rgb = Tensor::zeros(&[3, h, w]).with_role(Role::Image);
        let mut depth = Tensor::zeros(&[1, h, w]).with_role(Role::Depth);
        let mut target_mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let ray = self.k.ray(x as f64, y as f64);
                let dir = [
                    r[0][0] * ray[0] + r[0][1] * ray[1] + r[0][2] * ray[2],
                    r[1][0] * ray[0] + r[1][1] * ray[1] + r[1][2] * ray[2],
                    r[2][0] * ray[0] + r[2][1] * ray[1] + r[2][2] * ray[2],
                ];
                let mut best: Option<(f64, [f64; 2], &PlaneRect, bool)> = None;
                for (rect, is_target) in &rects {
                    if let Some((s, local)) = rect.hit(origin, dir) {
                        if best.is_none_or(|b| s < b.0) {
                            best = Some((s, local, rect, *is_target));
                        }
                    }
                }
                let Some((s, local, rect, is_target)) = best else {
                    return Err(invalid!("scene leaves pixel ({x}, {y}) of frame {t} uncovered"));
                };
                // ray has unit z in the camera frame, so the hit parameter is the depth
                depth.set3(0, y, x, s);
                let c = rect.texture.color(local[0], local[1]);
                for (ch, v) in c.into_iter().enumerate() {
                    rgb.set3(ch, y, x, v);
                }
                target_mask[y * w + x] = is_target;
            }
        }
        Ok(RenderedFrame {
            rgb,
            depth,
            target_mask,
            bbox: self.target_box(t).unwrap_or_default(),
            cam_pose: pose,
        })
    }

    /// Renders every frame and quantizes to the on-disk formats.
    pub fn render_sequence(&self, name: &str) -> Result<Sequence> {
        let mut frames = Vec::with_capacity(self.n_frames);
        let mut depth = Vec::with_capacity(self.n_frames);
        let mut boxes = Vec::with_capacity(self.n_frames);
        let mut valid_frames = Vec::new();
        for t in 0..self.n_frames {
            let r = self.render_frame(t)?;
            frames.push(Frame::from_tensor(&r.rgb)?);
            depth.push(DepthFrame::from_tensor(&r.depth)?);
            if r.bbox.area() >= 64.0 {
                valid_frames.push(t);
            }
            boxes.push(r.bbox);
        }
        Ok(Sequence {
            name: name.to_string(),
            meta: SequenceMeta {
                valid_frames,
                n_frames: self.n_frames,
                width: self.k.width,
                height: self.k.height,
                intrinsics: Some(self.k),
                camera_poses: Some(self.camera_path.clone()),
                seed: Some(self.seed),
            },
            frames,
            depth: Some(depth),
            boxes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_sequences: usize,
    pub frames_per_seq: usize,
    pub seed: u64,
    pub camera_mode: CameraMode,
    pub width: usize,
    pub height: usize,
}

impl GenConfig {
    pub fn new(n_sequences: usize, frames_per_seq: usize, seed: u64, camera_mode: CameraMode) -> Self {
        GenConfig {
            n_sequences,
            frames_per_seq,
            seed,
            camera_mode,
            width: FRAME_WIDTH,
            height: FRAME_HEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sequences == 0 {
            return Err(invalid!("need at least one sequence"));
        }
        if self.frames_per_seq < 2 {
            return Err(invalid!("need at least two frames per sequence"));
        }
        Ok(())
    }

    pub fn sequence_seed(&self, i: usize) -> u64 {
        mix64(self.seed ^ mix64(i as u64 + 1))
    }

    pub fn sequence_name(i: usize) -> String {
        format!("seq_{i:03}")
    }

    pub fn scene(&self, i: usize) -> Result<SceneSpec> {
        SceneSpec::random(self.sequence_seed(i), self.frames_per_seq, self.width, self.height, self.camera_mode)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            seed: self.seed,
            camera_mode: self.camera_mode.name().to_string(),
            width: self.width,
            height: self.height,
            sequences: (0..self.n_sequences)
                .map(|i| ManifestEntry {
                    name: Self::sequence_name(i),
                    seed: self.sequence_seed(i),
                    n_frames: self.frames_per_seq,
                })
                .collect(),
        }
    }
}

/// Renders all sequences in memory.
pub fn generate_sequences(cfg: &GenConfig) -> Result<Vec<Sequence>> {
    cfg.validate()?;
    (0..cfg.n_sequences)
        .map(|i| cfg.scene(i)?.render_sequence(&GenConfig::sequence_name(i)))
        .collect()
}

/// Writes the dataset layout plus `manifest.json` under `out_dir`.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    for i in 0..cfg.n_sequences {
        let seq = cfg.scene(i)?.render_sequence(&GenConfig::sequence_name(i))?;
        save_sequence(out_dir, &seq)?;
    }
    let m = cfg.manifest();
    write_manifest(out_dir, &m)?;
    Ok(m)
}

/// Pixels of frame `t` whose surface is seen in frame `t2` at the warped
/// location: in view, outside both target boxes, and depth-consistent at all
/// four bilinear taps.
pub fn covisible_mask(
    depth_t: &Tensor,
    depth_t2: &Tensor,
    box_t: &BoxXywh,
    box_t2: &BoxXywh,
    pose: &Pose6DoF,
    k: &Intrinsics,
) -> Result<Tensor> {
    let (_, h, w) = depth_t.chw()?;
    depth_t2.expect_shape(&[1, h, w])?;
    let inside = |b: &BoxXywh, x: f64, y: f64| x + 0.5 >= b.x && x + 0.5 <= b.x2() && y + 0.5 >= b.y && y + 0.5 <= b.y2();
    let r = pose.rotation_matrix();
    let mut m = Tensor::zeros(&[1, h, w]).with_role(Role::Mask);
    for y in 0..h {
        for x in 0..w {
            let d = depth_t.at3(0, y, x);
            if !(d > 0.0) || inside(box_t, x as f64, y as f64) {
                continue;
            }
            let ray = k.ray(x as f64, y as f64);
            let p = [ray[0] * d, ray[1] * d, d];
            let mut q = pose.translation;
            for i in 0..3 {
                q[i] += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
            }
            if q[2] <= 1e-3 {
                continue;
            }
            let u = k.focal * q[0] / q[2] + k.cx;
            let v = k.focal * q[1] / q[2] + k.cy;
            if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) || inside(box_t2, u, v) {
                continue;
            }
            let (u0, v0) = (u.floor() as usize, v.floor() as usize);
            let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
            let ok = [(u0, v0), (u1, v0), (u0, v1), (u1, v1)]
                .iter()
                .all(|&(a, b)| (depth_t2.at3(0, b, a) - q[2]).abs() < DEPTH_CONSISTENCY * q[2]);
            if ok {
                m.set3(0, y, x, 1.0);
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub sequence: String,
    pub t: usize,
    pub t2: usize,
    pub mae: f64,
    pub covisible: usize,
}

impl PairCheck {
    pub fn passed(&self) -> bool {
        self.mae < WARP_MAE_BOUND
    }
}

/// Reconstructs frame `t` from frame `t2` with ground-truth depth and pose and
/// measures the mean absolute error over covisible pixels.
pub fn warp_check_pair(seq: &Sequence, t: usize, t2: usize) -> Result<PairCheck> {
    let k = seq
        .meta
        .intrinsics
        .ok_or_else(|| Error::Config(format!("{}: meta.json has no intrinsics", seq.name)))?;
    let poses = seq
        .meta
        .camera_poses
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{}: meta.json has no camera poses", seq.name)))?;
    let depth = seq
        .depth
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{}: no depth maps", seq.name)))?;
    if t >= seq.len() || t2 >= seq.len() {
        return Err(invalid!("{}: pair ({t}, {t2}) out of range", seq.name));
    }
    if !poses[t].is_finite() || !poses[t2].is_finite() {
        return Err(invalid!("{}: non-finite camera pose at frame {t} or {t2}", seq.name));
    }
    let pose = poses[t2].inverse().compose(&poses[t]);
    let d_t = depth[t].to_tensor();
    let d_t2 = depth[t2].to_tensor();
    let img_t = seq.frames[t].to_tensor();
    let img_t2 = seq.frames[t2].to_tensor();
    // zero depth only occurs where the 16-bit range saturates downward
    let d_safe = d_t.map(|v| v.max(crate::geometry::MIN_DEPTH));
    let (warped, valid) = reconstruct(&img_t2, &d_safe, &pose, &k)?;
    let cov = covisible_mask(&d_t, &d_t2, &seq.boxes[t], &seq.boxes[t2], &pose, &k)?;
    let (_, h, w) = img_t.chw()?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..h * w {
        if cov.data()[i] > 0.5 && valid.data()[i] > 0.5 {
            n += 1;
            for c in 0..3 {
                sum += (warped.data()[c * h * w + i] - img_t.data()[c * h * w + i]).abs();
            }
        }
    }
    let mae = if n == 0 { 0.0 } else { sum / (3 * n) as f64 };
    Ok(PairCheck {
        sequence: seq.name.clone(),
        t,
        t2,
        mae,
        covisible: n,
    })
}

/// Checks every adjacent pair `(t, t + 1)`.
pub fn warp_check_sequence(seq: &Sequence) -> Result<Vec<PairCheck>> {
    (0..seq.len().saturating_sub(1))
        .map(|t| warp_check_pair(seq, t, t + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_scene(depth: f64, poses: Vec<Pose6DoF>) -> SceneSpec {
        SceneSpec {
            planes: vec![PlaneRect {
                center: [0.0, 0.0],
                depth,
                half_size: [100.0, 100.0],
                texture: Texture { seed: 5, cell: 0.3 },
            }],
            target: None,
            n_frames: poses.len(),
            camera_path: poses,
            k: Intrinsics::pseudo(96, 64),
            seed: 0,
        }
    }

    #[test]
    fn single_plane_has_constant_depth() {
        let s = flat_scene(5.0, vec![Pose6DoF::identity()]);
        let f = s.render_frame(0).unwrap();
        assert!(f.depth.data().iter().all(|&d| (d - 5.0).abs() < 1e-12));
    }

    #[test]
    fn empty_scene_and_bad_index_error() {
        let mut s = flat_scene(5.0, vec![Pose6DoF::identity()]);
        assert!(s.render_frame(1).is_err());
        s.planes.clear();
        assert!(s.render_frame(0).is_err());
    }

    #[test]
    fn identical_poses_render_identically() {
        let s = SceneSpec::random(3, 4, 96, 64, CameraMode::Static).unwrap();
        let mut s2 = s.clone();
        s2.target = None;
        assert_eq!(s2.render_frame(0).unwrap(), s2.render_frame(3).unwrap());
        assert_eq!(s.render_frame(2).unwrap(), s.render_frame(2).unwrap());
    }

    #[test]
    fn relative_pose_identities() {
        let s = SceneSpec::random(9, 10, 96, 64, CameraMode::Moving).unwrap();
        assert_eq!(s.relative_pose(4, 4), Pose6DoF::identity());
        let a = s.relative_pose(2, 7).compose(&s.relative_pose(7, 2));
        assert!(a.to_vec6().iter().all(|v| v.abs() < 1e-9));
        let st = SceneSpec::random(9, 10, 96, 64, CameraMode::Static).unwrap();
        assert!(st.relative_pose(0, 9).to_vec6().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn camera_mode_parses() {
        assert_eq!("moving".parse::<CameraMode>().unwrap(), CameraMode::Moving);
        assert!("wobbly".parse::<CameraMode>().is_err());
    }
}
