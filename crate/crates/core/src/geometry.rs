//! Pinhole camera, rigid transforms and differentiable view synthesis.
//!
//! Pixel coordinates index the sample grid: pixel `(u, v)` sits at column
//! `u`, row `v`. Camera frames are x right, y down, z forward.

use std::rc::Rc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Role, Tensor};

/// Points closer than this along the optical axis do not project.
pub const Z_MIN: f64 = 1e-3;

/// Global depth range in scene units.
pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 100.0;

/// Square-pixel pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            focal,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Focal length half the image width, principal point at the center.
    pub fn pseudo(width: usize, height: usize) -> Self {
        Intrinsics {
            focal: 0.5 * width as f64,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(invalid!("focal length must be positive, got {}", self.focal));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(invalid!("cx {} outside (0, {})", self.cx, self.width));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(invalid!("cy {} outside (0, {})", self.cy, self.height));
        }
        Ok(())
    }

    fn check_map(&self, t: &Tensor, channels: usize, what: &str) -> Result<()> {
        let (c, h, w) = t.chw()?;
        if (c, h, w) != (channels, self.height, self.width) {
            return Err(shape_err!(
                "{what} is {:?}, camera is {}x{}",
                t.shape(),
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    /// Unit-depth ray through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.focal, (v - self.cy) / self.focal, 1.0]
    }
}

/// Axis-angle rotation plus translation; maps `p` to `R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose6DoF {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

impl Pose6DoF {
    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Result<Self> {
        let p = Pose6DoF {
            rotation,
            translation,
        };
        if !p.is_finite() {
            return Err(invalid!("non-finite pose {:?}", p));
        }
        Ok(p)
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation
            .iter()
            .chain(&self.translation)
            .all(|v| v.is_finite())
    }

    /// `[rx, ry, rz, tx, ty, tz]`
    pub fn to_vec6(&self) -> [f64; 6] {
        let (r, t) = (self.rotation, self.translation);
        [r[0], r[1], r[2], t[0], t[1], t[2]]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(invalid!("pose needs 6 values, got {}", v.len()));
        }
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    /// Same rotation with angle in `[0, pi]`.
    pub fn canonicalized(&self) -> Self {
        let th = norm3(self.rotation);
        let mut out = *self;
        if th > std::f64::consts::PI {
            let two_pi = 2.0 * std::f64::consts::PI;
            // wrapped angle in [-pi, pi]; a negative value flips the axis
            let wrapped = th - two_pi * (th / two_pi).round();
            let s = wrapped / th;
            out.rotation = self.rotation.map(|v| v * s);
        }
        out
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        rotation_matrix(self.rotation)
    }

    pub fn to_matrix(&self) -> Result<Mat4> {
        if !self.is_finite() {
            return Err(invalid!("non-finite pose {:?}", self));
        }
        let r = self.rotation_matrix();
        let t = self.translation;
        Ok([
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ])
    }

    /// Inverse of [`Pose6DoF::to_matrix`] for rigid matrices.
    pub fn from_matrix(m: &Mat4) -> Self {
        let r = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        Pose6DoF {
            rotation: rotation_log(&r),
            translation: [m[0][3], m[1][3], m[2][3]],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation_matrix();
        let mut q = mat_vec(&r, p);
        for i in 0..3 {
            q[i] += self.translation[i];
        }
        q
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose6DoF) -> Pose6DoF {
        let ra = self.rotation_matrix();
        let rb = other.rotation_matrix();
        let r = mat_mul(&ra, &rb);
        let mut t = mat_vec(&ra, other.translation);
        for i in 0..3 {
            t[i] += self.translation[i];
        }
        Pose6DoF {
            rotation: rotation_log(&r),
            translation: t,
        }
    }

    pub fn inverse(&self) -> Pose6DoF {
        let rt = transpose3(&self.rotation_matrix());
        let t = mat_vec(&rt, self.translation).map(|v| -v);
        Pose6DoF {
            rotation: self.rotation.map(|v| -v),
            translation: t,
        }
    }

    pub fn scaled_translation(&self, s: f64) -> Pose6DoF {
        Pose6DoF {
            rotation: self.rotation,
            translation: self.translation.map(|v| v * s),
        }
    }
}

/// Rigid 4x4 matrix of a pose.
pub fn pose_to_matrix(p: &Pose6DoF) -> Result<Mat4> {
    p.to_matrix()
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn transpose3(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

/// Exponential map `so(3) -> SO(3)` (Rodrigues), written over complex
/// numbers so that complex-step differentiation gives exact derivatives.
fn rotation_matrix_c(w: [Complex64; 3]) -> [[Complex64; 3]; 3] {
    let one = Complex64::new(1.0, 0.0);
    let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = if s.norm() < 1e-8 {
        // series in theta^2
        (
            one - s / 6.0 + s * s / 120.0,
            one * 0.5 - s / 24.0 + s * s / 720.0,
        )
    } else {
        let th = s.sqrt();
        (th.sin() / th, (one - th.cos()) / s)
    };
    let k = [
        [Complex64::default(), -w[2], w[1]],
        [w[2], Complex64::default(), -w[0]],
        [-w[1], w[0], Complex64::default()],
    ];
    let mut r = [[Complex64::default(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k2: Complex64 = (0..3).map(|m| k[i][m] * k[m][j]).sum();
            r[i][j] = a * k[i][j] + b * k2;
            if i == j {
                r[i][j] += one;
            }
        }
    }
    r
}

pub fn rotation_matrix(w: [f64; 3]) -> Mat3 {
    let r = rotation_matrix_c(w.map(|v| Complex64::new(v, 0.0)));
    r.map(|row| row.map(|c| c.re))
}

/// `d R / d w_k` for `k = 0..3`, exact to rounding via the complex step.
pub fn rotation_jacobian(w: [f64; 3]) -> [Mat3; 3] {
    const H: f64 = 1e-30;
    let mut out = [[[0.0; 3]; 3]; 3];
    for (k, jk) in out.iter_mut().enumerate() {
        let mut wc = w.map(|v| Complex64::new(v, 0.0));
        wc[k].im = H;
        let r = rotation_matrix_c(wc);
        for i in 0..3 {
            for j in 0..3 {
                jk[i][j] = r[i][j].im / H;
            }
        }
    }
    out
}

/// Logarithm map `SO(3) -> so(3)`, angle in `[0, pi]`.
pub fn rotation_log(r: &Mat3) -> [f64; 3] {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    let th = cos.acos();
    let vee = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if th < 1e-6 {
        return vee.map(|v| 0.5 * v);
    }
    if std::f64::consts::PI - th > 1e-6 {
        let s = th / (2.0 * th.sin());
        return vee.map(|v| v * s);
    }
    // angle near pi: axis from the largest diagonal of (R + I) / 2
    let b = [
        [(r[0][0] + 1.0) / 2.0, (r[0][1] + r[1][0]) / 4.0, (r[0][2] + r[2][0]) / 4.0],
        [(r[0][1] + r[1][0]) / 4.0, (r[1][1] + 1.0) / 2.0, (r[1][2] + r[2][1]) / 4.0],
        [(r[0][2] + r[2][0]) / 4.0, (r[1][2] + r[2][1]) / 4.0, (r[2][2] + 1.0) / 2.0],
    ];
    let i = (0..3)
        .max_by(|&a, &c| b[a][a].partial_cmp(&b[c][c]).unwrap())
        .unwrap();
    let mut axis = b[i];
    let n = norm3(axis);
    axis = axis.map(|v| v / n);
    // sign from the antisymmetric part when it is informative
    let dot = axis[0] * vee[0] + axis[1] * vee[1] + axis[2] * vee[2];
    if dot < 0.0 {
        axis = axis.map(|v| -v);
    }
    axis.map(|v| v * th)
}

/// Camera-frame points `[3, H, W]` of a depth map `[1, H, W]`.
pub fn backproject(depth: &Tensor, k: &Intrinsics) -> Result<Tensor> {
    k.check_map(depth, 1, "depth")?;
    if let Some(bad) = depth.data().iter().find(|d| !(**d > 0.0)) {
        return Err(invalid!("depth must be positive, found {bad}"));
    }
    let (h, w) = (k.height, k.width);
    let mut out = vec![0.0; 3 * h * w];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let ray = k.ray(u as f64, v as f64);
            let d = depth.data()[i];
            for c in 0..3 {
                out[c * h * w + i] = d * ray[c];
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], out)?.with_role(Role::Coords))
}

/// Applies `pose` to every point of a `[3, H, W]` cloud.
pub fn transform_points(points: &Tensor, pose: &Pose6DoF) -> Result<Tensor> {
    let (c, h, w) = points.chw()?;
    if c != 3 {
        return Err(shape_err!("points need 3 channels, got {c}"));
    }
    let n = h * w;
    let mut out = points.clone();
    let d = points.data();
    for i in 0..n {
        let q = pose.apply([d[i], d[n + i], d[2 * n + i]]);
        for (ch, qv) in q.iter().enumerate() {
            out.data_mut()[ch * n + i] = *qv;
        }
    }
    Ok(out)
}

/// Pixel `i` covers `[i - 0.5, i + 0.5)`.
fn in_frame(u: f64, v: f64, k: &Intrinsics) -> bool {
    u >= -0.5 && v >= -0.5 && u < k.width as f64 - 0.5 && v < k.height as f64 - 0.5
}

/// Pixel coordinates `[2, H, W]` of camera-frame points and a `[1, H, W]`
/// validity mask (0 where `Z <= Z_MIN` or outside the frame).
pub fn project(points: &Tensor, k: &Intrinsics) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = points.chw()?;
    if c != 3 {
        return Err(shape_err!("points need 3 channels, got {c}"));
    }
    let n = h * w;
    let d = points.data();
    let mut coords = vec![0.0; 2 * n];
    let mut valid = vec![0.0; n];
    for i in 0..n {
        let (x, y, z) = (d[i], d[n + i], d[2 * n + i]);
        let zc = z.max(Z_MIN);
        let u = k.focal * x / zc + k.cx;
        let v = k.focal * y / zc + k.cy;
        coords[i] = u;
        coords[n + i] = v;
        valid[i] = f64::from(u8::from(z > Z_MIN && in_frame(u, v, k)));
    }
    Ok((
        Tensor::new(vec![2, h, w], coords)?.with_role(Role::Coords),
        Tensor::new(vec![1, h, w], valid)?.with_role(Role::Mask),
    ))
}

/// Bilinear sample positions along one axis: `(i0, i1, used coordinate,
/// clamp flag)`; flag 1 and 2 mark clamping to the low and high border.
fn axis_cell(x: f64, n: usize, frozen: Option<(i32, i32)>) -> (usize, usize, f64, i32) {
    let hi = (n - 1) as f64;
    let (i0, flag) = match frozen {
        Some((i0, flag)) => (i0 as usize, flag),
        None => {
            if x < 0.0 {
                (0, 1)
            } else if x > hi {
                (n.saturating_sub(2), 2)
            } else {
                ((x.floor() as usize).min(n.saturating_sub(2)), 0)
            }
        }
    };
    let used = match flag {
        1 => 0.0,
        2 => hi,
        _ => x,
    };
    (i0, (i0 + 1).min(n - 1), used, flag)
}

/// Bilinear sampling of `img: [C, H, W]` at `coords: [2, H', W']` with
/// border clamping.
pub fn grid_sample(img: &Tensor, coords: &Tensor) -> Result<Tensor> {
    img.chw()?;
    let (c2, _, _) = coords.chw()?;
    if c2 != 2 {
        return Err(shape_err!("coords need 2 channels, got {c2}"));
    }
    if let Some(bad) = coords.data().iter().find(|v| !v.is_finite()) {
        return Err(invalid!("non-finite sample coordinate {bad}"));
    }
    let mut g = Graph::new();
    let i = g.constant(img.clone());
    let c = g.constant(coords.clone());
    let out = grid_sample_var(&mut g, i, c);
    Ok(g.value(out).clone().with_role(img.role()))
}

/// Differentiable [`grid_sample`]; cells and clamp flags go through
/// [`Graph::decide`].
pub fn grid_sample_var(g: &mut Graph, img: Var, coords: Var) -> Var {
    let iv = g.value_rc(img);
    let cv = g.value_rc(coords);
    let (ch, h, w) = iv.chw().expect("grid_sample image");
    let (_, ho, wo) = cv.chw().expect("grid_sample coords");
    let n = ho * wo;
    let cd = cv.data();
    let cells = g.decide(|| {
        let mut d = Vec::with_capacity(4 * n);
        for i in 0..n {
            let (x0, _, _, fx) = axis_cell(cd[i], w, None);
            let (y0, _, _, fy) = axis_cell(cd[n + i], h, None);
            d.extend([x0 as i32, fx, y0 as i32, fy]);
        }
        d
    });
    struct Tap {
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
        wx: f64,
        wy: f64,
        fx: i32,
        fy: i32,
    }
    let taps: Vec<Tap> = (0..n)
        .map(|i| {
            let cell = &cells[4 * i..4 * i + 4];
            let (x0, x1, xu, fx) = axis_cell(cd[i], w, Some((cell[0], cell[1])));
            let (y0, y1, yu, fy) = axis_cell(cd[n + i], h, Some((cell[2], cell[3])));
            Tap {
                x0,
                x1,
                y0,
                y1,
                wx: xu - x0 as f64,
                wy: yu - y0 as f64,
                fx,
                fy,
            }
        })
        .collect();
    let mut out = vec![0.0; ch * n];
    for c in 0..ch {
        let plane = &iv.data()[c * h * w..(c + 1) * h * w];
        for (i, t) in taps.iter().enumerate() {
            let top = plane[t.y0 * w + t.x0] * (1.0 - t.wx) + plane[t.y0 * w + t.x1] * t.wx;
            let bot = plane[t.y1 * w + t.x0] * (1.0 - t.wx) + plane[t.y1 * w + t.x1] * t.wx;
            out[c * n + i] = top * (1.0 - t.wy) + bot * t.wy;
        }
    }
    let taps = Rc::new(taps);
    g.op(
        Tensor::new(vec![ch, ho, wo], out).unwrap(),
        &[img, coords],
        move |go| {
            let gd = go.data();
            let mut gi = vec![0.0; ch * h * w];
            let mut gc = vec![0.0; 2 * n];
            for c in 0..ch {
                let plane = &iv.data()[c * h * w..(c + 1) * h * w];
                let gplane = &mut gi[c * h * w..(c + 1) * h * w];
                for (i, t) in taps.iter().enumerate() {
                    let gv = gd[c * n + i];
                    if gv == 0.0 {
                        continue;
                    }
                    gplane[t.y0 * w + t.x0] += gv * (1.0 - t.wx) * (1.0 - t.wy);
                    gplane[t.y0 * w + t.x1] += gv * t.wx * (1.0 - t.wy);
                    gplane[t.y1 * w + t.x0] += gv * (1.0 - t.wx) * t.wy;
                    gplane[t.y1 * w + t.x1] += gv * t.wx * t.wy;
                    let (p00, p01) = (plane[t.y0 * w + t.x0], plane[t.y0 * w + t.x1]);
                    let (p10, p11) = (plane[t.y1 * w + t.x0], plane[t.y1 * w + t.x1]);
                    if t.fx == 0 && t.x1 != t.x0 {
                        gc[i] += gv * ((p01 - p00) * (1.0 - t.wy) + (p11 - p10) * t.wy);
                    }
                    if t.fy == 0 && t.y1 != t.y0 {
                        gc[n + i] += gv * ((p10 - p00) * (1.0 - t.wx) + (p11 - p01) * t.wx);
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![ch, h, w], gi).unwrap()),
                Some(Tensor::new(vec![2, ho, wo], gc).unwrap()),
            ]
        },
    )
}

/// Differentiable `project(transform(backproject(depth), pose))`.
///
/// `depth: [1, H, W]`, `pose: [6]` as `[rx, ry, rz, tx, ty, tz]`. Returns
/// the sample coordinates and the (non-differentiable) validity mask.
pub fn warp_coords_var(g: &mut Graph, depth: Var, pose: Var, k: &Intrinsics) -> (Var, Tensor) {
    let dv = g.value_rc(depth);
    let pv = g.value_rc(pose);
    let (_, h, w) = dv.chw().expect("warp depth");
    assert_eq!(pv.len(), 6, "pose vector");
    let rot = [pv.data()[0], pv.data()[1], pv.data()[2]];
    let t = [pv.data()[3], pv.data()[4], pv.data()[5]];
    let r = rotation_matrix(rot);
    let k = *k;
    let n = h * w;
    // rotated unit rays R * ray(u, v)
    let mut rr = vec![[0.0; 3]; n];
    let mut rays = vec![[0.0; 3]; n];
    for v in 0..h {
        for u in 0..w {
            let ray = k.ray(u as f64, v as f64);
            rays[v * w + u] = ray;
            rr[v * w + u] = mat_vec(&r, ray);
        }
    }
    let mut q = vec![[0.0; 3]; n];
    for i in 0..n {
        let d = dv.data()[i];
        q[i] = [rr[i][0] * d + t[0], rr[i][1] * d + t[1], rr[i][2] * d + t[2]];
    }
    let clamp = g.decide(|| q.iter().map(|p| i32::from(p[2] <= Z_MIN)).collect());
    let mut coords = vec![0.0; 2 * n];
    let mut valid = vec![0.0; n];
    for i in 0..n {
        let z = if clamp[i] == 1 { Z_MIN } else { q[i][2] };
        // pixel plus displacement, so the identity warp is bit-exact
        let u = (i % w) as f64 + k.focal * (q[i][0] - rays[i][0] * z) / z;
        let v = (i / w) as f64 + k.focal * (q[i][1] - rays[i][1] * z) / z;
        coords[i] = u;
        coords[n + i] = v;
        valid[i] = f64::from(u8::from(q[i][2] > Z_MIN && in_frame(u, v, &k)));
    }
    let valid = Tensor::new(vec![1, h, w], valid).unwrap().with_role(Role::Mask);
    let var = g.op(
        Tensor::new(vec![2, h, w], coords).unwrap().with_role(Role::Coords),
        &[depth, pose],
        move |go| {
            let gd = go.data();
            let jac = rotation_jacobian(rot);
            let mut g_depth = vec![0.0; n];
            let mut g_r = [[0.0; 3]; 3];
            let mut g_t = [0.0; 3];
            for i in 0..n {
                let (gu, gv) = (gd[i], gd[n + i]);
                if gu == 0.0 && gv == 0.0 {
                    continue;
                }
                let clamped = clamp[i] == 1;
                let z = if clamped { Z_MIN } else { q[i][2] };
                let gx = gu * k.focal / z;
                let gy = gv * k.focal / z;
                let gz = if clamped {
                    0.0
                } else {
                    -(gu * k.focal * q[i][0] + gv * k.focal * q[i][1]) / (z * z)
                };
                let gq = [gx, gy, gz];
                let d = dv.data()[i];
                g_depth[i] = gq[0] * rr[i][0] + gq[1] * rr[i][1] + gq[2] * rr[i][2];
                for a in 0..3 {
                    g_t[a] += gq[a];
                    for b in 0..3 {
                        g_r[a][b] += gq[a] * d * rays[i][b];
                    }
                }
            }
            let mut g_pose = vec![0.0; 6];
            for (kk, jk) in jac.iter().enumerate() {
                g_pose[kk] = (0..3)
                    .flat_map(|a| (0..3).map(move |b| (a, b)))
                    .map(|(a, b)| g_r[a][b] * jk[a][b])
                    .sum();
            }
            g_pose[3..].copy_from_slice(&g_t);
            vec![
                Some(Tensor::new(vec![1, h, w], g_depth).unwrap()),
                Some(Tensor::new(vec![6], g_pose).unwrap()),
            ]
        },
    );
    (var, valid)
}

/// Synthesizes the target view from `src` using the target's depth and the
/// target-to-source pose. Returns the warped image and validity mask.
pub fn reconstruct(
    src: &Tensor,
    depth: &Tensor,
    pose: &Pose6DoF,
    k: &Intrinsics,
) -> Result<(Tensor, Tensor)> {
    let (c, _, _) = src.chw()?;
    k.check_map(src, c, "source image")?;
    k.check_map(depth, 1, "depth")?;
    if let Some(bad) = depth.data().iter().find(|d| !(**d > 0.0)) {
        return Err(invalid!("depth must be positive, found {bad}"));
    }
    if !pose.is_finite() {
        return Err(invalid!("non-finite pose"));
    }
    let mut g = Graph::new();
    let d = g.constant(depth.clone());
    let p = g.constant(Tensor::new(vec![6], pose.to_vec6().to_vec())?);
    let s = g.constant(src.clone());
    let (coords, valid) = warp_coords_var(&mut g, d, p, k);
    let out = grid_sample_var(&mut g, s, coords);
    Ok((g.value(out).clone().with_role(src.role()), valid))
}
