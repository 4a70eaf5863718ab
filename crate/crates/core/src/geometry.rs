//! Projective primitives in normalized image coordinates.
//!
//! Image points live in `[0,1]²` once dehomogenized, with `(0,0)` the top-left
//! corner and `(1,1)` the bottom-right. Lines are kept as unit normals
//! `(a, b, c)` with `a² + b² = 1`, `b ≥ 0` (and `a > 0` when `b = 0`), so every
//! image line has exactly one representation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEHOMOG_EPS: f64 = 1e-12;
const LINE_EPS: f64 = 1e-12;
const DET_EPS: f64 = 1e-9;

/// Sample labels are rounded to multiples of `2^-40`. On that grid `1 − u`
/// and `c + a` are exact, so the left-right mirror is its own inverse.
const LABEL_GRID: f64 = (1u64 << 40) as f64;

fn snap(x: f64) -> f64 {
    (x * LABEL_GRID).round() / LABEL_GRID + 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomogPoint {
    coords: [f64; 3],
}

impl HomogPoint {
    pub fn new(x: f64, y: f64, w: f64) -> Self {
        debug_assert!(x != 0.0 || y != 0.0 || w != 0.0, "homogeneous point cannot be all zero");
        Self { coords: [x, y, w] }
    }

    pub fn from_uv(u: f64, v: f64) -> Self {
        Self::new(u, v, 1.0)
    }

    pub fn coords(&self) -> [f64; 3] {
        self.coords
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::from(self.coords)
    }

    fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn is_finite_point(&self) -> bool {
        self.coords[2].abs() > DEHOMOG_EPS
    }

    /// Returns `(u, v)`, or `None` for points at (or numerically near) infinity.
    pub fn uv(&self) -> Option<(f64, f64)> {
        let [x, y, w] = self.coords;
        (w.abs() > DEHOMOG_EPS).then(|| (x / w, y / w))
    }

    /// Dehomogenized and rounded to the label grid. Points at infinity are
    /// returned unchanged.
    pub fn snapped(&self) -> Self {
        match self.uv() {
            Some((u, v)) => Self::from_uv(snap(u), snap(v)),
            None => *self,
        }
    }

    /// Reflection `u ↦ 1 − u`.
    pub fn mirrored(&self) -> Self {
        let [x, y, w] = self.coords;
        Self::new(w - x, y, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomogLine {
    coords: [f64; 3],
}

impl HomogLine {
    /// Normalizes `(a, b, c)` to a unit normal with the canonical sign.
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        let norm = a.hypot(b);
        if !(norm >= LINE_EPS) || !c.is_finite() {
            return Err(Error::DegenerateLine);
        }
        Ok(Self::canonical(a / norm, b / norm, c / norm))
    }

    fn canonical(a: f64, b: f64, c: f64) -> Self {
        let s = if b < 0.0 || (b == 0.0 && a < 0.0) { -1.0 } else { 1.0 };
        // Avoid -0.0 so that serialized forms are stable.
        Self {
            coords: [s * a + 0.0, s * b + 0.0, s * c + 0.0],
        }
    }

    /// Coefficients rounded to the label grid, sign re-canonicalized.
    pub fn snapped(&self) -> Self {
        let [a, b, c] = self.coords;
        Self::canonical(snap(a), snap(b), snap(c))
    }

    /// Image of the line under `u ↦ 1 − u`. Exact for snapped lines.
    pub fn mirrored(&self) -> Self {
        let [a, b, c] = self.coords;
        Self::canonical(-a, b, c + a)
    }

    /// The line through two distinct finite points.
    pub fn through(p: &HomogPoint, q: &HomogPoint) -> Result<Self> {
        let l = p.to_vector().cross(&q.to_vector());
        Self::new(l.x, l.y, l.z)
    }

    pub fn coords(&self) -> [f64; 3] {
        self.coords
    }

    /// The unit normal `(a, b)`, which is what the geometric loss compares.
    pub fn normal(&self) -> [f64; 2] {
        [self.coords[0], self.coords[1]]
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::from(self.coords)
    }

    /// Signed distance-like residual `a·u + b·v + c` of a dehomogenized point.
    /// Points at infinity use the homogeneous form `a·x + b·y + c·w`.
    pub fn incidence(&self, p: &HomogPoint) -> f64 {
        let [a, b, c] = self.coords;
        match p.uv() {
            Some((u, v)) => a * u + b * v + c,
            None => {
                let [x, y, w] = p.coords();
                a * x + b * y + c * w
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    h: Matrix3<f64>,
    inv: Matrix3<f64>,
}

impl Homography {
    pub fn new(h: Matrix3<f64>) -> Result<Self> {
        let det = h.determinant();
        if !(det.abs() > DET_EPS) {
            return Err(Error::SingularHomography(det));
        }
        let inv = h.try_inverse().ok_or(Error::SingularHomography(det))?;
        Ok(Self { h, inv })
    }

    pub fn identity() -> Self {
        Self {
            h: Matrix3::identity(),
            inv: Matrix3::identity(),
        }
    }

    pub fn translation(tu: f64, tv: f64) -> Self {
        Self::new(Matrix3::new(1.0, 0.0, tu, 0.0, 1.0, tv, 0.0, 0.0, 1.0)).expect("translations are invertible")
    }

    pub fn scale(s: f64) -> Result<Self> {
        Self::new(Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn inverse(&self) -> Homography {
        Homography {
            h: self.inv,
            inv: self.h,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::new(self.h * other.h)
    }
}

/// Points map as `H·p`.
pub fn transform_point(h: &Homography, p: &HomogPoint) -> HomogPoint {
    HomogPoint::from_vector(h.h * p.to_vector())
}

/// Lines map as `H⁻ᵀ·l`, renormalized to the canonical sign.
pub fn transform_line(h: &Homography, l: &HomogLine) -> Result<HomogLine> {
    let t = h.inv.transpose() * l.to_vector();
    HomogLine::new(t.x, t.y, t.z)
}

/// Pinhole camera above a planar road.
///
/// Intrinsics are in normalized image units. World axes: x to the right, y
/// down, z along the road; the road is the plane `y = height`. Positive pitch
/// tilts the optical axis toward the road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
}

impl CameraModel {
    /// Forward-looking camera with an ~80° horizontal field of view and
    /// square pixels for a 3:2 image.
    pub fn forward(height: f64) -> Self {
        Self {
            fx: 0.6,
            fy: 0.9,
            cx: 0.5,
            cy: 0.5,
            height,
            pitch: 0.0,
            yaw: 0.0,
            roll: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.height > 0.0
            && self.pitch.abs() < half_pi
            && self.roll.abs() < half_pi
            && [self.cx, self.cy, self.yaw].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScene(format!("invalid camera {self:?}")))
        }
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// World-to-camera rotation `R_roll · R_pitch · R_yaw`.
    pub fn rotation(&self) -> Matrix3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let (sr, cr) = self.roll.sin_cos();
        let yaw = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let pitch = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
        let roll = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
        roll * pitch * yaw
    }

    /// Projects a world point; `None` when it is not in front of the camera.
    pub fn project(&self, world: Vector3<f64>) -> Option<(f64, f64)> {
        let c = self.rotation() * world;
        if c.z <= 1e-9 {
            return None;
        }
        let p = self.intrinsics() * c;
        Some((p.x / p.z, p.y / p.z))
    }
}

/// Vanishing point of the lane direction and vanishing line (horizon) of the
/// road plane for `cam`.
pub fn vanishing_geometry(cam: &CameraModel) -> Result<(HomogPoint, HomogLine)> {
    cam.validate()?;
    let r = cam.rotation();
    let k = cam.intrinsics();
    let dir = r * Vector3::new(0.0, 0.0, 1.0);
    if dir.z <= 1e-9 {
        return Err(Error::DegenerateView(
            "road direction projects behind the camera".into(),
        ));
    }
    let vp = k * dir;
    let vp = HomogPoint::new(vp.x / vp.z, vp.y / vp.z, 1.0);

    let normal = r * Vector3::new(0.0, 1.0, 0.0);
    let k_inv = k.try_inverse().expect("intrinsics with fx, fy > 0 are invertible");
    let l = k_inv.transpose() * normal;
    let vl = HomogLine::new(l.x, l.y, l.z).map_err(|_| Error::DegenerateView("road plane seen edge-on".into()))?;
    Ok((vp, vl))
}

/// Row-major binary mask, `true` = occluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

/// Occlusion that grows from the image border toward `vp`.
///
/// The visible region is the image rectangle shrunk about `vp` by
/// `1 - ratio`; a pixel is occluded iff its center lies strictly outside it.
pub fn occlusion_mask(vp: &HomogPoint, ratio: f64, width: usize, height: usize) -> Mask {
    let ratio = ratio.clamp(0.0, 1.0);
    let (pu, pv) = vp.uv().unwrap_or((0.5, 0.5));
    let keep = 1.0 - ratio;
    let (u0, u1) = (pu + keep * (0.0 - pu), pu + keep * (1.0 - pu));
    let (v0, v1) = (pv + keep * (0.0 - pv), pv + keep * (1.0 - pv));
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let v = (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            data.push(u < u0 || u > u1 || v < v0 || v > v1);
        }
    }
    Mask { width, height, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_and_translation() {
        let p = HomogPoint::from_uv(0.5, 0.5);
        assert_eq!(transform_point(&Homography::identity(), &p).coords(), [0.5, 0.5, 1.0]);
        let q = transform_point(&Homography::translation(0.1, 0.0), &p);
        let (u, v) = q.uv().unwrap();
        assert_abs_diff_eq!(u, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn point_transform_matches_scalar_product() {
        let m = Matrix3::new(1.1, 0.2, -0.05, -0.1, 0.9, 0.07, 0.03, -0.02, 1.0);
        let h = Homography::new(m).unwrap();
        let p = [0.3, 0.8, 1.0];
        let mut hp = [0.0; 3];
        for (r, out) in hp.iter_mut().enumerate() {
            for (c, pc) in p.iter().enumerate() {
                *out += m[(r, c)] * pc;
            }
        }
        let (u, v) = transform_point(&h, &HomogPoint::new(p[0], p[1], p[2])).uv().unwrap();
        assert_abs_diff_eq!(u, hp[0] / hp[2], epsilon = 1e-14);
        assert_abs_diff_eq!(v, hp[1] / hp[2], epsilon = 1e-14);
    }

    #[test]
    fn line_identity_and_scale() {
        let l = HomogLine::new(0.0, 1.0, -0.5).unwrap();
        assert_eq!(transform_line(&Homography::identity(), &l).unwrap(), l);

        // Refit oracle: map two points of the horizon and rebuild the line.
        let h = Homography::scale(2.0).unwrap();
        let a = transform_point(&h, &HomogPoint::from_uv(0.1, 0.5));
        let b = transform_point(&h, &HomogPoint::from_uv(0.9, 0.5));
        let refit = HomogLine::through(&a, &b).unwrap();
        let mapped = transform_line(&h, &l).unwrap();
        for (x, y) in mapped.coords().iter().zip(refit.coords()) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(mapped.coords()[2], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn line_sign_convention() {
        let l = HomogLine::new(0.0, -2.0, 1.0).unwrap();
        assert_eq!(l.coords(), [0.0, 1.0, -0.5]);
        let v = HomogLine::new(-3.0, 0.0, 1.5).unwrap();
        assert_eq!(v.coords(), [1.0, 0.0, -0.5]);
        assert!(matches!(HomogLine::new(0.0, 0.0, 1.0), Err(Error::DegenerateLine)));
    }

    #[test]
    fn line_to_infinity_is_degenerate() {
        // Maps the line v = 0.5 to w = 0.
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, -0.5);
        let h = Homography::new(m).unwrap();
        let l = HomogLine::new(0.0, 1.0, -0.5).unwrap();
        assert!(matches!(transform_line(&h, &l), Err(Error::DegenerateLine)));
    }

    #[test]
    fn singular_homography_rejected() {
        assert!(Homography::new(Matrix3::zeros()).is_err());
    }

    #[test]
    fn forward_camera_vp_at_principal_point() {
        let cam = CameraModel::forward(1.5);
        let (vp, vl) = vanishing_geometry(&cam).unwrap();
        assert_eq!(vp.uv().unwrap(), (cam.cx, cam.cy));
        assert_eq!(vl.coords(), [0.0, 1.0, -cam.cy]);
    }

    /// Projects points far along the road and checks the limit.
    fn limit_projection(cam: &CameraModel) -> (f64, f64) {
        cam.project(Vector3::new(0.3, cam.height, 1e9)).unwrap()
    }

    #[test]
    fn yaw_moves_vp_horizontally() {
        let theta = 10f64.to_radians();
        let cam = CameraModel {
            yaw: theta,
            ..CameraModel::forward(1.5)
        };
        let (vp, _) = vanishing_geometry(&cam).unwrap();
        let (u, v) = vp.uv().unwrap();
        assert_abs_diff_eq!(u, cam.cx + cam.fx * theta.tan(), epsilon = 1e-12);
        let (lu, lv) = limit_projection(&cam);
        assert_abs_diff_eq!(u, lu, epsilon = 1e-6);
        assert_abs_diff_eq!(v, lv, epsilon = 1e-6);
    }

    #[test]
    fn looking_down_raises_vp() {
        let cam = CameraModel {
            pitch: 8f64.to_radians(),
            ..CameraModel::forward(1.5)
        };
        let (vp, _) = vanishing_geometry(&cam).unwrap();
        let (_, v) = vp.uv().unwrap();
        assert!(v < cam.cy);
        let (_, lv) = limit_projection(&cam);
        assert_abs_diff_eq!(v, lv, epsilon = 1e-6);
    }

    #[test]
    fn vp_lies_on_horizon() {
        for (p, y, r) in [(0.1, 0.2, 0.0), (0.3, -0.25, 0.15), (-0.2, 0.1, -0.1)] {
            let cam = CameraModel {
                pitch: p,
                yaw: y,
                roll: r,
                ..CameraModel::forward(1.4)
            };
            let (vp, vl) = vanishing_geometry(&cam).unwrap();
            assert!(vl.incidence(&vp).abs() < 1e-9);
        }
    }

    #[test]
    fn road_behind_camera_is_degenerate() {
        let cam = CameraModel {
            yaw: 2.0,
            ..CameraModel::forward(1.5)
        };
        assert!(matches!(vanishing_geometry(&cam), Err(Error::DegenerateView(_))));
    }

    #[test]
    fn occlusion_extremes() {
        let vp = HomogPoint::from_uv(0.5, 0.5);
        assert_eq!(occlusion_mask(&vp, 0.0, 7, 5).count(), 0);
        let full = occlusion_mask(&vp, 1.0, 8, 6);
        assert!(full.count() >= 8 * 6 - 1);
    }

    #[test]
    fn occlusion_half_on_four_by_four() {
        // Scalar point-in-quad reference: quad corners vp + s·(corner - vp).
        let vp = HomogPoint::from_uv(0.5, 0.5);
        let m = occlusion_mask(&vp, 0.5, 4, 4);
        let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let quad: Vec<(f64, f64)> = corners
            .iter()
            .map(|&(x, y)| (0.5 + 0.5 * (x - 0.5), 0.5 + 0.5 * (y - 0.5)))
            .collect();
        let inside = |u: f64, v: f64| {
            (0..4).all(|i| {
                let (ax, ay) = quad[i];
                let (bx, by) = quad[(i + 1) % 4];
                (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0
            })
        };
        for y in 0..4 {
            for x in 0..4 {
                let (u, v) = ((x as f64 + 0.5) / 4.0, (y as f64 + 0.5) / 4.0);
                assert_eq!(m.get(x, y), !inside(u, v), "pixel ({x},{y})");
            }
        }
        assert_eq!(m.count(), 12);
        assert!(!m.get(1, 1) && !m.get(2, 2));
    }
}
