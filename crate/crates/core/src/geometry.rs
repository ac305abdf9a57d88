//! Oriented grasp rectangles and the geometry around them.
//!
//! A grasp is a 5-DoF rectangle in image space: center `(x, y)`, gripper
//! orientation `theta`, extent `w` along the orientation axis and `h` across
//! it. Parallel-jaw grasps are symmetric under a half turn, so `theta` is
//! always kept in `[-pi/2, pi/2)`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum orientation difference (degrees, exclusive) for two grasps to match.
pub const MATCH_ANGLE_DEG: f64 = 30.0;
/// Minimum Jaccard index (exclusive) for two grasps to match.
pub const MATCH_JACCARD: f64 = 0.25;
/// Default overlap threshold for [`nms`].
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.3;

/// Wraps an angle into `[-pi/2, pi/2)`.
pub fn normalize_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::invalid(format!("angle must be finite, got {theta}")));
    }
    let mut t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    // rem_euclid can round up to exactly PI for tiny negative inputs
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRect", into = "RawRect")]
pub struct GraspRect {
    x: f64,
    y: f64,
    theta: f64,
    w: f64,
    h: f64,
    quality: f64,
}

#[derive(Serialize, Deserialize)]
struct RawRect {
    x: f64,
    y: f64,
    theta: f64,
    w: f64,
    h: f64,
    quality: f64,
}

impl TryFrom<RawRect> for GraspRect {
    type Error = Error;

    fn try_from(r: RawRect) -> Result<Self> {
        GraspRect::new(r.x, r.y, r.theta, r.w, r.h, r.quality)
    }
}

impl From<GraspRect> for RawRect {
    fn from(g: GraspRect) -> Self {
        RawRect {
            x: g.x,
            y: g.y,
            theta: g.theta,
            w: g.w,
            h: g.h,
            quality: g.quality,
        }
    }
}

impl GraspRect {
    pub fn new(x: f64, y: f64, theta: f64, w: f64, h: f64, quality: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::invalid("grasp center must be finite"));
        }
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(Error::invalid(format!(
                "grasp extents must be positive, got w={w} h={h}"
            )));
        }
        if !(0.0..=1.0).contains(&quality) {
            return Err(Error::invalid(format!(
                "grasp quality must lie in [0, 1], got {quality}"
            )));
        }
        Ok(GraspRect {
            x,
            y,
            theta: normalize_angle(theta)?,
            w,
            h,
            quality,
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn quality(&self) -> f64 {
        self.quality
    }

    pub fn with_quality(mut self, quality: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&quality) {
            return Err(Error::invalid(format!(
                "grasp quality must lie in [0, 1], got {quality}"
            )));
        }
        self.quality = quality;
        Ok(self)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in counter-clockwise order (standard orientation of the
    /// x/y axes, positive signed area).
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(u, v)| (self.x + u * c - v * s, self.y + u * s + v * c))
    }

    /// True when `(px, py)` lies inside or on the boundary of the rectangle.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }
}

/// Orientation difference in degrees, modulo the half-turn symmetry; in `[0, 90]`.
pub fn angle_diff(a: &GraspRect, b: &GraspRect) -> f64 {
    // both thetas are already normalized, so the difference is finite
    let d = normalize_angle(a.theta - b.theta).unwrap_or(0.0);
    d.abs().to_degrees()
}

fn shoelace(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f64>()
        / 2.0
}

/// Sutherland–Hodgman: clips `subject` against a convex counter-clockwise `clip`.
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Area of the intersection of two rectangles.
pub fn intersection_area(a: &GraspRect, b: &GraspRect) -> f64 {
    let poly = clip_convex(&a.corners(), &b.corners());
    if poly.len() < 3 {
        return 0.0;
    }
    shoelace(&poly).abs()
}

/// Jaccard index (intersection over union) computed by exact polygon clipping.
pub fn jaccard(a: &GraspRect, b: &GraspRect) -> Result<f64> {
    let (area_a, area_b) = (a.area(), b.area());
    if !(area_a > 0.0 && area_b > 0.0) {
        return Err(Error::invalid("jaccard of a zero-area rectangle"));
    }
    if a == b {
        return Ok(1.0);
    }
    let inter = intersection_area(a, b).min(area_a).min(area_b);
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Grasp-detection match: orientation within 30 degrees and Jaccard above 0.25.
pub fn is_match(pred: &GraspRect, gt: &GraspRect) -> bool {
    angle_diff(pred, gt) < MATCH_ANGLE_DEG
        && jaccard(pred, gt).map(|j| j > MATCH_JACCARD).unwrap_or(false)
}

/// Candidates with quality strictly above `alpha`, in input order.
pub fn filter_by_quality(candidates: &[GraspRect], alpha: f64) -> Vec<GraspRect> {
    candidates
        .iter()
        .filter(|g| g.quality > alpha)
        .copied()
        .collect()
}

/// Indices kept by greedy non-maximum suppression, in descending quality.
///
/// Ties in quality go to the lower input index.
pub fn nms_indices(candidates: &[GraspRect], overlap_threshold: f64) -> Result<Vec<usize>> {
    if !(overlap_threshold > 0.0 && overlap_threshold < 1.0) {
        return Err(Error::invalid(format!(
            "overlap threshold must lie in (0, 1), got {overlap_threshold}"
        )));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        candidates[j]
            .quality
            .total_cmp(&candidates[i].quality)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut suppressed = false;
        for &k in &kept {
            if jaccard(&candidates[i], &candidates[k])? > overlap_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

pub fn nms(candidates: &[GraspRect], overlap_threshold: f64) -> Result<Vec<GraspRect>> {
    Ok(nms_indices(candidates, overlap_threshold)?
        .into_iter()
        .map(|i| candidates[i])
        .collect())
}

/// Boolean raster of a grasp region; row-major, `true` inside the grasp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGrid {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl MaskGrid {
    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Rasterizes a grasp: a cell is set iff its center lies inside the rectangle.
pub fn rect_to_mask(rect: &GraspRect, width: usize, height: usize) -> Result<MaskGrid> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("mask dimensions must be positive"));
    }
    let mut bits = vec![false; width * height];
    let corners = rect.corners();
    let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let col_lo = (min_x - 0.5).floor().max(0.0) as usize;
    let row_lo = (min_y - 0.5).floor().max(0.0) as usize;
    let col_hi = ((max_x - 0.5).ceil().max(-1.0) + 1.0).min(width as f64) as usize;
    let row_hi = ((max_y - 0.5).ceil().max(-1.0) + 1.0).min(height as f64) as usize;
    for row in row_lo..row_hi {
        for col in col_lo..col_hi {
            if rect.contains(col as f64 + 0.5, row as f64 + 0.5) {
                bits[row * width + col] = true;
            }
        }
    }
    Ok(MaskGrid {
        width,
        height,
        bits,
    })
}

/// Pinhole intrinsics plus the rigid transform from camera to robot frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCamera", into = "RawCamera")]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    extrinsic: Matrix4<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawCamera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major 4x4.
    extrinsic: Vec<f64>,
}

impl TryFrom<RawCamera> for CameraModel {
    type Error = Error;

    fn try_from(r: RawCamera) -> Result<Self> {
        if r.extrinsic.len() != 16 {
            return Err(Error::invalid(format!(
                "extrinsic must have 16 entries, got {}",
                r.extrinsic.len()
            )));
        }
        CameraModel::new(
            r.fx,
            r.fy,
            r.cx,
            r.cy,
            Matrix4::from_row_slice(&r.extrinsic),
        )
    }
}

impl From<CameraModel> for RawCamera {
    fn from(c: CameraModel) -> Self {
        RawCamera {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            extrinsic: c.extrinsic.transpose().iter().copied().collect(),
        }
    }
}

/// Grasp pose in the robot frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    /// Meters.
    pub position: [f64; 3],
    /// Radians about the robot z axis.
    pub yaw: f64,
}

const ROTATION_TOL: f64 = 1e-9;

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsic: Matrix4<f64>) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(cx.is_finite() && cy.is_finite()) || extrinsic.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera parameters must be finite"));
        }
        let rot: Matrix3<f64> = extrinsic.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = rot.transpose() * rot;
        if (gram - Matrix3::identity()).abs().max() > ROTATION_TOL
            || (rot.determinant() - 1.0).abs() > ROTATION_TOL
        {
            return Err(Error::invalid("extrinsic rotation is not a proper rotation"));
        }
        let bottom = extrinsic.fixed_view::<1, 4>(3, 0);
        if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() > ROTATION_TOL {
            return Err(Error::invalid("extrinsic bottom row must be [0, 0, 0, 1]"));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            extrinsic,
        })
    }

    pub fn extrinsic(&self) -> &Matrix4<f64> {
        &self.extrinsic
    }

    /// Back-projects pixel `(u, v)` at `depth` into the robot frame.
    pub fn pixel_to_robot(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(Error::invalid(format!("depth must be positive, got {depth}")));
        }
        let cam = Vector4::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
            1.0,
        );
        Ok((self.extrinsic * cam).xyz())
    }

    /// Projects a robot-frame point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64)> {
        let rot = self.extrinsic.fixed_view::<3, 3>(0, 0);
        let trans = self.extrinsic.fixed_view::<3, 1>(0, 3);
        let cam = rot.transpose() * (p - trans);
        if cam.z <= 0.0 {
            return Err(Error::invalid("point lies behind the camera"));
        }
        Ok((
            self.fx * cam.x / cam.z + self.cx,
            self.fy * cam.y / cam.z + self.cy,
        ))
    }
}

/// Maps an image-space grasp to a robot-frame pose.
pub fn image_to_robot(g: &GraspRect, depth_at_center: f64, cam: &CameraModel) -> Result<RobotPose> {
    let p = cam.pixel_to_robot(g.x, g.y, depth_at_center)?;
    let (s, c) = g.theta.sin_cos();
    let rot = cam.extrinsic.fixed_view::<3, 3>(0, 0);
    let dir = rot * Vector3::new(c, s, 0.0);
    Ok(RobotPose {
        position: [p.x, p.y, p.z],
        yaw: dir.y.atan2(dir.x),
    })
}
