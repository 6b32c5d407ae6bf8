//! Pinhole back-projection, rigid transforms, reprojection and z-buffering of
//! background pixels into a target camera.
//!
//! Pixel `(u, v)` is column `u`, row `v`, with pixel centres at integer
//! coordinates. Continuous targets are rasterized with `floor(x + 0.5)`, so
//! exact halves round up. Z-buffer collisions keep the smallest depth; equal
//! depths keep the first point to arrive, where points arrive in ascending
//! frame order and row-major source order within a frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
}

fn transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| m[c][r]))
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse(m: &Mat3) -> Option<Mat3> {
    let d = det(m);
    if d.abs() < 1e-12 || !d.is_finite() {
        return None;
    }
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / d)))
}

/// Pinhole intrinsics `K` and its inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mat3", into = "Mat3")]
pub struct CameraIntrinsics {
    k: Mat3,
    k_inv: Mat3,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::from_matrix([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    }

    pub fn from_matrix(k: Mat3) -> Result<Self> {
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Contract("intrinsics need positive focal lengths".into()));
        }
        let k_inv = inverse(&k).ok_or_else(|| Error::Contract("intrinsics matrix is singular".into()))?;
        Ok(Self { k, k_inv })
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.k
    }

    /// Camera-frame point at depth `d` along the ray through pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64, d: f64) -> Vec3 {
        mat_vec(&self.k_inv, &[u, v, 1.0]).map(|c| c * d)
    }

    /// Continuous pixel `(u, v)` of a camera-frame point, if in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p[2] <= 0.0 {
            return None;
        }
        let q = mat_vec(&self.k, &[p[0] / p[2], p[1] / p[2], 1.0]);
        Some((q[0], q[1]))
    }
}

impl TryFrom<Mat3> for CameraIntrinsics {
    type Error = Error;

    fn try_from(k: Mat3) -> Result<Self> {
        Self::from_matrix(k)
    }
}

impl From<CameraIntrinsics> for Mat3 {
    fn from(c: CameraIntrinsics) -> Self {
        c.k
    }
}

/// `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates `RᵀR = I` and `det R = 1` within `1e-9`.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rtr = mat_mul(&transpose(&rotation), &rotation);
        let ortho = (0..3).all(|r| (0..3).all(|c| (rtr[r][c] - f64::from(u8::from(r == c))).abs() <= 1e-9));
        if !ortho || (det(&rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract("rotation is not a proper orthonormal matrix".into()));
        }
        Ok(Self { rotation, translation })
    }

    /// Rotation by `yaw` radians about the camera's vertical (y) axis, then translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            translation,
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(&other.translation),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        Self {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }
}

/// Per-pixel depth in metres with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub depth: Tensor,
    pub valid: Tensor,
}

impl DepthMap {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            depth: Tensor::zeros(&[h, w]),
            valid: Tensor::zeros(&[h, w]),
        }
    }

    pub fn dense(depth: Tensor) -> Self {
        let valid = depth.map(|d| f64::from(u8::from(d > 0.0)));
        Self { depth, valid }
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.valid.at2(r, c) != 0.0
    }
}

/// Per-pixel class labels plus a background indicator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub background: Vec<bool>,
}

impl SemanticMap {
    /// Labels below `c_bg` are background.
    pub fn from_labels(height: usize, width: usize, labels: Vec<usize>, c_bg: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("semantic map", &[height, width], &[labels.len()]));
        }
        let background = labels.iter().map(|&l| l < c_bg).collect();
        Ok(Self {
            height,
            width,
            labels,
            background,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
            background: vec![false; height * width],
        }
    }

    pub fn label(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.width + c]
    }
}

/// A reprojected point: rasterized target pixel, continuous target, depth, label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub row: usize,
    pub col: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub label: usize,
}

/// Counts of points dropped during projection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjStats {
    pub behind_camera: usize,
    pub off_frame: usize,
}

impl ProjStats {
    pub fn merge(&mut self, other: ProjStats) {
        self.behind_camera += other.behind_camera;
        self.off_frame += other.off_frame;
    }
}

/// Source pixel `(row, col)` with its depth and label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourcePixel {
    pub row: usize,
    pub col: usize,
    pub depth: f64,
    pub label: usize,
}

/// Back-projects, transforms by `h` and reprojects every source pixel into
/// an `height × width` target frame, preserving input order.
pub fn proj(
    pixels: &[SourcePixel],
    k: &CameraIntrinsics,
    h: &RigidTransform,
    height: usize,
    width: usize,
) -> Result<(Vec<ProjectedPoint>, ProjStats)> {
    let mut out = Vec::with_capacity(pixels.len());
    let mut stats = ProjStats::default();
    for p in pixels {
        if p.depth.is_nan() || p.depth <= 0.0 {
            return Err(Error::Contract(format!("invalid depth {} at ({}, {})", p.depth, p.row, p.col)));
        }
        let cam = k.back_project(p.col as f64, p.row as f64, p.depth);
        let x = h.apply(&cam);
        let Some((u, v)) = k.project(&x) else {
            stats.behind_camera += 1;
            continue;
        };
        let (cu, rv) = ((u + 0.5).floor(), (v + 0.5).floor());
        if cu < 0.0 || rv < 0.0 || cu >= width as f64 || rv >= height as f64 {
            stats.off_frame += 1;
            continue;
        }
        out.push(ProjectedPoint {
            row: rv as usize,
            col: cu as usize,
            u,
            v,
            depth: x[2],
            label: p.label,
        });
    }
    Ok((out, stats))
}

/// Minimum-depth compositing; validity marks pixels hit by at least one point.
pub fn zbuffer_scatter(points: &[ProjectedPoint], height: usize, width: usize) -> (SemanticMap, DepthMap) {
    let mut sem = SemanticMap::empty(height, width);
    let mut dm = DepthMap::empty(height, width);
    for p in points {
        let idx = p.row * width + p.col;
        let taken = dm.valid.data()[idx] != 0.0;
        if !taken || p.depth < dm.depth.data()[idx] {
            dm.depth.data_mut()[idx] = p.depth;
            dm.valid.data_mut()[idx] = 1.0;
            sem.labels[idx] = p.label;
            sem.background[idx] = true;
        }
    }
    (sem, dm)
}

/// One input frame: depth, semantics and camera-to-world pose.
#[derive(Debug, Clone)]
pub struct FrameObservation<'a> {
    pub depth: &'a DepthMap,
    pub semantics: &'a SemanticMap,
    pub pose: RigidTransform,
}

/// Background pixels with valid depth in row-major order.
pub fn background_pixels(depth: &DepthMap, semantics: &SemanticMap) -> Vec<SourcePixel> {
    let (h, w) = (depth.height(), depth.width());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if semantics.background[i] && depth.is_valid(r, c) {
                out.push(SourcePixel {
                    row: r,
                    col: c,
                    depth: depth.depth.data()[i],
                    label: semantics.labels[i],
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ReprojectedMaps {
    /// Per input frame, background reprojected into the target camera.
    pub frames: Vec<(SemanticMap, DepthMap)>,
    /// Z-buffer over all frames together.
    pub merged: (SemanticMap, DepthMap),
    /// Any-frame validity union `[H×W]`.
    pub q: Tensor,
    pub stats: ProjStats,
}

/// Reprojects background of every input frame into the camera at `target_pose`.
pub fn build_reprojected_maps(
    frames: &[FrameObservation],
    k: &CameraIntrinsics,
    target_pose: &RigidTransform,
) -> Result<ReprojectedMaps> {
    let first = frames.first().ok_or_else(|| Error::Contract("no input frames to reproject".into()))?;
    let (h, w) = (first.depth.height(), first.depth.width());
    let world_to_target = target_pose.inverse();
    let mut per = Vec::with_capacity(frames.len());
    let mut all = Vec::new();
    let mut stats = ProjStats::default();
    let mut q = Tensor::zeros(&[h, w]);
    for f in frames {
        if f.depth.height() != h || f.depth.width() != w || f.semantics.height != h || f.semantics.width != w {
            return Err(Error::shape("reprojection frame", &[h, w], f.depth.depth.shape()));
        }
        let rel = world_to_target.compose(&f.pose);
        let (pts, s) = proj(&background_pixels(f.depth, f.semantics), k, &rel, h, w)?;
        stats.merge(s);
        let maps = zbuffer_scatter(&pts, h, w);
        for (qv, &v) in q.data_mut().iter_mut().zip(maps.1.valid.data()) {
            if v != 0.0 {
                *qv = 1.0;
            }
        }
        per.push(maps);
        all.extend(pts);
    }
    Ok(ReprojectedMaps {
        frames: per,
        merged: zbuffer_scatter(&all, h, w),
        q,
        stats,
    })
}

#[cfg(test)]
mod tests;
