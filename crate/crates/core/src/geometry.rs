//! Circular cone-beam acquisition geometry.
//!
//! World frame: isocenter at the origin, gantry rotation about +z (patient
//! axis), source trajectory in the x-y plane. At angle θ the source sits at
//! `R_z(θ)·(-sid, 0, 0)`. The camera frame has its origin at the source, +z
//! along the central ray toward the isocenter, +y along world +z (detector
//! rows) and +x = y × z (detector columns).
//!
//! Detector pixel `(row, col)` has its center at `(u, v) = (col, row)`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the source plane (camera depth, mm) are culled.
pub const DEPTH_EPSILON: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub rows: usize,
    pub cols: usize,
    /// Pixel size in mm (square pixels).
    pub pixel_pitch: f64,
}

impl DetectorSpec {
    pub fn new(rows: usize, cols: usize, pixel_pitch: f64) -> Self {
        Self {
            rows,
            cols,
            pixel_pitch,
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub sid: f64,
    pub sdd: f64,
    pub angles: Vec<f64>,
    pub detector: DetectorSpec,
    /// Lateral detector shift along camera +x, in mm.
    pub detector_offset_u: f64,
    /// Acquisition time index of every view.
    pub time_indices: Vec<usize>,
}

impl ScanGeometry {
    /// Full-circle trajectory with `n_views` uniformly spaced angles and one
    /// time point per view.
    pub fn circular(
        sid: f64,
        sdd: f64,
        n_views: usize,
        detector: DetectorSpec,
        offset_u: f64,
    ) -> Result<Self> {
        let geom = Self {
            sid,
            sdd,
            angles: (0..n_views)
                .map(|i| 2.0 * std::f64::consts::PI * i as f64 / n_views.max(1) as f64)
                .collect(),
            detector,
            detector_offset_u: offset_u,
            time_indices: (0..n_views).collect(),
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidGeometry(msg.to_string()));
        if !(self.sid > 0.0) || !self.sid.is_finite() {
            return bad("sid must be positive");
        }
        if !(self.sdd > self.sid) || !self.sdd.is_finite() {
            return bad("sdd must exceed sid");
        }
        if self.angles.is_empty() {
            return bad("at least one view is required");
        }
        if !(self.detector.pixel_pitch > 0.0) {
            return bad("pixel pitch must be positive");
        }
        if self.detector.rows == 0 || self.detector.cols == 0 {
            return bad("detector must have at least one pixel");
        }
        if !self.detector_offset_u.is_finite() {
            return bad("detector offset must be finite");
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0])
            || self.angles.iter().any(|a| !(0.0..2.0 * std::f64::consts::PI).contains(a))
        {
            return bad("angles must be strictly increasing within one revolution");
        }
        if self.time_indices.len() != self.angles.len() {
            return bad("one time index per view is required");
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    /// Number of distinct acquisition time points (max time index + 1).
    pub fn n_times(&self) -> usize {
        self.time_indices.iter().max().map_or(0, |t| t + 1)
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> f64 {
        self.sdd / self.detector.pixel_pitch
    }

    /// Piercing point of the central ray, in pixels.
    pub fn principal_point(&self) -> (f64, f64) {
        let cu = (self.detector.cols as f64 - 1.0) / 2.0
            - self.detector_offset_u / self.detector.pixel_pitch;
        let cv = (self.detector.rows as f64 - 1.0) / 2.0;
        (cu, cv)
    }

    pub fn view_pose(&self, view_index: usize) -> Result<ViewPose> {
        let angle = *self.angles.get(view_index).ok_or(Error::ViewOutOfRange {
            index: view_index,
            n_views: self.n_views(),
        })?;
        let mut pose = self.pose_at_angle(angle);
        pose.view_index = view_index;
        pose.time_index = self.time_indices[view_index];
        Ok(pose)
    }

    /// Pose of a source at an arbitrary gantry angle (view/time index 0).
    pub fn pose_at_angle(&self, angle: f64) -> ViewPose {
        let (s, c) = angle.sin_cos();
        let ez = Vector3::new(c, s, 0.0);
        let ey = Vector3::z();
        let ex = ey.cross(&ez);
        let rotation = Matrix3::from_rows(&[ex.transpose(), ey.transpose(), ez.transpose()]);
        let source = -self.sid * ez;
        ViewPose {
            rotation,
            translation: -(rotation * source),
            angle,
            view_index: 0,
            time_index: 0,
        }
    }

    /// Radius (mm) of the cylinder seen by every view: detector half-width
    /// plus |offset|, demagnified to the isocenter plane.
    pub fn fov_radius(&self) -> f64 {
        let half = self.detector.cols as f64 * self.detector.pixel_pitch / 2.0;
        (half + self.detector_offset_u.abs()) * self.sid / self.sdd
    }
}

/// Rigid world-to-camera transform of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub angle: f64,
    pub view_index: usize,
    pub time_index: usize,
}

impl ViewPose {
    pub fn to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_world + self.translation
    }

    pub fn source_position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space unit direction from the source through detector pixel `(u, v)`.
    pub fn pixel_ray(&self, geom: &ScanGeometry, u: f64, v: f64) -> Vector3<f64> {
        let (cu, cv) = geom.principal_point();
        let pitch = geom.detector.pixel_pitch;
        let dir_cam = Vector3::new((u - cu) * pitch, (v - cv) * pitch, geom.sdd).normalize();
        self.rotation.transpose() * dir_cam
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Projects a camera-space point onto the detector.
pub fn project_camera(geom: &ScanGeometry, t: &Vector3<f64>) -> Result<Projection> {
    if t.z <= DEPTH_EPSILON {
        return Err(Error::BehindSource { depth: t.z });
    }
    let f = geom.focal_px();
    let (cu, cv) = geom.principal_point();
    Ok(Projection {
        u: f * t.x / t.z + cu,
        v: f * t.y / t.z + cv,
        depth: t.z,
    })
}

pub fn project_point(pose: &ViewPose, geom: &ScanGeometry, x_world: &Vector3<f64>) -> Result<Projection> {
    project_camera(geom, &pose.to_camera(x_world))
}

/// Local Jacobian of the perspective map at camera-space point `t`.
///
/// Rows 0-1 are `∂(u, v)/∂t`; row 2 is the unit ray direction `t/‖t‖`. Both
/// image rows are orthogonal to the ray, so the third axis of `J Σ Jᵀ` is
/// the physical integration direction.
pub fn perspective_jacobian(geom: &ScanGeometry, t: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if t.z <= DEPTH_EPSILON {
        return Err(Error::BehindSource { depth: t.z });
    }
    let f = geom.focal_px();
    let iz = 1.0 / t.z;
    let n = t.norm();
    Ok(Matrix3::new(
        f * iz,
        0.0,
        -f * t.x * iz * iz,
        0.0,
        f * iz,
        -f * t.y * iz * iz,
        t.x / n,
        t.y / n,
        t.z / n,
    ))
}

/// Rotation about the world z axis.
pub fn rotation_z(angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), angle).matrix()
}
