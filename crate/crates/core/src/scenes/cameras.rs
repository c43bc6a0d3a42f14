//! Pinhole cameras on the radius-3 viewing hemisphere.

use super::geom::{self, Ray};
use crate::numerics::RngStream;
use serde::{Deserialize, Serialize};

/// Vertical field of view shared by every sampled camera, in radians.
pub const FOV_Y_DEFAULT: f64 = 45.0 * std::f64::consts::PI / 180.0;

pub const CAMERA_RADIUS: f64 = 3.0;
const ELEVATION_MIN_DEG: f64 = 10.0;
const ELEVATION_MAX_DEG: f64 = 60.0;

/// Pinhole camera. The world is Z-up; `up` must not be parallel to the view
/// direction `look_at − position`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_y: f64,
}

impl Camera {
    /// Orthonormal (right, true_up, forward) basis.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let forward = geom::normalize(geom::sub(self.look_at, self.position));
        let right_raw = geom::cross(forward, self.up);
        assert!(
            geom::norm(right_raw) > 1e-9,
            "degenerate camera: up {:?} is parallel to the view direction {:?}",
            self.up,
            forward
        );
        let right = geom::normalize(right_raw);
        let true_up = geom::cross(right, forward);
        (right, true_up, forward)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let forward = geom::sub(self.look_at, self.position);
        anyhow::ensure!(geom::norm(forward) > 1e-9, "camera position equals its look_at point");
        let r = geom::cross(geom::normalize(forward), self.up);
        anyhow::ensure!(
            geom::norm(r) > 1e-9,
            "degenerate camera: up vector is parallel to the view direction"
        );
        anyhow::ensure!(
            self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI,
            "camera fov_y {} outside (0, pi)",
            self.fov_y
        );
        Ok(())
    }

    /// Ray through normalized image coordinates; `u`, `v` in [0,1] with
    /// (0,0) the top-left corner. `aspect` is width over height.
    pub fn primary_ray(&self, u: f64, v: f64, aspect: f64) -> Ray {
        let (right, true_up, forward) = self.basis();
        let half_h = (self.fov_y * 0.5).tan();
        let half_w = half_h * aspect;
        let x = (2.0 * u - 1.0) * half_w;
        let y = (1.0 - 2.0 * v) * half_h;
        let dir = geom::normalize(geom::add(
            forward,
            geom::add(geom::scale(right, x), geom::scale(true_up, y)),
        ));
        Ray { origin: self.position, dir }
    }
}

/// `n` cameras looking at the origin from the radius-3 hemisphere: azimuths
/// uniformly spaced with a shared random phase, elevations jittered per
/// camera inside [10°, 60°]. Same seed, same cameras.
pub fn sample_cameras(seed: u64, n: usize) -> Vec<Camera> {
    let mut rng = RngStream::new(seed, crate::pipeline::STREAM_CAMERA);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    (0..n)
        .map(|i| {
            let azimuth = phase + std::f64::consts::TAU * i as f64 / n as f64;
            let elevation =
                rng.uniform_range(ELEVATION_MIN_DEG, ELEVATION_MAX_DEG).to_radians();
            let (sa, ca) = azimuth.sin_cos();
            let (se, ce) = elevation.sin_cos();
            Camera {
                position: [
                    CAMERA_RADIUS * ce * ca,
                    CAMERA_RADIUS * ce * sa,
                    CAMERA_RADIUS * se,
                ],
                look_at: [0.0, 0.0, 0.0],
                up: [0.0, 0.0, 1.0],
                fov_y: FOV_Y_DEFAULT,
            }
        })
        .collect()
}

#[cfg(test)]
fn azimuth_of(c: &Camera) -> f64 {
    c.position[1].atan2(c.position[0])
}

#[cfg(test)]
fn elevation_of(c: &Camera) -> f64 {
    let r = geom::norm(c.position);
    (c.position[2] / r).asin()
}
