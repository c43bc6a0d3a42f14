//! Volume rendering by stratified quadrature along camera rays.

use anyhow::{ensure, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NdArray, RngStream, Tensor};
use crate::scenes::{Camera, Vec3, BACKGROUND};

use super::field::{encode_rows, BoundField, RadianceField};

pub const N_SAMPLES_DEFAULT: usize = 64;
pub const T_NEAR_DEFAULT: f64 = 1.5;
pub const T_FAR_DEFAULT: f64 = 4.5;

/// Pixels per no-grad render graph. Fixed so the chunk partition, and with it
/// the per-pixel stratification, never depends on thread count.
const RENDER_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RayConfig {
    pub n_samples: usize,
    pub t_near: f64,
    pub t_far: f64,
}

impl Default for RayConfig {
    fn default() -> Self {
        RayConfig { n_samples: N_SAMPLES_DEFAULT, t_near: T_NEAR_DEFAULT, t_far: T_FAR_DEFAULT }
    }
}

impl RayConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_samples >= 1, "need at least one sample per ray");
        ensure!(
            self.t_near.is_finite() && self.t_far.is_finite() && self.t_near < self.t_far,
            "sampling window [{}, {}] is empty or not finite",
            self.t_near,
            self.t_far
        );
        ensure!(self.t_near >= 0.0, "near plane {} behind the camera", self.t_near);
        Ok(())
    }
}

/// One camera ray plus the window it is integrated over.
#[derive(Clone, Copy, Debug)]
pub struct RaySample {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl RaySample {
    pub fn validate(&self) -> Result<()> {
        let n2: f64 = self.dir.iter().map(|x| x * x).sum();
        ensure!((n2.sqrt() - 1.0).abs() <= 1e-9, "ray direction is not unit length");
        ensure!(
            self.t_near.is_finite() && self.t_far.is_finite() && self.t_near < self.t_far,
            "ray window [{}, {}] is empty or not finite",
            self.t_near,
            self.t_far
        );
        Ok(())
    }

    pub fn from_camera(camera: &Camera, u: f64, v: f64, aspect: f64, cfg: &RayConfig) -> Self {
        let ray = camera.primary_ray(u, v, aspect);
        RaySample { origin: ray.origin, dir: ray.dir, t_near: cfg.t_near, t_far: cfg.t_far }
    }
}

/// One uniform draw per sample per ray, consumed in ray-major order.
pub fn draw_jitters(rng: &mut RngStream, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.uniform()).collect()
}

/// Quadrature weights from the tape. `sigma` [R*S, 1] and `rgb` [R*S, 3] are
/// field outputs in ray-major sample order, `deltas` the [R, S] segment
/// lengths. Composites over the fixed background; returns the ray colors
/// [R, 3] and the final transmittance [R, 1]. Weights plus final
/// transmittance telescope to one per ray.
pub fn composite_on_tape(
    g: &Graph,
    sigma: &Tensor,
    rgb: &Tensor,
    deltas: &NdArray,
    background: [f64; 3],
) -> (Tensor, Tensor) {
    let (r, s) = (deltas.shape[0], deltas.shape[1]);
    let d = g.constant(deltas);
    let a = sigma.reshape(&[r, s]).mul(&d);
    let trans = a.cumsum_excl_rows().scale(-1.0).exp();
    let alpha = a.scale(-1.0).exp().scale(-1.0).add_scalar(1.0);
    let w = trans.mul(&alpha);
    let t_final = a.sum_rows().scale(-1.0).exp();
    let mut chans = Vec::with_capacity(3);
    for c in 0..3 {
        let cc = rgb.slice_cols(c, 1).reshape(&[r, s]);
        chans.push(w.mul(&cc).sum_rows().add(&t_final.scale(background[c])));
    }
    (Tensor::concat_cols(&[&chans[0], &chans[1], &chans[2]]), t_final)
}

/// Evaluate and composite a batch of rays that share one edit embedding.
/// `jitters` holds rays.len() * n_samples stratification draws in [0, 1).
/// Gradients flow to the field parameters when the binding is trainable.
pub fn render_rays_on_tape(
    g: &Graph,
    bound: &BoundField,
    rays: &[RaySample],
    z: &[f64],
    n_samples: usize,
    jitters: &[f64],
) -> (Tensor, Tensor) {
    assert!(!rays.is_empty(), "empty ray batch");
    assert_eq!(z.len(), bound.d_z, "embedding length {} vs field conditioning {}", z.len(), bound.d_z);
    assert_eq!(jitters.len(), rays.len() * n_samples, "one jitter per sample");
    let (r, s) = (rays.len(), n_samples);
    let mut points = Vec::with_capacity(r * s);
    let mut dirs = Vec::with_capacity(r * s);
    let mut deltas = NdArray::zeros(&[r, s]);
    for (ri, ray) in rays.iter().enumerate() {
        let span = ray.t_far - ray.t_near;
        let mut ts = Vec::with_capacity(s);
        for i in 0..s {
            let u = jitters[ri * s + i];
            ts.push(ray.t_near + (i as f64 + u) / s as f64 * span);
        }
        for i in 0..s {
            let next = if i + 1 < s { ts[i + 1] } else { ray.t_far };
            deltas.data[ri * s + i] = next - ts[i];
            let t = ts[i];
            points.push([
                ray.origin[0] + t * ray.dir[0],
                ray.origin[1] + t * ray.dir[1],
                ray.origin[2] + t * ray.dir[2],
            ]);
            dirs.push(ray.dir);
        }
    }
    let pe_x = g.constant_owned(encode_rows(&points, bound.l_x));
    let pe_d = g.constant_owned(encode_rows(&dirs, bound.l_d));
    let mut ztile = Vec::with_capacity(r * s * z.len());
    for _ in 0..r * s {
        ztile.extend_from_slice(z);
    }
    let zt = g.constant_owned(NdArray::from_vec(&[r * s, z.len()], ztile));
    let (sigma, rgb) = bound.eval(&pe_x, &pe_d, &zt);
    composite_on_tape(g, &sigma, &rgb, &deltas, BACKGROUND)
}

/// One ray with a fresh stratification stream. Returns the composited color
/// and the transmittance that reached the far plane.
pub fn render_ray(
    field: &RadianceField,
    ray: &RaySample,
    z: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<([f64; 3], f64)> {
    ray.validate()?;
    ensure!(n_samples >= 1, "need at least one sample per ray");
    ensure!(
        z.len() == field.d_z,
        "embedding length {} does not match field conditioning {}",
        z.len(),
        field.d_z
    );
    let mut rng = RngStream::new(seed, crate::pipeline::STREAM_RAYS);
    let jit = draw_jitters(&mut rng, n_samples);
    let g = Graph::new();
    let bound = field.bind(&g, false);
    let (color, t_final) =
        render_rays_on_tape(&g, &bound, std::slice::from_ref(ray), z, n_samples, &jit);
    let c = color.value();
    Ok(([c.data[0], c.data[1], c.data[2]], t_final.value().data[0]))
}

/// Rays through every pixel center of a view, row-major.
pub fn view_rays(camera: &Camera, width: usize, height: usize, cfg: &RayConfig) -> Vec<RaySample> {
    let aspect = width as f64 / height as f64;
    let mut rays = Vec::with_capacity(width * height);
    for py in 0..height {
        for px in 0..width {
            let u = (px as f64 + 0.5) / width as f64;
            let v = (py as f64 + 0.5) / height as f64;
            rays.push(RaySample::from_camera(camera, u, v, aspect, cfg));
        }
    }
    rays
}

/// Full [height, width, 3] render. Stratification is keyed per pixel off the
/// seed, so the image is one function of (field, camera, z, seed) no matter
/// how the work is chunked or threaded.
pub fn render_view(
    field: &RadianceField,
    camera: &Camera,
    z: &[f64],
    width: usize,
    height: usize,
    cfg: &RayConfig,
    seed: u64,
) -> Result<NdArray> {
    ensure!(width > 0 && height > 0, "render size {}x{} must be positive", width, height);
    cfg.validate()?;
    ensure!(
        z.len() == field.d_z,
        "embedding length {} does not match field conditioning {}",
        z.len(),
        field.d_z
    );
    let rays = view_rays(camera, width, height, cfg);
    let chunks: Vec<(usize, Vec<f64>)> = rays
        .par_chunks(RENDER_CHUNK)
        .enumerate()
        .map(|(ci, part)| {
            let g = Graph::new();
            let bound = field.bind(&g, false);
            let mut jit = Vec::with_capacity(part.len() * cfg.n_samples);
            for k in 0..part.len() {
                let pixel = (ci * RENDER_CHUNK + k) as u64;
                let mut rng = RngStream::new(seed, crate::pipeline::STREAM_RAYS).substream(pixel);
                jit.extend(draw_jitters(&mut rng, cfg.n_samples));
            }
            let (color, _) = render_rays_on_tape(&g, &bound, part, z, cfg.n_samples, &jit);
            (ci, color.value().data)
        })
        .collect();
    let mut img = NdArray::zeros(&[height, width, 3]);
    for (ci, data) in chunks {
        let base = ci * RENDER_CHUNK * 3;
        img.data[base..base + data.len()].copy_from_slice(&data);
    }
    Ok(img)
}
