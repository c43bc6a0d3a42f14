//! Analytic reference renderer with a fixed supersampling master grid.
//!
//! Every image is an average of shaded samples taken at the centers of a
//! 256x256 master grid, so rendering at half resolution and rendering at
//! full resolution then box-downsampling average exactly the same rays.
//! Resolutions that do not divide the master grid fall back to one sample
//! per pixel.

use super::geom::{self, Hit, Ray};
use super::{Camera, Scene, Shape};
use crate::numerics::NdArray;

pub const BACKGROUND: [f64; 3] = [0.86, 0.88, 0.91];
const MASTER_GRID: usize = 256;
const AMBIENT: f64 = 0.2;
const DIFFUSE: f64 = 0.8;
/// Directional light pointing straight down the +Z axis; no shadow rays.
const TO_LIGHT: [f64; 3] = [0.0, 0.0, 1.0];

fn nearest_hit(scene: &Scene, ray: &Ray) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, obj) in scene.objects.iter().enumerate() {
        let hit = match obj.shape {
            Shape::Sphere => geom::intersect_sphere(ray, obj.center, obj.size),
            Shape::Box => geom::intersect_box(ray, obj.center, obj.size),
        };
        if let Some((t, normal)) = hit {
            if best.map_or(true, |b| t < b.t) {
                best = Some(Hit { t, object: i, normal });
            }
        }
    }
    best
}

/// Lambert shading with a constant ambient floor.
pub(super) fn shade(scene: &Scene, ray: &Ray) -> ([f64; 3], Option<usize>) {
    match nearest_hit(scene, ray) {
        None => (BACKGROUND, None),
        Some(hit) => {
            let factor = AMBIENT + DIFFUSE * geom::dot(hit.normal, TO_LIGHT).max(0.0);
            let albedo = scene.objects[hit.object].albedo;
            (geom::scale(albedo, factor), Some(hit.object))
        }
    }
}

fn supersampling(dim: usize) -> usize {
    if dim > 0 && dim <= MASTER_GRID && MASTER_GRID % dim == 0 {
        MASTER_GRID / dim
    } else {
        1
    }
}

fn render_impl(
    scene: &Scene,
    camera: &Camera,
    width: usize,
    height: usize,
    mut mask: Option<&mut Vec<u32>>,
) -> NdArray {
    assert!(width > 0 && height > 0, "render size {}x{} must be positive", width, height);
    camera.basis();
    let (ssx, ssy) = (supersampling(width), supersampling(height));
    let aspect = width as f64 / height as f64;
    let inv = 1.0 / (ssx * ssy) as f64;
    let mut out = NdArray::zeros(&[height, width, 3]);
    if let Some(m) = mask.as_deref_mut() {
        m.clear();
        m.resize(height * width, 0);
    }
    for i in 0..height {
        for j in 0..width {
            let mut acc = [0.0f64; 3];
            let mut hits: u32 = 0;
            for a in 0..ssy {
                for b in 0..ssx {
                    let v = ((i * ssy + a) as f64 + 0.5) / (height * ssy) as f64;
                    let u = ((j * ssx + b) as f64 + 0.5) / (width * ssx) as f64;
                    let (c, hit) = shade(scene, &camera.primary_ray(u, v, aspect));
                    acc = geom::add(acc, c);
                    if let Some(obj) = hit {
                        hits |= 1 << obj.min(31);
                    }
                }
            }
            // All-miss pixels get the exact background color, not an
            // average of rounded copies of it.
            let px = if hits == 0 { BACKGROUND } else { geom::scale(acc, inv) };
            let base = (i * width + j) * 3;
            out.data[base] = px[0].clamp(0.0, 1.0);
            out.data[base + 1] = px[1].clamp(0.0, 1.0);
            out.data[base + 2] = px[2].clamp(0.0, 1.0);
            if let Some(m) = mask.as_deref_mut() {
                m[i * width + j] = hits;
            }
        }
    }
    out
}

/// Renders `scene` through `camera` into an [H, W, 3] image in [0,1].
/// Pure: same inputs give bitwise identical output.
pub fn render_reference(scene: &Scene, camera: &Camera, width: usize, height: usize) -> NdArray {
    render_impl(scene, camera, width, height, None)
}

/// Render plus a per-pixel bitmask of which objects any of the pixel's
/// samples hit (bit k set means object k, capped at bit 31).
pub fn render_hit_mask(
    scene: &Scene,
    camera: &Camera,
    width: usize,
    height: usize,
) -> (NdArray, Vec<u32>) {
    let mut mask = Vec::new();
    let img = render_impl(scene, camera, width, height, Some(&mut mask));
    (img, mask)
}

/// [2H, 2W, 3] to [H, W, 3] by averaging each 2x2 block.
pub fn downsample2x(image: &NdArray) -> NdArray {
    assert_eq!(image.shape.len(), 3, "downsample2x wants [H, W, 3], got {:?}", image.shape);
    let (h2, w2, c) = (image.shape[0], image.shape[1], image.shape[2]);
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "downsample2x needs even dims, got {}x{}", h2, w2);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = NdArray::zeros(&[h, w, c]);
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let at = |di: usize, dj: usize| image.data[((2 * i + di) * w2 + 2 * j + dj) * c + k];
                out.data[(i * w + j) * c + k] =
                    (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * 0.25;
            }
        }
    }
    out
}
