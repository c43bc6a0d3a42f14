//! Minimal 3-vector helpers plus analytic ray-primitive intersection.

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    assert!(n > 1e-12, "normalize of near-zero vector {:?}", a);
    scale(a, 1.0 / n)
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub object: usize,
    pub normal: Vec3,
}

const T_MIN: f64 = 1e-6;

/// Nearest positive root of |o + t d − c|² = r²; normal points outward.
pub fn intersect_sphere(ray: &Ray, center: Vec3, radius: f64) -> Option<(f64, Vec3)> {
    let oc = sub(ray.origin, center);
    let b = dot(oc, ray.dir);
    let c = dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = if -b - sq > T_MIN { -b - sq } else { -b + sq };
    if t <= T_MIN {
        return None;
    }
    let p = add(ray.origin, scale(ray.dir, t));
    Some((t, scale(sub(p, center), 1.0 / radius)))
}

/// Slab test against an axis-aligned cube with half extent `half`; the normal
/// is the entry face's outward axis.
pub fn intersect_box(ray: &Ray, center: Vec3, half: f64) -> Option<(f64, Vec3)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0usize;
    for a in 0..3 {
        let inv = 1.0 / ray.dir[a];
        let mut t1 = (center[a] - half - ray.origin[a]) * inv;
        let mut t2 = (center[a] + half - ray.origin[a]) * inv;
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        if t1 > t_enter {
            t_enter = t1;
            axis = a;
        }
        t_exit = t_exit.min(t2);
        if t_enter > t_exit {
            return None;
        }
    }
    let t = if t_enter > T_MIN { t_enter } else if t_exit > T_MIN { t_exit } else { return None };
    let mut normal = [0.0, 0.0, 0.0];
    normal[axis] = -ray.dir[axis].signum();
    Some((t, normal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_ray_hits_unit_sphere_at_t2() {
        // Camera position (0,0,3) toward origin against the quadratic formula:
        // |o|²=9, b=oc·d=-3, disc=9-8=1, t=3-1=2.
        let ray = Ray { origin: [0.0, 0.0, 3.0], dir: [0.0, 0.0, -1.0] };
        let (t, n) = intersect_sphere(&ray, [0.0, 0.0, 0.0], 1.0).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert!((n[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn miss_returns_none() {
        let ray = Ray { origin: [0.0, 0.0, 3.0], dir: [0.0, 0.0, -1.0] };
        assert!(intersect_sphere(&ray, [5.0, 0.0, 0.0], 1.0).is_none());
        assert!(intersect_box(&ray, [5.0, 0.0, 0.0], 0.5).is_none());
    }

    #[test]
    fn box_face_normal_opposes_ray() {
        let ray = Ray { origin: [3.0, 0.1, 0.05], dir: [-1.0, 0.0, 0.0] };
        let (t, n) = intersect_box(&ray, [0.0, 0.0, 0.0], 0.5).unwrap();
        assert!((t - 2.5).abs() < 1e-12);
        assert_eq!(n, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ray_from_inside_box_exits() {
        let ray = Ray { origin: [0.0, 0.0, 0.0], dir: [0.0, 1.0, 0.0] };
        let (t, _) = intersect_box(&ray, [0.0, 0.0, 0.0], 0.5).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
    }
}
