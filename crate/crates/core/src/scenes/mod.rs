//! Procedural scene sampling, ground-truth edits, and the analytic renderer
//! that produces the training corpus.
//!
//! A scene is one to three colored primitives packed inside the unit ball.
//! Every derived artifact (reference renders, captions, edit targets) is a
//! pure function of the scene so any two pipeline stages can regenerate
//! matching data from a seed alone.

mod cameras;
mod geom;
mod io;
mod render;

pub use cameras::{sample_cameras, Camera, FOV_Y_DEFAULT};
pub use geom::{Ray, Vec3};
pub use io::{load_dataset, load_ppm, save_dataset, save_ppm, Dataset};
pub use render::{downsample2x, render_hit_mask, render_reference, BACKGROUND};

use crate::numerics::RngStream;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Sphere radius or box half extent.
    pub size: f64,
    /// Linear RGB albedo in [0,1].
    pub albedo: [f64; 3],
}

impl SceneObject {
    /// Radius of the smallest origin-centered-at-`center` sphere containing
    /// the primitive; boxes need the corner distance.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere => self.size,
            Shape::Box => self.size * 3f64.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

/// A rendered view paired with its camera and tokenized caption.
#[derive(Clone, Debug)]
pub struct CaptionedView {
    /// [H, W, 3] image in [0,1].
    pub image: crate::numerics::NdArray,
    pub camera: Camera,
    pub caption_tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EditTransform {
    Recolor { object: usize, albedo: [f64; 3] },
    Remove { object: usize },
    Enlarge { object: usize, factor: f64 },
}

/// A textual edit request plus the exact scene transform it denotes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditInstruction {
    pub tokens: Vec<usize>,
    pub transform: EditTransform,
}

pub const NAMED_COLORS: [(&str, [f64; 3]); 24] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.70, 0.12]),
    ("blue", [0.12, 0.18, 0.88]),
    ("yellow", [0.92, 0.88, 0.10]),
    ("magenta", [0.85, 0.12, 0.80]),
    ("cyan", [0.10, 0.80, 0.82]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.50, 0.50, 0.50]),
    ("orange", [0.95, 0.55, 0.08]),
    ("purple", [0.55, 0.15, 0.75]),
    ("pink", [0.95, 0.60, 0.70]),
    ("brown", [0.55, 0.35, 0.15]),
    ("teal", [0.10, 0.52, 0.50]),
    ("navy", [0.08, 0.10, 0.45]),
    ("olive", [0.48, 0.50, 0.10]),
    ("maroon", [0.55, 0.08, 0.12]),
    ("lime", [0.55, 0.92, 0.10]),
    ("salmon", [0.95, 0.50, 0.42]),
    ("gold", [0.90, 0.72, 0.12]),
    ("indigo", [0.28, 0.10, 0.60]),
    ("violet", [0.62, 0.35, 0.90]),
    ("coral", [0.95, 0.42, 0.30]),
    ("mint", [0.55, 0.92, 0.70]),
    ("slate", [0.35, 0.42, 0.50]),
];

/// Size boundary between the caption words "small" and "large".
pub const SIZE_WORD_THRESHOLD: f64 = 0.25;

const SIZE_MIN: f64 = 0.18;
const SIZE_MAX: f64 = 0.32;
const PLACEMENT_ATTEMPTS: usize = 64;

pub fn color_by_name(name: &str) -> Option<[f64; 3]> {
    NAMED_COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Name of the palette entry nearest to `albedo` in RGB distance.
pub fn nearest_color_name(albedo: [f64; 3]) -> &'static str {
    NAMED_COLORS
        .iter()
        .min_by(|(_, a), (_, b)| {
            let da = geom::dot(geom::sub(*a, albedo), geom::sub(*a, albedo));
            let db = geom::dot(geom::sub(*b, albedo), geom::sub(*b, albedo));
            da.partial_cmp(&db).unwrap()
        })
        .unwrap()
        .0
}

/// Caption for one object: size word, color word, shape word.
pub fn object_caption_words(obj: &SceneObject) -> Vec<&'static str> {
    let size_word = if obj.size < SIZE_WORD_THRESHOLD { "small" } else { "large" };
    let shape_word = match obj.shape {
        Shape::Sphere => "sphere",
        Shape::Box => "box",
    };
    vec![size_word, nearest_color_name(obj.albedo), shape_word]
}

/// Deterministic scene caption: per-object word triples in object order, or
/// the single word "empty" for a scene with no objects.
pub fn scene_caption_words(scene: &Scene) -> Vec<&'static str> {
    if scene.objects.is_empty() {
        return vec!["empty"];
    }
    scene.objects.iter().flat_map(object_caption_words).collect()
}

/// Words describing an edit request, e.g. ["recolor", "blue"].
pub fn edit_caption_words(transform: &EditTransform) -> Vec<&'static str> {
    match transform {
        EditTransform::Recolor { albedo, .. } => vec!["recolor", nearest_color_name(*albedo)],
        EditTransform::Remove { .. } => vec!["remove"],
        EditTransform::Enlarge { .. } => vec!["enlarge"],
    }
}

/// Samples a scene of 1 to 3 non-overlapping primitives with centers strictly
/// inside the unit ball. Same seed, same scene.
pub fn gen_scene(seed: u64) -> Scene {
    let mut rng = RngStream::new(seed, crate::pipeline::STREAM_SCENE);
    let count = 1 + rng.uniform_int(3) as usize;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = if rng.uniform() < 0.5 { Shape::Sphere } else { Shape::Box };
            let size = rng.uniform_range(SIZE_MIN, SIZE_MAX);
            let obj = SceneObject {
                shape,
                center: sample_center(&mut rng, bounding(shape, size)),
                size,
                albedo: NAMED_COLORS[rng.uniform_int(NAMED_COLORS.len() as u64) as usize].1,
            };
            let clear = objects.iter().all(|other| {
                let d = geom::norm(geom::sub(obj.center, other.center));
                d > obj.bounding_radius() + other.bounding_radius()
            });
            if clear {
                objects.push(obj);
                break;
            }
        }
    }
    Scene { objects }
}

fn bounding(shape: Shape, size: f64) -> f64 {
    match shape {
        Shape::Sphere => size,
        Shape::Box => size * 3f64.sqrt(),
    }
}

/// Uniform center inside the ball of radius 1 − `margin`, so the whole
/// primitive stays inside the unit ball.
fn sample_center(rng: &mut RngStream, margin: f64) -> [f64; 3] {
    let max_r = (1.0 - margin).max(0.05);
    loop {
        let c = [
            rng.uniform_range(-max_r, max_r),
            rng.uniform_range(-max_r, max_r),
            rng.uniform_range(-max_r, max_r),
        ];
        if geom::norm(c) < max_r {
            return c;
        }
    }
}

/// Applies the exact transform an edit instruction denotes. Total on valid
/// scenes; out-of-range object indices are the one failure mode.
pub fn apply_edit_oracle(scene: &Scene, transform: &EditTransform) -> anyhow::Result<Scene> {
    let index = match transform {
        EditTransform::Recolor { object, .. }
        | EditTransform::Remove { object }
        | EditTransform::Enlarge { object, .. } => *object,
    };
    if index >= scene.objects.len() {
        anyhow::bail!(
            "edit targets object {} but the scene has {} objects",
            index,
            scene.objects.len()
        );
    }
    let mut edited = scene.clone();
    match transform {
        EditTransform::Recolor { object, albedo } => edited.objects[*object].albedo = *albedo,
        EditTransform::Remove { object } => {
            edited.objects.remove(*object);
        }
        EditTransform::Enlarge { object, factor } => {
            anyhow::ensure!(*factor > 0.0, "enlarge factor must be positive, got {}", factor);
            edited.objects[*object].size *= factor;
        }
    }
    Ok(edited)
}
