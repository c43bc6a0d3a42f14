//! Directional edit metrics: per-pair edit loss, multi-view direction
//! similarity, and cross-view direction consistency. All of them compare
//! L2-normalized embedding differences; zero-length differences mark a
//! degenerate (no-op) edit and are excluded and counted.

use super::EmbeddingSpace;
use crate::numerics::NdArray;
use anyhow::{ensure, Result};

/// Differences shorter than this count as degenerate, not as a direction.
pub const DIRECTION_EPS: f64 = 1e-9;

/// One edit example: source and target images with their captions.
#[derive(Clone, Debug)]
pub struct EditPair {
    pub x_src: NdArray,
    pub t_src: Vec<usize>,
    pub x_tgt: NdArray,
    pub t_tgt: Vec<usize>,
}

/// Mean direction cosine plus how many views contributed.
#[derive(Clone, Copy, Debug)]
pub struct DirectionReport {
    pub mean: f64,
    pub used: usize,
    pub degenerate: usize,
}

/// Difference b − a, L2-normalized; `None` when the difference is too short
/// to define a direction.
fn normalized_diff(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < DIRECTION_EPS {
        None
    } else {
        Some(d.iter().map(|v| v / n).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row(m: &NdArray, i: usize) -> &[f64] {
    let (_, c) = m.as_2d();
    &m.data[i * c..(i + 1) * c]
}

/// Normalized text direction ε_T(t_tgt) − ε_T(t_src); errors when the two
/// captions embed to the same point.
pub fn text_direction(space: &EmbeddingSpace, t_src: &[usize], t_tgt: &[usize]) -> Result<Vec<f64>> {
    let e = space.embed_tokens(&[t_src.to_vec(), t_tgt.to_vec()])?;
    normalized_diff(row(&e, 0), row(&e, 1))
        .ok_or_else(|| anyhow::anyhow!("degenerate edit: text direction has zero norm"))
}

/// 1 − cos between the normalized text direction and the normalized image
/// direction of one edit pair. Ranges over [0, 2].
pub fn clip_direction_loss(pair: &EditPair, space: &EmbeddingSpace) -> Result<f64> {
    ensure!(
        pair.x_src.shape == pair.x_tgt.shape,
        "edit pair mixes image resolutions {:?} vs {:?}",
        pair.x_src.shape,
        pair.x_tgt.shape
    );
    let dt = text_direction(space, &pair.t_src, &pair.t_tgt)?;
    let e = space.embed_images(&[pair.x_src.clone(), pair.x_tgt.clone()])?;
    let di = normalized_diff(row(&e, 0), row(&e, 1))
        .ok_or_else(|| anyhow::anyhow!("degenerate edit: image direction has zero norm"))?;
    Ok(1.0 - dot(&dt, &di))
}

/// Mean cosine between the caption direction and each view's image
/// direction. Views whose image direction is degenerate are excluded.
pub fn direction_similarity(
    orig_views: &[NdArray],
    edited_views: &[NdArray],
    t_src: &[usize],
    t_tgt: &[usize],
    space: &EmbeddingSpace,
) -> Result<DirectionReport> {
    ensure!(!orig_views.is_empty(), "direction similarity over an empty view list");
    ensure!(
        orig_views.len() == edited_views.len(),
        "view lists differ in length: {} vs {}",
        orig_views.len(),
        edited_views.len()
    );
    let dt = text_direction(space, t_src, t_tgt)?;
    let e_orig = space.embed_images(orig_views)?;
    let e_edit = space.embed_images(edited_views)?;
    let mut sum = 0.0;
    let mut used = 0;
    let mut degenerate = 0;
    for i in 0..orig_views.len() {
        match normalized_diff(row(&e_orig, i), row(&e_edit, i)) {
            Some(di) => {
                sum += dot(&dt, &di);
                used += 1;
            }
            None => degenerate += 1,
        }
    }
    ensure!(used > 0, "all {} view directions are degenerate", degenerate);
    Ok(DirectionReport { mean: sum / used as f64, used, degenerate })
}

/// Mean cosine between the image directions of consecutive views; measures
/// whether the edit moves every view the same way in embedding space.
pub fn direction_consistency(
    orig_views: &[NdArray],
    edited_views: &[NdArray],
    space: &EmbeddingSpace,
) -> Result<DirectionReport> {
    ensure!(
        orig_views.len() == edited_views.len(),
        "view lists differ in length: {} vs {}",
        orig_views.len(),
        edited_views.len()
    );
    ensure!(orig_views.len() >= 2, "direction consistency needs at least 2 views");
    let e_orig = space.embed_images(orig_views)?;
    let e_edit = space.embed_images(edited_views)?;
    let mut dirs = Vec::new();
    let mut degenerate = 0;
    for i in 0..orig_views.len() {
        match normalized_diff(row(&e_orig, i), row(&e_edit, i)) {
            Some(d) => dirs.push(d),
            None => degenerate += 1,
        }
    }
    ensure!(
        dirs.len() >= 2,
        "direction consistency needs at least 2 non-degenerate views, found {}",
        dirs.len()
    );
    let mut sum = 0.0;
    for w in dirs.windows(2) {
        sum += dot(&w[0], &w[1]);
    }
    let used = dirs.len() - 1;
    Ok(DirectionReport { mean: sum / used as f64, used, degenerate })
}
