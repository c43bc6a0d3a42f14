//! Stage-two training: fit the radiance field to the edited views while a
//! semantic consistency term ties every viewpoint to the same edit.

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::delta::DeltaModule;
use crate::diffusion::{
    encode_semantic, encode_semantic_on_tape, AutoEncoder, Denoiser, NoiseSchedule,
};
use crate::numerics::{Adam, Graph, NdArray, RngStream, Tensor};
use crate::scenes::CaptionedView;

use super::field::{RadianceField, L_D_DEFAULT, L_X_DEFAULT, WIDTH_DEFAULT};
use super::render::{draw_jitters, render_rays_on_tape, view_rays, RayConfig, RaySample};

pub const LAMBDA_C_DEFAULT: f64 = 0.05;
pub const NERF_STEPS_DEFAULT: usize = 30000;
pub const NERF_LEARNING_RATE_DEFAULT: f64 = 5e-3;
pub const BATCH_RAYS_DEFAULT: usize = 128;

/// Consistency renders run at the photometric resolution divided by this.
pub const CONSISTENCY_DOWNSCALE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhotoLoss {
    Mse,
    L1,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub photometric: PhotoLoss,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_c: LAMBDA_C_DEFAULT, photometric: PhotoLoss::Mse }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda_c.is_finite() && self.lambda_c >= 0.0,
            "consistency weight {} must be finite and non-negative",
            self.lambda_c
        );
        Ok(())
    }
}

/// Frozen stage-one models the consistency term reads through.
#[derive(Clone, Copy)]
pub struct Stage2Context<'a> {
    pub denoiser: &'a Denoiser,
    pub ae: &'a AutoEncoder,
    pub schedule: &'a NoiseSchedule,
    pub delta: &'a DeltaModule,
    pub t_star: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NerfTrainConfig {
    pub steps: usize,
    pub batch_rays: usize,
    pub learning_rate: f64,
    pub width: usize,
    pub l_x: usize,
    pub l_d: usize,
    pub rays: RayConfig,
    pub weights: LossWeights,
}

impl Default for NerfTrainConfig {
    fn default() -> Self {
        NerfTrainConfig {
            steps: NERF_STEPS_DEFAULT,
            batch_rays: BATCH_RAYS_DEFAULT,
            learning_rate: NERF_LEARNING_RATE_DEFAULT,
            width: WIDTH_DEFAULT,
            l_x: L_X_DEFAULT,
            l_d: L_D_DEFAULT,
            rays: RayConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl NerfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_rays >= 1, "need at least one photometric ray per step");
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning rate {} must be positive",
            self.learning_rate
        );
        ensure!(self.width >= 1 && self.l_x >= 1 && self.l_d >= 1, "degenerate field shape");
        self.rays.validate()?;
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NerfStep {
    pub total: f64,
    pub photo: f64,
    pub consistency: f64,
}

#[derive(Clone, Debug, Default)]
pub struct NerfReport {
    pub steps: Vec<NerfStep>,
}

impl NerfReport {
    /// Mean total loss over the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        if self.steps.len() < 2 * window || window == 0 {
            return None;
        }
        let mean = |part: &[NerfStep]| part.iter().map(|s| s.total).sum::<f64>() / window as f64;
        Some((mean(&self.steps[..window]), mean(&self.steps[self.steps.len() - window..])))
    }
}

/// Mean absolute difference between two embeddings of equal length.
pub fn embedding_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "embedding lengths differ");
    assert!(!a.is_empty(), "empty embeddings");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Photometric + weighted consistency, the scalar the training loop descends.
pub fn total_loss(photo: f64, consistency: f64, weights: &LossWeights) -> f64 {
    photo + weights.lambda_c * consistency
}

/// How far a rendered view drifts, in semantic embedding terms, from the
/// embedding it was conditioned on. Reads the render back through the frozen
/// encoder with the edit shift applied.
pub fn consistency_loss(
    render: &NdArray,
    z_target: &NdArray,
    ctx: &Stage2Context,
) -> Result<f64> {
    let hook = |g: &Graph, b: &Tensor, tf: &Tensor| ctx.delta.bind(g, false).apply(b, tf);
    let e = encode_semantic(
        ctx.denoiser,
        ctx.ae,
        ctx.schedule,
        std::slice::from_ref(render),
        ctx.t_star,
        Some(&hook),
    )?;
    ensure!(
        e[0].numel() == z_target.numel(),
        "embedding length {} does not match target {}",
        e[0].numel(),
        z_target.numel()
    );
    Ok(embedding_gap(&e[0].data, &z_target.data))
}

/// Mean of the per-view embeddings, the default conditioning for novel-view
/// rendering after training.
pub fn mean_embedding(embeddings: &[NdArray]) -> Result<NdArray> {
    ensure!(!embeddings.is_empty(), "no embeddings to average");
    let d = embeddings[0].numel();
    let mut out = vec![0.0; d];
    for e in embeddings {
        ensure!(e.numel() == d, "embedding lengths differ");
        for (o, v) in out.iter_mut().zip(&e.data) {
            *o += v;
        }
    }
    let inv = 1.0 / embeddings.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(NdArray::from_vec(&[d], out))
}

/// Fits a fresh field to the edited views. Each step draws photometric rays
/// from one view and, when the consistency weight is positive, renders a
/// second view at reduced resolution conditioned on the first view's
/// embedding so the two stay semantically aligned. `ctx` may be None only
/// when the consistency weight is zero. Zero steps returns the untouched
/// initialization.
pub fn train_nerf(
    views: &[CaptionedView],
    embeddings: &[NdArray],
    config: &NerfTrainConfig,
    ctx: Option<&Stage2Context>,
    seed: u64,
) -> Result<(RadianceField, NerfReport)> {
    config.validate()?;
    ensure!(!views.is_empty(), "no views to fit");
    ensure!(
        views.len() == embeddings.len(),
        "{} views but {} embeddings",
        views.len(),
        embeddings.len()
    );
    let d_z = embeddings[0].numel();
    ensure!(d_z > 0, "empty edit embedding");
    for e in embeddings {
        ensure!(e.numel() == d_z, "embedding lengths differ");
    }
    let shape = views[0].image.shape.clone();
    ensure!(shape.len() == 3 && shape[2] == 3, "views must be [h, w, 3] images");
    for v in views {
        ensure!(v.image.shape == shape, "views differ in resolution");
    }
    let (h, w) = (shape[0], shape[1]);
    let aspect = w as f64 / h as f64;

    let with_consistency = config.weights.lambda_c > 0.0;
    if with_consistency {
        let ctx = ctx.context("consistency weight is positive but no stage-one models given")?;
        ensure!(views.len() >= 2, "consistency pairing needs at least two views");
        ensure!(
            d_z == ctx.denoiser.b,
            "embedding length {} does not match denoiser bottleneck {}",
            d_z,
            ctx.denoiser.b
        );
        ctx.schedule.check_t(ctx.t_star)?;
    }
    let (ch, cw) = ((h / CONSISTENCY_DOWNSCALE).max(1), (w / CONSISTENCY_DOWNSCALE).max(1));

    let mut field = RadianceField::init(seed, d_z, config.width, config.l_x, config.l_d);
    let mut adam = Adam::new(config.learning_rate);
    let mut report = NerfReport::default();
    let pick_root = RngStream::new(seed, crate::pipeline::STREAM_BATCH).substream(0x2e4f);
    let jit_root = RngStream::new(seed, crate::pipeline::STREAM_RAYS).substream(0x57e2);

    for step in 0..config.steps {
        let mut pick = pick_root.substream(step as u64);
        let n = views.len() as u64;
        let i = pick.uniform_int(n) as usize;
        let view = &views[i];
        let z_i = &embeddings[i];

        let mut rays = Vec::with_capacity(config.batch_rays);
        let mut target = Vec::with_capacity(config.batch_rays * 3);
        for _ in 0..config.batch_rays {
            let p = pick.uniform_int((h * w) as u64) as usize;
            let (py, px) = (p / w, p % w);
            let u = (px as f64 + 0.5) / w as f64;
            let v = (py as f64 + 0.5) / h as f64;
            rays.push(RaySample::from_camera(&view.camera, u, v, aspect, &config.rays));
            target.extend_from_slice(&view.image.data[p * 3..p * 3 + 3]);
        }

        let mut jit = jit_root.substream(step as u64);
        let g = Graph::new();
        let bound = field.bind(&g, true);
        let photo_jit = draw_jitters(&mut jit, rays.len() * config.rays.n_samples);
        let (color, _) =
            render_rays_on_tape(&g, &bound, &rays, &z_i.data, config.rays.n_samples, &photo_jit);
        let tgt = g.constant_owned(NdArray::from_vec(&[rays.len(), 3], target));
        let diff = color.sub(&tgt);
        let photo = match config.weights.photometric {
            PhotoLoss::Mse => diff.square().mean_all(),
            PhotoLoss::L1 => diff.abs().mean_all(),
        };

        let (total, cons_value) = if with_consistency {
            let ctx = ctx.unwrap();
            let j_raw = pick.uniform_int(n - 1) as usize;
            let j = if j_raw >= i { j_raw + 1 } else { j_raw };
            let crays = view_rays(&views[j].camera, cw, ch, &config.rays);
            let cons_jit = draw_jitters(&mut jit, crays.len() * config.rays.n_samples);
            let (ccolor, _) = render_rays_on_tape(
                &g,
                &bound,
                &crays,
                &z_i.data,
                config.rays.n_samples,
                &cons_jit,
            );
            let img = ccolor.reshape(&[1, ch, cw, 3]);
            let hook = |g2: &Graph, b: &Tensor, tf: &Tensor| ctx.delta.bind(g2, false).apply(b, tf);
            let e = encode_semantic_on_tape(
                &g,
                ctx.denoiser,
                ctx.ae,
                ctx.schedule,
                &img,
                ctx.t_star,
                Some(&hook),
            );
            let zc = g.constant_owned(NdArray::from_vec(&[1, d_z], z_i.data.clone()));
            let lc = e.sub(&zc).abs().mean_all();
            (photo.add(&lc.scale(config.weights.lambda_c)), lc.scalar_value())
        } else {
            (photo.clone(), 0.0)
        };

        let total_value = total.scalar_value();
        if !total_value.is_finite() {
            bail!("non-finite loss at step {}", step);
        }
        let grads = g.backward(&total);
        adam.step(&mut field.params, &grads)
            .with_context(|| format!("field update at step {}", step))?;
        report.steps.push(NerfStep {
            total: total_value,
            photo: photo.scalar_value(),
            consistency: cons_value,
        });
    }
    Ok((field, report))
}
