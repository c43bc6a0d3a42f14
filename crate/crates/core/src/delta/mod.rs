//! Bottleneck shift module and its training loop. A small two-layer conv
//! network h(bottleneck, t) is added to the frozen denoiser's bottleneck so
//! that decoded views drift toward a text instruction while staying close
//! to the unedited views.

use crate::diffusion::{
    encode_semantic, predict_noise, predict_x0, q_sample, sample, timestep_features, AutoEncoder,
    Conditioning, Denoiser, NoiseSchedule, T_FEATS,
};
use crate::embedspace::{text_direction, EmbeddingSpace, DIRECTION_EPS};
use crate::numerics::{
    conv2d, load_params, save_params, Adam, Graph, NdArray, ParamSet, RngStream, Tensor,
};
use crate::scenes::{apply_edit_oracle, scene_caption_words, Dataset, EditInstruction, Scene};
use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const LAMBDA_REG_DEFAULT: f64 = 0.1;
pub const STEPS_PER_VIEW_DEFAULT: usize = 50;
pub const DELTA_LEARNING_RATE_DEFAULT: f64 = 1e-2;
/// Scale of the second conv at init; small so the initial shift is a gentle
/// perturbation rather than exactly zero, which would be a stationary point
/// of both loss terms.
const OUT_INIT_SCALE: f64 = 1e-2;

/// The shift network: bottleneck activations concatenated with timestep
/// features, then two 3x3 convolutions back to bottleneck width.
#[derive(Clone, Debug)]
pub struct DeltaModule {
    pub params: ParamSet,
    /// Bottleneck channel count this module matches.
    pub b: usize,
    pub frozen: bool,
}

pub struct BoundDelta {
    t: BTreeMap<String, Tensor>,
}

/// Stage-1 hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EditConfig {
    pub lambda_reg: f64,
    pub steps_per_view: usize,
    /// Timestep of the semantic readout used when embedding edited views.
    pub t_star: usize,
    pub learning_rate: f64,
}

impl EditConfig {
    pub fn for_schedule(schedule: &NoiseSchedule) -> Self {
        EditConfig {
            lambda_reg: LAMBDA_REG_DEFAULT,
            steps_per_view: STEPS_PER_VIEW_DEFAULT,
            t_star: crate::diffusion::semantic_timestep(schedule),
            learning_rate: DELTA_LEARNING_RATE_DEFAULT,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        ensure!(self.lambda_reg >= 0.0, "lambda_reg must be non-negative, got {}", self.lambda_reg);
        ensure!(self.steps_per_view >= 1, "steps_per_view must be at least 1");
        ensure!(self.learning_rate > 0.0, "learning rate must be positive");
        schedule.check_t(self.t_star).context("t_star outside the schedule")
    }
}

/// The frozen models Stage 1 trains against.
#[derive(Clone, Copy)]
pub struct Stage1Models<'a> {
    pub denoiser: &'a Denoiser,
    pub ae: &'a AutoEncoder,
    pub space: &'a EmbeddingSpace,
    pub schedule: &'a NoiseSchedule,
}

impl Stage1Models<'_> {
    fn check(&self) -> Result<()> {
        ensure!(self.denoiser.frozen, "denoiser must be frozen before Stage 1");
        ensure!(self.ae.frozen, "autoencoder must be frozen before Stage 1");
        ensure!(
            self.denoiser.d_text == self.space.d_e,
            "denoiser caption width {} does not match embedding dim {}",
            self.denoiser.d_text,
            self.space.d_e
        );
        Ok(())
    }
}

/// One evaluated Stage-1 objective, or a skipped step whose image direction
/// was too short to normalize.
#[derive(Clone, Copy, Debug)]
pub enum StepOutcome {
    Loss { total: f64, clip: f64, reg: f64 },
    Degenerate,
}

/// Loss trace of a Stage-1 run.
#[derive(Clone, Debug, Default)]
pub struct Stage1Report {
    /// Total loss of each non-degenerate optimizer step, in order.
    pub losses: Vec<f64>,
    pub degenerate_steps: usize,
}

impl Stage1Report {
    /// Mean of the first and last `window` recorded losses.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        if self.losses.len() < 2 * window || window == 0 {
            return None;
        }
        let head: f64 = self.losses[..window].iter().sum::<f64>() / window as f64;
        let tail: f64 =
            self.losses[self.losses.len() - window..].iter().sum::<f64>() / window as f64;
        Some((head, tail))
    }
}

impl DeltaModule {
    pub fn init(seed: u64, b: usize) -> Self {
        let mut rng = RngStream::new(seed, crate::pipeline::STREAM_INIT).substream(0xde17a);
        let mut params = ParamSet::new();
        let c_in = b + T_FEATS;
        let mut w1 = NdArray::zeros(&[b, 9 * c_in]);
        rng.fill_normal(&mut w1.data);
        let s1 = 1.0 / (9.0 * c_in as f64).sqrt();
        for v in &mut w1.data {
            *v *= s1;
        }
        let mut w2 = NdArray::zeros(&[b, 9 * b]);
        rng.fill_normal(&mut w2.data);
        let s2 = OUT_INIT_SCALE / (9.0 * b as f64).sqrt();
        for v in &mut w2.data {
            *v *= s2;
        }
        params.insert("delta.conv1.w", w1);
        params.insert("delta.conv1.b", NdArray::zeros(&[1, b]));
        params.insert("delta.conv2.w", w2);
        params.insert("delta.conv2.b", NdArray::zeros(&[1, b]));
        DeltaModule { params, b, frozen: false }
    }

    /// The all-zero module; its shift is identically zero, so applying it is
    /// the identity. Frozen because training from an exact zero cannot move.
    pub fn zero(b: usize) -> Self {
        let c_in = b + T_FEATS;
        let mut params = ParamSet::new();
        params.insert("delta.conv1.w", NdArray::zeros(&[b, 9 * c_in]));
        params.insert("delta.conv1.b", NdArray::zeros(&[1, b]));
        params.insert("delta.conv2.w", NdArray::zeros(&[b, 9 * b]));
        params.insert("delta.conv2.b", NdArray::zeros(&[1, b]));
        DeltaModule { params, b, frozen: true }
    }

    pub fn bind(&self, graph: &Graph, trainable: bool) -> BoundDelta {
        assert!(!(trainable && self.frozen), "delta module is frozen");
        BoundDelta { t: graph.bind("", &self.params, trainable) }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut with_meta = self.params.clone();
        with_meta.insert("meta.b", NdArray::scalar(self.b as f64));
        save_params(path, &with_meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = load_params(path)?;
        ensure!(loaded.contains("meta.b"), "{} lacks meta.b", path.display());
        let b = loaded.get("meta.b").data[0] as usize;
        let mut params = ParamSet::new();
        for (k, v) in loaded.iter() {
            if !k.starts_with("meta.") {
                params.insert(k, v.clone());
            }
        }
        Ok(DeltaModule { params, b, frozen: true })
    }
}

impl BoundDelta {
    fn p(&self, name: &str) -> &Tensor {
        self.t.get(name).unwrap_or_else(|| panic!("delta parameter {} missing", name))
    }

    /// The shift h(bottleneck, t); same shape as the bottleneck.
    pub fn shift(&self, bottleneck: &Tensor, t_feats: &Tensor) -> Tensor {
        let s = bottleneck.shape().to_vec();
        assert_eq!(s.len(), 4, "bottleneck must be NHWC, got {:?}", s);
        let g = bottleneck.graph();
        let t_grid = g
            .constant_owned(NdArray::zeros(&[s[0], s[1], s[2], T_FEATS]))
            .add_spatial_bias(t_feats);
        let x = crate::diffusion::concat_channels(bottleneck, &t_grid);
        let h1 = conv2d(&x, self.p("delta.conv1.w"), self.p("delta.conv1.b"), 3, 3, 1, 1).silu();
        conv2d(&h1, self.p("delta.conv2.w"), self.p("delta.conv2.b"), 3, 3, 1, 1)
    }

    /// bottleneck + h(bottleneck, t).
    pub fn apply(&self, bottleneck: &Tensor, t_feats: &Tensor) -> Tensor {
        bottleneck.add(&self.shift(bottleneck, t_feats))
    }
}

/// Target caption of the edited scene, in the embedding vocabulary.
pub fn edited_caption_tokens(
    scene: &Scene,
    instruction: &EditInstruction,
    space: &EmbeddingSpace,
) -> Result<Vec<usize>> {
    let edited = apply_edit_oracle(scene, &instruction.transform)?;
    space.vocab.encode(&scene_caption_words(&edited))
}

/// Everything per-edit training reuses across steps.
struct EditContext {
    /// Caption conditioning fed to the denoiser, [1, d_text].
    instr_embed: NdArray,
    /// Normalized text direction, [1, d_e].
    text_dir: NdArray,
    /// Per-view encoded latents.
    z0: Vec<NdArray>,
}

fn build_context(
    dataset: &Dataset,
    instruction: &EditInstruction,
    models: &Stage1Models,
) -> Result<EditContext> {
    models.check()?;
    ensure!(!dataset.views.is_empty(), "dataset has no views");
    ensure!(!instruction.tokens.is_empty(), "instruction has no tokens");
    let src_tokens = dataset.views[0].caption_tokens.clone();
    let tgt_tokens = edited_caption_tokens(&dataset.scene, instruction, models.space)?;
    let dir = text_direction(models.space, &src_tokens, &tgt_tokens)?;
    let d_e = dir.len();
    let text_dir = NdArray::from_vec(&[1, d_e], dir);
    let instr_embed = models.space.embed_tokens(&[instruction.tokens.clone()])?;
    let images: Vec<NdArray> = dataset.views.iter().map(|v| v.image.clone()).collect();
    let z0 = models.ae.encode_images(&images)?;
    Ok(EditContext { instr_embed, text_dir, z0 })
}

/// λ · mean absolute difference between the frozen and edited images.
pub fn reg_loss(x0_frozen: &NdArray, x0_edited: &NdArray, lambda_reg: f64) -> f64 {
    assert_eq!(x0_frozen.shape, x0_edited.shape, "image shapes differ");
    assert!(lambda_reg >= 0.0, "lambda_reg must be non-negative");
    let mean: f64 = x0_frozen
        .data
        .iter()
        .zip(&x0_edited.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / x0_frozen.numel() as f64;
    lambda_reg * mean
}

/// Builds the Stage-1 objective for one view at one timestep. Returns the
/// loss tensor (ready for backward) unless the image direction between the
/// frozen and shifted predictions is degenerate.
fn stage1_step(
    delta: &DeltaModule,
    ctx: &EditContext,
    models: &Stage1Models,
    config: &EditConfig,
    view: usize,
    t: usize,
    noise: &NdArray,
    trainable: bool,
) -> Result<(Option<Tensor>, StepOutcome)> {
    let z0 = &ctx.z0[view];
    let zt = q_sample(z0, t, noise, models.schedule)?;
    let cond = Conditioning {
        image_latent: z0.clone(),
        caption_embed: Some(ctx.instr_embed.clone()),
    };
    // Frozen branch: no gradients, no delta.
    let eps_frozen = predict_noise(models.denoiser, models.schedule, &[zt.clone()], &[t], &[&cond])?;
    let ab = models.schedule.alpha_bar(t);
    let x_frozen_lat = predict_x0(&zt, &eps_frozen[0], ab);
    let x_frozen = models.ae.decode_latents(&[x_frozen_lat])?.remove(0);
    let e_src = models.space.embed_images(&[x_frozen.clone()])?;

    // Shifted branch on the tape.
    let g = Graph::new();
    let bound_den = models.denoiser.bind(&g, false);
    let bound_ae = models.ae.bind(&g, false);
    let bound_emb = models.space.bind(&g, false);
    let bound_delta = delta.bind(&g, trainable);
    let hook = |_: &Graph, b: &Tensor, tf: &Tensor| bound_delta.apply(b, tf);
    let zt_t = g.constant_owned(NdArray::stack(&[&zt]));
    let tf = g.constant_owned(timestep_features(&[t], models.schedule.t_max()));
    let cond_t = g.constant_owned(NdArray::stack(&[z0]));
    let ct = g.constant(&ctx.instr_embed);
    let out = bound_den.forward(&zt_t, &tf, &cond_t, Some(&ct), Some(&hook));
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0_lat = zt_t.sub(&out.eps_hat.scale(s1)).scale(1.0 / s0);
    let x_edit = bound_ae.decode(&x0_lat);
    let e_tgt = bound_emb.image(&x_edit);
    let di = e_tgt.sub(&g.constant(&e_src));
    let norm: f64 = di.value().data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DIRECTION_EPS {
        return Ok((None, StepOutcome::Degenerate));
    }
    let clip = di
        .l2_normalize_rows()
        .mul(&g.constant(&ctx.text_dir))
        .sum_all()
        .scale(-1.0)
        .add_scalar(1.0);
    let reg = x_edit
        .sub(&g.constant_owned(NdArray::stack(&[&x_frozen])))
        .abs()
        .mean_all()
        .scale(config.lambda_reg);
    let loss = clip.add(&reg);
    let outcome = StepOutcome::Loss {
        total: loss.scalar_value(),
        clip: clip.scalar_value(),
        reg: reg.scalar_value(),
    };
    Ok((Some(loss), outcome))
}

/// Evaluates the Stage-1 objective for one view at a seeded uniform
/// timestep, without touching any parameters.
pub fn stage1_loss(
    delta: &DeltaModule,
    dataset: &Dataset,
    view: usize,
    instruction: &EditInstruction,
    models: &Stage1Models,
    config: &EditConfig,
    seed: u64,
) -> Result<StepOutcome> {
    ensure!(view < dataset.views.len(), "view {} out of range", view);
    let ctx = build_context(dataset, instruction, models)?;
    let mut rng = RngStream::new(seed, crate::pipeline::STREAM_NOISE)
        .substream(0x57a6e)
        .substream(view as u64);
    let t = 1 + rng.uniform_int(models.schedule.t_max() as u64) as usize;
    let mut noise = NdArray::zeros(&ctx.z0[view].shape);
    rng.fill_normal(&mut noise.data);
    let (_, outcome) = stage1_step(delta, &ctx, models, config, view, t, &noise, false)?;
    Ok(outcome)
}

/// Trains a fresh shift module for one (scene, instruction) pair: visits
/// views round-robin, one optimizer step per visit, `steps_per_view` visits
/// each. Returns the frozen module and the loss trace.
pub fn train_delta(
    dataset: &Dataset,
    instruction: &EditInstruction,
    models: &Stage1Models,
    config: &EditConfig,
    seed: u64,
) -> Result<(DeltaModule, Stage1Report)> {
    let ctx = build_context(dataset, instruction, models)?;
    let mut delta = DeltaModule::init(seed, models.denoiser.b);
    let mut adam = Adam::new(config.learning_rate);
    let mut report = Stage1Report::default();
    let n_views = dataset.views.len();
    let mut view_rngs: Vec<RngStream> = (0..n_views)
        .map(|v| {
            RngStream::new(seed, crate::pipeline::STREAM_NOISE).substream(0x3a6e1).substream(v as u64)
        })
        .collect();
    let total = n_views * config.steps_per_view;
    for step in 0..total {
        let view = step % n_views;
        let rng = &mut view_rngs[view];
        let t = 1 + rng.uniform_int(models.schedule.t_max() as u64) as usize;
        let mut noise = NdArray::zeros(&ctx.z0[view].shape);
        rng.fill_normal(&mut noise.data);
        let (loss, outcome) = stage1_step(&delta, &ctx, models, config, view, t, &noise, true)?;
        match outcome {
            StepOutcome::Degenerate => {
                report.degenerate_steps += 1;
                continue;
            }
            StepOutcome::Loss { total: value, .. } => {
                ensure!(value.is_finite(), "stage-1 loss became non-finite at step {}", step);
                let loss = loss.expect("loss tensor present for non-degenerate step");
                let grads = loss.graph().backward(&loss);
                adam.step(&mut delta.params, &grads)?;
                report.losses.push(value);
            }
        }
    }
    delta.frozen = true;
    Ok((delta, report))
}

/// One edited image per input view, plus its semantic embedding under the
/// shifted bottleneck.
#[derive(Clone, Debug)]
pub struct EditedViews {
    pub images: Vec<NdArray>,
    pub embeddings: Vec<NdArray>,
}

/// Runs the full sampler once per view with the shift applied, conditioning
/// each run on the view itself and the instruction text.
pub fn edit_views(
    dataset: &Dataset,
    instruction: &EditInstruction,
    delta: &DeltaModule,
    models: &Stage1Models,
    config: &EditConfig,
    sample_steps: usize,
    seed: u64,
) -> Result<EditedViews> {
    let ctx = build_context(dataset, instruction, models)?;
    ensure!(delta.b == models.denoiser.b, "delta width {} does not match denoiser bottleneck {}", delta.b, models.denoiser.b);
    let hook = |g: &Graph, b: &Tensor, tf: &Tensor| delta.bind(g, false).apply(b, tf);
    let mut images = Vec::with_capacity(dataset.views.len());
    for (i, z0) in ctx.z0.iter().enumerate() {
        let cond = Conditioning {
            image_latent: z0.clone(),
            caption_embed: Some(ctx.instr_embed.clone()),
        };
        let view_seed = seed ^ (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15);
        images.push(sample(
            models.denoiser,
            models.ae,
            models.schedule,
            &cond,
            sample_steps,
            view_seed,
            Some(&hook),
        )?);
    }
    let embeddings = encode_semantic(
        models.denoiser,
        models.ae,
        models.schedule,
        &images,
        config.t_star,
        Some(&hook),
    )?;
    Ok(EditedViews { images, embeddings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::embedspace::{direction_similarity, train_embedding};
    use crate::numerics::file_checksum;
    use crate::scenes::{
        render_reference, sample_cameras, CaptionedView, EditTransform, Scene, SceneObject, Shape,
    };

    fn bottleneck_fixture(g: &Graph, b: usize) -> (Tensor, Tensor) {
        let mut rng = RngStream::new(5, 1);
        let mut x = NdArray::zeros(&[2, 4, 4, b]);
        rng.fill_normal(&mut x.data);
        let bt = g.constant_owned(x);
        let tf = g.constant_owned(timestep_features(&[3, 40], 100));
        (bt, tf)
    }

    #[test]
    fn zero_module_shift_is_identity() {
        let g = Graph::new();
        let (bt, tf) = bottleneck_fixture(&g, 12);
        let out = DeltaModule::zero(12).bind(&g, false).apply(&bt, &tf);
        assert_eq!(out.value().data, bt.value().data);
    }

    #[test]
    fn one_application_adds_exactly_one_shift() {
        let g = Graph::new();
        let (bt, tf) = bottleneck_fixture(&g, 12);
        let bound = DeltaModule::init(7, 12).bind(&g, false);
        let applied = bound.apply(&bt, &tf);
        let shift = bound.shift(&bt, &tf);
        let diff = applied.sub(&bt);
        assert!(diff.value().max_abs_diff(&shift.value()) < 1e-14);
        let twice = bound.apply(&applied, &tf);
        assert!(twice.value().max_abs_diff(&applied.value()) > 0.0);
    }

    #[test]
    fn gradients_reach_delta_but_not_frozen_denoiser() {
        let den = {
            let mut d = Denoiser::init(3, 2, 6, 8, 12, 16);
            d.frozen = true;
            d
        };
        let delta = DeltaModule::init(9, 12);
        let s = make_schedule(50, 0.01, 0.02).unwrap();
        let g = Graph::new();
        let bound_den = den.bind(&g, false);
        let bound_delta = delta.bind(&g, true);
        let hook = |_: &Graph, b: &Tensor, tf: &Tensor| bound_delta.apply(b, tf);
        let mut rng = RngStream::new(4, 2);
        let mut z = NdArray::zeros(&[1, 4, 4, 2]);
        rng.fill_normal(&mut z.data);
        let zt = g.constant(&z);
        let tf = g.constant_owned(timestep_features(&[25], s.t_max()));
        let cond = g.constant(&z);
        let out = bound_den.forward(&zt, &tf, &cond, None, Some(&hook));
        let loss = out.eps_hat.square().mean_all();
        let grads = g.backward(&loss);
        assert!(grads.get("delta.conv1.w").is_some());
        assert!(grads.get("delta.conv2.w").is_some());
        assert!(grads.get("c_in.w").is_none());
        let gw = grads.get("delta.conv2.w").unwrap();
        assert!(gw.data.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn reg_loss_matches_hand_values() {
        let zeros = NdArray::zeros(&[2, 2, 3]);
        let ones = NdArray::from_vec(&[2, 2, 3], vec![1.0; 12]);
        assert_eq!(reg_loss(&zeros, &zeros, 0.7), 0.0);
        assert_eq!(reg_loss(&zeros, &ones, 0.0), 0.0);
        assert!((reg_loss(&zeros, &ones, 0.5) - 0.5).abs() < 1e-15);
    }

    fn mini_scene() -> Scene {
        Scene {
            objects: vec![SceneObject {
                shape: Shape::Sphere,
                center: [0.0, 0.0, 0.0],
                size: 0.45,
                albedo: [0.85, 0.10, 0.10],
            }],
        }
    }

    struct MiniStack {
        dataset: Dataset,
        instruction: EditInstruction,
        denoiser: Denoiser,
        ae: AutoEncoder,
        space: EmbeddingSpace,
        schedule: NoiseSchedule,
    }

    /// Tiny end-to-end fixture: one red sphere, recolor-to-blue instruction,
    /// identity autoencoder, briefly trained embedder, random frozen
    /// denoiser. Small enough that Stage-1 mechanics are testable.
    fn mini_stack() -> MiniStack {
        let scene = mini_scene();
        let space_vocab = crate::embedspace::Vocab::standard();
        let src_tokens = space_vocab.encode(&scene_caption_words(&scene)).unwrap();
        let cams = sample_cameras(11, 3);
        let views: Vec<CaptionedView> = cams
            .iter()
            .map(|c| CaptionedView {
                image: render_reference(&scene, c, 16, 16),
                camera: *c,
                caption_tokens: src_tokens.clone(),
            })
            .collect();
        let transform = EditTransform::Recolor { object: 0, albedo: [0.12, 0.18, 0.88] };
        let instruction = EditInstruction {
            tokens: space_vocab.encode(&["recolor", "blue"]).unwrap(),
            transform,
        };
        // Embedder training set: views of the original and the oracle-edited
        // scene, so the red/blue direction means something.
        let edited_scene = apply_edit_oracle(&scene, &instruction.transform).unwrap();
        let tgt_tokens = space_vocab.encode(&scene_caption_words(&edited_scene)).unwrap();
        let mut embed_views = views.clone();
        for c in &cams {
            embed_views.push(CaptionedView {
                image: render_reference(&edited_scene, c, 16, 16),
                camera: *c,
                caption_tokens: tgt_tokens.clone(),
            });
        }
        let space = train_embedding(&embed_views, 40, 13).unwrap();
        let schedule = make_schedule(60, 0.01, 0.05).unwrap();
        let ae = AutoEncoder::identity();
        let denoiser = {
            let mut d = Denoiser::init(19, 3, 6, 8, 12, space.d_e);
            d.frozen = true;
            d
        };
        let dataset = Dataset { scene, views };
        MiniStack { dataset, instruction, denoiser, ae, space, schedule }
    }

    #[test]
    fn zero_delta_stage1_step_is_degenerate() {
        let st = mini_stack();
        let models = Stage1Models {
            denoiser: &st.denoiser,
            ae: &st.ae,
            space: &st.space,
            schedule: &st.schedule,
        };
        let config = EditConfig { lambda_reg: 0.1, steps_per_view: 1, t_star: 6, learning_rate: 1e-2 };
        let out =
            stage1_loss(&DeltaModule::zero(12), &st.dataset, 0, &st.instruction, &models, &config, 3)
                .unwrap();
        assert!(matches!(out, StepOutcome::Degenerate));
    }

    #[test]
    fn training_reduces_loss_and_leaves_frozen_models_untouched() {
        let st = mini_stack();
        let models = Stage1Models {
            denoiser: &st.denoiser,
            ae: &st.ae,
            space: &st.space,
            schedule: &st.schedule,
        };
        let config =
            EditConfig { lambda_reg: 0.1, steps_per_view: 25, t_star: 6, learning_rate: 1e-2 };
        config.validate(&st.schedule).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let before = dir.path().join("den_before.ckpt");
        st.denoiser.save(&before).unwrap();
        let sum_before = file_checksum(&before).unwrap();
        let (delta, report) = train_delta(&st.dataset, &st.instruction, &models, &config, 41).unwrap();
        assert!(delta.frozen);
        let after = dir.path().join("den_after.ckpt");
        st.denoiser.save(&after).unwrap();
        assert_eq!(sum_before, file_checksum(&after).unwrap());
        let (head, tail) = report.smoothed_ends(10).expect("enough recorded steps");
        assert!(tail < head, "smoothed loss went {} -> {}", head, tail);
    }

    #[test]
    fn trained_delta_moves_views_along_the_text_direction() {
        let st = mini_stack();
        let models = Stage1Models {
            denoiser: &st.denoiser,
            ae: &st.ae,
            space: &st.space,
            schedule: &st.schedule,
        };
        let config =
            EditConfig { lambda_reg: 0.1, steps_per_view: 25, t_star: 6, learning_rate: 1e-2 };
        let (trained, _) = train_delta(&st.dataset, &st.instruction, &models, &config, 41).unwrap();
        let init = {
            let mut d = DeltaModule::init(41, st.denoiser.b);
            d.frozen = true;
            d
        };
        let orig: Vec<NdArray> = st.dataset.views.iter().map(|v| v.image.clone()).collect();
        let src = &st.dataset.views[0].caption_tokens;
        let tgt = edited_caption_tokens(&st.dataset.scene, &st.instruction, &st.space).unwrap();
        let edited_init =
            edit_views(&st.dataset, &st.instruction, &init, &models, &config, 8, 91).unwrap();
        let edited_trained =
            edit_views(&st.dataset, &st.instruction, &trained, &models, &config, 8, 91).unwrap();
        assert_eq!(edited_trained.images.len(), st.dataset.views.len());
        assert_eq!(edited_trained.embeddings.len(), st.dataset.views.len());
        let sim_init =
            direction_similarity(&orig, &edited_init.images, src, &tgt, &st.space).unwrap();
        let sim_trained =
            direction_similarity(&orig, &edited_trained.images, src, &tgt, &st.space).unwrap();
        assert!(
            sim_trained.mean > sim_init.mean,
            "direction similarity went {} -> {}",
            sim_init.mean,
            sim_trained.mean
        );
    }

    #[test]
    fn zero_delta_edit_views_match_plain_sampling_bitwise() {
        let st = mini_stack();
        let models = Stage1Models {
            denoiser: &st.denoiser,
            ae: &st.ae,
            space: &st.space,
            schedule: &st.schedule,
        };
        let zero = DeltaModule::zero(st.denoiser.b);
        let config = EditConfig { lambda_reg: 0.1, steps_per_view: 1, t_star: 6, learning_rate: 1e-2 };
        let edited = edit_views(&st.dataset, &st.instruction, &zero, &models, &config, 5, 17).unwrap();
        let ctx_embed = st.space.embed_tokens(&[st.instruction.tokens.clone()]).unwrap();
        for (i, z0) in st.ae.encode_images(
            &st.dataset.views.iter().map(|v| v.image.clone()).collect::<Vec<_>>(),
        )
        .unwrap()
        .iter()
        .enumerate()
        {
            let cond = Conditioning {
                image_latent: z0.clone(),
                caption_embed: Some(ctx_embed.clone()),
            };
            let view_seed = 17u64 ^ (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15);
            let plain = sample(&st.denoiser, &st.ae, &st.schedule, &cond, 5, view_seed, None).unwrap();
            assert_eq!(plain.data, edited.images[i].data, "view {}", i);
        }
    }

    #[test]
    fn checkpoint_round_trips_and_loads_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let m = DeltaModule::init(3, 12);
        let path = dir.path().join("delta.ckpt");
        m.save(&path).unwrap();
        let back = DeltaModule::load(&path).unwrap();
        assert_eq!(back.b, 12);
        assert!(back.frozen);
        for (k, v) in m.params.iter() {
            assert_eq!(v.data, back.params.get(k).data, "param {}", k);
        }
    }
}
