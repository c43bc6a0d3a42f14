//! Stage drivers behind the CLI. Each one reads its inputs from the run
//! directory and writes its outputs back, so any stage can be rerun in
//! isolation and a run directory is a complete record of the experiment.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};

use super::config::{require_file, RunConfig};
use crate::delta::{
    edit_views, edited_caption_tokens, train_delta, DeltaModule, EditConfig, Stage1Models,
    Stage1Report,
};
use crate::diffusion::{
    train_autoencoder, train_denoiser_sized, AutoEncoder, Conditioning, Denoiser,
};
use crate::embedspace::{train_embedding, EmbeddingSpace, Vocab};
use crate::nerf::{mean_embedding, render_view, train_nerf, RadianceField, Stage2Context};
use crate::numerics::{file_checksum, NdArray};
use crate::scenes::{
    apply_edit_oracle, edit_caption_words, load_dataset, render_reference, sample_cameras,
    save_dataset, save_ppm, scene_caption_words, Camera, CaptionedView, Dataset, EditInstruction,
    EditTransform,
};

/// One camera draw covers the whole run: the first `views` cameras render the
/// training data, the rest form the held-out evaluation orbit.
fn camera_split(config: &RunConfig) -> (Vec<Camera>, Vec<Camera>) {
    let mut all = sample_cameras(config.seed, config.views + config.holdout);
    let held = all.split_off(config.views);
    (all, held)
}

pub fn holdout_cameras(config: &RunConfig) -> Vec<Camera> {
    camera_split(config).1
}

pub fn render_name(i: usize) -> String {
    format!("view_{:03}.ppm", i)
}

/// Loss trace summary each training stage leaves behind for evaluation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StageLoss {
    pub steps: usize,
    pub degenerate: usize,
    /// Mean loss over the first and last few recorded steps; zero when the
    /// stage recorded nothing.
    pub loss_head: f64,
    pub loss_tail: f64,
}

impl StageLoss {
    fn from_losses(losses: &[f64], degenerate: usize) -> StageLoss {
        if losses.is_empty() {
            return StageLoss { steps: 0, degenerate, loss_head: 0.0, loss_tail: 0.0 };
        }
        let w = (losses.len() / 2).clamp(1, 10);
        let head = losses[..w].iter().sum::<f64>() / w as f64;
        let tail = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
        StageLoss { steps: losses.len(), degenerate, loss_head: head, loss_tail: tail }
    }

    pub fn read(path: &Path) -> Result<StageLoss> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading stage report {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing stage report {}", path.display()))
    }
}

/// What produced the edited dataset, written next to it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub instruction_words: Vec<String>,
    pub transform: EditTransform,
    pub sample_steps: usize,
    pub seed: u64,
    pub delta_checksum: u64,
}

/// Renders the training views of the scene and saves the dataset.
pub fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let dir = config.run_dir();
    dir.ensure_layout()?;
    config.save(&dir.config())?;
    let scene = config.scene.build(config.seed);
    let tokens = Vocab::standard().encode(&scene_caption_words(&scene))?;
    let (train_cams, _) = camera_split(config);
    let views = train_cams
        .iter()
        .map(|cam| CaptionedView {
            image: render_reference(&scene, cam, config.diffusion_res, config.diffusion_res),
            camera: *cam,
            caption_tokens: tokens.clone(),
        })
        .collect();
    save_dataset(&dir.dataset_orig(), &Dataset { scene, views })
}

/// The frozen priors train on the source views plus oracle renders of the
/// edited scene: a stand-in for a generic prior that has seen both
/// appearances long before any particular edit is requested.
fn prior_corpus(config: &RunConfig, dataset: &Dataset) -> Result<Vec<CaptionedView>> {
    let edited_scene = apply_edit_oracle(&dataset.scene, &config.edit)?;
    let tokens = Vocab::standard().encode(&scene_caption_words(&edited_scene))?;
    let mut corpus = dataset.views.clone();
    for view in &dataset.views {
        corpus.push(CaptionedView {
            image: render_reference(
                &edited_scene,
                &view.camera,
                config.diffusion_res,
                config.diffusion_res,
            ),
            camera: view.camera,
            caption_tokens: tokens.clone(),
        });
    }
    Ok(corpus)
}

fn load_orig_dataset(config: &RunConfig) -> Result<Dataset> {
    let dir = config.run_dir();
    require_file(&dir.dataset_orig().join("manifest.json"), "gen-data")?;
    load_dataset(&dir.dataset_orig())
}

pub fn cmd_train_ae(config: &RunConfig) -> Result<()> {
    let dir = config.run_dir();
    dir.ensure_layout()?;
    let dataset = load_orig_dataset(config)?;
    let images: Vec<NdArray> =
        prior_corpus(config, &dataset)?.into_iter().map(|v| v.image).collect();
    let ae = train_autoencoder(&images, config.ae_steps, config.ae_batch, config.seed)?;
    ae.save(&dir.ae())
}

pub fn cmd_train_embed(config: &RunConfig) -> Result<()> {
    let dir = config.run_dir();
    dir.ensure_layout()?;
    let dataset = load_orig_dataset(config)?;
    let corpus = prior_corpus(config, &dataset)?;
    let space = train_embedding(&corpus, config.embed_epochs, config.seed)?;
    space.save(&dir.embedding(), &dir.vocab())
}

fn embed_row(embeds: &NdArray, i: usize) -> NdArray {
    let d = embeds.shape[1];
    NdArray::from_vec(&[1, d], embeds.data[i * d..(i + 1) * d].to_vec())
}

pub fn cmd_train_diffusion(config: &RunConfig) -> Result<()> {
    let dir = config.run_dir();
    dir.ensure_layout()?;
    require_file(&dir.ae(), "train-ae")?;
    require_file(&dir.embedding(), "train-embed")?;
    let ae = AutoEncoder::load(&dir.ae())?;
    let space = EmbeddingSpace::load(&dir.embedding(), &dir.vocab())?;
    let dataset = load_orig_dataset(config)?;
    let corpus = prior_corpus(config, &dataset)?;
    let images: Vec<NdArray> = corpus.iter().map(|v| v.image.clone()).collect();
    let latents = ae.encode_images(&images)?;
    let seqs: Vec<Vec<usize>> = corpus.iter().map(|v| v.caption_tokens.clone()).collect();
    let caption_embeds = space.embed_tokens(&seqs)?;
    let conds: Vec<Conditioning> = latents
        .iter()
        .enumerate()
        .map(|(i, z)| Conditioning {
            image_latent: z.clone(),
            caption_embed: Some(embed_row(&caption_embeds, i)),
        })
        .collect();
    let schedule = config.schedule()?;
    let denoiser = train_denoiser_sized(
        &latents,
        &conds,
        &schedule,
        config.diffusion_steps,
        config.seed,
        config.c1,
        config.c2,
        config.bottleneck,
        config.diffusion_batch,
    )?;
    denoiser.save(&dir.denoiser())
}

fn instruction_for(config: &RunConfig, space: &EmbeddingSpace) -> Result<EditInstruction> {
    Ok(EditInstruction {
        tokens: space.vocab.encode(&edit_caption_words(&config.edit))?,
        transform: config.edit.clone(),
    })
}

/// Stage 1: trains the bottleneck shift against the frozen stack, then
/// samples one edited image per view and saves them as the edited dataset.
pub fn cmd_train_delta(config: &RunConfig) -> Result<()> {
    let dir = config.run_dir();
    dir.ensure_layout()?;
    require_file(&dir.ae(), "train-ae")?;
    require_file(&dir.denoiser(), "train-diffusion")?;
    require_file(&dir.embedding(), "train-embed")?;
    let ae = AutoEncoder::load(&dir.ae())?;
    let denoiser = Denoiser::load(&dir.denoiser())?;
    let space = EmbeddingSpace::load(&dir.embedding(), &dir.vocab())?;
    let dataset = load_orig_dataset(config)?;
    let schedule = config.schedule()?;
    let instruction = instruction_for(config, &space)?;
    let models =
        Stage1Models { denoiser: &denoiser, ae: &ae, space: &space, schedule: &schedule };
    let edit_config = EditConfig {
        lambda_reg: config.lambda_reg,
        steps_per_view: config.delta_steps_per_view.max(1),
        t_star: config.resolve_t_star(&schedule),
        learning_rate: config.delta_learning_rate,
    };
    let (delta, report) = if config.delta_steps_per_view == 0 {
        (DeltaModule::zero(denoiser.b), Stage1Report::default())
    } else {
        train_delta(&dataset, &instruction, &models, &edit_config, config.seed)?
    };
    delta.save(&dir.delta())?;
    StageLoss::from_losses(&report.losses, report.degenerate_steps).write(&dir.stage1_report())?;

    let edited = edit_views(
        &dataset,
        &instruction,
        &delta,
        &models,
        &edit_config,
        config.sample_steps,
        config.seed,
    )?;
    let edited_scene = apply_edit_oracle(&dataset.scene, &config.edit)?;
    let tokens = edited_caption_tokens(&dataset.scene, &instruction, &space)?;
    let views: Vec<CaptionedView> = edited
        .images
        .iter()
        .zip(&dataset.views)
        .map(|(image, v)| CaptionedView {
            image: image.clone(),
            camera: v.camera,
            caption_tokens: tokens.clone(),
        })
        .collect();
    save_dataset(&dir.dataset_edited(), &Dataset { scene: edited_scene, views })?;
    let z: Vec<Vec<f64>> = edited.embeddings.iter().map(|e| e.data.clone()).collect();
    fs::write(&dir.embeddings(), serde_json::to_string(&z)?)
        .with_context(|| format!("writing {}", dir.embeddings().display()))?;
    let provenance = Provenance {
        instruction_words: edit_caption_words(&config.edit).iter().map(|w| w.to_string()).collect(),
        transform: config.edit.clone(),
        sample_steps: config.sample_steps,
        seed: config.seed,
        delta_checksum: file_checksum(&dir.delta())?,
    };
    fs::write(&dir.provenance(), serde_json::to_string_pretty(&provenance)?)
        .with_context(|| format!("writing {}", dir.provenance().display()))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<NdArray>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading embeddings {}", path.display()))?;
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(!rows.is_empty(), "embeddings file {} is empty", path.display());
    Ok(rows.into_iter().map(|r| { let d = r.len(); NdArray::from_vec(&[d], r) }).collect())
}

/// Stage 2: fits the latent-conditioned radiance field to the edited views
/// and renders the held-out orbit, leaving the shift checkpoint untouched.
pub fn cmd_train_nerf(config: &RunConfig) -> Result<()> {
    let dir = config.run_dir();
    dir.ensure_layout()?;
    require_file(&dir.delta(), "train-delta")?;
    require_file(&dir.dataset_edited().join("manifest.json"), "train-delta")?;
    require_file(&dir.embeddings(), "train-delta")?;
    require_file(&dir.ae(), "train-ae")?;
    require_file(&dir.denoiser(), "train-diffusion")?;
    let checksum_before = file_checksum(&dir.delta())?;
    let edited = load_dataset(&dir.dataset_edited())?;
    let embeddings = read_embeddings(&dir.embeddings())?;
    let delta = DeltaModule::load(&dir.delta())?;
    let ae = AutoEncoder::load(&dir.ae())?;
    let denoiser = Denoiser::load(&dir.denoiser())?;
    let schedule = config.schedule()?;
    let ctx = Stage2Context {
        denoiser: &denoiser,
        ae: &ae,
        schedule: &schedule,
        delta: &delta,
        t_star: config.resolve_t_star(&schedule),
    };
    let use_consistency = config.nerf.weights.lambda_c > 0.0;
    let (field, report) =
        train_nerf(&edited.views, &embeddings, &config.nerf, use_consistency.then_some(&ctx), config.seed)?;
    field.save(&dir.nerf())?;
    let losses: Vec<f64> = report.steps.iter().map(|s| s.total).collect();
    StageLoss::from_losses(&losses, 0).write(&dir.stage2_report())?;
    render_outputs(config, &field, &embeddings)?;
    ensure!(
        file_checksum(&dir.delta())? == checksum_before,
        "stage 2 modified the shift checkpoint"
    );
    Ok(())
}

/// Renders the held-out orbit three ways: analytic source scene, analytic
/// oracle-edited scene, and the trained field under the mean edit embedding.
fn render_outputs(config: &RunConfig, field: &RadianceField, embeddings: &[NdArray]) -> Result<()> {
    let dir = config.run_dir();
    let orig = load_orig_dataset(config)?;
    let edited_scene = apply_edit_oracle(&orig.scene, &config.edit)?;
    let z = mean_embedding(embeddings)?;
    let res = config.nerf_res;
    for kind in ["orig", "oracle", "edited"] {
        fs::create_dir_all(dir.renders(kind))
            .with_context(|| format!("creating render dir {}", dir.renders(kind).display()))?;
    }
    for (k, cam) in holdout_cameras(config).iter().enumerate() {
        let name = render_name(k);
        save_ppm(&dir.renders("orig").join(&name), &render_reference(&orig.scene, cam, res, res))?;
        save_ppm(
            &dir.renders("oracle").join(&name),
            &render_reference(&edited_scene, cam, res, res),
        )?;
        let image = render_view(field, cam, &z.data, res, res, &config.nerf.rays, config.seed)?;
        save_ppm(&dir.renders("edited").join(&name), &image)?;
    }
    Ok(())
}

/// Re-renders all evaluation outputs from saved checkpoints.
pub fn cmd_render(config: &RunConfig) -> Result<()> {
    let dir = config.run_dir();
    require_file(&dir.nerf(), "train-nerf")?;
    require_file(&dir.embeddings(), "train-delta")?;
    let field = RadianceField::load(&dir.nerf())?;
    let embeddings = read_embeddings(&dir.embeddings())?;
    render_outputs(config, &field, &embeddings)
}
