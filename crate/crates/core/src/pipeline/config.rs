//! Run configuration and the on-disk layout every CLI stage agrees on.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::diffusion::{semantic_timestep, NoiseSchedule, BETA_END_DEFAULT, BETA_START_DEFAULT, BOTTLENECK_DEFAULT, T_DEFAULT};
use crate::nerf::NerfTrainConfig;
use crate::scenes::{gen_scene, EditTransform, Scene, SceneObject, Shape};

pub const VIEWS_DEFAULT: usize = 40;
pub const HOLDOUT_DEFAULT: usize = 8;
pub const DIFFUSION_RES_DEFAULT: usize = 32;
pub const NERF_RES_DEFAULT: usize = 64;
pub const AE_STEPS_DEFAULT: usize = 2000;
pub const DIFFUSION_STEPS_DEFAULT: usize = 6000;
pub const EMBED_EPOCHS_DEFAULT: usize = 80;
pub const SAMPLE_STEPS_DEFAULT: usize = 20;
pub const C1_DEFAULT: usize = 24;
pub const C2_DEFAULT: usize = 32;

/// Where the training scene comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SceneSpec {
    /// Procedurally sampled from the run seed.
    Sampled,
    /// A single red sphere, the standard recolor subject.
    Fixture,
    /// Explicit geometry given in the config file.
    Explicit { scene: Scene },
}

impl SceneSpec {
    pub fn build(&self, seed: u64) -> Scene {
        match self {
            SceneSpec::Sampled => gen_scene(seed),
            SceneSpec::Fixture => fixture_scene(),
            SceneSpec::Explicit { scene } => scene.clone(),
        }
    }
}

/// The recolor fixture: one red sphere filling most of the unit ball.
pub fn fixture_scene() -> Scene {
    Scene {
        objects: vec![SceneObject {
            shape: Shape::Sphere,
            center: [0.0, 0.0, 0.0],
            size: 0.5,
            albedo: [0.85, 0.10, 0.10],
        }],
    }
}

/// Everything a run needs, serializable so a run directory is self-describing.
/// Every field has a default, so a config file only has to name what it
/// changes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scene: SceneSpec,
    /// The edit applied to object indices of `scene`.
    pub edit: EditTransform,
    /// Training views rendered for the dataset.
    pub views: usize,
    /// Held-out cameras used only for evaluation renders.
    pub holdout: usize,
    /// Side length of dataset views and edited samples.
    pub diffusion_res: usize,
    /// Side length of evaluation renders from the radiance field.
    pub nerf_res: usize,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Denoiser channel widths and bottleneck depth.
    pub c1: usize,
    pub c2: usize,
    pub bottleneck: usize,
    pub ae_steps: usize,
    pub ae_batch: usize,
    pub diffusion_steps: usize,
    pub diffusion_batch: usize,
    pub embed_epochs: usize,
    /// Zero skips Stage-1 training entirely and keeps the all-zero shift, so
    /// edited views are plain samples from the frozen prior.
    pub delta_steps_per_view: usize,
    pub delta_learning_rate: f64,
    pub lambda_reg: f64,
    /// Semantic readout timestep; derived from the schedule when absent.
    pub t_star: Option<usize>,
    /// Respaced reverse steps when sampling edited views.
    pub sample_steps: usize,
    pub nerf: NerfTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            scene: SceneSpec::Fixture,
            edit: EditTransform::Recolor { object: 0, albedo: [0.12, 0.18, 0.88] },
            views: VIEWS_DEFAULT,
            holdout: HOLDOUT_DEFAULT,
            diffusion_res: DIFFUSION_RES_DEFAULT,
            nerf_res: NERF_RES_DEFAULT,
            t_max: T_DEFAULT,
            beta_start: BETA_START_DEFAULT,
            beta_end: BETA_END_DEFAULT,
            c1: C1_DEFAULT,
            c2: C2_DEFAULT,
            bottleneck: BOTTLENECK_DEFAULT,
            ae_steps: AE_STEPS_DEFAULT,
            ae_batch: 8,
            diffusion_steps: DIFFUSION_STEPS_DEFAULT,
            diffusion_batch: 8,
            embed_epochs: EMBED_EPOCHS_DEFAULT,
            delta_steps_per_view: crate::delta::STEPS_PER_VIEW_DEFAULT,
            delta_learning_rate: crate::delta::DELTA_LEARNING_RATE_DEFAULT,
            lambda_reg: crate::delta::LAMBDA_REG_DEFAULT,
            t_star: None,
            sample_steps: SAMPLE_STEPS_DEFAULT,
            nerf: NerfTrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file and validates it. The file may set any subset of
    /// fields; the rest keep their defaults.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing config file {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.views >= 4, "views must be at least 4, got {}", self.views);
        ensure!(self.holdout >= 4, "holdout must be at least 4, got {}", self.holdout);
        ensure!(
            self.diffusion_res >= 8 && self.diffusion_res % 4 == 0,
            "diffusion_res must be a multiple of 4 and at least 8, got {}",
            self.diffusion_res
        );
        ensure!(self.nerf_res >= 8, "nerf_res must be at least 8, got {}", self.nerf_res);
        ensure!(self.t_max >= 2, "t_max must be at least 2, got {}", self.t_max);
        ensure!(
            self.beta_start > 0.0 && self.beta_start < 1.0,
            "beta_start must lie in (0, 1), got {}",
            self.beta_start
        );
        ensure!(
            self.beta_end >= self.beta_start && self.beta_end < 1.0,
            "beta_end must lie in [beta_start, 1), got {}",
            self.beta_end
        );
        ensure!(self.c1 >= 1, "c1 must be positive");
        ensure!(self.c2 >= 1, "c2 must be positive");
        ensure!(self.bottleneck >= 1, "bottleneck must be positive");
        ensure!(self.ae_batch >= 1, "ae_batch must be positive");
        ensure!(self.diffusion_batch >= 1, "diffusion_batch must be positive");
        ensure!(
            self.delta_learning_rate > 0.0,
            "delta_learning_rate must be positive, got {}",
            self.delta_learning_rate
        );
        ensure!(self.lambda_reg >= 0.0, "lambda_reg must be non-negative, got {}", self.lambda_reg);
        if let Some(t) = self.t_star {
            ensure!(
                t >= 1 && t <= self.t_max,
                "t_star must lie in [1, t_max], got {} with t_max {}",
                t,
                self.t_max
            );
        }
        ensure!(self.sample_steps >= 1, "sample_steps must be at least 1");
        self.nerf.validate().context("nerf")?;
        let object = match self.edit {
            EditTransform::Recolor { object, .. } => object,
            EditTransform::Remove { object } => object,
            EditTransform::Enlarge { object, .. } => object,
        };
        if let SceneSpec::Explicit { scene } = &self.scene {
            ensure!(
                object < scene.objects.len(),
                "edit object index {} out of range for a scene of {} objects",
                object,
                scene.objects.len()
            );
        }
        if matches!(self.scene, SceneSpec::Fixture) {
            ensure!(object == 0, "edit object index {} out of range for the fixture scene", object);
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        crate::diffusion::make_schedule(self.t_max, self.beta_start, self.beta_end)
    }

    /// The semantic readout timestep, explicit or derived.
    pub fn resolve_t_star(&self, schedule: &NoiseSchedule) -> usize {
        self.t_star.unwrap_or_else(|| semantic_timestep(schedule))
    }

    pub fn run_dir(&self) -> RunDir {
        RunDir { root: self.out_dir.clone() }
    }
}

/// Path arithmetic for one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn ae(&self) -> PathBuf {
        self.checkpoints().join("ae.ckpt")
    }
    pub fn denoiser(&self) -> PathBuf {
        self.checkpoints().join("denoiser.ckpt")
    }
    pub fn embedding(&self) -> PathBuf {
        self.checkpoints().join("embedding.ckpt")
    }
    pub fn vocab(&self) -> PathBuf {
        self.checkpoints().join("vocab.json")
    }
    pub fn delta(&self) -> PathBuf {
        self.checkpoints().join("delta.ckpt")
    }
    pub fn nerf(&self) -> PathBuf {
        self.checkpoints().join("nerf.ckpt")
    }
    pub fn dataset_orig(&self) -> PathBuf {
        self.root.join("datasets").join("orig")
    }
    pub fn dataset_edited(&self) -> PathBuf {
        self.root.join("datasets").join("edited")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.dataset_edited().join("embeddings.json")
    }
    pub fn provenance(&self) -> PathBuf {
        self.dataset_edited().join("provenance.json")
    }
    pub fn stage1_report(&self) -> PathBuf {
        self.checkpoints().join("stage1_report.json")
    }
    pub fn stage2_report(&self) -> PathBuf {
        self.checkpoints().join("stage2_report.json")
    }
    pub fn renders(&self, kind: &str) -> PathBuf {
        self.root.join("renders").join(kind)
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    /// Run id used to key CSV rows: the directory's base name.
    pub fn id(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string())
    }
    pub fn ensure_layout(&self) -> Result<()> {
        for dir in [
            self.root.clone(),
            self.checkpoints(),
            self.root.join("datasets"),
            self.root.join("renders"),
        ] {
            fs::create_dir_all(&dir)
                .with_context(|| format!("creating run directory {}", dir.display()))?;
        }
        Ok(())
    }
}

/// A checkpoint read that names what is missing, so a stage run out of order
/// fails with the file it wanted.
pub fn require_file(path: &Path, produced_by: &str) -> Result<()> {
    ensure!(
        path.is_file(),
        "missing {} (expected from `{}`)",
        path.display(),
        produced_by
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_config_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"seed": 11, "views": 6}"#).unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.seed, 11);
        assert_eq!(config.views, 6);
        assert_eq!(config.t_max, T_DEFAULT);
        assert_eq!(config.diffusion_res, DIFFUSION_RES_DEFAULT);
    }

    #[test]
    fn unknown_field_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"sede": 11}"#).unwrap();
        let err = format!("{:#}", RunConfig::load(&path).unwrap_err());
        assert!(err.contains("sede"), "{}", err);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut config = RunConfig::default();
        config.beta_start = 0.0;
        let err = format!("{:#}", config.validate().unwrap_err());
        assert!(err.contains("beta_start"), "{}", err);

        let mut config = RunConfig::default();
        config.diffusion_res = 10;
        let err = format!("{:#}", config.validate().unwrap_err());
        assert!(err.contains("diffusion_res"), "{}", err);

        let mut config = RunConfig::default();
        config.edit = EditTransform::Remove { object: 3 };
        let err = format!("{:#}", config.validate().unwrap_err());
        assert!(err.contains("object index 3"), "{}", err);
    }

    #[test]
    fn config_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut config = RunConfig::default();
        config.t_star = Some(42);
        config.scene = SceneSpec::Sampled;
        config.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.t_star, Some(42));
        assert_eq!(back.scene, SceneSpec::Sampled);
        assert_eq!(back.nerf.steps, config.nerf.steps);
    }

    #[test]
    fn fixture_scene_is_a_single_sphere() {
        let scene = fixture_scene();
        assert_eq!(scene.objects.len(), 1);
        assert_eq!(scene.objects[0].shape, Shape::Sphere);
    }
}
