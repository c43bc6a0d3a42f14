//! Run evaluation: directional metrics, distribution distances, and the
//! CSV rows the CLI reports.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{ensure, Context, Result};

use super::config::{require_file, RunConfig};
use super::stages::{render_name, StageLoss};
use crate::delta::DeltaModule;
use crate::diffusion::{encode_semantic, psnr, AutoEncoder, Denoiser};
use crate::embedspace::{
    direction_consistency, direction_similarity, frechet_distance, EmbeddingSpace, DIRECTION_EPS,
};
use crate::numerics::{Graph, NdArray, Tensor};
use crate::scenes::{apply_edit_oracle, load_dataset, load_ppm, scene_caption_words};

/// One evaluated run, one CSV row.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub run_id: String,
    pub seed: u64,
    pub direction_similarity: f64,
    pub direction_consistency: f64,
    pub degenerate_directions: usize,
    pub frechet_before: f64,
    pub frechet_after: f64,
    pub psnr_vs_oracle: f64,
    /// Mean per-dimension standard deviation of the edited renders' semantic
    /// embeddings across views; the multi-view consistency measure.
    pub embedding_std: f64,
    pub stage1_loss: f64,
    pub stage2_loss: f64,
}

pub const METRICS_HEADER: &str = "run_id,seed,direction_similarity,direction_consistency,\
degenerate_directions,frechet_before,frechet_after,psnr_vs_oracle,embedding_std,\
stage1_loss,stage2_loss";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.direction_similarity,
            self.direction_consistency,
            self.degenerate_directions,
            self.frechet_before,
            self.frechet_after,
            self.psnr_vs_oracle,
            self.embedding_std,
            self.stage1_loss,
            self.stage2_loss
        )
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, v) in [
            ("direction_similarity", self.direction_similarity),
            ("direction_consistency", self.direction_consistency),
            ("frechet_before", self.frechet_before),
            ("frechet_after", self.frechet_after),
            ("psnr_vs_oracle", self.psnr_vs_oracle),
            ("embedding_std", self.embedding_std),
            ("stage1_loss", self.stage1_loss),
            ("stage2_loss", self.stage2_loss),
        ] {
            ensure!(v.is_finite(), "metric {} is not finite: {}", name, v);
        }
        Ok(())
    }

    /// Appends this row to `path`, writing the header first when the file is
    /// new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        if !path.exists() {
            out.push_str(METRICS_HEADER);
            out.push('\n');
        }
        out.push_str(&self.csv_row());
        out.push('\n');
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening metrics file {}", path.display()))?;
        f.write_all(out.as_bytes())
            .with_context(|| format!("appending to metrics file {}", path.display()))
    }
}

/// Channel-mean feature rows for the distribution distance: three numbers
/// per image keep the Gaussian fit well-posed at desk-scale view counts.
pub fn channel_mean_features(images: &[NdArray]) -> Result<NdArray> {
    ensure!(!images.is_empty(), "no images to featurize");
    let mut data = Vec::with_capacity(images.len() * 3);
    for image in images {
        ensure!(
            image.shape.len() == 3 && image.shape[2] == 3,
            "features want [H, W, 3] images, got {:?}",
            image.shape
        );
        let mut sums = [0.0f64; 3];
        for px in image.data.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c];
            }
        }
        let n = (image.numel() / 3) as f64;
        data.extend(sums.iter().map(|s| s / n));
    }
    Ok(NdArray::from_vec(&[images.len(), 3], data))
}

fn load_renders(dir: &Path, count: usize, produced_by: &str) -> Result<Vec<NdArray>> {
    (0..count)
        .map(|k| {
            let path = dir.join(render_name(k));
            require_file(&path, produced_by)?;
            load_ppm(&path)
        })
        .collect()
}

fn embedding_rows_distance(a: &NdArray, b: &NdArray, i: usize) -> f64 {
    let d = a.shape[1];
    a.data[i * d..(i + 1) * d]
        .iter()
        .zip(&b.data[i * d..(i + 1) * d])
        .map(|(x, y)| (y - x) * (y - x))
        .sum::<f64>()
        .sqrt()
}

/// Mean per-dimension standard deviation across embedding vectors.
pub fn cross_view_std(embeddings: &[NdArray]) -> Result<f64> {
    ensure!(embeddings.len() >= 2, "cross-view std needs at least 2 embeddings");
    let d = embeddings[0].numel();
    let n = embeddings.len() as f64;
    let mut acc = 0.0;
    for k in 0..d {
        let mean = embeddings.iter().map(|e| e.data[k]).sum::<f64>() / n;
        let var = embeddings.iter().map(|e| (e.data[k] - mean).powi(2)).sum::<f64>() / n;
        acc += var.sqrt();
    }
    Ok(acc / d as f64)
}

/// Computes every metric for a finished run. Reads only files under the run
/// directory, so it can rerun standalone long after training.
pub fn evaluate(config: &RunConfig) -> Result<MetricsReport> {
    let dir = config.run_dir();
    let n = config.holdout;
    let orig_renders = load_renders(&dir.renders("orig"), n, "train-nerf")?;
    let oracle_renders = load_renders(&dir.renders("oracle"), n, "train-nerf")?;
    let edited_renders = load_renders(&dir.renders("edited"), n, "train-nerf")?;
    require_file(&dir.embedding(), "train-embed")?;
    require_file(&dir.ae(), "train-ae")?;
    require_file(&dir.denoiser(), "train-diffusion")?;
    require_file(&dir.delta(), "train-delta")?;
    require_file(&dir.dataset_orig().join("manifest.json"), "gen-data")?;
    let space = EmbeddingSpace::load(&dir.embedding(), &dir.vocab())?;
    let dataset = load_dataset(&dir.dataset_orig())?;

    let t_src = space.vocab.encode(&scene_caption_words(&dataset.scene))?;
    let edited_scene = apply_edit_oracle(&dataset.scene, &config.edit)?;
    let t_tgt = space.vocab.encode(&scene_caption_words(&edited_scene))?;

    // The direction metrics reject runs where every view moved too little to
    // define a direction, but evaluation still has to report such runs, so
    // degenerate views are counted here first with the same criterion.
    let e_orig = space.embed_images(&orig_renders)?;
    let e_edit = space.embed_images(&edited_renders)?;
    let degenerate =
        (0..n).filter(|&i| embedding_rows_distance(&e_orig, &e_edit, i) < DIRECTION_EPS).count();
    let usable = n - degenerate;
    let dir_sim = if usable == 0 {
        0.0
    } else {
        direction_similarity(&orig_renders, &edited_renders, &t_src, &t_tgt, &space)?.mean
    };
    let dir_cons = if usable < 2 {
        0.0
    } else {
        direction_consistency(&orig_renders, &edited_renders, &space)?.mean
    };

    let train_images: Vec<NdArray> = dataset.views.iter().map(|v| v.image.clone()).collect();
    let train_features = channel_mean_features(&train_images)?;
    let frechet_before = frechet_distance(&train_features, &channel_mean_features(&orig_renders)?)?;
    let frechet_after = frechet_distance(&train_features, &channel_mean_features(&edited_renders)?)?;

    let psnr_vs_oracle = (0..n)
        .map(|k| psnr(&edited_renders[k], &oracle_renders[k]))
        .sum::<f64>()
        / n as f64;

    let ae = AutoEncoder::load(&dir.ae())?;
    let denoiser = Denoiser::load(&dir.denoiser())?;
    let delta = DeltaModule::load(&dir.delta())?;
    let schedule = config.schedule()?;
    let hook = |g: &Graph, b: &Tensor, tf: &Tensor| delta.bind(g, false).apply(b, tf);
    let semantic = encode_semantic(
        &denoiser,
        &ae,
        &schedule,
        &edited_renders,
        config.resolve_t_star(&schedule),
        Some(&hook),
    )?;
    let embedding_std = cross_view_std(&semantic)?;

    let stage1 = StageLoss::read(&dir.stage1_report())?;
    let stage2 = StageLoss::read(&dir.stage2_report())?;

    let report = MetricsReport {
        run_id: dir.id(),
        seed: config.seed,
        direction_similarity: dir_sim,
        direction_consistency: dir_cons,
        degenerate_directions: degenerate,
        frechet_before,
        frechet_after,
        psnr_vs_oracle,
        embedding_std,
        stage1_loss: stage1.loss_tail,
        stage2_loss: stage2.loss_tail,
    };
    report.assert_finite()?;
    Ok(report)
}

/// Evaluates and appends the row to the run's metrics file.
pub fn cmd_eval(config: &RunConfig) -> Result<MetricsReport> {
    let report = evaluate(config)?;
    report.append_csv(&config.run_dir().metrics())?;
    Ok(report)
}

/// All stages in order, then evaluation.
pub fn cmd_run_all(config: &RunConfig) -> Result<MetricsReport> {
    super::stages::cmd_gen_data(config)?;
    super::stages::cmd_train_ae(config)?;
    super::stages::cmd_train_embed(config)?;
    super::stages::cmd_train_diffusion(config)?;
    super::stages::cmd_train_delta(config)?;
    super::stages::cmd_train_nerf(config)?;
    cmd_eval(config)
}

pub const ABLATION_HEADER: &str =
    "variant,seed,direction_similarity,direction_consistency,embedding_std,psnr_vs_oracle,\
frechet_after";

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to)
        .map(|_| ())
        .with_context(|| format!("copying {} to {}", from.display(), to.display()))
}

fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).with_context(|| format!("creating {}", to.display()))?;
    for entry in fs::read_dir(from).with_context(|| format!("reading {}", from.display()))? {
        let entry = entry?;
        let dest = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &dest)?;
        } else {
            copy_file(&entry.path(), &dest)?;
        }
    }
    Ok(())
}

/// Three pipeline variants under a shared seed: the full method, the method
/// without the cross-view consistency term, and the untrained all-zero shift.
/// Variants rerun only the stages their change can affect; everything
/// upstream is copied, which determinism makes bit-identical to retraining.
pub fn cmd_ablate(config: &RunConfig) -> Result<Vec<(String, MetricsReport)>> {
    let ablate_root = config.out_dir.join("ablate");
    fs::create_dir_all(&ablate_root)
        .with_context(|| format!("creating {}", ablate_root.display()))?;

    let mut full = config.clone();
    full.out_dir = ablate_root.join("full");
    let full_report = cmd_run_all(&full)?;
    let full_dir = full.run_dir();

    let mut no_c = config.clone();
    no_c.out_dir = ablate_root.join("no_consistency");
    no_c.nerf.weights.lambda_c = 0.0;
    let no_dir = no_c.run_dir();
    no_dir.ensure_layout()?;
    no_c.save(&no_dir.config())?;
    copy_tree(&full_dir.root.join("datasets"), &no_dir.root.join("datasets"))?;
    for f in ["ae.ckpt", "denoiser.ckpt", "embedding.ckpt", "vocab.json", "delta.ckpt", "stage1_report.json"] {
        copy_file(&full_dir.checkpoints().join(f), &no_dir.checkpoints().join(f))?;
    }
    super::stages::cmd_train_nerf(&no_c)?;
    let no_report = cmd_eval(&no_c)?;

    let mut zero = config.clone();
    zero.out_dir = ablate_root.join("zero_delta");
    zero.delta_steps_per_view = 0;
    let zero_dir = zero.run_dir();
    zero_dir.ensure_layout()?;
    zero.save(&zero_dir.config())?;
    copy_tree(&full_dir.dataset_orig(), &zero_dir.dataset_orig())?;
    for f in ["ae.ckpt", "denoiser.ckpt", "embedding.ckpt", "vocab.json"] {
        copy_file(&full_dir.checkpoints().join(f), &zero_dir.checkpoints().join(f))?;
    }
    super::stages::cmd_train_delta(&zero)?;
    super::stages::cmd_train_nerf(&zero)?;
    let zero_report = cmd_eval(&zero)?;

    let rows = vec![
        ("full".to_string(), full_report),
        ("no_consistency".to_string(), no_report),
        ("zero_delta".to_string(), zero_report),
    ];
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for (name, r) in &rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name,
            r.seed,
            r.direction_similarity,
            r.direction_consistency,
            r.embedding_std,
            r.psnr_vs_oracle,
            r.frechet_after
        ));
    }
    let path = ablate_root.join("ablation.csv");
    fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_means_match_hand_values() {
        let image = NdArray::from_vec(
            &[1, 2, 3],
            vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0],
        );
        let f = channel_mean_features(&[image]).unwrap();
        assert_eq!(f.shape, vec![1, 3]);
        assert_eq!(f.data, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn cross_view_std_matches_hand_values() {
        let a = NdArray::from_vec(&[2], vec![0.0, 1.0]);
        let b = NdArray::from_vec(&[2], vec![2.0, 1.0]);
        // Dim 0: mean 1, var 1, std 1. Dim 1: std 0. Mean 0.5.
        let s = cross_view_std(&[a, b]).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_row_field_count_matches_header() {
        let report = MetricsReport {
            run_id: "r".into(),
            seed: 1,
            direction_similarity: 0.0,
            direction_consistency: 0.0,
            degenerate_directions: 0,
            frechet_before: 0.0,
            frechet_after: 0.0,
            psnr_vs_oracle: 0.0,
            embedding_std: 0.0,
            stage1_loss: 0.0,
            stage2_loss: 0.0,
        };
        assert_eq!(
            report.csv_row().split(',').count(),
            METRICS_HEADER.split(',').count()
        );
    }
}
