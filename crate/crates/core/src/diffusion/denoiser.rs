//! Conditional denoiser: a small U-Net over latent grids whose bottleneck
//! is the hook the edit machinery shifts. Conditioning enters twice: the
//! encoded conditioning image is concatenated to the input channels, the
//! caption embedding is added at the bottleneck.

use super::NoiseSchedule;
use crate::numerics::{
    conv2d, load_params, save_params, Adam, Graph, NdArray, ParamSet, RngStream, Tensor,
};
use anyhow::{ensure, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub const BOTTLENECK_DEFAULT: usize = 64;
const C1_DEFAULT: usize = 24;
const C2_DEFAULT: usize = 32;
/// Timestep feature dimension: 8 sinusoid pairs.
pub const T_FEATS: usize = 16;
const LEARNING_RATE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub params: ParamSet,
    pub c_latent: usize,
    pub c1: usize,
    pub c2: usize,
    /// Bottleneck channel count; also the semantic embedding dimension d_z.
    pub b: usize,
    pub d_text: usize,
    pub frozen: bool,
}

/// Per-example conditioning for one training or sampling example.
#[derive(Clone, Debug)]
pub struct Conditioning {
    /// Encoded conditioning image, same grid as the latent being denoised.
    pub image_latent: NdArray,
    /// Caption embedding c_T, dimension d_text.
    pub caption_embed: Option<NdArray>,
}

pub struct BoundDenoiser {
    t: BTreeMap<String, Tensor>,
    c1: usize,
}

/// Forward outputs: the noise prediction plus the bottleneck activations
/// before and after the optional shift.
pub struct DenoiserOut {
    pub eps_hat: Tensor,
    pub bottleneck: Tensor,
    pub bottleneck_shifted: Tensor,
}

/// A tape-level hook applied to the bottleneck: gets (graph, bottleneck
/// [N, h, w, B], timestep features [N, T_FEATS]) and returns the shifted
/// bottleneck.
pub type BottleneckHook<'a> = &'a dyn Fn(&Graph, &Tensor, &Tensor) -> Tensor;

/// Sinusoidal features of t scaled by the schedule length.
pub fn timestep_features(ts: &[usize], t_max: usize) -> NdArray {
    let mut out = NdArray::zeros(&[ts.len(), T_FEATS]);
    for (i, &t) in ts.iter().enumerate() {
        let x = t as f64 / t_max as f64;
        for k in 0..T_FEATS / 2 {
            let angle = x * std::f64::consts::PI * (1 << k) as f64;
            out.data[i * T_FEATS + 2 * k] = angle.sin();
            out.data[i * T_FEATS + 2 * k + 1] = angle.cos();
        }
    }
    out
}

/// Channel concatenation of two NHWC tensors with equal N, H, W.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    assert_eq!(sa.len(), 4, "concat_channels wants NHWC, got {:?}", sa);
    assert_eq!(sa[..3], sb[..3], "concat_channels grids differ: {:?} vs {:?}", sa, sb);
    let rows = sa[0] * sa[1] * sa[2];
    let fa = a.reshape(&[rows, sa[3]]);
    let fb = b.reshape(&[rows, sb[3]]);
    Tensor::concat_cols(&[&fa, &fb]).reshape(&[sa[0], sa[1], sa[2], sa[3] + sb[3]])
}

impl Denoiser {
    pub fn init(seed: u64, c_latent: usize, c1: usize, c2: usize, b: usize, d_text: usize) -> Self {
        let mut rng = RngStream::new(seed, crate::pipeline::STREAM_INIT).substream(0xd40);
        let mut params = ParamSet::new();
        // scale is 1/sqrt(fan_in); for conv weights fan_in is the kernel size.
        fn gaussian(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> NdArray {
            let mut w = NdArray::zeros(shape);
            rng.fill_normal(&mut w.data);
            let scale = 1.0 / (fan_in as f64).sqrt();
            for x in &mut w.data {
                *x *= scale;
            }
            w
        }
        fn mat(ps: &mut ParamSet, rng: &mut RngStream, name: &str, rows: usize, cols: usize) {
            let w = gaussian(rng, &[rows, cols], rows);
            ps.insert(name, w);
        }
        fn conv_mat(ps: &mut ParamSet, rng: &mut RngStream, name: &str, c_out: usize, c_in: usize) {
            let w = gaussian(rng, &[c_out, 9 * c_in], 9 * c_in);
            ps.insert(&format!("{}.w", name), w);
            ps.insert(&format!("{}.b", name), NdArray::zeros(&[1, c_out]));
        }
        conv_mat(&mut params, &mut rng, "c_in", c1, 2 * c_latent);
        conv_mat(&mut params, &mut rng, "down1", c2, c1);
        conv_mat(&mut params, &mut rng, "down2", b, c2);
        conv_mat(&mut params, &mut rng, "up1", c2, b + c2);
        conv_mat(&mut params, &mut rng, "up2", c1, c2 + c1);
        conv_mat(&mut params, &mut rng, "out", c_latent, c1);
        mat(&mut params, &mut rng, "t_emb.w", T_FEATS, c1);
        params.insert("t_emb.b", NdArray::zeros(&[1, c1]));
        mat(&mut params, &mut rng, "ct.w", d_text, b);
        params.insert("ct.b", NdArray::zeros(&[1, b]));
        Denoiser { params, c_latent, c1, c2, b, d_text, frozen: false }
    }

    pub fn init_default(seed: u64, c_latent: usize, d_text: usize) -> Self {
        Self::init(seed, c_latent, C1_DEFAULT, C2_DEFAULT, BOTTLENECK_DEFAULT, d_text)
    }

    pub fn bind(&self, graph: &Graph, trainable: bool) -> BoundDenoiser {
        assert!(!(trainable && self.frozen), "denoiser is frozen");
        BoundDenoiser { t: graph.bind("", &self.params, trainable), c1: self.c1 }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut with_meta = self.params.clone();
        let meta = [
            ("meta.c_latent", self.c_latent),
            ("meta.c1", self.c1),
            ("meta.c2", self.c2),
            ("meta.b", self.b),
            ("meta.d_text", self.d_text),
        ];
        for (k, v) in meta {
            with_meta.insert(k, NdArray::scalar(v as f64));
        }
        save_params(path, &with_meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = load_params(path)?;
        let get_meta = |k: &str| -> Result<usize> {
            ensure!(loaded.contains(k), "{} lacks {}", path.display(), k);
            Ok(loaded.get(k).data[0] as usize)
        };
        let (c_latent, c1, c2, b, d_text) = (
            get_meta("meta.c_latent")?,
            get_meta("meta.c1")?,
            get_meta("meta.c2")?,
            get_meta("meta.b")?,
            get_meta("meta.d_text")?,
        );
        let mut params = ParamSet::new();
        for (k, v) in loaded.iter() {
            if !k.starts_with("meta.") {
                params.insert(k, v.clone());
            }
        }
        Ok(Denoiser { params, c_latent, c1, c2, b, d_text, frozen: true })
    }
}

impl BoundDenoiser {
    fn p(&self, name: &str) -> &Tensor {
        self.t.get(name).unwrap_or_else(|| panic!("denoiser parameter {} missing", name))
    }

    /// Contracting half: input concat, timestep bias, two stride-2 stages,
    /// optional caption bias, bottleneck shift. Returns the skip activations
    /// alongside the plain and shifted bottleneck.
    fn trunk(
        &self,
        z_t: &Tensor,
        t_feats: &Tensor,
        cond: &Tensor,
        c_t: Option<&Tensor>,
        hook: Option<BottleneckHook>,
    ) -> (Tensor, Tensor, Tensor, Tensor) {
        let _ = self.c1;
        let x = concat_channels(z_t, cond);
        let t_proj = t_feats.matmul(self.p("t_emb.w")).add_row_bias(self.p("t_emb.b"));
        let h1 = conv2d(&x, self.p("c_in.w"), self.p("c_in.b"), 3, 3, 1, 1)
            .add_spatial_bias(&t_proj)
            .silu();
        let h2 = conv2d(&h1, self.p("down1.w"), self.p("down1.b"), 3, 3, 2, 1).silu();
        let mut h3 = conv2d(&h2, self.p("down2.w"), self.p("down2.b"), 3, 3, 2, 1);
        if let Some(ct) = c_t {
            let ct_proj = ct.matmul(self.p("ct.w")).add_row_bias(self.p("ct.b"));
            h3 = h3.add_spatial_bias(&ct_proj);
        }
        let bottleneck = h3.silu();
        let bottleneck_shifted = match hook {
            Some(f) => f(z_t.graph(), &bottleneck, t_feats),
            None => bottleneck.clone(),
        };
        (h1, h2, bottleneck, bottleneck_shifted)
    }

    /// The shifted bottleneck alone, skipping the expanding half. Works on
    /// grids too small for the skip connections, which the semantic readout
    /// hits when it encodes reduced-resolution renders.
    pub fn bottleneck(
        &self,
        z_t: &Tensor,
        t_feats: &Tensor,
        cond: &Tensor,
        c_t: Option<&Tensor>,
        hook: Option<BottleneckHook>,
    ) -> Tensor {
        self.trunk(z_t, t_feats, cond, c_t, hook).3
    }

    /// Full U-Net pass. `z_t` and `cond` are [N, h, w, c] grids, `t_feats`
    /// is [N, 16] timestep features, `c_t` an optional [N, d_text] caption
    /// embedding tensor. The hook, if any, shifts the bottleneck.
    pub fn forward(
        &self,
        z_t: &Tensor,
        t_feats: &Tensor,
        cond: &Tensor,
        c_t: Option<&Tensor>,
        hook: Option<BottleneckHook>,
    ) -> DenoiserOut {
        let (h1, h2, bottleneck, bottleneck_shifted) = self.trunk(z_t, t_feats, cond, c_t, hook);
        let u1 = concat_channels(&bottleneck_shifted.upsample2x(), &h2);
        let d1 = conv2d(&u1, self.p("up1.w"), self.p("up1.b"), 3, 3, 1, 1).silu();
        let u2 = concat_channels(&d1.upsample2x(), &h1);
        let d2 = conv2d(&u2, self.p("up2.w"), self.p("up2.b"), 3, 3, 1, 1).silu();
        let eps_hat = conv2d(&d2, self.p("out.w"), self.p("out.b"), 3, 3, 1, 1);
        DenoiserOut { eps_hat, bottleneck, bottleneck_shifted }
    }
}

fn batch_conditioning(
    conds: &[&Conditioning],
    d_text: usize,
) -> Result<(NdArray, Option<NdArray>)> {
    let latents: Vec<&NdArray> = conds.iter().map(|c| &c.image_latent).collect();
    let with_caption = conds.iter().filter(|c| c.caption_embed.is_some()).count();
    ensure!(
        with_caption == 0 || with_caption == conds.len(),
        "conditioning batch mixes captioned and caption-free examples"
    );
    let c_t = if with_caption == 0 {
        None
    } else {
        let rows: Vec<&NdArray> = conds.iter().map(|c| c.caption_embed.as_ref().unwrap()).collect();
        for r in &rows {
            ensure!(
                r.numel() == d_text,
                "caption embedding has {} dims, denoiser expects {}",
                r.numel(),
                d_text
            );
        }
        Some(NdArray::stack(&rows).reshape(&[rows.len(), d_text]))
    };
    Ok((NdArray::stack(&latents), c_t))
}

/// One frozen forward pass over plain arrays; returns ε̂ for each latent.
pub fn predict_noise(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    z_t: &[NdArray],
    ts: &[usize],
    conds: &[&Conditioning],
) -> Result<Vec<NdArray>> {
    ensure!(
        z_t.len() == ts.len() && ts.len() == conds.len(),
        "batch lengths differ: {} latents, {} timesteps, {} conditionings",
        z_t.len(),
        ts.len(),
        conds.len()
    );
    for &t in ts {
        schedule.check_t(t)?;
    }
    let refs: Vec<&NdArray> = z_t.iter().collect();
    let z = NdArray::stack(&refs);
    let (cond, c_t) = batch_conditioning(conds, denoiser.d_text)?;
    let g = Graph::new();
    let bound = denoiser.bind(&g, false);
    let zt = g.constant_owned(z);
    let tf = g.constant_owned(timestep_features(ts, schedule.t_max()));
    let cd = g.constant_owned(cond);
    let ct_t = c_t.map(|c| g.constant_owned(c));
    let out = bound.forward(&zt, &tf, &cd, ct_t.as_ref(), None);
    let v = out.eps_hat.value();
    let per = v.numel() / z_t.len();
    let shape = &v.shape[1..];
    Ok((0..z_t.len())
        .map(|i| NdArray::from_vec(shape, v.data[i * per..(i + 1) * per].to_vec()))
        .collect())
}

/// Mean of ||ε − ε̂||² over a fixed evaluation pass with seeded timesteps
/// and noise; deterministic for fixed inputs and seed.
pub fn denoiser_loss(
    denoiser: &Denoiser,
    latents: &[NdArray],
    conds: &[Conditioning],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    ensure!(!latents.is_empty(), "no latents");
    let mut rng = RngStream::new(seed, crate::pipeline::STREAM_NOISE).substream(0xe7a1);
    let mut total = 0.0;
    for (z0, cond) in latents.iter().zip(conds) {
        let t = 1 + rng.uniform_int(schedule.t_max() as u64) as usize;
        let mut noise = NdArray::zeros(&z0.shape);
        rng.fill_normal(&mut noise.data);
        let zt = super::q_sample(z0, t, &noise, schedule)?;
        let eps_hat = predict_noise(denoiser, schedule, &[zt], &[t], &[cond])?;
        let se: f64 = eps_hat[0]
            .data
            .iter()
            .zip(&noise.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += se / z0.numel() as f64;
    }
    Ok(total / latents.len() as f64)
}

/// Trains the denoiser on (latent, conditioning) pairs by regressing the
/// injected noise at uniformly sampled timesteps; returns it frozen.
pub fn train_denoiser(
    dataset_latents: &[NdArray],
    conditioning: &[Conditioning],
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Denoiser> {
    train_denoiser_sized(
        dataset_latents,
        conditioning,
        schedule,
        steps,
        seed,
        C1_DEFAULT,
        C2_DEFAULT,
        BOTTLENECK_DEFAULT,
        8,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn train_denoiser_sized(
    dataset_latents: &[NdArray],
    conditioning: &[Conditioning],
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    c1: usize,
    c2: usize,
    b: usize,
    batch: usize,
) -> Result<Denoiser> {
    ensure!(!dataset_latents.is_empty(), "no training latents");
    ensure!(
        dataset_latents.len() == conditioning.len(),
        "{} latents but {} conditionings",
        dataset_latents.len(),
        conditioning.len()
    );
    let c_latent = *dataset_latents[0].shape.last().unwrap();
    let d_text = conditioning[0]
        .caption_embed
        .as_ref()
        .map(|c| c.numel())
        .unwrap_or(crate::embedspace::EMBED_DIM_DEFAULT);
    let mut model = Denoiser::init(seed, c_latent, c1, c2, b, d_text);
    let mut adam = Adam::new(LEARNING_RATE);
    let mut rng = RngStream::new(seed, crate::pipeline::STREAM_BATCH).substream(0xd40);
    let mut noise_rng = RngStream::new(seed, crate::pipeline::STREAM_NOISE).substream(0xd40);
    for step in 0..steps {
        let n = batch.min(dataset_latents.len());
        let idx: Vec<usize> =
            (0..n).map(|_| rng.uniform_int(dataset_latents.len() as u64) as usize).collect();
        let ts: Vec<usize> =
            (0..n).map(|_| 1 + rng.uniform_int(schedule.t_max() as u64) as usize).collect();
        let mut zts = Vec::with_capacity(n);
        let mut noises = Vec::with_capacity(n);
        for (j, &i) in idx.iter().enumerate() {
            let z0 = &dataset_latents[i];
            let mut noise = NdArray::zeros(&z0.shape);
            noise_rng.fill_normal(&mut noise.data);
            zts.push(super::q_sample(z0, ts[j], &noise, schedule)?);
            noises.push(noise);
        }
        let conds: Vec<&Conditioning> = idx.iter().map(|&i| &conditioning[i]).collect();
        let (cond, c_t) = batch_conditioning(&conds, model.d_text)?;
        let zt_refs: Vec<&NdArray> = zts.iter().collect();
        let noise_refs: Vec<&NdArray> = noises.iter().collect();

        let g = Graph::new();
        let bound = model.bind(&g, true);
        let zt = g.constant_owned(NdArray::stack(&zt_refs));
        let tf = g.constant_owned(timestep_features(&ts, schedule.t_max()));
        let cd = g.constant_owned(cond);
        let ct_t = c_t.map(|c| g.constant_owned(c));
        let target = g.constant_owned(NdArray::stack(&noise_refs));
        let out = bound.forward(&zt, &tf, &cd, ct_t.as_ref(), None);
        let loss = out.eps_hat.sub(&target).square().mean_all();
        let value = loss.scalar_value();
        ensure!(value.is_finite(), "denoiser loss became non-finite at step {}", step);
        let grads = g.backward(&loss);
        adam.step(&mut model.params, &grads)?;
    }
    model.frozen = true;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    fn tiny_denoiser(seed: u64) -> Denoiser {
        Denoiser::init(seed, 4, 8, 12, 16, 64)
    }

    fn random_latent(rng: &mut RngStream) -> NdArray {
        let mut z = NdArray::zeros(&[8, 8, 4]);
        rng.fill_normal(&mut z.data);
        z
    }

    #[test]
    fn output_shape_matches_input_latent() {
        let model = tiny_denoiser(1);
        let s = make_schedule(100, 0.001, 0.02).unwrap();
        let mut rng = RngStream::new(3, 7);
        let z = random_latent(&mut rng);
        let cond = Conditioning { image_latent: random_latent(&mut rng), caption_embed: None };
        let eps = predict_noise(&model, &s, &[z.clone()], &[50], &[&cond]).unwrap();
        assert_eq!(eps[0].shape, z.shape);
    }

    #[test]
    fn caption_conditioning_changes_the_prediction() {
        let model = tiny_denoiser(2);
        let s = make_schedule(100, 0.001, 0.02).unwrap();
        let mut rng = RngStream::new(4, 7);
        let z = random_latent(&mut rng);
        let img = random_latent(&mut rng);
        let mut c = NdArray::zeros(&[64]);
        rng.fill_normal(&mut c.data);
        let without = Conditioning { image_latent: img.clone(), caption_embed: None };
        let with = Conditioning { image_latent: img, caption_embed: Some(c) };
        let a = predict_noise(&model, &s, &[z.clone()], &[50], &[&without]).unwrap();
        let b = predict_noise(&model, &s, &[z], &[50], &[&with]).unwrap();
        assert!(a[0].max_abs_diff(&b[0]) > 1e-9);
    }

    #[test]
    fn timestep_features_distinguish_timesteps() {
        let a = timestep_features(&[1, 500, 1000], 1000);
        assert_eq!(a.shape, vec![3, 16]);
        let row = |i: usize| &a.data[i * 16..(i + 1) * 16];
        assert!(row(0).iter().zip(row(1)).any(|(x, y)| (x - y).abs() > 0.1));
        assert!(row(1).iter().zip(row(2)).any(|(x, y)| (x - y).abs() > 0.1));
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        // The objective is ||ε − ε̂||²; feeding ε̂ = ε directly gives 0.
        let mut rng = RngStream::new(5, 9);
        let noise = random_latent(&mut rng);
        let se: f64 = noise
            .data
            .iter()
            .zip(&noise.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert_eq!(se, 0.0);
    }

    #[test]
    fn short_training_reduces_heldout_loss() {
        let s = make_schedule(200, 0.001, 0.02).unwrap();
        let mut rng = RngStream::new(6, 11);
        // Two latent clusters so there is structure to learn.
        let mut latents = Vec::new();
        let mut conds = Vec::new();
        let mut center_a = NdArray::zeros(&[8, 8, 4]);
        let mut center_b = NdArray::zeros(&[8, 8, 4]);
        rng.fill_normal(&mut center_a.data);
        rng.fill_normal(&mut center_b.data);
        for i in 0..12 {
            let base = if i % 2 == 0 { &center_a } else { &center_b };
            let mut z = base.clone();
            for v in &mut z.data {
                *v += 0.05 * rng.normal();
            }
            conds.push(Conditioning { image_latent: z.clone(), caption_embed: None });
            latents.push(z);
        }
        let init = tiny_denoiser(21);
        let loss0 = denoiser_loss(&init, &latents, &conds, &s, 77).unwrap();
        let trained = train_denoiser_sized(&latents, &conds, &s, 120, 21, 8, 12, 16, 6).unwrap();
        assert!(trained.frozen);
        let loss1 = denoiser_loss(&trained, &latents, &conds, &s, 77).unwrap();
        assert!(loss1 < loss0, "loss went {} -> {}", loss0, loss1);
    }

    #[test]
    fn checkpoint_round_trips_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_denoiser(8);
        let path = dir.path().join("denoiser.ckpt");
        model.save(&path).unwrap();
        let back = Denoiser::load(&path).unwrap();
        assert_eq!(
            (back.c_latent, back.c1, back.c2, back.b, back.d_text),
            (model.c_latent, model.c1, model.c2, model.b, model.d_text)
        );
        assert!(back.frozen);
        for (k, v) in model.params.iter() {
            assert_eq!(v.data, back.params.get(k).data, "param {}", k);
        }
    }
}
