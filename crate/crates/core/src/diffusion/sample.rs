//! Ancestral sampling over a respaced timestep ladder, plus the semantic
//! readout that turns an image into the denoiser's bottleneck summary.

use super::{timestep_features, AutoEncoder, BottleneckHook, Conditioning, Denoiser, NoiseSchedule};
use crate::numerics::{Graph, NdArray, RngStream, Tensor};
use anyhow::{ensure, Result};

/// Substream id for the sampler's own noise draws; fixed so a run can be
/// reproduced from (seed, conditioning) alone.
pub const SAMPLE_NOISE_SUBSTREAM: u64 = 0x5a11;
/// The semantic readout perturbs the clean latent to this fraction of the
/// schedule before reading the bottleneck.
pub const SEMANTIC_T_DIVISOR: usize = 10;

/// Mean of the reverse-step distribution given the current latent and the
/// predicted noise. `alpha` and `beta` are the per-step coefficients (for a
/// respaced ladder, the effective ones), `alpha_bar` the cumulative product
/// at the current timestep.
pub fn posterior_mean(z_t: &NdArray, eps_hat: &NdArray, alpha: f64, beta: f64, alpha_bar: f64) -> NdArray {
    assert_eq!(z_t.shape, eps_hat.shape, "latent and noise prediction shapes differ");
    let c = beta / (1.0 - alpha_bar).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let data = z_t.data.iter().zip(&eps_hat.data).map(|(z, e)| inv * (z - c * e)).collect();
    NdArray::from_vec(&z_t.shape, data)
}

/// Inverts the forward perturbation: x̂_0 = (z_t − √(1−ᾱ)·ε̂)/√ᾱ.
pub fn predict_x0(z_t: &NdArray, eps_hat: &NdArray, alpha_bar: f64) -> NdArray {
    assert_eq!(z_t.shape, eps_hat.shape, "latent and noise prediction shapes differ");
    let (s0, s1) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z_t.data.iter().zip(&eps_hat.data).map(|(z, e)| (z - s1 * e) / s0).collect();
    NdArray::from_vec(&z_t.shape, data)
}

/// Runs the reverse process from pure noise down a respaced ladder and
/// returns the final latent. The ladder has `steps` rungs ending at the
/// schedule's top; each rung uses the effective step coefficients between
/// neighbouring rungs and adds fresh noise except at the last.
pub fn sample_latent(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    steps: usize,
    seed: u64,
    hook: Option<BottleneckHook>,
) -> Result<NdArray> {
    let shape = cond.image_latent.shape.clone();
    ensure!(
        shape.len() == 3 && shape[2] == denoiser.c_latent,
        "conditioning latent shape {:?} does not match denoiser channels {}",
        shape,
        denoiser.c_latent
    );
    let ladder = schedule.respaced_timesteps(steps)?;
    let mut rng = RngStream::new(seed, crate::pipeline::STREAM_NOISE).substream(SAMPLE_NOISE_SUBSTREAM);
    let mut z = NdArray::zeros(&shape);
    rng.fill_normal(&mut z.data);
    for k in (0..ladder.len()).rev() {
        let t = ladder[k];
        let t_prev = if k == 0 { 0 } else { ladder[k - 1] };
        let alpha_eff = schedule.alpha_bar(t) / schedule.alpha_bar0(t_prev);
        let beta_eff = 1.0 - alpha_eff;
        let eps_hat = forward_frozen(denoiser, schedule, &z, t, cond, hook)?;
        z = posterior_mean(&z, &eps_hat, alpha_eff, beta_eff, schedule.alpha_bar(t));
        if k > 0 {
            let sigma = beta_eff.sqrt();
            for v in &mut z.data {
                *v += sigma * rng.normal();
            }
        }
    }
    Ok(z)
}

/// Full generation: reverse process in latent space, then decode to pixels.
pub fn sample(
    denoiser: &Denoiser,
    ae: &AutoEncoder,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    steps: usize,
    seed: u64,
    hook: Option<BottleneckHook>,
) -> Result<NdArray> {
    let z = sample_latent(denoiser, schedule, cond, steps, seed, hook)?;
    Ok(ae.decode_latents(&[z])?.remove(0))
}

fn forward_frozen(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    z_t: &NdArray,
    t: usize,
    cond: &Conditioning,
    hook: Option<BottleneckHook>,
) -> Result<NdArray> {
    let g = Graph::new();
    let bound = denoiser.bind(&g, false);
    let n = 1;
    let zt = g.constant_owned(NdArray::stack(&[z_t]));
    let tf = g.constant_owned(timestep_features(&[t], schedule.t_max()));
    let cd = g.constant_owned(NdArray::stack(&[&cond.image_latent]));
    let ct = match &cond.caption_embed {
        Some(c) => {
            ensure!(
                c.numel() == denoiser.d_text,
                "caption embedding has {} dims, denoiser expects {}",
                c.numel(),
                denoiser.d_text
            );
            Some(g.constant_owned(c.clone().reshape(&[n, denoiser.d_text])))
        }
        None => None,
    };
    let out = bound.forward(&zt, &tf, &cd, ct.as_ref(), hook);
    let v = out.eps_hat.value();
    Ok(NdArray::from_vec(&v.shape[1..], v.data))
}

/// The timestep at which the semantic readout perturbs the clean latent.
pub fn semantic_timestep(schedule: &NoiseSchedule) -> usize {
    (schedule.t_max() / SEMANTIC_T_DIVISOR).max(1)
}

/// Tape-level semantic readout. Encodes images, scales them to the readout
/// timestep `t_star` with zero injected noise, runs the denoiser conditioned
/// on the clean latent itself with no caption, and averages the bottleneck
/// over space. Differentiable with respect to `images`.
pub fn encode_semantic_on_tape(
    g: &Graph,
    denoiser: &Denoiser,
    ae: &AutoEncoder,
    schedule: &NoiseSchedule,
    images: &Tensor,
    t_star: usize,
    hook: Option<BottleneckHook>,
) -> Tensor {
    let n = images.shape()[0];
    let bound_ae = ae.bind(g, false);
    let bound_den = denoiser.bind(g, false);
    let z0 = bound_ae.encode(images);
    let zt = z0.scale(schedule.alpha_bar(t_star).sqrt());
    let tf = g.constant_owned(timestep_features(&vec![t_star; n], schedule.t_max()));
    bound_den.bottleneck(&zt, &tf, &z0, None, hook).mean_spatial()
}

/// Plain-array semantic readout; one embedding of length `denoiser.b` per
/// image.
pub fn encode_semantic(
    denoiser: &Denoiser,
    ae: &AutoEncoder,
    schedule: &NoiseSchedule,
    images: &[NdArray],
    t_star: usize,
    hook: Option<BottleneckHook>,
) -> Result<Vec<NdArray>> {
    ensure!(!images.is_empty(), "no images to encode");
    schedule.check_t(t_star)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let refs: Vec<&NdArray> = chunk.iter().collect();
        let g = Graph::new();
        let imgs = g.constant_owned(NdArray::stack(&refs));
        let e = encode_semantic_on_tape(&g, denoiser, ae, schedule, &imgs, t_star, hook);
        let v = e.value();
        let d = v.shape[1];
        for i in 0..chunk.len() {
            out.push(NdArray::from_vec(&[d], v.data[i * d..(i + 1) * d].to_vec()));
        }
    }
    Ok(out)
}
