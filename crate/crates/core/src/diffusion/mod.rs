//! Latent diffusion: image autoencoder, noise schedule, conditional
//! denoiser, ancestral sampler, and the bottleneck-based semantic readout.

mod ae;
mod denoiser;
mod sample;
mod schedule;

pub use ae::{
    psnr, reconstruction_psnr, train_autoencoder, AeMode, AutoEncoder, BoundAe,
    LATENT_CHANNELS_DEFAULT,
};
pub use denoiser::{
    concat_channels, denoiser_loss, predict_noise, timestep_features, train_denoiser,
    train_denoiser_sized, BottleneckHook, BoundDenoiser, Conditioning, Denoiser, DenoiserOut,
    BOTTLENECK_DEFAULT, T_FEATS,
};
pub use sample::{
    encode_semantic, encode_semantic_on_tape, posterior_mean, predict_x0, sample, sample_latent,
    semantic_timestep, SAMPLE_NOISE_SUBSTREAM, SEMANTIC_T_DIVISOR,
};
pub use schedule::{
    make_schedule, q_sample, NoiseSchedule, BETA_END_DEFAULT, BETA_START_DEFAULT, T_DEFAULT,
};
