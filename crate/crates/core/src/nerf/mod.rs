//! Latent-conditioned neural radiance field and its two-term training loop.
//!
//! The field is fit to the edited views from stage one. Photometric rays pull
//! each view toward its target pixels; a consistency term renders a second
//! view under the first view's edit embedding and asks the frozen semantic
//! encoder to read the same edit back out, which keeps the edit identity
//! stable across viewpoints instead of burned into individual images.

mod field;
mod render;
mod train;

pub use field::{
    encode_rows, field_eval, positional_encoding, BoundField, RadianceField, L_D_DEFAULT,
    L_X_DEFAULT, WIDTH_DEFAULT,
};
pub use render::{
    composite_on_tape, draw_jitters, render_ray, render_rays_on_tape, render_view, view_rays,
    RayConfig, RaySample, N_SAMPLES_DEFAULT, T_FAR_DEFAULT, T_NEAR_DEFAULT,
};
pub use train::{
    consistency_loss, embedding_gap, mean_embedding, total_loss, train_nerf, LossWeights,
    NerfReport, NerfStep, NerfTrainConfig, PhotoLoss, Stage2Context, BATCH_RAYS_DEFAULT,
    CONSISTENCY_DOWNSCALE, LAMBDA_C_DEFAULT, NERF_LEARNING_RATE_DEFAULT, NERF_STEPS_DEFAULT,
};
