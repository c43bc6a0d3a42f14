//! Two-stage text-driven editing of procedural 3-D scenes.
//!
//! Stage 1 learns a small bottleneck-shift module inside a frozen toy latent
//! diffusion model so that sampled views of a scene follow a text edit
//! instruction. Stage 2 distils the edited views into a latent-conditioned
//! neural radiance field whose renders stay semantically consistent across
//! viewpoints.
//!
//! Everything runs on a self-contained f64 reverse-mode autodiff substrate
//! ([`numerics`]); no GPU, no external ML runtime. All randomness flows
//! through counter-based [`numerics::RngStream`]s, so every pipeline stage is
//! bit-reproducible from a seed regardless of thread count.

pub mod delta;
pub mod diffusion;
pub mod embedspace;
pub mod nerf;
pub mod numerics;
pub mod pipeline;
pub mod scenes;
