//! Joint text-image embedding space: the caption vocabulary, contrastively
//! trained toy encoders, directional edit metrics, and the Fréchet feature
//! distance used for evaluation.

mod frechet;
mod metrics;
mod space;
mod vocab;

pub use frechet::frechet_distance;
pub use metrics::{
    clip_direction_loss, direction_consistency, direction_similarity, text_direction,
    DirectionReport, EditPair, DIRECTION_EPS,
};
pub use space::{
    contrastive_loss, train_embedding, train_embedding_with_vocab, BoundEmbedder, EmbeddingSpace,
    EMBED_DIM_DEFAULT,
};
pub use vocab::Vocab;
