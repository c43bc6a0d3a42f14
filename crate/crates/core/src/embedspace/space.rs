//! The joint text-image embedding: a bag-of-tokens perceptron for captions,
//! a small strided conv net with global pooling for images, trained with a
//! symmetric contrastive loss. Both encoders emit unit vectors; the image
//! encoder's pre-normalization activations double as the feature space for
//! Fréchet distances.

use super::Vocab;
use crate::numerics::{
    conv2d, file_checksum, load_params, save_params, Adam, Graph, NdArray, ParamSet, RngStream,
    Tensor,
};
use crate::scenes::CaptionedView;
use anyhow::{ensure, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub const EMBED_DIM_DEFAULT: usize = 64;
const HIDDEN: usize = 64;
const CONV1: usize = 16;
const CONV2: usize = 32;
/// Softmax temperature for the contrastive logits.
const TEMPERATURE: f64 = 0.1;
const BATCH: usize = 16;
const LEARNING_RATE: f64 = 3e-3;

#[derive(Clone, Debug)]
pub struct EmbeddingSpace {
    pub params: ParamSet,
    pub vocab: Vocab,
    pub d_e: usize,
}

/// Parameter tensors of one `EmbeddingSpace` bound onto a graph. Frozen or
/// trainable depending on how `bind` was called.
pub struct BoundEmbedder {
    t: BTreeMap<String, Tensor>,
    d_e: usize,
}

impl EmbeddingSpace {
    pub fn init(seed: u64, d_e: usize, vocab: Vocab) -> Self {
        let mut rng = RngStream::new(seed, crate::pipeline::STREAM_INIT).substream(0xe3bed);
        let mut params = ParamSet::new();
        let v = vocab.len();
        let mut mat = |name: &str, rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            let mut a = NdArray::zeros(&[rows, cols]);
            rng.fill_normal(&mut a.data);
            for x in &mut a.data {
                *x *= scale;
            }
            params.insert(name, a);
        };
        mat("text.w1", v, HIDDEN);
        mat("text.w2", HIDDEN, d_e);
        mat("img.conv1.w", CONV1, 9 * 3);
        mat("img.conv2.w", CONV2, 9 * CONV1);
        mat("img.proj.w", CONV2, d_e);
        params.insert("text.b1", NdArray::zeros(&[1, HIDDEN]));
        params.insert("text.b2", NdArray::zeros(&[1, d_e]));
        params.insert("img.conv1.b", NdArray::zeros(&[1, CONV1]));
        params.insert("img.conv2.b", NdArray::zeros(&[1, CONV2]));
        params.insert("img.proj.b", NdArray::zeros(&[1, d_e]));
        EmbeddingSpace { params, vocab, d_e }
    }

    /// Empty prefix: exported gradient names match the ParamSet keys, which
    /// is what the optimizer walks.
    pub fn bind(&self, graph: &Graph, trainable: bool) -> BoundEmbedder {
        BoundEmbedder { t: graph.bind("", &self.params, trainable), d_e: self.d_e }
    }

    /// Unit-norm text embeddings [N, d_e] for token sequences, off-tape.
    pub fn embed_tokens(&self, seqs: &[Vec<usize>]) -> Result<NdArray> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        Ok(bound.text(&g, &self.vocab, seqs)?.value())
    }

    /// Unit-norm image embeddings [N, d_e], off-tape, in fixed-size chunks.
    pub fn embed_images(&self, images: &[NdArray]) -> Result<NdArray> {
        self.run_images(images, false)
    }

    /// Pre-normalization image features [N, d_e] for distribution metrics.
    pub fn image_features(&self, images: &[NdArray]) -> Result<NdArray> {
        self.run_images(images, true)
    }

    fn run_images(&self, images: &[NdArray], pre_norm: bool) -> Result<NdArray> {
        ensure!(!images.is_empty(), "no images to embed");
        let mut out = NdArray::zeros(&[images.len(), self.d_e]);
        let mut row = 0;
        for chunk in images.chunks(32) {
            let refs: Vec<&NdArray> = chunk.iter().collect();
            let batch = NdArray::stack(&refs);
            let g = Graph::new();
            let bound = self.bind(&g, false);
            let x = g.constant_owned(batch);
            let feats = bound.image_features(&x);
            let t = if pre_norm { feats } else { feats.l2_normalize_rows() };
            let v = t.value();
            out.data[row * self.d_e..(row + chunk.len()) * self.d_e].copy_from_slice(&v.data);
            row += chunk.len();
        }
        Ok(out)
    }

    pub fn save(&self, checkpoint: &Path, vocab_path: &Path) -> Result<()> {
        let mut with_meta = self.params.clone();
        with_meta.insert("meta.d_e", NdArray::scalar(self.d_e as f64));
        save_params(checkpoint, &with_meta)?;
        self.vocab.save(vocab_path)
    }

    pub fn load(checkpoint: &Path, vocab_path: &Path) -> Result<Self> {
        let loaded = load_params(checkpoint)?;
        ensure!(loaded.contains("meta.d_e"), "{} lacks meta.d_e", checkpoint.display());
        let d_e = loaded.get("meta.d_e").data[0] as usize;
        let mut params = ParamSet::new();
        for (k, v) in loaded.iter() {
            if !k.starts_with("meta.") {
                params.insert(k, v.clone());
            }
        }
        Ok(EmbeddingSpace { params, vocab: Vocab::load(vocab_path)?, d_e })
    }

    pub fn checkpoint_checksum(path: &Path) -> Result<u64> {
        file_checksum(path)
    }
}

impl BoundEmbedder {
    fn p(&self, name: &str) -> &Tensor {
        self.t.get(name).unwrap_or_else(|| panic!("embedder parameter {} missing", name))
    }

    /// Token sequences to unit-norm embeddings [B, d_e].
    pub fn text(&self, g: &Graph, vocab: &Vocab, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let hot = g.constant_owned(vocab.multi_hot(seqs)?);
        let h = hot.matmul(self.p("text.w1")).add_row_bias(self.p("text.b1")).silu();
        let e = h.matmul(self.p("text.w2")).add_row_bias(self.p("text.b2"));
        Ok(e.l2_normalize_rows())
    }

    /// NHWC image batch to pre-normalization features [B, d_e]. Strided
    /// convolutions then a global average pool keep this resolution-free.
    pub fn image_features(&self, x: &Tensor) -> Tensor {
        let c1 = conv2d(x, self.p("img.conv1.w"), self.p("img.conv1.b"), 3, 3, 2, 1).silu();
        let c2 = conv2d(&c1, self.p("img.conv2.w"), self.p("img.conv2.b"), 3, 3, 2, 1).silu();
        let pooled = c2.mean_spatial();
        pooled.matmul(self.p("img.proj.w")).add_row_bias(self.p("img.proj.b"))
    }

    /// NHWC image batch to unit-norm embeddings [B, d_e].
    pub fn image(&self, x: &Tensor) -> Tensor {
        self.image_features(x).l2_normalize_rows()
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }
}

/// Mean over rows of (logsumexp(row) − diagonal logit): cross-entropy where
/// row i's positive is column i.
fn diagonal_cross_entropy(g: &Graph, logits: &Tensor) -> Tensor {
    let n = logits.shape()[0];
    let mut eye = NdArray::zeros(&[n, n]);
    for i in 0..n {
        eye.data[i * n + i] = 1.0;
    }
    let eye = g.constant_owned(eye);
    let diag = logits.mul(&eye).sum_rows();
    logits.logsumexp_rows().sub(&diag).mean_all()
}

fn contrastive_batch_loss(
    g: &Graph,
    bound: &BoundEmbedder,
    vocab: &Vocab,
    images: &NdArray,
    seqs: &[Vec<usize>],
) -> Result<Tensor> {
    let x = g.constant(images);
    let e_img = bound.image(&x);
    let e_txt = bound.text(g, vocab, seqs)?;
    let logits = e_img.matmul(&e_txt.transpose()).scale(1.0 / TEMPERATURE);
    let a = diagonal_cross_entropy(g, &logits);
    let b = diagonal_cross_entropy(g, &logits.transpose());
    Ok(a.add(&b).scale(0.5))
}

fn gather_batch(views: &[CaptionedView], idx: &[usize]) -> (NdArray, Vec<Vec<usize>>) {
    let imgs: Vec<&NdArray> = idx.iter().map(|&i| &views[i].image).collect();
    let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| views[i].caption_tokens.clone()).collect();
    (NdArray::stack(&imgs), seqs)
}

fn check_dataset(views: &[CaptionedView]) -> Result<()> {
    ensure!(!views.is_empty(), "empty caption dataset");
    let shape = &views[0].image.shape;
    ensure!(
        views.iter().all(|v| &v.image.shape == shape),
        "views mix image resolutions"
    );
    let distinct: std::collections::BTreeSet<&[usize]> =
        views.iter().map(|v| v.caption_tokens.as_slice()).collect();
    ensure!(
        distinct.len() >= 2,
        "contrastive training needs at least 2 distinct captions, found {}",
        distinct.len()
    );
    Ok(())
}

/// Trains fresh encoders on captioned views with the symmetric contrastive
/// objective and returns them frozen.
pub fn train_embedding(views: &[CaptionedView], epochs: usize, seed: u64) -> Result<EmbeddingSpace> {
    let vocab = Vocab::standard();
    train_embedding_with_vocab(views, epochs, seed, vocab)
}

pub fn train_embedding_with_vocab(
    views: &[CaptionedView],
    epochs: usize,
    seed: u64,
    vocab: Vocab,
) -> Result<EmbeddingSpace> {
    check_dataset(views)?;
    let mut space = EmbeddingSpace::init(seed, EMBED_DIM_DEFAULT, vocab);
    let mut adam = Adam::new(LEARNING_RATE);
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut rng = RngStream::new(seed, crate::pipeline::STREAM_BATCH).substream(0xe3bed);
    for _epoch in 0..epochs {
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(BATCH) {
            // A 1-view remainder batch has no negatives; fold it away.
            if batch.len() < 2 {
                continue;
            }
            let (imgs, seqs) = gather_batch(views, batch);
            let g = Graph::new();
            let bound = space.bind(&g, true);
            let loss = contrastive_batch_loss(&g, &bound, &space.vocab, &imgs, &seqs)?;
            let grads = g.backward(&loss);
            adam.step(&mut space.params, &grads)?;
        }
    }
    Ok(space)
}

/// Mean contrastive loss over the whole dataset in one frozen pass.
pub fn contrastive_loss(space: &EmbeddingSpace, views: &[CaptionedView]) -> Result<f64> {
    check_dataset(views)?;
    let idx: Vec<usize> = (0..views.len()).collect();
    let (imgs, seqs) = gather_batch(views, &idx);
    let g = Graph::new();
    let bound = space.bind(&g, false);
    let loss = contrastive_batch_loss(&g, &bound, &space.vocab, &imgs, &seqs)?;
    Ok(loss.scalar_value())
}

fn shuffle(order: &mut [usize], rng: &mut RngStream) {
    for i in (1..order.len()).rev() {
        let j = rng.uniform_int(i as u64 + 1) as usize;
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{
        color_by_name, render_reference, sample_cameras, scene_caption_words, Scene, SceneObject,
        Shape,
    };

    fn sphere_scene(color: &str) -> Scene {
        Scene {
            objects: vec![SceneObject {
                shape: Shape::Sphere,
                center: [0.0, 0.0, 0.1],
                size: 0.55,
                albedo: color_by_name(color).unwrap(),
            }],
        }
    }

    fn views_for(scenes: &[Scene], per_scene: usize, res: usize) -> Vec<CaptionedView> {
        let vocab = Vocab::standard();
        let mut out = Vec::new();
        for (si, scene) in scenes.iter().enumerate() {
            let tokens = vocab.encode(&scene_caption_words(scene)).unwrap();
            for cam in sample_cameras(40 + si as u64, per_scene) {
                out.push(CaptionedView {
                    image: render_reference(scene, &cam, res, res),
                    camera: cam,
                    caption_tokens: tokens.clone(),
                });
            }
        }
        out
    }

    #[test]
    fn untrained_encoders_emit_unit_vectors() {
        let space = EmbeddingSpace::init(1, EMBED_DIM_DEFAULT, Vocab::standard());
        let views = views_for(&[sphere_scene("red")], 2, 16);
        let e_img = space.embed_images(&[views[0].image.clone()]).unwrap();
        let e_txt = space.embed_tokens(&[views[0].caption_tokens.clone()]).unwrap();
        for row in [&e_img, &e_txt] {
            let n: f64 = row.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9, "norm {}", n);
        }
    }

    #[test]
    fn single_caption_dataset_is_rejected() {
        let views = views_for(&[sphere_scene("red")], 3, 16);
        let err = train_embedding(&views, 1, 0).unwrap_err();
        assert!(err.to_string().contains("distinct captions"), "{}", err);
    }

    #[test]
    fn training_separates_red_from_blue() {
        let scenes = [sphere_scene("red"), sphere_scene("blue")];
        let views = views_for(&scenes, 6, 16);
        let space0 = EmbeddingSpace::init(7, EMBED_DIM_DEFAULT, Vocab::standard());
        let loss0 = contrastive_loss(&space0, &views).unwrap();
        let space = train_embedding(&views, 60, 7).unwrap();
        let loss1 = contrastive_loss(&space, &views).unwrap();
        assert!(loss1 < loss0, "loss went {} -> {}", loss0, loss1);

        let vocab = &space.vocab;
        let red_img = &views[0].image;
        let red_txt = vocab.encode(&["large", "red", "sphere"]).unwrap();
        let blue_txt = vocab.encode(&["large", "blue", "sphere"]).unwrap();
        let e_i = space.embed_images(&[red_img.clone()]).unwrap();
        let e_t = space.embed_tokens(&[red_txt, blue_txt]).unwrap();
        let d = space.d_e;
        let cos_red: f64 = (0..d).map(|k| e_i.data[k] * e_t.data[k]).sum();
        let cos_blue: f64 = (0..d).map(|k| e_i.data[k] * e_t.data[d + k]).sum();
        assert!(
            cos_red > cos_blue,
            "red image matched blue text: {} vs {}",
            cos_red,
            cos_blue
        );
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let space = EmbeddingSpace::init(3, EMBED_DIM_DEFAULT, Vocab::standard());
        let ckpt = dir.path().join("embed.ckpt");
        let vjson = dir.path().join("vocab.json");
        space.save(&ckpt, &vjson).unwrap();
        let back = EmbeddingSpace::load(&ckpt, &vjson).unwrap();
        assert_eq!(back.d_e, space.d_e);
        for (k, v) in space.params.iter() {
            assert_eq!(v.data, back.params.get(k).data, "param {}", k);
        }
        assert_eq!(back.vocab.len(), space.vocab.len());
    }
}
