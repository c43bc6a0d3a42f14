//! Convolutional autoencoder mapping 32x32 RGB images to an 8x8 latent
//! grid. A pixel-space identity mode exists for debugging; everything
//! downstream only sees `encode` and `decode`.

use crate::numerics::{
    conv2d, load_params, save_params, Adam, Graph, NdArray, ParamSet, RngStream, Tensor,
};
use anyhow::{ensure, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub const LATENT_CHANNELS_DEFAULT: usize = 4;
const ENC1: usize = 16;
const ENC2: usize = 32;
const DEC1: usize = 32;
const DEC2: usize = 16;
const DEC3: usize = 16;
const LEARNING_RATE: f64 = 2e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AeMode {
    /// Strided conv encoder, upsampling decoder; spatial extent shrinks 4x.
    Conv,
    /// Latent = image. Debugging switch; no parameters.
    Identity,
}

#[derive(Clone, Debug)]
pub struct AutoEncoder {
    pub params: ParamSet,
    pub mode: AeMode,
    pub c_latent: usize,
    pub frozen: bool,
}

pub struct BoundAe {
    t: BTreeMap<String, Tensor>,
    mode: AeMode,
}

impl AutoEncoder {
    pub fn init(seed: u64, c_latent: usize) -> Self {
        let mut rng = RngStream::new(seed, crate::pipeline::STREAM_INIT).substream(0xae);
        let mut params = ParamSet::new();
        let mut conv = |name: &str, c_out: usize, c_in: usize| {
            let k = 9 * c_in;
            let scale = 1.0 / (k as f64).sqrt();
            let mut w = NdArray::zeros(&[c_out, k]);
            rng.fill_normal(&mut w.data);
            for x in &mut w.data {
                *x *= scale;
            }
            params.insert(&format!("{}.w", name), w);
            params.insert(&format!("{}.b", name), NdArray::zeros(&[1, c_out]));
        };
        conv("enc1", ENC1, 3);
        conv("enc2", ENC2, ENC1);
        conv("enc3", c_latent, ENC2);
        conv("dec1", DEC1, c_latent);
        conv("dec2", DEC2, DEC1);
        conv("dec3", DEC3, DEC2);
        conv("dec4", 3, DEC3);
        AutoEncoder { params, mode: AeMode::Conv, c_latent, frozen: false }
    }

    pub fn identity() -> Self {
        AutoEncoder {
            params: ParamSet::new(),
            mode: AeMode::Identity,
            c_latent: 3,
            frozen: true,
        }
    }

    /// Latent grid shape for a given image size.
    pub fn latent_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        match self.mode {
            AeMode::Conv => (h / 4, w / 4, self.c_latent),
            AeMode::Identity => (h, w, self.c_latent),
        }
    }

    pub fn bind(&self, graph: &Graph, trainable: bool) -> BoundAe {
        assert!(!(trainable && self.frozen), "autoencoder is frozen");
        BoundAe { t: graph.bind("", &self.params, trainable), mode: self.mode }
    }

    /// Encodes a batch of [H, W, 3] images to latent grids, off-tape.
    pub fn encode_images(&self, images: &[NdArray]) -> Result<Vec<NdArray>> {
        self.run(images, true)
    }

    /// Decodes latent grids back to [H, W, 3] images, off-tape.
    pub fn decode_latents(&self, latents: &[NdArray]) -> Result<Vec<NdArray>> {
        self.run(latents, false)
    }

    fn run(&self, items: &[NdArray], encode: bool) -> Result<Vec<NdArray>> {
        ensure!(!items.is_empty(), "empty batch");
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(32) {
            let refs: Vec<&NdArray> = chunk.iter().collect();
            let batch = NdArray::stack(&refs);
            let g = Graph::new();
            let bound = self.bind(&g, false);
            let x = g.constant_owned(batch);
            let y = if encode { bound.encode(&x) } else { bound.decode(&x) };
            let v = y.value();
            let per = v.numel() / chunk.len();
            let item_shape = &v.shape[1..];
            for i in 0..chunk.len() {
                out.push(NdArray::from_vec(
                    item_shape,
                    v.data[i * per..(i + 1) * per].to_vec(),
                ));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut with_meta = self.params.clone();
        with_meta.insert("meta.c_latent", NdArray::scalar(self.c_latent as f64));
        with_meta.insert(
            "meta.mode",
            NdArray::scalar(match self.mode {
                AeMode::Conv => 0.0,
                AeMode::Identity => 1.0,
            }),
        );
        save_params(path, &with_meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = load_params(path)?;
        ensure!(loaded.contains("meta.c_latent"), "{} lacks meta.c_latent", path.display());
        let c_latent = loaded.get("meta.c_latent").data[0] as usize;
        let mode =
            if loaded.contains("meta.mode") && loaded.get("meta.mode").data[0] == 1.0 {
                AeMode::Identity
            } else {
                AeMode::Conv
            };
        let mut params = ParamSet::new();
        for (k, v) in loaded.iter() {
            if !k.starts_with("meta.") {
                params.insert(k, v.clone());
            }
        }
        Ok(AutoEncoder { params, mode, c_latent, frozen: true })
    }
}

impl BoundAe {
    fn p(&self, name: &str) -> &Tensor {
        self.t.get(name).unwrap_or_else(|| panic!("autoencoder parameter {} missing", name))
    }

    /// NHWC image batch to latent batch.
    pub fn encode(&self, x: &Tensor) -> Tensor {
        if self.mode == AeMode::Identity {
            return x.clone();
        }
        let h1 = conv2d(x, self.p("enc1.w"), self.p("enc1.b"), 3, 3, 2, 1).silu();
        let h2 = conv2d(&h1, self.p("enc2.w"), self.p("enc2.b"), 3, 3, 2, 1).silu();
        conv2d(&h2, self.p("enc3.w"), self.p("enc3.b"), 3, 3, 1, 1)
    }

    /// Latent batch back to an NHWC image batch in (0, 1).
    pub fn decode(&self, z: &Tensor) -> Tensor {
        if self.mode == AeMode::Identity {
            return z.clone();
        }
        let h1 = conv2d(z, self.p("dec1.w"), self.p("dec1.b"), 3, 3, 1, 1).silu();
        let u1 = h1.upsample2x();
        let h2 = conv2d(&u1, self.p("dec2.w"), self.p("dec2.b"), 3, 3, 1, 1).silu();
        let u2 = h2.upsample2x();
        let h3 = conv2d(&u2, self.p("dec3.w"), self.p("dec3.b"), 3, 3, 1, 1).silu();
        conv2d(&h3, self.p("dec4.w"), self.p("dec4.b"), 3, 3, 1, 1).sigmoid()
    }
}

/// Peak signal-to-noise ratio in dB for images in [0, 1], capped at 120 dB
/// for bit-identical inputs.
pub fn psnr(a: &NdArray, b: &NdArray) -> f64 {
    assert_eq!(a.shape, b.shape, "psnr shapes {:?} vs {:?}", a.shape, b.shape);
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse < 1e-12 {
        return 120.0;
    }
    -10.0 * mse.log10()
}

/// Mean reconstruction PSNR of decode(encode(x)) over a set of images.
pub fn reconstruction_psnr(ae: &AutoEncoder, images: &[NdArray]) -> Result<f64> {
    let latents = ae.encode_images(images)?;
    let recon = ae.decode_latents(&latents)?;
    let sum: f64 = images.iter().zip(&recon).map(|(a, b)| psnr(a, b)).sum();
    Ok(sum / images.len() as f64)
}

/// Trains a fresh conv autoencoder with mean squared reconstruction error
/// and returns it frozen.
pub fn train_autoencoder(
    images: &[NdArray],
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<AutoEncoder> {
    ensure!(!images.is_empty(), "no training images");
    ensure!(batch >= 1, "batch must be positive");
    let mut ae = AutoEncoder::init(seed, LATENT_CHANNELS_DEFAULT);
    let mut adam = Adam::new(LEARNING_RATE);
    let mut rng = RngStream::new(seed, crate::pipeline::STREAM_BATCH).substream(0xae);
    for step in 0..steps {
        let idx: Vec<usize> =
            (0..batch.min(images.len())).map(|_| rng.uniform_int(images.len() as u64) as usize).collect();
        let refs: Vec<&NdArray> = idx.iter().map(|&i| &images[i]).collect();
        let x_val = NdArray::stack(&refs);
        let g = Graph::new();
        let bound = ae.bind(&g, true);
        let x = g.constant(&x_val);
        let recon = bound.decode(&bound.encode(&x));
        let loss = recon.sub(&x).square().mean_all();
        let value = loss.scalar_value();
        ensure!(value.is_finite(), "autoencoder loss became non-finite at step {}", step);
        let grads = g.backward(&loss);
        adam.step(&mut ae.params, &grads)?;
    }
    ae.frozen = true;
    Ok(ae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{gen_scene, render_reference, sample_cameras};

    fn training_images(n_scenes: usize, per_scene: usize) -> Vec<NdArray> {
        let mut out = Vec::new();
        for s in 0..n_scenes {
            let scene = gen_scene(s as u64);
            for cam in sample_cameras(s as u64, per_scene) {
                out.push(render_reference(&scene, &cam, 32, 32));
            }
        }
        out
    }

    #[test]
    fn conv_shapes_round_trip() {
        let ae = AutoEncoder::init(1, LATENT_CHANNELS_DEFAULT);
        let imgs = training_images(1, 1);
        let z = ae.encode_images(&imgs).unwrap();
        assert_eq!(z[0].shape, vec![8, 8, 4]);
        let back = ae.decode_latents(&z).unwrap();
        assert_eq!(back[0].shape, vec![32, 32, 3]);
        assert_eq!(ae.latent_shape(32, 32), (8, 8, 4));
    }

    #[test]
    fn identity_mode_passes_through() {
        let ae = AutoEncoder::identity();
        let imgs = training_images(1, 1);
        let z = ae.encode_images(&imgs).unwrap();
        assert_eq!(z[0].data, imgs[0].data);
        let back = ae.decode_latents(&z).unwrap();
        assert_eq!(back[0].data, imgs[0].data);
    }

    #[test]
    fn short_training_reduces_reconstruction_error() {
        let imgs = training_images(4, 2);
        let ae0 = AutoEncoder::init(11, LATENT_CHANNELS_DEFAULT);
        let before = reconstruction_psnr(&ae0, &imgs).unwrap();
        let ae = train_autoencoder(&imgs, 80, 4, 11).unwrap();
        assert!(ae.frozen);
        let after = reconstruction_psnr(&ae, &imgs).unwrap();
        assert!(after > before, "psnr went {} -> {}", before, after);
    }

    #[test]
    fn psnr_matches_hand_computation() {
        let a = NdArray::from_vec(&[2, 2], vec![0.0, 0.5, 1.0, 0.25]);
        let mut b = a.clone();
        b.data[0] += 0.1;
        // mse = 0.01/4
        let expect = -10.0 * (0.01f64 / 4.0).log10();
        assert!((psnr(&a, &b) - expect).abs() < 1e-12);
        assert_eq!(psnr(&a, &a.clone()), 120.0);
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ae = AutoEncoder::init(3, LATENT_CHANNELS_DEFAULT);
        let path = dir.path().join("ae.ckpt");
        ae.save(&path).unwrap();
        let back = AutoEncoder::load(&path).unwrap();
        assert_eq!(back.c_latent, ae.c_latent);
        assert_eq!(back.mode, AeMode::Conv);
        assert!(back.frozen);
        for (k, v) in ae.params.iter() {
            assert_eq!(v.data, back.params.get(k).data, "param {}", k);
        }
    }
}
