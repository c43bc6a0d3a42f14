//! On-disk dataset layout: `scene.json`, `manifest.json`, and one binary
//! PPM (P6) image per view. Cameras and captions round-trip bit-exactly;
//! pixels round-trip up to 8-bit quantization.

use super::{Camera, CaptionedView, Scene};
use crate::numerics::NdArray;
use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene: Scene,
    pub views: Vec<CaptionedView>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    views: Vec<ManifestView>,
}

#[derive(Serialize, Deserialize)]
struct ManifestView {
    image: String,
    camera: Camera,
    caption_tokens: Vec<usize>,
}

pub fn save_ppm(path: &Path, image: &NdArray) -> Result<()> {
    ensure!(
        image.shape.len() == 3 && image.shape[2] == 3,
        "ppm wants an [H, W, 3] image, got {:?}",
        image.shape
    );
    let (h, w) = (image.shape[0], image.shape[1]);
    let mut bytes = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend(image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).with_context(|| format!("writing image file {}", path.display()))
}

struct PpmParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PpmParser<'a> {
    /// Skips whitespace and `#` comment lines between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        ensure!(self.pos > start, "expected {} at byte {}", what, start);
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .with_context(|| format!("parsing {} at byte {}", what, start))
    }
}

pub fn load_ppm(path: &Path) -> Result<NdArray> {
    let bytes = fs::read(path).with_context(|| format!("reading image file {}", path.display()))?;
    parse_ppm(&bytes).with_context(|| format!("parsing image file {}", path.display()))
}

fn parse_ppm(bytes: &[u8]) -> Result<NdArray> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        bail!("not a binary ppm: bad magic at byte 0");
    }
    let mut p = PpmParser { bytes, pos: 2 };
    let w = p.number("width")?;
    let h = p.number("height")?;
    let maxval_at = {
        p.skip_separators();
        p.pos
    };
    let maxval = p.number("maxval")?;
    ensure!(maxval == 255, "unsupported maxval {} at byte {}", maxval, maxval_at);
    ensure!(w > 0 && h > 0, "degenerate image size {}x{}", w, h);
    // Exactly one whitespace byte separates the header from pixel data.
    ensure!(
        p.pos < bytes.len() && bytes[p.pos].is_ascii_whitespace(),
        "expected whitespace after maxval at byte {}",
        p.pos
    );
    p.pos += 1;
    let need = w * h * 3;
    let have = bytes.len() - p.pos;
    ensure!(
        have >= need,
        "truncated pixel data at byte {}: need {} bytes, found {}",
        p.pos,
        need,
        have
    );
    let data = bytes[p.pos..p.pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(NdArray::from_vec(&[h, w, 3], data))
}

fn view_filename(index: usize) -> String {
    format!("view_{:03}.ppm", index)
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating dataset dir {}", dir.display()))?;
    let scene_path = dir.join("scene.json");
    fs::write(&scene_path, serde_json::to_string_pretty(&dataset.scene)?)
        .with_context(|| format!("writing {}", scene_path.display()))?;
    let mut manifest = Manifest { views: Vec::with_capacity(dataset.views.len()) };
    for (i, view) in dataset.views.iter().enumerate() {
        let name = view_filename(i);
        save_ppm(&dir.join(&name), &view.image)?;
        manifest.views.push(ManifestView {
            image: name,
            camera: view.camera,
            caption_tokens: view.caption_tokens.clone(),
        });
    }
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", manifest_path.display()))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let scene_path = dir.join("scene.json");
    let scene_text = fs::read_to_string(&scene_path)
        .with_context(|| format!("reading {}", scene_path.display()))?;
    let scene: Scene = serde_json::from_str(&scene_text)
        .with_context(|| format!("parsing {}", scene_path.display()))?;
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
    let mut views = Vec::with_capacity(manifest.views.len());
    for (i, entry) in manifest.views.into_iter().enumerate() {
        entry
            .camera
            .validate()
            .with_context(|| format!("view {} in {}", i, manifest_path.display()))?;
        views.push(CaptionedView {
            image: load_ppm(&dir.join(&entry.image))?,
            camera: entry.camera,
            caption_tokens: entry.caption_tokens,
        });
    }
    Ok(Dataset { scene, views })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{gen_scene, render_reference, sample_cameras};

    fn fixture(seed: u64, n_views: usize) -> Dataset {
        let scene = gen_scene(seed);
        let views = sample_cameras(seed, n_views)
            .into_iter()
            .enumerate()
            .map(|(i, camera)| CaptionedView {
                image: render_reference(&scene, &camera, 16, 16),
                camera,
                caption_tokens: vec![i, i + 1],
            })
            .collect();
        Dataset { scene, views }
    }

    #[test]
    fn roundtrip_quantizes_pixels_and_preserves_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture(3, 3);
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.scene, ds.scene);
        assert_eq!(back.views.len(), ds.views.len());
        for (a, b) in ds.views.iter().zip(&back.views) {
            assert_eq!(a.camera, b.camera, "cameras must round-trip bit-exactly");
            assert_eq!(a.caption_tokens, b.caption_tokens);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn requantizing_a_loaded_image_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture(5, 1);
        let path = dir.path().join("one.ppm");
        save_ppm(&path, &ds.views[0].image).unwrap();
        let once = load_ppm(&path).unwrap();
        save_ppm(&path, &once).unwrap();
        let twice = load_ppm(&path).unwrap();
        assert_eq!(once.data, twice.data);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset { scene: Scene { objects: vec![] }, views: vec![] };
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.views.is_empty());
        assert!(back.scene.objects.is_empty());
    }

    #[test]
    fn missing_image_error_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &fixture(7, 2)).unwrap();
        fs::remove_file(dir.path().join("view_001.ppm")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(format!("{:#}", err).contains("view_001.ppm"), "{:#}", err);
    }

    #[test]
    fn corrupt_magic_reports_byte_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"P5\n2 2\n255\n0123456789ab").unwrap();
        let err = load_ppm(&path).unwrap_err();
        let msg = format!("{:#}", err);
        assert!(msg.contains("byte 0") && msg.contains("bad.ppm"), "{}", msg);
    }

    #[test]
    fn truncated_pixels_report_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ppm");
        fs::write(&path, b"P6\n2 2\n255\n0123").unwrap();
        let err = load_ppm(&path).unwrap_err();
        let msg = format!("{:#}", err);
        assert!(msg.contains("truncated") && msg.contains("byte 11"), "{}", msg);
    }

    #[test]
    fn degenerate_camera_in_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = fixture(9, 1);
        ds.views[0].camera.up = [0.0, 0.0, 0.0];
        save_dataset(dir.path(), &ds).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(format!("{:#}", err).contains("view 0"), "{:#}", err);
    }
}
