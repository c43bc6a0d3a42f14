//! Latent-conditioned radiance field: a small MLP over positionally encoded
//! coordinates whose color branch also sees a per-scene edit embedding.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{ensure, Result};

use crate::numerics::{load_params, save_params, Graph, NdArray, ParamSet, RngStream, Tensor};
use crate::scenes::Vec3;

pub const L_X_DEFAULT: usize = 6;
pub const L_D_DEFAULT: usize = 4;
pub const WIDTH_DEFAULT: usize = 40;

/// Frequency features for one vector: the raw components first, then
/// sin(2^k pi v) and cos(2^k pi v) for k = 0..levels-1. Output length is
/// dim * (2 * levels + 1).
pub fn positional_encoding(v: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() * (2 * levels + 1));
    out.extend_from_slice(v);
    for k in 0..levels {
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        for &x in v {
            out.push((freq * x).sin());
        }
        for &x in v {
            out.push((freq * x).cos());
        }
    }
    out
}

/// [N, 3 * (2 * levels + 1)] encoding of a batch of 3-vectors.
pub fn encode_rows(vs: &[Vec3], levels: usize) -> NdArray {
    let cols = 3 * (2 * levels + 1);
    let mut data = Vec::with_capacity(vs.len() * cols);
    for v in vs {
        data.extend_from_slice(&positional_encoding(v, levels));
    }
    NdArray::from_vec(&[vs.len(), cols], data)
}

/// Density is a function of position alone; the view direction and the edit
/// embedding feed only the color branch, so edits can change appearance but
/// never carve new geometry.
pub struct RadianceField {
    pub params: ParamSet,
    pub d_z: usize,
    pub width: usize,
    pub l_x: usize,
    pub l_d: usize,
}

pub struct BoundField {
    t: BTreeMap<String, Tensor>,
    pub d_z: usize,
    pub l_x: usize,
    pub l_d: usize,
}

impl RadianceField {
    pub fn init(seed: u64, d_z: usize, width: usize, l_x: usize, l_d: usize) -> Self {
        let mut rng = RngStream::new(seed, crate::pipeline::STREAM_INIT).substream(0xf1e1d);
        let mut params = ParamSet::new();
        let dx = 3 * (2 * l_x + 1);
        let dd = 3 * (2 * l_d + 1);

        fn mat(ps: &mut ParamSet, rng: &mut RngStream, name: &str, rows: usize, cols: usize) {
            let scale = 1.0 / (rows as f64).sqrt();
            let mut w = NdArray::zeros(&[rows, cols]);
            rng.fill_normal(&mut w.data);
            for v in &mut w.data {
                *v *= scale;
            }
            ps.insert(&format!("nerf.{}.w", name), w);
            ps.insert(&format!("nerf.{}.b", name), NdArray::zeros(&[1, cols]));
        }

        mat(&mut params, &mut rng, "fc1", dx, width);
        mat(&mut params, &mut rng, "fc2", width, width);
        mat(&mut params, &mut rng, "sigma", width, 1);
        mat(&mut params, &mut rng, "color1", width + dd + d_z, width);
        mat(&mut params, &mut rng, "color2", width, 3);
        RadianceField { params, d_z, width, l_x, l_d }
    }

    pub fn init_default(seed: u64, d_z: usize) -> Self {
        Self::init(seed, d_z, WIDTH_DEFAULT, L_X_DEFAULT, L_D_DEFAULT)
    }

    pub fn x_dim(&self) -> usize {
        3 * (2 * self.l_x + 1)
    }

    pub fn d_dim(&self) -> usize {
        3 * (2 * self.l_d + 1)
    }

    pub fn bind(&self, graph: &Graph, trainable: bool) -> BoundField {
        BoundField {
            t: graph.bind("", &self.params, trainable),
            d_z: self.d_z,
            l_x: self.l_x,
            l_d: self.l_d,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut with_meta = self.params.clone();
        let meta = [
            ("meta.d_z", self.d_z),
            ("meta.width", self.width),
            ("meta.l_x", self.l_x),
            ("meta.l_d", self.l_d),
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
        let (d_z, width, l_x, l_d) = (
            get_meta("meta.d_z")?,
            get_meta("meta.width")?,
            get_meta("meta.l_x")?,
            get_meta("meta.l_d")?,
        );
        let mut params = ParamSet::new();
        for (k, v) in loaded.iter() {
            if !k.starts_with("meta.") {
                params.insert(k, v.clone());
            }
        }
        Ok(RadianceField { params, d_z, width, l_x, l_d })
    }
}

impl BoundField {
    fn p(&self, name: &str) -> &Tensor {
        self.t
            .get(name)
            .unwrap_or_else(|| panic!("field parameter {} missing", name))
    }

    /// Batched evaluation. `pe_x` is [N, x_dim] encoded positions, `pe_d`
    /// [N, d_dim] encoded directions, `z` [N, d_z] edit embeddings. Returns
    /// (density [N, 1], color [N, 3]); density already through softplus,
    /// color through sigmoid.
    pub fn eval(&self, pe_x: &Tensor, pe_d: &Tensor, z: &Tensor) -> (Tensor, Tensor) {
        let h1 = pe_x
            .matmul(self.p("nerf.fc1.w"))
            .add_row_bias(self.p("nerf.fc1.b"))
            .silu();
        let h2 = h1
            .matmul(self.p("nerf.fc2.w"))
            .add_row_bias(self.p("nerf.fc2.b"))
            .silu();
        let sigma = h2
            .matmul(self.p("nerf.sigma.w"))
            .add_row_bias(self.p("nerf.sigma.b"))
            .softplus();
        let cin = Tensor::concat_cols(&[&h2, pe_d, z]);
        let c1 = cin
            .matmul(self.p("nerf.color1.w"))
            .add_row_bias(self.p("nerf.color1.b"))
            .silu();
        let color = c1
            .matmul(self.p("nerf.color2.w"))
            .add_row_bias(self.p("nerf.color2.b"))
            .sigmoid();
        (sigma, color)
    }
}

/// Single-point evaluation, mostly for tests and probes. `z` must have the
/// field's conditioning length.
pub fn field_eval(field: &RadianceField, x: Vec3, d: Vec3, z: &[f64]) -> Result<(f64, [f64; 3])> {
    ensure!(
        z.len() == field.d_z,
        "embedding length {} does not match field conditioning {}",
        z.len(),
        field.d_z
    );
    let g = Graph::new();
    let bound = field.bind(&g, false);
    let pe_x = g.constant_owned(encode_rows(&[x], field.l_x));
    let pe_d = g.constant_owned(encode_rows(&[d], field.l_d));
    let zt = g.constant_owned(NdArray::from_vec(&[1, z.len()], z.to_vec()));
    let (sigma, color) = bound.eval(&pe_x, &pe_d, &zt);
    let c = color.value();
    Ok((sigma.value().data[0], [c.data[0], c.data[1], c.data[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_matches_hand_values() {
        // Scalar 0.5 at one level: raw value, then sin(pi/2) = 1, cos(pi/2) = 0.
        let e = positional_encoding(&[0.5], 1);
        assert_eq!(e.len(), 3);
        assert!((e[0] - 0.5).abs() < 1e-15);
        assert!((e[1] - 1.0).abs() < 1e-12);
        assert!(e[2].abs() < 1e-12);

        // Zero vector: raw zeros, then sin 0 / cos 1 at every level.
        let z = positional_encoding(&[0.0, 0.0, 0.0], 4);
        assert_eq!(z.len(), 3 * (2 * 4 + 1));
        assert!(z[..3].iter().all(|&v| v == 0.0));
        for k in 0..4 {
            let base = 3 + k * 6;
            assert!(z[base..base + 3].iter().all(|&v| v == 0.0), "sin block at level {}", k);
            assert!(z[base + 3..base + 6].iter().all(|&v| v == 1.0), "cos block at level {}", k);
        }

        let rows = encode_rows(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]], 6);
        assert_eq!(rows.shape, vec![2, 39]);
        let single = positional_encoding(&[0.4, 0.5, 0.6], 6);
        assert_eq!(&rows.data[39..], single.as_slice());
    }

    #[test]
    fn density_ignores_direction_and_embedding() {
        let f = RadianceField::init(3, 5, 16, 4, 2);
        let x = [0.2, -0.1, 0.4];
        let (s1, c1) = field_eval(&f, x, [1.0, 0.0, 0.0], &[0.0; 5]).unwrap();
        let (s2, c2) = field_eval(&f, x, [0.0, 0.0, 1.0], &[9.0, -3.0, 1.0, 0.5, 2.0]).unwrap();
        assert_eq!(s1, s2, "density moved with direction or embedding");
        assert!(c1.iter().zip(&c2).any(|(a, b)| a != b), "color branch saw no conditioning");
        for c in c1.iter().chain(&c2) {
            assert!((0.0..=1.0).contains(c));
        }
        let mut rng = crate::numerics::RngStream::new(8, 0);
        for _ in 0..50 {
            let p = [rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0)];
            let (s, _) = field_eval(&f, p, [0.0, 0.0, 1.0], &[0.0; 5]).unwrap();
            assert!(s >= 0.0, "negative density at {:?}", p);
        }
    }

    #[test]
    fn field_eval_rejects_wrong_embedding_length() {
        let f = RadianceField::init(3, 5, 8, 2, 1);
        assert!(field_eval(&f, [0.0; 3], [0.0, 0.0, 1.0], &[0.0; 3]).is_err());
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let f = RadianceField::init(9, 6, 12, 3, 2);
        let path = dir.path().join("field.ckpt");
        f.save(&path).unwrap();
        let g = RadianceField::load(&path).unwrap();
        assert_eq!((g.d_z, g.width, g.l_x, g.l_d), (6, 12, 3, 2));
        for (k, v) in f.params.iter() {
            assert_eq!(v.max_abs_diff(g.params.get(k)), 0.0, "parameter {} drifted", k);
        }
    }
}
