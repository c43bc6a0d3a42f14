//! Linear noise schedule and the closed-form forward process.

use crate::numerics::NdArray;
use anyhow::{ensure, Result};

pub const T_DEFAULT: usize = 1000;
pub const BETA_START_DEFAULT: f64 = 0.00085;
pub const BETA_END_DEFAULT: f64 = 0.012;

/// Precomputed β, α = 1 − β and ᾱ = Πα tables, indexed by t in [1, T].
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.t_max()).contains(&t),
            "timestep {} outside schedule range [1, {}]",
            t,
            self.t_max()
        );
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// ᾱ at t, extended with ᾱ_0 = 1 for respacing arithmetic.
    pub fn alpha_bar0(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `steps` timesteps t_1 < … < t_S = T, evenly spread over [1, T].
    /// With steps == T this is exactly 1..=T.
    pub fn respaced_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.t_max();
        ensure!(
            (1..=t_max).contains(&steps),
            "sampler steps {} outside [1, {}]",
            steps,
            t_max
        );
        let mut ts: Vec<usize> =
            (1..=steps).map(|k| (k * t_max + steps - 1) / steps).collect();
        ts.dedup();
        Ok(ts)
    }
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure!(t_max >= 1, "schedule needs at least 1 step, got {}", t_max);
    ensure!(
        0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
        "invalid beta range [{}, {}]",
        beta_start,
        beta_end
    );
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = alpha.clone();
    for i in 1..t_max {
        alpha_bar[i] = alpha_bar[i - 1] * alpha[i];
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·noise.
pub fn q_sample(
    z_0: &NdArray,
    t: usize,
    noise: &NdArray,
    schedule: &NoiseSchedule,
) -> Result<NdArray> {
    schedule.check_t(t)?;
    ensure!(
        z_0.shape == noise.shape,
        "noise shape {:?} does not match z_0 shape {:?}",
        noise.shape,
        z_0.shape
    );
    let ab = schedule.alpha_bar(t);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z_0.data.iter().zip(&noise.data).map(|(z, n)| s0 * z + s1 * n).collect();
    Ok(NdArray::from_vec(&z_0.shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn paper_default_schedule_endpoints() {
        let s = make_schedule(T_DEFAULT, BETA_START_DEFAULT, BETA_END_DEFAULT).unwrap();
        assert_eq!(s.t_max(), 1000);
        assert!((s.beta(1) - 0.00085).abs() < 1e-15);
        assert!((s.beta(1000) - 0.012).abs() < 1e-15);
        for t in 2..=1000 {
            assert!(s.beta(t) >= s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1000) < s.alpha_bar(1));
        assert!(s.alpha_bar(1) <= 1.0 - s.beta(1) + 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.9).unwrap();
        assert_eq!(s.t_max(), 1);
        assert!((s.beta(1) - 0.3).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = make_schedule(500, 0.001, 0.02).unwrap();
        let mut product = 1.0;
        for t in 1..=500 {
            product *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - product).abs() < 1e-12, "t={}", t);
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn q_sample_zero_noise_scales_by_sqrt_alpha_bar() {
        let s = make_schedule(100, 0.01, 0.2).unwrap();
        let z0 = NdArray::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]);
        let zt = q_sample(&z0, 40, &NdArray::zeros(&[4]), &s).unwrap();
        let scale = s.alpha_bar(40).sqrt();
        for (a, b) in zt.data.iter().zip(&z0.data) {
            assert!((a - scale * b).abs() < 1e-15);
        }
        assert!(q_sample(&z0, 0, &NdArray::zeros(&[4]), &s).is_err());
        assert!(q_sample(&z0, 101, &NdArray::zeros(&[4]), &s).is_err());
        assert!(q_sample(&z0, 5, &NdArray::zeros(&[3]), &s).is_err());
    }

    #[test]
    fn terminal_step_decorrelates_from_the_signal() {
        let s = make_schedule(T_DEFAULT, BETA_START_DEFAULT, BETA_END_DEFAULT).unwrap();
        let mut rng = RngStream::new(5, 1);
        let dim = 16;
        let mut z0 = NdArray::zeros(&[dim]);
        rng.fill_normal(&mut z0.data);
        let draws = 10_000;
        let mut xs = Vec::with_capacity(draws * dim);
        let mut ys = Vec::with_capacity(draws * dim);
        let mut noise = NdArray::zeros(&[dim]);
        for _ in 0..draws {
            rng.fill_normal(&mut noise.data);
            let zt = q_sample(&z0, T_DEFAULT, &noise, &s).unwrap();
            xs.extend_from_slice(&z0.data);
            ys.extend_from_slice(&zt.data);
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            cov += (x - mx) * (y - my);
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
        }
        let corr = cov / (vx.sqrt() * vy.sqrt());
        assert!(corr.abs() < 0.05, "correlation {}", corr);
    }

    #[test]
    fn q_sample_residual_variance_matches_schedule() {
        let s = make_schedule(T_DEFAULT, BETA_START_DEFAULT, BETA_END_DEFAULT).unwrap();
        let t = 500;
        let mut rng = RngStream::new(9, 2);
        let z0 = NdArray::from_vec(&[1], vec![0.7]);
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut noise = NdArray::zeros(&[1]);
        for _ in 0..draws {
            rng.fill_normal(&mut noise.data);
            let zt = q_sample(&z0, t, &noise, &s).unwrap();
            let r = zt.data[0] - s.alpha_bar(t).sqrt() * z0.data[0];
            sum += r;
            sum_sq += r * r;
        }
        let mean = sum / draws as f64;
        let var = sum_sq / draws as f64 - mean * mean;
        let expect = 1.0 - s.alpha_bar(t);
        assert!(
            (var - expect).abs() / expect < 0.02,
            "variance {} expected {}",
            var,
            expect
        );
    }

    #[test]
    fn respacing_covers_the_range_and_ends_at_t_max() {
        let s = make_schedule(1000, 0.001, 0.02).unwrap();
        let ts = s.respaced_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(*ts.last().unwrap(), 1000);
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        let full = s.respaced_timesteps(1000).unwrap();
        assert_eq!(full, (1..=1000).collect::<Vec<_>>());
        assert_eq!(s.respaced_timesteps(1).unwrap(), vec![1000]);
        assert!(s.respaced_timesteps(0).is_err());
        assert!(s.respaced_timesteps(1001).is_err());
    }
}
