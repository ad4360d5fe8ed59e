use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Spatially smooth, temporally AR(1) random field with unit variance.
///
/// The field is a sum of low-wavenumber Fourier modes in quadrature pairs
/// whose amplitudes follow independent AR(1) processes, so the pattern both
/// drifts and changes shape over the correlation time.
#[derive(Debug, Clone)]
pub struct SmoothNoise {
    rng: ChaCha8Rng,
    rho: f64,
    amps: Vec<f64>,
    /// One basis per amplitude, each `h·w` long.
    basis: Vec<Vec<f64>>,
    len: usize,
}

impl SmoothNoise {
    /// `corr_steps` is the e-folding time of the amplitudes in steps.
    pub fn new(seed: u64, height: usize, width: usize, modes: usize, corr_steps: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = (1.0 / modes.max(1) as f64).sqrt();
        let mut basis = Vec::with_capacity(2 * modes);
        for _ in 0..modes {
            let kx = rng.random_range(1..=4) as f64;
            let ky = rng.random_range(0.5..3.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut cos_b = Vec::with_capacity(height * width);
            let mut sin_b = Vec::with_capacity(height * width);
            for i in 0..height {
                let y = (i as f64 + 0.5) / height as f64;
                for j in 0..width {
                    let x = (j as f64 + 0.5) / width as f64;
                    let arg = std::f64::consts::TAU * kx * x + std::f64::consts::PI * ky * y + phase;
                    cos_b.push(norm * arg.cos());
                    sin_b.push(norm * arg.sin());
                }
            }
            basis.push(cos_b);
            basis.push(sin_b);
        }
        let amps = (0..basis.len()).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            rng,
            rho: (-1.0 / corr_steps.max(1e-9)).exp(),
            amps,
            basis,
            len: height * width,
        }
    }

    /// Current field.
    pub fn field(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (a, b) in self.amps.iter().zip(&self.basis) {
            out.iter_mut().zip(b).for_each(|(o, v)| *o += a * v);
        }
        out
    }

    /// Advances the amplitudes by one step.
    pub fn advance(&mut self) {
        let innov = (1.0 - self.rho * self.rho).sqrt();
        for a in self.amps.iter_mut() {
            let z: f64 = self.rng.sample(StandardNormal);
            *a = self.rho * *a + innov * z;
        }
    }

    /// Advances, then returns the new field.
    pub fn next_field(&mut self) -> Vec<f64> {
        self.advance();
        self.field()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roughly_unit_variance_and_deterministic() {
        let mut a = SmoothNoise::new(3, 16, 32, 8, 5.0);
        let mut b = SmoothNoise::new(3, 16, 32, 8, 5.0);
        let mut acc = 0.0;
        let mut n = 0.0;
        for _ in 0..400 {
            let fa = a.next_field();
            assert_eq!(fa, b.next_field());
            acc += fa.iter().map(|v| v * v).sum::<f64>();
            n += fa.len() as f64;
        }
        let var = acc / n;
        assert!((0.6..1.4).contains(&var), "{var}");
    }
}
