use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

use super::{is_power_of_two, CotField, SceneParams, TAU_MAX};
use crate::{Error, Result};

fn fft2(buf: &mut [Complex<f64>], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (
            planner.plan_fft_inverse(width),
            planner.plan_fft_inverse(height),
        )
    } else {
        (
            planner.plan_fft_forward(width),
            planner.plan_fft_forward(height),
        )
    };
    for row in buf.chunks_mut(width) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = buf[r * width + c];
        }
        col_fft.process(&mut col);
        for r in 0..height {
            buf[r * width + c] = col[r];
        }
    }
}

/// Signed frequency of FFT bin `i` on an `n`-point grid, in cycles per pixel.
fn frequency(i: usize, n: usize) -> f64 {
    let signed = if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    };
    signed / n as f64
}

/// Zero-mean, unit-variance Gaussian random field with an isotropic
/// `k^-beta` power spectrum.
pub(crate) fn gaussian_random_field(seed: u64, height: usize, width: usize, beta: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex<f64>> = (0..height * width)
        .map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    fft2(&mut buf, height, width, false);
    for r in 0..height {
        let ky = frequency(r, height);
        for c in 0..width {
            let kx = frequency(c, width);
            let k = (kx * kx + ky * ky).sqrt();
            let amp = if k == 0.0 { 0.0 } else { k.powf(-beta / 2.0) };
            buf[r * width + c] *= amp;
        }
    }
    fft2(&mut buf, height, width, true);
    let mut z: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in &mut z {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
    z
}

/// Lognormal COT field from spectral synthesis. The lowest `f_clear`
/// fraction of the underlying Gaussian field is set to clear sky, which
/// yields contiguous clear regions because the field is spatially smooth.
pub fn generate_cot_field(
    seed: u64,
    height: usize,
    width: usize,
    pixel_size_km: f64,
    params: &SceneParams,
) -> Result<CotField> {
    if !is_power_of_two(height) || !is_power_of_two(width) || height < 8 || width < 8 {
        return Err(Error::config(format!(
            "scene dimensions must be powers of two >= 8, got {height}x{width}"
        )));
    }
    if !(pixel_size_km > 0.0 && pixel_size_km.is_finite()) {
        return Err(Error::config("pixel size must be positive"));
    }
    params.validate()?;
    let z = gaussian_random_field(seed, height, width, params.beta);
    let mut values: Vec<f64> = z
        .iter()
        .map(|&z| {
            (params.mu_ln + params.sigma_ln * z)
                .exp()
                .clamp(0.0, TAU_MAX)
        })
        .collect();
    let n_clear = (params.f_clear * values.len() as f64).floor() as usize;
    if n_clear > 0 {
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
        for &i in &order[..n_clear] {
            values[i] = 0.0;
        }
    }
    CotField::new(height, width, pixel_size_km, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let p = SceneParams::default();
        let a = generate_cot_field(42, 32, 32, 0.1, &p).unwrap();
        let b = generate_cot_field(42, 32, 32, 0.1, &p).unwrap();
        assert_eq!(a, b);
        let c = generate_cot_field(43, 32, 32, 0.1, &p).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_log_std_gives_constant_field() {
        let p = SceneParams {
            sigma_ln: 0.0,
            f_clear: 0.0,
            ..SceneParams::default()
        };
        let f = generate_cot_field(7, 16, 16, 0.1, &p).unwrap();
        let expected = 8f64.ln().exp();
        assert!(f.values.iter().all(|&v| v == expected));
    }

    #[test]
    fn lognormal_mean_matches_monte_carlo_identity() {
        let p = SceneParams::default();
        let total: f64 = (0..200)
            .map(|s| generate_cot_field(s, 32, 32, 0.1, &p).unwrap().mean())
            .sum();
        let mean = total / 200.0;
        let expected = 8.0 * (0.32f64).exp();
        assert!(
            (mean - expected).abs() < 0.1 * expected,
            "mean {mean} vs {expected}"
        );
    }

    #[test]
    fn rejects_non_power_of_two() {
        let p = SceneParams::default();
        assert!(generate_cot_field(0, 24, 32, 0.1, &p).is_err());
        assert!(generate_cot_field(0, 4, 4, 0.1, &p).is_err());
    }

    #[test]
    fn clear_fraction_zeroes_requested_share() {
        let p = SceneParams {
            f_clear: 0.25,
            ..SceneParams::default()
        };
        let f = generate_cot_field(3, 32, 32, 0.1, &p).unwrap();
        let zeros = f.values.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 256);
        assert!(f.values.iter().all(|&v| (0.0..=TAU_MAX).contains(&v)));
    }

    #[test]
    fn random_field_is_standardized() {
        let z = gaussian_random_field(11, 32, 64, 3.0);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}
