use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CotField, RadianceField, SceneParams, ViewGeometry};
use crate::{Error, Result};

/// Two-stream reflectance of a conservatively scattering layer over a black
/// surface: `R = (1-g)τ / (2μ0 + (1-g)τ)`.
pub fn ipa_reflectance(tau: f64, mu0: f64, g: f64) -> f64 {
    let scaled = (1.0 - g) * tau;
    scaled / (2.0 * mu0 + scaled)
}

/// Independent-pixel rendering with `mu0 = cos(sza)`.
pub fn render_ipa(cot: &CotField, geom: &ViewGeometry, params: &SceneParams) -> RadianceField {
    let mu0 = geom.mu0();
    RadianceField {
        height: cot.height,
        width: cot.width,
        values: cot
            .values
            .iter()
            .map(|&t| ipa_reflectance(t, mu0, params.g))
            .collect(),
        geometry: *geom,
        noise_sigma: 0.0,
    }
}

/// Integer parallax displacement magnitude, `round(h tan(vza) / dx)`.
pub fn parallax_shift_px(geom: &ViewGeometry, pixel_size_km: f64) -> i64 {
    (geom.cloud_top_km * geom.vza_deg.to_radians().tan() / pixel_size_km).round() as i64
}

/// Parallax displacement as `(rows, cols)`, directed along the view azimuth
/// (azimuth 0 points along +x, i.e. increasing column).
pub fn parallax_shift(geom: &ViewGeometry, pixel_size_km: f64) -> (i64, i64) {
    let s = geom.cloud_top_km * geom.vza_deg.to_radians().tan() / pixel_size_km;
    let az = geom.raz_deg.to_radians();
    ((s * az.sin()).round() as i64, (s * az.cos()).round() as i64)
}

fn blur_axis(
    src: &[f64],
    dst: &mut [f64],
    height: usize,
    width: usize,
    kernel: &[f64],
    along_rows: bool,
) {
    let radius = (kernel.len() / 2) as i64;
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let off = k as i64 - radius;
                let (rr, cc) = if along_rows {
                    (r, (c as i64 + off).rem_euclid(width as i64) as usize)
                } else {
                    ((r as i64 + off).rem_euclid(height as i64) as usize, c)
                };
                acc += w * src[rr * width + cc];
            }
            dst[r * width + c] = acc;
        }
    }
}

/// Separable Gaussian blur with periodic boundaries. `sigma_px <= 0` is the
/// identity.
pub fn gaussian_blur_toroidal(
    values: &[f64],
    height: usize,
    width: usize,
    sigma_px: f64,
) -> Vec<f64> {
    if sigma_px <= 0.0 {
        return values.to_vec();
    }
    let radius = (4.0 * sigma_px).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma_px * sigma_px)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let mut tmp = vec![0.0; values.len()];
    let mut out = vec![0.0; values.len()];
    blur_axis(values, &mut tmp, height, width, &kernel, true);
    blur_axis(&tmp, &mut out, height, width, &kernel, false);
    out
}

fn roll(values: &[f64], height: usize, width: usize, drow: i64, dcol: i64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..height {
        let src_r = (r as i64 - drow).rem_euclid(height as i64) as usize;
        for c in 0..width {
            let src_c = (c as i64 - dcol).rem_euclid(width as i64) as usize;
            out[r * width + c] = values[src_r * width + src_c];
        }
    }
    out
}

/// Cross-pixel perturbations applied in order: slope shadowing, radiative
/// smoothing, parallax, then clamping to [0, 1].
///
/// The sun sits in the +x direction, so slopes whose optical thickness falls
/// towards +x face the sun and brighten while the opposite slopes darken.
/// The slope is the central difference of τ along x scaled to unit max-abs.
pub fn apply_3d_effects(
    r: &RadianceField,
    cot: &CotField,
    geom: &ViewGeometry,
    params: &SceneParams,
) -> Result<RadianceField> {
    if r.height != cot.height || r.width != cot.width {
        return Err(Error::config(format!(
            "radiance {}x{} does not match COT field {}x{}",
            r.height, r.width, cot.height, cot.width
        )));
    }
    let (h, w) = (r.height, r.width);
    let mut values = r.values.clone();

    let gain = params.kappa * geom.sza_deg.to_radians().tan();
    if gain != 0.0 {
        let mut slope = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let east = cot.at(row, (col + 1) % w);
                let west = cot.at(row, (col + w - 1) % w);
                slope[row * w + col] = 0.5 * (east - west);
            }
        }
        let max_abs = slope.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if max_abs > 0.0 {
            for (v, s) in values.iter_mut().zip(&slope) {
                *v *= (1.0 - gain * s / max_abs).max(0.0);
            }
        }
    }

    let sigma_px = params.eta * cot.mean().max(0.0).sqrt();
    values = gaussian_blur_toroidal(&values, h, w, sigma_px);

    let (drow, dcol) = parallax_shift(geom, cot.pixel_size_km);
    if drow != 0 || dcol != 0 {
        values = roll(&values, h, w, drow, dcol);
    }

    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(RadianceField {
        height: h,
        width: w,
        values,
        geometry: *geom,
        noise_sigma: r.noise_sigma,
    })
}

/// Adds i.i.d. Gaussian noise and clamps to [0, 1].
pub fn add_noise(r: &RadianceField, sigma: f64, seed: u64) -> Result<RadianceField> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!(
            "noise sigma must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(r.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = r
        .values
        .iter()
        .map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Ok(RadianceField {
        values,
        noise_sigma: sigma,
        ..r.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub effects_3d: bool,
    pub noise_sigma: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            effects_3d: true,
            noise_sigma: 0.0,
        }
    }
}

/// Full observation pipeline: IPA rendering, optional 3D effects, noise.
pub fn render_scene(
    cot: &CotField,
    geom: &ViewGeometry,
    params: &SceneParams,
    opts: RenderOptions,
    noise_seed: u64,
) -> Result<RadianceField> {
    geom.validate()?;
    let mut r = render_ipa(cot, geom, params);
    if opts.effects_3d {
        r = apply_3d_effects(&r, cot, geom, params)?;
    }
    add_noise(&r, opts.noise_sigma, noise_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_cot_field;

    fn field() -> CotField {
        generate_cot_field(5, 32, 32, 0.1, &SceneParams::default()).unwrap()
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(ipa_reflectance(0.0, 0.7, 0.85), 0.0);
        assert!((ipa_reflectance(10.0, 1.0, 0.85) - 1.5 / 3.5).abs() < 1e-12);
        assert!((ipa_reflectance(10.0, 0.5, 0.85) - 0.6).abs() < 1e-12);
        assert!((ipa_reflectance(25.0, 0.8, 0.85) - 0.700_934_579_439_252_3).abs() < 1e-12);
    }

    #[test]
    fn reflectance_is_strictly_monotone_in_tau() {
        for mu0 in [0.342, 0.5, 0.77, 1.0] {
            for g in [0.0, 0.5, 0.85, 0.99] {
                let rs: Vec<f64> = (0..1000)
                    .map(|i| ipa_reflectance(i as f64 * 0.158, mu0, g))
                    .collect();
                assert!(rs.windows(2).all(|w| w[1] > w[0]));
                assert!(rs.iter().all(|r| (0.0..1.0).contains(r)));
            }
        }
    }

    #[test]
    fn constant_field_renders_constant() {
        let cot = CotField::constant(16, 16, 0.1, 12.0);
        let r = render_ipa(
            &cot,
            &ViewGeometry::new(30.0, 10.0, 0.0, 1.0),
            &SceneParams::default(),
        );
        assert!(r.values.iter().all(|&v| v == r.values[0]));
    }

    #[test]
    fn oblique_sun_is_brighter() {
        let cot = field();
        let p = SceneParams::default();
        let r0 = render_ipa(&cot, &ViewGeometry::new(0.0, 0.0, 0.0, 1.0), &p);
        let r60 = render_ipa(&cot, &ViewGeometry::new(60.0, 0.0, 0.0, 1.0), &p);
        for ((a, b), t) in r0.values.iter().zip(&r60.values).zip(&cot.values) {
            if *t > 0.0 {
                assert!(b > a);
            }
        }
    }

    #[test]
    fn effects_vanish_at_nadir_without_smoothing() {
        let cot = field();
        let p = SceneParams {
            eta: 0.0,
            ..SceneParams::default()
        };
        let g = ViewGeometry::new(0.0, 0.0, 123.0, 1.0);
        let r = render_ipa(&cot, &g, &p);
        let out = apply_3d_effects(&r, &cot, &g, &p).unwrap();
        assert_eq!(out.values, r.values);
    }

    #[test]
    fn zero_gains_are_identity_at_any_sun_angle() {
        let cot = field();
        let p = SceneParams::default().without_3d();
        let g = ViewGeometry::new(55.0, 0.0, 0.0, 1.0);
        let r = render_ipa(&cot, &g, &p);
        assert_eq!(apply_3d_effects(&r, &cot, &g, &p).unwrap().values, r.values);
    }

    #[test]
    fn parallax_worked_example() {
        let g = ViewGeometry::new(0.0, 45.0, 0.0, 1.0);
        assert_eq!(parallax_shift_px(&g, 0.1), 10);
        assert_eq!(parallax_shift(&g, 0.1), (0, 10));
        let g = ViewGeometry::new(0.0, 45.0, 90.0, 1.0);
        assert_eq!(parallax_shift(&g, 0.1), (10, 0));
    }

    #[test]
    fn parallax_rolls_the_field() {
        let cot = field();
        let p = SceneParams {
            kappa: 0.0,
            eta: 0.0,
            ..SceneParams::default()
        };
        let g = ViewGeometry::new(0.0, 45.0, 0.0, 1.0);
        let r = render_ipa(&cot, &g, &p);
        let out = apply_3d_effects(&r, &cot, &g, &p).unwrap();
        for row in 0..32 {
            for col in 0..32 {
                assert_eq!(
                    out.values[row * 32 + (col + 10) % 32],
                    r.values[row * 32 + col]
                );
            }
        }
    }

    #[test]
    fn constant_field_shadow_is_identity() {
        let cot = CotField::constant(16, 16, 0.1, 9.0);
        let p = SceneParams {
            eta: 0.0,
            ..SceneParams::default()
        };
        let g = ViewGeometry::new(60.0, 0.0, 0.0, 1.0);
        let r = render_ipa(&cot, &g, &p);
        assert_eq!(apply_3d_effects(&r, &cot, &g, &p).unwrap().values, r.values);
    }

    #[test]
    fn shadow_brightens_sun_facing_slope() {
        // τ falls towards +x between columns 8 and 12: sun-facing.
        let mut values = vec![10.0; 16 * 16];
        for row in 0..16 {
            for col in 8..12 {
                values[row * 16 + col] = 10.0 - (col as f64 - 7.0);
            }
        }
        let cot = CotField::new(16, 16, 0.1, values).unwrap();
        let p = SceneParams {
            eta: 0.0,
            ..SceneParams::default()
        };
        let g = ViewGeometry::new(45.0, 0.0, 0.0, 1.0);
        let r = render_ipa(&cot, &g, &p);
        let out = apply_3d_effects(&r, &cot, &g, &p).unwrap();
        assert!(out.values[9] > r.values[9]);
    }

    #[test]
    fn blur_preserves_mean() {
        let cot = field();
        let before = cot.mean();
        let after = gaussian_blur_toroidal(&cot.values, 32, 32, 2.3);
        let after = after.iter().sum::<f64>() / after.len() as f64;
        assert!((before - after).abs() < 1e-6 * before.max(1.0));
        let big = gaussian_blur_toroidal(&cot.values, 32, 32, 20.0);
        let big = big.iter().sum::<f64>() / big.len() as f64;
        assert!((before - big).abs() < 1e-6 * before.max(1.0));
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let cot = CotField::constant(64, 64, 0.1, 10.0);
        let r = render_ipa(&cot, &ViewGeometry::nadir_sun(), &SceneParams::default());
        assert_eq!(add_noise(&r, 0.0, 1).unwrap(), r);
        let a = add_noise(&r, 0.02, 9).unwrap();
        let b = add_noise(&r, 0.02, 9).unwrap();
        assert_eq!(a, b);
        let diffs: Vec<f64> = a.values.iter().zip(&r.values).map(|(x, y)| x - y).collect();
        let n = diffs.len() as f64;
        let m = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.02).abs() < 0.002, "sd {sd}");
        assert!(add_noise(&r, -0.1, 1).is_err());
    }
}
