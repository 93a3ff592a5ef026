//! Synthetic cloud scenes and the radiance forward model.
//!
//! The COT ranges and the forward law here are stand-ins for a full 3D
//! radiative-transfer corpus: lognormal fields from a power-law spectrum, a
//! conservative two-stream reflectance law, and three parameterized
//! cross-pixel effects (shadowing, radiative smoothing, parallax).

mod dataset;
mod field;
mod render;

pub use dataset::{
    build_split, make_dataset, read_dataset, split_file_name, write_dataset, Dataset,
    DatasetConfig, DatasetMeta, Manifest, Scene, SplitRecord, DATASET_MAGIC, SPLITS,
};
pub use field::generate_cot_field;
pub use render::{
    add_noise, apply_3d_effects, gaussian_blur_toroidal, ipa_reflectance, parallax_shift,
    parallax_shift_px, render_ipa, render_scene, RenderOptions,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Retrieval saturation cap on optical thickness.
pub const TAU_MAX: f64 = 158.0;
pub const SZA_MAX_DEG: f64 = 70.0;
pub const VZA_MAX_DEG: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CotField {
    pub height: usize,
    pub width: usize,
    pub pixel_size_km: f64,
    pub values: Vec<f64>,
}

impl CotField {
    pub fn new(height: usize, width: usize, pixel_size_km: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::config(format!(
                "COT field {height}x{width} given {} values",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixel_size_km,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, pixel_size_km: f64, tau: f64) -> Self {
        Self {
            height,
            width,
            pixel_size_km,
            values: vec![tau; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewGeometry {
    pub sza_deg: f64,
    pub vza_deg: f64,
    pub raz_deg: f64,
    pub cloud_top_km: f64,
}

impl ViewGeometry {
    pub fn new(sza_deg: f64, vza_deg: f64, raz_deg: f64, cloud_top_km: f64) -> Self {
        Self {
            sza_deg,
            vza_deg,
            raz_deg,
            cloud_top_km,
        }
    }

    pub fn nadir_sun() -> Self {
        Self::new(0.0, 0.0, 0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=SZA_MAX_DEG).contains(&self.sza_deg)
            && (0.0..=VZA_MAX_DEG).contains(&self.vza_deg)
            && (0.0..360.0).contains(&self.raz_deg)
            && self.cloud_top_km > 0.0
            && self.cloud_top_km.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "view geometry out of range: {self:?}"
            )))
        }
    }

    pub fn mu0(&self) -> f64 {
        self.sza_deg.to_radians().cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub geometry: ViewGeometry,
    pub noise_sigma: f64,
}

impl RadianceField {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        geometry: ViewGeometry,
    ) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::config(format!(
                "radiance field {height}x{width} given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("reflectance outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            values,
            geometry,
            noise_sigma: 0.0,
        })
    }
}

/// Knobs of the synthetic scene generator and the 3D perturbation operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Power-law slope of the isotropic spectrum, `P(k) ~ k^-beta`.
    pub beta: f64,
    pub mu_ln: f64,
    pub sigma_ln: f64,
    /// Asymmetry parameter of the two-stream law.
    pub g: f64,
    /// Shadow / illuminated-slope gain.
    pub kappa: f64,
    /// Radiative smoothing scale.
    pub eta: f64,
    pub f_clear: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            beta: 3.0,
            mu_ln: 8f64.ln(),
            sigma_ln: 0.8,
            g: 0.85,
            kappa: 0.3,
            eta: 0.5,
            f_clear: 0.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.sigma_ln >= 0.0
            && (0.0..1.0).contains(&self.g)
            && (0.0..1.0).contains(&self.f_clear)
            && self.kappa >= 0.0
            && self.eta >= 0.0
            && self.mu_ln.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "scene parameters out of range: {self:?}"
            )))
        }
    }

    /// Same scene statistics with every cross-pixel effect switched off.
    pub fn without_3d(&self) -> Self {
        Self {
            kappa: 0.0,
            eta: 0.0,
            ..*self
        }
    }
}

/// Inclusive sampling ranges for the three view angles, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AngleRanges {
    pub sza: [f64; 2],
    pub vza: [f64; 2],
    pub raz: [f64; 2],
}

impl Default for AngleRanges {
    fn default() -> Self {
        Self {
            sza: [0.0, 60.0],
            vza: [0.0, 45.0],
            raz: [0.0, 360.0],
        }
    }
}

impl AngleRanges {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, r: [f64; 2], max: f64| {
            if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || r[0] < 0.0 || r[1] > max {
                Err(Error::config(format!(
                    "{name} range {r:?} must be ordered within [0, {max}]"
                )))
            } else {
                Ok(())
            }
        };
        check("sza", self.sza, SZA_MAX_DEG)?;
        check("vza", self.vza, VZA_MAX_DEG)?;
        check("raz", self.raz, 360.0)
    }

    /// Uniform draw from the ranges; azimuth is wrapped into [0, 360).
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R, cloud_top_km: f64) -> ViewGeometry {
        let mut draw = |r: [f64; 2]| {
            if r[1] > r[0] {
                rng.random_range(r[0]..r[1])
            } else {
                r[0]
            }
        };
        let sza = draw(self.sza);
        let vza = draw(self.vza);
        let raz = draw(self.raz).rem_euclid(360.0);
        ViewGeometry::new(sza, vza, raz, cloud_top_km)
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}
