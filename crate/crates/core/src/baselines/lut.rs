use crate::scene::{ipa_reflectance, CotField, RadianceField, SZA_MAX_DEG, TAU_MAX};
use crate::{Error, Result};

/// Reflectance table over `(mu0, tau)` for per-pixel inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct IpaLut {
    g: f64,
    tau_grid: Vec<f64>,
    mu0_grid: Vec<f64>,
    /// Row-major `[mu0, tau]`.
    table: Vec<f64>,
}

/// Per-pixel retrieval result with a saturation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub height: usize,
    pub width: usize,
    pub tau: Vec<f64>,
    pub saturated: Vec<bool>,
}

impl Retrieval {
    pub fn into_cot(self, pixel_size_km: f64) -> CotField {
        CotField {
            height: self.height,
            width: self.width,
            pixel_size_km,
            values: self.tau,
        }
    }

    pub fn saturated_count(&self) -> usize {
        self.saturated.iter().filter(|&&s| s).count()
    }
}

fn strictly_ascending(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0]) && v.iter().all(|x| x.is_finite())
}

impl IpaLut {
    /// `0` followed by `knots - 1` log-spaced values from 0.01 to `TAU_MAX`.
    pub fn default_tau_grid(knots: usize) -> Vec<f64> {
        let knots = knots.max(2);
        let (lo, hi) = (0.01f64.ln(), TAU_MAX.ln());
        let mut grid = vec![0.0];
        let n = knots - 1;
        grid.extend((0..n).map(|i| {
            if n == 1 {
                TAU_MAX
            } else {
                (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp()
            }
        }));
        *grid.last_mut().expect("non-empty") = TAU_MAX;
        grid
    }

    /// `knots` evenly spaced values from cos(70°) to 1.
    pub fn default_mu0_grid(knots: usize) -> Vec<f64> {
        let lo = SZA_MAX_DEG.to_radians().cos();
        if knots <= 1 {
            return vec![1.0];
        }
        let mut grid: Vec<f64> = (0..knots)
            .map(|i| lo + (1.0 - lo) * i as f64 / (knots - 1) as f64)
            .collect();
        grid[0] = lo;
        grid[knots - 1] = 1.0;
        grid
    }

    /// 256 tau knots by 64 mu0 knots.
    pub fn default_for(g: f64) -> Result<Self> {
        Self::build(g, Self::default_tau_grid(256), Self::default_mu0_grid(64))
    }

    pub fn build(g: f64, tau_grid: Vec<f64>, mu0_grid: Vec<f64>) -> Result<Self> {
        if tau_grid.len() < 2 || mu0_grid.is_empty() {
            return Err(Error::config(
                "LUT needs at least two tau knots and one mu0 knot",
            ));
        }
        if !strictly_ascending(&tau_grid) || !strictly_ascending(&mu0_grid) {
            return Err(Error::config("LUT grids must be strictly ascending"));
        }
        if tau_grid[0] != 0.0 {
            return Err(Error::config("tau grid must start at 0"));
        }
        if mu0_grid[0] <= 0.0 || mu0_grid[mu0_grid.len() - 1] > 1.0 {
            return Err(Error::config("mu0 grid must lie in (0, 1]"));
        }
        let table: Vec<f64> = mu0_grid
            .iter()
            .flat_map(|&mu0| tau_grid.iter().map(move |&t| ipa_reflectance(t, mu0, g)))
            .collect();
        let lut = Self {
            g,
            tau_grid,
            mu0_grid,
            table,
        };
        for i in 0..lut.mu0_grid.len() {
            let row = lut.row(i);
            if row[0] != 0.0 || !strictly_ascending(row) {
                return Err(Error::config(format!(
                    "LUT row {i} is not strictly increasing from 0; forward model is broken"
                )));
            }
        }
        Ok(lut)
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn tau_grid(&self) -> &[f64] {
        &self.tau_grid
    }

    pub fn mu0_grid(&self) -> &[f64] {
        &self.mu0_grid
    }

    pub fn row(&self, mu0_index: usize) -> &[f64] {
        let n = self.tau_grid.len();
        &self.table[mu0_index * n..(mu0_index + 1) * n]
    }

    pub fn entry(&self, mu0_index: usize, tau_index: usize) -> f64 {
        self.row(mu0_index)[tau_index]
    }

    /// Inverts one row by binary search and linear interpolation. Returns
    /// the top knot and `true` when `r` is at or above the row maximum.
    fn invert_row(&self, mu0_index: usize, r: f64) -> (f64, bool) {
        let row = self.row(mu0_index);
        if r <= 0.0 {
            return (0.0, false);
        }
        let last = row.len() - 1;
        if r >= row[last] {
            return (self.tau_grid[last], true);
        }
        // first index with row[i] > r; row[0] = 0 < r so i >= 1
        let i = row.partition_point(|&v| v <= r);
        let (r0, r1) = (row[i - 1], row[i]);
        let (t0, t1) = (self.tau_grid[i - 1], self.tau_grid[i]);
        (t0 + (t1 - t0) * (r - r0) / (r1 - r0), false)
    }

    fn bracket_mu0(&self, mu0: f64) -> Result<(usize, usize, f64)> {
        const TOL: f64 = 1e-12;
        let (lo, hi) = (self.mu0_grid[0], self.mu0_grid[self.mu0_grid.len() - 1]);
        if !(mu0 >= lo - TOL && mu0 <= hi + TOL) {
            return Err(Error::config(format!(
                "mu0 {mu0} outside LUT range [{lo}, {hi}]"
            )));
        }
        if self.mu0_grid.len() == 1 {
            return Ok((0, 0, 0.0));
        }
        let mu0 = mu0.clamp(lo, hi);
        let j = self
            .mu0_grid
            .partition_point(|&m| m <= mu0)
            .clamp(1, self.mu0_grid.len() - 1);
        let (m0, m1) = (self.mu0_grid[j - 1], self.mu0_grid[j]);
        Ok((j - 1, j, (mu0 - m0) / (m1 - m0)))
    }

    /// Single-pixel inversion at a given `mu0`.
    pub fn invert(&self, r: f64, mu0: f64) -> Result<(f64, bool)> {
        let (a, b, w) = self.bracket_mu0(mu0)?;
        let (ta, sa) = self.invert_row(a, r);
        let (tb, sb) = self.invert_row(b, r);
        let sat = (sa && w < 1.0) || (sb && w > 0.0) || (a == b && sa);
        if sat {
            return Ok((TAU_MAX, true));
        }
        Ok(((ta + w * (tb - ta)).clamp(0.0, TAU_MAX), false))
    }
}

/// Independent-pixel inversion of a radiance field; no spatial context.
pub fn retrieve_ipa(r: &RadianceField, lut: &IpaLut) -> Result<Retrieval> {
    let mu0 = r.geometry.mu0();
    lut.bracket_mu0(mu0)?;
    let mut tau = Vec::with_capacity(r.values.len());
    let mut saturated = Vec::with_capacity(r.values.len());
    for &v in &r.values {
        let (t, s) = lut.invert(v, mu0)?;
        tau.push(t);
        saturated.push(s);
    }
    Ok(Retrieval {
        height: r.height,
        width: r.width,
        tau,
        saturated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_ipa, ViewGeometry};

    #[test]
    fn table_invariants_and_closed_form_entry() {
        let lut = IpaLut::build(0.85, vec![0.0, 5.0, 10.0, 100.0], vec![0.5, 1.0]).unwrap();
        for i in 0..2 {
            assert_eq!(lut.entry(i, 0), 0.0);
        }
        assert!((lut.entry(1, 2) - 0.428_571_428_571_428_5).abs() < 1e-12);
        assert!((lut.entry(0, 2) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn two_knot_grid_is_valid() {
        let lut = IpaLut::build(0.85, vec![0.0, TAU_MAX], IpaLut::default_mu0_grid(4)).unwrap();
        assert_eq!(lut.tau_grid().len(), 2);
        assert!(lut.row(0)[1] > 0.0);
    }

    #[test]
    fn bad_grids_are_rejected() {
        assert!(IpaLut::build(0.85, vec![0.0, 2.0, 1.0], vec![1.0]).is_err());
        assert!(IpaLut::build(0.85, vec![0.0], vec![1.0]).is_err());
        assert!(IpaLut::build(0.85, vec![0.0, 1.0], vec![]).is_err());
        // g = 1 makes every row identically zero
        assert!(IpaLut::build(1.0, vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn zero_radiance_gives_zero_tau() {
        let lut = IpaLut::default_for(0.85).unwrap();
        let r = RadianceField::new(8, 8, vec![0.0; 64], ViewGeometry::new(20.0, 0.0, 0.0, 1.0))
            .unwrap();
        let out = retrieve_ipa(&r, &lut).unwrap();
        assert!(out.tau.iter().all(|&t| t == 0.0));
        assert_eq!(out.saturated_count(), 0);
    }

    #[test]
    fn worked_round_trip() {
        let lut = IpaLut::default_for(0.85).unwrap();
        let r = ipa_reflectance(25.0, 0.8, 0.85);
        assert!((r - 0.70093).abs() < 1e-5);
        let (t, s) = lut.invert(r, 0.8).unwrap();
        assert!(!s);
        assert!((t - 25.0).abs() < 25.0 * 1e-3, "{t}");
    }

    #[test]
    fn saturation_sets_mask() {
        let lut = IpaLut::default_for(0.85).unwrap();
        let (t, s) = lut.invert(0.999, 0.9).unwrap();
        assert!(s);
        assert_eq!(t, TAU_MAX);
    }

    #[test]
    fn out_of_range_mu0_is_an_error() {
        let lut = IpaLut::build(0.85, IpaLut::default_tau_grid(16), vec![0.5, 1.0]).unwrap();
        let r = RadianceField::new(8, 8, vec![0.3; 64], ViewGeometry::new(70.0, 0.0, 0.0, 1.0))
            .unwrap();
        assert!(matches!(retrieve_ipa(&r, &lut), Err(Error::Config(_))));
    }

    #[test]
    fn rendered_field_round_trips() {
        let lut = IpaLut::default_for(0.85).unwrap();
        let values: Vec<f64> = (0..64)
            .map(|i| 0.1 * (1000f64).powf(i as f64 / 63.0))
            .collect();
        let cot = CotField::new(8, 8, 0.1, values).unwrap();
        for sza in [3.0, 17.5, 33.0, 48.2, 61.0, 69.0] {
            let g = ViewGeometry::new(sza, 0.0, 0.0, 1.0);
            let r = render_ipa(&cot, &g, &crate::scene::SceneParams::default());
            let out = retrieve_ipa(&r, &lut).unwrap();
            for (t, truth) in out.tau.iter().zip(&cot.values) {
                assert!(
                    (t - truth).abs() <= 1e-3 * truth,
                    "sza {sza}: {t} vs {truth}"
                );
            }
        }
    }
}
