use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{ErrorAccum, Metrics};
use crate::baselines::{retrieve_ipa, IpaLut, PixelMlp};
use crate::config::config_hash;
use crate::model::{CaacModel, Checkpoint, ModelSpec, TrainableModel};
use crate::scene::{
    derive_seed, render_scene, Dataset, RadianceField, RenderOptions, Scene, ViewGeometry,
};
use crate::{Error, Result};

/// Anything that maps a radiance field to a τ field of the same grid.
#[derive(Debug, Clone, Copy)]
pub enum Retriever<'a> {
    Caac(&'a CaacModel),
    Mlp(&'a PixelMlp),
    Ipa(&'a IpaLut),
    /// Returns the truth; checks the evaluation plumbing.
    Oracle,
}

impl Retriever<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Retriever::Caac(_) => "caac",
            Retriever::Mlp(_) => "mlp",
            Retriever::Ipa(_) => "ipa",
            Retriever::Oracle => "oracle",
        }
    }

    /// τ per pixel and a saturation mask (only the LUT can saturate).
    pub fn retrieve(&self, r: &RadianceField, truth: &Scene) -> Result<(Vec<f64>, Vec<bool>)> {
        let n = r.values.len();
        match self {
            Retriever::Caac(m) => {
                m.config().check_grid(r.height, r.width)?;
                Ok((m.predict(r)?, vec![false; n]))
            }
            Retriever::Mlp(m) => Ok((m.predict(r)?, vec![false; n])),
            Retriever::Ipa(lut) => {
                let out = retrieve_ipa(r, lut)?;
                Ok((out.tau, out.saturated))
            }
            Retriever::Oracle => Ok((truth.cot.values.clone(), vec![false; n])),
        }
    }
}

/// A trained network restored from a checkpoint.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Caac(CaacModel),
    Mlp(PixelMlp),
}

impl AnyModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(match &ckpt.model {
            ModelSpec::Caac(c) => AnyModel::Caac(CaacModel::from_params(*c, &ckpt.params)?),
            ModelSpec::Mlp(c) => AnyModel::Mlp(PixelMlp::from_params(*c, &ckpt.params)?),
        })
    }

    pub fn retriever(&self) -> Retriever<'_> {
        match self {
            AnyModel::Caac(m) => Retriever::Caac(m),
            AnyModel::Mlp(m) => Retriever::Mlp(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub effects_3d: bool,
    pub noise_sigma: f64,
    /// Base of the per-(scene, geometry) noise seeds.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            effects_3d: true,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl EvalOptions {
    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            effects_3d: self.effects_3d,
            noise_sigma: self.noise_sigma,
        }
    }
}

const DEFAULT_CLOUD_TOP_KM: f64 = 1.0;

fn parse_axis(key: &str, spec: &str) -> Result<Vec<f64>> {
    let bad = || {
        Error::config(format!(
            "bad angle range {key}={spec:?}; expected start:stop:step or a single value"
        ))
    };
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [v] => Ok(vec![*v]),
        [start, stop, step] => {
            if !(*step > 0.0) || stop < start {
                return Err(bad());
            }
            // inclusive stop, tolerant of rounding in the step count
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            Ok((0..=n).map(|i| start + step * i as f64).collect())
        }
        _ => Err(bad()),
    }
}

/// Parses `"sza=0:60:15,vza=0:45:15"` into the Cartesian product of the
/// listed angles. Each axis is `start:stop:step` with an inclusive stop, or
/// a single value; `raz` and `top` (cloud-top km) are optional. Missing
/// angles default to 0 and the cloud top to 1 km. Geometries are ordered
/// sza-major, then vza, then raz.
pub fn parse_angle_grid(spec: &str) -> Result<Vec<ViewGeometry>> {
    let (mut sza, mut vza, mut raz, mut top) =
        (vec![0.0], vec![0.0], vec![0.0], DEFAULT_CLOUD_TOP_KM);
    let mut seen = HashSet::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("angle grid item {item:?} lacks '='")))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::config(format!("angle grid repeats {key:?}")));
        }
        match key {
            "sza" => sza = parse_axis(key, value)?,
            "vza" => vza = parse_axis(key, value)?,
            "raz" => raz = parse_axis(key, value)?,
            "top" => {
                top = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad cloud top {value:?}")))?;
            }
            other => return Err(Error::config(format!("unknown angle grid key {other:?}"))),
        }
    }
    let mut grid = Vec::with_capacity(sza.len() * vza.len() * raz.len());
    for &s in &sza {
        for &v in &vza {
            for &a in &raz {
                let g = ViewGeometry::new(s, v, a, top);
                g.validate()?;
                grid.push(g);
            }
        }
    }
    Ok(grid)
}

/// Identifies what a metrics table was computed on, so comparisons can
/// refuse to mix test sets.
pub fn testset_id(testset: &Dataset, grid: &[ViewGeometry], opts: &EvalOptions) -> String {
    config_hash(&(&testset.meta.config_hash, &testset.meta.seeds, grid, opts))
}

/// Radiance observed for test scene `scene` at grid geometry `index`.
pub fn eval_radiance(
    testset: &Dataset,
    scene: usize,
    geom: &ViewGeometry,
    index: usize,
    opts: &EvalOptions,
) -> Result<RadianceField> {
    let s = &testset.scenes[scene];
    let noise_seed = derive_seed(opts.seed ^ s.seed, index as u64);
    render_scene(
        &s.cot,
        geom,
        &testset.meta.scene_params,
        opts.render_options(),
        noise_seed,
    )
}

/// Renders every test scene at every grid geometry, retrieves τ and
/// accumulates errors per geometry. Scenes run in parallel; sums are
/// reduced in scene order so results do not depend on the thread count.
pub fn evaluate(
    retriever: Retriever,
    testset: &Dataset,
    grid: &[ViewGeometry],
    opts: &EvalOptions,
    train_seeds: Option<&[u64]>,
) -> Result<Metrics> {
    if grid.is_empty() {
        return Err(Error::config("angle grid is empty"));
    }
    if testset.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    if let Some(train) = train_seeds {
        let train: HashSet<u64> = train.iter().copied().collect();
        if let Some(s) = testset.meta.seeds.iter().find(|s| train.contains(s)) {
            return Err(Error::Hygiene(format!(
                "test scene seed {s} was used for training"
            )));
        }
    }
    let per_scene: Vec<Vec<ErrorAccum>> = (0..testset.len())
        .into_par_iter()
        .map(|i| {
            let scene = &testset.scenes[i];
            grid.iter()
                .enumerate()
                .map(|(k, g)| {
                    let r = eval_radiance(testset, i, g, k, opts)?;
                    let (tau, sat) = retriever.retrieve(&r, scene)?;
                    let mut acc = ErrorAccum::default();
                    for ((&p, &t), &s) in tau.iter().zip(&scene.cot.values).zip(&sat) {
                        acc.add_pixel(p, t, s);
                    }
                    Ok(acc)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut totals = vec![ErrorAccum::default(); grid.len()];
    for scene in &per_scene {
        for (t, a) in totals.iter_mut().zip(scene) {
            t.merge(a);
        }
    }
    let per_geometry: Vec<(ViewGeometry, ErrorAccum)> = grid.iter().copied().zip(totals).collect();
    let mut m = Metrics::from_geometries(
        retriever.name(),
        &testset_id(testset, grid, opts),
        &per_geometry,
    );
    m.config_hash = testset.meta.config_hash.clone();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_split, DatasetConfig, SceneParams};

    fn small_testset(effects_3d: bool) -> Dataset {
        let cfg = DatasetConfig {
            n_train: 2,
            n_val: 1,
            n_test: 3,
            height: 16,
            width: 16,
            effects_3d,
            ..DatasetConfig::default()
        };
        build_split(&cfg, "test").unwrap()
    }

    #[test]
    fn grid_syntax() {
        let g = parse_angle_grid("sza=0:60:15,vza=0:45:15").unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], ViewGeometry::new(0.0, 0.0, 0.0, 1.0));
        assert_eq!(g[19], ViewGeometry::new(60.0, 45.0, 0.0, 1.0));
        assert_eq!(g[1].vza_deg, 15.0);
        assert_eq!(
            parse_angle_grid("sza=10,raz=0:90:45,top=2").unwrap().len(),
            3
        );
        assert_eq!(parse_angle_grid("sza=0:0.3:0.1").unwrap().len(), 4);
    }

    #[test]
    fn grid_syntax_errors() {
        for bad in [
            "sza=0:60",
            "sza=0:60:0",
            "sza=60:0:15",
            "foo=1",
            "sza",
            "sza=1,sza=2",
            "sza=80",
            "vza=0:90:30",
        ] {
            assert!(
                matches!(parse_angle_grid(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn oracle_has_zero_error() {
        let ts = small_testset(true);
        let grid = parse_angle_grid("sza=0:60:15,vza=0:30:30").unwrap();
        let m = evaluate(Retriever::Oracle, &ts, &grid, &EvalOptions::default(), None).unwrap();
        assert_eq!(m.overall.rmse_tau, 0.0);
        assert_eq!(m.overall.rmse_log, 0.0);
        assert_eq!(m.flatness, 1.0);
        assert_eq!(m.overall.n_pixels, 3 * 256 * grid.len() as u64);
        assert_eq!(m.per_geometry.len(), grid.len());
    }

    #[test]
    fn ipa_on_clean_ipa_testset_round_trips() {
        let ts = small_testset(false);
        let lut = IpaLut::default_for(SceneParams::default().g).unwrap();
        let grid = parse_angle_grid("sza=0:60:15").unwrap();
        let opts = EvalOptions {
            effects_3d: false,
            noise_sigma: 0.0,
            seed: 0,
        };
        let m = evaluate(Retriever::Ipa(&lut), &ts, &grid, &opts, None).unwrap();
        assert!(m.overall.rmse_log < 1e-3, "{}", m.overall.rmse_log);
    }

    #[test]
    fn overlapping_training_seeds_are_rejected() {
        let ts = small_testset(true);
        let grid = parse_angle_grid("sza=0").unwrap();
        let train = [1u64, ts.meta.seeds[1]];
        assert!(matches!(
            evaluate(
                Retriever::Oracle,
                &ts,
                &grid,
                &EvalOptions::default(),
                Some(&train)
            ),
            Err(Error::Hygiene(_))
        ));
    }

    #[test]
    fn result_is_independent_of_thread_count() {
        let ts = small_testset(true);
        let lut = IpaLut::default_for(0.85).unwrap();
        let grid = parse_angle_grid("sza=0:60:30,vza=0:30:30").unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    evaluate(
                        Retriever::Ipa(&lut),
                        &ts,
                        &grid,
                        &EvalOptions::default(),
                        None,
                    )
                    .unwrap()
                })
        };
        assert_eq!(run(1).to_csv(), run(4).to_csv());
    }

    #[test]
    fn testset_id_tracks_grid_and_options() {
        let ts = small_testset(true);
        let a = parse_angle_grid("sza=0:60:15").unwrap();
        let b = parse_angle_grid("sza=0:45:15").unwrap();
        let o = EvalOptions::default();
        assert_eq!(testset_id(&ts, &a, &o), testset_id(&ts, &a, &o));
        assert_ne!(testset_id(&ts, &a, &o), testset_id(&ts, &b, &o));
        assert_ne!(
            testset_id(&ts, &a, &o),
            testset_id(&ts, &a, &EvalOptions { seed: 1, ..o })
        );
    }
}
