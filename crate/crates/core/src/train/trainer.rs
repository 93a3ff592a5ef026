use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Checkpoint, HistoryRow, ParamSet, Provenance, TrainableModel};
use crate::scene::{
    derive_seed, render_scene, AngleRanges, Dataset, RadianceField, RenderOptions, ViewGeometry,
};
use crate::tensor::{adam_step, AdamState, Tape};
use crate::{Error, Result};

const EPOCH_STREAM: u64 = 0x7261_696e;
const VAL_STREAM: u64 = 0x7661_6c00;
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleStrategy {
    /// Fresh uniform geometry per scene per epoch.
    Multi,
    /// Always the configured geometry.
    Fixed(ViewGeometry),
}

impl AngleStrategy {
    pub fn describe(&self) -> String {
        match self {
            AngleStrategy::Multi => "multi".into(),
            AngleStrategy::Fixed(g) => format!(
                "fixed(sza={},vza={},raz={})",
                g.sza_deg, g.vza_deg, g.raz_deg
            ),
        }
    }
}

/// Learning-rate schedule over the optimizer steps of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warm-up over the first epoch, then cosine decay towards zero.
    Cosine,
}

impl LrSchedule {
    /// Rate for step `step` (0-based) of `total` at peak rate `lr`.
    pub fn rate(self, lr: f64, step: usize, total: usize, warmup: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                if step < warmup {
                    return lr * (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1);
                let progress = (step - warmup) as f64 / span as f64;
                lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub angle_strategy: AngleStrategy,
    /// Ranges for the multi-angle strategy. Azimuth defaults to the single
    /// value 0 used by the evaluation sweep.
    pub angles: AngleRanges,
    pub noise_sigma: f64,
    pub effects_3d: bool,
    /// Use only the first `n` training scenes.
    pub max_train_scenes: Option<usize>,
    pub data_dir: Option<String>,
    pub checkpoint: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-2,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            angle_strategy: AngleStrategy::Multi,
            angles: AngleRanges {
                raz: [0.0, 0.0],
                ..AngleRanges::default()
            },
            noise_sigma: 0.01,
            effects_3d: true,
            max_train_scenes: None,
            data_dir: None,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        self.angles.validate()?;
        if let AngleStrategy::Fixed(g) = &self.angle_strategy {
            g.validate()?;
        }
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            effects_3d: self.effects_3d,
            noise_sigma: self.noise_sigma,
        }
    }

    /// Seed for model initialization.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, INIT_STREAM)
    }
}

/// One draw of the training geometry.
pub fn sample_geometry<R: Rng + ?Sized>(
    rng: &mut R,
    strategy: &AngleStrategy,
    ranges: &AngleRanges,
    cloud_top_km: f64,
) -> Result<ViewGeometry> {
    match strategy {
        AngleStrategy::Fixed(g) => Ok(*g),
        AngleStrategy::Multi => {
            ranges.validate()?;
            Ok(ranges.sample(rng, cloud_top_km))
        }
    }
}

/// Provenance inputs and resume state for a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainContext {
    pub run_config_hash: String,
    pub train_dataset_sha256: String,
    /// History of the run being resumed; epochs continue after its last row.
    pub prior_history: Vec<HistoryRow>,
    pub prior_best: Option<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: Checkpoint,
    /// Parameters after the last epoch.
    pub last: ParamSet,
    pub history: Vec<HistoryRow>,
}

struct SceneJob<'a> {
    seed: u64,
    scene: &'a crate::scene::Scene,
    geometry: ViewGeometry,
    noise_seed: u64,
}

fn cloud_top(ds: &Dataset) -> f64 {
    ds.scenes
        .first()
        .and_then(|s| s.radiances.first())
        .map_or(1.0, |r| r.geometry.cloud_top_km)
}

fn render_job(job: &SceneJob, ds: &Dataset, opts: RenderOptions) -> Result<RadianceField> {
    render_scene(
        &job.scene.cot,
        &job.geometry,
        &ds.meta.scene_params,
        opts,
        job.noise_seed,
    )
}

/// Loss and per-parameter gradients of one scene.
fn scene_gradients<M: TrainableModel>(
    model: &M,
    radiance: &RadianceField,
    job: &SceneJob,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let nodes = model.params().register(&mut tape, true)?;
    let loss = model.scene_loss(&mut tape, &nodes, radiance, &job.scene.cot)?;
    let grads = tape.backward(loss)?;
    let per_param = nodes
        .iter()
        .zip(model.params().tensors())
        .map(|(&id, t)| {
            grads
                .get(id)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    Ok((tape.value(loss)[0], per_param))
}

fn scene_loss_only<M: TrainableModel>(
    model: &M,
    radiance: &RadianceField,
    scene: &crate::scene::Scene,
) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = model.params().register(&mut tape, false)?;
    let loss = model.scene_loss(&mut tape, &nodes, radiance, &scene.cot)?;
    Ok(tape.value(loss)[0])
}

fn jobs_for<'a, R: Rng>(
    rng: &mut R,
    ds: &'a Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<SceneJob<'a>>> {
    let top = cloud_top(ds);
    indices
        .iter()
        .map(|&i| {
            let geometry = sample_geometry(rng, &cfg.angle_strategy, &cfg.angles, top)?;
            let noise_seed = rng.next_u64();
            Ok(SceneJob {
                seed: ds.scenes[i].seed,
                scene: &ds.scenes[i],
                geometry,
                noise_seed,
            })
        })
        .collect()
}

/// Fits `model` on `train`, re-rendering every scene at a freshly drawn
/// geometry each epoch, and keeps the parameters with the best validation
/// loss. Validation scenes are rendered once, with geometries drawn by the
/// same strategy from a separate stream.
///
/// Results depend only on `(cfg, train, val)` and the initial model: random
/// draws happen sequentially before each batch is evaluated in parallel,
/// and gradients are reduced in scene order.
pub fn train<M: TrainableModel>(
    model: &mut M,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    ctx: &TrainContext,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config(
            "training needs non-empty train and val splits",
        ));
    }
    let train_seeds: HashSet<u64> = train.meta.seeds.iter().copied().collect();
    if let Some(s) = val.meta.seeds.iter().find(|s| train_seeds.contains(s)) {
        return Err(Error::Hygiene(format!(
            "scene seed {s} is in both train and val"
        )));
    }
    let n_train = cfg
        .max_train_scenes
        .map_or(train.len(), |m| m.min(train.len()));
    let opts = cfg.render_options();

    let mut val_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, VAL_STREAM));
    let val_indices: Vec<usize> = (0..val.len()).collect();
    let val_jobs = jobs_for(&mut val_rng, val, &val_indices, cfg)?;
    let val_inputs = val_jobs
        .par_iter()
        .map(|j| render_job(j, val, opts))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = AdamState::new(&model.params().lens(), cfg.lr);
    let mut history = ctx.prior_history.clone();
    let start = history.last().map_or(0, |h| h.epoch);
    let (mut best_epoch, mut best_val) = ctx.prior_best.unwrap_or((0, f64::INFINITY));
    let mut best_params = model.params().clone();

    let steps_per_epoch = n_train.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    for epoch in start + 1..=start + cfg.epochs {
        let epoch_lr = cfg
            .lr_schedule
            .rate(cfg.lr, step, total_steps, steps_per_epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ EPOCH_STREAM, epoch as u64));
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let jobs = jobs_for(&mut rng, train, batch, cfg)?;
            let seeds = || jobs.iter().map(|j| j.seed).collect::<Vec<_>>();
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = jobs
                .par_iter()
                .map(|job| {
                    let r = render_job(job, train, opts)?;
                    scene_gradients(&*model, &r, job)
                })
                .collect();
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            for res in results {
                let (loss, g) = match res {
                    Ok(v) => v,
                    Err(Error::Tensor(_)) => {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            seeds: seeds(),
                        })
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += loss;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    seeds: seeds(),
                });
            }
            loss_sum += batch_loss;
            let scale = 1.0 / jobs.len() as f64;
            let params = model.params_mut();
            params.zero_grad();
            for (t, g) in params
                .tensors_mut()
                .iter_mut()
                .zip(grads.expect("batches are non-empty"))
            {
                let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
                t.accumulate_grad(&g)?;
            }
            adam.lr = cfg
                .lr_schedule
                .rate(cfg.lr, step, total_steps, steps_per_epoch);
            step += 1;
            adam_step(params.tensors_mut(), &mut adam)?;
            params.zero_grad();
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    seeds: seeds(),
                });
            }
        }
        let train_loss = loss_sum / n_train as f64;
        let val_losses = val_inputs
            .par_iter()
            .zip(&val.scenes)
            .map(|(r, s)| scene_loss_only(&*model, r, s))
            .collect::<Result<Vec<_>>>()?;
        let val_loss = val_losses.iter().sum::<f64>() / val_losses.len() as f64;
        history.push(HistoryRow {
            epoch,
            train_loss,
            val_loss,
            lr: epoch_lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = model.params().clone();
        }
    }

    let provenance = Provenance {
        seed: cfg.seed,
        run_config_hash: ctx.run_config_hash.clone(),
        train_dataset_sha256: ctx.train_dataset_sha256.clone(),
        train_seeds: train.meta.seeds[..n_train].to_vec(),
        angle_strategy: cfg.angle_strategy.describe(),
        epochs_completed: history.last().map_or(0, |h| h.epoch),
        best_epoch,
        best_val_loss: best_val,
        history: history.clone(),
    };
    Ok(TrainOutcome {
        best: Checkpoint {
            model: model.spec(),
            params: best_params,
            provenance,
        },
        last: model.params().clone(),
        history,
    })
}

/// History as CSV with the run config hash in a header comment.
pub fn history_csv(history: &[HistoryRow], config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\nepoch,train_loss,val_loss,lr\n");
    for h in history {
        let _ = writeln!(out, "{},{},{},{}", h.epoch, h.train_loss, h.val_loss, h.lr);
    }
    out
}
