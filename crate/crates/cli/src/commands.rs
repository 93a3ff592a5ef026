use std::fs;
use std::path::{Path, PathBuf};

use caac_core::baselines::{IpaLut, PixelMlp};
use caac_core::config::{file_sha256, RunConfig};
use caac_core::model::{
    read_checkpoint, write_checkpoint, CaacModel, Checkpoint, ModelSpec, TrainableModel,
};
use caac_core::raster::{pgm_bytes, ppm_bytes, write_bytes};
use caac_core::scene::{make_dataset, read_dataset, split_file_name, Dataset, Manifest};
use caac_core::train::{
    compare as compare_metrics, eval_radiance, evaluate, history_csv, parse_angle_grid,
    read_geometry_csv, read_metrics_csv, train as fit, AnyModel, EvalOptions, GeometryMetrics,
    Retriever, TrainContext, TrainOutcome,
};
use caac_core::{Error, Result};

use crate::{EvalArgs, EvalMethod, PlotArgs, RetrieverArgs, TrainMethod};

pub const BEST_CHECKPOINT: &str = "model.caacckpt";
pub const LAST_CHECKPOINT: &str = "last.caacckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.json";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    eprintln!("config_hash={}", cfg.hash());
    Ok(cfg)
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        Manifest::read(&manifest)?.check_disjoint()?;
    }
    read_dataset(&dir.join(split_file_name(split)))
}

pub fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    create_dir(out)?;
    let manifest = make_dataset(&cfg.data, out)?;
    for split in &manifest.splits {
        let path = out.join(&split.file);
        let size = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        eprintln!(
            "{}: {} scenes, {} bytes -> {}",
            split.split,
            split.seeds.len(),
            size,
            path.display()
        );
    }
    write_text(&out.join(CONFIG_FILE), &cfg.resolved_json())
}

fn run_training<M: TrainableModel>(
    model: &mut M,
    cfg: &RunConfig,
    data: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let train_set = load_split(data, "train")?;
    let val_set = load_split(data, "val")?;
    let mut ctx = TrainContext {
        run_config_hash: cfg.hash(),
        train_dataset_sha256: file_sha256(&data.join(split_file_name("train")))?,
        ..TrainContext::default()
    };
    if let Some(ckpt) = resume {
        ctx.prior_history = ckpt.provenance.history.clone();
        ctx.prior_best = Some((ckpt.provenance.best_epoch, ckpt.provenance.best_val_loss));
    }
    fit(model, &train_set, &val_set, &cfg.train, &ctx)
}

pub fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    method: TrainMethod,
    resume: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let prior = resume.map(read_checkpoint).transpose()?;
    let seed = cfg.train.init_seed();
    let outcome = match (method, prior.as_ref().map(|c| &c.model)) {
        (TrainMethod::Caac, None) => {
            run_training(&mut CaacModel::new(cfg.model, seed)?, &cfg, data, None)?
        }
        (TrainMethod::Mlp, None) => {
            run_training(&mut PixelMlp::new(cfg.mlp, seed)?, &cfg, data, None)?
        }
        (TrainMethod::Caac, Some(ModelSpec::Caac(c))) => {
            let ckpt = prior.as_ref().expect("matched Some");
            run_training(
                &mut CaacModel::from_params(*c, &ckpt.params)?,
                &cfg,
                data,
                Some(ckpt),
            )?
        }
        (TrainMethod::Mlp, Some(ModelSpec::Mlp(c))) => {
            let ckpt = prior.as_ref().expect("matched Some");
            run_training(
                &mut PixelMlp::from_params(*c, &ckpt.params)?,
                &cfg,
                data,
                Some(ckpt),
            )?
        }
        _ => {
            return Err(Error::config(
                "--resume checkpoint holds a different model kind than --method",
            ))
        }
    };
    create_dir(out)?;
    write_checkpoint(&out.join(BEST_CHECKPOINT), &outcome.best)?;
    let last = Checkpoint {
        params: outcome.last.clone(),
        ..outcome.best.clone()
    };
    write_checkpoint(&out.join(LAST_CHECKPOINT), &last)?;
    write_text(
        &out.join(HISTORY_FILE),
        &history_csv(&outcome.history, &cfg.hash()),
    )?;
    write_text(&out.join(CONFIG_FILE), &cfg.resolved_json())?;
    for h in &outcome.history {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}",
            h.epoch, h.train_loss, h.val_loss
        );
    }
    let p = &outcome.best.provenance;
    eprintln!(
        "best epoch {} (val {:.5}) -> {}",
        p.best_epoch,
        p.best_val_loss,
        out.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

/// A retriever together with whatever it borrows.
enum Loaded {
    Model {
        model: AnyModel,
        train_seeds: Vec<u64>,
    },
    Ipa(IpaLut),
    Oracle,
}

impl Loaded {
    fn resolve(
        args: &RetrieverArgs,
        testset: &Dataset,
        default: Option<EvalMethod>,
    ) -> Result<Self> {
        let method = args.method.or(default);
        match (method, &args.checkpoint) {
            (Some(EvalMethod::Ipa), None) => Ok(Loaded::Ipa(IpaLut::default_for(
                testset.meta.scene_params.g,
            )?)),
            (Some(EvalMethod::Oracle), None) => Ok(Loaded::Oracle),
            (Some(EvalMethod::Ipa | EvalMethod::Oracle), Some(_)) => Err(Error::config(
                "--checkpoint only applies to trained methods",
            )),
            (_, Some(path)) => {
                let ckpt = read_checkpoint(path)?;
                let model = AnyModel::from_checkpoint(&ckpt)?;
                let kind_ok = match (&model, method) {
                    (_, None)
                    | (AnyModel::Caac(_), Some(EvalMethod::Caac))
                    | (AnyModel::Mlp(_), Some(EvalMethod::Mlp)) => true,
                    _ => false,
                };
                if !kind_ok {
                    return Err(Error::config(format!(
                        "{} holds a different model kind than --method",
                        path.display()
                    )));
                }
                Ok(Loaded::Model {
                    model,
                    train_seeds: ckpt.provenance.train_seeds,
                })
            }
            (Some(m), None) => Err(Error::config(
                format!("--method {m:?} needs --checkpoint").to_lowercase(),
            )),
            (None, None) => Err(Error::config("give --checkpoint or --method")),
        }
    }

    fn retriever(&self) -> Retriever<'_> {
        match self {
            Loaded::Model { model, .. } => model.retriever(),
            Loaded::Ipa(lut) => Retriever::Ipa(lut),
            Loaded::Oracle => Retriever::Oracle,
        }
    }

    fn train_seeds(&self) -> Option<&[u64]> {
        match self {
            Loaded::Model { train_seeds, .. } => Some(train_seeds),
            _ => None,
        }
    }
}

pub fn geometry_csv_path(metrics_csv: &Path) -> PathBuf {
    metrics_csv.with_extension("geometry.csv")
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let grid = parse_angle_grid(&args.angles)?;
    let testset = load_split(&args.data, "test")?;
    let loaded = Loaded::resolve(&args.retriever, &testset, None)?;
    let opts = EvalOptions {
        effects_3d: !args.no_3d,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let mut metrics = evaluate(
        loaded.retriever(),
        &testset,
        &grid,
        &opts,
        loaded.train_seeds(),
    )?;
    if let Some(label) = &args.label {
        if label.is_empty() || label.contains([',', '\n']) {
            return Err(Error::config(
                "--label must be non-empty and free of commas",
            ));
        }
        metrics.method = label.clone();
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&args.out, &metrics.to_csv())?;
    write_text(&geometry_csv_path(&args.out), &metrics.per_geometry_csv())?;
    eprintln!(
        "{}: {} geometries x {} scenes, rmse_tau {:.4}, rmse_log {:.4}, flatness {:.3} -> {}",
        metrics.method,
        grid.len(),
        testset.len(),
        metrics.overall.rmse_tau,
        metrics.overall.rmse_log,
        metrics.flatness,
        args.out.display()
    );
    Ok(())
}

pub fn compare(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let metrics = inputs
        .iter()
        .map(|p| read_metrics_csv(p))
        .collect::<Result<Vec<_>>>()?;
    let table = compare_metrics(&metrics)?;
    if let Some(out) = out {
        write_text(out, &table.to_csv())?;
    }
    print!("{}", table.to_table());
    Ok(())
}

fn first_data_line(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .find(|l| !l.starts_with('#') && !l.trim().is_empty())
        .unwrap_or_default()
        .to_string())
}

fn error_vs_angle(rows: &[GeometryMetrics]) -> String {
    let mut out =
        String::from("sza_deg,vza_deg,raz_deg,n_pixels,rmse_tau,mae_tau,rmse_log,mean_rel_err\n");
    for r in rows {
        let (g, m) = (&r.geometry, &r.metrics);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            g.sza_deg,
            g.vza_deg,
            g.raz_deg,
            m.n_pixels,
            m.rmse_tau,
            m.mae_tau,
            m.rmse_log,
            m.mean_rel_err
        ));
    }
    out
}

/// RMSE over a complete sza × vza grid, sza down the rows.
fn rmse_grid(rows: &[GeometryMetrics]) -> Option<(usize, usize, Vec<f64>)> {
    let mut sza: Vec<f64> = rows.iter().map(|r| r.geometry.sza_deg).collect();
    let mut vza: Vec<f64> = rows.iter().map(|r| r.geometry.vza_deg).collect();
    for v in [&mut sza, &mut vza] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    if sza.len() * vza.len() != rows.len() {
        return None;
    }
    let mut values = vec![f64::NAN; rows.len()];
    for r in rows {
        let i = sza.iter().position(|&s| s == r.geometry.sza_deg)?;
        let j = vza.iter().position(|&v| v == r.geometry.vza_deg)?;
        values[i * vza.len() + j] = r.metrics.rmse_tau;
    }
    values
        .iter()
        .all(|v| v.is_finite())
        .then_some((sza.len(), vza.len(), values))
}

fn plot_metrics(path: &Path, out: &Path) -> Result<()> {
    let header = first_data_line(path)?;
    let geometry_path = if header.starts_with("method,sza_deg,") {
        path.to_path_buf()
    } else if header.starts_with("method,bin,") {
        geometry_csv_path(path)
    } else {
        return Err(Error::format(
            "metrics CSV",
            format!("{} is not a metrics file", path.display()),
        ));
    };
    let (method, rows) = read_geometry_csv(&geometry_path)?;
    write_text(&out.join("error_vs_angle.csv"), &error_vs_angle(&rows))?;
    if let Some((h, w, values)) = rmse_grid(&rows) {
        let hi = values.iter().copied().fold(0.0, f64::max);
        write_bytes(
            &out.join("rmse_by_angle.ppm"),
            &ppm_bytes(&values, h, w, 0.0, hi)?,
        )?;
    }
    eprintln!("{method}: {} geometries -> {}", rows.len(), out.display());
    Ok(())
}

fn plot_scene(args: &PlotArgs, index: usize, data: &Path, out: &Path) -> Result<()> {
    let testset = load_split(data, "test")?;
    if index >= testset.len() {
        return Err(Error::config(format!(
            "scene {index} out of range; the test split has {}",
            testset.len()
        )));
    }
    let grid = parse_angle_grid(&args.angles)?;
    let [geom] = grid.as_slice() else {
        return Err(Error::config(
            "--angles must name a single geometry for scene maps",
        ));
    };
    let loaded = Loaded::resolve(&args.retriever, &testset, Some(EvalMethod::Ipa))?;
    let opts = EvalOptions {
        effects_3d: !args.no_3d,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let scene = &testset.scenes[index];
    let r = eval_radiance(&testset, index, geom, 0, &opts)?;
    let (pred, _) = loaded.retriever().retrieve(&r, scene)?;
    let truth = &scene.cot.values;
    let err: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    let (h, w) = (r.height, r.width);
    let hi = truth.iter().chain(&pred).copied().fold(0.0, f64::max);
    for (name, values) in [
        ("tau_truth", truth),
        ("tau_pred", &pred),
        ("tau_error", &err),
    ] {
        write_bytes(
            &out.join(format!("{name}.pgm")),
            &pgm_bytes(values, h, w, 0.0, hi)?,
        )?;
        write_bytes(
            &out.join(format!("{name}.ppm")),
            &ppm_bytes(values, h, w, 0.0, hi)?,
        )?;
    }
    write_bytes(
        &out.join("reflectance.pgm"),
        &pgm_bytes(&r.values, h, w, 0.0, 1.0)?,
    )?;
    let mut csv = format!(
        "# scene_seed={}\nrow,col,reflectance,tau_truth,tau_pred,abs_error\n",
        scene.seed
    );
    for i in 0..h * w {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i / w,
            i % w,
            r.values[i],
            truth[i],
            pred[i],
            err[i]
        ));
    }
    write_text(&out.join("pixels.csv"), &csv)?;
    eprintln!(
        "scene {index} (seed {}) maps -> {}",
        scene.seed,
        out.display()
    );
    Ok(())
}

pub fn plot(args: &PlotArgs) -> Result<()> {
    create_dir(&args.out)?;
    match (&args.metrics, args.scene, &args.data) {
        (Some(m), None, _) => plot_metrics(m, &args.out),
        (None, Some(i), Some(data)) => plot_scene(args, i, data, &args.out),
        _ => Err(Error::config(
            "plot needs --metrics FILE or --scene N --data DIR",
        )),
    }
}
