mod common;

use std::fs;
use std::time::Instant;

use common::*;

#[test]
fn gen_data_writes_splits_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = smoke_data(dir.path());
    for f in ["train.caacds", "val.caacds", "test.caacds", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let again = dir.path().join("again");
    assert_ok(&caac(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--out",
        p(&again),
    ]));
    for f in ["train.caacds", "val.caacds", "test.caacds", "manifest.json"] {
        assert_eq!(
            fs::read(data.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn malformed_config_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\n  \"data\": { \"n_train\": 10,, }\n}");
    let out = caac(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "train": { "epochz": 3 } }"#);
    let out = caac(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epochz"));
}

#[test]
fn bad_thread_count_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = caac_env(
        &["gen-data", "--out", p(&dir.path().join("d"))],
        &[("CAAC_THREADS", "zero")],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_smoke_resume_and_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = smoke_data(dir.path());
    let run = dir.path().join("run");
    let t = Instant::now();
    assert_ok(&caac(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
    ]));
    assert!(
        t.elapsed().as_secs() < 60,
        "smoke training took {:?}",
        t.elapsed()
    );
    let ckpt = fs::read(run.join("model.caacckpt")).unwrap();
    assert!(ckpt.starts_with(b"CAACCKPT1\n"));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("# config_hash="));
    assert_eq!(history.lines().count(), 2 + 2);

    let resumed = dir.path().join("resumed");
    let last = run.join("last.caacckpt");
    assert_ok(&caac(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&resumed),
        "--resume",
        p(&last),
    ]));
    let history = fs::read_to_string(resumed.join("history.csv")).unwrap();
    let epochs: Vec<&str> = history
        .lines()
        .skip(2)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);

    let wrong_kind = caac(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&resumed),
        "--resume",
        p(&last),
        "--method",
        "mlp",
    ]);
    assert_eq!(wrong_kind.status.code(), Some(2));

    let missing = caac(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&dir.path().join("nowhere")),
        "--out",
        p(&run),
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn mlp_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = smoke_data(dir.path());
    let run = dir.path().join("mlp");
    assert_ok(&caac(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--method",
        "mlp",
    ]));
    let metrics = dir.path().join("mlp.csv");
    let ckpt = run.join("model.caacckpt");
    assert_ok(&caac(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--method",
        "mlp",
        "--data",
        p(&data),
        "--out",
        p(&metrics),
    ]));
    let text = fs::read_to_string(&metrics).unwrap();
    assert!(text.lines().any(|l| l.starts_with("mlp,overall,")));
    let mismatch = caac(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--method",
        "caac",
        "--data",
        p(&data),
        "--out",
        p(&metrics),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn eval_ipa_needs_no_checkpoint_and_writes_bins() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = smoke_data(dir.path());
    let out = dir.path().join("m/ipa.csv");
    assert_ok(&caac(&[
        "eval",
        "--method",
        "ipa",
        "--data",
        p(&data),
        "--angles",
        "sza=0:60:15,vza=0:45:15",
        "--out",
        p(&out),
    ]));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("# config_hash=") && text.contains("# testset="));
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    // five 10° sza bins (0, 15, 30, 45, 60 fall in distinct bins), four vza bins, one overall
    assert_eq!(rows.len(), 1 + 5 + 4);
    assert_eq!(rows.iter().filter(|r| r.contains(",overall,")).count(), 1);
    let geometry = fs::read_to_string(dir.path().join("m/ipa.geometry.csv")).unwrap();
    assert_eq!(
        geometry.lines().filter(|l| !l.starts_with('#')).count(),
        1 + 20
    );

    let neither = caac(&["eval", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(neither.status.code(), Some(2));
    let caac_without_ckpt = caac(&[
        "eval",
        "--method",
        "caac",
        "--data",
        p(&data),
        "--out",
        p(&out),
    ]);
    assert_eq!(caac_without_ckpt.status.code(), Some(2));
    let bad_grid = caac(&[
        "eval",
        "--method",
        "ipa",
        "--data",
        p(&data),
        "--angles",
        "sza=0:60",
        "--out",
        p(&out),
    ]);
    assert_eq!(bad_grid.status.code(), Some(2));
}

#[test]
fn compare_ratios_flatness_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = smoke_data(dir.path());
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_ok(&caac(&[
        "eval",
        "--method",
        "ipa",
        "--data",
        p(&data),
        "--out",
        p(&a),
    ]));
    assert_ok(&caac(&[
        "eval",
        "--method",
        "ipa",
        "--data",
        p(&data),
        "--angles",
        "sza=0:30:30",
        "--out",
        p(&b),
    ]));

    let table = dir.path().join("cmp.csv");
    let out = caac(&["compare", "--metrics", p(&a), "--out", p(&table)]);
    assert_ok(&out);
    let csv = fs::read_to_string(&table).unwrap();
    let header = csv.lines().find(|l| l.starts_with("method,")).unwrap();
    assert!(header.contains("flatness"));
    let row: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    assert_eq!(row[2], "1");
    assert!(String::from_utf8_lossy(&out.stdout).contains("flatness"));

    let mismatch = caac(&["compare", "--metrics", p(&a), p(&b)]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn plot_scene_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = smoke_data(dir.path());
    let maps = dir.path().join("maps");
    assert_ok(&caac(&[
        "plot",
        "--scene",
        "1",
        "--data",
        p(&data),
        "--method",
        "oracle",
        "--out",
        p(&maps),
    ]));
    let err = fs::read(maps.join("tau_error.pgm")).unwrap();
    assert!(err.starts_with(b"P5\n32 32\n255\n"));
    assert!(err[err.len() - 1024..].iter().all(|&b| b == 0));
    let truth = fs::read(maps.join("tau_truth.ppm")).unwrap();
    assert_eq!(truth.len(), b"P6\n32 32\n255\n".len() + 3 * 1024);
    assert!(maps.join("pixels.csv").is_file());

    let metrics = dir.path().join("ipa.csv");
    assert_ok(&caac(&[
        "eval",
        "--method",
        "ipa",
        "--data",
        p(&data),
        "--angles",
        "sza=0:60:30,vza=0:30:15",
        "--out",
        p(&metrics),
    ]));
    let curves = dir.path().join("curves");
    assert_ok(&caac(&[
        "plot",
        "--metrics",
        p(&metrics),
        "--out",
        p(&curves),
    ]));
    let csv = fs::read_to_string(curves.join("error_vs_angle.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
    assert!(curves.join("rmse_by_angle.ppm").is_file());

    let missing = caac(&[
        "plot",
        "--metrics",
        p(&dir.path().join("none.csv")),
        "--out",
        p(&curves),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let out_of_range = caac(&[
        "plot",
        "--scene",
        "9",
        "--data",
        p(&data),
        "--out",
        p(&maps),
    ]);
    assert_eq!(out_of_range.status.code(), Some(2));
}

#[test]
fn constant_field_maps_to_constant_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{ "data": { "n_train": 1, "n_val": 1, "n_test": 1, "height": 16, "width": 16, "scene": { "sigma_ln": 0.0 } } }"#,
    );
    let data = dir.path().join("data");
    assert_ok(&caac(&["gen-data", "--config", p(&cfg), "--out", p(&data)]));
    let maps = dir.path().join("maps");
    assert_ok(&caac(&[
        "plot",
        "--scene",
        "0",
        "--data",
        p(&data),
        "--method",
        "oracle",
        "--out",
        p(&maps),
    ]));
    let img = fs::read(maps.join("tau_truth.pgm")).unwrap();
    let body = &img[img.len() - 256..];
    assert!(body.iter().all(|&b| b == body[0]));
}
