use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use griddpp::artifact::read_json;
use griddpp::trainer::RunRecord;
use griddpp::Error;
use griddpp_cli::config::ExperimentConfig;
use griddpp_cli::pipeline::{self, Layout, Results, RunOptions};
use griddpp_cli::report::{self, mean_stderr};

fn tiny_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/configs/tiny.json")
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig::load(&tiny_path()).unwrap()
}

fn write_config(dir: &Path, cfg: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn griddpp(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_griddpp"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

/// The machine-readable error record a failed command prints last.
fn error_record(out: &Output) -> serde_json::Value {
    assert!(!out.status.success(), "command unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().expect("stderr")).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny();
    pipeline::cmd_gen(&cfg, &Layout::new(a.path())).unwrap();
    pipeline::cmd_gen(&cfg, &Layout::new(b.path())).unwrap();
    let (fa, fb) = (files(&a.path().join("data")), files(&b.path().join("data")));
    assert_eq!(fa.len(), 5, "train, val, two test regions and the manifest");
    assert_eq!(fa, fb);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_slice(&fs::read(tiny_path()).unwrap()).unwrap();
    cfg["train"]["hiden"] = 8.into();
    let path = write_config(dir.path(), &cfg);
    let err = error_record(&griddpp(&["gen-tasks"], &path, &dir.path().join("out")));
    assert_eq!(err["error"], "json");
    assert!(err["message"].as_str().unwrap().contains("hiden"));
}

#[test]
fn missing_prerequisites_name_the_step_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let err = error_record(&griddpp(&["train", "--quiet"], &tiny_path(), dir.path()));
    assert_eq!(err["error"], "artifact");
    assert!(err["message"].as_str().unwrap().contains("gen-tasks"));

    pipeline::cmd_gen(&tiny(), &Layout::new(dir.path())).unwrap();
    let err = error_record(&griddpp(&["fit-dpp"], &tiny_path(), dir.path()));
    assert!(err["message"].as_str().unwrap().contains("build-kernel"));
}

#[test]
fn stale_artifacts_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = tiny();
    pipeline::cmd_gen(&cfg, &layout).unwrap();
    pipeline::cmd_kernel(&cfg, &layout).unwrap();
    pipeline::cmd_fit_dpp(&cfg, &layout).unwrap();

    let mut more_data = cfg.clone();
    more_data.data.n_train = Some(260);
    assert!(matches!(pipeline::load_data(&more_data, &layout), Err(Error::HashMismatch { .. })));

    let mut other_kernel = cfg.clone();
    other_kernel.kernel.bandwidth *= 2.0;
    assert!(matches!(pipeline::load_kernel(&other_kernel, &layout), Err(Error::HashMismatch { .. })));
    assert!(matches!(pipeline::load_attention(&other_kernel, &layout), Err(Error::HashMismatch { .. })));

    // Tampering with a dataset file is caught by its recorded digest.
    let train = dir.path().join("data/train.jsonl");
    let mut bytes = fs::read(&train).unwrap();
    bytes.extend_from_slice(b"\n");
    fs::write(&train, bytes).unwrap();
    assert!(matches!(pipeline::load_data(&cfg, &layout), Err(Error::HashMismatch { .. })));
}

#[test]
fn pipeline_outputs_reuse_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = tiny();
    let results = pipeline::run_all(&cfg, &layout, RunOptions::default()).unwrap();
    assert_eq!(results.conditions.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(), ["dppa", "no_dppa", "l1"]);

    let run = layout.run("dppa", 0);
    for f in ["config.json", "record.json", "metrics.csv", "regions.csv", "checkpoint.bin", "attention.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let header = fs::read_to_string(layout.regions()).unwrap();
    assert!(header.starts_with("method,task,regime,region,mean_accuracy,stderr,n_seeds\n"));

    // The sweep keeps the weight with the best seed-0 validation accuracy,
    // the earlier one on ties.
    let sweep = results.conditions[2].sweep.as_ref().unwrap();
    let best = sweep.iter().fold(sweep[0], |b, &c| if c.1 > b.1 { c } else { b });
    assert_eq!(results.conditions[2].chosen_lambda, Some(best.0));
    assert!(results.conditions[2].runs.iter().all(|r| r.contains(&format!("l1_{}_", best.0))));

    // Training again reuses every finished run.
    let before = fs::read(run.join("record.json")).unwrap();
    let again = pipeline::cmd_train(&cfg, &layout, RunOptions::default()).unwrap();
    assert_eq!(again, results);
    assert_eq!(fs::read(run.join("record.json")).unwrap(), before);

    // Evaluating the checkpoint reproduces the recorded region metrics.
    let record: RunRecord = read_json(&run.join("record.json")).unwrap();
    let regions = pipeline::cmd_eval(&cfg, &layout, &run.join("checkpoint.bin")).unwrap();
    assert_eq!(regions, record.regions);
    assert!(dir.path().join("eval/regions.csv").exists());
}

#[test]
fn eval_rejects_a_checkpoint_of_another_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_slice(&fs::read(tiny_path()).unwrap()).unwrap();
    cfg["conditions"] = serde_json::json!([{ "method": { "name": "no_dppa" } }]);
    cfg["seeds"] = 1.into();
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    assert!(griddpp(&["run", "--quiet"], &path, &out).status.success());

    cfg["train"]["hidden"] = 9.into();
    let wider = write_config(dir.path(), &cfg);
    let checkpoint = out.join("runs/no_dppa/seed0/checkpoint.bin");
    let mut args = vec!["eval", "--checkpoint"];
    args.push(checkpoint.to_str().unwrap());
    let err = error_record(&griddpp(&args, &wider, &out));
    assert_eq!(err["error"], "hash_mismatch");
}

#[test]
fn parallel_training_matches_serial() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny();
    pipeline::run_all(&cfg, &Layout::new(a.path()), RunOptions { jobs: 1, verbose: false }).unwrap();
    pipeline::run_all(&cfg, &Layout::new(b.path()), RunOptions { jobs: 3, verbose: false }).unwrap();
    assert_eq!(fs::read(a.path().join("regions.csv")).unwrap(), fs::read(b.path().join("regions.csv")).unwrap());
}

#[test]
fn report_aggregates_three_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.seeds = Some(3);
    cfg.conditions.truncate(2);
    let layout = Layout::new(dir.path().join("exp"));
    pipeline::run_all(&cfg, &layout, RunOptions::default()).unwrap();

    let out = dir.path().join("report");
    let rows = report::cmd_report(std::slice::from_ref(&layout.root), &out).unwrap();
    let results: Results = read_json(&layout.results()).unwrap();
    for c in &results.conditions {
        assert_eq!(c.runs.len(), 3);
        let records: Vec<RunRecord> =
            c.runs.iter().map(|r| read_json(&layout.root.join(r).join("record.json")).unwrap()).collect();
        for region in ["val", "1", "2"] {
            let values: Vec<f64> = records.iter().map(|r| r.region(region, "all").unwrap().value).collect();
            let (mean, se) = mean_stderr(&values);
            let row = rows.iter().find(|r| r.method == c.label && r.region == region).unwrap();
            assert_eq!(row.n_seeds, 3);
            assert!((row.mean_accuracy - mean).abs() < 1e-15 && (row.stderr - se).abs() < 1e-15);
        }
    }
    assert_eq!(report::read_regions_csv(&out.join("regions.csv")).unwrap(), rows);
    let svg = fs::read_to_string(out.join("report.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("no_dppa") && svg.contains("<polyline"));
}
