use std::path::Path;

use shapley_mortality::io::PipelineConfig;
use shapley_mortality::models::ModelId;
use shapley_mortality::pipeline::{execute, render_report, run_pipeline, REPORT_FILES};
use shapley_mortality::weighting::Scheme;

fn small_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml(
        r#"
        samples = 48
        seed = 7
        charts = true
        [forest]
        tree_count = 12
        max_depth = 5
        "#,
    )
    .unwrap();
    cfg.output = out.to_path_buf();
    cfg
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn default_frame_writes_every_table_and_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("report");
    let cfg = small_config(&out);
    let run = run_pipeline(&cfg).unwrap();
    for name in REPORT_FILES {
        assert!(out.join(name).exists(), "{name}");
    }
    assert!(out.join("run_manifest.json").exists());
    assert!(out.join("weights_female.svg").exists());
    for g in &run.genders {
        assert_eq!(g.weights.len(), 4);
        for w in &g.weights {
            assert!((w.total() - 1.0).abs() < 1e-12, "{} {}", w.scheme, w.total());
            assert!(w.weights.iter().all(|&v| v >= 0.0));
        }
        assert!(g.trace.worst_local_accuracy_ratio() <= 1.0);
        for h in 1..=10 {
            for &m in &cfg.models {
                assert_eq!(g.test.at_horizon(m, h).len(), 11 - h);
            }
        }
    }

    // same config, different worker count: identical CSVs
    let out2 = tmp.path().join("again");
    let mut cfg2 = small_config(&out2);
    cfg2.workers = 2;
    run_pipeline(&cfg2).unwrap();
    for name in REPORT_FILES {
        assert_eq!(read(&out, name), read(&out2, name), "{name}");
    }
    // rerunning into an existing report directory replaces it
    run_pipeline(&cfg).unwrap();
    assert_eq!(read(&out, "weights.csv"), read(&out2, "weights.csv"));
}

#[test]
fn short_horizon_shapes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&tmp.path().join("r"));
    cfg.horizon = 3;
    cfg.models = vec![ModelId::LcGaussian, ModelId::LcNoAdjust, ModelId::Fts];
    cfg.genders = vec![shapley_mortality::models::Gender::Male];
    cfg.charts = false;
    let run = execute(&cfg).unwrap();
    let files = render_report(&run).unwrap();
    let mse = &files.iter().find(|(n, _)| n == "accuracy_mse.csv").unwrap().1;
    let text = String::from_utf8(mse.clone()).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "h,Average_Male,Shapley_Male,MSE_Male,AIC_Male");
    assert_eq!(rows.len(), 5);
    assert!(rows[4].starts_with("Mean,"));
    let g = &run.genders[0];
    assert_eq!(g.weights_for(Scheme::Equal).weights, vec![1.0 / 3.0; 3]);
}

#[test]
fn refuses_to_overwrite_foreign_directories() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("keep.txt"), "mine").unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.models = vec![ModelId::LcGaussian, ModelId::LcNoAdjust];
    cfg.genders = vec![shapley_mortality::models::Gender::Female];
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(tmp.path().join("keep.txt").exists());
}
