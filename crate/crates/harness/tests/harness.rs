use std::path::PathBuf;

use dnt_core::model::{NormSetting, Precision};
use dnt_core::optim::OptimizerKind;
use dnt_harness::ablate::{run_grid, Grid, DELTA_HEADER};
use dnt_harness::checkpoint::Checkpoint;
use dnt_harness::config::RunConfig;
use dnt_harness::data::MarkovSource;
use dnt_harness::report::{ABLATION_HEADER, GRADS_HEADER, HISTOGRAM_HEADER, LOSS_HEADER, SPECTRA_HEADER};
use dnt_harness::train::train;
use dnt_harness::verify::{self, Scope, VerifyOptions};
use dnt_harness::HarnessError;

fn tiny(setting: NormSetting, kind: OptimizerKind, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::toy(setting, kind);
    cfg.model.vocab = 8;
    cfg.model.d_model = 8;
    cfg.model.depth = 1;
    cfg.model.seq_len = 8;
    cfg.train.steps = steps;
    cfg.train.batch = 4;
    cfg.train.eval_windows = 4;
    cfg.data.length = 4000;
    cfg
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dnt-harness-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn header_of(path: &std::path::Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

#[test]
fn zero_steps_reports_initial_loss_only() {
    let run = train(&tiny(NormSetting::S5, OptimizerKind::Msgdw, 0)).unwrap();
    assert!(run.report.losses.is_empty());
    assert!(run.report.diagnostics.grads.is_empty());
    assert_eq!(run.report.initial_loss, run.report.final_loss);
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    for precision in [Precision::F32, Precision::F64] {
        let mut cfg = tiny(NormSetting::S2, OptimizerKind::Adamw, 12);
        cfg.train.precision = precision;
        let a = train(&cfg).unwrap().report;
        let b = train(&cfg).unwrap().report;
        assert_eq!(a.losses.len(), 12);
        let bits = |r: &dnt_harness::report::RunReport| r.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    }
}

#[test]
fn precisions_agree_closely() {
    let mut cfg = tiny(NormSetting::S5, OptimizerKind::Msgdw, 5);
    cfg.train.precision = Precision::F64;
    let hi = train(&cfg).unwrap().report;
    cfg.train.precision = Precision::F32;
    let lo = train(&cfg).unwrap().report;
    for (a, b) in hi.losses.iter().zip(&lo.losses) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn config_echo_round_trips() {
    let run = train(&tiny(NormSetting::S3, OptimizerKind::Msgdw, 2)).unwrap();
    let echo = run.report.config.to_toml().unwrap();
    assert_eq!(RunConfig::parse(&echo).unwrap(), run.report.config);
    let json = serde_json::to_string(&run.report).unwrap();
    let back: dnt_harness::report::RunReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, run.report);
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    for kind in [OptimizerKind::Msgdw, OptimizerKind::Adamw] {
        let cfg = tiny(NormSetting::S4, kind, 3);
        let run = train(&cfg).unwrap();
        let ck = Checkpoint::new(&cfg, &run.model, &run.state);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.state.step, 3);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = scratch(&format!("ckpt-{kind}"));
        let path = dir.join("checkpoint.bin");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let cfg = tiny(NormSetting::S1, OptimizerKind::Adamw, 1);
    let run = train(&cfg).unwrap();
    let bytes = Checkpoint::new(&cfg, &run.model, &run.state).to_bytes().unwrap();
    let reject = |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(HarnessError::Checkpoint(_) | HarnessError::Serde(_)));
    assert!(reject(&bytes[..bytes.len() - 8]));
    assert!(reject(&[bytes.as_slice(), &[0u8; 8]].concat()));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(reject(&bad_magic));
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(reject(&bad_version));
    assert!(reject(&bytes[..10]));
}

#[test]
fn optimizer_state_serializes_bit_exactly() {
    let run = train(&tiny(NormSetting::S5, OptimizerKind::Adamw, 4)).unwrap();
    let json = serde_json::to_string(&run.state).unwrap();
    let back: dnt_core::optim::OptimizerState = serde_json::from_str(&json).unwrap();
    assert_eq!(back, run.state);
}

#[test]
fn run_directory_csvs_match_documented_headers() {
    let run = train(&tiny(NormSetting::S5, OptimizerKind::Msgdw, 10)).unwrap();
    let dir = scratch("rundir");
    dnt_harness::report::write_run_dir(&dir, &run.report).unwrap();
    assert_eq!(header_of(&dir.join("loss.csv")), LOSS_HEADER);
    assert_eq!(header_of(&dir.join("grads.csv")), GRADS_HEADER);
    assert_eq!(header_of(&dir.join("histogram.csv")), HISTOGRAM_HEADER);
    assert_eq!(header_of(&dir.join("spectra.csv")), SPECTRA_HEADER);

    let rows = csv::Reader::from_path(dir.join("loss.csv")).unwrap().records().count();
    assert_eq!(rows, run.report.losses.len());
    // every histogram sums (with under/overflow) to the entry count
    for g in &run.report.diagnostics.grads {
        assert_eq!(g.histogram.total(), g.entries as u64);
    }
    let lines = std::fs::read_to_string(dir.join("grads.jsonl")).unwrap().lines().count();
    assert_eq!(lines, run.report.diagnostics.grads.len());
}

#[test]
fn one_by_one_grid_equals_train() {
    let cfg = tiny(NormSetting::S5, OptimizerKind::Msgdw, 6);
    let grid = Grid {
        settings: vec![NormSetting::S5],
        optimizers: vec![OptimizerKind::Msgdw],
        seeds: vec![cfg.seed],
        jobs: 1,
    };
    let g = run_grid(&cfg, &grid).unwrap();
    let direct = train(&cfg).unwrap().report;
    let cell = g.cells[0].outcome.as_ref().unwrap();
    assert_eq!(cell.losses, direct.losses);
    assert_eq!(cell.final_loss, direct.final_loss);
    assert!(g.deltas.is_empty());
}

#[test]
fn two_by_two_grid_has_four_reports_and_deltas() {
    let cfg = tiny(NormSetting::S1, OptimizerKind::Msgdw, 6);
    let grid = Grid {
        settings: vec![NormSetting::S1, NormSetting::S5],
        optimizers: vec![OptimizerKind::Msgdw, OptimizerKind::Adamw],
        seeds: vec![0],
        jobs: 2,
    };
    let g = run_grid(&cfg, &grid).unwrap();
    assert_eq!(g.cells.len(), 4);
    assert_eq!(g.failed(), 0);
    assert_eq!(g.deltas.len(), 2);
    for d in &g.deltas {
        let a = g.find(NormSetting::S1, d.optimizer.parse().unwrap(), 0).unwrap();
        let b = g.find(NormSetting::S5, d.optimizer.parse().unwrap(), 0).unwrap();
        let (a, b) = (a.outcome.as_ref().unwrap(), b.outcome.as_ref().unwrap());
        assert_eq!(d.d_final_loss, Some(b.final_loss - a.final_loss));
    }
    let dir = scratch("grid");
    g.write(&dir).unwrap();
    assert_eq!(header_of(&dir.join("ablation.csv")), ABLATION_HEADER);
    assert_eq!(header_of(&dir.join("deltas.csv")), DELTA_HEADER);
    assert!(dir.join("S5_adamw_seed0").join("histogram.csv").exists());
}

#[test]
fn divergence_aborts_with_partial_report() {
    let mut cfg = tiny(NormSetting::S1, OptimizerKind::Msgdw, 50);
    cfg.optim.lr = 1e200;
    cfg.optim.lr_min = 1e199;
    cfg.optim.clip = None;
    match train(&cfg) {
        Err(HarnessError::Diverged { step, report, .. }) => {
            assert!(step < 50);
            assert_eq!(report.losses.len(), step);
        }
        Ok(_) => panic!("an absurd learning rate should diverge"),
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn invalid_configs_fail_before_compute() {
    let mut cfg = tiny(NormSetting::S1, OptimizerKind::Msgdw, 1);
    cfg.train.batch = 0;
    assert!(matches!(train(&cfg), Err(HarnessError::Config(_))));
    let mut cfg = tiny(NormSetting::S1, OptimizerKind::Msgdw, 1);
    cfg.optim.beta1 = 1.0;
    assert!(train(&cfg).is_err());
}

#[test]
fn sticky_chain_stay_rate() {
    let table = vec![vec![0.99, 0.01], vec![0.01, 0.99]];
    let src = MarkovSource::from_table(2, 1, table).unwrap();
    let tokens = src.generate(5, 100_000);
    let stays = tokens.windows(2).filter(|w| w[0] == w[1]).count() as f64 / (tokens.len() - 1) as f64;
    assert!((stays - 0.99).abs() <= 0.01, "stay rate {stays}");
}

#[test]
fn loss_floor_sits_between_zero_and_uniform() {
    let src = MarkovSource::random(4, 32, 2, 0.3).unwrap();
    let h = src.entropy_rate();
    assert!(h > 0.0 && h < (32f64).ln());
    let tokens = src.generate(4, 200_000);
    let ce = src.corpus_cross_entropy(&tokens);
    assert!((ce - h).abs() < 0.05, "empirical {ce} vs rate {h}");
}

#[test]
fn verify_suites_pass_and_faults_are_caught() {
    let opts = VerifyOptions::default();
    for scope in [Scope::Norms, Scope::Optim, Scope::Ffn] {
        let checks = verify::run(scope, &opts);
        assert!(!checks.is_empty());
        for c in &checks {
            assert!(c.passed, "{} failed: {} > {} ({})", c.name, c.value, c.tolerance, c.detail);
        }
    }
    let names = verify::check_names();
    let all: Vec<String> = verify::run(Scope::Optim, &opts).into_iter().map(|c| c.name).collect();
    assert!(all.iter().all(|n| names.contains(n)));

    for fault in ["norms.rmsnorm_jacobian", "ffn.midnorm_jacobian", "optim.cosine_schedule"] {
        let scope: Scope = fault.split('.').next().unwrap().parse().unwrap();
        let checks = verify::run(
            scope,
            &VerifyOptions {
                inject_fault: Some(fault.to_string()),
            },
        );
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, [fault]);
        let hit = checks.iter().find(|c| c.name == fault).unwrap();
        assert!(!hit.formula.is_empty());
    }
}

#[test]
fn every_check_name_is_listed_once() {
    let all: Vec<String> = verify::run(Scope::Model, &VerifyOptions::default())
        .into_iter()
        .chain(verify::run(Scope::Attention, &VerifyOptions::default()))
        .map(|c| c.name)
        .collect();
    let names = verify::check_names();
    for n in &all {
        assert_eq!(names.iter().filter(|m| *m == n).count(), 1, "{n}");
    }
}

#[test]
fn sample_configs_match_toy_defaults() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, setting, kind) in [
        ("toy_s5_msgdw.toml", NormSetting::S5, OptimizerKind::Msgdw),
        ("toy_s1_adamw.toml", NormSetting::S1, OptimizerKind::Adamw),
    ] {
        let cfg = RunConfig::load(&root.join(file)).unwrap();
        assert_eq!(cfg, RunConfig::toy(setting, kind), "{file}");
    }
}
