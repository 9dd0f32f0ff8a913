use std::fs;
use std::path::Path;
use std::process::Command;

use okdrop::analyze::{analyze_dir, write_report};
use okdrop::config::{parse_config, DEFAULT_SEED};
use okdrop::output::SWEEP_CSV_SCHEMA;
use okdrop::sweep::{read_row_file, recompute_row, row_file_name, sweep_table, RowFile, MANIFEST_FILE, SWEEP_CSV};
use okdrop::{run_sweep, validate_config_file, ExperimentConfig, HarnessError, Manifest};
use okdrop_core::drop_model::{f_star_closed_form, m_star_closed_form};
use okdrop_core::gamma_analysis::SweepRow;
use okdrop_core::kernel::KernelParams;
use okdrop_core::minimizer::{AnnealSchedule, Lattice};

fn parse(text: &str) -> Result<ExperimentConfig, HarnessError> {
    parse_config(text, "test.toml", Path::new("/tmp"))
}

fn smoke_config(dir: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(0.5, vec![1e-4, 1e-5, 1e-6]);
    cfg.seed = seed;
    cfg.output_dir = dir.to_path_buf();
    cfg.analysis.grid_n = 32;
    cfg
}

#[test]
fn minimal_file_resolves_defaults() {
    let cfg = parse("lambda = 1.0\nepsilons = [1e-4]\n").unwrap();
    assert_eq!(cfg.lambda, 1.0);
    assert_eq!(cfg.epsilons, vec![1e-4]);
    assert_eq!(cfg.seed, DEFAULT_SEED);
    assert_eq!(cfg.lattice, Lattice::Bcc);
    assert_eq!(cfg.droplet_mass, m_star_closed_form());
    assert_eq!(cfg.chains, 1);
    assert_eq!(cfg.kernel, KernelParams::default());
    assert_eq!(cfg.schedule, AnnealSchedule::default());
    assert_eq!(cfg.analysis.grid_n, 64);
    assert_eq!(cfg.analysis.subdivisions, 2);
    assert_eq!(cfg.output_dir, Path::new("/tmp/okdrop-out"));
}

#[test]
fn sections_and_lattice_names() {
    let text = r#"
lambda = 2.0
epsilons = [1e-3, 1e-4]
lattice = "FCC"
seed = 5

[kernel]
k_cutoff = 10

[schedule]
cooling_rate = 0.9
steps_per_temp = 100

[analysis]
grid_n = 32
"#;
    let cfg = parse(text).unwrap();
    assert_eq!(cfg.lattice, Lattice::Fcc);
    assert_eq!(cfg.kernel.k_cutoff, 10);
    assert_eq!(cfg.kernel.alpha_factor, KernelParams::default().alpha_factor);
    assert_eq!(cfg.schedule.cooling_rate, 0.9);
    assert_eq!(cfg.schedule.steps_per_temp, Some(100));
    assert_eq!(cfg.analysis.grid_n, 32);
}

#[test]
fn increasing_epsilons_are_rejected() {
    let err = parse("lambda = 1.0\nepsilons = [1e-4, 1e-3]\n").unwrap_err();
    assert!(matches!(err, HarnessError::Validation(_)), "{err}");
    assert!(err.to_string().contains("strictly decreasing"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn inadmissible_epsilon_names_the_bound() {
    // λ = 4 gives λ^{-3/2} = 1/8
    let err = parse("lambda = 4.0\nepsilons = [0.125, 1e-3]\n").unwrap_err();
    assert!(err.to_string().contains("0 < ε < λ^(-3/2)"), "{err}");
    assert!(parse("lambda = 4.0\nepsilons = [0.124, 1e-3]\n").is_ok());
}

#[test]
fn unknown_key_suggests_the_right_one() {
    let err = parse("lambda = 1.0\nepsilon = [1e-4]\n").unwrap_err();
    let HarnessError::Parse { line, column, ref message, .. } = err else {
        panic!("expected a parse error, got {err}");
    };
    assert_eq!((line, column), (2, 1));
    assert!(message.contains("did you mean `epsilons`"), "{message}");

    let err = parse("lambda = 1.0\nepsilons = [1e-4]\n[schedule]\ncoolingrate = 0.9\n").unwrap_err();
    assert!(err.to_string().contains("`cooling_rate`"), "{err}");
    assert!(err.to_string().starts_with("test.toml:4:1"), "{err}");
}

#[test]
fn syntax_errors_carry_position() {
    let err = parse("lambda = 1.0\nepsilons = [1e-4\n").unwrap_err();
    let HarnessError::Parse { line, .. } = err else {
        panic!("expected a parse error, got {err}");
    };
    assert!(line >= 2);
}

#[test]
fn schedule_file_is_exclusive_with_inline_schedule() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("sched.toml"), "cooling_rate = 0.8\n").unwrap();
    let cfg = parse_config(
        "lambda = 1.0\nepsilons = [1e-4]\nschedule_file = \"sched.toml\"\n",
        "x.toml",
        dir.path(),
    )
    .unwrap();
    assert_eq!(cfg.schedule.cooling_rate, 0.8);
    let err = parse_config(
        "lambda = 1.0\nepsilons = [1e-4]\nschedule_file = \"sched.toml\"\n[schedule]\ncooling_rate = 0.9\n",
        "x.toml",
        dir.path(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("mutually exclusive"), "{err}");
}

#[test]
fn unwritable_output_dir_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, "lambda = 1.0\nepsilons = [1e-4]\noutput_dir = \"file/sub\"\n").unwrap();
    let err = validate_config_file(&path).unwrap_err();
    assert!(err.to_string().contains("not writable"), "{err}");
}

#[test]
fn smoke_sweep_is_complete_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_sweep(&smoke_config(a.path(), 11)).unwrap();
    assert_eq!(first.failures().count(), 0);
    assert!(first.record.is_sorted());
    let json: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("eps_") && n.ends_with(".json"))
        .collect();
    assert_eq!(json.len(), 3);
    assert!(a.path().join(SWEEP_CSV).exists());
    assert!(a.path().join(MANIFEST_FILE).exists());

    let second = run_sweep(&smoke_config(b.path(), 11)).unwrap();
    assert_eq!(first.manifest_hash, second.manifest_hash);
    for name in [SWEEP_CSV, "sweep.json", MANIFEST_FILE, "eps_00_history.csv", "eps_02.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }

    // every row is reproducible from its stored configuration
    let manifest: Manifest = serde_json::from_slice(&fs::read(a.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.hash(), first.manifest_hash);
    for i in 0..3 {
        let file = read_row_file(&a.path().join(row_file_name(i))).unwrap();
        assert_eq!(file.manifest_hash, first.manifest_hash);
        let again = recompute_row(&file, &manifest).unwrap();
        assert_eq!(Some(again), file.row);
    }
}

#[test]
fn failing_rows_are_recorded_and_the_sweep_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), 3);
    // volume fraction λε^{2/3} = 0.9 at ε = 1e-3 exceeds close packing
    cfg.lambda = 90.0;
    cfg.epsilons = vec![1e-3, 1e-4];
    cfg.droplet_mass = 100.0;
    cfg.schedule = AnnealSchedule::zero_temperature(0, 50, 1);
    let out = run_sweep(&cfg).unwrap();
    let failed: Vec<&RowFile> = out.failures().collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].epsilon, 1e-3);
    assert!(failed[0].error.as_deref().unwrap().contains("spacing"), "{:?}", failed[0].error);
    assert_eq!(out.record.rows.len(), 1);
    let csv = fs::read_to_string(dir.path().join(SWEEP_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains(",error,"), "{csv}");
}

fn golden_row(epsilon: f64, hash: &str) -> RowFile {
    RowFile {
        format: "okdrop-row-v1".into(),
        manifest_hash: hash.into(),
        index: 0,
        epsilon,
        lambda: 0.5,
        seed: 1,
        error: None,
        row: Some(SweepRow {
            epsilon,
            n_droplets: 2,
            scaled_total: 1.25,
            sup_v: 0.5,
            min_v: -0.25,
            masses: vec![10.0, 20.0],
            diameter_proxy: 0.125,
            mass_deviation: 0.0,
            energy_deviation: 1e-3,
            config_file: None,
        }),
        config: None,
        breakdown: None,
        diagnostics: None,
    }
}

#[test]
fn golden_sweep_csv_format() {
    let mut failed = golden_row(1e-5, "abc");
    failed.index = 1;
    failed.row = None;
    failed.error = Some("infeasible, spacing".into());
    let bytes = sweep_table(&[failed, golden_row(1e-4, "abc")], 2.5).to_bytes().unwrap();
    let expected = "\
schema,manifest_hash,index,epsilon,status,n_droplets,scaled_total,relative_gap,sup_v,min_v,diameter_proxy,mass_deviation,energy_deviation,min_mass,max_mass,error
okdrop-sweep-v1,abc,0,1.000000000000e-4,ok,2,1.250000000000e0,0.000000000000e0,5.000000000000e-1,-2.500000000000e-1,1.250000000000e-1,0.000000000000e0,1.000000000000e-3,1.000000000000e1,2.000000000000e1,
okdrop-sweep-v1,abc,1,1.000000000000e-5,error,,,,,,,,,,,\"infeasible, spacing\"
";
    assert_eq!(String::from_utf8(bytes).unwrap(), expected);
    assert_eq!(SWEEP_CSV_SCHEMA, "okdrop-sweep-v1");
}

#[test]
fn analyze_refuses_mixed_manifests_unless_forced() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_sweep(&smoke_config(a.path(), 1)).unwrap();
    run_sweep(&smoke_config(b.path(), 2)).unwrap();
    let (ms, fs_) = (m_star_closed_form(), f_star_closed_form());

    let out = a.path().join("report/report.json");
    let report = analyze_dir(a.path(), ms, fs_, false).unwrap();
    let tables = write_report(&report, &out).unwrap();
    assert_eq!(tables.len(), 7);
    let first = fs::read(&out).unwrap();
    write_report(&analyze_dir(a.path(), ms, fs_, false).unwrap(), &out).unwrap();
    assert_eq!(first, fs::read(&out).unwrap());

    fs::copy(b.path().join(row_file_name(1)), a.path().join(row_file_name(1))).unwrap();
    let err = analyze_dir(a.path(), ms, fs_, false).unwrap_err();
    assert!(matches!(err, HarnessError::MixedManifest(ref h) if h.len() == 2), "{err}");
    assert_eq!(err.exit_code(), 2);
    let forced = analyze_dir(a.path(), ms, fs_, true).unwrap();
    assert!(forced.forced);
    assert_eq!(forced.manifest_hashes.len(), 2);
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_okdrop");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "lambda = 1.0\nepsilons = [1e-4, 1e-3]\n").unwrap();
    let status = Command::new(bin).args(["sweep", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let out = dir.path().join("se.csv");
    let status = Command::new(bin)
        .args(["selfenergy", "--m-min", "5", "--m-max", "60", "--points", "12", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("schema,mass,e,f,lambda,n_optimal,asymmetric\n"));
    assert_eq!(text.lines().count(), 13);
    assert!(dir.path().join("se.json").exists());
}

#[test]
fn cli_minimize_and_recover() {
    let bin = env!("CARGO_BIN_EXE_okdrop");
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("rec.json");
    let status = Command::new(bin)
        .args(["recover", "--lambda", "20", "--epsilon", "1e-4", "--amplitude", "0.3", "--out"])
        .arg(&rec)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("rec_summary.json").exists());

    let sched = dir.path().join("sched.toml");
    fs::write(&sched, "initial_temp = 0.0\nsteps_per_temp = 200\nmax_stages = 1\n").unwrap();
    let out = dir.path().join("result.json");
    let status = Command::new(bin)
        .args(["minimize", "--seed", "3", "--config"])
        .arg(&rec)
        .arg("--schedule")
        .arg(&sched)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let history = fs::read_to_string(dir.path().join("result_history.csv")).unwrap();
    assert!(history.starts_with("schema,step,temperature,energy,best_energy,droplets\n"));
}

#[test]
fn repository_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let text = fs::read_to_string(root.join("macroscopic_sweep.toml")).unwrap();
    let cfg = parse_config(&text, "macroscopic_sweep.toml", &root).unwrap();
    assert_eq!(cfg.lambda, 0.5);
    assert_eq!(cfg.epsilons, vec![1e-4, 3e-5, 1e-5, 3e-6, 1e-6]);
    assert_eq!(cfg.seed, 42);
    let sched = okdrop::config::read_schedule(&root.join("greedy_schedule.toml")).unwrap();
    assert_eq!(sched.initial_temp, Some(0.0));
}
