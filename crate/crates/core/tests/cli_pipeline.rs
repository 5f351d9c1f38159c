use std::fs;
use std::path::{Path, PathBuf};

use zeemancal::{cli, io, study, synth};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["zeemancal"];
    argv.extend_from_slice(args);
    let code = cli::run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn error_kind(stderr: &str) -> String {
    let v: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn simulate_detect_fit_reproduces_generator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("env.cfg");
    fs::write(
        &cfg,
        "# calibration truth\nk_x=0.362\nk_y=0.434\nk_z=3.586\ni0_x=0.985\ni0_y=1.681\ni0_z=-0.145\n\
power_uw=70\nbackground_counts=5000\n",
    )
    .unwrap();
    let mut scans = Vec::new();
    for (k, c) in study::global_design().iter().enumerate() {
        let path = dir.path().join(format!("scan_{k:02}.csv"));
        let currents = format!("{},{},{}", c[0], c[1], c[2]);
        let seed = (1000 + k).to_string();
        let (code, _, err) = run(&[
            "simulate",
            "--config",
            s(&cfg),
            "--currents",
            &currents,
            "--grid",
            "1243:1257:0.01",
            "--seed",
            &seed,
            "--out",
            s(&path),
        ]);
        assert_eq!(code, 0, "{err}");
        scans.push(path);
    }
    let peaks = dir.path().join("peaks.jsonl");
    let points = dir.path().join("points.csv");
    let mut args = vec!["detect-peaks"];
    args.extend(scans.iter().map(|p| s(p)));
    args.extend(["--out", s(&peaks), "--labeled-csv", s(&points)]);
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let records = io::parse_peak_records(&fs::read_to_string(&peaks).unwrap()).unwrap();
    assert_eq!(records.len(), 36 * 7);
    assert!(records.iter().all(|r| !r.ambiguous && r.label.is_some()));

    let cal_path = dir.path().join("cal.json");
    let curves = dir.path().join("curves");
    let (code, _, err) = run(&["fit-field", s(&points), "--out", s(&cal_path), "--curves-out", s(&curves)]);
    assert_eq!(code, 0, "{err}");
    assert!(dir.path().join("curves_x.csv").exists());
    let cal = io::read_calibration(&cal_path).unwrap();
    let truth = study::reference_calibration();
    for (m, t) in cal.param_measured().iter().zip(truth.param_vector()).take(6) {
        assert!(m.within_sigmas(t, 3.0), "{m} vs {t}");
    }
    let fig = [-5.74, 1.70, 0.14];
    let mag = cal.field_magnitude(fig);
    assert!(mag.within_sigmas(truth.field_at(fig).magnitude(), 3.0));

    let (code, out, _) = run(&["predict", s(&cal_path), "--currents", "-5.74,1.70,0.14"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["peaks"].as_array().unwrap().len(), 7);
}

#[test]
fn simulate_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let (code, _, err) = run(&["simulate", "--currents", "-5.74,1.70,0.14", "--seed", "42", "--out", s(p)]);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let scan = io::read_scan(&a).unwrap();
    assert_eq!(scan.currents, [-5.74, 1.70, 0.14]);
    let again = io::parse_scan(&io::format_scan(&scan).unwrap()).unwrap();
    assert_eq!(again, scan);
    let (_, stdout, _) = run(&["simulate", "--currents", "-5.74,1.70,0.14", "--seed", "43"]);
    assert_ne!(stdout, fs::read_to_string(&a).unwrap());
}

#[test]
fn axial_pipeline_with_sigma_spectra() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("env.cfg");
    fs::write(&cfg, "k_z=3.753\ni0_x=-3\ni0_y=1.7\ni0_z=-0.166\nmode=sigma_minus\npower_uw=6\n").unwrap();
    let mut scans = Vec::new();
    for (k, c) in study::axial_design(-0.166, 0.15, 11).iter().enumerate() {
        if (c[2] + 0.166).abs() < 0.02 {
            continue;
        }
        let path = dir.path().join(format!("ax_{k:02}.csv"));
        let currents = format!("{},{},{}", c[0], c[1], c[2]);
        let seed = (77 + k).to_string();
        let (code, _, err) = run(&[
            "simulate", "--config", s(&cfg), "--currents", &currents, "--grid", "1248:1252:0.005", "--seed", &seed,
            "--out", s(&path),
        ]);
        assert_eq!(code, 0, "{err}");
        scans.push(path);
    }
    let points = dir.path().join("points.csv");
    let mut args = vec!["detect-peaks", "--mode", "sigma_minus", "--max-peaks", "1", "--labeled-csv", s(&points)];
    args.extend(scans.iter().map(|p| s(p)));
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let axial = dir.path().join("axial.json");
    let (code, _, err) = run(&["fit-axial", s(&points), "--out", s(&axial)]);
    assert_eq!(code, 0, "{err}");
    let fit = io::read_axial(&axial).unwrap();
    assert!(fit.k_z.within_sigmas(3.753, 3.0), "{}", fit.k_z);
    assert!(fit.i0_z.within_sigmas(-0.166, 3.0), "{}", fit.i0_z);
    let (code, out, _) = run(&["propagate", "--axial", s(&axial)]);
    assert_eq!(code, 0);
    assert!(out.contains("delta_b_g"));
}

#[test]
fn propagate_and_limits_report_published_numbers() {
    let (code, out, _) = run(&["propagate", s(&data("global_calibration.json"))]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["delta_b_g"].as_f64().unwrap() - 0.041).abs() < 5e-4);
    let (code, out, _) = run(&["propagate", "--axial", s(&data("axial_calibration.json"))]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["delta_b_g"].as_f64().unwrap() - 0.031).abs() < 5e-4);
}

#[test]
fn power_extrapolate_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("power.csv");
    let mut text = String::from("power_uw,center_mhz,center_sigma_mhz,fwhm_khz,fwhm_sigma_khz\n");
    for p in [5.0, 20.0, 40.0, 70.0] {
        text.push_str(&format!("{p},{},0.01,{},2\n", 1250.065 + 0.0007 * p, 30.0 + 1.5 * p));
    }
    fs::write(&path, text).unwrap();
    let (code, out, err) = run(&["power-extrapolate", s(&path)]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["f_intercept_mhz"]["value"].as_f64().unwrap() - 1250.065).abs() < 1e-9);
    assert!((v["width_slope_khz_per_uw"]["value"].as_f64().unwrap() - 1.5).abs() < 1e-9);
}

#[test]
fn minimize_subcommand_emits_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("min.cfg");
    fs::write(&cfg, "ambient_x_g=0.5\nambient_y_g=-0.3\nambient_z_g=1.0\nrounds=2\npower_schedule_uw=70,10\n").unwrap();
    let (code, out, err) = run(&["minimize", "--config", s(&cfg), "--seed", "5"]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["steps"].as_array().unwrap().len(), 6);
    assert!(v["final_field"]["value"].as_f64().unwrap() <= 0.05);
    let (code, _, err) = run(&["minimize", "--config", s(&cfg)]);
    assert_eq!(code, 1, "seed is mandatory: {err}");
}

#[test]
fn exit_codes_and_error_lines() {
    let dir = tempfile::tempdir().unwrap();

    let (code, _, err) = run(&["no-such-command"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "# ix_a=0\n# iy_a=0\n# iz_a=0\nf_mod_mhz,signal,n_f,n_b\n1,0,,\n2,0,,\n3,0,,\n4,0,,\n5,0,,\n").unwrap();
    let (code, _, err) = run(&["detect-peaks", s(&bad)]);
    assert_eq!(code, 1);
    assert_eq!(error_kind(&err), "missing_metadata");

    let cfg = dir.path().join("typo.cfg");
    fs::write(&cfg, "powr_uw=70\n").unwrap();
    let (code, _, err) = run(&["simulate", "--config", s(&cfg), "--currents", "0,0,0", "--seed", "1"]);
    assert_eq!(code, 1);
    assert_eq!(error_kind(&err), "parse");

    // only the η = 0 line: the gains cannot be identified
    let pts = dir.path().join("center_only.csv");
    let mut text = String::from("ix_a,iy_a,iz_a,eta,frequency_mhz,sigma_mhz\n");
    for i in 0..12 {
        text.push_str(&format!("{},{},0.1,0,1250.065,0.01\n", i as f64 - 6.0, 0.5 * i as f64));
    }
    fs::write(&pts, text).unwrap();
    let (code, _, err) = run(&["fit-field", s(&pts)]);
    assert_eq!(code, 2);
    assert_eq!(error_kind(&err), "unidentifiable");
}

#[test]
fn scan_file_written_by_library_reads_back() {
    let env = synth::Environment::new(study::reference_calibration());
    let beam = synth::BeamConfig::default();
    let grid = synth::linear_grid(1249.0, 1251.0, 0.01).unwrap();
    let scan = synth::simulate_scan(&env, &beam, [0.985, 1.681, -0.145], &grid, synth::Noise::Poisson { background: 800.0 }, 3)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scan.csv");
    io::write_scan(&scan, &p).unwrap();
    assert_eq!(io::read_scan(&p).unwrap(), scan);
}
