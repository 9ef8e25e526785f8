use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use gpide::analysis::AnalysisError;
use gpide::catalog::PhiSpec;
use gpide::generator::{consistency_residual, eval_g, GeneratorInput};
use gpide::scheme::{Axis, Grid, GridFunction, MeshScaling, SchemeError};
use gpide_cli::config::{Format, Reference};
use gpide_cli::{run, CliError, ExperimentConfig};
use serde_json::Value;
use tempfile::TempDir;

fn small_grid(z: (f64, f64, usize)) -> Grid {
    Grid { x: Axis::new(-6.0, 6.0, 2), y: Axis::new(-1.0, 1.0, 2), z: Axis::new(z.0, z.1, z.2) }
}

/// Write `cfg` into a fresh directory and run `cmd` on it.
fn run_cfg(cfg: &ExperimentConfig, cmd: &str, extra: &[&str]) -> (i32, TempDir) {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    let out = tmp.path().join("out");
    let mut argv = vec!["gpide".to_string(), cmd.into(), "--config".into(), path.display().to_string()];
    argv.extend(["--out".to_string(), out.display().to_string()]);
    argv.extend(extra.iter().map(|s| s.to_string()));
    (run(argv), tmp)
}

fn out(tmp: &TempDir, name: &str) -> PathBuf {
    tmp.path().join("out").join(name)
}

fn json(tmp: &TempDir, name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(out(tmp, name)).unwrap()).unwrap()
}

/// Header and numeric rows of a CSV file.
fn csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let rows: Vec<Vec<f64>> = lines
        .map(|l| {
            let r: Vec<f64> = l.split(',').map(|c| c.parse::<f64>().unwrap_or_else(|_| panic!("bad cell {c:?} in {l}"))).collect();
            assert_eq!(r.len(), header.len(), "{l}");
            r
        })
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

fn gaussian_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.lambda_lo = 0.01;
    c.model.lambda_hi = 0.02;
    c.model.gamma_lo = 0.0;
    c.model.gamma_hi = 0.0;
    c.model.sigma2_lo = 1.0;
    c.model.sigma2_hi = 1.0;
    c.phi = PhiSpec::CosX { freq: 1.0 };
    c.scheme.n = vec![8, 16, 32, 64];
    c.scheme.grid = Grid { x: Axis::new(-6.0, 6.0, 3001), y: Axis::new(-1.0, 1.0, 2), z: Axis::new(-1.0, 1.0, 2) };
    // spacing ∝ 1/n, otherwise the interpolation bias grows with n
    c.scheme.mesh_scaling = MeshScaling::Linear { reference_n: 8 };
    c.scheme.reference = Reference::Gaussian;
    c.scheme.noise_floor = 1e-15;
    c
}

fn drift_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.gamma_lo = -1.0;
    c.model.gamma_hi = 1.0;
    c.phi = PhiSpec::Tanh { axis: 1, scale: 1.0 };
    c.scheme.n = vec![1, 2, 4, 8, 16];
    c.scheme.grid = Grid { x: Axis::new(-1.0, 1.0, 2), y: Axis::new(-2.0, 2.0, 257), z: Axis::new(-1.0, 1.0, 2) };
    c.scheme.reference = Reference::Drift;
    c
}

fn light_consistency(c: &mut ExperimentConfig) {
    c.analysis.consistency.wk_interior_order = 32;
    c.analysis.consistency.wk_radius = 1e5;
    c.analysis.consistency_pa = vec![(0.0, 0.0), (1.0, -1.0)];
}

#[test]
fn config_round_trip_is_stable() {
    let cfg = ExperimentConfig::default();
    let text = cfg.to_json();
    let back = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_json(), text);
    let mut other = drift_config();
    other.output.formats = vec![Format::Json];
    other.analysis.delta = Some(1.2);
    assert_eq!(ExperimentConfig::from_json(&other.to_json()).unwrap(), other);
}

#[test]
fn partial_config_is_completed_with_defaults() {
    let cfg = ExperimentConfig::from_json(r#"{"phi": {"kind": "cos_x", "freq": 2.0}, "model": {"alpha": 1.2}}"#).unwrap();
    assert_eq!(cfg.phi, PhiSpec::CosX { freq: 2.0 });
    assert_eq!(cfg.model.alpha, 1.2);
    assert_eq!(cfg.model.lambda_lo, ExperimentConfig::default().model.lambda_lo);
    let normalized = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(normalized, cfg);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        r#"{"modle": {}}"#,
        r#"{"model": {"alpha": 1.5, "lamda_lo": 0.3}}"#,
        r#"{"scheme": {"quadrature": {"gauss_order": 8, "order": 3}}}"#,
        r#"{"phi": {"kind": "cos_x", "freq": 1.0, "phase": 0.0}}"#,
        r#"{"output": {"formats": ["xml"]}}"#,
    ] {
        assert!(matches!(ExperimentConfig::from_json(text), Err(CliError::Config(_))), "{text}");
    }
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("c.json");
    fs::write(&path, r#"{"model": {"extra": 1.0}}"#).unwrap();
    assert_eq!(run(["gpide", "solve", "--config", path.to_str().unwrap()]), 2);
}

#[test]
fn invalid_values_are_config_errors() {
    let mut bad_box = ExperimentConfig::default();
    bad_box.model.lambda_hi = 0.1;
    let mut bad_alpha = ExperimentConfig::default();
    bad_alpha.model.alpha = 2.5;
    let mut bad_beta = ExperimentConfig::default();
    bad_beta.model.beta_tail = 1.2;
    let mut bad_delta = ExperimentConfig::default();
    bad_delta.analysis.delta = Some(1.0);
    let mut bad_n = ExperimentConfig::default();
    bad_n.scheme.n = vec![8, 4];
    let mut bad_grid = ExperimentConfig::default();
    bad_grid.scheme.grid.z.n = 1;
    let mut bad_phi = ExperimentConfig::default();
    bad_phi.phi = PhiSpec::Tanh { axis: 4, scale: 1.0 };
    let mut no_formats = ExperimentConfig::default();
    no_formats.output.formats.clear();
    for cfg in [bad_box, bad_alpha, bad_beta, bad_delta, bad_n, bad_grid, bad_phi, no_formats] {
        assert!(matches!(cfg.prepare(), Err(CliError::Config(_))), "{cfg:?}");
        assert_eq!(run_cfg(&cfg, "solve", &[]).0, 2);
    }
}

#[test]
fn constant_solve_keeps_every_layer_constant() {
    let mut cfg = ExperimentConfig::default();
    cfg.phi = PhiSpec::Constant { value: 0.75 };
    cfg.scheme.n = vec![8];
    cfg.scheme.grid = small_grid((-8.0, 8.0, 65));
    cfg.output.all_layers = true;
    let (code, tmp) = run_cfg(&cfg, "solve", &[]);
    assert_eq!(code, 0);
    let v = json(&tmp, "solve.json");
    assert_eq!(v["invariants_ok"], true);
    assert_eq!(v["value_at_origin"], 0.75);
    assert_eq!(v["summary"]["max_sup_norm"], 0.75);
    for k in 0..=8 {
        let layer = GridFunction::read_binary(&mut fs::File::open(out(&tmp, &format!("u_8_k{k}.bin"))).unwrap()).unwrap();
        assert_eq!(layer.time_index, k);
        assert!(layer.values.iter().all(|&x| x == 0.75), "layer {k}");
    }
    let (h, rows) = csv(&out(&tmp, "u_8.csv"));
    assert_eq!(h, ["k", "x", "y", "z", "value"]);
    assert_eq!(rows.len(), 9 * cfg.scheme.grid.len());
    assert!(rows.iter().all(|r| r[4] == 0.75));
}

#[test]
fn narrow_grid_exits_with_the_bound() {
    let mut cfg = ExperimentConfig::default();
    cfg.scheme.n = vec![16];
    cfg.scheme.grid = small_grid((-0.5, 0.5, 11));
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("narrow.json");
    fs::write(&path, cfg.to_json()).unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_gpide"))
        .args(["solve", "--config", path.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(3));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("boundary-influence bound"), "{err}");
}

#[test]
fn default_solve_dump_round_trips_bit_exactly() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("o");
    let res = Command::new(env!("CARGO_BIN_EXE_gpide")).args(["solve", "--out", dir.to_str().unwrap()]).output().unwrap();
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let n = ExperimentConfig::default().scheme.n.last().copied().unwrap();
    let raw = fs::read(dir.join(format!("u_{n}_k{n}.bin"))).unwrap();
    let layer = GridFunction::read_binary(&mut raw.as_slice()).unwrap();
    let mut again = Vec::new();
    layer.write_binary(&mut again).unwrap();
    assert_eq!(again, raw);
    // the CSV dump carries the same numbers in the same order
    let (h, rows) = csv(&dir.join(format!("u_{n}.csv")));
    let vi = column(&h, "value");
    assert_eq!(rows.len(), layer.values.len());
    for (r, v) in rows.iter().zip(&layer.values) {
        assert_eq!(r[vi].to_bits(), v.to_bits());
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.join("solve.json")).unwrap()).unwrap();
    assert_eq!(summary["invariants_ok"], true);
    let origin = summary["value_at_origin"].as_f64().unwrap();
    assert_eq!(origin, layer.interpolate(0.0, 0.0, 0.0));
}

#[test]
fn gaussian_rate_study_uses_closed_form() {
    let (code, tmp) = run_cfg(&gaussian_config(), "rate-study", &[]);
    assert_eq!(code, 0);
    let v = json(&tmp, "rate.json");
    assert_eq!(v["reference"].as_f64().unwrap(), (-0.5f64).exp());
    assert_eq!(v["pass"], true);
    assert_eq!(v["exact"], false);
    assert_eq!(v["n_values"], serde_json::json!([8, 16, 32, 64]));
    let (h, rows) = csv(&out(&tmp, "rate.csv"));
    assert_eq!(h, ["n", "value", "abs_residual", "log_residual"]);
    let last = rows.last().unwrap();
    assert!(last[2] <= 0.02, "{last:?}");
    assert!(rows.windows(2).all(|w| w[1][2] < w[0][2]), "{rows:?}");
    assert!(v["fitted_order"].as_f64().unwrap() > 0.9);
    for r in &rows {
        assert!((r[2] - (r[1] - (-0.5f64).exp()).abs()).abs() < 1e-15);
        assert!((r[3] - r[2].ln()).abs() < 1e-12);
    }
}

#[test]
fn drift_rate_study_is_exact() {
    let (code, tmp) = run_cfg(&drift_config(), "rate-study", &[]);
    assert_eq!(code, 0);
    let v = json(&tmp, "rate.json");
    assert_eq!(v["exact"], true);
    assert_eq!(v["pass"], true);
    assert_eq!(v["reference"].as_f64().unwrap(), 1f64.tanh());
    let (h, rows) = csv(&out(&tmp, "rate.csv"));
    let ri = column(&h, "abs_residual");
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r[ri] <= 1e-12), "{rows:?}");
}

#[test]
fn full_model_theory_order() {
    let mut cfg = ExperimentConfig::default();
    cfg.analysis.delta = Some(1.2);
    cfg.scheme.n = vec![2, 4, 8, 16, 32];
    cfg.scheme.grid = small_grid((-16.0, 16.0, 401));
    let (code, tmp) = run_cfg(&cfg, "rate-study", &[]);
    let v = json(&tmp, "rate.json");
    let theory = v["theory_order"].as_f64().unwrap();
    assert!((theory - 0.5 / 27.0).abs() < 1e-15, "{theory}");
    let fitted = v["fitted_order"].as_f64().unwrap();
    let pass = fitted >= theory - 0.02;
    assert_eq!(v["pass"], pass);
    assert_eq!(code, if pass { 0 } else { 4 });
    let (h, rows) = csv(&out(&tmp, "rate_points.csv"));
    assert_eq!(h[..2], ["n".to_string(), "value".to_string()]);
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[4][1], v["reference"].as_f64().unwrap());
}

#[test]
fn rate_study_needs_enough_n() {
    let mut cfg = gaussian_config();
    cfg.scheme.n = vec![8, 16, 32];
    assert_eq!(run_cfg(&cfg, "rate-study", &[]).0, 2);
    let mut cfg = ExperimentConfig::default();
    cfg.scheme.n = vec![2, 4, 8, 16];
    assert_eq!(run_cfg(&cfg, "rate-study", &[]).0, 2);
}

#[test]
fn closed_form_reference_must_match_phi() {
    let mut cfg = gaussian_config();
    cfg.phi = PhiSpec::CosZ { freq: 1.0 };
    assert_eq!(run_cfg(&cfg, "rate-study", &[]).0, 2);
    let mut cfg = drift_config();
    cfg.phi = PhiSpec::Tanh { axis: 0, scale: 1.0 };
    assert_eq!(run_cfg(&cfg, "rate-study", &[]).0, 2);
}

#[test]
fn degenerate_fit_exits_four() {
    let mut cfg = drift_config();
    cfg.scheme.reference = Reference::Value { value: 1f64.tanh() };
    assert_eq!(run_cfg(&cfg, "rate-study", &[]).0, 4);
}

#[test]
fn rate_study_csv_does_not_depend_on_workers() {
    let mut cfg = ExperimentConfig::default();
    cfg.scheme.n = vec![2, 4, 8, 16, 32];
    cfg.scheme.grid = small_grid((-16.0, 16.0, 401));
    let (_, one) = run_cfg(&cfg, "rate-study", &["--workers", "1"]);
    let (_, three) = run_cfg(&cfg, "rate-study", &["--workers", "3"]);
    for f in ["rate.csv", "rate_points.csv"] {
        assert_eq!(fs::read(out(&one, f)).unwrap(), fs::read(out(&three, f)).unwrap(), "{f}");
    }
}

#[test]
fn consistency_of_constant_is_trivial() {
    let mut cfg = ExperimentConfig::default();
    cfg.phi = PhiSpec::Constant { value: 2.0 };
    light_consistency(&mut cfg);
    let (code, tmp) = run_cfg(&cfg, "consistency", &[]);
    assert_eq!(code, 0);
    let (h, rows) = csv(&out(&tmp, "consistency.csv"));
    let ri = column(&h, "residual");
    assert_eq!(rows.len(), 2 * 9);
    assert!(rows.iter().all(|r| r[ri] < 1e-13), "{rows:?}");
    assert_eq!(json(&tmp, "consistency.json")["pass"], true);
}

#[test]
fn consistency_of_cosine_meets_the_slope() {
    let mut cfg = ExperimentConfig::default();
    light_consistency(&mut cfg);
    let (code, tmp) = run_cfg(&cfg, "consistency", &[]);
    assert_eq!(code, 0);
    let v = json(&tmp, "consistency.json");
    let threshold = v["threshold"].as_f64().unwrap();
    assert!((threshold - 0.15).abs() < 1e-15);
    for sweep in v["sweeps"].as_array().unwrap() {
        assert!(sweep["slope"].as_f64().unwrap() >= threshold);
    }
    assert!(v["c_alpha_beta"].as_f64().unwrap() > 0.0);

    // the p = A = 0 rows are the plain jump residuals
    let p = cfg.prepare().unwrap();
    let section = p.phi.section(2, [0.0; 3]).unwrap();
    let (h, rows) = csv(&out(&tmp, "consistency.csv"));
    let (pi, ai, si, ri) = (column(&h, "p"), column(&h, "a"), column(&h, "s"), column(&h, "residual"));
    let base: Vec<&Vec<f64>> = rows.iter().filter(|r| r[pi] == 0.0 && r[ai] == 0.0).collect();
    assert_eq!(base.len(), 9);
    for r in base {
        let direct = consistency_residual(&section, 0.0, r[si], 0.0, 0.0, &p.uncertainty, &p.tails, &cfg.analysis.consistency).unwrap();
        assert_eq!(r[ri], direct);
    }
}

#[test]
fn generator_eval_matches_library() {
    let mut cfg = ExperimentConfig::default();
    cfg.phi = PhiSpec::CosSum;
    let (code, tmp) = run_cfg(&cfg, "generator-eval", &[]);
    assert_eq!(code, 0);
    let p = cfg.prepare().unwrap();
    let section = p.phi.section(2, [0.0; 3]).unwrap();
    let (h, rows) = csv(&out(&tmp, "generator.csv"));
    assert_eq!(h, ["p", "a", "z", "value", "error_estimate", "corner", "jump_part", "drift_part", "diffusion_part"]);
    assert_eq!(rows.len(), cfg.analysis.generator_points.len());
    for r in rows {
        let g = eval_g(&GeneratorInput { p: r[0], a: r[1], phi: &section, z: r[2] }, &p.uncertainty, &cfg.analysis.integral).unwrap();
        assert_eq!(r[3], g.value);
        assert_eq!(r[5], g.corner as f64);
        assert!((r[6] + r[7] + r[8] - r[3]).abs() < 1e-14);
    }
}

#[test]
fn report_lists_budgets() {
    let mut cfg = ExperimentConfig::default();
    cfg.analysis.n_max = 4;
    cfg.analysis.proxy.z_half_width = 60.0;
    cfg.analysis.proxy.z_points = 241;
    cfg.analysis.k_zeta = Some(100.0);
    light_consistency(&mut cfg);
    let (code, tmp) = run_cfg(&cfg, "report", &[]);
    assert_eq!(code, 0);
    let v = json(&tmp, "report.json");
    assert_eq!(v["k_zeta"], 100.0);
    assert_eq!(v["k_zeta_overridden"], true);
    assert_eq!(v["m_z_proxy_is_lower_bound"], true);
    assert!((v["gamma"].as_f64().unwrap() - 0.2 / 4.5).abs() < 1e-15);
    assert_eq!(v["config"], serde_json::to_value(&cfg_with_out(&cfg, &tmp)).unwrap());
    let (h, rows) = csv(&out(&tmp, "budget.csv"));
    assert_eq!(h, ["n", "h", "eps", "e1", "e2", "upper_total", "lower_total"]);
    assert_eq!(rows.len(), cfg.scheme.n.len());
    for r in &rows {
        assert_eq!(r[1], 1.0 / r[0]);
        assert!(r[2] > 0.0 && r[2] < 1.0);
        assert!(r[5] > 0.0 && r[6] > 0.0);
    }
    // the bound shrinks as h does
    assert!(rows.windows(2).all(|w| w[1][5] < w[0][5]));
}

fn cfg_with_out(cfg: &ExperimentConfig, tmp: &TempDir) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.output.dir = tmp.path().join("out");
    c
}

#[test]
fn formats_select_outputs() {
    let mut cfg = ExperimentConfig::default();
    cfg.scheme.n = vec![4];
    cfg.scheme.grid = small_grid((-16.0, 16.0, 201));
    cfg.output.formats = vec![Format::Json];
    let (code, tmp) = run_cfg(&cfg, "solve", &[]);
    assert_eq!(code, 0);
    let names: Vec<String> = fs::read_dir(tmp.path().join("out")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names, ["solve.json"]);
}

#[test]
fn bad_flags_exit_two() {
    assert_eq!(run(["gpide", "solve", "--workers", "0"]), 2);
    assert_eq!(run(["gpide", "plot"]), 2);
    assert_eq!(run(["gpide", "solve", "--config", "/nonexistent/config.json"]), 2);
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(CliError::from(SchemeError::GridTooNarrow { bound: 1.0, tolerance: 0.5 }).exit_code(), 3);
    assert_eq!(CliError::from(SchemeError::StepMismatch { steps: 3, h: 0.5 }).exit_code(), 3);
    assert_eq!(CliError::from(SchemeError::InvalidGrid("x".into())).exit_code(), 2);
    assert_eq!(CliError::from(AnalysisError::DegenerateFit { usable: 1 }).exit_code(), 4);
    assert_eq!(CliError::from(AnalysisError::TooFewPairs(2)).exit_code(), 2);
    assert_eq!(CliError::from(AnalysisError::Scheme(SchemeError::GridTooNarrow { bound: 1.0, tolerance: 0.5 })).exit_code(), 3);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = ExperimentConfig::load(&path).unwrap();
            cfg.prepare().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
