//! One function per subcommand. Each writes its artifacts into the output
//! directory before deciding the exit status, so failed checks still leave
//! the evidence behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gpide::analysis::{bump_k_zeta, compute_moments, fit_order, minimized_upper, rate_exponent, LhatTerms, RateReport};
use gpide::catalog::{PhiSpec, Section};
use gpide::generator::{consistency_residual, eval_g, fit_c_alpha_beta, lhat_bound, GeneratorInput};
use gpide::scheme::{rate_study, solve, CheckStatus, RatePoint};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{Format, Prepared, Reference};
use crate::error::CliError;

/// Files written and lines printed by a successful command.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub lines: Vec<String>,
}

struct Sink<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Sink<'a> {
    fn new(dir: &'a Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, v: &Value) -> Result<(), CliError> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, v)?;
            writeln!(w)
        })
    }
}

/// JSON number, or `null` for non-finite values.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn echo(p: &Prepared) -> Value {
    serde_json::to_value(&p.config).expect("config serializes")
}

fn smooth_section(p: &Prepared) -> Result<Section, CliError> {
    p.phi
        .section(2, [0.0; 3])
        .ok_or_else(|| CliError::Config(format!("φ = {} has no known derivatives along z", p.phi.name)))
}

pub fn solve_cmd(p: &Prepared, dir: &Path) -> Result<Outcome, CliError> {
    let cfg = &p.config;
    let n = *cfg.scheme.n.last().expect("validated non-empty");
    let grid = cfg.scheme.mesh_scaling.grid_for(&cfg.scheme.grid, n)?;
    let ctx = p.ctx.with_h(1.0 / n as f64);
    let sol = solve(&p.phi, &grid, &ctx, n, &cfg.scheme.solve)?;
    let s = &sol.summary;
    let value = grid.contains([0.0; 3]).then(|| sol.last().interpolate(0.0, 0.0, 0.0));

    let mut sink = Sink::new(dir)?;
    let out = &cfg.output;
    let dumped: Vec<_> = if out.all_layers { sol.layers.iter().collect() } else { vec![sol.last()] };
    if out.wants(Format::Binary) {
        for layer in &dumped {
            sink.write(&format!("u_{n}_k{}.bin", layer.time_index), |w| layer.write_binary(w))?;
        }
    }
    if out.wants(Format::Csv) {
        sink.write(&format!("u_{n}.csv"), |w| {
            for (i, layer) in dumped.iter().enumerate() {
                layer.write_csv(w, i == 0)?;
            }
            Ok(())
        })?;
    }
    if out.wants(Format::Json) {
        let v = json!({
            "n": n,
            "h": ctx.h,
            "value_at_origin": value.map_or(Value::Null, num),
            "grid": grid,
            "summary": s,
            "invariants_ok": s.invariants_ok(),
            "config": echo(p),
        });
        sink.json("solve.json", &v)?;
    }

    let mut lines = vec![
        format!("solved {} steps of h = {:.6} on {} points", n, ctx.h, grid.len()),
        format!("u(1, 0, 0, 0) = {}", value.map_or("outside grid".to_string(), |v| format!("{v:.12}"))),
        format!("boundary and truncation bound {:.3e} (tolerance {:.3e})", s.boundary_bound, s.boundary_tolerance),
        format!(
            "sup norm {:.6} ≤ {:.6}: {}; Lipschitz ratio {:.6}: {}; time regularity ratio {:.4}: {:?}",
            s.max_sup_norm, s.sup_norm_phi, s.bounded_ok, s.lipschitz_ratio, s.lipschitz_ok, s.time_ratio, s.time_status
        ),
    ];
    if s.time_status == CheckStatus::Warn {
        lines.push("warning: time regularity within 2x of the estimated constant, which may be undersized".into());
    }
    if !s.invariants_ok() {
        return Err(CliError::Check(format!("invariant violated: {}", lines[3])));
    }
    Ok(Outcome { files: sink.files, lines })
}

/// Closed-form reference for the degenerate cases.
fn closed_form(p: &Prepared, kind: Reference) -> Result<f64, CliError> {
    let b = &p.uncertainty;
    match (kind, p.config.phi) {
        (Reference::Gaussian, PhiSpec::CosX { freq }) if b.sigma2_lo == b.sigma2_hi => {
            Ok((-0.5 * freq * freq * b.sigma2_lo).exp())
        }
        (Reference::Gaussian, _) => Err(CliError::Config("the Gaussian reference needs φ = cos_x and a single variance".into())),
        (Reference::Drift, PhiSpec::Tanh { axis: 1, scale }) => Ok((b.gamma_hi / scale).tanh()),
        (Reference::Drift, _) => Err(CliError::Config("the drift reference needs φ = tanh along y".into())),
        (Reference::Value { value }, _) if value.is_finite() => Ok(value),
        _ => Err(CliError::Config(format!("unusable reference {kind:?}"))),
    }
}

fn points_csv(w: &mut impl Write, pts: &[RatePoint]) -> std::io::Result<()> {
    writeln!(w, "n,value,grid_points,boundary_bound,max_sup_norm,lipschitz_ratio,time_ratio")?;
    for pt in pts {
        let s = &pt.summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            pt.n,
            pt.value,
            pt.grid.len(),
            s.boundary_bound,
            s.max_sup_norm,
            s.lipschitz_ratio,
            s.time_ratio
        )?;
    }
    Ok(())
}

pub fn rate_study_cmd(p: &Prepared, dir: &Path) -> Result<Outcome, CliError> {
    let cfg = &p.config;
    let ns = &cfg.scheme.n;
    let finest = cfg.scheme.reference == Reference::Finest;
    let needed = if finest { 5 } else { 4 };
    if ns.len() < needed {
        return Err(CliError::Config(format!("rate study needs ≥ {needed} values of n, got {}", ns.len())));
    }
    let fixed = if finest { None } else { Some(closed_form(p, cfg.scheme.reference)?) };
    let theory = match cfg.analysis.theory_order {
        Some(t) => t,
        None => rate_exponent(p.uncertainty.alpha, p.delta, p.q0)?,
    };

    let pts = rate_study(&p.phi, &cfg.scheme.grid, &cfg.scheme.mesh_scaling, &p.ctx, ns, &cfg.scheme.solve)?;
    let mut sink = Sink::new(dir)?;
    if cfg.output.wants(Format::Csv) {
        sink.write("rate_points.csv", |w| points_csv(w, &pts))?;
    }
    let (reference, fitted) = match fixed {
        Some(r) => (r, &pts[..]),
        None => (pts[pts.len() - 1].value, &pts[..pts.len() - 1]),
    };
    let pairs: Vec<(usize, f64)> = fitted.iter().map(|pt| (pt.n, pt.value)).collect();
    let report = if cfg.scheme.reference == Reference::Drift {
        RateReport::exact_case(&pairs, reference, cfg.scheme.noise_floor.max(1e-12))
    } else {
        fit_order(&pairs, reference, cfg.scheme.noise_floor, theory)?
    };
    let broken: Vec<usize> = pts.iter().filter(|pt| !pt.summary.invariants_ok()).map(|pt| pt.n).collect();

    if cfg.output.wants(Format::Csv) {
        sink.write("rate.csv", |w| report.write_csv(w))?;
    }
    if cfg.output.wants(Format::Json) {
        let mut v = report.summary_json(&echo(p));
        v["reference_kind"] = json!(cfg.scheme.reference);
        v["invariant_violations"] = json!(broken);
        v["solves"] = json!(pts.iter().map(|pt| &pt.summary).collect::<Vec<_>>());
        sink.json("rate.json", &v)?;
    }

    let mut lines: Vec<String> = pairs
        .iter()
        .map(|&(n, v)| format!("n = {n:>5}: {v:.12}  |value - ref| = {:.3e}", (v - reference).abs()))
        .collect();
    lines.push(format!("reference {reference:.12}"));
    if report.exact {
        lines.push(format!("exact case: every value within {:.1e} of the reference: {}", cfg.scheme.noise_floor.max(1e-12), report.pass));
    } else {
        lines.push(format!("fitted order {:.4}, theory order {:.6}, pass {}", report.fitted_order, report.theory_order, report.pass));
    }
    if !broken.is_empty() {
        return Err(CliError::Check(format!("invariants violated for n = {broken:?}")));
    }
    if !report.pass {
        return Err(CliError::Check(lines.last().cloned().unwrap_or_default()));
    }
    Ok(Outcome { files: sink.files, lines })
}

/// Least-squares slope of `log r` against `log s`.
pub fn log_slope(s: &[f64], r: &[f64]) -> f64 {
    let k = s.len() as f64;
    let lx: Vec<f64> = s.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = r.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Residuals this small count as an exact zero.
const FLAT: f64 = 1e-13;

pub fn consistency_cmd(p: &Prepared, dir: &Path) -> Result<Outcome, CliError> {
    let cfg = &p.config;
    let a = &cfg.analysis;
    let section = smooth_section(p)?;
    let alpha = p.uncertainty.alpha;
    let (k0, k1) = a.s_exponents;
    let sweep: Vec<f64> = (k0..=k1).map(|k| 2f64.powi(-k)).collect();
    let fresh: Vec<f64> = (k0..k1).map(|k| 2f64.powf(-(k as f64) - 0.5)).collect();
    let residuals = |ss: &[f64], pa: (f64, f64)| -> Result<Vec<f64>, CliError> {
        ss.par_iter()
            .map(|&s| consistency_residual(&section, a.z, s, pa.0, pa.1, &p.uncertainty, &p.tails, &a.consistency).map_err(CliError::from))
            .collect()
    };
    let rows: Vec<Vec<f64>> = a.consistency_pa.iter().map(|&pa| residuals(&sweep, pa)).collect::<Result<_, _>>()?;
    let norms = p.phi.z_norms();
    let all_s: Vec<f64> = rows.iter().flat_map(|_| sweep.iter().copied()).collect();
    let all_r: Vec<f64> = rows.iter().flatten().copied().collect();
    let c = fit_c_alpha_beta(&all_s, &all_r, norms, p.q0, alpha);
    let fresh_r = residuals(&fresh, a.consistency_pa[0])?;
    let dominated = fresh.iter().zip(&fresh_r).all(|(&s, &r)| r <= lhat_bound(norms, s, p.q0, c, alpha) || r <= FLAT);

    let threshold = p.q0.min((2.0 - alpha) / alpha) - 0.05;
    let mut verdicts = Vec::new();
    let mut pass = true;
    for (&(pv, av), r) in a.consistency_pa.iter().zip(&rows) {
        let flat = r.iter().all(|&v| v <= FLAT);
        let slope = if flat { f64::INFINITY } else { log_slope(&sweep, r) };
        let ok = flat || slope >= threshold;
        pass &= ok;
        verdicts.push((pv, av, slope, flat, ok));
    }

    let mut sink = Sink::new(dir)?;
    if cfg.output.wants(Format::Csv) {
        sink.write("consistency.csv", |w| {
            writeln!(w, "p,a,s,residual,lhat")?;
            for (&(pv, av), r) in a.consistency_pa.iter().zip(&rows) {
                for (&s, &v) in sweep.iter().zip(r) {
                    writeln!(w, "{pv},{av},{s},{v},{}", lhat_bound(norms, s, p.q0, c, alpha))?;
                }
            }
            Ok(())
        })?;
    }
    if cfg.output.wants(Format::Json) {
        let v = json!({
            "alpha": alpha,
            "q0": p.q0,
            "threshold": threshold,
            "c_alpha_beta": c,
            "fresh_s": fresh,
            "fresh_residuals": fresh_r,
            "fresh_dominated": dominated,
            "sweeps": verdicts.iter().map(|&(pv, av, slope, flat, ok)| json!({
                "p": pv, "a": av, "slope": num(slope), "flat": flat, "pass": ok,
            })).collect::<Vec<_>>(),
            "pass": pass,
            "config": echo(p),
        });
        sink.json("consistency.json", &v)?;
    }

    let mut lines: Vec<String> = verdicts
        .iter()
        .map(|&(pv, av, slope, flat, ok)| {
            if flat {
                format!("p = {pv}, A = {av}: residuals vanish")
            } else {
                format!("p = {pv}, A = {av}: slope {slope:.4} vs threshold {threshold:.4}: {ok}")
            }
        })
        .collect();
    lines.push(format!("fitted C = {c:.6}; fresh s-set dominated: {dominated}"));
    if !pass {
        return Err(CliError::Check(format!("consistency slope below {threshold:.4}")));
    }
    Ok(Outcome { files: sink.files, lines })
}

pub fn generator_eval_cmd(p: &Prepared, dir: &Path) -> Result<Outcome, CliError> {
    let cfg = &p.config;
    let section = smooth_section(p)?;
    let vals = cfg
        .analysis
        .generator_points
        .par_iter()
        .map(|&(pv, av, z)| eval_g(&GeneratorInput { p: pv, a: av, phi: &section, z }, &p.uncertainty, &cfg.analysis.integral))
        .collect::<Result<Vec<_>, _>>()?;

    let mut sink = Sink::new(dir)?;
    let pts = &cfg.analysis.generator_points;
    if cfg.output.wants(Format::Csv) {
        sink.write("generator.csv", |w| {
            writeln!(w, "p,a,z,value,error_estimate,corner,jump_part,drift_part,diffusion_part")?;
            for (&(pv, av, z), g) in pts.iter().zip(&vals) {
                writeln!(
                    w,
                    "{pv},{av},{z},{},{},{},{},{},{}",
                    g.value, g.error_estimate, g.corner, g.jump_part, g.drift_part, g.diffusion_part
                )?;
            }
            Ok(())
        })?;
    }
    if cfg.output.wants(Format::Json) {
        let v = json!({
            "points": pts.iter().zip(&vals).map(|(&(pv, av, z), g)| json!({"p": pv, "a": av, "z": z, "g": g})).collect::<Vec<_>>(),
            "config": echo(p),
        });
        sink.json("generator.json", &v)?;
    }
    let lines = pts
        .iter()
        .zip(&vals)
        .map(|(&(pv, av, z), g)| format!("G(p = {pv}, A = {av}; z = {z}) = {:.12} (± {:.1e}, corner {})", g.value, g.error_estimate, g.corner))
        .collect();
    Ok(Outcome { files: sink.files, lines })
}

pub fn report_cmd(p: &Prepared, dir: &Path) -> Result<Outcome, CliError> {
    let cfg = &p.config;
    let a = &cfg.analysis;
    let b = &p.uncertainty;
    let moments = compute_moments(b, &p.tails, &cfg.scheme.quadrature, p.delta, a.n_max, p.phi.lipschitz, &a.proxy)?;
    let gamma = rate_exponent(b.alpha, p.delta, p.q0)?;
    let k_zeta = a.k_zeta.unwrap_or_else(bump_k_zeta);

    // C_{α,β} from the p = A = 0 sweep; zero when φ is flat along z
    let c = match p.phi.section(2, [0.0; 3]) {
        Some(section) => {
            let (k0, k1) = a.s_exponents;
            let sweep: Vec<f64> = (k0..=k1).map(|k| 2f64.powi(-k)).collect();
            let r = sweep
                .par_iter()
                .map(|&s| consistency_residual(&section, a.z, s, 0.0, 0.0, b, &p.tails, &a.consistency))
                .collect::<Result<Vec<_>, _>>()?;
            fit_c_alpha_beta(&sweep, &r, p.phi.z_norms(), p.q0, b.alpha)
        }
        None => return Err(CliError::Config(format!("φ = {} has no known derivatives along z", p.phi.name))),
    };
    let l = LhatTerms { c_alpha_beta: c, q0: p.q0, alpha: b.alpha };
    let budgets = cfg
        .scheme
        .n
        .iter()
        .filter(|&&n| n >= 2)
        .map(|&n| minimized_upper(1.0 / n as f64, &moments, k_zeta, &l).map(|e| (n, e)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut sink = Sink::new(dir)?;
    if cfg.output.wants(Format::Csv) {
        sink.write("budget.csv", |w| {
            writeln!(w, "n,h,eps,e1,e2,upper_total,lower_total")?;
            for (n, e) in &budgets {
                writeln!(w, "{n},{},{},{},{},{},{}", e.h, e.eps, e.e1, e.e2, e.upper_total, e.lower_total)?;
            }
            Ok(())
        })?;
    }
    if cfg.output.wants(Format::Json) {
        let v = json!({
            "alpha": b.alpha,
            "delta": p.delta,
            "q0": p.q0,
            "gamma": gamma,
            "k_zeta": k_zeta,
            "k_zeta_overridden": a.k_zeta.is_some(),
            "c_alpha_beta": c,
            "moments": moments,
            "m_z_proxy_is_lower_bound": true,
            "budgets": budgets.iter().map(|(n, e)| json!({"n": n, "budget": e})).collect::<Vec<_>>(),
            "config": echo(p),
        });
        sink.json("report.json", &v)?;
    }
    let mut lines = vec![
        format!("Γ(α = {}, δ = {}, q₀ = {:.6}) = {gamma:.6}", b.alpha, p.delta, p.q0),
        format!("K_ζ = {k_zeta:.6}, C_αβ = {c:.6}"),
        format!(
            "C₀ = {:.6}, M₀ = {:.6} (M_Z proxy {:.6} over n ≤ {} is a lower bound)",
            moments.c0, moments.m0, moments.m_z_proxy, moments.n_max
        ),
    ];
    for (n, e) in &budgets {
        lines.push(format!("n = {n:>5}: ε = {:.3e}, upper {:.4e}, lower {:.4e}", e.eps, e.upper_total, e.lower_total));
    }
    Ok(Outcome { files: sink.files, lines })
}
