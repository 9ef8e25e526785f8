mod common;

use gpide::analysis::*;
use gpide::step::{StepQuadrature, TailShape};
use gpide::uncertainty::corner_laws;
use proptest::prelude::*;

use common::*;

#[test]
fn rate_exponent_example() {
    let g = rate_exponent(1.5, 1.2, 0.2).unwrap();
    assert!((g - 0.3 / 16.2).abs() < 1e-15);
    assert!((g - 0.018_518_5).abs() < 1e-7);
}

#[test]
fn large_q0_leaves_first_two_terms() {
    let g = rate_exponent(1.5, 1.2, 10.0).unwrap();
    assert!((g - (0.3f64 / 16.2).min(0.5 / 3.0)).abs() < 1e-15);
    assert!(g < 5.0);
}

#[test]
fn delta_outside_window_is_rejected() {
    for d in [1.0, 1.125, 1.5, 1.6] {
        assert!(matches!(rate_exponent(1.5, d, 0.2), Err(AnalysisError::DeltaOutOfRange { .. })), "δ = {d}");
    }
}

#[test]
fn first_term_stays_below_one_tenth() {
    for i in 1..200 {
        let alpha = 1.0 + i as f64 / 200.0;
        let (lo, hi) = delta_window(alpha);
        for j in 1..100 {
            let d = lo + (hi - lo) * j as f64 / 100.0;
            let t = (4.0 * d - 3.0 * alpha) / (2.0 * alpha * (2.0 * d + 3.0));
            assert!(t < 0.1 && t <= 1.0 / (4.0 * alpha + 6.0) + 1e-15, "α {alpha}, δ {d}");
        }
    }
}

proptest! {
    #[test]
    fn rate_exponent_is_monotone(alpha in 1.05f64..1.95, u in 0.01f64..0.98, du in 0.0f64..0.5, q0 in 0.01f64..2.0, dq in 0.0f64..1.0) {
        let (lo, hi) = delta_window(alpha);
        let d = lo + (hi - lo) * u;
        let d2 = (d + du * (hi - lo)).min(lo + 0.99 * (hi - lo));
        let base = rate_exponent(alpha, d, q0).unwrap();
        prop_assert!(rate_exponent(alpha, d2, q0).unwrap() >= base);
        prop_assert!(rate_exponent(alpha, d, q0 + dq).unwrap() >= base);
    }
}

#[test]
fn synthetic_half_order_is_recovered() {
    let pairs: Vec<(usize, f64)> = [4, 8, 16, 32, 64, 128].iter().map(|&n| (n, 0.3 + 2.0 * (n as f64).powf(-0.5))).collect();
    let r = fit_order(&pairs, 0.3, 1e-14, 0.25).unwrap();
    assert!((r.fitted_order - 0.5).abs() < 1e-3, "{}", r.fitted_order);
    assert!(r.pass);
    assert!(r.used_in_fit.iter().all(|&u| u));
}

#[test]
fn fit_fails_against_higher_theory() {
    let pairs: Vec<(usize, f64)> = [4, 8, 16, 32].iter().map(|&n| (n, 1.0 + (n as f64).powf(-0.2))).collect();
    assert!(!fit_order(&pairs, 1.0, 1e-14, 0.5).unwrap().pass);
}

#[test]
fn values_at_reference_are_degenerate() {
    let pairs: Vec<(usize, f64)> = [1, 2, 4, 8].iter().map(|&n| (n, 0.7)).collect();
    assert!(matches!(fit_order(&pairs, 0.7, 1e-14, 0.1), Err(AnalysisError::DegenerateFit { usable: 0 })));
    let noisy: Vec<(usize, f64)> = [1, 2, 4, 8].iter().map(|&n| (n, 0.7 + 1e-14 * n as f64)).collect();
    assert!(matches!(fit_order(&noisy, 0.7, 1e-12, 0.1), Err(AnalysisError::DegenerateFit { .. })));
}

#[test]
fn fit_input_is_validated() {
    assert!(matches!(fit_order(&[(1, 1.0), (2, 0.5), (4, 0.2)], 0.0, 1e-14, 0.1), Err(AnalysisError::TooFewPairs(3))));
    let unordered = [(1, 1.0), (4, 0.5), (2, 0.2), (8, 0.1)];
    assert!(matches!(fit_order(&unordered, 0.0, 1e-14, 0.1), Err(AnalysisError::NotIncreasing)));
    let ok = [(1, 1.0), (2, 0.5), (4, 0.25), (8, 0.125)];
    assert!(fit_order(&ok, f64::NAN, 1e-14, 0.1).is_err());
}

#[test]
fn report_serialises() {
    let pairs: Vec<(usize, f64)> = [1, 2, 4, 8].iter().map(|&n| (n, 1.0 / n as f64)).collect();
    let r = fit_order(&pairs, 0.0, 1e-14, 0.5).unwrap();
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("n,value,abs_residual,log_residual\n"));
    assert_eq!(text.lines().count(), 5);
    let j = r.summary_json(&serde_json::json!({"phi": "test"}));
    assert!((j["fitted_order"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(j["config"]["phi"], "test");
    let exact = RateReport::exact_case(&pairs, 0.0, 2.0);
    assert!(exact.pass && exact.exact);
    assert!(exact.summary_json(&serde_json::Value::Null)["fitted_order"].is_null());
}

fn moments(b: &gpide::uncertainty::UncertaintyBox, n_max: usize) -> MomentSet {
    let quad = StepQuadrature { gauss_order: 8, wk_interior_order: 32, wk_radius: 1e4 };
    let proxy = ProxySettings { z_half_width: 200.0, z_points: 801 };
    compute_moments(b, &TailShape::default(), &quad, 1.2, n_max, 1.0, &proxy).unwrap()
}

#[test]
fn simple_moments() {
    let m = moments(&boxed((0.3, 0.35), (-1.0, 3.0), (1.0, 1.0), 1.5), 2);
    assert_eq!(m.m_x2, 1.0);
    assert_eq!(m.m_y1, 3.0);
    assert_eq!(m.m_y2, 9.0);
    // E|N|³ by quadrature of the density
    let dens = |x: f64| x.abs().powi(3) * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let oracle: f64 = (0..40).map(|i| 2.0 * simpson(&dens, 0.5 * i as f64, 0.5 * (i + 1) as f64, 1e-16)).sum();
    assert!((m.m_x3 - oracle).abs() < 1e-10, "{} vs {oracle}", m.m_x3);
    assert!((m.m_x3 - 1.595_769_121_605_731).abs() < 1e-12);
}

#[test]
fn jump_moments_match_density_quadrature() {
    let b = default_box();
    let m = moments(&b, 1);
    let laws = corner_laws(&b, 0.01, 0.01, 1.8).unwrap();
    let zd = laws.iter().map(|l| fractional_moment_oracle(l, 1.2)).fold(0.0, f64::max);
    let z1 = laws.iter().map(|l| fractional_moment_oracle(l, 1.0)).fold(0.0, f64::max);
    assert!((m.m_zdelta - zd).abs() < 1e-8, "{} vs {zd}", m.m_zdelta);
    assert!((m.m_z1 - z1).abs() < 1e-8, "{} vs {z1}", m.m_z1);
}

#[test]
fn c0_and_m0_are_assembled_from_the_parts() {
    let m = moments(&default_box(), 2);
    assert_eq!(m.c0, (m.m_x2.sqrt() + m.m_y1 + m.m_z_proxy).max(1.0));
    let m0 = m.m_x2 + m.m_x3 + m.m_y1 + m.m_y2 + m.m_x3.cbrt() * m.m_zdelta.powf(2.0 / 3.0) + m.m_y2.sqrt() * m.m_z1.sqrt() + m.m_z1;
    assert!((m.m0 - m0).abs() < 1e-14);
}

#[test]
fn proxy_grows_with_n_max() {
    let b = default_box();
    let quad = StepQuadrature { gauss_order: 8, wk_interior_order: 32, wk_radius: 1e4 };
    let proxy = ProxySettings { z_half_width: 200.0, z_points: 801 };
    let small = mz_proxy(&b, &TailShape::default(), &quad, 3, &proxy).unwrap();
    let big = mz_proxy(&b, &TailShape::default(), &quad, 6, &proxy).unwrap();
    assert!(small > 0.0);
    assert!(small <= big + 1e-8);
}

#[test]
fn moments_reject_bad_delta_and_n_max() {
    let quad = StepQuadrature::default();
    let proxy = ProxySettings::default();
    let b = default_box();
    assert!(matches!(
        compute_moments(&b, &TailShape::default(), &quad, 1.0, 4, 1.0, &proxy),
        Err(AnalysisError::DeltaOutOfRange { .. })
    ));
    assert!(compute_moments(&b, &TailShape::default(), &quad, 1.2, 0, 1.0, &proxy).is_err());
}

fn fixed_moments() -> MomentSet {
    MomentSet {
        m_x2: 1.0,
        m_x3: abs_normal_third_moment(),
        m_y1: 0.2,
        m_y2: 0.04,
        m_zdelta: 2.0,
        m_z1: 1.5,
        delta: 1.2,
        m_z_proxy: 1.6,
        n_max: 32,
        c_phi: 1.0,
        c0: 2.8,
        m0: 8.0,
    }
}

const LHAT: LhatTerms = LhatTerms { c_alpha_beta: 0.1, q0: 0.2, alpha: 1.5 };

#[test]
fn small_h_leaves_only_the_lhat_part() {
    let m = fixed_moments();
    // the l̂ part decays like h^{q₀}; it outlives the bracket only when q₀ is
    // below the slowest bracket power (4δ − 3α)/(6α) = 1/30
    let slow = LhatTerms { q0: 0.01, ..LHAT };
    let no_l = LhatTerms { c_alpha_beta: 0.0, ..slow };
    let eps = 0.5;
    let mut prev = f64::INFINITY;
    for k in [4, 10, 40, 100, 1000] {
        let h = 2f64.powi(-k);
        let with = error_budget(eps, h, &m, 3.0, &slow).unwrap();
        let without = error_budget(eps, h, &m, 3.0, &no_l).unwrap();
        let lhat = 4.0 * 0.1 * m.c0 * 3.0 * (h.powf(0.01) + h.powf(0.5 / 1.5)) / eps;
        assert!((with.e2 - without.e2 - lhat).abs() <= 1e-12 * with.e2);
        assert!(without.e2 < prev);
        prev = without.e2;
    }
    let h = 2f64.powi(-1000);
    let with = error_budget(eps, h, &m, 3.0, &slow).unwrap();
    let without = error_budget(eps, h, &m, 3.0, &no_l).unwrap();
    assert!(without.e2 / with.e2 < 1e-3, "{}", without.e2 / with.e2);
}

#[test]
fn doubling_c0_doubles_the_eps_term() {
    let m = fixed_moments();
    let m2 = MomentSet { c0: 2.0 * m.c0, ..m };
    let (eps, h) = (0.2, 0.01);
    let a = error_budget(eps, h, &m, 3.0, &LHAT).unwrap();
    let b = error_budget(eps, h, &m2, 3.0, &LHAT).unwrap();
    let term = |x: &ErrorBudget| x.upper_total - x.c0 * h.sqrt() - x.e2;
    assert!((term(&a) - 4.0 * m.c0 * eps).abs() < 1e-12);
    assert!((term(&b) - 2.0 * term(&a)).abs() < 1e-12);
    assert!((b.e2 - 2.0 * a.e2).abs() < 1e-12 * b.e2);
}

#[test]
fn budget_rejects_parameters_outside_unit_interval() {
    let m = fixed_moments();
    assert!(error_budget(0.0, 0.1, &m, 1.0, &LHAT).is_err());
    assert!(error_budget(0.1, 1.0, &m, 1.0, &LHAT).is_err());
}

#[test]
fn analytic_eps_total_scales_like_h_to_gamma() {
    let m = fixed_moments();
    let gamma = rate_exponent(1.5, 1.2, 0.2).unwrap();
    // the 5ε⁻²h^{1/2} term still dominates for moderate h, so the slope is
    // read where the h^γ terms have taken over
    let hs: Vec<f64> = (400..=600).step_by(25).map(|k| 2f64.powi(-k)).collect();
    let totals: Vec<f64> = hs.iter().map(|&h| error_budget(h.powf(gamma), h, &m, 3.0, &LHAT).unwrap().upper_total).collect();
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = totals.iter().map(|t| t.ln()).collect();
    let slope = common_slope(&xs, &ys);
    assert!((slope - gamma).abs() < 0.02, "slope {slope} vs γ {gamma}");
}

#[test]
fn eps_grid_resolves_the_minimum() {
    let m = fixed_moments();
    let gamma = rate_exponent(1.5, 1.2, 0.2).unwrap();
    for k in 4..=10 {
        let h = 2f64.powi(-k);
        let best = minimized_upper(h, &m, 3.0, &LHAT).unwrap();
        // ten times finer grid of exponents
        let fine = (1..=640)
            .map(|i| error_budget(h.powf(i as f64 / 1280.0), h, &m, 3.0, &LHAT).unwrap().upper_total)
            .fold(f64::INFINITY, f64::min);
        assert!(best.upper_total <= 1.05 * fine, "h = 2^-{k}: {} vs {fine}", best.upper_total);
        let at = error_budget(h.powf(gamma), h, &m, 3.0, &LHAT).unwrap();
        assert!(best.upper_total <= at.upper_total);
    }
}

fn common_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn eps_grid_covers_half_open_interval() {
    let g = eps_exponent_grid();
    assert_eq!(g.len(), 64);
    assert!(g[0] > 0.0);
    assert_eq!(*g.last().unwrap(), 0.5);
}

/// `ψ(x) = exp(−1/(1 − x²))`.
fn bump(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - x * x)).exp()
    }
}

/// `∫|ψ^{(i)}|` with `ψ^{(i)}` from nested central differences of `ψ` and
/// the trapezoid rule on `m` cells.
fn fd_abs_integrals_at(m: usize) -> [f64; 4] {
    let dx = 2.0 / m as f64;
    let f: Vec<f64> = (0..=m + 8).map(|i| bump(-1.0 - 4.0 * dx + i as f64 * dx)).collect();
    let mut out = [0.0; 4];
    let mut cur = f;
    for (i, o) in out.iter_mut().enumerate() {
        *o = cur.iter().map(|v| v.abs()).sum::<f64>() * dx;
        if i < 3 {
            let mut next = vec![0.0; cur.len()];
            for j in 1..cur.len() - 1 {
                next[j] = (cur[j + 1] - cur[j - 1]) / (2.0 * dx);
            }
            cur = next;
        }
    }
    out
}

/// Richardson extrapolation of the `O(Δ²)` differences; the kinks of `|·|`
/// limit it to about six digits.
fn fd_abs_integrals() -> [f64; 4] {
    let a = fd_abs_integrals_at(4000);
    let b = fd_abs_integrals_at(8000);
    std::array::from_fn(|i| (4.0 * b[i] - a[i]) / 3.0)
}

#[test]
fn k_zeta_matches_finite_difference_oracle() {
    let j = bump_abs_integrals();
    let fd = fd_abs_integrals();
    for i in 0..4 {
        assert!((j[i] - fd[i]).abs() < 5e-6 * fd[i].max(1.0), "order {i}: {} vs {}", j[i], fd[i]);
    }
    let oracle = K_ZETA_ORDERS.iter().map(|&(i, k)| 2f64.powi(i as i32) * fd[i as usize] * fd[k] / (fd[0] * fd[0])).fold(0.0, f64::max);
    let k = bump_k_zeta();
    assert!((k - oracle).abs() < 5e-6 * oracle, "{k} vs {oracle}");
}
