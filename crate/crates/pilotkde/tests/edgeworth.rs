use approx::assert_abs_diff_eq;
use pilotkde::edgeworth::*;
use pilotkde::numerics::{integrate, integrate2d, normal_cdf, normal_pdf, QuadratureSpec, Scheme};
use pilotkde::{marron_wand, Error, IlVariant};
use std::f64::consts::PI;
use std::sync::OnceLock;

const I2_NORMAL: f64 = 0.21157109383040862;
const ALPHAS: [f64; 7] = [0.01, 0.025, 0.05, 0.5, 0.95, 0.975, 0.99];

fn setup() -> &'static ExpansionSetup {
    static S: OnceLock<ExpansionSetup> = OnceLock::new();
    S.get_or_init(|| ExpansionSetup::standard(marron_wand(1).unwrap(), 6, IlVariant::Ustat).unwrap())
}

/// Model 1, x = 0, n = 100, with b = b₀.
fn ctx100() -> &'static ExpansionContext {
    static C: OnceLock<ExpansionContext> = OnceLock::new();
    C.get_or_init(|| build_context(setup(), 0.0, 100, BPolicy::MseOptimal).unwrap())
}

/// h⁻¹ E[(K − EK)^k] at x = 0 by quadrature in u.
fn central_moment(h: f64, k: i32) -> f64 {
    let q = QuadratureSpec::one_d();
    let m = h * integrate(|u| normal_pdf(u) * normal_pdf(u * h), -12.0, 12.0, &q).unwrap();
    integrate(|u| (normal_pdf(u) - m).powi(k) * normal_pdf(u * h), -12.0 / h, 12.0 / h, &q).unwrap()
}

/// h⁻¹ Cov(A(X), B(X)) by quadrature in y.
fn covariance(h: f64, a: impl Fn(f64) -> f64, b: impl Fn(f64) -> f64) -> f64 {
    let q = QuadratureSpec::one_d();
    let f = normal_pdf;
    let ea = integrate(|y| a(y) * f(y), -12.0, 12.0, &q).unwrap();
    let eb = integrate(|y| b(y) * f(y), -12.0, 12.0, &q).unwrap();
    integrate(|y| (a(y) - ea) * (b(y) - eb) * f(y), -12.0, 12.0, &q).unwrap() / h
}

fn rates(ctx: &ExpansionContext) -> (f64, f64, [f64; 2], f64, [f64; 2], f64) {
    let (n, h, b) = (ctx.n as f64, ctx.h0, ctx.b.unwrap());
    (
        (n * h).powf(-0.5),
        1.0 / (n * h),
        [h.powi(3), h.powi(4)],
        h.sqrt() / n.sqrt(),
        [h.powf(2.5) / n.sqrt() / b.powi(4), h.powf(3.5) / n.sqrt() / b.powi(4)],
        1.0 / (n * b.powi(4)),
    )
}

#[test]
fn mu20_closed_form() {
    // Gaussian K and f: ∫φ²(u)φ(uh)du − h(∫φ(u)φ(uh)du)²
    let ctx = ctx100();
    let h = ctx.h0;
    let exact = (PI / (1.0 + h * h / 2.0)).sqrt() / (2.0 * PI * (2.0 * PI).sqrt()) - h / (2.0 * PI * (1.0 + h * h));
    assert_abs_diff_eq!(ctx.mu20, exact, epsilon = 1e-10);
    assert_abs_diff_eq!(ctx.center, 1.0 / (2.0 * PI * (1.0 + h * h)).sqrt(), epsilon = 1e-12);
}

#[test]
fn mu20_series() {
    let s = setup();
    let series = mu_series(&s.model, &s.constants, 0.0, 2);
    let f = normal_pdf(0.0);
    // beyond h²: −h³ f f″ and κ₄₂ f⁽⁴⁾ h⁴/24 for this pair
    for n in [100, 10_000, 1_000_000] {
        let h = s.h0(n).unwrap();
        let m = local_moments(s, 0.0, h).unwrap();
        let truncated: f64 = series.m2.iter().enumerate().map(|(l, c)| c * h.powi(l as i32)).sum();
        let next = -h.powi(3) * f * (-f) + 3.0 / (8.0 * PI.sqrt()) * 3.0 * f / 24.0 * h.powi(4);
        assert!((m.mu20 - truncated - next).abs() < 0.2 * h.powi(5), "n={n}");
        if n >= 1_000_000 {
            assert!((m.mu20 - truncated).abs() < 5e-4);
        }
    }
    let tiny = local_moments(s, 0.7, 1e-4).unwrap();
    let lead = s.constants.kappa(0, 2) * s.model.pdf(0.7);
    assert!((tiny.mu20 / lead - 1.0).abs() < 1e-3);
}

#[test]
fn rho11_leading_term() {
    let s = setup();
    let f0 = normal_pdf(0.0);
    assert_abs_diff_eq!(s.model.deriv(0.0, 4), 1.19683, epsilon = 1e-5);
    assert_abs_diff_eq!(s.script_l(0.0), 0.98526, epsilon = 1e-5);
    let lead = s.script_l(0.0) * f0;
    assert_abs_diff_eq!(lead, 0.39307, epsilon = 1e-5);
    // ρ₁₁ − 𝓛f = O(h²)
    let mut prev = f64::INFINITY;
    for h in [0.2, 0.1, 0.05, 0.01] {
        let gap = (local_moments(s, 0.0, h).unwrap().rho11 - lead).abs();
        assert!(gap < prev && gap < 2.0 * h * h, "h={h}: {gap}");
        prev = gap;
    }
    // at n = 1000 the O(h₀²) term is about 0.08
    let h = s.h0(1000).unwrap();
    let rho = local_moments(s, 0.0, h).unwrap().rho11;
    let oracle = covariance(h, |y| normal_pdf(y / h), |y| s.model.deriv(y, 4));
    assert_abs_diff_eq!(rho, oracle, epsilon = 1e-9);
}

#[test]
fn moments_by_independent_quadrature() {
    let ctx = ctx100();
    let h = ctx.h0;
    assert_abs_diff_eq!(ctx.mu20, central_moment(h, 2), epsilon = 1e-10);
    assert_abs_diff_eq!(ctx.mu30, central_moment(h, 3), epsilon = 1e-10);
    assert_abs_diff_eq!(ctx.mu40, central_moment(h, 4), epsilon = 1e-10);
    let k = |y: f64| normal_pdf(y / h);
    let j = |y: f64| {
        let u = y / h;
        -u * u * normal_pdf(u) + normal_pdf(u)
    };
    assert_abs_diff_eq!(ctx.mu11, covariance(h, k, |y| k(y) * k(y)), epsilon = 1e-10);
    assert_abs_diff_eq!(ctx.xi11, covariance(h, k, j), epsilon = 1e-10);
    assert_abs_diff_eq!(ctx.delta, covariance(h, k, j) - covariance(h, k, k), epsilon = 1e-10);
    assert!((ctx.mu11 - ctx.mu30).abs() < 5.0 * h);
}

#[test]
fn hall_polynomials_values() {
    let ctx = ctx100();
    for z in [-1.0, 1.0] {
        assert_abs_diff_eq!(hall_polynomials(ctx, z).p1, 0.0, epsilon = 1e-15);
    }
    assert_abs_diff_eq!(hall_polynomials(ctx, 0.0).p2, 0.0, epsilon = 1e-15);
    let h = ctx.h0;
    let (m2, m3, m4) = (central_moment(h, 2), central_moment(h, 3), central_moment(h, 4));
    let z: f64 = 1.96;
    let p1 = -m3 / (6.0 * m2.powf(1.5)) * (z * z - 1.0);
    let p2 = -m4 / (24.0 * m2 * m2) * (z.powi(3) - 3.0 * z) - m3 * m3 / (72.0 * m2.powi(3)) * (z.powi(5) - 10.0 * z.powi(3) + 15.0 * z);
    let hp = hall_polynomials(ctx, z);
    assert_abs_diff_eq!(hp.p1, p1, epsilon = 1e-8);
    assert_abs_diff_eq!(hp.p2, p2, epsilon = 1e-8);
}

#[test]
fn plugin_polynomials_values() {
    let ctx = ctx100();
    let at0 = plugin_polynomials(ctx, 0.0);
    assert!(at0.p3.iter().all(|v| *v == 0.0));
    assert_abs_diff_eq!(at0.p4, ctx.c_pi * ctx.rho11 * ctx.xi11 * ctx.mu20.powf(-1.5), epsilon = 1e-14);
    for x in [-1.3, 0.0, 0.5, 2.0] {
        assert_abs_diff_eq!(setup().c_gamma(x)[1], 0.0, epsilon = 1e-10);
    }
    assert_eq!(ctx.c_gamma.len(), 2);

    let h = ctx.h0;
    let s = setup();
    let m2 = central_moment(h, 2);
    let rho = covariance(h, |y| normal_pdf(y / h), |y| s.model.deriv(y, 4));
    let xi = covariance(h, |y| normal_pdf(y / h), |y| (1.0 - (y / h).powi(2)) * normal_pdf(y / h));
    let c_pi = 2.0 / (5.0 * I2_NORMAL);
    // C_{Γ,0}(0) = −κ₂ f″(0)
    let cg0 = normal_pdf(0.0);
    let z: f64 = 1.96;
    let pp = plugin_polynomials(ctx, z);
    assert_abs_diff_eq!(pp.p3[0], -c_pi * cg0 * rho / m2 * z, epsilon = 1e-8);
    let p4 = -c_pi * rho * xi * m2.powf(-1.5) * (z * z - 1.0) + 0.5 * c_pi * rho * m2.powf(-0.5) * z * z;
    assert_abs_diff_eq!(pp.p4, p4, epsilon = 1e-8);
}

#[test]
fn pilot_moments_by_double_quadrature() {
    let ctx = ctx100();
    let s = setup();
    let (h, b) = (ctx.h0, ctx.b.unwrap());
    let p4 = |v: f64| s.pilot.derivative(4, v);
    let q = QuadratureSpec::one_d();
    let m1 = h * integrate(|u| normal_pdf(u) * normal_pdf(u * h), -12.0, 12.0, &q).unwrap();
    let mj = h * integrate(|u| (1.0 - u * u) * normal_pdf(u) * normal_pdf(u * h), -12.0, 12.0, &q).unwrap();
    let g1 = |y: f64| (normal_pdf(y / h) - m1) * normal_pdf(y);
    let g2 = |y: f64| ((1.0 - (y / h).powi(2)) * normal_pdf(y / h) - mj) * normal_pdf(y);
    let spec = QuadratureSpec::new(Scheme::TensorProduct2d, 1e-10, 1e-10, 40).unwrap();
    let omega = integrate2d(|y1, y2| g1(y1) * p4((y1 - y2) / b) * g1(y2), (-9.0, 9.0), (-9.0, 9.0), &spec).unwrap() / (h * b);
    let psi = integrate2d(|y1, y2| g1(y1) * p4((y1 - y2) / b) * g2(y2), (-9.0, 9.0), (-9.0, 9.0), &spec).unwrap() / (h * b);
    let tol = |v: f64| 1e-6 * v.abs().max(1e-3);
    assert_abs_diff_eq!(ctx.omega111.unwrap(), omega, epsilon = tol(omega));
    assert_abs_diff_eq!(ctx.psi111.unwrap(), psi, epsilon = tol(psi));

    for z in [-1.0, 1.0] {
        assert!(pilot_polynomials(ctx, z).unwrap().frak_p1.iter().all(|v| v.abs() < 1e-15));
    }
    assert_eq!(pilot_polynomials(ctx, 0.0).unwrap().frak_p2, 0.0);

    let z: f64 = 1.96;
    let m2 = ctx.mu20;
    let c_pi = ctx.c_pi;
    let pp = pilot_polynomials(ctx, z).unwrap();
    let p1 = -0.5 * c_pi * normal_pdf(0.0) * m2.powf(-1.5) * omega * (z * z - 1.0);
    let p2 = -c_pi
        * (0.5 * m2.powi(-2) * ctx.xi11 * omega * (z.powi(3) - 3.0 * z) + psi / m2 * z - 0.25 * omega / m2 * (z.powi(3) - z));
    assert_abs_diff_eq!(pp.frak_p1[0], p1, epsilon = 1e-8 * p1.abs());
    assert_abs_diff_eq!(pp.frak_p2, p2, epsilon = 1e-8 * p2.abs());
}

#[test]
fn student_polynomials_values() {
    let ctx = ctx100();
    let q0 = student_polynomials(ctx, 0.0).unwrap();
    assert_eq!(q0.q2, 0.0);
    let s = ctx.mu20.powf(-1.5);
    assert_abs_diff_eq!(q0.q1, 0.5 * s * ctx.mu11 + s * (ctx.mu30 - 3.0 * ctx.mu11) / 6.0, epsilon = 1e-14);
    let mut bare = ctx.clone();
    bare.omega111 = None;
    assert!(matches!(student_polynomials(&bare, 0.3), Err(Error::MissingField { .. })));
}

#[test]
fn cdf_limits() {
    let ctx = ctx100();
    for kind in CdfKind::ALL {
        assert_abs_diff_eq!(cdf_approx(ctx, 10.0, kind).unwrap(), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(cdf_approx(ctx, -10.0, kind).unwrap(), 0.0, epsilon = 1e-8);
        assert_eq!(kind.to_string().parse::<CdfKind>().unwrap(), kind);
    }
    assert_abs_diff_eq!(cdf_approx(ctx, 1.959964, CdfKind::Normal).unwrap(), 0.975, epsilon = 1e-7);
}

#[test]
fn missing_pilot_fields() {
    let ctx = build_context(setup(), 0.0, 100, BPolicy::None).unwrap();
    for kind in [CdfKind::Pilot1, CdfKind::Pilot2, CdfKind::Student] {
        assert!(matches!(cdf_approx(&ctx, 0.5, kind), Err(Error::MissingField { .. })), "{kind}");
        assert!(cornish_fisher_quantile(&ctx, kind, 0.975).is_err());
    }
    for kind in [CdfKind::Normal, CdfKind::Hall1, CdfKind::Hall2, CdfKind::Main] {
        assert!(cdf_approx(&ctx, 0.5, kind).is_ok());
    }
    assert!(build_context(setup(), 0.0, 100, BPolicy::Fixed(-1.0)).is_err());
}

#[test]
fn structural_nesting() {
    let ctx = ctx100();
    let mut flat = ctx.clone();
    flat.rho11 = 0.0;
    let z = 0.5;
    assert_abs_diff_eq!(
        cdf_approx(&flat, z, CdfKind::Main).unwrap(),
        cdf_approx(ctx, z, CdfKind::Hall2).unwrap(),
        epsilon = 1e-14
    );
    let mut no_pilot = ctx.clone();
    no_pilot.omega111 = Some(0.0);
    no_pilot.psi111 = Some(0.0);
    assert_eq!(
        cdf_approx(&no_pilot, z, CdfKind::Pilot2).unwrap(),
        cdf_approx(ctx, z, CdfKind::Main).unwrap()
    );

    // the Studentised bracket is the q-terms plus the shared p-terms
    let (r1, r2, r3, r4, rf1, rf2) = rates(ctx);
    for z in [-1.7, 0.3, 2.2] {
        let q = student_polynomials(ctx, z).unwrap();
        let pl = plugin_polynomials(ctx, z);
        let pp = pilot_polynomials(ctx, z).unwrap();
        let shared = r4 * pl.p4 + r3[0] * pl.p3[0] + r3[1] * pl.p3[1] + rf1[0] * pp.frak_p1[0] + rf1[1] * pp.frak_p1[1] + rf2 * pp.frak_p2;
        let q_terms = r1 * q.q1 + r4 * (q.q2 + q.frak_q1) + r2 * q.q3 + rf2 * q.frak_q2;
        assert_abs_diff_eq!(correction(ctx, z, CdfKind::Student).unwrap(), shared + q_terms, epsilon = 1e-14);

        let hp = hall_polynomials(ctx, z);
        assert_abs_diff_eq!(correction(ctx, z, CdfKind::Hall1).unwrap(), r1 * hp.p1, epsilon = 1e-15);
        assert_abs_diff_eq!(
            correction(ctx, z, CdfKind::Pilot1).unwrap(),
            r1 * hp.p1 + rf1[0] * pp.frak_p1[0] + rf1[1] * pp.frak_p1[1] + rf2 * pp.frak_p2,
            epsilon = 1e-14
        );
    }
    let mut plain = ctx.clone();
    plain.delta = 0.0;
    plain.mu11 = 0.0;
    plain.mu21 = 0.0;
    plain.mu02 = 0.0;
    let q = student_polynomials(&plain, 1.3).unwrap();
    assert_abs_diff_eq!(q.frak_q1, 0.5 * plain.c_pi * plain.mu20.powf(-0.5) * plain.rho11 * 1.69, epsilon = 1e-14);
}

#[test]
fn mu_series_coefficients() {
    let s = setup();
    let m = mu_series(&s.model, &s.constants, 0.0, 2);
    assert_abs_diff_eq!(m.m2[0], 0.1125395, epsilon = 1e-7);
    assert_abs_diff_eq!(m.m2[1], -0.1591549, epsilon = 1e-7);
    // −3 κ₀₂ f(0)² = −3 · 0.2820948 · 0.1591549
    assert_abs_diff_eq!(m.m3[1], -0.1346903, epsilon = 1e-7);
    assert_eq!(m.m2.len(), 3);
    assert_eq!(m.m3.len(), 3);
}

#[test]
fn power_series_consistency() {
    let s = setup();
    let n = 10_000;
    let ctx = build_context(s, 0.0, n, BPolicy::None).unwrap();
    let budget = 3.0 / n as f64 * (n as f64).ln();
    for z in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let ps = power_series_coeffs(s, 0.0, z).unwrap();
        assert_eq!(ps.b_coeff[0], ps.a[0]);
        assert_eq!(ps.a.len(), 3);
        assert_eq!(ps.b_coeff.len(), 3);
        let series = normal_cdf(z) + normal_pdf(z) * PowerSeries::sum(&ps.a, 2, n as f64);
        let direct = cdf_approx(&ctx, z, CdfKind::Hall2).unwrap();
        assert!((series - direct).abs() < budget, "z={z}: {series} vs {direct}");
    }
    for z in [-1.0, 1.0] {
        assert_abs_diff_eq!(power_series_coeffs(s, 0.0, z).unwrap().a[0], 0.0, epsilon = 1e-15);
    }
}

#[test]
fn power_series_tracks_main() {
    // the b-series through n^{−(L+2)/(2L+1)} approaches the main bracket faster than the a-series
    let s = setup();
    let x = 0.5;
    let mut errs = Vec::new();
    for n in [10_000usize, 1_000_000] {
        let ctx = build_context(s, x, n, BPolicy::None).unwrap();
        let z = 1.3;
        let ps = power_series_coeffs(s, x, z).unwrap();
        let direct = correction(&ctx, z, CdfKind::Main).unwrap();
        let b_err = (PowerSeries::sum(&ps.b_coeff, 2, n as f64) - direct).abs();
        let a_err = (PowerSeries::sum(&ps.a[..3], 2, n as f64) - direct).abs();
        assert!(b_err < a_err, "n={n}: {b_err} vs {a_err}");
        errs.push(b_err / direct.abs());
    }
    assert!(errs[1] < errs[0]);
}

#[test]
fn quantile_round_trips() {
    let ctx = ctx100();
    assert_abs_diff_eq!(cornish_fisher_quantile(ctx, CdfKind::Normal, 0.975).unwrap(), 1.959964, epsilon = 1e-6);
    let ctx1 = build_context(setup(), 1.0, 1000, BPolicy::MseOptimal).unwrap();
    for c in [ctx, &ctx1] {
        for kind in CdfKind::ALL {
            for alpha in ALPHAS {
                let w = cornish_fisher_quantile(c, kind, alpha).unwrap();
                let back = cdf_approx(c, w, kind).unwrap();
                assert!((back - alpha).abs() <= 1e-8, "{kind} {alpha}: {back}");
            }
        }
    }
    assert!(cornish_fisher_quantile(ctx, CdfKind::Main, 0.0).is_err());
    assert!(cornish_fisher_quantile(ctx, CdfKind::Main, 1.0).is_err());
}

#[test]
fn quantile_failure_names_kind() {
    // with a zero bracket the cdf is Φ, which stays below α on [−6, 6]
    let mut flat = ctx100().clone();
    flat.mu30 = 0.0;
    flat.mu40 = 0.0;
    let alpha = 1.0 - 1e-12;
    match cornish_fisher_quantile(&flat, CdfKind::Hall2, alpha) {
        Err(Error::QuantileNotFound { kind, alpha: a }) => {
            assert_eq!(kind, "hall2");
            assert_eq!(a, alpha);
        }
        other => panic!("expected a quantile failure, got {other:?}"),
    }
}

#[test]
fn corrections_vanish_with_n() {
    let s = setup();
    let big = build_context(s, 0.0, 1_000_000, BPolicy::None).unwrap();
    let w = cornish_fisher_quantile(&big, CdfKind::Main, 0.975).unwrap();
    assert!((w - 1.959964).abs() < 0.01);
    let huge = build_context(s, 0.0, 100_000_000, BPolicy::MseOptimal).unwrap();
    for kind in CdfKind::ALL {
        for i in 0..=60 {
            let z = -3.0 + 0.1 * i as f64;
            assert!(correction(&huge, z, kind).unwrap().abs() < 1e-2, "{kind} z={z}");
        }
    }
}

#[test]
fn odd_parity_audit() {
    let q = QuadratureSpec::one_d();
    let v = integrate(|z| (z * z - 1.0) * normal_pdf(z), -12.0, 12.0, &q).unwrap();
    assert!(v.abs() < 1e-10);
    let ctx = ctx100();
    let p1_mass = integrate(|z| hall_polynomials(ctx, z).p1 * normal_pdf(z), -12.0, 12.0, &q).unwrap();
    assert!(p1_mass.abs() < 1e-10);
    let odd = integrate(|z| hall_polynomials(ctx, z).p2 * normal_pdf(z), -12.0, 12.0, &q).unwrap();
    assert!(odd.abs() < 1e-10);
}

#[test]
fn exact_order_slope() {
    let s = setup();
    let ns = [100usize, 1_000, 10_000, 100_000];
    let sups: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let ctx = build_context(s, 0.5, n, BPolicy::None).unwrap();
            (0..=800)
                .map(|i| {
                    let z = -4.0 + 0.01 * i as f64;
                    (cdf_approx(&ctx, z, CdfKind::Main).unwrap() - cdf_approx(&ctx, z, CdfKind::Hall2).unwrap()).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    assert!(sups.windows(2).all(|w| w[1] < w[0]));
    let xs: Vec<f64> = ns.iter().map(|n| (*n as f64).ln()).collect();
    let ys: Vec<f64> = sups.iter().map(|v| v.ln()).collect();
    let slope = least_squares_slope(&xs, &ys);
    assert!((slope + 0.6).abs() < 0.1, "slope {slope}");
}

fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn cache_round_trip() {
    let ctx = ctx100();
    let text = ctx.to_cache_string();
    assert!(text.starts_with(CACHE_HEADER));
    let back = ExpansionContext::from_cache_str(&text).unwrap();
    assert_eq!(&back, ctx);
    assert!(back.matches(setup(), 0.0, 100, ctx.b));
    assert!(!back.matches(setup(), 0.0, 200, ctx.b));
    assert!(ExpansionContext::from_cache_str("pilotkde-context v0\n").is_err());
    let bare = build_context(setup(), 1.0, 50, BPolicy::None).unwrap();
    assert_eq!(ExpansionContext::from_cache_str(&bare.to_cache_string()).unwrap(), bare);
}

#[test]
fn kernel_order_must_match() {
    let s = setup();
    let k6 = pilotkde::hermite_order_kernel(6).unwrap();
    assert!(ExpansionSetup::new(s.model.clone(), k6, s.pilot.clone(), 2, 6, IlVariant::Ustat).is_err());
}
