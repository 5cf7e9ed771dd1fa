//! Training-free checks of the theory behind the method. Synthetic
//! equivalence classes are represented by their rotation offsets alone, and
//! an oracle group-action estimator maps an offset g to g∘β for a chosen
//! bias β. With β = e every condition of the propositions holds; with a
//! disallowed bias the violation witness sits at the extremes of the class,
//! so those extremes are always injected into the samples.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::group::{angular_distance, cyclic_elements, sample_spec, Angle, SO2Element, SymmetrySpec};
use crate::seed::{derive_seed, rng_from_seed, stream};

/// Slack for floating-point composition when comparing angles.
const ANGLE_EPS: f64 = 1e-9;

/// Oracle group-action estimator with a fixed bias: ψ(g) = g∘β. Exactly
/// equivariant by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OraclePsi {
    pub bias: Angle,
}

impl OraclePsi {
    pub fn new(bias_degrees: f64) -> Result<Self> {
        Ok(Self { bias: Angle::new(bias_degrees)? })
    }

    pub fn apply(&self, offset: Angle) -> Angle {
        SO2Element::from_angle(offset)
            .compose(SO2Element::from_angle(self.bias))
            .angle()
    }
}

/// The offsets of one synthetic equivalence class. The center (offset 0)
/// is always the first element.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClass {
    pub spec: SymmetrySpec,
    pub offsets: Vec<Angle>,
}

impl SyntheticClass {
    /// The center, any `extremes`, then `n` draws from `spec`.
    pub fn sample(spec: SymmetrySpec, extremes: &[Angle], n: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, stream::TESTBED, 0));
        let mut offsets = vec![Angle::ZERO];
        offsets.extend_from_slice(extremes);
        offsets.extend((0..n).map(|_| sample_spec(&spec, &mut rng)));
        Self { spec, offsets }
    }

    pub fn center(&self) -> Angle {
        self.offsets[0]
    }
}

/// Outcome of one check: whether the observed behaviour matches what the
/// theory predicts for the given parameters, plus the deciding evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub params: String,
    pub pass: bool,
    pub witness: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{} {} {} {}", self.name, self.params, verdict, self.witness)
    }
}

fn is_identity(a: Angle) -> bool {
    a.abs() <= ANGLE_EPS
}

/// Uniform symmetries. With β = e the center maps to e and the whole class
/// maps into [-θ, θ]; otherwise some member (an injected ±θ extreme) maps
/// outside that interval.
pub fn check_prop1(theta: f64, n_samples: usize, beta: f64, seed: u64) -> Result<CheckResult> {
    if !(theta > 0.0 && theta <= 180.0) {
        return Err(Error::InvalidArgument(format!("uniform boundary must lie in (0, 180], got {theta}")));
    }
    if n_samples < 100 {
        return Err(Error::InvalidArgument(format!("at least 100 samples required, got {n_samples}")));
    }
    let psi = OraclePsi::new(beta)?;
    let class = SyntheticClass::sample(
        SymmetrySpec::uniform(theta)?,
        &[Angle::new(theta)?, Angle::new(-theta)?],
        n_samples,
        seed,
    );
    let center_ok = is_identity(psi.apply(class.center()));
    let escape = class
        .offsets
        .iter()
        .map(|&g| (g, psi.apply(g)))
        .find(|(_, p)| p.abs() > theta + ANGLE_EPS);
    let holds = center_ok && escape.is_none();
    let expect_holds = is_identity(psi.bias);
    let witness = match escape {
        Some((g, p)) => format!("offset {g} maps to {p}, outside [-{theta}, {theta}]"),
        None if !center_ok => format!("center maps to {}", psi.apply(class.center())),
        None => format!("center maps to e; all {} images inside [-{theta}, {theta}]", class.offsets.len()),
    };
    Ok(CheckResult {
        name: "prop1-uniform".into(),
        params: format!("theta={theta} beta={beta} n={n_samples}"),
        pass: holds == expect_holds,
        witness,
    })
}

/// Gaussian symmetries. With β = e the image of the drawn class is exactly
/// the drawn set; otherwise the extreme element in the direction of β
/// (the maximum for β > 0, the minimum for β < 0) leaves the set.
pub fn check_prop2(sigma: f64, n_samples: usize, beta: f64, seed: u64) -> Result<CheckResult> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("Gaussian boundary must be positive, got {sigma}")));
    }
    let psi = OraclePsi::new(beta)?;
    let class = SyntheticClass::sample(SymmetrySpec::gaussian(sigma)?, &[], n_samples, seed);
    let mut drawn: Vec<f64> = class.offsets.iter().map(|a| a.degrees()).collect();
    drawn.sort_by(f64::total_cmp);
    let contains = |x: f64| drawn.binary_search_by(|v| v.total_cmp(&x)).is_ok();
    let outside: Vec<(Angle, Angle)> = class
        .offsets
        .iter()
        .map(|&g| (g, psi.apply(g)))
        .filter(|(_, p)| !contains(p.degrees()))
        .collect();
    let extreme = if beta >= 0.0 { drawn[drawn.len() - 1] } else { drawn[0] };
    let extreme_image = psi.apply(Angle::new(extreme)?);
    let extreme_escapes = !contains(extreme_image.degrees());
    let expect_holds = is_identity(psi.bias);
    let (pass, witness) = if expect_holds {
        (
            outside.is_empty(),
            match outside.first() {
                Some((g, p)) => format!("offset {g} maps to {p}, not a drawn offset"),
                None => format!("image equals the {} drawn offsets", class.offsets.len()),
            },
        )
    } else {
        let which = if beta >= 0.0 { "max" } else { "min" };
        (
            extreme_escapes,
            format!("{which} offset {extreme} maps to {extreme_image}, not a drawn offset"),
        )
    };
    Ok(CheckResult {
        name: "prop2-gaussian".into(),
        params: format!("sigma={sigma} beta={beta} n={n_samples}"),
        pass,
        witness,
    })
}

/// Spread of the unbiased oracle's predictions on a Gaussian class: the
/// empirical standard deviation should match σ within `rel_tol`.
pub fn check_prop2_spread(sigma: f64, n_samples: usize, rel_tol: f64, seed: u64) -> Result<CheckResult> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("Gaussian boundary must be positive, got {sigma}")));
    }
    let psi = OraclePsi::new(0.0)?;
    let class = SyntheticClass::sample(SymmetrySpec::gaussian(sigma)?, &[], n_samples, seed);
    let preds: Vec<f64> = class.offsets.iter().map(|&g| psi.apply(g).degrees()).collect();
    let n = preds.len() as f64;
    let mean = preds.iter().sum::<f64>() / n;
    let std = (preds.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    let rel = (std - sigma).abs() / sigma;
    Ok(CheckResult {
        name: "prop2-spread".into(),
        params: format!("sigma={sigma} n={n_samples}"),
        pass: rel <= rel_tol,
        witness: format!("std {std:.4} (relative error {rel:.4}, tolerance {rel_tol})"),
    })
}

fn is_multiple_of_step(beta: f64, n: usize) -> bool {
    let k = beta * n as f64 / 360.0;
    (k - k.round()).abs() <= ANGLE_EPS
}

/// Cyclic symmetries. Any element of C_n may serve as the center: a bias
/// that is a multiple of 360/n permutes C_n, and any other bias yields a
/// rotated coset that is not C_n.
pub fn check_prop3(n: usize, n_samples: usize, beta: f64, seed: u64) -> Result<CheckResult> {
    if !(1..=8).contains(&n) {
        return Err(Error::InvalidArgument(format!("cyclic order must lie in 1..=8, got {n}")));
    }
    let psi = OraclePsi::new(beta)?;
    let group = cyclic_elements(n)?;
    // every group element is injected so the full image is observed
    let class = SyntheticClass::sample(SymmetrySpec::cyclic(n)?, &group[1..], n_samples, seed);
    let image: Vec<Angle> = class.offsets.iter().map(|&g| psi.apply(g)).collect();
    let near = |a: Angle, b: Angle| angular_distance(a.degrees(), b.degrees()) <= ANGLE_EPS;
    let stray = image.iter().copied().find(|&p| !group.iter().any(|&e| near(e, p)));
    let missing = group.iter().copied().find(|&e| !image.iter().any(|&p| near(e, p)));
    let holds = stray.is_none() && missing.is_none();
    let expect_holds = is_multiple_of_step(beta, n);
    let mut coset: Vec<f64> = group.iter().map(|&e| psi.apply(e).degrees()).collect();
    coset.sort_by(f64::total_cmp);
    let witness = match (stray, missing) {
        (Some(p), _) => format!("image contains {p}, not in C_{n}; image {coset:?}"),
        (None, Some(e)) => format!("C_{n} element {e} never predicted"),
        (None, None) => format!("image equals C_{n} {coset:?}"),
    };
    Ok(CheckResult {
        name: "prop3-cyclic".into(),
        params: format!("n={n} beta={beta} samples={n_samples}"),
        pass: holds == expect_holds,
        witness,
    })
}

/// Closed-form expected identity penalty for an oracle with bias α0 on a
/// uniform class of half-width θ, under the linear metric |α − α0|:
/// (α0² + θ²) / (2θ), in degrees.
pub fn expected_l2(theta: f64, alpha0: f64) -> Result<f64> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::InvalidArgument(format!("boundary must be positive, got {theta}")));
    }
    if !(alpha0.abs() <= theta) {
        return Err(Error::InvalidArgument(format!("bias {alpha0} lies outside [-{theta}, {theta}]")));
    }
    Ok((alpha0 * alpha0 + theta * theta) / (2.0 * theta))
}

/// Monte Carlo mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarlo {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of E|α − α0| for α ~ U[-θ, θ].
pub fn monte_carlo_l2_stats(theta: f64, alpha0: f64, n: usize, seed: u64) -> Result<MonteCarlo> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::InvalidArgument(format!("boundary must be positive, got {theta}")));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("at least 2 samples required, got {n}")));
    }
    let mut rng = rng_from_seed(derive_seed(seed, stream::TESTBED, 1));
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let d = (rng.random_range(-theta..=theta) - alpha0).abs();
        sum += d;
        sum_sq += d * d;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok(MonteCarlo {
        mean,
        std_error: (var / nf).sqrt(),
    })
}

/// Monte Carlo estimate of E|α − α0| for α ~ U[-θ, θ].
pub fn monte_carlo_l2(theta: f64, alpha0: f64, n: usize, seed: u64) -> Result<f64> {
    Ok(monte_carlo_l2_stats(theta, alpha0, n, seed)?.mean)
}

/// Monte Carlo agrees with the closed form both relatively and within three
/// standard errors.
pub fn check_l2_closed_form(theta: f64, alpha0: f64, n: usize, rel_tol: f64, seed: u64) -> Result<CheckResult> {
    let exact = expected_l2(theta, alpha0)?;
    let mc = monte_carlo_l2_stats(theta, alpha0, n, seed)?;
    let rel = (mc.mean - exact).abs() / exact;
    let z = (mc.mean - exact).abs() / mc.std_error;
    Ok(CheckResult {
        name: "l2-closed-form".into(),
        params: format!("theta={theta} alpha0={alpha0} n={n}"),
        pass: rel <= rel_tol && z <= 3.0,
        witness: format!("mc {:.4} exact {exact:.4} rel {rel:.2e} z {z:.2}", mc.mean),
    })
}

/// The closed form is even and strictly convex in α0 on [-θ, θ] with its
/// unique minimum at 0, checked on a grid of `points` values.
pub fn check_l2_shape(theta: f64, points: usize) -> Result<CheckResult> {
    if points < 3 {
        return Err(Error::InvalidArgument(format!("grid needs at least 3 points, got {points}")));
    }
    let grid: Vec<f64> = (0..points)
        .map(|i| -theta + 2.0 * theta * i as f64 / (points - 1) as f64)
        .collect();
    let values = grid.iter().map(|&a| expected_l2(theta, a)).collect::<Result<Vec<_>>>()?;
    let even = grid
        .iter()
        .zip(&values)
        .all(|(&a, &v)| (expected_l2(theta, -a).unwrap_or(f64::NAN) - v).abs() <= 1e-12 * v.max(1.0));
    let convex = values.windows(3).all(|w| w[0] - 2.0 * w[1] + w[2] > 0.0);
    let (argmin, min) = grid
        .iter()
        .zip(&values)
        .fold((f64::NAN, f64::INFINITY), |acc, (&a, &v)| if v < acc.1 { (a, v) } else { acc });
    let unique_min_at_zero = argmin.abs() <= theta / (points - 1) as f64
        && values.iter().filter(|&&v| v == min).count() == 1
        && expected_l2(theta, 0.0)? <= min;
    Ok(CheckResult {
        name: "l2-shape".into(),
        params: format!("theta={theta} grid={points}"),
        pass: even && convex && unique_min_at_zero,
        witness: format!("even {even} convex {convex} argmin {argmin:.4} min {min:.4}"),
    })
}

/// The empirical minimizer of the Monte Carlo penalty over a bias sweep is
/// α0 = 0. Every bias reuses the same draws, so the comparison is not
/// blurred by independent sampling noise.
pub fn check_l2_minimizer(theta: f64, alphas: &[f64], n: usize, seed: u64) -> Result<CheckResult> {
    let means = alphas
        .iter()
        .map(|&a| monte_carlo_l2(theta, a, n, seed))
        .collect::<Result<Vec<_>>>()?;
    let (best, best_mean) = alphas
        .iter()
        .zip(&means)
        .fold((f64::NAN, f64::INFINITY), |acc, (&a, &m)| if m < acc.1 { (a, m) } else { acc });
    Ok(CheckResult {
        name: "l2-minimizer".into(),
        params: format!("theta={theta} alphas={alphas:?} n={n}"),
        pass: best == 0.0,
        witness: format!("empirical minimum {best_mean:.4} at alpha0={best}"),
    })
}

/// Parameters of the full sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TestbedConfig {
    pub thetas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub orders: Vec<usize>,
    /// Non-cyclic biases; cyclic checks add every multiple of 360/n.
    pub biases: Vec<f64>,
    pub samples: usize,
    pub spread_samples: usize,
    pub spread_tolerance: f64,
    pub mc_samples: usize,
    pub mc_tolerance: f64,
    pub seed: u64,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        Self {
            thetas: vec![30.0, 60.0, 90.0],
            sigmas: vec![9.0, 18.0, 45.0],
            orders: (1..=8).collect(),
            biases: vec![0.0, 15.0, -15.0],
            samples: 1000,
            spread_samples: 10_000,
            spread_tolerance: 0.03,
            mc_samples: 1_000_000,
            mc_tolerance: 0.01,
            seed: 0,
        }
    }
}

/// Bias grid used for the closed-form checks: fractions of θ on both sides.
pub fn alpha_grid(theta: f64) -> Vec<f64> {
    [-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|f| f * theta)
        .collect()
}

/// All check outcomes, in sweep order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TestbedReport {
    pub checks: Vec<CheckResult>,
}

impl TestbedReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

impl fmt::Display for TestbedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Runs every proposition check over the configured sweep, then the
/// closed-form penalty checks.
pub fn run_testbed(cfg: &TestbedConfig) -> Result<TestbedReport> {
    let mut checks = Vec::new();
    for &theta in &cfg.thetas {
        for &beta in &cfg.biases {
            checks.push(check_prop1(theta, cfg.samples, beta, cfg.seed)?);
        }
    }
    for &sigma in &cfg.sigmas {
        for &beta in &cfg.biases {
            checks.push(check_prop2(sigma, cfg.samples, beta, cfg.seed)?);
        }
        checks.push(check_prop2_spread(sigma, cfg.spread_samples, cfg.spread_tolerance, cfg.seed)?);
    }
    for &n in &cfg.orders {
        let mut biases = cfg.biases.clone();
        biases.extend((1..n).map(|k| k as f64 * 360.0 / n as f64));
        for beta in biases {
            checks.push(check_prop3(n, cfg.samples, Angle::wrap(beta).degrees(), cfg.seed)?);
        }
    }
    for &theta in &cfg.thetas {
        let alphas = alpha_grid(theta);
        for &a in &alphas {
            checks.push(check_l2_closed_form(theta, a, cfg.mc_samples, cfg.mc_tolerance, cfg.seed)?);
        }
        checks.push(check_l2_shape(theta, 41)?);
        checks.push(check_l2_minimizer(theta, &alphas, cfg.mc_samples, cfg.seed)?);
    }
    Ok(TestbedReport { checks })
}
