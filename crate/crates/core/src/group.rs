//! Planar rotations and their cyclic subgroups.
//!
//! Angles are carried in degrees and kept in the half-open range (-180, 180].
//! Conversion to radians happens only inside trigonometric kernels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rotation angle in degrees, canonical range (-180, 180].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);

    /// Canonicalizes `raw` degrees, rejecting NaN and infinities.
    pub fn new(raw: f64) -> Result<Self> {
        canonicalize_angle(raw)
    }

    /// Canonicalizes a value already known to be finite.
    pub(crate) fn wrap(raw: f64) -> Self {
        debug_assert!(raw.is_finite());
        // already canonical: keep the value bit-exact (negation stays exact)
        if raw > -180.0 && raw <= 180.0 {
            return Angle(raw + 0.0);
        }
        let r = raw.rem_euclid(360.0);
        // rem_euclid can round up to exactly 360 for tiny negative inputs
        if r > 180.0 {
            let w = r - 360.0;
            if w <= -180.0 {
                Angle(180.0)
            } else {
                Angle(w)
            }
        } else {
            Angle(r)
        }
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    pub fn radians(self) -> f64 {
        self.0.to_radians()
    }

    pub fn abs(self) -> f64 {
        self.0.abs()
    }
}

impl fmt::Display for Angle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}°", self.0)
    }
}

/// Maps any finite angle in degrees onto (-180, 180].
pub fn canonicalize_angle(raw: f64) -> Result<Angle> {
    if !raw.is_finite() {
        return Err(Error::NonFinite(raw));
    }
    Ok(Angle::wrap(raw))
}

/// An element of SO(2).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SO2Element {
    angle: Angle,
}

impl SO2Element {
    pub const IDENTITY: SO2Element = SO2Element { angle: Angle::ZERO };

    pub fn from_angle(angle: Angle) -> Self {
        Self { angle }
    }

    pub fn from_degrees(raw: f64) -> Result<Self> {
        Ok(Self::from_angle(Angle::new(raw)?))
    }

    pub fn angle(self) -> Angle {
        self.angle
    }

    pub fn degrees(self) -> f64 {
        self.angle.0
    }

    pub fn compose(self, other: SO2Element) -> SO2Element {
        compose(self, other)
    }

    pub fn inverse(self) -> SO2Element {
        inverse(self)
    }
}

pub fn compose(g: SO2Element, h: SO2Element) -> SO2Element {
    SO2Element::from_angle(Angle::wrap(g.angle.0 + h.angle.0))
}

pub fn inverse(g: SO2Element) -> SO2Element {
    SO2Element::from_angle(Angle::wrap(-g.angle.0))
}

/// Shortest-arc distance on the circle, in degrees within [0, 180].
pub fn geodesic_distance(g: SO2Element, h: SO2Element) -> f64 {
    angular_distance(g.degrees(), h.degrees())
}

pub(crate) fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

/// A 2-vector on the unit circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector2 {
    v1: f64,
    v2: f64,
}

impl UnitVector2 {
    pub fn from_angle(angle: Angle) -> Self {
        let (s, c) = angle.radians().sin_cos();
        Self { v1: c, v2: s }
    }

    pub fn normalize(v1: f64, v2: f64) -> Result<Self> {
        let norm = v1.hypot(v2);
        if !(norm > READOUT_EPS) {
            return Err(Error::DegenerateReadout { norm });
        }
        Ok(Self {
            v1: v1 / norm,
            v2: v2 / norm,
        })
    }

    pub fn components(self) -> (f64, f64) {
        (self.v1, self.v2)
    }
}

/// Vectors shorter than this have no well-defined direction.
pub const READOUT_EPS: f64 = 1e-8;

/// The fixed readout map from a 2-vector to a rotation: the angle of `v`.
pub fn xi_from_vector(v1: f64, v2: f64) -> Result<SO2Element> {
    let norm = v1.hypot(v2);
    if !norm.is_finite() {
        return Err(Error::NonFinite(norm));
    }
    if !(norm > READOUT_EPS) {
        return Err(Error::DegenerateReadout { norm });
    }
    Ok(SO2Element::from_angle(Angle::wrap(v2.atan2(v1).to_degrees())))
}

/// The `n` rotations of the cyclic group C_n, in order k = 0..n.
pub fn cyclic_elements(n: usize) -> Result<Vec<Angle>> {
    if n == 0 {
        return Err(Error::InvalidCyclicOrder(n));
    }
    Ok((0..n)
        .map(|k| Angle::wrap(k as f64 * 360.0 / n as f64))
        .collect())
}

/// Distribution family of a symmetry spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Uniform,
    Gaussian,
    Cyclic,
}

impl Family {
    pub fn is_continuous(self) -> bool {
        !matches!(self, Family::Cyclic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Uniform => "uniform",
            Family::Gaussian => "gaussian",
            Family::Cyclic => "cyclic",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(Family::Uniform),
            "gaussian" => Ok(Family::Gaussian),
            "cyclic" => Ok(Family::Cyclic),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }
}

/// Per-class symmetry distribution over rotation offsets from the class center.
///
/// `Uniform(0)` means no symmetry and `Uniform(180)` full rotational symmetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SymmetrySpec {
    /// Offsets uniform in [-theta, theta] degrees.
    Uniform { theta: f64 },
    /// Offsets normal with standard deviation `sigma` degrees.
    Gaussian { sigma: f64 },
    /// Offsets drawn uniformly from C_n.
    Cyclic { n: usize },
}

impl SymmetrySpec {
    pub fn uniform(theta: f64) -> Result<Self> {
        if !(theta.is_finite() && (0.0..=180.0).contains(&theta)) {
            return Err(Error::InvalidSpec(format!("uniform theta {theta} outside [0, 180]")));
        }
        Ok(SymmetrySpec::Uniform { theta })
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidSpec(format!("gaussian sigma {sigma} must be >= 0")));
        }
        Ok(SymmetrySpec::Gaussian { sigma })
    }

    pub fn cyclic(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidCyclicOrder(n));
        }
        Ok(SymmetrySpec::Cyclic { n })
    }

    pub fn family(&self) -> Family {
        match self {
            SymmetrySpec::Uniform { .. } => Family::Uniform,
            SymmetrySpec::Gaussian { .. } => Family::Gaussian,
            SymmetrySpec::Cyclic { .. } => Family::Cyclic,
        }
    }

    /// The boundary parameter: theta, sigma, or n as a real.
    pub fn level(&self) -> f64 {
        match *self {
            SymmetrySpec::Uniform { theta } => theta,
            SymmetrySpec::Gaussian { sigma } => sigma,
            SymmetrySpec::Cyclic { n } => n as f64,
        }
    }

    pub fn from_level(family: Family, level: f64) -> Result<Self> {
        match family {
            Family::Uniform => Self::uniform(level),
            Family::Gaussian => Self::gaussian(level),
            Family::Cyclic => {
                if level.fract() != 0.0 || level < 1.0 {
                    return Err(Error::InvalidSpec(format!("cyclic order {level} is not a positive integer")));
                }
                Self::cyclic(level as usize)
            }
        }
    }

    /// Whether `angle` is a possible draw from this spec.
    pub fn admits(&self, angle: Angle, tol: f64) -> bool {
        match *self {
            SymmetrySpec::Uniform { theta } => angle.abs() <= theta + tol,
            SymmetrySpec::Gaussian { .. } => true,
            SymmetrySpec::Cyclic { n } => cyclic_elements(n)
                .map(|els| els.iter().any(|e| angular_distance(e.0, angle.0) <= tol))
                .unwrap_or(false),
        }
    }
}

impl fmt::Display for SymmetrySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family(), self.level())
    }
}

impl FromStr for SymmetrySpec {
    type Err = Error;

    /// Parses `family:level`, e.g. `uniform:60` or `cyclic:4`.
    fn from_str(s: &str) -> Result<Self> {
        let (fam, level) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidSpec(format!("expected family:level, got `{s}`")))?;
        let family: Family = fam.parse()?;
        let level: f64 = level
            .trim()
            .parse()
            .map_err(|_| Error::InvalidSpec(format!("bad level in `{s}`")))?;
        Self::from_level(family, level)
    }
}

/// Draws a rotation offset from `spec`.
pub fn sample_spec<R: Rng + ?Sized>(spec: &SymmetrySpec, rng: &mut R) -> Angle {
    match *spec {
        SymmetrySpec::Uniform { theta } => {
            if theta == 0.0 {
                Angle::ZERO
            } else {
                Angle::wrap(rng.random_range(-theta..=theta))
            }
        }
        SymmetrySpec::Gaussian { sigma } => {
            if sigma == 0.0 {
                Angle::ZERO
            } else {
                // not rejected when the raw draw exceeds 180 before wrapping
                let normal = Normal::new(0.0, sigma).expect("sigma validated at construction");
                Angle::wrap(normal.sample(rng))
            }
        }
        SymmetrySpec::Cyclic { n } => {
            let k = rng.random_range(0..n);
            Angle::wrap(k as f64 * 360.0 / n as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;

    fn deg(a: f64) -> SO2Element {
        SO2Element::from_degrees(a).unwrap()
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize_angle(190.0).unwrap().degrees(), -170.0);
        assert_eq!(canonicalize_angle(360.0).unwrap().degrees(), 0.0);
        assert_eq!(canonicalize_angle(-180.0).unwrap().degrees(), 180.0);
        assert_eq!(canonicalize_angle(180.0).unwrap().degrees(), 180.0);
        assert_eq!(canonicalize_angle(-1e-20).unwrap().degrees(), -1e-20);
        // rem_euclid rounds this up to exactly 360
        assert_eq!(canonicalize_angle(-360.0 - 1e-14).unwrap().degrees(), 0.0);
        assert_eq!(canonicalize_angle(-76.2695710150847).unwrap().degrees(), -76.2695710150847);
        assert!(canonicalize_angle(f64::NAN).is_err());
        assert!(canonicalize_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn compose_and_inverse() {
        assert_eq!(compose(deg(30.0), deg(40.0)).degrees(), 70.0);
        assert_eq!(compose(deg(170.0), deg(20.0)).degrees(), -170.0);
        assert_eq!(compose(deg(33.0), SO2Element::IDENTITY), deg(33.0));
        assert_eq!(inverse(deg(30.0)).degrees(), -30.0);
        assert_eq!(inverse(deg(180.0)).degrees(), 180.0);
        assert_eq!(inverse(SO2Element::IDENTITY), SO2Element::IDENTITY);
    }

    #[test]
    fn geodesic_examples() {
        assert!((geodesic_distance(deg(170.0), deg(-170.0)) - 20.0).abs() < 1e-12);
        assert_eq!(geodesic_distance(deg(0.0), deg(0.0)), 0.0);
        assert_eq!(geodesic_distance(deg(90.0), deg(-90.0)), 180.0);
    }

    #[test]
    fn xi_examples() {
        assert_eq!(xi_from_vector(1.0, 0.0).unwrap().degrees(), 0.0);
        assert!((xi_from_vector(0.0, 1.0).unwrap().degrees() - 90.0).abs() < 1e-12);
        assert_eq!(xi_from_vector(-1.0, 0.0).unwrap().degrees(), 180.0);
        assert_eq!(xi_from_vector(-1.0, -0.0).unwrap().degrees(), 180.0);
        assert!(matches!(
            xi_from_vector(1e-10, 0.0),
            Err(Error::DegenerateReadout { .. })
        ));
    }

    #[test]
    fn xi_inverts_unit_circle_on_grid() {
        for a in -179..=180 {
            let a = a as f64;
            let (s, c) = a.to_radians().sin_cos();
            let got = xi_from_vector(c, s).unwrap().degrees();
            assert!(angular_distance(got, a) < 1e-6, "{a} -> {got}");
        }
    }

    #[test]
    fn cyclic_element_sets() {
        let d = |n| {
            cyclic_elements(n)
                .unwrap()
                .into_iter()
                .map(Angle::degrees)
                .collect::<Vec<_>>()
        };
        assert_eq!(d(1), vec![0.0]);
        assert_eq!(d(2), vec![0.0, 180.0]);
        assert_eq!(d(4), vec![0.0, 90.0, 180.0, -90.0]);
        assert_eq!(d(7).len(), 7);
        assert!(cyclic_elements(0).is_err());
    }

    #[test]
    fn degenerate_specs_sample_identity() {
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            assert_eq!(sample_spec(&SymmetrySpec::Uniform { theta: 0.0 }, &mut rng), Angle::ZERO);
            assert_eq!(sample_spec(&SymmetrySpec::Cyclic { n: 1 }, &mut rng), Angle::ZERO);
        }
    }

    #[test]
    fn uniform_sampler_monte_carlo() {
        let mut rng = rng_from_seed(2024);
        let spec = SymmetrySpec::uniform(60.0).unwrap();
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_spec(&spec, &mut rng).degrees())
            .collect();
        let max = draws.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let mean_abs = draws.iter().map(|a| a.abs()).sum::<f64>() / draws.len() as f64;
        assert!(max <= 60.0);
        assert!((mean_abs - 30.0).abs() <= 0.5, "mean |angle| = {mean_abs}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = SymmetrySpec::gaussian(18.0).unwrap();
        let a: Vec<_> = {
            let mut r = rng_from_seed(9);
            (0..32).map(|_| sample_spec(&spec, &mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = rng_from_seed(9);
            (0..32).map(|_| sample_spec(&spec, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn spec_parse_and_validate() {
        assert_eq!("uniform:60".parse::<SymmetrySpec>().unwrap(), SymmetrySpec::Uniform { theta: 60.0 });
        assert_eq!("cyclic:4".parse::<SymmetrySpec>().unwrap(), SymmetrySpec::Cyclic { n: 4 });
        assert!("uniform:200".parse::<SymmetrySpec>().is_err());
        assert!("cyclic:0".parse::<SymmetrySpec>().is_err());
        assert!("cyclic:2.5".parse::<SymmetrySpec>().is_err());
        assert!("gaussian:-1".parse::<SymmetrySpec>().is_err());
        assert!("spiral:3".parse::<SymmetrySpec>().is_err());
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(raw in -1e6f64..1e6) {
            let a = canonicalize_angle(raw).unwrap();
            prop_assert!(a.degrees() > -180.0 && a.degrees() <= 180.0);
            prop_assert_eq!(canonicalize_angle(a.degrees()).unwrap(), a);
        }

        #[test]
        fn compose_is_associative(a in -180f64..180.0, b in -180f64..180.0, c in -180f64..180.0) {
            let (a, b, c) = (deg(a), deg(b), deg(c));
            let l = compose(compose(a, b), c);
            let r = compose(a, compose(b, c));
            prop_assert!(geodesic_distance(l, r) < 1e-9);
        }

        #[test]
        fn inverse_cancels(a in -1000f64..1000.0) {
            let g = deg(a);
            prop_assert!(compose(inverse(g), g).degrees().abs() < 1e-9);
        }

        #[test]
        fn distance_to_identity_is_abs_angle(a in -180f64..=180.0) {
            let g = deg(a);
            prop_assert!((geodesic_distance(g, SO2Element::IDENTITY) - g.degrees().abs()).abs() < 1e-9);
        }

        #[test]
        fn distance_is_a_metric(a in -180f64..180.0, b in -180f64..180.0, c in -180f64..180.0) {
            let (a, b, c) = (deg(a), deg(b), deg(c));
            prop_assert_eq!(geodesic_distance(a, b), geodesic_distance(b, a));
            prop_assert!(geodesic_distance(a, c) <= geodesic_distance(a, b) + geodesic_distance(b, c) + 1e-9);
            prop_assert!((0.0..=180.0).contains(&geodesic_distance(a, b)));
        }

        #[test]
        fn draws_respect_spec(seed in any::<u64>(), theta in 0f64..=180.0, n in 1usize..=8) {
            let mut rng = rng_from_seed(seed);
            let u = SymmetrySpec::uniform(theta).unwrap();
            let c = SymmetrySpec::cyclic(n).unwrap();
            let els = cyclic_elements(n).unwrap();
            for _ in 0..50 {
                prop_assert!(sample_spec(&u, &mut rng).abs() <= theta);
                let d = sample_spec(&c, &mut rng);
                prop_assert!(els.contains(&d));
            }
        }
    }
}
