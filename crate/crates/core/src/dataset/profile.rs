use std::fmt;

use crate::error::{Error, Result};
use crate::group::{Family, SymmetrySpec};

/// Named per-class symmetry layouts.
pub const PRESETS: &[&str] = &["rot60", "rot60_90", "multiple", "gaussian", "c2_c4", "full", "none"];

/// Class id → symmetry spec, covering classes `0..len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryProfile {
    specs: Vec<SymmetrySpec>,
}

impl SymmetryProfile {
    pub fn new(specs: Vec<SymmetrySpec>) -> Self {
        Self { specs }
    }

    pub fn get(&self, class: usize) -> Result<SymmetrySpec> {
        self.specs.get(class).copied().ok_or(Error::MissingClass(class))
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[SymmetrySpec] {
        &self.specs
    }

    /// The common family, if every class shares one.
    pub fn family(&self) -> Option<Family> {
        let first = self.specs.first()?.family();
        self.specs.iter().all(|s| s.family() == first).then_some(first)
    }

    /// Parses a comma-separated list of `family:level` specs, one per class.
    pub fn parse_list(s: &str) -> Result<Self> {
        let specs = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<SymmetrySpec>>>()?;
        if specs.is_empty() {
            return Err(Error::Empty("symmetry profile"));
        }
        Ok(Self { specs })
    }
}

impl fmt::Display for SymmetryProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.specs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

/// Builds a named preset for `n_classes` classes. Two-group presets split
/// classes into a first half (rounded up) and the rest.
pub fn preset_profile(name: &str, n_classes: usize) -> Result<SymmetryProfile> {
    let first_half = n_classes.div_ceil(2);
    let spec = |c: usize| -> Result<SymmetrySpec> {
        match name {
            "rot60" => SymmetrySpec::uniform(60.0),
            "rot60_90" => SymmetrySpec::uniform(if c < first_half { 60.0 } else { 90.0 }),
            // +18° per class, saturating at full rotation
            "multiple" => SymmetrySpec::uniform((18.0 * c as f64).min(180.0)),
            "gaussian" => SymmetrySpec::gaussian(9.0 * c as f64),
            "c2_c4" => SymmetrySpec::cyclic(if c < first_half { 2 } else { 4 }),
            "full" => SymmetrySpec::uniform(180.0),
            "none" => SymmetrySpec::uniform(0.0),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    };
    if !PRESETS.contains(&name) {
        return Err(Error::UnknownPreset(name.to_string()));
    }
    Ok(SymmetryProfile {
        specs: (0..n_classes).map(spec).collect::<Result<_>>()?,
    })
}
