//! Out-of-distribution symmetry detection: an input is flagged when its
//! estimated group action falls outside the symmetry distribution predicted
//! for it.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{BaseCorpus, SymmetryProfile};
use crate::error::{Error, Result};
use crate::format::csv_error;
use crate::group::{angular_distance, cyclic_elements, Angle, Family, SO2Element, SymmetrySpec};
use crate::image::{rotate_image, Image, Interpolation};
use crate::seed::{derive_seed, rng_from_seed, stream};
use crate::standardize::SymmetryModel;

/// Largest deviation from an element of C_n still treated as in-distribution.
pub const CYCLIC_TOLERANCE_DEG: f64 = 5.0;

/// Cyclic order from a (possibly fractional) boundary prediction.
fn cyclic_order(level: f64) -> usize {
    level.round().max(1.0) as usize
}

fn off_cyclic(angle: Angle, n: usize) -> bool {
    cyclic_elements(n)
        .map(|els| {
            els.iter()
                .all(|e| angular_distance(e.degrees(), angle.degrees()) > CYCLIC_TOLERANCE_DEG)
        })
        .unwrap_or(true)
}

/// Whether `psi` lies outside the distribution with boundary `level`:
/// uniform |ψ| > θ̂, Gaussian |ψ| > 2σ̂, cyclic more than 5° from every
/// element of C_n̂. Boundaries are inclusive.
pub fn is_ood(psi: Angle, level: f64, family: Family) -> bool {
    match family {
        Family::Uniform => psi.abs() > level,
        Family::Gaussian => psi.abs() > 2.0 * level,
        Family::Cyclic => off_cyclic(psi, cyclic_order(level)),
    }
}

/// Ground truth for an applied rotation under the class's training spec,
/// using the same conventions as [`is_ood`].
pub fn truly_ood(angle: Angle, spec: &SymmetrySpec) -> bool {
    is_ood(angle, spec.level(), spec.family())
}

/// One fully rotated unseen input per base image.
#[derive(Debug, Clone, PartialEq)]
pub struct OodSet {
    pub images: Vec<Image>,
    pub classes: Vec<usize>,
    pub angles: Vec<Angle>,
}

/// Rotates every base image by an angle drawn uniformly from (−180, 180].
pub fn draw_ood_set(corpus: &BaseCorpus, seed: u64) -> Result<OodSet> {
    let angles: Vec<Angle> = (0..corpus.len())
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, stream::OOD, i as u64));
            // (-180, 180]: negate a draw from [-180, 180)
            Angle::new(-rng.random_range(-180.0..180.0)).expect("finite draw")
        })
        .collect();
    let images = corpus
        .images
        .par_iter()
        .zip(angles.par_iter())
        .map(|(img, &a)| rotate_image(img, SO2Element::from_angle(a), Interpolation::Bilinear))
        .collect::<Result<_>>()?;
    Ok(OodSet {
        images,
        classes: corpus.labels.clone(),
        angles,
    })
}

/// Verdicts computed from model outputs alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub psi: Angle,
    pub boundary: f64,
    pub is_ood: bool,
}

/// Runs ψ and Θ and applies the OOD rule. Sees only the images.
pub fn predict_ood(images: &[Image], model: &dyn SymmetryModel) -> Result<Vec<Prediction>> {
    let family = model.family();
    let actions = model.group_actions(images)?;
    let levels = model.boundaries(images)?;
    Ok(actions
        .iter()
        .zip(&levels)
        .map(|(&(psi, _), &boundary)| Prediction {
            psi,
            boundary,
            is_ood: is_ood(psi, boundary, family),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodVerdict {
    pub sample_id: u64,
    pub class: usize,
    pub true_angle: f64,
    pub psi_angle: f64,
    pub boundary: f64,
    pub verdict: bool,
    pub truth: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodReport {
    pub accuracy: f64,
    pub verdicts: Vec<OodVerdict>,
}

impl OodReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for v in &self.verdicts {
            w.serialize(v).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores model verdicts on `set` against the ground truth implied by the
/// training `profile`.
pub fn evaluate_ood_set(set: &OodSet, profile: &SymmetryProfile, model: &dyn SymmetryModel) -> Result<OodReport> {
    if set.images.is_empty() {
        return Err(Error::Empty("OOD test set"));
    }
    let predictions = predict_ood(&set.images, model)?;
    let verdicts = predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let spec = profile.get(set.classes[i])?;
            Ok(OodVerdict {
                sample_id: i as u64,
                class: set.classes[i],
                true_angle: set.angles[i].degrees(),
                psi_angle: p.psi.degrees(),
                boundary: p.boundary,
                verdict: p.is_ood,
                truth: truly_ood(set.angles[i], &spec),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let correct = verdicts.iter().filter(|v| v.verdict == v.truth).count();
    Ok(OodReport {
        accuracy: correct as f64 / verdicts.len() as f64,
        verdicts,
    })
}

/// Draws fully rotated versions of unseen base images and measures how often
/// the model's OOD verdict matches the training distribution of the class.
pub fn evaluate_ood(
    corpus: &BaseCorpus,
    profile: &SymmetryProfile,
    model: &dyn SymmetryModel,
    seed: u64,
) -> Result<OodReport> {
    evaluate_ood_set(&draw_ood_set(corpus, seed)?, profile, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::render_glyph_corpus;
    use crate::standardize::OracleModel;

    fn a(d: f64) -> Angle {
        Angle::new(d).unwrap()
    }

    #[test]
    fn rule_examples() {
        assert!(is_ood(a(75.0), 60.0, Family::Uniform));
        assert!(!is_ood(a(60.0), 60.0, Family::Uniform));
        assert!(!is_ood(a(-60.0), 60.0, Family::Uniform));
        assert!(!is_ood(a(92.0), 4.0, Family::Cyclic));
        assert!(is_ood(a(96.0), 4.0, Family::Cyclic));
        assert!(!is_ood(a(-177.0), 2.0, Family::Cyclic));
        assert!(is_ood(a(37.0), 18.0, Family::Gaussian));
        assert!(!is_ood(a(36.0), 18.0, Family::Gaussian));
        // fractional cyclic predictions round to the nearest order
        assert!(!is_ood(a(120.0), 2.6, Family::Cyclic));
    }

    #[test]
    fn uniform_ood_set_shrinks_as_the_boundary_grows() {
        for i in 0..=360 {
            let psi = a(i as f64 - 180.0 + 0.5 * (i % 2) as f64);
            for (lo, hi) in [(10.0, 20.0), (30.0, 90.0), (0.0, 180.0)] {
                if is_ood(psi, hi, Family::Uniform) {
                    assert!(is_ood(psi, lo, Family::Uniform));
                }
            }
        }
    }

    #[test]
    fn draws_cover_the_circle_deterministically() {
        let corpus = render_glyph_corpus(2, 50, 16, 1);
        let set = draw_ood_set(&corpus, 9).unwrap();
        assert_eq!(set, draw_ood_set(&corpus, 9).unwrap());
        assert!(set.angles.iter().all(|x| x.degrees() > -180.0 && x.degrees() <= 180.0));
        assert!(set.angles.iter().any(|x| x.degrees() > 90.0));
        assert!(set.angles.iter().any(|x| x.degrees() < -90.0));
    }

    fn oracle_for(set: &OodSet, profile: &SymmetryProfile) -> OracleModel {
        OracleModel {
            family: profile.specs()[0].family(),
            angles: set.angles.clone(),
            levels: set.classes.iter().map(|&c| profile.get(c).unwrap().level()).collect(),
        }
    }

    #[test]
    fn oracle_model_is_always_right() {
        let corpus = render_glyph_corpus(2, 40, 16, 2);
        for spec in ["uniform:60,uniform:90", "gaussian:18,gaussian:45", "cyclic:2,cyclic:4"] {
            let profile = SymmetryProfile::parse_list(spec).unwrap();
            let set = draw_ood_set(&corpus, 3).unwrap();
            let report = evaluate_ood_set(&set, &profile, &oracle_for(&set, &profile)).unwrap();
            assert_eq!(report.accuracy, 1.0, "{spec}");
        }
    }

    #[test]
    fn full_rotation_training_makes_nothing_ood() {
        let corpus = render_glyph_corpus(2, 30, 16, 4);
        let profile = SymmetryProfile::parse_list("uniform:180,uniform:180").unwrap();
        let set = draw_ood_set(&corpus, 5).unwrap();
        let report = evaluate_ood_set(&set, &profile, &oracle_for(&set, &profile)).unwrap();
        assert!(report.verdicts.iter().all(|v| !v.verdict && !v.truth));
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn verdicts_do_not_depend_on_ground_truth() {
        let corpus = render_glyph_corpus(2, 30, 16, 6);
        let set = draw_ood_set(&corpus, 7).unwrap();
        let trained_on = SymmetryProfile::parse_list("uniform:30,uniform:90").unwrap();
        let model = oracle_for(&set, &trained_on);
        let a = evaluate_ood_set(&set, &trained_on, &model).unwrap();
        // permute the ground truth: swap the class specs and shuffle angles
        let swapped = SymmetryProfile::parse_list("uniform:90,uniform:30").unwrap();
        let mut shuffled = set.clone();
        shuffled.angles.rotate_left(7);
        let b = evaluate_ood_set(&shuffled, &swapped, &model).unwrap();
        let verdicts = |r: &OodReport| r.verdicts.iter().map(|v| (v.verdict, v.psi_angle, v.boundary)).collect::<Vec<_>>();
        assert_eq!(verdicts(&a), verdicts(&b));
        assert_ne!(
            a.verdicts.iter().map(|v| v.truth).collect::<Vec<_>>(),
            b.verdicts.iter().map(|v| v.truth).collect::<Vec<_>>()
        );
    }

    #[test]
    fn verdict_csv_has_the_documented_columns() {
        let corpus = render_glyph_corpus(1, 3, 16, 8);
        let profile = SymmetryProfile::parse_list("uniform:60").unwrap();
        let set = draw_ood_set(&corpus, 1).unwrap();
        let report = evaluate_ood_set(&set, &profile, &oracle_for(&set, &profile)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ood.csv");
        report.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("sample_id,class,true_angle,psi_angle,boundary,verdict,truth\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
