//! Symmetry standardization: reorienting every input towards the centre of
//! symmetry of its class by undoing the estimated group action, plus a
//! nearest-centroid classifier used to measure what that buys a
//! non-equivariant downstream model.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{SampleRecord, SymDataset};
use crate::error::{Error, Result};
use crate::group::{Angle, Family, SO2Element};
use crate::image::{rotate_image, Image, Interpolation};
use crate::model::ModelBundle;

/// What standardization and OOD detection need from a trained model: the
/// group action ψ and the boundary Θ. Implementations see images only.
pub trait SymmetryModel: Sync {
    fn family(&self) -> Family;

    /// ψ(x) for every image, and whether the readout was degenerate.
    fn group_actions(&self, images: &[Image]) -> Result<Vec<(Angle, bool)>>;

    /// Θ(x) for every image (θ̂, σ̂ or n̂).
    fn boundaries(&self, images: &[Image]) -> Result<Vec<f64>>;
}

impl SymmetryModel for ModelBundle {
    fn family(&self) -> Family {
        self.config().family
    }

    fn group_actions(&self, images: &[Image]) -> Result<Vec<(Angle, bool)>> {
        Ok(self
            .analyze(images)?
            .into_iter()
            .map(|a| (a.readout.angle, a.readout.degenerate))
            .collect())
    }

    fn boundaries(&self, images: &[Image]) -> Result<Vec<f64>> {
        Ok(self
            .predict_boundaries(images, self.config().family)?
            .into_iter()
            .map(|b| b.level())
            .collect())
    }
}

/// A model that answers from known per-position values: the true applied
/// angles and true boundaries. Used to separate method error from network
/// error.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleModel {
    pub family: Family,
    pub angles: Vec<Angle>,
    pub levels: Vec<f64>,
}

impl OracleModel {
    /// Oracle answers for the samples of `ds`, in order.
    pub fn for_dataset(ds: &SymDataset) -> Result<Self> {
        let family = ds
            .records
            .first()
            .map(|r| r.spec.family())
            .ok_or(Error::Empty("dataset"))?;
        Ok(Self {
            family,
            angles: ds.records.iter().map(|r| r.angle).collect(),
            levels: ds.records.iter().map(|r| r.spec.level()).collect(),
        })
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.angles.len() != n || self.levels.len() != n {
            return Err(Error::LengthMismatch {
                expected: self.angles.len(),
                actual: n,
            });
        }
        Ok(())
    }
}

impl SymmetryModel for OracleModel {
    fn family(&self) -> Family {
        self.family
    }

    fn group_actions(&self, images: &[Image]) -> Result<Vec<(Angle, bool)>> {
        self.check(images.len())?;
        Ok(self.angles.iter().map(|&a| (a, false)).collect())
    }

    fn boundaries(&self, images: &[Image]) -> Result<Vec<f64>> {
        self.check(images.len())?;
        Ok(self.levels.clone())
    }
}

/// Rotates `x` by the inverse of the group action `psi`.
pub fn standardize_sample(x: &Image, psi: Angle) -> Result<Image> {
    rotate_image(x, SO2Element::from_angle(psi).inverse(), Interpolation::Bilinear)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedRecord {
    pub record: SampleRecord,
    /// Rotation applied by standardization: −ψ(x), canonicalized.
    pub applied_inverse: Angle,
    /// What is left of the generating rotation: true ∘ applied inverse.
    pub residual: Angle,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedDataset {
    pub images: Vec<Image>,
    pub records: Vec<StandardizedRecord>,
}

impl StandardizedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.record.class_id).collect()
    }

    /// Population standard deviation of the residual angles, in degrees.
    pub fn residual_std(&self) -> f64 {
        std_dev(self.records.iter().map(|r| r.residual.degrees()))
    }
}

/// Population standard deviation, in degrees, of canonical angles.
pub fn std_dev(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Standardizes every sample with the model's ψ. Degenerate readouts pass
/// through unrotated (their ψ is the identity) and are flagged.
pub fn standardize_dataset(ds: &SymDataset, model: &dyn SymmetryModel) -> Result<StandardizedDataset> {
    let actions = model.group_actions(&ds.images)?;
    let flagged = actions.iter().filter(|a| a.1).count();
    if flagged > 0 {
        log::warn!("{flagged} samples had degenerate readouts and were left unrotated");
    }
    let images = ds
        .images
        .par_iter()
        .zip(actions.par_iter())
        .map(|(x, &(psi, _))| standardize_sample(x, psi))
        .collect::<Result<Vec<_>>>()?;
    let records = ds
        .records
        .iter()
        .zip(&actions)
        .map(|(r, &(psi, degenerate))| {
            let inverse = SO2Element::from_angle(psi).inverse();
            StandardizedRecord {
                record: *r,
                applied_inverse: inverse.angle(),
                residual: SO2Element::from_angle(r.angle).compose(inverse).angle(),
                degenerate,
            }
        })
        .collect();
    Ok(StandardizedDataset { images, records })
}

/// Test accuracy of a classifier that assigns each test image the class
/// whose mean training image is nearest in squared pixel distance.
pub fn nearest_centroid_accuracy(
    train: &[Image],
    train_labels: &[usize],
    test: &[Image],
    test_labels: &[usize],
) -> Result<f64> {
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::LengthMismatch {
            expected: train.len() + test.len(),
            actual: train_labels.len() + test_labels.len(),
        });
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("nearest-centroid split"));
    }
    let n_classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let dim = train[0].data().len();
    let mut sums = vec![vec![0.0f64; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (img, &c) in train.iter().zip(train_labels) {
        if img.data().len() != dim {
            return Err(Error::Shape("training images differ in size".into()));
        }
        for (s, v) in sums[c].iter_mut().zip(img.data()) {
            *s += *v as f64;
        }
        counts[c] += 1;
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let correct = test
        .par_iter()
        .zip(test_labels.par_iter())
        .map(|(img, &label)| -> Result<bool> {
            if img.data().len() != dim {
                return Err(Error::Shape("test image differs in size from training images".into()));
            }
            let predicted = centroids
                .iter()
                .enumerate()
                .filter_map(|(c, m)| m.as_ref().map(|m| (c, m)))
                .map(|(c, m)| {
                    let d: f64 = m.iter().zip(img.data()).map(|(a, b)| (a - *b as f64).powi(2)).sum();
                    (d, c)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, c)| c);
            Ok(predicted == Some(label))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// Nearest-centroid test accuracy on raw and on standardized data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DownstreamComparison {
    pub raw: f64,
    pub standardized: f64,
}

/// Trains and evaluates the nearest-centroid baseline on both variants of
/// the same train/test split.
pub fn downstream_compare(
    raw_train: &SymDataset,
    raw_test: &SymDataset,
    std_train: &StandardizedDataset,
    std_test: &StandardizedDataset,
) -> Result<DownstreamComparison> {
    let labels = |ds: &SymDataset| ds.records.iter().map(|r| r.class_id).collect::<Vec<_>>();
    if labels(raw_train) != std_train.labels() || labels(raw_test) != std_test.labels() {
        return Err(Error::Config("raw and standardized splits do not match".into()));
    }
    Ok(DownstreamComparison {
        raw: nearest_centroid_accuracy(&raw_train.images, &labels(raw_train), &raw_test.images, &labels(raw_test))?,
        standardized: nearest_centroid_accuracy(
            &std_train.images,
            &std_train.labels(),
            &std_test.images,
            &std_test.labels(),
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, render_glyph_corpus, Split, SymmetryProfile};

    fn glyphs(spec: &str, per_class: usize, seed: u64) -> (crate::dataset::BaseCorpus, SymDataset) {
        let profile = SymmetryProfile::parse_list(spec).unwrap();
        let corpus = render_glyph_corpus(profile.len(), per_class, 28, seed);
        let ds = build_dataset(&corpus, &profile, seed, Split::Test).unwrap();
        (corpus, ds)
    }

    #[test]
    fn zero_action_leaves_the_image_unchanged() {
        let x = crate::image::tests::smooth_image(16);
        assert_eq!(standardize_sample(&x, Angle::ZERO).unwrap(), x);
    }

    #[test]
    fn standardizing_undoes_the_action() {
        let x = crate::image::tests::smooth_image(24);
        let a = Angle::new(30.0).unwrap();
        let expected = rotate_image(&x, SO2Element::from_degrees(-30.0).unwrap(), Interpolation::Bilinear).unwrap();
        assert_eq!(standardize_sample(&x, a).unwrap(), expected);
    }

    #[test]
    fn oracle_standardization_has_zero_residuals_and_recovers_the_base() {
        let (corpus, ds) = glyphs("uniform:90,uniform:60", 6, 3);
        let st = standardize_dataset(&ds, &OracleModel::for_dataset(&ds).unwrap()).unwrap();
        assert!(st.records.iter().all(|r| r.residual.degrees() == 0.0));
        assert_eq!(st.residual_std(), 0.0);
        for (img, r) in st.images.iter().zip(&st.records) {
            let base = &corpus.images[r.record.base_index];
            let mae = img.interior_mae(base, 0.7 * 28.0 / 2.0);
            assert!(mae <= 0.03, "sample {} mae {mae}", r.record.sample_id);
        }
    }

    #[test]
    fn oracle_length_is_checked() {
        let (_, ds) = glyphs("uniform:30", 3, 1);
        let oracle = OracleModel::for_dataset(&ds).unwrap();
        assert!(matches!(
            oracle.group_actions(&ds.images[..2]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn nearest_centroid_basics() {
        let a = Image::filled(2, 2, 1, 0.0);
        let b = Image::filled(2, 2, 1, 1.0);
        let near_b = Image::filled(2, 2, 1, 0.8);
        let acc = nearest_centroid_accuracy(&[a.clone(), b.clone()], &[0, 1], &[a, near_b], &[0, 1]).unwrap();
        assert_eq!(acc, 1.0);
        assert!(nearest_centroid_accuracy(&[], &[], std::slice::from_ref(&b), &[0]).is_err());
    }

    #[test]
    fn identical_inputs_give_identical_accuracies() {
        let (_, train) = glyphs("uniform:90,uniform:90,uniform:90", 8, 5);
        let (_, test) = glyphs("uniform:90,uniform:90,uniform:90", 4, 6);
        let identity = |ds: &SymDataset| OracleModel {
            family: Family::Uniform,
            angles: vec![Angle::ZERO; ds.len()],
            levels: vec![0.0; ds.len()],
        };
        let st_train = standardize_dataset(&train, &identity(&train)).unwrap();
        let st_test = standardize_dataset(&test, &identity(&test)).unwrap();
        let cmp = downstream_compare(&train, &test, &st_train, &st_test).unwrap();
        assert_eq!(cmp.raw, cmp.standardized);
    }

    #[test]
    fn oracle_standardization_helps_nearest_centroid() {
        let spec = "uniform:180,uniform:180,uniform:180,uniform:180";
        let (_, train) = glyphs(spec, 20, 7);
        let (_, test) = glyphs(spec, 10, 8);
        let st_train = standardize_dataset(&train, &OracleModel::for_dataset(&train).unwrap()).unwrap();
        let st_test = standardize_dataset(&test, &OracleModel::for_dataset(&test).unwrap()).unwrap();
        let cmp = downstream_compare(&train, &test, &st_train, &st_test).unwrap();
        assert!(cmp.standardized > cmp.raw, "{cmp:?}");
    }
}
