use rayon::prelude::*;

use super::{BaseCorpus, SampleRecord, Split, SymDataset, SymmetryProfile};
use crate::error::Result;
use crate::group::{sample_spec, SO2Element};
use crate::image::{rotate_image, Interpolation};
use crate::seed::{derive_seed, rng_from_seed, stream};

/// Rotates every base image by a draw from its class spec.
///
/// Sample `i` uses a generator seeded from `(seed, i)`, so the output is a pure
/// function of the inputs regardless of evaluation order.
pub fn build_dataset(corpus: &BaseCorpus, profile: &SymmetryProfile, seed: u64, split: Split) -> Result<SymDataset> {
    let specs = corpus
        .labels
        .iter()
        .map(|&c| profile.get(c))
        .collect::<Result<Vec<_>>>()?;
    let samples = corpus
        .images
        .par_iter()
        .zip(specs.par_iter())
        .enumerate()
        .map(|(i, (img, spec))| {
            let mut rng = rng_from_seed(derive_seed(seed, stream::DATASET, i as u64));
            let angle = sample_spec(spec, &mut rng);
            let rotated = rotate_image(img, SO2Element::from_angle(angle), Interpolation::Bilinear)?;
            let record = SampleRecord {
                sample_id: i as u64,
                class_id: corpus.labels[i],
                base_index: i,
                angle,
                spec: *spec,
            };
            Ok((rotated, record))
        })
        .collect::<Result<Vec<_>>>()?;
    let (images, records) = samples.into_iter().unzip();
    SymDataset::new(images, records, split)
}

/// Deterministic per-class split into train/val/test base corpora.
/// `fractions` gives the train and val shares; test takes the remainder.
pub fn split_corpus(corpus: &BaseCorpus, train_frac: f64, val_frac: f64) -> [BaseCorpus; 3] {
    let mut parts: [BaseCorpus; 3] = std::array::from_fn(|_| BaseCorpus {
        images: Vec::new(),
        labels: Vec::new(),
        n_classes: corpus.n_classes,
    });
    for class in 0..corpus.n_classes {
        let members: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.labels[i] == class).collect();
        let n = members.len();
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = (((n as f64) * val_frac).round() as usize).min(n - n_train.min(n));
        for (j, &i) in members.iter().enumerate() {
            let part = if j < n_train {
                0
            } else if j < n_train + n_val {
                1
            } else {
                2
            };
            parts[part].images.push(corpus.images[i].clone());
            parts[part].labels.push(class);
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{preset_profile, render_glyph_corpus};
    use crate::error::Error;
    use crate::group::{cyclic_elements, SymmetrySpec};

    #[test]
    fn identity_profiles_leave_images_unchanged() {
        let corpus = render_glyph_corpus(3, 2, 16, 1);
        for spec in [SymmetrySpec::Uniform { theta: 0.0 }, SymmetrySpec::Cyclic { n: 1 }] {
            let ds = build_dataset(&corpus, &SymmetryProfile::new(vec![spec; 3]), 5, Split::Train).unwrap();
            assert_eq!(ds.images, corpus.images);
        }
    }

    #[test]
    fn uniform_audit() {
        let corpus = render_glyph_corpus(1, 10_000, 16, 2);
        let ds = build_dataset(&corpus, &preset_profile("rot60", 1).unwrap(), 3, Split::Train).unwrap();
        let abs: Vec<f64> = ds.records.iter().map(|r| r.angle.abs()).collect();
        assert!(abs.iter().all(|&a| a <= 60.0));
        let mean = abs.iter().sum::<f64>() / abs.len() as f64;
        assert!((mean - 30.0).abs() <= 1.0, "mean |angle| {mean}");
    }

    #[test]
    fn records_are_consistent_with_specs() {
        let corpus = render_glyph_corpus(10, 5, 16, 4);
        for preset in ["multiple", "c2_c4", "rot60_90"] {
            let ds = build_dataset(&corpus, &preset_profile(preset, 10).unwrap(), 9, Split::Val).unwrap();
            for r in &ds.records {
                assert!(r.spec.admits(r.angle, 1e-9), "{preset}: {r:?}");
                if let SymmetrySpec::Cyclic { n } = r.spec {
                    assert!(cyclic_elements(n).unwrap().contains(&r.angle));
                }
            }
            // class balance carries over
            for c in 0..10 {
                assert_eq!(ds.records.iter().filter(|r| r.class_id == c).count(), 5);
            }
        }
    }

    #[test]
    fn reproducible() {
        let corpus = render_glyph_corpus(2, 6, 16, 4);
        let p = preset_profile("gaussian", 2).unwrap();
        assert_eq!(
            build_dataset(&corpus, &p, 1, Split::Test).unwrap(),
            build_dataset(&corpus, &p, 1, Split::Test).unwrap()
        );
    }

    #[test]
    fn missing_class_is_an_error() {
        let corpus = render_glyph_corpus(3, 1, 16, 4);
        let p = preset_profile("rot60", 2).unwrap();
        assert!(matches!(build_dataset(&corpus, &p, 1, Split::Train), Err(Error::MissingClass(2))));
    }

    #[test]
    fn split_is_per_class() {
        let corpus = render_glyph_corpus(2, 10, 16, 4);
        let [tr, va, te] = split_corpus(&corpus, 0.6, 0.2);
        assert_eq!((tr.len(), va.len(), te.len()), (12, 4, 4));
        assert_eq!(tr.labels.iter().filter(|&&l| l == 1).count(), 6);
    }
}
