//! Symmetry pseudo-labels from latent-space neighbourhoods.
//!
//! For every sample, the angles ψ predicted for its k nearest neighbours in
//! the invariant latent space are fed to a closed-form estimator of the
//! symmetry level: a method-of-moments half-width for uniform distributions,
//! a half-normal scale for Gaussians, and a histogram/KL match for cyclic
//! groups.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::csv_error;
use crate::group::{angular_distance, cyclic_elements, Angle, Family};
use crate::training::EmbeddingTable;

/// Default neighbourhood size for the uniform and Gaussian families.
pub const DEFAULT_K_CONTINUOUS: usize = 45;
/// Default neighbourhood size for the cyclic family.
pub const DEFAULT_K_CYCLIC: usize = 150;
/// Largest cyclic order considered.
pub const MAX_CYCLIC_ORDER: usize = 8;
/// Additive floor on the cyclic reference histograms.
pub const KL_FLOOR: f64 = 1e-4;
const BINS: usize = 360;

pub fn default_k(family: Family) -> usize {
    if family.is_continuous() {
        DEFAULT_K_CONTINUOUS
    } else {
        DEFAULT_K_CYCLIC
    }
}

/// Brute-force Euclidean nearest-neighbour index over latent vectors.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    ids: Vec<u64>,
    latents: Vec<Vec<f32>>,
}

impl NeighborIndex {
    pub fn new(ids: Vec<u64>, latents: Vec<Vec<f32>>) -> Result<Self> {
        if ids.len() != latents.len() {
            return Err(Error::LengthMismatch {
                expected: ids.len(),
                actual: latents.len(),
            });
        }
        if let Some(dim) = latents.first().map(Vec::len) {
            if let Some(bad) = latents.iter().find(|z| z.len() != dim) {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    actual: bad.len(),
                });
            }
        }
        Ok(Self { ids, latents })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn position(&self, id: u64) -> Result<usize> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .ok_or_else(|| Error::Config(format!("sample id {id} is not in the index")))
    }

    /// Positions (not ids) of the k nearest rows to row `query`, excluding it.
    fn knn_positions(&self, query: usize, k: usize) -> Result<Vec<usize>> {
        if k >= self.len() {
            return Err(Error::InvalidK { k, size: self.len() });
        }
        let q = &self.latents[query];
        let mut scored: Vec<(f64, u64, usize)> = self
            .latents
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != query)
            .map(|(i, z)| {
                let d2: f64 = z.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                (d2, self.ids[i], i)
            })
            .collect();
        let by_distance = |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k, by_distance);
            scored.truncate(k);
        }
        scored.sort_by(by_distance);
        Ok(scored.into_iter().map(|(_, _, i)| i).collect())
    }

    /// The k ids closest to `query_id`, nearest first; ties go to the smaller id.
    pub fn knn(&self, query_id: u64, k: usize) -> Result<Vec<u64>> {
        let pos = self.position(query_id)?;
        Ok(self.knn_positions(pos, k)?.into_iter().map(|i| self.ids[i]).collect())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Drops values more than two population standard deviations from the mean.
/// Returns the input unchanged when the spread is zero or nothing would remain.
pub fn filter_outliers(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("outlier filter input"));
    }
    let m = mean(values);
    let std = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
    if std == 0.0 {
        return Ok(values.to_vec());
    }
    let kept: Vec<f64> = values.iter().copied().filter(|v| (v - m).abs() <= 2.0 * std).collect();
    Ok(if kept.is_empty() { values.to_vec() } else { kept })
}

/// Twice the mean absolute angle after outlier filtering, clamped to [0, 180].
pub fn estimate_uniform(abs_angles: &[f64]) -> Result<f64> {
    let kept = filter_outliers(abs_angles)?;
    Ok((2.0 * mean(&kept)).clamp(0.0, 180.0))
}

/// How the Gaussian scale is recovered from absolute angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GaussianMode {
    /// Invert the first moment of the half-normal as seen through the
    /// outlier filter (truncated at its population cut).
    #[default]
    HalfNormalMean,
    /// The alternative literal form: std(|x|) / (1 − 2/π). Biased upward.
    Literal,
}

impl std::str::FromStr for GaussianMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "half-normal" | "halfnormal" | "mean" => Ok(Self::HalfNormalMean),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!(
                "unknown gaussian estimator `{other}` (expected half-normal or literal)"
            ))),
        }
    }
}

/// E[|X| ; |X| ≤ t] / σ for X ~ N(0, σ²), where t = (√(2/π) + 2·√(1 − 2/π))·σ
/// is where the two-standard-deviation filter cuts a large half-normal sample.
/// Plain moment inversion (mean · √(π/2)) ignores this cut and lands about 9%
/// low, since the filter routinely trims the upper tail.
pub fn filtered_half_normal_mean() -> f64 {
    use std::f64::consts::{FRAC_2_PI, SQRT_2};
    let t = FRAC_2_PI.sqrt() + 2.0 * (1.0 - FRAC_2_PI).sqrt();
    FRAC_2_PI.sqrt() * (1.0 - (-t * t / 2.0).exp()) / statrs::function::erf::erf(t / SQRT_2)
}

/// Half-normal scale from absolute angles (after outlier filtering).
pub fn estimate_gaussian(abs_angles: &[f64], mode: GaussianMode) -> Result<f64> {
    let kept = filter_outliers(abs_angles)?;
    let m = mean(&kept);
    Ok(match mode {
        GaussianMode::HalfNormalMean => m / filtered_half_normal_mean(),
        GaussianMode::Literal => {
            let std = (kept.iter().map(|v| (v - m).powi(2)).sum::<f64>() / kept.len() as f64).sqrt();
            std / (1.0 - 2.0 / std::f64::consts::PI)
        }
    })
}

/// Index of the 1° bin (−180 + i, −180 + i + 1] holding a canonical angle.
fn bin_of(degrees: f64) -> usize {
    ((degrees + 180.0).ceil() as usize).clamp(1, BINS) - 1
}

/// Normalized 360-bin histogram of canonical angles.
pub fn angle_histogram(angles: &[Angle]) -> Vec<f64> {
    let mut h = vec![0.0; BINS];
    for a in angles {
        h[bin_of(a.degrees())] += 1.0;
    }
    let n = angles.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Reference histogram of C_n: mass 1/n on each element's bin, plus a floor, renormalized.
pub fn cyclic_reference(n: usize, floor: f64) -> Result<Vec<f64>> {
    let mut q = vec![floor; BINS];
    for g in cyclic_elements(n)? {
        q[bin_of(g.degrees())] += 1.0 / n as f64;
    }
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    Ok(q)
}

/// D_KL(P‖Q), skipping bins where P is zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum()
}

/// The order n in 1..=max_order whose reference histogram is closest in KL
/// divergence to the empirical histogram; ties go to the smaller order.
pub fn estimate_cyclic(angles: &[Angle], max_order: usize, floor: f64) -> Result<usize> {
    if angles.is_empty() {
        return Err(Error::Empty("cyclic estimator input"));
    }
    if max_order == 0 {
        return Err(Error::InvalidCyclicOrder(0));
    }
    if angles.len() < 2 * max_order {
        log::warn!(
            "{} angles is few for distinguishing cyclic orders up to {max_order}",
            angles.len()
        );
    }
    let p = angle_histogram(angles);
    let mut best = (f64::INFINITY, 1);
    for n in 1..=max_order {
        let d = kl_divergence(&p, &cyclic_reference(n, floor)?);
        if d < best.0 {
            best = (d, n);
        }
    }
    Ok(best.1)
}

/// Pseudo-label of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub sample_id: u64,
    pub family: Family,
    /// Half-width or standard deviation in degrees, or the cyclic order.
    pub value: f64,
    /// Neighbour angles that survived outlier filtering.
    pub neighbors_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelOptions {
    pub family: Family,
    pub k: usize,
    pub gaussian_mode: GaussianMode,
    pub max_order: usize,
    pub kl_floor: f64,
}

impl PseudoLabelOptions {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            k: default_k(family),
            gaussian_mode: GaussianMode::default(),
            max_order: MAX_CYCLIC_ORDER,
            kl_floor: KL_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRun {
    pub estimates: Vec<Estimate>,
    pub warnings: Vec<String>,
}

/// One estimate per row of the embedding table, computed from the ψ-angles
/// of the row's k nearest latent neighbours.
pub fn pseudolabels_for_dataset(table: &EmbeddingTable, options: &PseudoLabelOptions) -> Result<PseudoLabelRun> {
    let index = NeighborIndex::new(table.ids.clone(), table.z.clone())?;
    if options.k >= index.len() {
        return Err(Error::InvalidK {
            k: options.k,
            size: index.len(),
        });
    }
    let mut warnings = Vec::new();
    if options.family == Family::Cyclic && options.k < 2 * options.max_order {
        let w = format!(
            "k = {} neighbours is few for cyclic orders up to {}",
            options.k, options.max_order
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    let estimates = (0..index.len())
        .into_par_iter()
        .map(|pos| {
            let neighbors = index.knn_positions(pos, options.k)?;
            let angles: Vec<Angle> = neighbors.iter().map(|&i| table.angles[i]).collect();
            let (value, used) = match options.family {
                Family::Cyclic => (
                    estimate_cyclic(&angles, options.max_order, options.kl_floor)? as f64,
                    angles.len(),
                ),
                family => {
                    let abs: Vec<f64> = angles.iter().map(|a| a.degrees().abs()).collect();
                    let used = filter_outliers(&abs)?.len();
                    let v = if family == Family::Uniform {
                        estimate_uniform(&abs)?
                    } else {
                        estimate_gaussian(&abs, options.gaussian_mode)?
                    };
                    (v, used)
                }
            };
            Ok(Estimate {
                sample_id: table.ids[pos],
                family: options.family,
                value,
                neighbors_used: used,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelRun { estimates, warnings })
}

/// Whether `angle` lies within `tol` degrees of an element of C_n.
pub fn near_cyclic(angle: Angle, n: usize, tol: f64) -> Result<bool> {
    Ok(cyclic_elements(n)?
        .iter()
        .any(|g| angular_distance(angle.degrees(), g.degrees()) <= tol))
}

pub fn save_estimates(estimates: &[Estimate], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for e in estimates {
        w.serialize(e).map_err(|e| csv_error(path, e))?;
    }
    if estimates.is_empty() {
        w.write_record(["sample_id", "family", "value", "neighbors_used"])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_estimates(path: &Path) -> Result<Vec<Estimate>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}
