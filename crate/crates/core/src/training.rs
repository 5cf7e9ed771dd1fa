//! Losses and the two training phases: joint pretraining of the autoencoder
//! (reconstruction through the estimated rotation plus a pull towards the
//! identity) and supervised training of the boundary network on pseudo-labels.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SymDataset;
use crate::error::{Error, Result};
use crate::format::{csv_error, Blob};
use crate::group::{Angle, Family};
use crate::image::{Image, RotationSampler};
use crate::model::{ModelBundle, ModelConfig};
use crate::nn::backbone::PreparedBackbone;
use crate::nn::ops::{sigmoid64, softplus};
use crate::nn::{circular_readout, identity_penalty, Adam, CosineSchedule, Grads, ParamSet, CYCLIC_CLASSES};
use crate::pseudolabel::Estimate;
use crate::seed::{derive_seed, rng_from_seed, stream};

/// Samples per parallel work unit. Gradients are reduced unit by unit in a
/// fixed order, so results do not depend on the number of threads.
const CHUNK: usize = 8;

/// Optimization settings for one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    /// Weight of the identity penalty in pretraining.
    pub lambda2: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of the labelled training set held out for model selection
    /// when training the boundary network.
    pub holdout_fraction: f64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            epochs: 400,
            lr: 0.01,
            warmup_epochs: 5,
            lambda2: 0.03125,
            batch_size: 64,
            seed: 0,
            holdout_fraction: 0.0,
        }
    }

    pub fn boundary() -> Self {
        Self {
            epochs: 150,
            lr: 0.001,
            holdout_fraction: 0.1,
            ..Self::pretrain()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lambda2 >= 0.0) {
            return Err(Error::Config("learning rate must be positive and λ2 non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Boundary,
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean reconstruction loss (pretraining only).
    pub l1: Option<f64>,
    /// Mean identity penalty (pretraining) or boundary loss.
    pub l2_or_l3: f64,
    pub val_loss: f64,
    /// Wall-clock seconds since training started, at the end of this epoch.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub phase: Phase,
    pub records: Vec<EpochRecord>,
    /// Index into `records` of the checkpoint that was kept.
    pub best: usize,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> f64 {
        self.records[self.best].val_loss
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, phase: Phase) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let records: Vec<EpochRecord> = rd
            .deserialize()
            .map(|r| r.map_err(|e| csv_error(path, e)))
            .collect::<Result<_>>()?;
        if records.is_empty() {
            return Err(Error::Empty("training log"));
        }
        let best = (0..records.len())
            .min_by(|&a, &b| records[a].val_loss.total_cmp(&records[b].val_loss))
            .unwrap_or(0);
        Ok(Self { phase, records, best })
    }
}

/// Loss terms of one sample, with gradients for the network outputs.
#[derive(Debug, Clone)]
pub(crate) struct LossParts {
    pub l1: f64,
    pub l2: f64,
    pub d_recon: Vec<f32>,
    pub d_scores: Vec<f32>,
}

/// L1 = MSE(rotate(recon, ψ), x) and L2 = 1 − cos ψ from the decoder output
/// and the scorer output, with gradients of L1 + λ2·L2.
pub(crate) fn loss_parts(recon: &[f32], scores: &[f32], x: &Image, lambda2: f64) -> LossParts {
    let (c, h, w) = x.shape();
    let plane = h * w;
    let readout = circular_readout(scores);
    let sampler = RotationSampler::new(h, w, readout.angle.degrees());
    let mut rotated = vec![0.0f32; recon.len()];
    for ch in 0..c {
        sampler.bilinear(&recon[ch * plane..(ch + 1) * plane], &mut rotated[ch * plane..(ch + 1) * plane]);
    }
    let n = recon.len() as f64;
    let l1 = rotated
        .iter()
        .zip(x.data())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / n;
    let (l2, dl2_dv) = identity_penalty(&readout);

    let d_rot: Vec<f32> = rotated
        .iter()
        .zip(x.data())
        .map(|(a, b)| (2.0 * (*a as f64 - *b as f64) / n) as f32)
        .collect();
    let mut d_recon = vec![0.0f32; recon.len()];
    let mut d_angle = 0.0;
    for ch in 0..c {
        let r = ch * plane..(ch + 1) * plane;
        d_angle += sampler.bilinear_backward(&recon[r.clone()], &d_rot[r.clone()], &mut d_recon[r]);
    }
    let da_dv = readout.angle_gradient();
    let dv = [
        d_angle * da_dv[0] + lambda2 * dl2_dv[0],
        d_angle * da_dv[1] + lambda2 * dl2_dv[1],
    ];
    let d_scores = readout.backward(dv).into_iter().map(|v| v as f32).collect();
    LossParts {
        l1,
        l2,
        d_recon,
        d_scores,
    }
}

fn ae_sample(bundle: &ModelBundle, prep: &PreparedBackbone, x: &Image, lambda2: f64, grads: Option<&mut Grads>) -> (f64, f64) {
    let f = bundle.ae.forward(&bundle.ae_params, prep, x.data());
    let parts = loss_parts(&f.recon, &f.scores, x, lambda2);
    if let Some(g) = grads {
        bundle
            .ae
            .backward(&bundle.ae_params, prep, &f, &parts.d_recon, &parts.d_scores, g);
    }
    (parts.l1, parts.l2)
}

/// Reconstruction loss of one input: MSE between the canonical
/// reconstruction rotated by ψ(x) and x.
pub fn loss_l1(bundle: &ModelBundle, x: &Image) -> Result<f64> {
    bundle.check_image(x)?;
    Ok(ae_sample(bundle, &bundle.prepare_ae(), x, 0.0, None).0)
}

/// Identity penalty of one input: 1 − cos ψ(x), or 2 for a degenerate readout.
pub fn loss_l2(bundle: &ModelBundle, x: &Image) -> Result<f64> {
    bundle.check_image(x)?;
    Ok(ae_sample(bundle, &bundle.prepare_ae(), x, 0.0, None).1)
}

fn check_images(bundle: &ModelBundle, ds: &SymDataset) -> Result<()> {
    ds.images.iter().try_for_each(|img| bundle.check_image(img))
}

/// Mean (L1, L2) over a dataset.
pub fn mean_losses(bundle: &ModelBundle, ds: &SymDataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    check_images(bundle, ds)?;
    let prep = bundle.prepare_ae();
    let per: Vec<(f64, f64)> = ds
        .images
        .par_iter()
        .map(|x| ae_sample(bundle, &prep, x, 0.0, None))
        .collect();
    let n = per.len() as f64;
    Ok(per.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0 / n, a.1 + b.1 / n)))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, stream::SHUFFLE, epoch as u64)));
    order
}

/// Sums per-chunk gradients and losses in chunk order.
fn batch_gradient<F>(params: &ParamSet, batch: &[usize], per_sample: F) -> (Grads, f64, f64)
where
    F: Fn(usize, &mut Grads) -> (f64, f64) + Sync,
{
    let parts: Vec<(Grads, f64, f64)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Grads::zeros_like(params);
            let mut a = 0.0;
            let mut b = 0.0;
            for &i in chunk {
                let (x, y) = per_sample(i, &mut g);
                a += x;
                b += y;
            }
            (g, a, b)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut grads, mut a, mut b) = iter.next().expect("non-empty batch");
    for (g, x, y) in iter {
        grads.add_assign(&g);
        a += x;
        b += y;
    }
    (grads, a, b)
}

fn schedule(config: &TrainConfig, n: usize) -> CosineSchedule {
    let steps = n.div_ceil(config.batch_size);
    CosineSchedule {
        base_lr: config.lr,
        warmup_steps: config.warmup_epochs * steps,
        total_steps: config.epochs * steps,
    }
}

/// Jointly trains η, δ and ψ on `train`, keeping the parameters with the
/// lowest validation loss. An empty `val` falls back to the training loss.
pub fn pretrain(
    train: &SymDataset,
    val: &SymDataset,
    model: ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut bundle = ModelBundle::new(model)?;
    check_images(&bundle, train)?;
    check_images(&bundle, val)?;
    let sched = schedule(config, train.len());
    let mut adam = Adam::new(&bundle.ae_params);
    let mut step = 0;
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let started = Instant::now();
    for epoch in 0..config.epochs {
        let (mut sum_l1, mut sum_l2) = (0.0, 0.0);
        for (b, batch) in epoch_order(train.len(), config.seed, epoch)
            .chunks(config.batch_size)
            .enumerate()
        {
            let prep = bundle.prepare_ae();
            let (mut grads, l1, l2) = batch_gradient(&bundle.ae_params, batch, |i, g| {
                ae_sample(&bundle, &prep, &train.images[i], config.lambda2, Some(g))
            });
            let m = batch.len() as f64;
            if !(l1.is_finite() && l2.is_finite() && grads.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    l1: l1 / m,
                    aux: l2 / m,
                });
            }
            sum_l1 += l1;
            sum_l2 += l2;
            grads.scale(1.0 / batch.len() as f32);
            adam.step(&mut bundle.ae_params, &grads, sched.lr(step));
            step += 1;
        }
        let n = train.len() as f64;
        let (l1, l2) = (sum_l1 / n, sum_l2 / n);
        let val_loss = if val.is_empty() {
            l1 + config.lambda2 * l2
        } else {
            let (v1, v2) = mean_losses(&bundle, val)?;
            v1 + config.lambda2 * v2
        };
        log::info!("pretrain epoch {epoch}: l1 {l1:.5} l2 {l2:.4} val {val_loss:.5}");
        records.push(EpochRecord {
            epoch,
            l1: Some(l1),
            l2_or_l3: l2,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(v, _, _)| val_loss < *v) {
            best = Some((val_loss, epoch, bundle.ae_params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    bundle.ae_params = params;
    Ok((
        bundle,
        TrainLog {
            phase: Phase::Pretrain,
            records,
            best: best_epoch,
        },
    ))
}

/// Invariant latents and ψ-angles of every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<u64>,
    pub z: Vec<Vec<f32>>,
    pub angles: Vec<Angle>,
    /// Rows whose readout was degenerate (angle defaulted to zero).
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRow {
    sample_id: u64,
    angle: f64,
    degenerate: bool,
}

const Z_FILE: &str = "z.symt";
const ANGLE_FILE: &str = "angles.symt";
const EMBED_MANIFEST: &str = "ids.csv";

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Writes the latent matrix and angle vector as SYMT blobs, and the ids
    /// (with exact angles) as a CSV manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let d = self.z.first().map_or(0, Vec::len);
        Blob::f32(vec![self.len(), d], self.z.concat())?.write(&dir.join(Z_FILE))?;
        Blob::f32(vec![self.len()], self.angles.iter().map(|a| a.degrees() as f32).collect())?
            .write(&dir.join(ANGLE_FILE))?;
        let path = dir.join(EMBED_MANIFEST);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        for i in 0..self.len() {
            w.serialize(EmbeddingRow {
                sample_id: self.ids[i],
                angle: self.angles[i].degrees(),
                degenerate: self.degenerate[i],
            })
            .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let z_path = dir.join(Z_FILE);
        let (dims, flat) = Blob::read(&z_path)?.into_f32(&z_path.display().to_string())?;
        let [n, d]: [usize; 2] = dims.as_slice().try_into().map_err(|_| {
            Error::format(z_path.display().to_string(), "offset 9", format!("expected 2 dims, found {}", dims.len()))
        })?;
        let path = dir.join(EMBED_MANIFEST);
        let mut rd = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let rows: Vec<EmbeddingRow> = rd
            .deserialize()
            .map(|r| r.map_err(|e| csv_error(&path, e)))
            .collect::<Result<_>>()?;
        if rows.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: rows.len(),
            });
        }
        let angles = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Angle::new(r.angle).map_err(|_| {
                    Error::format(path.display().to_string(), format!("line {}", i + 2), "non-finite angle")
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            ids: rows.iter().map(|r| r.sample_id).collect(),
            z: if d == 0 { vec![Vec::new(); n] } else { flat.chunks(d).map(<[f32]>::to_vec).collect() },
            angles,
            degenerate: rows.iter().map(|r| r.degenerate).collect(),
        })
    }
}

/// Runs η and ψ over a dataset.
pub fn embed_dataset(bundle: &ModelBundle, ds: &SymDataset) -> Result<EmbeddingTable> {
    let analyses = bundle.analyze(&ds.images)?;
    let degenerate: Vec<bool> = analyses.iter().map(|a| a.readout.degenerate).collect();
    let flagged = degenerate.iter().filter(|&&d| d).count();
    if flagged > 0 {
        log::warn!("{flagged} of {} readouts were degenerate; their angles default to 0", ds.len());
    }
    Ok(EmbeddingTable {
        ids: ds.records.iter().map(|r| r.sample_id).collect(),
        angles: analyses.iter().map(|a| a.readout.angle).collect(),
        z: analyses.into_iter().map(|a| a.z).collect(),
        degenerate,
    })
}

/// Loss of the boundary head on one sample and its gradient with respect to
/// the raw outputs: squared error in degrees for continuous families,
/// cross-entropy over orders 1..=8 for the cyclic family.
pub(crate) fn boundary_loss(raw: &[f32], target: f64, family: Family, scale: f64) -> (f64, Vec<f32>) {
    if family.is_continuous() {
        let o = raw[0] as f64;
        let pred = scale * softplus(o);
        let diff = pred - target;
        (diff * diff, vec![(2.0 * diff * scale * sigmoid64(o)) as f32])
    } else {
        let class = (target.round() as usize).clamp(1, CYCLIC_CLASSES) - 1;
        let max = raw.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = raw.iter().map(|&v| (v as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - raw[class] as f64;
        let grad = exps
            .iter()
            .enumerate()
            .map(|(i, e)| (e / total - if i == class { 1.0 } else { 0.0 }) as f32)
            .collect();
        (loss, grad)
    }
}

fn theta_sample(
    bundle: &ModelBundle,
    prep: &PreparedBackbone,
    x: &Image,
    target: f64,
    grads: Option<&mut Grads>,
) -> f64 {
    let c = bundle.config();
    let f = bundle.theta.forward(&bundle.theta_params, prep, x.data());
    let (loss, d_out) = boundary_loss(&f.outputs, target, c.family, c.theta_scale);
    if let Some(g) = grads {
        bundle.theta.backward(&bundle.theta_params, prep, &f, &d_out, g);
    }
    loss
}

/// Trains the boundary network of `bundle` on per-sample pseudo-labels.
/// A seeded share of the labelled samples is held out to pick the kept epoch.
pub fn train_theta(
    mut bundle: ModelBundle,
    train: &SymDataset,
    labels: &[Estimate],
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    check_images(&bundle, train)?;
    let family = bundle.config().family;
    if let Some(l) = labels.iter().find(|l| l.family.is_continuous() != family.is_continuous()) {
        return Err(Error::FamilyMismatch {
            expected: family.to_string(),
            found: l.family.to_string(),
        });
    }
    let by_id: HashMap<u64, f64> = labels.iter().map(|l| (l.sample_id, l.value)).collect();
    let targets: Vec<f64> = train
        .records
        .iter()
        .map(|r| {
            by_id
                .get(&r.sample_id)
                .copied()
                .ok_or_else(|| Error::Config(format!("no pseudo-label for sample {}", r.sample_id)))
        })
        .collect::<Result<_>>()?;

    let mut all: Vec<usize> = (0..train.len()).collect();
    all.shuffle(&mut rng_from_seed(derive_seed(config.seed, stream::SHUFFLE, u64::MAX)));
    let n_hold = ((train.len() as f64 * config.holdout_fraction).round() as usize).min(train.len() - 1);
    let (holdout, fit) = all.split_at(n_hold);
    let (holdout, fit) = (holdout.to_vec(), fit.to_vec());

    let sched = schedule(config, fit.len());
    let mut adam = Adam::new(&bundle.theta_params);
    let mut step = 0;
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let started = Instant::now();
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let order: Vec<usize> = epoch_order(fit.len(), config.seed, epoch).into_iter().map(|i| fit[i]).collect();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let prep = bundle.prepare_theta();
            let (mut grads, loss, _) = batch_gradient(&bundle.theta_params, batch, |i, g| {
                (theta_sample(&bundle, &prep, &train.images[i], targets[i], Some(g)), 0.0)
            });
            if !(loss.is_finite() && grads.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    l1: f64::NAN,
                    aux: loss / batch.len() as f64,
                });
            }
            sum += loss;
            grads.scale(1.0 / batch.len() as f32);
            adam.step(&mut bundle.theta_params, &grads, sched.lr(step));
            step += 1;
        }
        let l3 = sum / fit.len() as f64;
        let val_loss = if holdout.is_empty() {
            l3
        } else {
            let prep = bundle.prepare_theta();
            let losses: Vec<f64> = holdout
                .par_iter()
                .map(|&i| theta_sample(&bundle, &prep, &train.images[i], targets[i], None))
                .collect();
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        log::info!("boundary epoch {epoch}: l3 {l3:.4} val {val_loss:.4}");
        records.push(EpochRecord {
            epoch,
            l1: None,
            l2_or_l3: l3,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(v, _, _)| val_loss < *v) {
            best = Some((val_loss, epoch, bundle.theta_params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    bundle.theta_params = params;
    Ok((
        bundle,
        TrainLog {
            phase: Phase::Boundary,
            records,
            best: best_epoch,
        },
    ))
}
