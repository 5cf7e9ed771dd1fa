//! Model configuration, the trained-model bundle, checkpoints and inference.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{csv_error, kv, Blob};
use crate::group::Family;
use crate::image::Image;
use crate::nn::autoencoder::{AeShape, AutoEncoder};
use crate::nn::backbone::{format_stages, parse_stages, PreparedBackbone, StageSpec};
use crate::nn::boundary::{BoundaryNet, BoundaryShape, CYCLIC_CLASSES};
use crate::nn::ops::softplus;
use crate::nn::{circular_readout, FilterBasis, Param, ParamSet, Readout};

/// Architecture of the autoencoder and the boundary network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Order K of the rotation group discretization.
    pub group_order: usize,
    pub stages: Vec<StageSpec>,
    pub d_inv: usize,
    pub mu_hidden: usize,
    pub decoder_channels: [usize; 3],
    pub theta_stages: Vec<StageSpec>,
    pub theta_hidden: [usize; 2],
    /// Output scale of the continuous boundary head, in degrees.
    pub theta_scale: f64,
    pub family: Family,
    pub filter_basis: FilterBasis,
    /// Concentric rings the invariant pooling averages over separately.
    pub rings: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let stages = parse_stages("16x5p,32x3,32x3p,64x3").expect("valid default");
        Self {
            image_size: 28,
            in_channels: 1,
            group_order: 16,
            theta_stages: stages.clone(),
            stages,
            d_inv: 64,
            mu_hidden: 32,
            decoder_channels: [32, 16, 16],
            theta_hidden: [64, 32],
            theta_scale: 30.0,
            family: Family::Uniform,
            filter_basis: FilterBasis::Gaussian,
            rings: 3,
            seed: 0,
        }
    }
}

fn parse_pair<const N: usize>(s: &str) -> Option<[usize; N]> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

fn join<const N: usize>(v: [usize; N]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group_order < 4 {
            return bad(format!("group order {} must be at least 4", self.group_order));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return bad(format!("image size {} must be a positive multiple of 4", self.image_size));
        }
        if self.in_channels == 0 || self.d_inv == 0 || self.mu_hidden == 0 || self.rings == 0 {
            return bad("channel and latent widths must be positive".into());
        }
        if self.decoder_channels.contains(&0) || self.theta_hidden.contains(&0) {
            return bad("decoder and head widths must be positive".into());
        }
        for (name, stages) in [("stages", &self.stages), ("theta_stages", &self.theta_stages)] {
            if stages.is_empty() {
                return bad(format!("{name} is empty"));
            }
            let mut size = self.image_size;
            for _ in stages.iter().filter(|s| s.pool) {
                if !size.is_multiple_of(2) {
                    return bad(format!("{name}: cannot pool an odd size {size}"));
                }
                size /= 2;
            }
        }
        if !(self.theta_scale > 0.0 && self.theta_scale.is_finite()) {
            return bad(format!("theta_scale {} must be positive", self.theta_scale));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        kv::render([
            ("image_size", self.image_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("group_order", self.group_order.to_string()),
            ("stages", format_stages(&self.stages)),
            ("d_inv", self.d_inv.to_string()),
            ("mu_hidden", self.mu_hidden.to_string()),
            ("decoder_channels", join(self.decoder_channels)),
            ("theta_stages", format_stages(&self.theta_stages)),
            ("theta_hidden", join(self.theta_hidden)),
            ("theta_scale", self.theta_scale.to_string()),
            ("family", self.family.to_string()),
            ("filter_basis", self.filter_basis.to_string()),
            ("rings", self.rings.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    /// Parses `key = value` text. Missing keys keep their defaults; unknown
    /// keys are rejected.
    pub fn from_kv(text: &str, source_name: &str) -> Result<Self> {
        let mut c = Self::default();
        for e in kv::parse(text, source_name)? {
            let invalid = || {
                Error::format(
                    source_name,
                    format!("line {}", e.line),
                    format!("invalid value `{}` for `{}`", e.value, e.key),
                )
            };
            match e.key.as_str() {
                "image_size" => c.image_size = kv::value(&e, source_name)?,
                "in_channels" => c.in_channels = kv::value(&e, source_name)?,
                "group_order" => c.group_order = kv::value(&e, source_name)?,
                "stages" => c.stages = parse_stages(&e.value).map_err(|_| invalid())?,
                "d_inv" => c.d_inv = kv::value(&e, source_name)?,
                "mu_hidden" => c.mu_hidden = kv::value(&e, source_name)?,
                "decoder_channels" => c.decoder_channels = parse_pair(&e.value).ok_or_else(invalid)?,
                "theta_stages" => c.theta_stages = parse_stages(&e.value).map_err(|_| invalid())?,
                "theta_hidden" => c.theta_hidden = parse_pair(&e.value).ok_or_else(invalid)?,
                "theta_scale" => c.theta_scale = kv::value(&e, source_name)?,
                "family" => c.family = kv::value(&e, source_name)?,
                "filter_basis" => c.filter_basis = kv::value(&e, source_name)?,
                "rings" => c.rings = kv::value(&e, source_name)?,
                "seed" => c.seed = kv::value(&e, source_name)?,
                other => {
                    return Err(Error::format(
                        source_name,
                        format!("line {}", e.line),
                        format!("unknown key `{other}`"),
                    ))
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn ae_shape(&self) -> AeShape {
        AeShape {
            image_size: self.image_size,
            in_channels: self.in_channels,
            group_order: self.group_order,
            stages: self.stages.clone(),
            d_inv: self.d_inv,
            mu_hidden: self.mu_hidden,
            decoder_channels: self.decoder_channels,
            basis: self.filter_basis,
            rings: self.rings,
        }
    }

    fn boundary_shape(&self) -> BoundaryShape {
        BoundaryShape {
            image_size: self.image_size,
            in_channels: self.in_channels,
            group_order: self.group_order,
            stages: self.theta_stages.clone(),
            hidden: self.theta_hidden,
            outputs: if self.family.is_continuous() { 1 } else { CYCLIC_CLASSES },
            basis: self.filter_basis,
            rings: self.rings,
        }
    }
}

/// Prediction of the boundary network for one input.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryOutput {
    /// Uniform half-width or Gaussian standard deviation, in degrees.
    Level(f64),
    /// Logits over cyclic orders 1..=8.
    Logits(Vec<f32>),
}

impl BoundaryOutput {
    /// The predicted level: degrees for continuous heads, the most likely
    /// order for the cyclic head.
    pub fn level(&self) -> f64 {
        match self {
            Self::Level(v) => *v,
            Self::Logits(l) => {
                let best = l
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > l[best] { i } else { best });
                (best + 1) as f64
            }
        }
    }
}

/// Per-input outputs of the autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// Invariant latent η(x).
    pub z: Vec<f32>,
    /// Per-group-position scores of μ(x).
    pub scores: Vec<f32>,
    /// Group-action readout ψ(x).
    pub readout: Readout,
}

/// Parameters of η, δ, μ and Θ together with their configuration.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    pub(crate) ae: AutoEncoder,
    pub(crate) ae_params: ParamSet,
    pub(crate) theta: BoundaryNet,
    pub(crate) theta_params: ParamSet,
}

const CONFIG_FILE: &str = "config.txt";
const TENSOR_MANIFEST: &str = "tensors.csv";
const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Serialize, Deserialize)]
struct TensorRow {
    network: String,
    name: String,
    shape: String,
}

impl ModelBundle {
    /// A freshly initialized bundle.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut ae_params = ParamSet::default();
        let ae = AutoEncoder::new(&mut ae_params, &config.ae_shape(), config.seed);
        let mut theta_params = ParamSet::default();
        let theta = BoundaryNet::new(&mut theta_params, &config.boundary_shape(), config.seed ^ 0x7e7a);
        Ok(Self {
            config,
            ae,
            ae_params,
            theta,
            theta_params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn autoencoder_params(&self) -> &ParamSet {
        &self.ae_params
    }

    pub fn boundary_params(&self) -> &ParamSet {
        &self.theta_params
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        let c = &self.config;
        let want = (c.in_channels, c.image_size, c.image_size);
        if img.shape() != want {
            return Err(Error::Shape(format!(
                "model expects (channels, height, width) = {want:?}, got {:?}",
                img.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn prepare_ae(&self) -> PreparedBackbone {
        self.ae.trunk.prepare(&self.ae_params)
    }

    pub(crate) fn prepare_theta(&self) -> PreparedBackbone {
        self.theta.trunk.prepare(&self.theta_params)
    }

    /// Runs η and ψ on every image in parallel; order is preserved.
    pub fn analyze(&self, images: &[Image]) -> Result<Vec<Analysis>> {
        images.iter().try_for_each(|i| self.check_image(i))?;
        let prep = self.prepare_ae();
        Ok(images
            .par_iter()
            .map(|img| {
                let f = self.ae.forward(&self.ae_params, &prep, img.data());
                Analysis {
                    readout: circular_readout(&f.scores),
                    z: f.z,
                    scores: f.scores,
                }
            })
            .collect())
    }

    /// The invariant latent η(x).
    pub fn encode(&self, img: &Image) -> Result<Vec<f32>> {
        Ok(self.analyze(std::slice::from_ref(img))?.remove(0).z)
    }

    /// The group-action estimate ψ(x).
    pub fn estimate(&self, img: &Image) -> Result<Readout> {
        Ok(self.analyze(std::slice::from_ref(img))?.remove(0).readout)
    }

    /// δ(z).
    pub fn decode(&self, z: &[f32]) -> Result<Image> {
        if z.len() != self.config.d_inv {
            return Err(Error::LengthMismatch {
                expected: self.config.d_inv,
                actual: z.len(),
            });
        }
        let s = self.config.image_size;
        Image::new(s, s, self.config.in_channels, self.ae.decode(&self.ae_params, z))
    }

    /// The canonical reconstruction δ(η(x)).
    pub fn reconstruct(&self, img: &Image) -> Result<Image> {
        self.decode(&self.encode(img)?)
    }

    fn boundary_output(&self, raw: Vec<f32>) -> BoundaryOutput {
        if self.config.family.is_continuous() {
            BoundaryOutput::Level(self.config.theta_scale * softplus(raw[0] as f64))
        } else {
            BoundaryOutput::Logits(raw)
        }
    }

    /// Θ on every image in parallel. `family` must match the trained head.
    pub fn predict_boundaries(&self, images: &[Image], family: Family) -> Result<Vec<BoundaryOutput>> {
        if family.is_continuous() != self.config.family.is_continuous() {
            return Err(Error::FamilyMismatch {
                expected: self.config.family.to_string(),
                found: family.to_string(),
            });
        }
        images.iter().try_for_each(|i| self.check_image(i))?;
        let prep = self.prepare_theta();
        Ok(images
            .par_iter()
            .map(|img| self.boundary_output(self.theta.forward(&self.theta_params, &prep, img.data()).outputs))
            .collect())
    }

    pub fn boundary(&self, img: &Image, family: Family) -> Result<BoundaryOutput> {
        Ok(self.predict_boundaries(std::slice::from_ref(img), family)?.remove(0))
    }

    /// Writes `config.txt`, a tensor manifest and one SYMT blob per tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensor_dir = dir.join(TENSOR_DIR);
        std::fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
        let config_path = dir.join(CONFIG_FILE);
        std::fs::write(&config_path, self.config.to_kv()).map_err(|e| Error::io(&config_path, e))?;
        let manifest = dir.join(TENSOR_MANIFEST);
        let mut writer = csv::Writer::from_path(&manifest).map_err(|e| csv_error(&manifest, e))?;
        for (network, set) in [("autoencoder", &self.ae_params), ("boundary", &self.theta_params)] {
            for p in set.params() {
                Blob::f32(p.shape.clone(), p.data.clone())?.write(&tensor_dir.join(format!("{network}.{}.symt", p.name)))?;
                writer
                    .serialize(TensorRow {
                        network: network.to_string(),
                        name: p.name.clone(),
                        shape: p.shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x"),
                    })
                    .map_err(|e| csv_error(&manifest, e))?;
            }
        }
        writer.flush().map_err(|e| Error::io(&manifest, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let mut bundle = Self::new(ModelConfig::from_kv(&text, &config_path.display().to_string())?)?;
        let manifest = dir.join(TENSOR_MANIFEST);
        let source = manifest.display().to_string();
        let mut reader = csv::Reader::from_path(&manifest).map_err(|e| csv_error(&manifest, e))?;
        let mut ae = Vec::new();
        let mut theta = Vec::new();
        for (i, row) in reader.deserialize::<TensorRow>().enumerate() {
            let row = row.map_err(|e| csv_error(&manifest, e))?;
            let line = format!("line {}", i + 2);
            let shape: Vec<usize> = row
                .shape
                .split('x')
                .map(|d| d.parse().ok())
                .collect::<Option<_>>()
                .ok_or_else(|| Error::format(&source, &line, format!("bad shape `{}`", row.shape)))?;
            let blob_path = dir.join(TENSOR_DIR).join(format!("{}.{}.symt", row.network, row.name));
            let (dims, data) = Blob::read(&blob_path)?.into_f32(&blob_path.display().to_string())?;
            if dims != shape {
                return Err(Error::format(
                    &source,
                    &line,
                    format!("tensor `{}` has shape {dims:?} on disk", row.name),
                ));
            }
            let param = Param {
                name: row.name,
                shape,
                data,
            };
            match row.network.as_str() {
                "autoencoder" => ae.push(param),
                "boundary" => theta.push(param),
                other => return Err(Error::format(&source, &line, format!("unknown network `{other}`"))),
            }
        }
        bundle.ae_params.assign(ae)?;
        bundle.theta_params.assign(theta)?;
        Ok(bundle)
    }
}
