//! Pipeline stages. Each reads its predecessors from the output directory,
//! writes its artifacts plus a summary, and is skipped when its inputs are
//! unchanged since the last run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use symlevel_core::dataset::{
    build_dataset, load_dataset, render_glyph_corpus, save_dataset, split_corpus, BaseCorpus, Split, SymDataset,
};
use symlevel_core::ood::{draw_ood_set, evaluate_ood_set};
use symlevel_core::pseudolabel::{load_estimates, pseudolabels_for_dataset, save_estimates, PseudoLabelOptions};
use symlevel_core::seed::{derive_seed, stream};
use symlevel_core::standardize::{
    downstream_compare, standardize_dataset, std_dev, OracleModel, StandardizedDataset, SymmetryModel,
};
use symlevel_core::testbed::{run_testbed, TestbedConfig};
use symlevel_core::training::{embed_dataset, pretrain, train_theta, EmbeddingTable, Phase, TrainLog};
use symlevel_core::{Angle, ModelBundle};

use crate::config::{CorpusSource, PipelineConfig};
use crate::plots;
use crate::stage::{self, Stage};

pub const MODEL_DIR: &str = "model";
pub const LOG_FILE: &str = "log.csv";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DENSITY_FILE: &str = "psi_density.csv";
pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const DOWNSTREAM_FILE: &str = "downstream.csv";
pub const VERDICTS_FILE: &str = "verdicts.csv";
pub const REPORT_FILE: &str = "report.txt";

/// Width of the ψ-angle histogram bins, in degrees.
const DENSITY_BIN: f64 = 10.0;

/// Shared options for one invocation.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: PipelineConfig,
    /// Re-run stages even when their inputs are unchanged.
    pub force: bool,
    /// Answer with ground-truth angles and levels instead of trained networks.
    pub oracle: bool,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self {
            cfg,
            force: false,
            oracle: false,
        }
    }

    pub fn out(&self) -> &Path {
        &self.cfg.out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub stage: Stage,
    pub skipped: bool,
    pub summary: String,
}

/// Runs `body` unless the stage is fresh, then records completion.
fn run_stage(
    ctx: &Ctx,
    stage: Stage,
    settings: &str,
    upstream: &[&str],
    body: impl FnOnce(&Path) -> Result<String>,
) -> Result<Outcome> {
    let out = ctx.out();
    let hash = stage::stage_hash(stage, settings, upstream);
    if !ctx.force && stage::is_fresh(out, stage, &hash)? {
        log::info!("{}: inputs unchanged, skipping", stage.dir_name());
        return Ok(Outcome {
            stage,
            skipped: true,
            summary: stage::read_summary(out, stage)?,
        });
    }
    let dir = stage::begin(out, stage)?;
    let started = Instant::now();
    let mut summary = body(&dir).with_context(|| format!("{} failed", stage.command()))?;
    writeln!(summary, "seconds = {:.2}", started.elapsed().as_secs_f64())?;
    stage::finish(out, stage, &hash, settings, &summary)?;
    Ok(Outcome {
        stage,
        skipped: false,
        summary,
    })
}

fn split_dir(out: &Path, split: Split) -> PathBuf {
    Stage::Data.dir(out).join(split.as_str())
}

pub fn load_split(out: &Path, split: Split) -> Result<SymDataset> {
    let dir = split_dir(out, split);
    load_dataset(&dir).with_context(|| format!("loading the {split} split from {}", dir.display()))
}

pub fn load_pretrained(out: &Path) -> Result<ModelBundle> {
    let dir = Stage::Pretrain.dir(out).join(MODEL_DIR);
    ModelBundle::load(&dir).with_context(|| format!("loading {}", dir.display()))
}

pub fn load_theta(out: &Path) -> Result<ModelBundle> {
    let dir = Stage::Theta.dir(out).join(MODEL_DIR);
    ModelBundle::load(&dir).with_context(|| format!("loading {}", dir.display()))
}

/// Train/val/test base images, before any symmetry is applied.
pub fn base_corpora(cfg: &PipelineConfig) -> Result<[BaseCorpus; 3]> {
    let corpus = match cfg.corpus {
        CorpusSource::Glyph => render_glyph_corpus(cfg.classes, cfg.per_class, cfg.model.image_size, cfg.seed),
        CorpusSource::Idx => {
            let dir = cfg.idx_dir().with_context(|| {
                format!(
                    "corpus = idx needs `idx_dir` or the {} environment variable",
                    crate::config::MNIST_DIR_VAR
                )
            })?;
            let corpus = BaseCorpus::from_idx_dir(&dir, "train", cfg.classes, cfg.per_class)?;
            if let Some(img) = corpus.images.first() {
                if img.height() != cfg.model.image_size {
                    bail!(
                        "IDX images are {} px but model.image_size = {}",
                        img.height(),
                        cfg.model.image_size
                    );
                }
            }
            corpus
        }
    };
    Ok(split_corpus(&corpus, cfg.train_frac, cfg.val_frac))
}

fn split_index(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

pub fn cmd_gen_data(ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    run_stage(ctx, Stage::Data, &cfg.data_kv(), &[], |_| {
        let profile = cfg.profile()?;
        let corpora = base_corpora(cfg)?;
        let mut summary = format!("profile = {profile}\n");
        for (split, corpus) in Split::ALL.into_iter().zip(&corpora) {
            let seed = derive_seed(cfg.seed, stream::DATASET, split_index(split));
            let ds = build_dataset(corpus, &profile, seed, split)?;
            save_dataset(&ds, &split_dir(ctx.out(), split))?;
            writeln!(summary, "{split} = {}", ds.len())?;
        }
        Ok(summary)
    })
}

fn log_summary(log: &TrainLog) -> String {
    let best = &log.records[log.best];
    let seconds = log.records.last().map_or(0.0, |r| r.seconds);
    format!(
        "epochs = {}\nbest_epoch = {}\nbest_val_loss = {:.6}\ntrain_seconds = {seconds:.1}\n",
        log.records.len(),
        best.epoch,
        best.val_loss
    )
}

pub fn cmd_pretrain(ctx: &Ctx) -> Result<Outcome> {
    let out = ctx.out();
    let data = stage::require(out, Stage::Data)?;
    run_stage(ctx, Stage::Pretrain, &ctx.cfg.pretrain_kv(), &[&data], |dir| {
        let train = load_split(out, Split::Train)?;
        let val = load_split(out, Split::Val)?;
        let (bundle, log) = pretrain(&train, &val, ctx.cfg.model.clone(), &ctx.cfg.pretrain)?;
        bundle.save(&dir.join(MODEL_DIR))?;
        log.write_csv(&dir.join(LOG_FILE))?;
        Ok(format!(
            "# validation selection uses the full training loss L1 + lambda2 * L2\n{}",
            log_summary(&log)
        ))
    })
}

pub fn cmd_embed(ctx: &Ctx) -> Result<Outcome> {
    let out = ctx.out();
    let data = stage::require(out, Stage::Data)?;
    let model = stage::require(out, Stage::Pretrain)?;
    run_stage(ctx, Stage::Embed, "", &[&data, &model], |dir| {
        let table = embed_dataset(&load_pretrained(out)?, &load_split(out, Split::Train)?)?;
        table.save(dir)?;
        let degenerate = table.degenerate.iter().filter(|&&d| d).count();
        Ok(format!("rows = {}\ndegenerate = {degenerate}\n", table.len()))
    })
}

pub fn cmd_pseudolabel(ctx: &Ctx) -> Result<Outcome> {
    let out = ctx.out();
    let embed = stage::require(out, Stage::Embed)?;
    let cfg = &ctx.cfg;
    run_stage(ctx, Stage::Pseudolabel, &cfg.pseudolabel_kv()?, &[&embed], |dir| {
        let table = EmbeddingTable::load(&Stage::Embed.dir(out))?;
        let options = PseudoLabelOptions {
            k: cfg.k()?,
            gaussian_mode: cfg.gaussian_mode,
            ..PseudoLabelOptions::new(cfg.family()?)
        };
        let run = pseudolabels_for_dataset(&table, &options)?;
        save_estimates(&run.estimates, &dir.join(ESTIMATES_FILE))?;
        let mean = run.estimates.iter().map(|e| e.value).sum::<f64>() / run.estimates.len() as f64;
        let mut summary = format!("labels = {}\nmean_label = {mean:.3}\n", run.estimates.len());
        for w in &run.warnings {
            writeln!(summary, "# warning: {w}")?;
        }
        Ok(summary)
    })
}

pub fn cmd_train_theta(ctx: &Ctx) -> Result<Outcome> {
    let out = ctx.out();
    let model = stage::require(out, Stage::Pretrain)?;
    let labels = stage::require(out, Stage::Pseudolabel)?;
    run_stage(ctx, Stage::Theta, &ctx.cfg.theta_kv(), &[&model, &labels], |dir| {
        let estimates = load_estimates(&Stage::Pseudolabel.dir(out).join(ESTIMATES_FILE))?;
        let train = load_split(out, Split::Train)?;
        let (bundle, log) = train_theta(load_pretrained(out)?, &train, &estimates, &ctx.cfg.theta)?;
        bundle.save(&dir.join(MODEL_DIR))?;
        log.write_csv(&dir.join(LOG_FILE))?;
        Ok(log_summary(&log))
    })
}

/// Per-class evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub true_level: f64,
    pub mean_level: f64,
    pub mae: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    /// Per-class ψ-angle densities over 10° bins from −180°.
    pub psi_density: Vec<Vec<f64>>,
    pub ood_accuracy: Option<f64>,
}

/// Mean predicted level and MAE against the true level, per class.
pub fn evaluate(ds: &SymDataset, model: &dyn SymmetryModel) -> Result<MetricsReport> {
    if ds.is_empty() {
        bail!("evaluation split is empty");
    }
    let levels = model.boundaries(&ds.images)?;
    let actions = model.group_actions(&ds.images)?;
    let n_classes = ds.n_classes();
    let bins = (360.0 / DENSITY_BIN) as usize;
    let mut classes = Vec::new();
    let mut psi_density = Vec::new();
    for class in 0..n_classes {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.records[i].class_id == class).collect();
        let Some(&first) = members.first() else { continue };
        let truth = ds.records[first].spec.level();
        let n = members.len() as f64;
        let mean_level = members.iter().map(|&i| levels[i]).sum::<f64>() / n;
        let mae = members.iter().map(|&i| (levels[i] - truth).abs()).sum::<f64>() / n;
        classes.push(ClassMetrics {
            class,
            true_level: truth,
            mean_level,
            mae,
            count: members.len(),
        });
        let mut hist = vec![0.0; bins];
        for &i in &members {
            let a: Angle = actions[i].0;
            // (−180, 180] → bins [−180, −170), …, [170, 180]
            let b = (((a.degrees() + 180.0) / DENSITY_BIN) as usize).min(bins - 1);
            hist[b] += 1.0 / (n * DENSITY_BIN);
        }
        psi_density.push(hist);
    }
    Ok(MetricsReport {
        classes,
        psi_density,
        ood_accuracy: None,
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct DensityRow {
    class: usize,
    bin_start: f64,
    bin_end: f64,
    density: f64,
}

/// Reads the OOD accuracy recorded by a finished `ood` stage.
fn recorded_ood_accuracy(out: &Path) -> Option<f64> {
    let text = stage::read_summary(out, Stage::Ood).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix("accuracy = "))
        .and_then(|v| v.trim().parse().ok())
}

fn mode_settings(ctx: &Ctx) -> String {
    format!("oracle = {}\n", ctx.oracle)
}

pub fn cmd_eval(ctx: &Ctx) -> Result<Outcome> {
    let out = ctx.out();
    let data = stage::require(out, Stage::Data)?;
    let model_hash = if ctx.oracle { String::new() } else { stage::require(out, Stage::Theta)? };
    let ood_hash = stage::recorded_hash(out, Stage::Ood)?.unwrap_or_default();
    run_stage(ctx, Stage::Eval, &mode_settings(ctx), &[&data, &model_hash, &ood_hash], |dir| {
        let test = load_split(out, Split::Test)?;
        let mut report = if ctx.oracle {
            evaluate(&test, &OracleModel::for_dataset(&test)?)?
        } else {
            evaluate(&test, &load_theta(out)?)?
        };
        report.ood_accuracy = recorded_ood_accuracy(out);
        write_rows(&dir.join(METRICS_FILE), &report.classes)?;
        let density_rows = report.psi_density.iter().zip(&report.classes).flat_map(|(h, c)| {
            h.iter().enumerate().map(move |(b, &density)| DensityRow {
                class: c.class,
                bin_start: -180.0 + b as f64 * DENSITY_BIN,
                bin_end: -180.0 + (b + 1) as f64 * DENSITY_BIN,
                density,
            })
        });
        write_rows(&dir.join(DENSITY_FILE), density_rows)?;
        let pairs: Vec<(f64, f64)> = report.classes.iter().map(|c| (c.true_level, c.mean_level)).collect();
        plots::level_bars(&dir.join("levels.png"), &pairs)?;
        plots::histogram_grid(&dir.join("psi_density.png"), &report.psi_density)?;
        let mut summary = String::from(
            "# checkpoints were selected by validation loss on the full training objective\n",
        );
        writeln!(summary, "mode = {}", if ctx.oracle { "oracle" } else { "trained" })?;
        for c in &report.classes {
            writeln!(
                summary,
                "class {} true {:.2} mean {:.2} mae {:.2} n {}",
                c.class, c.true_level, c.mean_level, c.mae, c.count
            )?;
        }
        let mean_mae = report.classes.iter().map(|c| c.mae).sum::<f64>() / report.classes.len() as f64;
        writeln!(summary, "mean_mae = {mean_mae:.4}")?;
        if let Some(a) = report.ood_accuracy {
            writeln!(summary, "ood_accuracy = {a:.4}")?;
        }
        for s in [Stage::Pretrain, Stage::Theta] {
            if let Ok(log) = TrainLog::read_csv(&s.dir(out).join(LOG_FILE), Phase::Pretrain) {
                let secs = log.records.last().map_or(0.0, |r| r.seconds);
                writeln!(summary, "{}_seconds = {secs:.1}", s.dir_name())?;
            }
        }
        std::fs::write(dir.join(REPORT_FILE), &summary)?;
        Ok(summary)
    })
}

#[derive(Serialize)]
struct ResidualRow {
    split: &'static str,
    sample_id: u64,
    class: usize,
    applied_angle: f64,
    applied_inverse: f64,
    residual: f64,
    degenerate: bool,
}

fn standardize_split(ds: &SymDataset, bundle: Option<&ModelBundle>) -> Result<StandardizedDataset> {
    Ok(match bundle {
        Some(b) => standardize_dataset(ds, b)?,
        None => standardize_dataset(ds, &OracleModel::for_dataset(ds)?)?,
    })
}

pub fn cmd_standardize(ctx: &Ctx) -> Result<Outcome> {
    let out = ctx.out();
    let data = stage::require(out, Stage::Data)?;
    let model_hash = if ctx.oracle { String::new() } else { stage::require(out, Stage::Pretrain)? };
    run_stage(ctx, Stage::Standardize, &mode_settings(ctx), &[&data, &model_hash], |dir| {
        let bundle = if ctx.oracle { None } else { Some(load_pretrained(out)?) };
        let train = load_split(out, Split::Train)?;
        let test = load_split(out, Split::Test)?;
        let std_train = standardize_split(&train, bundle.as_ref())?;
        let std_test = standardize_split(&test, bundle.as_ref())?;
        let mut rows = Vec::new();
        for (split, s) in [(Split::Train, &std_train), (Split::Test, &std_test)] {
            let ds = SymDataset::new(s.images.clone(), s.records.iter().map(|r| r.record).collect(), split)?;
            save_dataset(&ds, &dir.join(split.as_str()))?;
            rows.extend(s.records.iter().map(|r| ResidualRow {
                split: split.as_str(),
                sample_id: r.record.sample_id,
                class: r.record.class_id,
                applied_angle: r.record.angle.degrees(),
                applied_inverse: r.applied_inverse.degrees(),
                residual: r.residual.degrees(),
                degenerate: r.degenerate,
            }));
        }
        rows.sort_by_key(|r| (r.split != "train", r.class, r.sample_id));
        write_rows(&dir.join(RESIDUALS_FILE), rows)?;
        let cmp = downstream_compare(&train, &test, &std_train, &std_test)?;
        write_rows(&dir.join(DOWNSTREAM_FILE), [cmp])?;
        let raw_std = std_dev(test.records.iter().map(|r| r.angle.degrees()));
        Ok(format!(
            "mode = {}\nraw_angle_std = {raw_std:.4}\nresidual_std = {:.4}\nraw_accuracy = {:.4}\nstandardized_accuracy = {:.4}\n",
            if ctx.oracle { "oracle" } else { "trained" },
            std_test.residual_std(),
            cmp.raw,
            cmp.standardized
        ))
    })
}

pub fn cmd_ood(ctx: &Ctx) -> Result<Outcome> {
    let out = ctx.out();
    let data = stage::require(out, Stage::Data)?;
    let model_hash = if ctx.oracle { String::new() } else { stage::require(out, Stage::Theta)? };
    run_stage(ctx, Stage::Ood, &mode_settings(ctx), &[&data, &model_hash], |dir| {
        let profile = ctx.cfg.profile()?;
        let [_, _, unseen] = base_corpora(&ctx.cfg)?;
        let set = draw_ood_set(&unseen, ctx.cfg.seed)?;
        let report = if ctx.oracle {
            let oracle = OracleModel {
                family: ctx.cfg.family()?,
                angles: set.angles.clone(),
                levels: set
                    .classes
                    .iter()
                    .map(|&c| profile.get(c).map(|s| s.level()))
                    .collect::<symlevel_core::Result<_>>()?,
            };
            evaluate_ood_set(&set, &profile, &oracle)?
        } else {
            evaluate_ood_set(&set, &profile, &load_theta(out)?)?
        };
        let mut sorted = report.clone();
        sorted.verdicts.sort_by_key(|v| (v.class, v.sample_id));
        sorted.write_csv(&dir.join(VERDICTS_FILE))?;
        let flagged = report.verdicts.iter().filter(|v| v.verdict).count();
        Ok(format!(
            "mode = {}\nsamples = {}\nflagged = {flagged}\naccuracy = {:.4}\n",
            if ctx.oracle { "oracle" } else { "trained" },
            report.verdicts.len(),
            report.accuracy
        ))
    })
}

/// Runs the proposition testbed; fails when any check fails.
pub fn cmd_testbed(ctx: &Ctx) -> Result<Outcome> {
    let tb = TestbedConfig {
        seed: ctx.cfg.seed,
        ..TestbedConfig::default()
    };
    let settings = format!("seed = {}\n", tb.seed);
    let outcome = run_stage(ctx, Stage::Testbed, &settings, &[], |dir| {
        let report = run_testbed(&tb)?;
        std::fs::write(dir.join(REPORT_FILE), report.to_string())?;
        let failed = report.failures().count();
        Ok(format!("{report}checks = {}\nfailed = {failed}\n", report.checks.len()))
    })?;
    if !outcome.summary.contains("\nfailed = 0\n") {
        bail!("testbed checks failed:\n{}", outcome.summary);
    }
    Ok(outcome)
}

/// Every stage in pipeline order.
pub fn cmd_run(ctx: &Ctx) -> Result<Vec<Outcome>> {
    let stages: [fn(&Ctx) -> Result<Outcome>; 8] = [
        cmd_gen_data,
        cmd_pretrain,
        cmd_embed,
        cmd_pseudolabel,
        cmd_train_theta,
        cmd_ood,
        cmd_eval,
        cmd_standardize,
    ];
    stages.iter().map(|f| f(ctx)).collect()
}
