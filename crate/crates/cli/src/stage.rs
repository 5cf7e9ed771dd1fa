//! Stage bookkeeping. Each stage directory holds a `stage.txt` manifest
//! recording a hash of everything the stage's outputs depend on: its own
//! settings plus the hashes of the stages it read. A stage whose recorded
//! hash matches is skipped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use symlevel_core::format::kv;

pub const MANIFEST: &str = "stage.txt";
pub const SUMMARY: &str = "summary.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Pretrain,
    Embed,
    Pseudolabel,
    Theta,
    Eval,
    Standardize,
    Ood,
    Testbed,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Data => "data",
            Self::Pretrain => "pretrain",
            Self::Embed => "embed",
            Self::Pseudolabel => "pseudolabel",
            Self::Theta => "theta",
            Self::Eval => "eval",
            Self::Standardize => "standardize",
            Self::Ood => "ood",
            Self::Testbed => "testbed",
        }
    }

    /// The command that produces this stage.
    pub fn command(self) -> &'static str {
        match self {
            Self::Data => "gen-data",
            Self::Theta => "train-theta",
            other => other.dir_name(),
        }
    }

    pub fn dir(self, out: &Path) -> PathBuf {
        out.join(self.dir_name())
    }
}

/// Hex SHA-256 over the stage name, its settings and upstream hashes.
pub fn stage_hash(stage: Stage, settings: &str, upstream: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(stage.dir_name().as_bytes());
    h.update([0]);
    h.update(settings.as_bytes());
    for u in upstream {
        h.update([0]);
        h.update(u.as_bytes());
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// The hash recorded by a completed stage, if any.
pub fn recorded_hash(out: &Path, stage: Stage) -> Result<Option<String>> {
    let path = stage.dir(out).join(MANIFEST);
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let entries = kv::parse(&text, &path.display().to_string())?;
    Ok(entries.into_iter().find(|e| e.key == "hash").map(|e| e.value))
}

/// The hash of a completed upstream stage, or an error naming the command
/// that must run first.
pub fn require(out: &Path, stage: Stage) -> Result<String> {
    match recorded_hash(out, stage)? {
        Some(h) => Ok(h),
        None => bail!(
            "no {} output under {}; run {} first",
            stage.dir_name(),
            out.display(),
            stage.command()
        ),
    }
}

/// Whether the stage already ran with exactly these inputs.
pub fn is_fresh(out: &Path, stage: Stage, hash: &str) -> Result<bool> {
    Ok(recorded_hash(out, stage)?.as_deref() == Some(hash) && stage.dir(out).join(SUMMARY).is_file())
}

/// Clears the stage directory before a fresh run so no stale files remain.
pub fn begin(out: &Path, stage: Stage) -> Result<PathBuf> {
    let dir = stage.dir(out);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Records completion: the summary first, then the manifest, so a stage
/// interrupted midway is never mistaken for a finished one.
pub fn finish(out: &Path, stage: Stage, hash: &str, settings: &str, summary: &str) -> Result<()> {
    let dir = stage.dir(out);
    let summary_path = dir.join(SUMMARY);
    std::fs::write(&summary_path, summary).with_context(|| format!("writing {}", summary_path.display()))?;
    let manifest = format!(
        "{}# settings\n{}",
        kv::render([("stage", stage.dir_name().to_string()), ("hash", hash.to_string())]),
        settings
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect::<String>()
    );
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))
}

pub fn read_summary(out: &Path, stage: Stage) -> Result<String> {
    let path = stage.dir(out).join(SUMMARY);
    std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_depend_on_every_input() {
        let a = stage_hash(Stage::Embed, "x = 1\n", &["u"]);
        assert_eq!(a.len(), 64);
        assert_eq!(a, stage_hash(Stage::Embed, "x = 1\n", &["u"]));
        assert_ne!(a, stage_hash(Stage::Embed, "x = 2\n", &["u"]));
        assert_ne!(a, stage_hash(Stage::Embed, "x = 1\n", &["v"]));
        assert_ne!(a, stage_hash(Stage::Eval, "x = 1\n", &["u"]));
    }

    #[test]
    fn manifest_round_trip_and_freshness() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        assert!(require(out, Stage::Pseudolabel)
            .unwrap_err()
            .to_string()
            .contains("run pseudolabel first"));
        assert!(require(out, Stage::Theta).unwrap_err().to_string().contains("run train-theta first"));
        begin(out, Stage::Embed).unwrap();
        assert!(!is_fresh(out, Stage::Embed, "abc").unwrap());
        finish(out, Stage::Embed, "abc", "k = 1\n", "done\n").unwrap();
        assert!(is_fresh(out, Stage::Embed, "abc").unwrap());
        assert!(!is_fresh(out, Stage::Embed, "abd").unwrap());
        assert_eq!(require(out, Stage::Embed).unwrap(), "abc");
        assert_eq!(read_summary(out, Stage::Embed).unwrap(), "done\n");
    }
}
