use std::path::Path;

use anyhow::{bail, Context};
use hrlf_core::{ConditionReport, SweepReport};
use serde::{Deserialize, Serialize};

/// On-disk evaluation record. The text table next to it is for humans; this
/// is what `plot` reads back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReportFile {
    Grid { model: String, report: ConditionReport },
    Sweep { model: String, report: SweepReport },
}

impl ReportFile {
    pub fn model(&self) -> &str {
        match self {
            ReportFile::Grid { model, .. } | ReportFile::Sweep { model, .. } => model,
        }
    }

    pub fn validate(&self) -> hrlf_core::Result<()> {
        match self {
            ReportFile::Grid { report, .. } => report.validate(),
            ReportFile::Sweep { report, .. } => report.validate(),
        }
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        if !path.exists() {
            bail!("report {} does not exist", path.display());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: Self = serde_json::from_str(&text).with_context(|| format!("malformed report {}", path.display()))?;
        report.validate().with_context(|| format!("invalid report {}", path.display()))?;
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
