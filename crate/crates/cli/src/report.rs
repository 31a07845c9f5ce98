use crowdflux::fluid::MassLedger;
use serde::Serialize;
use std::path::Path;

pub const REPORT_SCHEMA: &str = "crowdflux.report/1";

#[derive(Debug, Serialize)]
pub struct OutputFile {
    pub path: String,
    /// s
    pub t: f64,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub level: &'static str,
    pub scenario: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub wall_time_s: f64,
    pub steps: u64,
    pub substeps: u64,
    pub snapshots: u64,
    pub mass_ledger: Vec<MassLedger>,
    pub diagnostics: serde_json::Value,
    pub outputs: Vec<OutputFile>,
}

impl RunReport {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(dir.join("report.json"), text)
    }
}
