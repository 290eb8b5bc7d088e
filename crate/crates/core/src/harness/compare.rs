use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::RunRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub method: String,
    pub config_hash: String,
    pub mean_aat: f64,
    pub std_aat: f64,
    pub seeds: usize,
}

/// Rows sorted by mean AAT, best first; equal AATs keep input order.
pub fn compare(records: &[RunRecord]) -> Result<Vec<ComparisonRow>> {
    let Some(first) = records.first() else {
        return Err(Error::InvalidInput("nothing to compare".into()));
    };
    if let Some(other) = records.iter().find(|r| r.stream != first.stream) {
        return Err(Error::Config(format!(
            "records {:?} and {:?} were run on different streams",
            first.name, other.name
        )));
    }
    let mut rows: Vec<ComparisonRow> = records
        .iter()
        .map(|r| ComparisonRow {
            name: r.name.clone(),
            method: r.method.clone(),
            config_hash: r.config_hash.clone(),
            mean_aat: r.mean_aat,
            std_aat: r.std_aat,
            seeds: r.seeds.iter().filter(|s| s.completed()).count(),
        })
        .collect();
    rows.sort_by(|a, b| b.mean_aat.total_cmp(&a.mean_aat));
    Ok(rows)
}

pub fn write_summary(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text table, AAT shown as mean ± std in percent.
pub fn format_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}  {:<20}  {:>16}  seeds\n", "name", "method", "AAT %");
    for r in rows {
        let aat = format!("{:.2} ± {:.2}", 100.0 * r.mean_aat, 100.0 * r.std_aat);
        s.push_str(&format!("{:<width$}  {:<20}  {:>16}  {}\n", r.name, r.method, aat, r.seeds));
    }
    s
}
