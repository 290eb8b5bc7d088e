use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::activity::UnitActivity;
use super::rank::RankMetrics;
use crate::error::{Error, Result};

/// Average accuracy across tasks. Values are summed in sorted order so the
/// result does not depend on the order of the input.
pub fn aat(acc: &[f64]) -> Result<f64> {
    if acc.is_empty() {
        return Err(Error::Contract("AAT of an empty accuracy list".into()));
    }
    if let Some(bad) = acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidInput(format!("accuracy {bad} outside [0, 1]")));
    }
    let mut sorted = acc.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted.iter().sum::<f64>() / sorted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightMetrics {
    pub frobenius: f64,
    pub rank: RankMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsPoint {
    pub depth: String,
    pub rank: RankMetrics,
}

/// Everything recorded at the end of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// 1-based.
    pub task: usize,
    pub accuracy: f64,
    pub final_loss: f64,
    /// Optimizer steps taken so far in the run.
    pub step: u64,
    pub probed: bool,
    pub features: BTreeMap<String, RankMetrics>,
    pub weights: BTreeMap<String, WeightMetrics>,
    /// Per-head Q/K/V ranks, keyed `<group>.head<h>`.
    pub heads: BTreeMap<String, RankMetrics>,
    pub cls: Vec<ClsPoint>,
    pub activity: Vec<UnitActivity>,
    pub cbp_replacements: u64,
}

impl TaskRecord {
    pub fn new(task: usize, accuracy: f64, final_loss: f64, step: u64) -> Self {
        Self {
            task,
            accuracy,
            final_loss,
            step,
            probed: false,
            features: BTreeMap::new(),
            weights: BTreeMap::new(),
            heads: BTreeMap::new(),
            cls: Vec::new(),
            activity: Vec::new(),
            cbp_replacements: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PlasticityReport {
    pub tasks: Vec<TaskRecord>,
    pub aat: f64,
}

impl PlasticityReport {
    pub fn push(&mut self, record: TaskRecord) -> Result<()> {
        let expected = self.tasks.len() + 1;
        if record.task != expected {
            return Err(Error::Contract(format!(
                "task records must be contiguous from 1: expected {expected}, got {}",
                record.task
            )));
        }
        self.tasks.push(record);
        self.aat = aat(&self.accuracies())?;
        Ok(())
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.accuracy).collect()
    }

    /// Feature erank of one layer for every probed task, as (task, value).
    pub fn feature_series(&self, layer: &str) -> Vec<(usize, f64)> {
        self.tasks
            .iter()
            .filter_map(|t| t.features.get(layer).map(|r| (t.task, r.erank)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task != i + 1 {
                return Err(Error::Contract(format!("task index {} at position {i}", t.task)));
            }
        }
        if !self.tasks.is_empty() {
            let expect = aat(&self.accuracies())?;
            if expect != self.aat {
                return Err(Error::Contract(format!("stored AAT {} != recomputed {expect}", self.aat)));
            }
        }
        Ok(())
    }

    /// Flat rows for the metric log.
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for t in &self.tasks {
            let mut push = |scope: &str, component: &str, metric: &str, value: f64| {
                rows.push(MetricRow {
                    task: t.task,
                    step: t.step,
                    scope: scope.to_string(),
                    component: component.to_string(),
                    metric: metric.to_string(),
                    value,
                })
            };
            push("task", "head", "accuracy", t.accuracy);
            push("task", "head", "final_loss", t.final_loss);
            for (layer, r) in &t.features {
                push("features", layer, "erank", r.erank);
                push("features", layer, "srank", r.srank);
                push("features", layer, "rank_r", r.rank_r as f64);
            }
            for (group, w) in &t.weights {
                push("weights", group, "frobenius", w.frobenius);
                push("weights", group, "erank", w.rank.erank);
                push("weights", group, "srank", w.rank.srank);
            }
            for (head, r) in &t.heads {
                push("heads", head, "erank", r.erank);
                push("heads", head, "srank", r.srank);
            }
            for c in &t.cls {
                push("cls", &c.depth, "erank", c.rank.erank);
            }
            for a in &t.activity {
                push("activity", &a.layer, "fau", a.fau);
                push("activity", &a.layer, "fdu", a.fdu);
            }
            if t.cbp_replacements > 0 {
                push("cbp", "ffn", "cbp_replacement", t.cbp_replacements as f64);
            }
        }
        rows
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: usize,
    pub step: u64,
    pub scope: String,
    pub component: String,
    pub metric: String,
    pub value: f64,
}

/// Per (component, task) erank differences between two blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub components: Vec<String>,
    pub tasks: Vec<usize>,
    /// values[component][task]
    pub values: Vec<Vec<f64>>,
}

pub fn delta_heatmap(
    report: &PlasticityReport,
    block_a: usize,
    block_b: usize,
    components: &[&str],
) -> Result<Heatmap> {
    let probed: Vec<&TaskRecord> = report.tasks.iter().filter(|t| t.probed).collect();
    let mut values = Vec::with_capacity(components.len());
    for comp in components {
        let (la, lb) = (format!("block{block_a}.{comp}"), format!("block{block_b}.{comp}"));
        let mut row = Vec::with_capacity(probed.len());
        for t in &probed {
            let a = t.features.get(&la).ok_or_else(|| Error::Lookup(la.clone()))?;
            let b = t.features.get(&lb).ok_or_else(|| Error::Lookup(lb.clone()))?;
            row.push(a.erank - b.erank);
        }
        values.push(row);
    }
    Ok(Heatmap {
        components: components.iter().map(|c| c.to_string()).collect(),
        tasks: probed.iter().map(|t| t.task).collect(),
        values,
    })
}

/// Plot-ready table: one row per task, one column per series key.
pub fn series_table(report: &PlasticityReport, scope: &str, metric: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let rows = report.metric_rows();
    let mut keys: Vec<String> = rows
        .iter()
        .filter(|r| r.scope == scope && r.metric == metric)
        .map(|r| r.component.clone())
        .collect();
    keys.sort();
    keys.dedup();
    let mut table: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.scope == scope && r.metric == metric) {
        let col = keys.binary_search(&r.component).expect("key collected above");
        table.entry(r.task).or_insert_with(|| vec![f64::NAN; keys.len()])[col] = r.value;
    }
    let mut header = vec!["task".to_string()];
    header.extend(keys);
    let body = table
        .into_iter()
        .map(|(task, mut vals)| {
            vals.insert(0, task as f64);
            vals
        })
        .collect();
    (header, body)
}

/// Ordinary least-squares slope of y against x.
pub fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASELINE: [f64; 10] = [0.632, 0.652, 0.606, 0.617, 0.575, 0.542, 0.463, 0.493, 0.630, 0.511];
    const C3_TRAC: [f64; 10] = [0.611, 0.665, 0.669, 0.672, 0.654, 0.649, 0.587, 0.588, 0.688, 0.613];

    #[test]
    fn aat_fixtures() {
        assert!((aat(&BASELINE).unwrap() - 0.5721).abs() <= 5e-5);
        assert!((aat(&C3_TRAC).unwrap() - 0.6396).abs() <= 5e-5);
        assert_eq!(aat(&[0.3; 7]).unwrap(), 0.3);
        assert!(matches!(aat(&[]), Err(Error::Contract(_))));
        assert!(aat(&[1.2]).is_err());
    }

    fn rm(e: f64) -> RankMetrics {
        RankMetrics {
            erank: e,
            srank: e,
            rank_r: 1,
            degenerate: false,
        }
    }

    fn report() -> PlasticityReport {
        let mut r = PlasticityReport::default();
        for t in 1..=3 {
            let mut rec = TaskRecord::new(t, 0.5 + 0.1 * t as f64, 0.1, 10 * t as u64);
            rec.probed = t != 2;
            if rec.probed {
                for (b, base) in [(0, 5.0), (1, 3.0)] {
                    rec.features.insert(format!("block{b}.fc1"), rm(base - t as f64 * 0.1));
                    rec.features.insert(format!("block{b}.attn"), rm(base + 1.0));
                }
            }
            r.push(rec).unwrap();
        }
        r
    }

    #[test]
    fn report_keeps_aat_consistent() {
        let r = report();
        r.validate().unwrap();
        assert_eq!(r.aat, aat(&r.accuracies()).unwrap());
        let mut bad = r.clone();
        assert!(bad.push(TaskRecord::new(9, 0.5, 0.0, 0)).is_err());
        bad.aat = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn heatmap_shape_zero_diagonal_and_antisymmetry() {
        let r = report();
        let comps = ["fc1", "attn"];
        let same = delta_heatmap(&r, 1, 1, &comps).unwrap();
        assert!(same.values.iter().flatten().all(|v| *v == 0.0));
        let ab = delta_heatmap(&r, 0, 1, &comps).unwrap();
        let ba = delta_heatmap(&r, 1, 0, &comps).unwrap();
        assert_eq!(ab.values.len(), 2);
        assert_eq!(ab.tasks, vec![1, 3]);
        for (x, y) in ab.values.iter().flatten().zip(ba.values.iter().flatten()) {
            assert_eq!(*x, -*y);
        }
        assert!(matches!(delta_heatmap(&r, 0, 4, &comps), Err(Error::Lookup(_))));
    }

    #[test]
    fn series_table_has_task_rows() {
        let r = report();
        let (header, rows) = series_table(&r, "features", "erank");
        assert_eq!(header[0], "task");
        assert_eq!(header.len(), 5);
        assert_eq!(rows.len(), 2);
        let (h, acc) = series_table(&r, "task", "accuracy");
        assert_eq!(h, vec!["task", "head"]);
        assert_eq!(acc.len(), 3);
    }

    #[test]
    fn slope_of_a_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 - 0.5 * i as f64)).collect();
        assert!((ols_slope(&pts) + 0.5).abs() < 1e-12);
    }
}
