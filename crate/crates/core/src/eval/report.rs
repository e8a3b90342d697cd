use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;

use super::{median, task_mean_curve, ErrorSeries};
use crate::data::io::fmt_f64;
use crate::error::Result;

/// Strategy column value of methods without online adaptation.
pub const NO_STRATEGY: &str = "none";

/// Curve and summary key: the method, qualified by its sampling strategy.
pub fn tag(method: &str, strategy: &str) -> String {
    if strategy == NO_STRATEGY {
        method.to_string()
    } else {
        format!("{method}:{strategy}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub task_id: usize,
    pub lambda: f64,
    pub x0: Vec<f64>,
    pub strategy: String,
    pub seed: u64,
    pub e_bar_t: f64,
}

impl ResultRow {
    pub fn tag(&self) -> String {
        tag(&self.method, &self.strategy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSeries {
    pub tag: String,
    pub seed: u64,
    pub series: ErrorSeries,
}

/// Output loss on the query samples before and after online adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptCheck {
    pub seed: u64,
    pub task_id: usize,
    pub ly_before: f64,
    pub ly_after: f64,
}

/// Per-task results and raw error series of one experiment pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ResultRow>,
    pub series: Vec<TaggedSeries>,
    pub adapt_checks: Vec<AdaptCheck>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, config_hash: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            seeds: vec![],
            rows: vec![],
            series: vec![],
            adapt_checks: vec![],
        }
    }

    pub fn merge(&mut self, other: ExperimentReport) {
        for s in other.seeds {
            if !self.seeds.contains(&s) {
                self.seeds.push(s);
            }
        }
        self.rows.extend(other.rows);
        self.series.extend(other.series);
        self.adapt_checks.extend(other.adapt_checks);
    }

    /// Keys of all evaluated method/strategy combinations, sorted.
    pub fn tags(&self) -> Vec<String> {
        let mut t: Vec<String> = self.rows.iter().map(|r| r.tag()).collect();
        t.sort();
        t.dedup();
        t
    }

    /// Median over tasks of `e_bar_t` for every seed, then median over seeds.
    pub fn median_error(&self, tag: &str) -> Option<f64> {
        let per_seed: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|seed| {
                let v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.seed == *seed && r.tag() == tag)
                    .map(|r| r.e_bar_t)
                    .collect();
                median(&v)
            })
            .collect();
        median(&per_seed)
    }

    pub fn medians(&self) -> BTreeMap<String, f64> {
        self.tags()
            .into_iter()
            .filter_map(|t| self.median_error(&t).map(|m| (t, m)))
            .collect()
    }

    /// Share of adaptation runs that lowered the query output loss.
    pub fn adapt_improved_fraction(&self) -> Option<f64> {
        if self.adapt_checks.is_empty() {
            return None;
        }
        let better = self.adapt_checks.iter().filter(|c| c.ly_after < c.ly_before).count();
        Some(better as f64 / self.adapt_checks.len() as f64)
    }

    /// Task-mean error curves per tag, pooled over seeds.
    pub fn curves(&self) -> Result<BTreeMap<String, (Vec<f64>, Vec<f64>)>> {
        let mut groups: BTreeMap<String, Vec<ErrorSeries>> = BTreeMap::new();
        for s in &self.series {
            groups.entry(s.tag.clone()).or_default().push(s.series.clone());
        }
        groups
            .into_iter()
            .map(|(tag, series)| {
                let curve = task_mean_curve(&series)?;
                Ok((tag, (series[0].times.clone(), curve)))
            })
            .collect()
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from("method,task_id,lambda,x0_1,x0_2,strategy,seed,e_bar_t\n");
        for r in &self.rows {
            let x0 = |i: usize| r.x0.get(i).map(|v| fmt_f64(*v)).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.method,
                r.task_id,
                fmt_f64(r.lambda),
                x0(0),
                x0(1),
                r.strategy,
                r.seed,
                fmt_f64(r.e_bar_t)
            )
            .expect("string write");
        }
        out
    }

    pub fn curves_csv(&self) -> Result<String> {
        let mut out = String::from("method,t,e_bar_T\n");
        for (tag, (times, curve)) in self.curves()? {
            for (t, e) in times.iter().zip(curve) {
                writeln!(out, "{tag},{},{}", fmt_f64(*t), fmt_f64(e)).expect("string write");
            }
        }
        Ok(out)
    }

    pub fn adapt_csv(&self) -> String {
        let mut out = String::from("seed,task_id,ly_before,ly_after\n");
        for c in &self.adapt_checks {
            writeln!(out, "{},{},{},{}", c.seed, c.task_id, fmt_f64(c.ly_before), fmt_f64(c.ly_after))
                .expect("string write");
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let v = json!({
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "median_e_bar_t": self.medians(),
            "adapt_improved_fraction": self.adapt_improved_fraction(),
        });
        serde_json::to_string_pretty(&v).expect("summary serializes") + "\n"
    }

    /// Writes `<prefix>results.csv`, `<prefix>curves.csv`, `<prefix>summary.json`
    /// and, when adaptation ran, `<prefix>adapt.csv`.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{prefix}results.csv")), self.results_csv())?;
        fs::write(dir.join(format!("{prefix}curves.csv")), self.curves_csv()?)?;
        fs::write(dir.join(format!("{prefix}summary.json")), self.summary_json())?;
        if !self.adapt_checks.is_empty() {
            fs::write(dir.join(format!("{prefix}adapt.csv")), self.adapt_csv())?;
        }
        Ok(())
    }
}
