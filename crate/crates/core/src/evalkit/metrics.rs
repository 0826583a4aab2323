use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cutoffs reported by default.
pub const KS: [usize; 3] = [1, 3, 10];

/// Metric name → value.
pub type MetricValues = BTreeMap<String, f64>;

/// A ranked candidate list with its single clicked POI.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub items: Vec<String>,
    pub truth: Option<String>,
}

/// Metric names in report order: MRR, nDCG@K..., SR@K....
pub fn metric_names(ks: &[usize]) -> Vec<String> {
    let mut names = vec!["MRR".to_string()];
    names.extend(ks.iter().map(|k| format!("nDCG@{k}")));
    names.extend(ks.iter().map(|k| format!("SR@{k}")));
    names
}

/// MRR, nDCG@K and SR@K under a single binary relevant item. A list
/// missing the clicked POI contributes 0 to every metric.
pub fn metric_suite(lists: &[RankedList], ks: &[usize]) -> Result<MetricValues> {
    let ranks = lists
        .iter()
        .map(|l| {
            if l.items.is_empty() {
                return Err(Error::Data("empty ranked list".into()));
            }
            let truth = l
                .truth
                .as_ref()
                .ok_or_else(|| Error::Data("ranked list without ground truth".into()))?;
            Ok(l.items.iter().position(|x| x == truth).map(|p| p + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    metrics_from_ranks(&ranks, ks)
}

/// Same as [`metric_suite`] from 1-based ranks (`None` = absent).
pub fn metrics_from_ranks(ranks: &[Option<usize>], ks: &[usize]) -> Result<MetricValues> {
    if ranks.is_empty() {
        return Err(Error::Data("no ranked lists to evaluate".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Config("metric cutoffs must be at least 1".into()));
    }
    let n = ranks.len() as f64;
    let mut rr = 0.0;
    let mut ndcg = vec![0.0; ks.len()];
    let mut sr = vec![0.0; ks.len()];
    for r in ranks.iter().flatten() {
        rr += 1.0 / *r as f64;
        for (i, &k) in ks.iter().enumerate() {
            if *r <= k {
                sr[i] += 1.0;
                ndcg[i] += 1.0 / ((*r + 1) as f64).log2();
            }
        }
    }
    let mut out = MetricValues::new();
    out.insert("MRR".into(), rr / n);
    for (i, &k) in ks.iter().enumerate() {
        out.insert(format!("nDCG@{k}"), ndcg[i] / n);
        out.insert(format!("SR@{k}"), sr[i] / n);
    }
    Ok(out)
}

/// Metrics of one or more scorers over the same query set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub models: BTreeMap<String, MetricValues>,
    pub queries: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn new(queries: usize, fingerprint: impl Into<String>) -> Self {
        EvalReport {
            models: BTreeMap::new(),
            queries,
            fingerprint: fingerprint.into(),
        }
    }

    pub fn metric(&self, model: &str, name: &str) -> Option<f64> {
        self.models.get(model)?.get(name).copied()
    }

    /// Fixed-width table, one model per line in `order` (remaining models
    /// follow alphabetically).
    pub fn to_table(&self, order: &[&str]) -> String {
        let names = metric_names(&KS);
        let mut rows: Vec<&str> = order.iter().copied().filter(|m| self.models.contains_key(*m)).collect();
        rows.extend(self.models.keys().map(String::as_str).filter(|m| !order.contains(m)));
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}", "model");
        for n in &names {
            out.push_str(&format!(" {n:>8}"));
        }
        out.push('\n');
        for m in rows {
            out.push_str(&format!("{m:<width$}"));
            for n in &names {
                match self.metric(m, n) {
                    Some(v) => out.push_str(&format!(" {v:>8.4}")),
                    None => out.push_str(&format!(" {:>8}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        crate::util::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::load(path, e.to_string()))
    }
}

/// Element-wise mean of several metric maps over the same names.
pub fn mean_metrics(runs: &[MetricValues]) -> MetricValues {
    let mut out = MetricValues::new();
    for run in runs {
        for (k, v) in run {
            *out.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    for v in out.values_mut() {
        *v /= runs.len().max(1) as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(items: &[&str], truth: &str) -> RankedList {
        RankedList {
            items: items.iter().map(|s| s.to_string()).collect(),
            truth: Some(truth.to_string()),
        }
    }

    #[test]
    fn errors() {
        assert!(metric_suite(&[list(&[], "a")], &KS).is_err());
        let no_truth = RankedList {
            items: vec!["a".into()],
            truth: None,
        };
        assert!(metric_suite(&[no_truth], &KS).is_err());
        assert!(metrics_from_ranks(&[], &KS).is_err());
    }

    #[test]
    fn absent_truth_scores_zero() {
        let m = metric_suite(&[list(&["a", "b"], "z")], &KS).unwrap();
        assert!(m.values().all(|&v| v == 0.0));
    }

    #[test]
    fn table_has_one_line_per_model() {
        let mut r = EvalReport::new(3, "abc");
        r.models.insert("full".into(), metrics_from_ranks(&[Some(1)], &KS).unwrap());
        r.models.insert("lexical".into(), metrics_from_ranks(&[Some(2)], &KS).unwrap());
        let t = r.to_table(&["lexical"]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("lexical"));
        assert!(lines[0].contains("nDCG@10"));
    }
}
