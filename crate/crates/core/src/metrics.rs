//! Clustering evaluation: Hungarian-matched accuracy, NMI and ARI.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::{McaError, Result};

/// Counts of (predicted cluster, true class) pairs over compacted label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    counts: Vec<Vec<usize>>,
    row_sums: Vec<usize>,
    col_sums: Vec<usize>,
    total: usize,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(McaError::Shape(format!(
                "prediction has {} entries, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        let rows = compact(pred);
        let cols = compact(truth);
        let mut counts = vec![vec![0usize; cols.len()]; rows.len()];
        for (p, t) in pred.iter().zip(truth) {
            counts[rows[p]][cols[t]] += 1;
        }
        let row_sums: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<usize> = (0..cols.len()).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            total: pred.len(),
        })
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn row_sums(&self) -> &[usize] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[usize] {
        &self.col_sums
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

fn compact(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut map = BTreeMap::new();
    for &l in labels {
        let next = map.len();
        map.entry(l).or_insert(next);
    }
    // reorder so compacted ids follow label order
    map.keys().copied().enumerate().map(|(i, l)| (l, i)).collect()
}

/// Minimum-cost perfect matching on a square matrix (Kuhn-Munkres with
/// potentials). Returns `assignment[row] = col`.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays, column 0 is a sentinel
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if col_owner[j] != 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Best one-to-one matching of predicted clusters onto classes. The table is
/// zero-padded to square so differing cluster counts are allowed. Returns
/// `(pred_label, true_label)` pairs for matched non-padding entries.
pub fn best_matching(pred: &[usize], truth: &[usize]) -> Result<(usize, Vec<(usize, usize)>)> {
    let table = ContingencyTable::new(pred, truth)?;
    let size = table.counts.len().max(table.col_sums.len());
    let cost: Vec<Vec<i64>> = (0..size)
        .map(|i| {
            (0..size)
                .map(|j| -(table.counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0) as i64))
                .collect()
        })
        .collect();
    let assignment = min_cost_assignment(&cost);
    let pred_labels: Vec<usize> = compact(pred).into_keys().collect();
    let true_labels: Vec<usize> = compact(truth).into_keys().collect();
    let mut matched = 0;
    let mut pairs = Vec::new();
    for (i, &j) in assignment.iter().enumerate() {
        if i < pred_labels.len() && j < true_labels.len() {
            matched += table.counts[i][j];
            pairs.push((pred_labels[i], true_labels[j]));
        }
    }
    Ok((matched, pairs))
}

/// Fraction of samples agreeing with the truth under the best cluster-to-class matching.
pub fn accuracy_hungarian(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(McaError::Empty("no samples to score".into()));
    }
    let (matched, _) = best_matching(pred, truth)?;
    Ok(matched as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum NmiNormalization {
    #[default]
    Sqrt,
    Arithmetic,
}

fn entropy(counts: &[usize], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(table: &ContingencyTable) -> f64 {
    let n = table.total as f64;
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            mi += nij / n * (n * nij / (table.row_sums[i] as f64 * table.col_sums[j] as f64)).ln();
        }
    }
    mi.max(0.0)
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_with(pred, truth, NmiNormalization::Sqrt)
}

pub fn nmi_with(pred: &[usize], truth: &[usize], norm: NmiNormalization) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    if table.total == 0 {
        return Err(McaError::Empty("no samples to score".into()));
    }
    let n = table.total as f64;
    let hp = entropy(&table.row_sums, n);
    let ht = entropy(&table.col_sums, n);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let denom = match norm {
        NmiNormalization::Sqrt => (hp * ht).sqrt(),
        NmiNormalization::Arithmetic => 0.5 * (hp + ht),
    };
    Ok((mutual_information(&table) / denom).clamp(0.0, 1.0))
}

fn choose2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Hubert-Arabie adjusted Rand index by pair counting on the contingency table.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    if table.total == 0 {
        return Err(McaError::Empty("no samples to score".into()));
    }
    let index: f64 = table.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = table.row_sums.iter().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = table.col_sums.iter().map(|&c| choose2(c)).sum();
    let all_pairs = choose2(table.total);
    if all_pairs == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_rows * sum_cols / all_pairs;
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        // both partitions trivial in the same way (all singletons or one block)
        return Ok(if index == max_index { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn compute(pred: &[usize], truth: &[usize]) -> Result<Self> {
        Ok(Self {
            acc: accuracy_hungarian(pred, truth)?,
            nmi: nmi(pred, truth)?,
            ari: ari(pred, truth)?,
            n: pred.len(),
        })
    }

    pub fn to_csv(&self) -> String {
        format!("metric,value\nacc,{}\nnmi,{}\nari,{}\n", self.acc, self.nmi, self.ari)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>10}", "metric", "value")?;
        writeln!(f, "{:<8}{:>10.4}", "ACC", self.acc)?;
        writeln!(f, "{:<8}{:>10.4}", "NMI", self.nmi)?;
        write!(f, "{:<8}{:>10.4}", "ARI", self.ari)
    }
}
