//! Clustering evaluation: Hungarian-matched accuracy, normalized mutual
//! information and adjusted Rand index.

use crate::error::{invalid, CrlcError, Result};

/// Cluster (or class) index per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition(Vec<usize>);

impl Partition {
    pub fn new(assignments: Vec<usize>) -> Result<Self> {
        if assignments.is_empty() {
            return Err(invalid("partition must cover at least one sample"));
        }
        Ok(Self(assignments))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn blocks(&self) -> usize {
        self.0.iter().max().map_or(0, |m| m + 1)
    }
}

/// Minimum-cost assignment for a square cost matrix (Kuhn-Munkres with
/// potentials, O(K^3)). Returns `perm` with row `i` assigned to column
/// `perm[i]`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if let Some(row) = cost.iter().find(|r| r.len() != n) {
        return Err(CrlcError::DimensionMismatch { expected: n, actual: row.len(), context: "square cost matrix" });
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("cost matrix entries must be finite"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based potentials; column 0 is the virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    Ok(perm)
}

fn check_lengths(pred: &Partition, truth: &Partition) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(CrlcError::DimensionMismatch {
            expected: truth.len(),
            actual: pred.len(),
            context: "partition lengths",
        });
    }
    Ok(())
}

/// Square contingency table padded with zeros; `table[p][t]` counts samples in
/// predicted block `p` and true block `t`.
fn contingency(pred: &Partition, truth: &Partition) -> Vec<Vec<usize>> {
    let k = pred.blocks().max(truth.blocks());
    let mut table = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
        table[p][t] += 1;
    }
    table
}

/// Fraction of samples correctly classified under the best one-to-one
/// cluster-to-class matching.
pub fn clustering_accuracy(pred: &Partition, truth: &Partition) -> Result<f64> {
    check_lengths(pred, truth)?;
    let table = contingency(pred, truth);
    let cost: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|&c| -(c as f64)).collect()).collect();
    let perm = hungarian(&cost)?;
    let matched: usize = perm.iter().enumerate().map(|(p, &t)| table[p][t]).sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two entropies;
/// `1` when both partitions are a single block.
pub fn nmi(pred: &Partition, truth: &Partition) -> Result<f64> {
    check_lengths(pred, truth)?;
    let n = pred.len() as f64;
    let table = contingency(pred, truth);
    let k = table.len();
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..k).map(|t| table.iter().map(|r| r[t]).sum()).collect();
    let h_pred = entropy(rows.iter().copied(), n);
    let h_truth = entropy(cols.iter().copied(), n);
    if h_pred == 0.0 && h_truth == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (p, row) in table.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rows[p] as f64 * cols[t] as f64)).ln();
            }
        }
    }
    let denom = 0.5 * (h_pred + h_truth);
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn pairs(c: usize) -> f64 {
    let c = c as f64;
    c * (c - 1.0) / 2.0
}

/// Adjusted Rand index via pair counts of the contingency table.
pub fn ari(pred: &Partition, truth: &Partition) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.len() < 2 {
        return Err(invalid("adjusted Rand index needs at least two samples"));
    }
    let table = contingency(pred, truth);
    let k = table.len();
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_pred: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let sum_truth: f64 = (0..k).map(|t| pairs(table.iter().map(|r| r[t]).sum())).sum();
    let expected = sum_pred * sum_truth / pairs(pred.len());
    let max = 0.5 * (sum_pred + sum_truth);
    if max == expected {
        // both partitions trivial in the same way (one block, or all singletons)
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
