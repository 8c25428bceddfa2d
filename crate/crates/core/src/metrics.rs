//! External clustering quality: accuracy under optimal cluster-to-class
//! matching, Adjusted Rand Index and Normalized Mutual Information.
//!
//! All three are computed from the contingency table of a [`LabelPair`] and
//! are invariant to any relabeling of the predicted clusters.

use serde::{Deserialize, Serialize};

use crate::error::{DafcError, Result};

/// Predicted cluster ids and ground-truth class ids for the same samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelPair {
    predicted: Vec<usize>,
    truth: Vec<usize>,
    k_pred: usize,
    k_truth: usize,
}

impl LabelPair {
    /// Label ranges are inferred as `max + 1`.
    pub fn new(predicted: &[usize], truth: &[usize]) -> Result<Self> {
        let kp = predicted.iter().max().map_or(0, |m| m + 1);
        let kt = truth.iter().max().map_or(0, |m| m + 1);
        Self::with_ranges(predicted, truth, kp, kt)
    }

    pub fn with_ranges(predicted: &[usize], truth: &[usize], k_pred: usize, k_truth: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(DafcError::Labels(format!(
                "length mismatch: {} predicted vs {} truth",
                predicted.len(),
                truth.len()
            )));
        }
        if predicted.is_empty() {
            return Err(DafcError::Labels("at least one sample is required".into()));
        }
        if let Some((i, &p)) = predicted.iter().enumerate().find(|(_, &p)| p >= k_pred) {
            return Err(DafcError::Labels(format!("predicted label {p} at {i} outside [0, {k_pred})")));
        }
        if let Some((i, &t)) = truth.iter().enumerate().find(|(_, &t)| t >= k_truth) {
            return Err(DafcError::Labels(format!("truth label {t} at {i} outside [0, {k_truth})")));
        }
        Ok(Self {
            predicted: predicted.to_vec(),
            truth: truth.to_vec(),
            k_pred,
            k_truth,
        })
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }
}

/// Cross-tabulation `n_ij = |{s : pred(s) = i, truth(s) = j}|` with marginals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contingency {
    pub table: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub total: u64,
}

pub fn contingency(pair: &LabelPair) -> Contingency {
    let mut table = vec![vec![0u64; pair.k_truth]; pair.k_pred];
    for (&p, &t) in pair.predicted.iter().zip(&pair.truth) {
        table[p][t] += 1;
    }
    let row_sums = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums = (0..pair.k_truth).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Contingency {
        table,
        row_sums,
        col_sums,
        total: pair.len() as u64,
    }
}

/// Minimum-cost assignment of rows to distinct columns (`rows <= cols`).
///
/// Shortest augmenting path formulation with dual potentials, `O(r^2 c)`.
/// Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols, got {n} x {m}");
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
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
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// Fraction of samples covered by the best one-to-one cluster/class matching.
pub fn accuracy(pair: &LabelPair) -> f64 {
    let c = contingency(pair);
    let (kp, kt) = (pair.k_pred, pair.k_truth);
    let matched: u64 = if kp <= kt {
        let cost: Vec<Vec<f64>> = c.table.iter().map(|r| r.iter().map(|&x| -(x as f64)).collect()).collect();
        hungarian(&cost).iter().enumerate().map(|(i, &j)| c.table[i][j]).sum()
    } else {
        let cost: Vec<Vec<f64>> = (0..kt)
            .map(|j| (0..kp).map(|i| -(c.table[i][j] as f64)).collect())
            .collect();
        hungarian(&cost).iter().enumerate().map(|(j, &i)| c.table[i][j]).sum()
    };
    matched as f64 / c.total as f64
}

fn choose2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand Index from the contingency table.
///
/// When the chance-adjustment denominator vanishes (both partitions a single
/// cluster, or both all singletons) the partitions agree trivially and the
/// index is 1.
pub fn ari(pair: &LabelPair) -> Result<f64> {
    if pair.len() < 2 {
        return Err(DafcError::Labels("ARI needs at least two samples".into()));
    }
    let c = contingency(pair);
    let sum_ij: f64 = c.table.iter().flatten().map(|&x| choose2(x)).sum();
    let sum_a: f64 = c.row_sums.iter().map(|&x| choose2(x)).sum();
    let sum_b: f64 = c.col_sums.iter().map(|&x| choose2(x)).sum();
    let expected = sum_a * sum_b / choose2(c.total);
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        log::debug!("ARI denominator is zero; returning 1.0");
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / denom)
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(X;Y) / (H(X) + H(Y))` with plug-in frequencies and natural logs.
/// Returns 0 when both partitions are constant.
pub fn nmi(pair: &LabelPair) -> f64 {
    let c = contingency(pair);
    let n = c.total as f64;
    let hx = entropy(&c.row_sums, n);
    let hy = entropy(&c.col_sums, n);
    if hx + hy == 0.0 {
        log::debug!("both partitions constant; NMI defined as 0");
        return 0.0;
    }
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let pxy = nij as f64 / n;
            mi += pxy * (nij as f64 * n / (c.row_sums[i] as f64 * c.col_sums[j] as f64)).ln();
        }
    }
    (2.0 * mi / (hx + hy)).clamp(0.0, 1.0)
}

/// Acc, ARI and NMI for one labelling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
}

impl Scores {
    pub fn test_error(&self) -> f64 {
        1.0 - self.acc
    }
}

/// Scores a hard clustering against truth labels; ARI falls back to 1 for a
/// single sample.
pub fn score(predicted: &[usize], truth: &[usize]) -> Result<Scores> {
    let pair = LabelPair::new(predicted, truth)?;
    Ok(Scores {
        acc: accuracy(&pair),
        ari: if pair.len() < 2 { 1.0 } else { ari(&pair)? },
        nmi: nmi(&pair),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(p: &[usize], t: &[usize]) -> LabelPair {
        LabelPair::new(p, t).unwrap()
    }

    #[test]
    fn contingency_examples() {
        let c = contingency(&pair(&[0, 0, 1], &[0, 0, 1]));
        assert_eq!(c.table, vec![vec![2, 0], vec![0, 1]]);
        let c = contingency(&pair(&[0, 1, 0, 1], &[0, 0, 1, 1]));
        assert_eq!(c.table, vec![vec![1, 1], vec![1, 1]]);
        assert_eq!(c.row_sums, vec![2, 2]);
        assert_eq!(c.col_sums, vec![2, 2]);
        let c = contingency(&pair(&[0], &[0]));
        assert_eq!(c.table, vec![vec![1]]);
        assert_eq!(c.total, 1);
    }

    #[test]
    fn label_pair_errors() {
        assert!(LabelPair::new(&[0, 1], &[0]).is_err());
        assert!(LabelPair::new(&[], &[]).is_err());
        assert!(LabelPair::with_ranges(&[0, 3], &[0, 1], 3, 2).is_err());
        assert!(LabelPair::with_ranges(&[0, 1], &[0, 2], 2, 2).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&pair(&[2, 2, 0, 1, 1], &[0, 0, 1, 2, 2])), 1.0);
        assert_eq!(accuracy(&pair(&[0, 0, 0, 0], &[0, 0, 1, 1])), 0.5);
        let p = LabelPair::with_ranges(&[0, 1, 2, 2], &[0, 0, 1, 1], 3, 2).unwrap();
        assert_eq!(accuracy(&p), 0.75);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&pair(&[0, 1, 1, 2], &[0, 1, 1, 2])).unwrap(), 1.0);
        assert_eq!(ari(&pair(&[0, 0, 1, 1], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert!((ari(&pair(&[0, 1, 0, 1], &[0, 0, 1, 1])).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(ari(&pair(&[0, 0, 0], &[0, 0, 0])).unwrap(), 1.0);
        assert!(ari(&pair(&[0], &[0])).is_err());
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&pair(&[0, 0, 1, 1], &[1, 1, 0, 0])) - 1.0).abs() < 1e-15);
        assert!(nmi(&pair(&[0, 0, 1, 1], &[0, 1, 0, 1])).abs() < 1e-15);
        // brute-force plug-in over the table [[2,1],[0,1]] / 4
        let ln = f64::ln;
        let (hp, ht) = (-(0.75 * ln(0.75) + 0.25 * ln(0.25)), ln(2.0));
        let i = 0.5 * ln(0.5 / (0.75 * 0.5)) + 0.25 * ln(0.25 / (0.75 * 0.5)) + 0.25 * ln(0.25 / (0.25 * 0.5));
        let expected = 2.0 * i / (hp + ht);
        let got = nmi(&pair(&[0, 0, 0, 1], &[0, 0, 1, 1]));
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.3437).abs() < 1e-4);
        assert_eq!(nmi(&pair(&[0, 0], &[0, 0])), 0.0);
    }

    #[test]
    fn hungarian_small() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&cost);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 5.0);
        let rect = vec![vec![1.0, 0.0, 3.0]];
        assert_eq!(hungarian(&rect), vec![1]);
    }

    #[test]
    fn scores_test_error() {
        let s = score(&[0, 0, 1, 1], &[0, 0, 1, 0]).unwrap();
        assert_eq!(s.test_error() + s.acc, 1.0);
    }
}
