//! Fuzzy clustering in the bottleneck space: label similarity, pseudo-label
//! refinement, membership and weight updates, centroid maintenance, and the
//! loss terms of the joint objective.
//!
//! Memberships `mu` and weights `wmat` are closed-form state; the losses that
//! use them treat them as constants when differentiating.

use rand::Rng as _;

use crate::error::{DafcError, Result};
use crate::rng::Rng;
use crate::tensor::{sq_dist, Tape, Tensor, Var};

/// Distances below this are clamped before the membership power law.
pub const DIST_FLOOR: f64 = 1e-12;
/// Clusters whose total membership mass falls below this are re-seeded.
pub const DEGENERATE_MASS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FuzzyState {
    /// `M x k` memberships.
    pub mu: Tensor,
    /// `M x k` adaptive weights.
    pub wmat: Tensor,
    pub m: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

fn check_fuzzifier(m: f64) -> Result<()> {
    if !(m > 1.0 && m.is_finite()) {
        return Err(DafcError::InvalidArgument(format!("fuzzifier m must exceed 1, got {m}")));
    }
    Ok(())
}

impl FuzzyState {
    /// Uniform memberships and weights.
    pub fn new(samples: usize, k: usize, m: f64, lambda1: f64, lambda2: f64) -> Result<Self> {
        check_fuzzifier(m)?;
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
            return Err(DafcError::InvalidArgument(format!(
                "lambda1 and lambda2 must be nonnegative, got {lambda1}, {lambda2}"
            )));
        }
        if samples == 0 || k == 0 {
            return Err(DafcError::InvalidArgument("fuzzy state needs samples and clusters".into()));
        }
        let u = 1.0 / k as f64;
        Ok(Self {
            mu: Tensor::full(&[samples, k], u),
            wmat: Tensor::full(&[samples, k], u),
            m,
            lambda1,
            lambda2,
        })
    }

    pub fn clusters(&self) -> usize {
        self.mu.shape()[1]
    }

    /// Membership rows of the given samples, flattened `B x k`.
    pub fn mu_rows(&self, rows: &[usize]) -> Tensor {
        self.mu.select_rows(rows)
    }

    /// Recomputes the memberships of `rows` from their distances (`B x k`).
    pub fn update_membership(&mut self, rows: &[usize], dist: &Tensor) -> Result<()> {
        let mu = update_membership(dist, self.m)?;
        let k = self.clusters();
        if mu.shape() != [rows.len(), k] {
            return Err(DafcError::ShapeMismatch {
                op: "update_membership",
                left: mu.shape().to_vec(),
                right: vec![rows.len(), k],
            });
        }
        for (r, &i) in rows.iter().enumerate() {
            self.mu.data_mut()[i * k..(i + 1) * k].copy_from_slice(mu.row(r));
        }
        Ok(())
    }

    /// Sets every row of `wmat` from the decoded centroids (`k x D`).
    pub fn update_weights(&mut self, decoded: &Tensor) -> Result<()> {
        let w = update_weights(decoded)?;
        if w.len() != self.clusters() {
            return Err(DafcError::ShapeMismatch {
                op: "update_weights",
                left: vec![w.len()],
                right: vec![self.clusters()],
            });
        }
        for row in self.wmat.data_mut().chunks_mut(w.len()) {
            row.copy_from_slice(&w);
        }
        Ok(())
    }
}

/// Cosine similarity between every pair of label rows.
pub fn similarity_matrix(y: &Tensor) -> Result<Tensor> {
    let (b, _) = y.rows_cols();
    let norms: Vec<f64> = (0..b).map(|i| y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(DafcError::ZeroRow(i));
    }
    let mut c = vec![0.0; b * b];
    for i in 0..b {
        c[i * b + i] = 1.0;
        for j in i + 1..b {
            let dot: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| a * b).sum();
            let v = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            c[i * b + j] = v;
            c[j * b + i] = v;
        }
    }
    Tensor::new(vec![b, b], c)
}

/// Each sample's target is the similarity-weighted sum of the labels whose
/// similarity to it exceeds `eps_r` (itself always included), normalized to
/// sum to one.
pub fn refine_pseudo_labels(y: &Tensor, c: &Tensor, eps_r: f64) -> Result<Tensor> {
    if !(eps_r > 0.0 && eps_r < 1.0) {
        return Err(DafcError::InvalidArgument(format!("threshold eps_r must lie in (0, 1), got {eps_r}")));
    }
    let (b, k) = y.rows_cols();
    if c.shape() != [b, b] {
        return Err(DafcError::ShapeMismatch {
            op: "refine_pseudo_labels",
            left: y.shape().to_vec(),
            right: c.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; b * k];
    for i in 0..b {
        let acc = &mut out[i * k..(i + 1) * k];
        acc.copy_from_slice(y.row(i));
        for j in 0..b {
            let s = c.data()[i * b + j];
            if j != i && s > eps_r {
                acc.iter_mut().zip(y.row(j)).for_each(|(a, v)| *a += s * v);
            }
        }
        let total: f64 = acc.iter().sum();
        if !(total > 0.0) {
            return Err(DafcError::ZeroRow(i));
        }
        acc.iter_mut().for_each(|a| *a /= total);
    }
    Tensor::new(vec![b, k], out)
}

/// Soft labels of one batch with their similarity matrix and refined targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub raw: Tensor,
    pub sim: Tensor,
    pub refined: Tensor,
    pub eps_r: f64,
}

impl PseudoLabelBatch {
    pub fn new(raw: Tensor, eps_r: f64) -> Result<Self> {
        let sim = similarity_matrix(&raw)?;
        let refined = refine_pseudo_labels(&raw, &sim, eps_r)?;
        Ok(Self {
            raw,
            sim,
            refined,
            eps_r,
        })
    }

    /// Mean absolute difference between refined and raw labels.
    pub fn mean_abs_delta(&self) -> f64 {
        let d = self.raw.data().iter().zip(self.refined.data());
        d.map(|(a, b)| (a - b).abs()).sum::<f64>() / self.raw.len() as f64
    }
}

/// Squared Euclidean distance from every row of `a` (`M x P`) to every row of `b` (`K x P`).
pub fn pairwise_sq_dists(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.rows_cols();
    let (k, pb) = b.rows_cols();
    if p != pb {
        return Err(DafcError::ShapeMismatch {
            op: "pairwise_sq_dists",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        out.extend((0..k).map(|j| sq_dist(a.row(i), b.row(j))));
    }
    Tensor::new(vec![m, k], out)
}

/// Membership power law `mu_ij ∝ l_ij^(-1/(m-1))`, rows normalized to one.
///
/// The closed form `(lambda1 / (m l_ij))^(1/(m-1))` differs from this only by
/// a per-row factor, which normalization removes; see [`raw_membership`].
pub fn update_membership(dist: &Tensor, m: f64) -> Result<Tensor> {
    check_fuzzifier(m)?;
    check_distances(dist)?;
    let (rows, k) = dist.rows_cols();
    let e = 1.0 / (m - 1.0);
    let mut out = Vec::with_capacity(rows * k);
    for i in 0..rows {
        let logs: Vec<f64> = dist.row(i).iter().map(|&l| -e * l.max(DIST_FLOOR).ln()).collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|v| (v - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|v| v / total));
    }
    Tensor::new(vec![rows, k], out)
}

/// Unnormalized memberships `(lambda1 / (m l_ij))^(1/(m-1))`.
pub fn raw_membership(dist: &Tensor, m: f64, lambda1: f64) -> Result<Tensor> {
    check_fuzzifier(m)?;
    check_distances(dist)?;
    if !(lambda1 > 0.0) {
        return Err(DafcError::InvalidArgument(format!("raw memberships need lambda1 > 0, got {lambda1}")));
    }
    let e = 1.0 / (m - 1.0);
    let data = dist.data().iter().map(|&l| (lambda1 / (m * l.max(DIST_FLOOR))).powf(e)).collect();
    Tensor::new(dist.shape().to_vec(), data)
}

fn check_distances(dist: &Tensor) -> Result<()> {
    if dist.rank() != 2 {
        return Err(DafcError::InvalidArgument(format!("distances must be M x k, got {:?}", dist.shape())));
    }
    if let Some(v) = dist.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(DafcError::InvalidArgument(format!("distances must be finite and nonnegative, found {v}")));
    }
    Ok(())
}

/// Cluster weights from decoded centroids (`k x D`): `s_j` is the mean of
/// `decode(c_j)`, the raw weight is `exp(2 s_j - 1)`, normalized over clusters.
pub fn update_weights(decoded: &Tensor) -> Result<Vec<f64>> {
    if !decoded.is_finite() {
        return Err(DafcError::NonFinite("decoded centroid".into()));
    }
    let (k, p) = decoded.rows_cols();
    let s: Vec<f64> = (0..k).map(|j| decoded.row(j).iter().sum::<f64>() / p as f64).collect();
    weights_from_means(&s)
}

/// Normalized `exp(2 s_j - 1)`.
pub fn weights_from_means(s: &[f64]) -> Result<Vec<f64>> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(DafcError::NonFinite("decoded centroid mean".into()));
    }
    let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = s.iter().map(|&v| (2.0 * (v - top)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|v| v / total).collect())
}

/// `lambda1 * sum_i (1 - sum_j mu_ij) + lambda2 * sum_ij w_ij ln w_ij` over `rows`.
pub fn entropy_rows(state: &FuzzyState, rows: &[usize]) -> Result<f64> {
    let k = state.clusters();
    let mut deficit = 0.0;
    let mut neg_entropy = 0.0;
    for &i in rows {
        deficit += 1.0 - state.mu.row(i).iter().sum::<f64>();
        for &w in state.wmat.row(i) {
            if !(w > 0.0) {
                return Err(DafcError::InvalidArgument(format!("weight {w} in row {i} is not positive")));
            }
            neg_entropy += w * w.ln();
        }
    }
    debug_assert!(k > 0);
    Ok(state.lambda1 * deficit + state.lambda2 * neg_entropy)
}

/// The weighted adaptive entropy over every sample.
pub fn entropy_term(state: &FuzzyState) -> Result<f64> {
    let rows: Vec<usize> = (0..state.mu.shape()[0]).collect();
    entropy_rows(state, &rows)
}

/// `mu^m`, elementwise.
pub fn powered(mu: &Tensor, m: f64) -> Vec<f64> {
    mu.data().iter().map(|v| v.powf(m)).collect()
}

/// Mean over the batch of `|x_i - xhat_i|^2 + beta |head_i - refined_i|^2`.
/// `x` and `xhat` are `B x ...`, `head` is `B x k`.
pub fn reconstruction_loss(tape: &mut Tape, x: Var, xhat: Var, head: Var, refined: &Tensor, beta: f64) -> Result<Var> {
    let b = tape.shape(x)[0];
    if tape.shape(head) != refined.shape() || tape.shape(head)[0] != b {
        return Err(DafcError::ShapeMismatch {
            op: "reconstruction_loss",
            left: tape.shape(head).to_vec(),
            right: refined.shape().to_vec(),
        });
    }
    let diff = tape.sub(xhat, x)?;
    let sq = tape.square(diff)?;
    let rec = tape.sum(sq);
    let target = tape.constant(refined.clone());
    let ldiff = tape.sub(head, target)?;
    let lsq = tape.square(ldiff)?;
    let lab = tape.sum(lsq);
    let lab = tape.scale(lab, beta);
    let total = tape.add(rec, lab)?;
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// `(sum_ij mu_ij^m |x_i - decode(c_j)|^2 + h) / B`, where `x` is `B x ...`,
/// `decoded` is `k x ...` and `h` the entropy of the batch rows.
pub fn clustering_loss(tape: &mut Tape, x: Var, decoded: Var, mu: &Tensor, m: f64, h: f64) -> Result<Var> {
    let b = tape.shape(x)[0];
    let k = tape.shape(decoded)[0];
    if mu.shape() != [b, k] {
        return Err(DafcError::ShapeMismatch {
            op: "clustering_loss",
            left: mu.shape().to_vec(),
            right: vec![b, k],
        });
    }
    let p = tape.value(x).len() / b;
    let xf = tape.reshape(x, &[b, p])?;
    let df = tape.reshape(decoded, &[k, p])?;
    let fit = tape.weighted_sq_dist(xf, df, &powered(mu, m))?;
    let h = tape.constant(Tensor::scalar(h));
    let fit = tape.add(fit, h)?;
    Ok(tape.scale(fit, 1.0 / b as f64))
}

/// Weighted means of `z` (`B x d`) under `mu^m` (`B x k`). Clusters with no
/// mass are re-seeded at the point farthest from the other centroids; their
/// indices are returned.
pub fn update_centroids(z: &Tensor, mu: &Tensor, m: f64, centroids: &mut Tensor) -> Result<Vec<usize>> {
    check_fuzzifier(m)?;
    let (b, d) = z.rows_cols();
    let (bm, k) = mu.rows_cols();
    if bm != b || centroids.shape() != [k, d] {
        return Err(DafcError::ShapeMismatch {
            op: "update_centroids",
            left: vec![b, d, bm, k],
            right: centroids.shape().to_vec(),
        });
    }
    let w = powered(mu, m);
    let mut next = vec![0.0; k * d];
    let mut mass = vec![0.0; k];
    for i in 0..b {
        for j in 0..k {
            let wij = w[i * k + j];
            mass[j] += wij;
            next[j * d..(j + 1) * d].iter_mut().zip(z.row(i)).for_each(|(c, v)| *c += wij * v);
        }
    }
    let mut degenerate = Vec::new();
    for j in 0..k {
        if mass[j] < DEGENERATE_MASS {
            degenerate.push(j);
            next[j * d..(j + 1) * d].copy_from_slice(centroids.row(j));
        } else {
            next[j * d..(j + 1) * d].iter_mut().for_each(|c| *c /= mass[j]);
        }
    }
    for &j in &degenerate {
        let others: Vec<usize> = (0..k).filter(|&o| o != j).collect();
        let far = (0..b)
            .map(|i| {
                let near = others
                    .iter()
                    .map(|&o| sq_dist(z.row(i), &next[o * d..(o + 1) * d]))
                    .fold(f64::INFINITY, f64::min);
                (i, near)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        next[j * d..(j + 1) * d].copy_from_slice(z.row(far.0));
        log::info!("centroid {j} had no membership mass; re-seeded at sample {}", far.0);
    }
    *centroids = Tensor::new(vec![k, d], next)?;
    Ok(degenerate)
}

/// Index of the largest entry of each row.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let (rows, _) = t.rows_cols();
    (0..rows)
        .map(|i| {
            t.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                .0
        })
        .collect()
}

/// Result of a fuzzy c-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct FcmResult {
    pub centroids: Tensor,
    pub mu: Tensor,
    pub objective: f64,
    pub iterations: usize,
}

/// k-means++ seeding: the first centre uniformly, the rest with probability
/// proportional to squared distance from the nearest chosen centre.
pub fn seed_centroids(points: &Tensor, k: usize, rng: &mut Rng) -> Result<Tensor> {
    let (n, d) = points.rows_cols();
    if k == 0 || k > n {
        return Err(DafcError::InvalidArgument(format!("cannot seed {k} centroids from {n} points")));
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut near: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = near.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in near.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, nd) in near.iter_mut().enumerate() {
            *nd = nd.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for &c in &chosen {
        data.extend_from_slice(points.row(c));
    }
    Tensor::new(vec![k, d], data)
}

/// One fuzzy c-means iteration: memberships from the current centroids, then
/// centroids from those memberships.
pub fn fcm_step(points: &Tensor, centroids: &mut Tensor, m: f64) -> Result<Tensor> {
    let dist = pairwise_sq_dists(points, centroids)?;
    let mu = update_membership(&dist, m)?;
    update_centroids(points, &mu, m, centroids)?;
    Ok(mu)
}

/// `sum_ij mu_ij^m |x_i - c_j|^2`.
pub fn fcm_objective(points: &Tensor, centroids: &Tensor, mu: &Tensor, m: f64) -> Result<f64> {
    let dist = pairwise_sq_dists(points, centroids)?;
    Ok(powered(mu, m).iter().zip(dist.data()).map(|(w, l)| w * l).sum())
}

/// Fuzzy c-means from `restarts` k-means++ seedings; keeps the run with the
/// lowest objective.
pub fn fcm(points: &Tensor, k: usize, m: f64, max_iter: usize, restarts: usize, rng: &mut Rng) -> Result<FcmResult> {
    let mut best: Option<FcmResult> = None;
    for _ in 0..restarts.max(1) {
        let mut c = seed_centroids(points, k, rng)?;
        let mut mu = Tensor::zeros(&[points.shape()[0], k]);
        let mut iterations = 0;
        for _ in 0..max_iter.max(1) {
            let before = c.clone();
            mu = fcm_step(points, &mut c, m)?;
            iterations += 1;
            let shift = before.data().iter().zip(c.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if shift < 1e-9 {
                break;
            }
        }
        let dist = pairwise_sq_dists(points, &c)?;
        mu = update_membership(&dist, m).unwrap_or(mu);
        let objective = fcm_objective(points, &c, &mu, m)?;
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(FcmResult {
                centroids: c,
                mu,
                objective,
                iterations,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}
