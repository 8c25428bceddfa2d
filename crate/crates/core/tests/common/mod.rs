//! Independent reference implementations and shared property checks.
#![allow(dead_code)]

use dafc::data::{self, BatchPlan, Dataset};
use dafc::fuzzy;
use dafc::metrics;
use dafc::network::{build_model, ArchConfig};
use dafc::rng;
use dafc::tensor::{Mode, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Accuracy by trying every one-to-one relabeling of the predicted clusters.
pub fn brute_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let k = pred.iter().chain(truth).max().map_or(1, |m| m + 1);
    permutations(k)
        .iter()
        .map(|perm| pred.iter().zip(truth).filter(|(p, t)| perm[**p] == **t).count())
        .max()
        .unwrap() as f64
        / pred.len() as f64
}

/// ARI from the four pair counts over all unordered sample pairs.
pub fn brute_ari(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let (mut ss, mut sd, mut ds, mut dd) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let den = (dd + sd) * (sd + ss) + (dd + ds) * (ds + ss);
    if den == 0.0 {
        return 1.0;
    }
    2.0 * (dd * ss - sd * ds) / den
}

/// `2 I / (H_p + H_t)` with probabilities estimated by counting samples.
pub fn brute_nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let prob = |f: &dyn Fn(usize) -> bool| (0..pred.len()).filter(|&i| f(i)).count() as f64 / n;
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let px: Vec<f64> = (0..kp).map(|a| prob(&|i| pred[i] == a)).collect();
    let py: Vec<f64> = (0..kt).map(|b| prob(&|i| truth[i] == b)).collect();
    let h = |p: &[f64]| -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    let (hx, hy) = (h(&px), h(&py));
    if hx + hy == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for a in 0..kp {
        for b in 0..kt {
            let pab = prob(&|i| pred[i] == a && truth[i] == b);
            if pab > 0.0 {
                mi += pab * (pab / (px[a] * py[b])).ln();
            }
        }
    }
    (2.0 * mi / (hx + hy)).clamp(0.0, 1.0)
}

/// One textbook fuzzy c-means iteration: memberships from the current
/// centroids, then centroids as `mu^m`-weighted means.
pub fn reference_fcm_iteration(points: &[Vec<f64>], centroids: &[Vec<f64>], m: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mu: Vec<Vec<f64>> = points
        .iter()
        .map(|x| {
            let d: Vec<f64> = centroids.iter().map(|c| sq(x, c)).collect();
            (0..d.len())
                .map(|j| {
                    let s: f64 = d.iter().map(|dk| (d[j] / dk).powf(1.0 / (m - 1.0))).sum();
                    1.0 / s
                })
                .collect()
        })
        .collect();
    let dim = points[0].len();
    let new_c = (0..centroids.len())
        .map(|j| {
            let w: Vec<f64> = mu.iter().map(|r| r[j].powf(m)).collect();
            let tw: f64 = w.iter().sum();
            (0..dim)
                .map(|t| points.iter().zip(&w).map(|(x, wi)| wi * x[t]).sum::<f64>() / tw)
                .collect()
        })
        .collect();
    (mu, new_c)
}

/// Lloyd's k-means from k-means++ style farthest-point seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize) -> Vec<usize> {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut cent = vec![points[0].clone()];
    while cent.len() < k {
        let far = points
            .iter()
            .max_by(|a, b| {
                let da = cent.iter().map(|c| sq(a, c)).fold(f64::INFINITY, f64::min);
                let db = cent.iter().map(|c| sq(b, c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        cent.push(far.clone());
    }
    let mut assign = vec![0; points.len()];
    for _ in 0..iters {
        for (i, x) in points.iter().enumerate() {
            assign[i] = (0..k).min_by(|&a, &b| sq(x, &cent[a]).total_cmp(&sq(x, &cent[b]))).unwrap();
        }
        for (j, c) in cent.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for t in 0..c.len() {
                c[t] = members.iter().map(|p| p[t]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    assign
}

pub fn rows(ds: &Dataset) -> Vec<Vec<f64>> {
    let p = ds.images.len() / ds.len();
    ds.images.data().chunks(p).map(<[f64]>::to_vec).collect()
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), TestCaseError> {
    if (a - b).abs() <= tol {
        Ok(())
    } else {
        Err(TestCaseError::fail(format!("{what}: {a} vs {b}")))
    }
}

fn on_simplex(t: &Tensor, tol: f64, what: &str) -> Result<(), TestCaseError> {
    let (r, _) = t.rows_cols();
    for i in 0..r {
        let row = t.row(i);
        if row.iter().any(|v| !(*v >= 0.0 && *v <= 1.0 + tol)) {
            return Err(TestCaseError::fail(format!("{what}: row {i} has entry outside [0,1]: {row:?}")));
        }
        close(row.iter().sum(), 1.0, tol, what)?;
    }
    Ok(())
}

fn matrix(max_r: usize, max_c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_r, 1..=max_c).prop_flat_map(move |(r, c)| {
        prop::collection::vec(lo..hi, r * c).prop_map(move |d| tensor(r, c, d))
    })
}

fn label_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize)> {
    (2usize..=50, 1usize..=6, 1usize..=6).prop_flat_map(|(n, kp, kt)| {
        (
            prop::collection::vec(0..kp, n),
            prop::collection::vec(0..kt, n),
            Just(kp),
        )
    })
}

pub type Check = fn(u32) -> Result<(), String>;

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

pub fn head_rows_on_simplex(cases: u32) -> Result<(), String> {
    let model = build_model(&ArchConfig::tiny([1, 4, 4], 4), &mut rng::seeded(3)).unwrap();
    run(cases, prop::collection::vec(-50.0..50.0f64, 16 * 3), |d| {
        let y = model.cluster_head(&tensor(3, 16, d)).unwrap();
        on_simplex(&y, 1e-9, "head")
    })
}

pub fn similarity_symmetric(cases: u32) -> Result<(), String> {
    run(cases, matrix(8, 5, 0.01, 1.0), |y| {
        let c = fuzzy::similarity_matrix(&y).unwrap();
        let b = y.shape()[0];
        for i in 0..b {
            close(c.data()[i * b + i], 1.0, 1e-9, "diagonal")?;
            for j in 0..b {
                let v = c.data()[i * b + j];
                prop_assert!((-1.0..=1.0).contains(&v));
                close(v, c.data()[j * b + i], 1e-12, "symmetry")?;
            }
        }
        Ok(())
    })
}

pub fn refinement_on_simplex(cases: u32) -> Result<(), String> {
    run(cases, (matrix(8, 5, 0.01, 1.0), 0.05..0.95f64), |(raw, eps)| {
        let (r, _) = raw.rows_cols();
        let sums: Vec<f64> = (0..r).map(|i| raw.row(i).iter().sum()).collect();
        let y = tensor(r, raw.shape()[1], raw.data().iter().enumerate().map(|(i, v)| v / sums[i / raw.shape()[1]]).collect());
        let batch = fuzzy::PseudoLabelBatch::new(y, eps).unwrap();
        on_simplex(&batch.refined, 1e-9, "refined")
    })
}

pub fn refinement_recovers_raw_near_one(cases: u32) -> Result<(), String> {
    run(cases, matrix(8, 5, 0.01, 1.0), |raw| {
        // Distinct rows have cosine similarity below 1 - 1e-9 with overwhelming probability.
        let c = fuzzy::similarity_matrix(&raw).unwrap();
        let b = raw.shape()[0];
        let max_off = (0..b * b).filter(|i| i / b != i % b).map(|i| c.data()[i]).fold(-1.0, f64::max);
        prop_assume!(max_off < 1.0 - 1e-9);
        let refined = fuzzy::refine_pseudo_labels(&raw, &c, 1.0 - 1e-9).unwrap();
        for i in 0..b {
            let s: f64 = raw.row(i).iter().sum();
            for (a, r) in refined.row(i).iter().zip(raw.row(i)) {
                close(*a, r / s, 1e-12, "eps_r -> 1")?;
            }
        }
        Ok(())
    })
}

pub fn membership_properties(cases: u32) -> Result<(), String> {
    run(cases, (matrix(6, 5, 1e-3, 10.0), 1.1..4.0f64, 0.1..100.0f64), |(dist, m, scale)| {
        let mu = fuzzy::update_membership(&dist, m).unwrap();
        on_simplex(&mu, 1e-9, "membership")?;
        let scaled = tensor(dist.shape()[0], dist.shape()[1], dist.data().iter().map(|v| v * scale).collect());
        let mu2 = fuzzy::update_membership(&scaled, m).unwrap();
        for (a, b) in mu.data().iter().zip(mu2.data()) {
            close(*a, *b, 1e-9, "scale invariance")?;
        }
        let raw = fuzzy::raw_membership(&dist, m, 0.5).unwrap();
        let mut bumped = dist.clone();
        bumped.data_mut()[0] *= 1.5;
        let raw2 = fuzzy::raw_membership(&bumped, m, 0.5).unwrap();
        prop_assert!(raw2.data()[0] < raw.data()[0], "raw membership must fall as distance grows");
        Ok(())
    })
}

pub fn weights_rows_identical(cases: u32) -> Result<(), String> {
    run(cases, (matrix(5, 6, -1.0, 1.0), 1usize..6), |(decoded, rows)| {
        prop_assume!(decoded.shape()[0] >= 2);
        let k = decoded.shape()[0];
        let mut state = fuzzy::FuzzyState::new(rows, k, 2.0, 0.5, 0.5).unwrap();
        state.update_weights(&decoded).unwrap();
        on_simplex(&state.wmat, 1e-9, "weights")?;
        for i in 1..rows {
            prop_assert_eq!(state.wmat.row(i), state.wmat.row(0));
        }
        Ok(())
    })
}

pub fn metrics_match_oracles(cases: u32) -> Result<(), String> {
    run(cases, label_pair(), |(p, t, _)| {
        let s = metrics::score(&p, &t).unwrap();
        close(s.acc, brute_accuracy(&p, &t), 1e-12, "accuracy")?;
        close(s.ari, brute_ari(&p, &t), 1e-12, "ari")?;
        close(s.nmi, brute_nmi(&p, &t), 1e-12, "nmi")?;
        Ok(())
    })
}

pub fn metrics_permutation_invariant(cases: u32) -> Result<(), String> {
    let strategy = label_pair().prop_flat_map(|(p, t, kp)| {
        (Just(p), Just(t), Just((0..kp).collect::<Vec<_>>()).prop_shuffle())
    });
    run(cases, strategy, |(p, t, perm)| {
        let q: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
        let (a, b) = (metrics::score(&p, &t).unwrap(), metrics::score(&q, &t).unwrap());
        close(a.acc, b.acc, 1e-12, "acc")?;
        close(a.ari, b.ari, 1e-12, "ari")?;
        close(a.nmi, b.nmi, 1e-12, "nmi")?;
        // One-to-one matching can always keep the fullest contingency cell;
        // a constant prediction recovers exactly the largest class.
        let kt = t.iter().max().unwrap() + 1;
        let cell = (0..=*p.iter().max().unwrap())
            .flat_map(|i| (0..kt).map(move |j| (i, j)))
            .map(|(i, j)| p.iter().zip(&t).filter(|&(&x, &y)| x == i && y == j).count())
            .max()
            .unwrap();
        prop_assert!(a.acc + 1e-12 >= cell as f64 / t.len() as f64);
        let largest = (0..kt).map(|c| t.iter().filter(|&&x| x == c).count()).max().unwrap();
        let constant = metrics::score(&vec![0; t.len()], &t).unwrap().acc;
        close(constant, largest as f64 / t.len() as f64, 1e-12, "constant prediction")?;
        Ok(())
    })
}

pub fn batches_partition(cases: u32) -> Result<(), String> {
    let strategy = (1usize..300).prop_flat_map(|n| (Just(n), 1..=n.min(64), any::<u64>(), 0u64..50));
    run(cases, strategy, |(n, bs, seed, epoch)| {
        let plan = BatchPlan {
            batch_size: bs,
            seed,
            epoch,
            drop_last: false,
        };
        let b = data::batches(n, &plan).unwrap();
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(data::batches(n, &plan).unwrap(), b);
        Ok(())
    })
}

pub fn augment_keeps_shape_and_mass(cases: u32) -> Result<(), String> {
    run(cases, (prop::collection::vec(0.0..1.0f64, 2 * 6 * 6), any::<u64>()), |(inner, seed)| {
        // Two 10x10 images whose support is the central 6x6 block survive any shift of at most 2.
        let mut img = vec![0.0; 2 * 100];
        for s in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    img[s * 100 + (y + 2) * 10 + x + 2] = inner[s * 36 + y * 6 + x];
                }
            }
        }
        let t = Tensor::new(vec![2, 1, 10, 10], img).unwrap();
        let out = data::augment(&t, data::AugmentPolicy::Shift, &mut rng::seeded(seed));
        prop_assert_eq!(out.shape(), t.shape());
        for s in 0..2 {
            let before: f64 = t.data()[s * 100..(s + 1) * 100].iter().sum();
            let after: f64 = out.data()[s * 100..(s + 1) * 100].iter().sum();
            close(before, after, 1e-9, "mass")?;
        }
        Ok(())
    })
}

pub fn idx_round_trip(cases: u32) -> Result<(), String> {
    run(cases, (1usize..5, 1usize..6, 1usize..6), |(n, h, w)| {
        let pixels: Vec<u8> = (0..n * h * w).map(|i| (i * 37 % 256) as u8).collect();
        let bytes = data::encode_idx_images(n, h, w, &pixels);
        let t = data::parse_idx_images(&bytes).unwrap();
        prop_assert_eq!(t.shape(), &[n, 1, h, w]);
        let back: Vec<u8> = t.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        prop_assert_eq!(data::encode_idx_images(n, h, w, &back), bytes);
        Ok(())
    })
}

pub fn autoencoder_preserves_shape(cases: u32) -> Result<(), String> {
    let strategy = (1usize..3, 2usize..4, 1usize..3, 0usize..3, 2usize..5, 1usize..4);
    run(cases, strategy, |(c, half, blocks, hidden, k, batch)| {
        let side = 2 * half;
        let mut cfg = ArchConfig::tiny([c, side, side], k);
        cfg.blocks.truncate(blocks);
        cfg.hidden = vec![8; hidden];
        prop_assume!(cfg.validate().is_ok());
        let mut model = build_model(&cfg, &mut rng::seeded(batch as u64)).unwrap();
        let x = Tensor::full(&[batch, c, side, side], 0.3);
        let mut r = rng::seeded(0);
        let z = model.encode(&x, Mode::Eval, &mut r).unwrap();
        prop_assert_eq!(z.shape(), &[batch, cfg.latent_dim]);
        let xh = model.decode(&z, Mode::Eval, &mut r).unwrap();
        prop_assert_eq!(xh.shape(), x.shape());
        let again = model.embed(&x).unwrap();
        prop_assert_eq!(again.data(), z.data());
        Ok(())
    })
}

/// Every randomized invariant, by name.
pub fn invariant_suite() -> Vec<(&'static str, Check)> {
    vec![
        ("head rows on simplex", head_rows_on_simplex as Check),
        ("similarity symmetric, unit diagonal", similarity_symmetric),
        ("refined rows on simplex", refinement_on_simplex),
        ("refinement identity as eps_r -> 1", refinement_recovers_raw_near_one),
        ("membership simplex, scaling, monotone", membership_properties),
        ("weight rows identical", weights_rows_identical),
        ("metrics equal brute-force oracles", metrics_match_oracles),
        ("metrics permutation invariant", metrics_permutation_invariant),
        ("batches partition indices", batches_partition),
        ("augment keeps shape and mass", augment_keeps_shape_and_mass),
        ("idx round trip", idx_round_trip),
        ("autoencoder shape and determinism", autoencoder_preserves_shape),
    ]
}
