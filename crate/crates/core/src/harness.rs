//! The training loop and everything around it: configuration, evaluation,
//! reports, parameter sweeps and embedding export.
//!
//! Ground-truth labels never reach [`Trainer`]; it is built from an unlabeled
//! copy of the dataset. Only [`evaluate_model`] reads labels.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::data::{self, augment, AugmentPolicy, Dataset, DatasetSpec};
use crate::error::{DafcError, Result};
use crate::fuzzy::{
    self, argmax_rows, clustering_loss, entropy_rows, pairwise_sq_dists, reconstruction_loss, update_centroids,
    FuzzyState, PseudoLabelBatch,
};
use crate::metrics::{self, Scores};
use crate::network::{
    build_model, epoch_batches, load_checkpoint, pretrain_autoencoder, save_checkpoint, ArchConfig, ModelParams,
    PretrainConfig, Session,
};
use crate::rng::{self, Rng};
use crate::tensor::{Mode, RmsProp, Tensor, Var};

/// Network architecture: a named preset sized to the data, or a full config.
#[derive(Clone, Debug, PartialEq)]
pub enum ArchChoice {
    Tiny,
    Reference,
    Linear,
    Inline(Box<ArchConfig>),
}

impl FromStr for ArchChoice {
    type Err = DafcError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tiny" => Ok(Self::Tiny),
            "reference" => Ok(Self::Reference),
            "linear" => Ok(Self::Linear),
            t if t.starts_with('{') => Ok(Self::Inline(Box::new(serde_json::from_str(t)?))),
            other => Err(DafcError::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

impl fmt::Display for ArchChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tiny => f.write_str("tiny"),
            Self::Reference => f.write_str("reference"),
            Self::Linear => f.write_str("linear"),
            Self::Inline(cfg) => f.write_str(&serde_json::to_string(cfg).map_err(|_| fmt::Error)?),
        }
    }
}

/// Everything a run needs. Serialized as one `key = value` per line; `#`
/// starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub data_dir: Option<PathBuf>,
    pub arch: ArchChoice,
    /// Cluster count; defaults to the dataset's class count.
    pub clusters: Option<usize>,
    pub dropout: Option<f64>,
    pub latent_dim: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub m: f64,
    pub eps_r: f64,
    pub beta: f64,
    pub lr: f64,
    /// Learning rate for autoencoder pretraining; defaults to `lr`.
    pub pretrain_lr: Option<f64>,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub max_epochs: usize,
    /// Caps the batches per epoch; defaults to one full pass.
    pub max_iter: Option<usize>,
    pub augment: AugmentPolicy,
    pub normalize: bool,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Blobs(data::BlobSpec::default()),
            data_dir: None,
            arch: ArchChoice::Tiny,
            clusters: None,
            dropout: None,
            latent_dim: None,
            lambda1: 0.5,
            lambda2: 0.5,
            m: 2.0,
            eps_r: 0.9,
            beta: 1.0,
            lr: 1e-4,
            pretrain_lr: None,
            batch_size: 256,
            pretrain_epochs: 10,
            max_epochs: 30,
            max_iter: None,
            augment: AugmentPolicy::None,
            normalize: false,
            seed: 0,
            out_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| DafcError::Config(format!("bad value '{v}' for key '{key}'")))
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.is_empty() || v == "none" || v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), ToString::to_string)
}

impl TrainConfig {
    pub const KEYS: [&'static str; 22] = [
        "dataset",
        "data_dir",
        "arch",
        "clusters",
        "dropout",
        "latent_dim",
        "lambda1",
        "lambda2",
        "m",
        "eps_r",
        "beta",
        "lr",
        "pretrain_lr",
        "batch_size",
        "pretrain_epochs",
        "max_epochs",
        "max_iter",
        "augment",
        "normalize",
        "seed",
        "out_dir",
        "threads",
    ];

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key.trim() {
            "dataset" => self.dataset = v.parse()?,
            "data_dir" => self.data_dir = parse_opt::<String>(key, v)?.map(PathBuf::from),
            "arch" => self.arch = v.parse()?,
            "clusters" | "k" => self.clusters = parse_opt(key, v)?,
            "dropout" => self.dropout = parse_opt(key, v)?,
            "latent_dim" => self.latent_dim = parse_opt(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "eps_r" => self.eps_r = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse_opt(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "max_iter" => self.max_iter = parse_opt(key, v)?,
            "augment" => self.augment = v.parse()?,
            "normalize" => self.normalize = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = parse_opt::<String>(key, v)?.map(PathBuf::from),
            "threads" => {
                let n: usize = parse(key, v)?;
                if n != 1 {
                    return Err(DafcError::Config("only single-threaded execution is supported".into()));
                }
            }
            other => return Err(DafcError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_flat(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DafcError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| DafcError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_flat(&fs::read_to_string(path)?)
    }

    /// Every field as `(key, value)` text, in schema order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dataset", self.dataset.to_string()),
            ("data_dir", self.data_dir.as_ref().map_or("auto".into(), |p| p.display().to_string())),
            ("arch", self.arch.to_string()),
            ("clusters", opt_str(&self.clusters)),
            ("dropout", opt_str(&self.dropout)),
            ("latent_dim", opt_str(&self.latent_dim)),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("m", self.m.to_string()),
            ("eps_r", self.eps_r.to_string()),
            ("beta", self.beta.to_string()),
            ("lr", self.lr.to_string()),
            ("pretrain_lr", opt_str(&self.pretrain_lr)),
            ("batch_size", self.batch_size.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("max_iter", opt_str(&self.max_iter)),
            ("augment", self.augment.to_string()),
            ("normalize", self.normalize.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.as_ref().map_or("auto".into(), |p| p.display().to_string())),
        ]
    }

    pub fn to_flat(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            bad.push("lambda1 and lambda2 must be nonnegative".to_string());
        }
        if !(self.m > 1.0 && self.m.is_finite()) {
            bad.push(format!("m = {} must exceed 1", self.m));
        }
        if !(self.eps_r > 0.0 && self.eps_r < 1.0) {
            bad.push(format!("eps_r = {} must lie in (0, 1)", self.eps_r));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bad.push(format!("beta = {} must be nonnegative", self.beta));
        }
        for (name, lr) in [("lr", Some(self.lr)), ("pretrain_lr", self.pretrain_lr)] {
            if let Some(lr) = lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    bad.push(format!("{name} = {lr} must be positive"));
                }
            }
        }
        if self.batch_size < 2 {
            bad.push(format!("batch_size = {} must be at least 2", self.batch_size));
        }
        if self.max_epochs == 0 {
            bad.push("max_epochs must be at least 1".to_string());
        }
        if self.max_iter == Some(0) {
            bad.push("max_iter must be positive".to_string());
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                bad.push(format!("dropout = {p} outside [0, 1)"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DafcError::Config(bad.join("; ")))
        }
    }

    /// The architecture for samples of `shape` and `k` clusters.
    pub fn arch_config(&self, shape: [usize; 3], k: usize) -> Result<ArchConfig> {
        let mut a = match &self.arch {
            ArchChoice::Tiny => ArchConfig::tiny(shape, k),
            ArchChoice::Reference => ArchConfig::reference(k),
            ArchChoice::Linear => ArchConfig::linear(shape, k),
            ArchChoice::Inline(a) => (**a).clone(),
        };
        if let Some(p) = self.dropout {
            a.dropout = p;
        }
        if let Some(d) = self.latent_dim {
            a.latent_dim = d;
        }
        if a.input_shape != shape {
            return Err(DafcError::Config(format!(
                "architecture expects {:?} samples, dataset has {shape:?}",
                a.input_shape
            )));
        }
        if a.clusters != k {
            return Err(DafcError::Config(format!(
                "architecture has {} clusters, config asks for {k}",
                a.clusters
            )));
        }
        a.validate()?;
        Ok(a)
    }
}

/// Loads the configured dataset and applies normalization if requested.
pub fn prepare_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let root = data::data_dir(cfg.data_dir.as_deref());
    let ds = data::load(&cfg.dataset, &root)?;
    if cfg.normalize {
        let (means, stds) = data::channel_stats(&ds);
        data::normalize(&ds, &means, &stds)
    } else {
        Ok(ds)
    }
}

fn default_clusters(cfg: &TrainConfig, ds: &Dataset) -> Result<usize> {
    if let Some(k) = cfg.clusters {
        return Ok(k);
    }
    match &cfg.dataset {
        DatasetSpec::Blobs(b) => Ok(b.k),
        DatasetSpec::Mnist { digits, .. } => Ok(digits.len()),
        DatasetSpec::Idx { .. } => ds
            .truth_labels()
            .and_then(|t| t.iter().max().map(|m| m + 1))
            .ok_or_else(|| DafcError::Config("clusters must be set for unlabeled data".into())),
    }
}

/// Losses and refinement statistics of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub l_rec: f64,
    pub l_clu: f64,
    pub total: f64,
    pub refine_delta: f64,
}

/// Batch-size-weighted means over an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLosses {
    pub l_rec: f64,
    pub l_clu: f64,
    pub total: f64,
    pub refine_delta: f64,
    pub batches: usize,
}

/// The alternating optimizer. Holds the model, the fuzzy state and the
/// unlabeled training images.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelParams,
    pub state: FuzzyState,
    opt: RmsProp,
    base: Tensor,
    /// The current epoch's training set (originals, plus transforms when augmenting).
    pub images: Tensor,
    dropout_rng: Rng,
    augment_rng: Rng,
    pub epoch: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Per-batch constants of the joint objective.
pub struct LossTerms<'a> {
    /// Memberships of the batch rows.
    pub mu: &'a Tensor,
    pub m: f64,
    /// Entropy of the batch rows; no gradient flows through it.
    pub entropy: f64,
    pub eps_r: f64,
    pub beta: f64,
}

/// Tape handles of one forward pass of the joint objective.
pub struct JointForward {
    pub x: Var,
    pub z: Var,
    pub xhat: Var,
    pub head: Var,
    pub decoded: Var,
    pub l_rec: Var,
    pub l_clu: Var,
    pub total: Var,
    pub labels: PseudoLabelBatch,
}

/// Records `L_Rec + L_F_clu` for the batch `x`. Centroids are decoded first,
/// in eval mode, so they see the normalization statistics from before this
/// batch. `refined` replaces the refined pseudo-labels when given.
pub fn joint_forward(
    model: &mut ModelParams,
    s: &mut Session,
    x: Tensor,
    terms: &LossTerms<'_>,
    refined: Option<&Tensor>,
    rng: &mut Rng,
) -> Result<JointForward> {
    let cv = s.input(model.centroids.detached());
    let decoded = model.decode_on(s, cv, Mode::Eval, rng)?;
    let xv = s.input(x);
    let z = model.encode_on(s, xv, Mode::Train, rng)?;
    let xhat = model.decode_on(s, z, Mode::Train, rng)?;
    let head = model.head_on(s, z)?;
    let mut labels = PseudoLabelBatch::new(s.value(head).detached(), terms.eps_r)?;
    if let Some(r) = refined {
        labels.refined = r.clone();
    }
    let l_rec = reconstruction_loss(&mut s.tape, xv, xhat, head, &labels.refined, terms.beta)?;
    let l_clu = clustering_loss(&mut s.tape, xv, decoded, terms.mu, terms.m, terms.entropy)?;
    let total = s.tape.add(l_rec, l_clu)?;
    Ok(JointForward {
        x: xv,
        z,
        xhat,
        head,
        decoded,
        l_rec,
        l_clu,
        total,
        labels,
    })
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let unlabeled = data.without_labels();
        let k = default_clusters(cfg, data)?;
        let arch = cfg.arch_config(unlabeled.sample_shape(), k)?;
        let model = build_model(&arch, &mut rng::stream(cfg.seed, rng::stream::INIT))?;
        Self::with_model(cfg, &unlabeled, model)
    }

    /// Uses a caller-supplied network, for example one with fixed weights.
    pub fn with_model(cfg: &TrainConfig, data: &Dataset, model: ModelParams) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(DafcError::InvalidArgument("cannot train on an empty dataset".into()));
        }
        let images = data.images.detached();
        let rows = match cfg.augment {
            AugmentPolicy::None => data.len(),
            _ => 2 * data.len(),
        };
        let state = FuzzyState::new(rows, model.cfg.clusters, cfg.m, cfg.lambda1, cfg.lambda2)?;
        let mut t = Self {
            cfg: cfg.clone(),
            model,
            state,
            opt: RmsProp::new(cfg.lr)?,
            base: images.clone(),
            images,
            dropout_rng: rng::stream(cfg.seed, rng::stream::DROPOUT),
            augment_rng: rng::stream(cfg.seed, rng::stream::AUGMENT),
            epoch: 0,
            means: data.means.clone(),
            stds: data.stds.clone(),
        };
        t.refresh_training_set();
        Ok(t)
    }

    fn refresh_training_set(&mut self) {
        if self.cfg.augment == AugmentPolicy::None {
            return;
        }
        let aug = augment(&self.base, self.cfg.augment, &mut self.augment_rng);
        let mut data = self.base.data().to_vec();
        data.extend_from_slice(aug.data());
        let mut shape = self.base.shape().to_vec();
        shape[0] *= 2;
        self.images = Tensor::new(shape, data).expect("doubled batch");
    }

    /// The original (unaugmented) images.
    pub fn base_images(&self) -> &Tensor {
        &self.base
    }

    /// Autoencoder pretraining followed by cluster initialization. Returns the
    /// pretraining loss trajectory (empty when `pretrain_epochs` is 0).
    /// The squared-gradient averages built up during pretraining carry over
    /// into the joint phase; only the step size changes.
    pub fn pretrain(&mut self) -> Result<Vec<f64>> {
        let mut traj = Vec::new();
        if self.cfg.pretrain_epochs > 0 {
            let mut opt = RmsProp::new(self.cfg.pretrain_lr.unwrap_or(self.cfg.lr))?;
            let pc = PretrainConfig {
                epochs: self.cfg.pretrain_epochs,
                batch_size: self.cfg.batch_size,
                seed: self.cfg.seed,
            };
            traj = pretrain_autoencoder(&mut self.model, &self.base, &pc, &mut opt)?;
            opt.lr = self.cfg.lr;
            self.opt = opt;
        }
        self.init_clusters()?;
        Ok(traj)
    }

    /// Fuzzy c-means on the eval-mode codes of every original image seeds the
    /// centroids; the head is then pointed at them.
    pub fn init_clusters(&mut self) -> Result<()> {
        let z = self.model.embed(&self.base)?;
        let k = self.model.cfg.clusters;
        let mut r = rng::stream(self.cfg.seed, rng::stream::CLUSTER_INIT);
        let res = fuzzy::fcm(&z, k, self.cfg.m, 100, 5, &mut r)?;
        self.model.centroids = res.centroids;
        let d = pairwise_sq_dists(&z, &self.model.centroids)?;
        let (n, k) = d.rows_cols();
        let mean_min = (0..n)
            .map(|i| d.row(i).iter().copied().fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / n as f64;
        let variance = (mean_min / self.model.cfg.latent_dim as f64).max(1e-12);
        debug_assert!(k > 0);
        self.model.init_head_from_centroids(variance)
    }

    fn diverged(&self, batch: usize, term: &str) -> DafcError {
        log::error!(
            "non-finite {term} at epoch {}, batch {batch}; centroids finite: {}, parameters finite: {}",
            self.epoch,
            self.model.centroids.is_finite(),
            self.model.is_finite()
        );
        DafcError::TrainingDiverged {
            epoch: self.epoch,
            batch,
            term: term.to_string(),
        }
    }

    /// One alternation on the samples `idx` of the current training set:
    /// similarity and refinement, losses, membership, weight and centroid
    /// updates, then one gradient step on the network.
    pub fn step(&mut self, idx: &[usize], batch_no: usize) -> Result<StepRecord> {
        let x = self.images.select_rows(idx);
        let b = idx.len();
        let p = x.len() / b;
        let mu = self.state.mu_rows(idx);
        let h = entropy_rows(&self.state, idx)?;
        let mut s = Session::new();
        let terms = LossTerms {
            mu: &mu,
            m: self.state.m,
            entropy: h,
            eps_r: self.cfg.eps_r,
            beta: self.cfg.beta,
        };
        let f = joint_forward(&mut self.model, &mut s, x, &terms, None, &mut self.dropout_rng).map_err(|e| match e {
            DafcError::ZeroRow(_) => self.diverged(batch_no, "pseudo-labels"),
            other => other,
        })?;
        let rec = StepRecord {
            l_rec: s.value(f.l_rec).data()[0],
            l_clu: s.value(f.l_clu).data()[0],
            total: s.value(f.total).data()[0],
            refine_delta: f.labels.mean_abs_delta(),
        };
        for (term, v) in [("L_Rec", rec.l_rec), ("L_F_clu", rec.l_clu), ("L", rec.total)] {
            if !v.is_finite() {
                return Err(self.diverged(batch_no, term));
            }
        }
        let (xv, z, dec, total) = (f.x, f.z, f.decoded, f.total);

        let k = self.model.cfg.clusters;
        let xf = s.value(xv).detached().reshape(&[b, p])?;
        let decoded = s.value(dec).detached().reshape(&[k, p])?;
        let dist = pairwise_sq_dists(&xf, &decoded)?;
        self.state.update_membership(idx, &dist)?;
        self.state.update_weights(&decoded)?;
        let zt = s.value(z).detached();
        update_centroids(&zt, &self.state.mu_rows(idx), self.state.m, &mut self.model.centroids)?;
        if !self.model.centroids.is_finite() {
            return Err(self.diverged(batch_no, "centroids"));
        }

        s.backward(total, &mut self.model)?;
        self.opt.step(self.model.params_mut().iter_mut())?;
        self.model.zero_grad();
        if !self.model.is_finite() {
            return Err(self.diverged(batch_no, "parameters"));
        }
        Ok(rec)
    }

    /// One pass over the training set (or `max_iter` batches).
    pub fn run_epoch(&mut self) -> Result<EpochLosses> {
        self.epoch += 1;
        if self.epoch > 1 {
            self.refresh_training_set();
        }
        let n = self.images.shape()[0];
        let mut plan = epoch_batches(n, self.cfg.batch_size, self.cfg.seed, self.epoch as u64)?;
        if let Some(cap) = self.cfg.max_iter {
            plan.truncate(cap);
        }
        let mut acc = EpochLosses {
            l_rec: 0.0,
            l_clu: 0.0,
            total: 0.0,
            refine_delta: 0.0,
            batches: plan.len(),
        };
        let mut seen = 0.0;
        for (bi, idx) in plan.iter().enumerate() {
            let r = self.step(idx, bi)?;
            let w = idx.len() as f64;
            acc.l_rec += w * r.l_rec;
            acc.l_clu += w * r.l_clu;
            acc.total += w * r.total;
            acc.refine_delta += w * r.refine_delta;
            seen += w;
        }
        acc.l_rec /= seen;
        acc.l_clu /= seen;
        acc.total /= seen;
        acc.refine_delta /= seen;
        Ok(acc)
    }

    /// Writes the model, fuzzy state and normalization to a checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let hyper = Tensor::new(
            vec![5],
            vec![self.state.m, self.state.lambda1, self.state.lambda2, self.cfg.eps_r, self.cfg.beta],
        )?;
        let c = self.means.len();
        let means = Tensor::new(vec![c], self.means.clone())?;
        let stds = Tensor::new(vec![c], self.stds.clone())?;
        save_checkpoint(
            path,
            &self.model,
            &[
                ("fuzzy.mu", &self.state.mu),
                ("fuzzy.wmat", &self.state.wmat),
                ("fuzzy.hyper", &hyper),
                ("data.means", &means),
                ("data.stds", &stds),
            ],
        )
    }
}

/// Acc, ARI, NMI and the test error `1 - Acc`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
    pub test_error: f64,
}

impl From<Scores> for Evaluation {
    fn from(s: Scores) -> Self {
        Self {
            acc: s.acc,
            ari: s.ari,
            nmi: s.nmi,
            test_error: s.test_error(),
        }
    }
}

/// Eval-mode codes and head probabilities of every image.
pub fn predict(model: &ModelParams, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let z = model.embed(images)?;
    let y = model.cluster_head(&z)?;
    Ok((z, y))
}

/// Hard cluster assignments: argmax of the head.
pub fn assign(model: &ModelParams, images: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict(model, images)?.1))
}

/// Scores the head's assignments against the dataset's truth labels.
pub fn evaluate_model(model: &ModelParams, ds: &Dataset) -> Result<Evaluation> {
    let truth = ds
        .truth_labels()
        .ok_or_else(|| DafcError::Labels(format!("dataset '{}' has no truth labels", ds.name)))?;
    let pred = assign(model, &ds.images)?;
    Ok(metrics::score(&pred, truth)?.into())
}

/// A loaded checkpoint with the fuzzy state and normalization saved beside it.
pub struct Checkpoint {
    pub model: ModelParams,
    pub mu: Option<Tensor>,
    pub wmat: Option<Tensor>,
    pub means: Option<Vec<f64>>,
    pub stds: Option<Vec<f64>>,
}

pub fn load_run_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (model, mut extras) = load_checkpoint(path)?;
    Ok(Checkpoint {
        model,
        mu: extras.remove("fuzzy.mu"),
        wmat: extras.remove("fuzzy.wmat"),
        means: extras.remove("data.means").map(Tensor::into_data),
        stds: extras.remove("data.stds").map(Tensor::into_data),
    })
}

impl Checkpoint {
    /// Applies the normalization the model was trained with.
    pub fn prepare(&self, ds: &Dataset) -> Result<Dataset> {
        match (&self.means, &self.stds) {
            (Some(m), Some(s)) if m.iter().any(|v| *v != 0.0) || s.iter().any(|v| *v != 1.0) => {
                data::normalize(ds, m, s)
            }
            _ => Ok(ds.clone()),
        }
    }
}

/// Loads a checkpoint and scores it on `ds`.
pub fn evaluate(checkpoint: &Path, ds: &Dataset) -> Result<Evaluation> {
    let ck = load_run_checkpoint(checkpoint)?;
    evaluate_model(&ck.model, &ck.prepare(ds)?)
}

/// One row of a run report. Epoch 0 is the state after pretraining and has
/// no training losses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_rec: Option<f64>,
    pub l_clu: Option<f64>,
    pub l_total: Option<f64>,
    pub acc: Option<f64>,
    pub ari: Option<f64>,
    pub nmi: Option<f64>,
    pub test_error: Option<f64>,
    /// Running maxima of Acc, ARI and NMI up to this epoch.
    pub best_acc: Option<f64>,
    pub best_ari: Option<f64>,
    pub best_nmi: Option<f64>,
    pub refine_delta: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
    pub pretrain_losses: Vec<f64>,
    /// Epoch with the highest Acc, and its scores.
    pub best_epoch: Option<usize>,
    pub best: Option<Evaluation>,
    pub config: BTreeMap<String, String>,
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "epoch",
    "l_rec",
    "l_clu",
    "l_total",
    "acc",
    "ari",
    "nmi",
    "test_error",
    "best_acc",
    "best_ari",
    "best_nmi",
    "refine_delta",
    "wall_ms",
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl RunReport {
    pub fn last(&self) -> &EpochRow {
        self.rows.last().expect("reports always have a row")
    }

    /// The report with wall-clock columns zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.rows.iter_mut().for_each(|row| row.wall_ms = 0);
        r
    }

    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells = [
                r.epoch.to_string(),
                cell(r.l_rec),
                cell(r.l_clu),
                cell(r.l_total),
                cell(r.acc),
                cell(r.ari),
                cell(r.nmi),
                cell(r.test_error),
                cell(r.best_acc),
                cell(r.best_ari),
                cell(r.best_nmi),
                cell(r.refine_delta),
                r.wall_ms.to_string(),
            ];
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            best_epoch: Option<usize>,
            best: Option<Evaluation>,
            last: &'a EpochRow,
            pretrain_losses: &'a [f64],
            config: &'a BTreeMap<String, String>,
        }
        Ok(serde_json::to_string_pretty(&Summary {
            best_epoch: self.best_epoch,
            best: self.best,
            last: self.last(),
            pretrain_losses: &self.pretrain_losses,
            config: &self.config,
        })?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        Ok(())
    }
}

fn running_max(prev: Option<f64>, v: Option<f64>) -> Option<f64> {
    match (prev, v) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    }
}

fn make_row(epoch: usize, losses: Option<EpochLosses>, eval: Option<Evaluation>, prev: Option<&EpochRow>, ms: u128) -> EpochRow {
    let acc = eval.map(|e| e.acc);
    let ari = eval.map(|e| e.ari);
    let nmi = eval.map(|e| e.nmi);
    EpochRow {
        epoch,
        l_rec: losses.map(|l| l.l_rec),
        l_clu: losses.map(|l| l.l_clu),
        l_total: losses.map(|l| l.total),
        acc,
        ari,
        nmi,
        test_error: eval.map(|e| e.test_error),
        best_acc: running_max(prev.and_then(|p| p.best_acc), acc),
        best_ari: running_max(prev.and_then(|p| p.best_ari), ari),
        best_nmi: running_max(prev.and_then(|p| p.best_nmi), nmi),
        refine_delta: losses.map(|l| l.refine_delta),
        wall_ms: ms,
    }
}

/// Full run on an already loaded dataset: pretraining, cluster
/// initialization, then `max_epochs` alternating epochs with an evaluation
/// after each. Metrics are left empty when the dataset has no labels.
pub fn train_on(cfg: &TrainConfig, ds: &Dataset) -> Result<(RunReport, Trainer)> {
    let mut trainer = Trainer::new(cfg, ds)?;
    let score = |t: &Trainer| -> Result<Option<Evaluation>> {
        match ds.truth_labels() {
            Some(_) => evaluate_model(&t.model, ds).map(Some),
            None => Ok(None),
        }
    };
    let start = Instant::now();
    let pretrain_losses = trainer.pretrain()?;
    let mut rows = vec![make_row(0, None, score(&trainer)?, None, start.elapsed().as_millis())];
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let losses = trainer.run_epoch()?;
        let eval = score(&trainer)?;
        log::info!(
            "epoch {epoch}: L_Rec {:.6} L_F_clu {:.6} L {:.6} acc {}",
            losses.l_rec,
            losses.l_clu,
            losses.total,
            eval.map_or("-".into(), |e| format!("{:.4}", e.acc))
        );
        let row = make_row(epoch, Some(losses), eval, rows.last(), t0.elapsed().as_millis());
        rows.push(row);
    }
    let best_epoch = rows
        .iter()
        .filter(|r| r.acc.is_some())
        .fold(None::<&EpochRow>, |b, r| match b {
            Some(b) if b.acc >= r.acc => Some(b),
            _ => Some(r),
        });
    let best = best_epoch.map(|r| Evaluation {
        acc: r.acc.unwrap_or(0.0),
        ari: r.ari.unwrap_or(0.0),
        nmi: r.nmi.unwrap_or(0.0),
        test_error: r.test_error.unwrap_or(1.0),
    });
    let report = RunReport {
        best_epoch: best_epoch.map(|r| r.epoch),
        best,
        rows,
        pretrain_losses,
        config: cfg.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    if let Some(dir) = &cfg.out_dir {
        report.write(dir)?;
        trainer.save(&dir.join("model.ckpt"))?;
        fs::write(dir.join("config.txt"), cfg.to_flat())?;
    }
    Ok((report, trainer))
}

/// Loads the configured dataset and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    let ds = prepare_dataset(cfg)?;
    Ok(train_on(cfg, &ds)?.0)
}

/// Values swept for each hyperparameter; an empty list keeps the base value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub eps_r: Vec<f64>,
    pub m: Vec<f64>,
}

impl SweepGrid {
    /// Parses `key = v1, v2, ...` lines for `lambda1`, `lambda2`, `eps_r` and `m`.
    pub fn from_flat(text: &str) -> Result<Self> {
        let mut g = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DafcError::Config(format!("expected key = values, got '{line}'")))?;
            let vals = v
                .split(',')
                .map(|s| parse::<f64>(k.trim(), s.trim()))
                .collect::<Result<Vec<_>>>()?;
            match k.trim() {
                "lambda1" => g.lambda1 = vals,
                "lambda2" => g.lambda2 = vals,
                "eps_r" => g.eps_r = vals,
                "m" => g.m = vals,
                other => return Err(DafcError::Config(format!("cannot sweep '{other}'"))),
            }
        }
        Ok(g)
    }

    /// Every grid point as `(lambda1, lambda2, eps_r, m)`.
    pub fn points(&self, base: &TrainConfig) -> Vec<[f64; 4]> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let mut out = Vec::new();
        for &l1 in &or(&self.lambda1, base.lambda1) {
            for &l2 in &or(&self.lambda2, base.lambda2) {
                for &e in &or(&self.eps_r, base.eps_r) {
                    for &m in &or(&self.m, base.m) {
                        out.push([l1, l2, e, m]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub eps_r: f64,
    pub m: f64,
    pub outcome: std::result::Result<RunReport, String>,
}

/// Runs every grid point independently with the base seed. A failing cell
/// records its error and the sweep continues.
pub fn sweep(cfg: &TrainConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    let points = grid.points(cfg);
    if points.is_empty() {
        return Err(DafcError::Config("sweep grid is empty".into()));
    }
    let ds = prepare_dataset(cfg)?;
    sweep_on(cfg, grid, &ds)
}

pub fn sweep_on(cfg: &TrainConfig, grid: &SweepGrid, ds: &Dataset) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for [lambda1, lambda2, eps_r, m] in grid.points(cfg) {
        let mut c = cfg.clone();
        c.lambda1 = lambda1;
        c.lambda2 = lambda2;
        c.eps_r = eps_r;
        c.m = m;
        c.out_dir = None;
        let outcome = c
            .validate()
            .and_then(|_| train_on(&c, ds))
            .map(|(r, _)| r)
            .map_err(|e| e.to_string());
        if let Err(e) = &outcome {
            log::warn!("sweep cell lambda1={lambda1} lambda2={lambda2} eps_r={eps_r} m={m} failed: {e}");
        }
        cells.push(SweepCell {
            lambda1,
            lambda2,
            eps_r,
            m,
            outcome,
        });
    }
    Ok(cells)
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "lambda1",
    "lambda2",
    "eps_r",
    "m",
    "status",
    "acc",
    "ari",
    "nmi",
    "test_error",
    "l_total",
    "refine_delta",
    "error",
];

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    for c in cells {
        let key = format!("{},{},{},{}", c.lambda1, c.lambda2, c.eps_r, c.m);
        match &c.outcome {
            Ok(r) => {
                let last = r.last();
                let _ = writeln!(
                    out,
                    "{key},ok,{},{},{},{},{},{},",
                    cell(last.acc),
                    cell(last.ari),
                    cell(last.nmi),
                    cell(last.test_error),
                    cell(last.l_total),
                    cell(last.refine_delta)
                );
            }
            Err(e) => {
                let msg = e.replace([',', '\n'], ";");
                let _ = writeln!(out, "{key},error,,,,,,,{msg}");
            }
        }
    }
    out
}

/// Writes `index, truth, z_0..z_{d-1}, p_0..p_{k-1}` for every sample;
/// `truth` is -1 when the dataset has no labels.
pub fn export_model_embeddings(model: &ModelParams, ds: &Dataset, path: &Path) -> Result<()> {
    let (z, y) = predict(model, &ds.images)?;
    let (d, k) = (z.shape()[1], y.shape()[1]);
    let mut out = String::from("index,truth");
    (0..d).for_each(|j| {
        let _ = write!(out, ",z{j}");
    });
    (0..k).for_each(|j| {
        let _ = write!(out, ",p{j}");
    });
    out.push('\n');
    for i in 0..ds.len() {
        let truth = ds.truth_labels().map_or(-1, |t| t[i] as i64);
        let _ = write!(out, "{i},{truth}");
        for v in z.row(i).iter().chain(y.row(i)) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a checkpoint and exports the embeddings of `ds`.
pub fn export_embeddings(checkpoint: &Path, ds: &Dataset, path: &Path) -> Result<()> {
    let ck = load_run_checkpoint(checkpoint)?;
    export_model_embeddings(&ck.model, &ck.prepare(ds)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_config_round_trip() {
        let text = "# blobs run\ndataset = blobs:k=3,n=20,dim=9,sigma=1,separation=10,seed=4\n\
                    lambda1 = 0.1\neps_r=0.99  # tight\nmax_epochs = 3\nclusters = 3\n";
        let cfg = TrainConfig::from_flat(text).unwrap();
        assert_eq!(cfg.lambda1, 0.1);
        assert_eq!(cfg.eps_r, 0.99);
        assert_eq!(cfg.clusters, Some(3));
        assert_eq!(TrainConfig::from_flat(&cfg.to_flat()).unwrap(), cfg);
        assert_eq!(cfg.pairs().len() + 1, TrainConfig::KEYS.len());
    }

    #[test]
    fn config_errors() {
        assert!(TrainConfig::from_flat("bogus = 1").is_err());
        assert!(TrainConfig::from_flat("m = 1").is_err());
        assert!(TrainConfig::from_flat("eps_r = 1.5").is_err());
        assert!(TrainConfig::from_flat("max_epochs = 0").is_err());
        assert!(TrainConfig::from_flat("lambda1").is_err());
        let err = TrainConfig::from_flat("m = 0.5\nbatch_size = 1").unwrap_err().to_string();
        assert!(err.contains("m = 0.5") && err.contains("batch_size"), "{err}");
    }

    #[test]
    fn inline_arch_round_trip() {
        let a = ArchConfig::tiny([1, 4, 4], 4);
        let choice = ArchChoice::Inline(Box::new(a.clone()));
        let back: ArchChoice = choice.to_string().parse().unwrap();
        assert_eq!(back, choice);
        let mut cfg = TrainConfig::default();
        cfg.arch = back;
        assert_eq!(cfg.arch_config([1, 4, 4], 4).unwrap(), a);
        assert!(cfg.arch_config([1, 5, 5], 4).is_err());
    }

    #[test]
    fn grid_points() {
        let g = SweepGrid::from_flat("lambda1 = 0.1, 0.5\neps_r = 0.7,0.9,0.99").unwrap();
        let base = TrainConfig::default();
        let pts = g.points(&base);
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| p[1] == 0.5 && p[3] == 2.0));
        assert_eq!(SweepGrid::default().points(&base).len(), 1);
        assert!(SweepGrid::from_flat("beta = 1").is_err());
    }

    #[test]
    fn acc_plus_test_error_is_one() {
        for i in 0..=1000 {
            let acc = i as f64 / 1000.0;
            let e = Evaluation::from(Scores { acc, ari: 0.0, nmi: 0.0 });
            assert_eq!(e.acc + e.test_error, 1.0);
        }
    }
}
