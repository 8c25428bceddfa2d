//! Datasets: IDX image files, synthetic Gaussian blobs, normalization,
//! augmentation and seeded batching.
//!
//! Ground-truth labels live beside the images but are only reachable through
//! [`Dataset::truth_labels`]; the training loop never calls it.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DafcError, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "DAFC_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `N x C x H x W`.
    pub images: Tensor,
    truth: Option<Vec<usize>>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, truth: Option<Vec<usize>>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(DafcError::InvalidArgument(format!(
                "dataset images must be N x C x H x W, got {:?}",
                images.shape()
            )));
        }
        if let Some(t) = &truth {
            if t.len() != images.shape()[0] {
                return Err(DafcError::Labels(format!(
                    "{} labels for {} images",
                    t.len(),
                    images.shape()[0]
                )));
            }
        }
        let c = images.shape()[1];
        Ok(Self {
            name: name.into(),
            images,
            truth,
            means: vec![0.0; c],
            stds: vec![1.0; c],
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `C x H x W` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn truth_labels(&self) -> Option<&[usize]> {
        self.truth.as_deref()
    }

    /// Copy of the dataset with the truth labels dropped.
    pub fn without_labels(&self) -> Self {
        Self {
            truth: None,
            ..self.clone()
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor {
        self.images.select_rows(idx)
    }

    /// Keeps the given samples, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            images: self.images.select_rows(idx),
            truth: self.truth.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
            means: self.means.clone(),
            stds: self.stds.clone(),
        }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DafcError::Idx(format!("truncated header at byte {at}")))
}

/// Parses an IDX image file (`0x00000803`) into `N x 1 x H x W` pixels in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DafcError::Idx(format!("bad image magic {magic:#010x}")));
    }
    let (n, h, w) = (
        read_u32(bytes, 4)? as usize,
        read_u32(bytes, 8)? as usize,
        read_u32(bytes, 12)? as usize,
    );
    let need = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(DafcError::Idx(format!(
            "truncated payload: {} bytes for {n} images of {h}x{w}",
            payload.len()
        )));
    }
    let data = payload[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data).map_err(|e| DafcError::Idx(e.to_string()))
}

/// Parses an IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DafcError::Idx(format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(DafcError::Idx(format!("truncated payload: {} bytes for {n} labels", payload.len())));
    }
    Ok(payload[..n].iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = labels_path.map(|p| fs::read(p).map_err(DafcError::from).and_then(|b| parse_idx_labels(&b)));
    let labels = labels.transpose()?;
    if let Some(l) = &labels {
        if l.len() != images.shape()[0] {
            return Err(DafcError::Idx(format!(
                "{} images but {} labels",
                images.shape()[0],
                l.len()
            )));
        }
    }
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, images, labels)
}

/// Encodes raw bytes as an IDX image file.
pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * h * w);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)?.write_all(bytes)?;
    Ok(())
}

/// Parameters of the synthetic Gaussian-blob dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub k: usize,
    pub n_per_cluster: usize,
    pub dim: usize,
    pub sigma: f64,
    pub separation: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            k: 4,
            n_per_cluster: 500,
            dim: 16,
            sigma: 1.0,
            separation: 10.0,
            seed: 0,
        }
    }
}

/// Splits `dim` into the most square `h x w` grid.
fn grid_for(dim: usize) -> (usize, usize) {
    let mut h = (dim as f64).sqrt() as usize;
    while h > 1 && dim % h != 0 {
        h -= 1;
    }
    (h.max(1), dim / h.max(1))
}

/// `k` isotropic Gaussian clusters whose centres are pairwise `separation`
/// apart (scaled basis vectors), mapped into `[0, 1]` by one global affine
/// squash so relative geometry is preserved. Samples are laid out as
/// `1 x h x w` images with `h * w = dim`.
pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let BlobSpec {
        k,
        n_per_cluster,
        dim,
        sigma,
        separation,
        seed,
    } = *spec;
    if k < 2 {
        return Err(DafcError::InvalidArgument(format!("blobs need k >= 2, got {k}")));
    }
    if k > dim {
        return Err(DafcError::InvalidArgument(format!(
            "blobs place centres on basis vectors, so k ({k}) must not exceed dim ({dim})"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) || !(separation >= 0.0 && separation.is_finite()) {
        return Err(DafcError::InvalidArgument(format!(
            "blob sigma must be positive and separation nonnegative, got {sigma}, {separation}"
        )));
    }
    if n_per_cluster == 0 {
        return Err(DafcError::InvalidArgument("n_per_cluster must be positive".into()));
    }
    let mut rng = rng::stream(seed, rng::stream::DATA);
    let normal = Normal::new(0.0, sigma).expect("sigma checked");
    let offset = separation / std::f64::consts::SQRT_2;
    let n = k * n_per_cluster;
    let mut raw = Vec::with_capacity(n * dim);
    let mut truth = Vec::with_capacity(n);
    for c in 0..k {
        for _ in 0..n_per_cluster {
            for d in 0..dim {
                let centre = if d == c { offset } else { 0.0 };
                raw.push(centre + normal.sample(&mut rng));
            }
            truth.push(c);
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    raw.iter_mut().for_each(|v| *v = (*v - lo) / span);
    let (h, w) = grid_for(dim);
    let images = Tensor::new(vec![n, 1, h, w], raw)?;
    Dataset::new(format!("blobs-k{k}-d{dim}"), images, Some(truth))
}

/// Augmentation family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentPolicy {
    None,
    Shift,
    ShiftFlip,
}

impl FromStr for AugmentPolicy {
    type Err = DafcError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "shift" => Ok(Self::Shift),
            "shift+flip" => Ok(Self::ShiftFlip),
            other => Err(DafcError::InvalidArgument(format!("unknown augmentation policy '{other}'"))),
        }
    }
}

impl fmt::Display for AugmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Shift => "shift",
            Self::ShiftFlip => "shift+flip",
        })
    }
}

/// Translates one `C x H x W` image by `dx` columns and `dy` rows with zero fill.
pub fn shift_image(img: &[f64], shape: [usize; 3], dx: isize, dy: isize) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

fn flip_horizontal(img: &mut [f64], shape: [usize; 3]) {
    let w = shape[2];
    img.chunks_mut(w).for_each(<[f64]>::reverse);
}

/// Maximum translation applied by the shift policies.
pub const MAX_SHIFT: i64 = 2;

/// Returns the transformed copy `x'` of a batch `x` (`N x C x H x W`).
pub fn augment(x: &Tensor, policy: AugmentPolicy, rng: &mut Rng) -> Tensor {
    let s = x.shape();
    let shape = [s[1], s[2], s[3]];
    let per = shape.iter().product::<usize>();
    let mut out = Vec::with_capacity(x.len());
    for img in x.data().chunks(per) {
        let mut t = match policy {
            AugmentPolicy::None => img.to_vec(),
            AugmentPolicy::Shift | AugmentPolicy::ShiftFlip => {
                let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT) as isize;
                let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT) as isize;
                shift_image(img, shape, dx, dy)
            }
        };
        if policy == AugmentPolicy::ShiftFlip && rng.random_bool(0.5) {
            flip_horizontal(&mut t, shape);
        }
        out.extend(t);
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Originals followed by their transforms: the dataset union `{x} ∪ {x'}`.
pub fn augmented_union(ds: &Dataset, policy: AugmentPolicy, rng: &mut Rng) -> Dataset {
    let aug = augment(&ds.images, policy, rng);
    let mut data = ds.images.data().to_vec();
    data.extend_from_slice(aug.data());
    let mut shape = ds.images.shape().to_vec();
    shape[0] *= 2;
    let truth = ds.truth.as_ref().map(|t| t.iter().chain(t).copied().collect());
    Dataset {
        name: format!("{}+aug", ds.name),
        images: Tensor::new(shape, data).expect("doubled shape"),
        truth,
        means: ds.means.clone(),
        stds: ds.stds.clone(),
    }
}

/// Per-channel mean and (population) standard deviation.
pub fn channel_stats(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let [c, h, w] = ds.sample_shape();
    let plane = h * w;
    let count = (ds.len() * plane) as f64;
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    for (i, chunk) in ds.images.data().chunks(plane).enumerate() {
        means[i % c] += chunk.iter().sum::<f64>();
    }
    means.iter_mut().for_each(|m| *m /= count);
    for (i, chunk) in ds.images.data().chunks(plane).enumerate() {
        let m = means[i % c];
        vars[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    (means, vars.into_iter().map(|v| (v / count).sqrt()).collect())
}

/// Per-channel `(x - mean) / std`.
pub fn normalize(ds: &Dataset, means: &[f64], stds: &[f64]) -> Result<Dataset> {
    let c = ds.sample_shape()[0];
    if means.len() != c || stds.len() != c {
        return Err(DafcError::InvalidArgument(format!(
            "normalization needs {c} means/stds, got {}/{}",
            means.len(),
            stds.len()
        )));
    }
    if let Some(i) = stds.iter().position(|&s| !(s > 0.0)) {
        return Err(DafcError::InvalidArgument(format!("channel {i} has zero standard deviation")));
    }
    let [_, h, w] = ds.sample_shape();
    let mut images = ds.images.clone();
    for (i, chunk) in images.data_mut().chunks_mut(h * w).enumerate() {
        let ch = i % c;
        chunk.iter_mut().for_each(|v| *v = (*v - means[ch]) / stds[ch]);
    }
    Ok(Dataset {
        images,
        means: means.to_vec(),
        stds: stds.to_vec(),
        ..ds.clone()
    })
}

/// Mini-batch schedule for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
    pub drop_last: bool,
}

/// Seeded shuffle of `0..n` cut into batches; the order depends only on
/// `(seed, epoch)`.
pub fn batches(n: usize, plan: &BatchPlan) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 || plan.batch_size > n {
        return Err(DafcError::InvalidArgument(format!(
            "batch size {} must lie in [1, {n}]",
            plan.batch_size
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(
        plan.seed ^ plan.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        rng::stream::SHUFFLE,
    );
    order.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = order.chunks(plan.batch_size).map(<[usize]>::to_vec).collect();
    if plan.drop_last && out.last().is_some_and(|b| b.len() < plan.batch_size) {
        out.pop();
    }
    Ok(out)
}

/// Where a dataset comes from. Parsed from strings such as
/// `blobs:k=4,n=500,dim=16,sigma=1,separation=10,seed=0`,
/// `mnist:digits=0123,limit=4000,split=train` or
/// `idx:images=/path/a,labels=/path/b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Mnist {
        digits: Vec<u8>,
        limit: Option<usize>,
        train: bool,
        fashion: bool,
    },
    Idx {
        images: PathBuf,
        labels: Option<PathBuf>,
    },
}

fn kv_pairs(body: &str) -> Result<Vec<(&str, &str)>> {
    body.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| DafcError::Config(format!("expected key=value, got '{kv}'")))
        })
        .collect()
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| DafcError::Config(format!("bad value '{v}' for dataset key '{key}'")))
}

impl FromStr for DatasetSpec {
    type Err = DafcError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        match kind.trim() {
            "blobs" => {
                let mut b = BlobSpec::default();
                for (k, v) in kv_pairs(body)? {
                    match k {
                        "k" => b.k = parse_num(k, v)?,
                        "n" => b.n_per_cluster = parse_num(k, v)?,
                        "dim" => b.dim = parse_num(k, v)?,
                        "sigma" => b.sigma = parse_num(k, v)?,
                        "separation" | "sep" => b.separation = parse_num(k, v)?,
                        "seed" => b.seed = parse_num(k, v)?,
                        other => return Err(DafcError::Config(format!("unknown blobs key '{other}'"))),
                    }
                }
                Ok(Self::Blobs(b))
            }
            kind @ ("mnist" | "fashion") => {
                let mut digits: Vec<u8> = (0..10).collect();
                let mut limit = None;
                let mut train = true;
                for (k, v) in kv_pairs(body)? {
                    match k {
                        "digits" | "classes" => {
                            digits = v
                                .chars()
                                .map(|c| {
                                    c.to_digit(10)
                                        .map(|d| d as u8)
                                        .ok_or_else(|| DafcError::Config(format!("bad digit '{c}'")))
                                })
                                .collect::<Result<_>>()?
                        }
                        "limit" => limit = Some(parse_num(k, v)?),
                        "split" => {
                            train = match v {
                                "train" => true,
                                "test" => false,
                                other => return Err(DafcError::Config(format!("unknown split '{other}'"))),
                            }
                        }
                        other => return Err(DafcError::Config(format!("unknown mnist key '{other}'"))),
                    }
                }
                Ok(Self::Mnist {
                    digits,
                    limit,
                    train,
                    fashion: kind == "fashion",
                })
            }
            "idx" => {
                let mut images = None;
                let mut labels = None;
                for (k, v) in kv_pairs(body)? {
                    match k {
                        "images" => images = Some(PathBuf::from(v)),
                        "labels" => labels = Some(PathBuf::from(v)),
                        other => return Err(DafcError::Config(format!("unknown idx key '{other}'"))),
                    }
                }
                Ok(Self::Idx {
                    images: images.ok_or_else(|| DafcError::Config("idx dataset needs images=".into()))?,
                    labels,
                })
            }
            other => Err(DafcError::Config(format!("unknown dataset kind '{other}'"))),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Blobs(b) => write!(
                f,
                "blobs:k={},n={},dim={},sigma={},separation={},seed={}",
                b.k, b.n_per_cluster, b.dim, b.sigma, b.separation, b.seed
            ),
            Self::Mnist {
                digits,
                limit,
                train,
                fashion,
            } => {
                let d: String = digits.iter().map(|d| char::from(b'0' + d)).collect();
                write!(f, "{}:digits={d}", if *fashion { "fashion" } else { "mnist" })?;
                if let Some(l) = limit {
                    write!(f, ",limit={l}")?;
                }
                write!(f, ",split={}", if *train { "train" } else { "test" })
            }
            Self::Idx { images, labels } => {
                write!(f, "idx:images={}", images.display())?;
                if let Some(l) = labels {
                    write!(f, ",labels={}", l.display())?;
                }
                Ok(())
            }
        }
    }
}

/// Dataset root: an explicit flag wins, then `DAFC_DATA_DIR`, then `./data`.
pub fn data_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Locates the IDX files of an MNIST-layout dataset under `root`, trying
/// `root/<name>/` before `root/` itself.
fn mnist_files(root: &Path, fashion: bool, train: bool) -> Result<(PathBuf, PathBuf)> {
    let prefix = if train { "train" } else { "t10k" };
    let sub = if fashion { "fashion-mnist" } else { "mnist" };
    for dir in [root.join(sub), root.to_path_buf()] {
        let img = dir.join(format!("{prefix}-images-idx3-ubyte"));
        let lab = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        if img.is_file() && lab.is_file() {
            return Ok((img, lab));
        }
    }
    Err(DafcError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no {sub} {prefix} IDX files under {}", root.display()),
    )))
}

/// Materializes a dataset. Digit subsets are relabelled to `0..digits.len()`
/// in the order given.
pub fn load(spec: &DatasetSpec, root: &Path) -> Result<Dataset> {
    match spec {
        DatasetSpec::Blobs(b) => synth_blobs(b),
        DatasetSpec::Idx { images, labels } => load_idx(images, labels.as_deref()),
        DatasetSpec::Mnist {
            digits,
            limit,
            train,
            fashion,
        } => {
            let (img, lab) = mnist_files(root, *fashion, *train)?;
            let full = load_idx(&img, Some(&lab))?;
            let truth = full.truth_labels().expect("labels loaded");
            let mut keep = Vec::new();
            let mut relabel = Vec::new();
            for (i, &t) in truth.iter().enumerate() {
                if let Some(pos) = digits.iter().position(|&d| usize::from(d) == t) {
                    keep.push(i);
                    relabel.push(pos);
                    if limit.is_some_and(|l| keep.len() >= l) {
                        break;
                    }
                }
            }
            if keep.is_empty() {
                return Err(DafcError::InvalidArgument(format!("no samples for digits {digits:?}")));
            }
            let images = full.images.select_rows(&keep);
            Dataset::new(spec.to_string(), images, Some(relabel))
        }
    }
}
