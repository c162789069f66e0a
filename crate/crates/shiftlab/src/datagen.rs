//! Synthetic Gaussian-mixture datasets and label-shifted test streams.
//!
//! A `GaussianMixtureSpec` fixes the class geometry (one isotropic Gaussian
//! per class). Datasets are sampled per class, and test streams impose a
//! label distribution on top of a sampled pool: offline long-tail subsets,
//! online locally-imbalanced subsets, or temporally correlated streams with
//! Dirichlet-distributed class proportions.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, rng_from};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DATASET_FORMAT: &str = "shiftlab-dataset/1";
pub const STREAM_FORMAT: &str = "shiftlab-stream/1";

/// Default benchmark geometry: ten classes in sixteen dimensions, arranged as
/// five well-separated pairs with a smaller within-pair margin.
pub const BENCH_K: usize = 10;
pub const BENCH_DIM: usize = 16;
pub const BENCH_MAJOR: f64 = 2.2;
pub const BENCH_MINOR: f64 = 0.75;
pub const BENCH_SIGMA: f64 = 0.5;

/// Isotropic Gaussian class-conditional mixture: class `i` is
/// `N(means[i], sigma^2 I)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub k: usize,
    pub dim: usize,
    /// K x D, one row per class.
    pub means: Matrix,
    pub sigma: f64,
}

impl GaussianMixtureSpec {
    pub fn new(means: Matrix, sigma: f64) -> Result<Self> {
        let spec = GaussianMixtureSpec { k: means.rows(), dim: means.cols(), means, sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("mixture needs at least 2 classes, got {}", self.k)));
        }
        if self.dim == 0 {
            return Err(Error::Config("mixture needs at least one feature".into()));
        }
        if self.means.rows() != self.k || self.means.cols() != self.dim {
            return Err(Error::Shape(format!(
                "means are {}x{}, expected {}x{}",
                self.means.rows(),
                self.means.cols(),
                self.k,
                self.dim
            )));
        }
        if !self.means.is_finite() {
            return Err(Error::NonFinite("mixture means".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        Ok(())
    }

    /// The same mixture translated by a constant input offset.
    pub fn shifted(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.dim {
            return Err(Error::Shape(format!(
                "offset has {} entries for {} features",
                delta.len(),
                self.dim
            )));
        }
        let mut means = self.means.clone();
        for r in 0..means.rows() {
            for (v, d) in means.row_mut(r).iter_mut().zip(delta) {
                *v += d;
            }
        }
        GaussianMixtureSpec::new(means, self.sigma)
    }
}

/// Four-quadrant toy geometry as a sampleable mixture.
pub fn toy_spec(params: &crate::theory::ToyParams) -> Result<GaussianMixtureSpec> {
    params.validate()?;
    let rows: Vec<Vec<f64>> =
        crate::theory::toy_means(params).iter().map(|m| m.to_vec()).collect();
    GaussianMixtureSpec::new(Matrix::from_rows(&rows), params.sigma)
}

/// `k` classes (k even) in `dim >= k` features, arranged in pairs: pair `j`
/// shares a center at `major` along axis `2j` and splits by `+-minor` along
/// axis `2j + 1`. Cross-pair separation is large, within-pair separation is
/// the hard margin.
pub fn paired_clusters_spec(
    k: usize,
    dim: usize,
    major: f64,
    minor: f64,
    sigma: f64,
) -> Result<GaussianMixtureSpec> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::Config(format!("paired clusters need an even class count, got {k}")));
    }
    if dim < k {
        return Err(Error::Config(format!("paired clusters need dim >= k, got dim {dim} for k {k}")));
    }
    if !(major > 0.0 && minor > 0.0) {
        return Err(Error::Config("pair separations must be positive".into()));
    }
    let mut means = Matrix::zeros(k, dim);
    for pair in 0..k / 2 {
        let (a, b) = (2 * pair, 2 * pair + 1);
        means.set(a, a, major);
        means.set(a, b, minor);
        means.set(b, a, major);
        means.set(b, b, -minor);
    }
    GaussianMixtureSpec::new(means, sigma)
}

/// The default ten-class benchmark mixture.
pub fn benchmark_spec() -> GaussianMixtureSpec {
    paired_clusters_spec(BENCH_K, BENCH_DIM, BENCH_MAJOR, BENCH_MINOR, BENCH_SIGMA)
        .expect("benchmark constants are valid")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub k: usize,
}

impl LabeledDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.x.is_consistent() {
            return Err(Error::Shape("dataset feature matrix is internally inconsistent".into()));
        }
        if self.x.rows() != self.y.len() {
            return Err(Error::Shape(format!(
                "{} feature rows vs {} labels",
                self.x.rows(),
                self.y.len()
            )));
        }
        if let Some(&bad) = self.y.iter().find(|l| **l >= self.k) {
            return Err(Error::Config(format!("label {bad} out of range for {} classes", self.k)));
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        let mut x = Matrix::zeros(idx.len(), self.x.cols());
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
            y.push(self.y[i]);
        }
        LabeledDataset { x, y, k: self.k }
    }
}

/// Draw `counts[i]` samples of class `i`, laid out class by class.
pub fn sample_per_class(
    spec: &GaussianMixtureSpec,
    counts: &[usize],
    seed: u64,
) -> Result<LabeledDataset> {
    spec.validate()?;
    if counts.len() != spec.k {
        return Err(Error::Shape(format!(
            "{} class counts for {} classes",
            counts.len(),
            spec.k
        )));
    }
    let n: usize = counts.iter().sum();
    let mut rng = rng_from(seed);
    let mut x = Matrix::zeros(n, spec.dim);
    let mut y = Vec::with_capacity(n);
    let mut row = 0;
    for (class, &c) in counts.iter().enumerate() {
        let mu = spec.means.row(class);
        for _ in 0..c {
            let dst = x.row_mut(row);
            for (v, m) in dst.iter_mut().zip(mu) {
                *v = m + spec.sigma * rng.sample::<f64, _>(StandardNormal);
            }
            y.push(class);
            row += 1;
        }
    }
    Ok(LabeledDataset { x, y, k: spec.k })
}

/// Draw the same number of samples for every class.
pub fn sample_balanced(
    spec: &GaussianMixtureSpec,
    per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    sample_per_class(spec, &vec![per_class; spec.k], seed)
}

/// Exponentially decaying class sizes: class `j` gets
/// `round(n_max * (1/rho)^(j / (K-1)))`, floored at one sample. `inverted`
/// reverses the profile so the last class is the largest.
pub fn long_tail_counts(n_max: usize, rho: f64, k: usize, inverted: bool) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("long tail needs at least 2 classes, got {k}")));
    }
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(Error::Config(format!("imbalance ratio must be >= 1, got {rho}")));
    }
    if n_max == 0 {
        return Err(Error::Config("long tail needs a positive head size".into()));
    }
    let mut counts = Vec::with_capacity(k);
    for j in 0..k {
        let expo = if inverted { (k - 1 - j) as f64 } else { j as f64 } / (k - 1) as f64;
        let c = (n_max as f64 * (1.0 / rho).powf(expo)).round() as usize;
        counts.push(c.max(1));
    }
    Ok(counts)
}

/// Majority-class probability inside one online-imbalanced subset.
pub fn online_majority_prob(ir: f64, k: usize) -> f64 {
    ir / (ir + (k - 1) as f64)
}

/// Label-shift construction applied on top of a sampled test pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftSpec {
    /// Use the whole pool in a shuffled order.
    Balanced,
    /// Offline long-tail subset with head/tail ratio `rho`.
    LongTail {
        rho: f64,
        #[serde(default)]
        inverted: bool,
    },
    /// A sequence of K subsets; subset `s` draws class `s` with probability
    /// `ir / (ir + K - 1)` and the rest uniformly.
    OnlineImbalanced { ir: f64, subset_size: usize },
    /// Class proportions across `n_chunks` temporal chunks drawn from a
    /// symmetric Dirichlet; small `delta` concentrates classes in time.
    Dirichlet { delta: f64, n_chunks: usize },
}

impl ShiftSpec {
    pub fn label(&self) -> String {
        match self {
            ShiftSpec::Balanced => "balanced".into(),
            ShiftSpec::LongTail { rho, inverted } => {
                if *inverted {
                    format!("long_tail(rho={rho},inverted)")
                } else {
                    format!("long_tail(rho={rho})")
                }
            }
            ShiftSpec::OnlineImbalanced { ir, subset_size } => {
                format!("online_imbalanced(ir={ir},subset={subset_size})")
            }
            ShiftSpec::Dirichlet { delta, n_chunks } => {
                format!("dirichlet(delta={delta},chunks={n_chunks})")
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ShiftSpec::Balanced => Ok(()),
            ShiftSpec::LongTail { rho, .. } => {
                if !(*rho >= 1.0 && rho.is_finite()) {
                    Err(Error::Config(format!("long tail rho must be >= 1, got {rho}")))
                } else {
                    Ok(())
                }
            }
            ShiftSpec::OnlineImbalanced { ir, subset_size } => {
                if !(*ir >= 1.0 && ir.is_finite()) {
                    Err(Error::Config(format!("imbalance ratio must be >= 1, got {ir}")))
                } else if *subset_size == 0 {
                    Err(Error::Config("subset size must be positive".into()))
                } else {
                    Ok(())
                }
            }
            ShiftSpec::Dirichlet { delta, n_chunks } => {
                if !(*delta > 0.0 && delta.is_finite()) {
                    Err(Error::Config(format!("dirichlet delta must be positive, got {delta}")))
                } else if *n_chunks < 2 {
                    Err(Error::Config("dirichlet needs at least 2 chunks".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StreamMeta {
    pub kind: String,
    pub seed: u64,
    pub batch_size: usize,
    pub k: usize,
    /// Set when a class pool was exhausted and indices were re-drawn.
    pub sampled_with_replacement: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchStream {
    pub batches: Vec<Batch>,
    pub meta: StreamMeta,
}

impl BatchStream {
    pub fn n_samples(&self) -> usize {
        self.batches.iter().map(|b| b.y.len()).sum()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.meta.k];
        for b in &self.batches {
            for &l in &b.y {
                counts[l] += 1;
            }
        }
        counts
    }
}

fn class_pools(data: &LabeledDataset) -> Result<Vec<Vec<usize>>> {
    let mut pools = vec![Vec::new(); data.k];
    for (i, &l) in data.y.iter().enumerate() {
        pools[l].push(i);
    }
    if let Some(empty) = pools.iter().position(|p| p.is_empty()) {
        return Err(Error::Config(format!("test pool has no samples of class {empty}")));
    }
    Ok(pools)
}

fn cut_batches(data: &LabeledDataset, order: &[usize], batch_size: usize) -> Vec<Batch> {
    order
        .chunks(batch_size)
        .map(|idx| {
            let sub = data.subset(idx);
            Batch { x: sub.x, y: sub.y }
        })
        .collect()
}

/// Allocate `total` slots to `weights.len()` bins by largest remainder;
/// remainder ties break toward the lower bin index.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let mut counts = vec![0usize; weights.len()];
    if sum <= 0.0 || !sum.is_finite() {
        return counts;
    }
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, w) in weights.iter().enumerate() {
        let exact = w / sum * total as f64;
        let base = exact.floor() as usize;
        counts[i] = base;
        assigned += base;
        remainders.push((i, exact - base as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders.into_iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Build a label-shifted batch stream over a test pool. Every construction is
/// deterministic in `seed`.
pub fn make_stream(
    data: &LabeledDataset,
    shift: &ShiftSpec,
    batch_size: usize,
    seed: u64,
) -> Result<BatchStream> {
    data.validate()?;
    shift.validate()?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut replacement = false;
    let order: Vec<usize> = match shift {
        ShiftSpec::Balanced => {
            let mut order: Vec<usize> = (0..data.n()).collect();
            order.shuffle(&mut rng_from(derive_seed(seed, "balanced-order", 0)));
            order
        }
        ShiftSpec::LongTail { rho, inverted } => {
            let pools = class_pools(data)?;
            let n_max = pools.iter().map(|p| p.len()).min().unwrap();
            let counts = long_tail_counts(n_max, *rho, data.k, *inverted)?;
            let mut order = Vec::new();
            for (class, pool) in pools.iter().enumerate() {
                let mut pool = pool.clone();
                pool.shuffle(&mut rng_from(derive_seed(seed, "long-tail-class", class as u64)));
                order.extend_from_slice(&pool[..counts[class]]);
            }
            order.shuffle(&mut rng_from(derive_seed(seed, "long-tail-order", 0)));
            order
        }
        ShiftSpec::OnlineImbalanced { ir, subset_size } => {
            let pools = class_pools(data)?;
            let p_major = online_majority_prob(*ir, data.k);
            let mut cursors = vec![0usize; data.k];
            let mut shuffled: Vec<Vec<usize>> = pools
                .iter()
                .enumerate()
                .map(|(class, p)| {
                    let mut p = p.clone();
                    p.shuffle(&mut rng_from(derive_seed(seed, "online-class", class as u64)));
                    p
                })
                .collect();
            let mut subsets: Vec<usize> = (0..data.k).collect();
            subsets.shuffle(&mut rng_from(derive_seed(seed, "online-subsets", 0)));
            let mut label_rng = rng_from(derive_seed(seed, "online-labels", 0));
            let mut refill_rng = rng_from(derive_seed(seed, "online-refill", 0));
            let mut order = Vec::with_capacity(data.k * subset_size);
            for &major in &subsets {
                for _ in 0..*subset_size {
                    let u: f64 = label_rng.gen();
                    let label = if u < p_major {
                        major
                    } else {
                        // spread the rest uniformly over the other classes
                        let mut pick =
                            ((u - p_major) / (1.0 - p_major) * (data.k - 1) as f64) as usize;
                        pick = pick.min(data.k - 2);
                        if pick >= major {
                            pick + 1
                        } else {
                            pick
                        }
                    };
                    if cursors[label] >= shuffled[label].len() {
                        // pool exhausted: reshuffle and start over
                        replacement = true;
                        shuffled[label].shuffle(&mut refill_rng);
                        cursors[label] = 0;
                    }
                    order.push(shuffled[label][cursors[label]]);
                    cursors[label] += 1;
                }
            }
            order
        }
        ShiftSpec::Dirichlet { delta, n_chunks } => {
            let pools = class_pools(data)?;
            let mut chunks: Vec<Vec<usize>> = vec![Vec::new(); *n_chunks];
            for (class, pool) in pools.iter().enumerate() {
                let mut pool = pool.clone();
                pool.shuffle(&mut rng_from(derive_seed(seed, "dirichlet-class", class as u64)));
                let mut weight_rng =
                    rng_from(derive_seed(seed, "dirichlet-weights", class as u64));
                let gamma = Gamma::new(*delta, 1.0)
                    .map_err(|e| Error::Config(format!("dirichlet delta {delta}: {e}")))?;
                let mut weights: Vec<f64> =
                    (0..*n_chunks).map(|_| weight_rng.sample(gamma)).collect();
                let total: f64 = weights.iter().sum();
                if !(total > 0.0 && total.is_finite()) {
                    // tiny delta can underflow every draw; the limiting
                    // behaviour puts the whole class into a single chunk
                    let chunk = weight_rng.gen_range(0..*n_chunks);
                    weights = vec![0.0; *n_chunks];
                    weights[chunk] = 1.0;
                }
                let counts = largest_remainder(&weights, pool.len());
                let mut cursor = 0;
                for (chunk, &c) in counts.iter().enumerate() {
                    chunks[chunk].extend_from_slice(&pool[cursor..cursor + c]);
                    cursor += c;
                }
            }
            let mut order = Vec::with_capacity(data.n());
            for (ci, chunk) in chunks.iter_mut().enumerate() {
                chunk.shuffle(&mut rng_from(derive_seed(seed, "dirichlet-chunk", ci as u64)));
                order.extend_from_slice(chunk);
            }
            order
        }
    };
    let batches = cut_batches(data, &order, batch_size);
    Ok(BatchStream {
        batches,
        meta: StreamMeta {
            kind: shift.label(),
            seed,
            batch_size,
            k: data.k,
            sampled_with_replacement: replacement,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    dataset: LabeledDataset,
}

#[derive(Serialize, Deserialize)]
struct StreamFile {
    format: String,
    stream: BatchStream,
}

pub fn save_dataset(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    dataset.validate()?;
    let file = DatasetFile { format: DATASET_FORMAT.into(), dataset: dataset.clone() };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    let file: DatasetFile = serde_json::from_slice(&bytes)?;
    if file.format != DATASET_FORMAT {
        return Err(Error::Config(format!(
            "unsupported dataset format {:?}, expected {DATASET_FORMAT:?}",
            file.format
        )));
    }
    file.dataset.validate()?;
    Ok(file.dataset)
}

pub fn save_stream(path: &Path, stream: &BatchStream) -> Result<()> {
    let file = StreamFile { format: STREAM_FORMAT.into(), stream: stream.clone() };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_stream(path: &Path) -> Result<BatchStream> {
    let bytes = std::fs::read(path)?;
    let file: StreamFile = serde_json::from_slice(&bytes)?;
    if file.format != STREAM_FORMAT {
        return Err(Error::Config(format!(
            "unsupported stream format {:?}, expected {STREAM_FORMAT:?}",
            file.format
        )));
    }
    for b in &file.stream.batches {
        if !b.x.is_consistent() || b.x.rows() != b.y.len() {
            return Err(Error::Shape("stream batch is internally inconsistent".into()));
        }
    }
    Ok(file.stream)
}
