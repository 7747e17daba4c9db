//! Multi-domain datasets: synthetic generators, CSV ingestion, splits, and
//! deterministic paired batch iteration.
//!
//! Target labels are only reachable through [`DomainDataset::eval_labels`];
//! training code consumes a [`TrainView`], which exposes features only.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labeled source or (for training purposes) unlabeled target sample
/// collection with a domain identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    features: Tensor,
    labels: Option<Vec<usize>>,
    pub domain_id: String,
    /// Provenance of the generator call, for the run echo.
    pub generator_params: String,
}

/// Features-only view handed to training code.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    features: &'a Tensor,
}

impl<'a> TrainView<'a> {
    pub fn len(&self) -> usize {
        self.features.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape[1]
    }

    /// Rows at `indices` as an `[n, d]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        gather_rows(self.features, indices)
    }
}

fn gather_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let d = t.shape[1];
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![indices.len(), d], data).expect("gathered shape")
}

impl DomainDataset {
    pub fn new(
        features: Tensor,
        labels: Option<Vec<usize>>,
        domain_id: impl Into<String>,
        generator_params: impl Into<String>,
    ) -> Result<Self> {
        if features.shape.len() != 2 || features.shape[0] == 0 {
            return Err(Error::Data(format!(
                "features must be a nonempty N x d matrix, got {:?}",
                features.shape
            )));
        }
        if let Some(l) = &labels {
            if l.len() != features.shape[0] {
                return Err(Error::Data(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.shape[0]
                )));
            }
        }
        Ok(DomainDataset {
            features,
            labels,
            domain_id: domain_id.into(),
            generator_params: generator_params.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape[1]
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn class_count(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map(|m| m + 1).unwrap_or(0))
    }

    /// The training-facing accessor: features only.
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            features: &self.features,
        }
    }

    /// Labels for evaluation. Never called from training loops.
    pub fn eval_labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Labels gathered at `indices`; requires a labeled dataset.
    pub fn gather_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("domain {} is unlabeled", self.domain_id)))?;
        Ok(indices.iter().map(|&i| labels[i]).collect())
    }

    /// Returns a copy with labels removed.
    pub fn without_labels(&self) -> DomainDataset {
        let mut out = self.clone();
        out.labels = None;
        out
    }

    /// Deterministic split into (train, eval) by seeded permutation.
    pub fn split(&self, train_frac: f64, seed: u64) -> (DomainDataset, DomainDataset) {
        let n = self.len();
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        let cut = ((n as f64 * train_frac).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        let (train_idx, eval_idx) = indices.split_at(cut.min(n));
        (self.subset(train_idx), self.subset(eval_idx))
    }

    fn subset(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            features: gather_rows(&self.features, indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            domain_id: self.domain_id.clone(),
            generator_params: self.generator_params.clone(),
        }
    }

    /// Write as CSV with columns `f0..f{d-1}[,label],domain`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            let _ = write!(out, "f{j},");
        }
        if self.is_labeled() {
            out.push_str("label,");
        }
        out.push_str("domain\n");
        for i in 0..self.len() {
            for j in 0..d {
                let _ = write!(out, "{},", self.features.data[i * d + j]);
            }
            if let Some(labels) = &self.labels {
                let _ = write!(out, "{},", labels[i]);
            }
            out.push_str(&self.domain_id);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Two interleaved half-circles in 2D with Gaussian noise, then rotated and
/// translated. Rotation magnitude controls the covariate shift between
/// domains.
pub fn gen_two_moons(
    n: usize,
    noise_sigma: f64,
    rotation_deg: f64,
    translation: [f64; 2],
    label_flip_frac: f64,
    seed: u64,
    domain_id: impl Into<String>,
) -> Result<DomainDataset> {
    if n == 0 {
        return Err(Error::Data("two_moons requires n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&label_flip_frac) {
        return Err(Error::Data("label_flip_frac must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("valid normal");
    let theta = rotation_deg * PI / 180.0;
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let n_upper = n / 2 + n % 2;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // upper moon centered at origin, lower moon offset to interleave
        let (angle_frac, label) = if i < n_upper {
            (i as f64 / (n_upper.saturating_sub(1).max(1)) as f64, 0usize)
        } else {
            (
                (i - n_upper) as f64 / ((n - n_upper).saturating_sub(1).max(1)) as f64,
                1usize,
            )
        };
        let a = angle_frac * PI;
        let (mut x, mut y) = if label == 0 {
            (a.cos(), a.sin())
        } else {
            (1.0 - a.cos(), 0.5 - a.sin())
        };
        x += noise.sample(&mut rng);
        y += noise.sample(&mut rng);
        let (rx, ry) = (cos_t * x - sin_t * y, sin_t * x + cos_t * y);
        data.push(rx + translation[0]);
        data.push(ry + translation[1]);
        let flipped = label_flip_frac > 0.0 && rng.gen::<f64>() < label_flip_frac;
        labels.push(if flipped { 1 - label } else { label });
    }
    DomainDataset::new(
        Tensor::new(vec![n, 2], data)?,
        Some(labels),
        domain_id,
        format!(
            "two_moons(n={n}, noise={noise_sigma}, rot={rotation_deg}, trans={translation:?}, flip={label_flip_frac}, seed={seed})"
        ),
    )
}

/// Gaussian class clusters; domain shift is center displacement.
pub fn gen_blobs(
    n: usize,
    centers: &[Vec<f64>],
    sigma: f64,
    seed: u64,
    domain_id: impl Into<String>,
) -> Result<DomainDataset> {
    if n == 0 || centers.is_empty() {
        return Err(Error::Data("blobs require n >= 1 and at least one center".into()));
    }
    let d = centers[0].len();
    if d == 0 || centers.iter().any(|c| c.len() != d) {
        return Err(Error::Data("blob centers must share a nonzero dim".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("valid normal");
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % centers.len();
        for &c in &centers[k] {
            data.push(c + noise.sample(&mut rng));
        }
        labels.push(k);
    }
    DomainDataset::new(
        Tensor::new(vec![n, d], data)?,
        Some(labels),
        domain_id,
        format!("blobs(n={n}, k={}, sigma={sigma}, seed={seed})", centers.len()),
    )
}

/// CSV with a header; feature columns named `f0..f{d-1}`, optional `label`,
/// required `domain`.
pub fn load_csv(path: &Path) -> Result<DomainDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut feature_cols = Vec::new();
    let mut label_col = None;
    let mut domain_col = None;
    for (i, c) in cols.iter().enumerate() {
        if let Some(rest) = c.strip_prefix('f') {
            if rest.parse::<usize>().is_ok() {
                feature_cols.push(i);
                continue;
            }
        }
        match *c {
            "label" => label_col = Some(i),
            "domain" => domain_col = Some(i),
            other => {
                return Err(Error::Data(format!(
                    "{}: unknown column '{other}' in header",
                    path.display()
                )))
            }
        }
    }
    let domain_col = domain_col
        .ok_or_else(|| Error::Data(format!("{}: missing 'domain' column", path.display())))?;
    if feature_cols.is_empty() {
        return Err(Error::Data(format!(
            "{}: no feature columns f0..fN found",
            path.display()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domain = None;
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Data(format!(
                "{}: line {}: expected {} fields, got {}",
                path.display(),
                lineno + 1,
                cols.len(),
                fields.len()
            )));
        }
        for &fc in &feature_cols {
            let v: f64 = fields[fc].parse().map_err(|_| {
                Error::Data(format!(
                    "{}: line {}: non-numeric feature '{}'",
                    path.display(),
                    lineno + 1,
                    fields[fc]
                ))
            })?;
            data.push(v);
        }
        if let Some(lc) = label_col {
            let l: usize = fields[lc].parse().map_err(|_| {
                Error::Data(format!(
                    "{}: line {}: bad label '{}'",
                    path.display(),
                    lineno + 1,
                    fields[lc]
                ))
            })?;
            labels.push(l);
        }
        match &domain {
            None => domain = Some(fields[domain_col].to_string()),
            Some(d) if d != fields[domain_col] => {
                return Err(Error::Data(format!(
                    "{}: line {}: mixed domains '{}' and '{}'",
                    path.display(),
                    lineno + 1,
                    d,
                    fields[domain_col]
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    DomainDataset::new(
        Tensor::new(vec![rows, feature_cols.len()], data)?,
        label_col.map(|_| labels),
        domain.unwrap_or_default(),
        format!("csv({})", path.display()),
    )
}

/// Batch size, shuffle seed, and epoch index; the same `(seed, epoch)` pair
/// always produces the same permutation.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: usize,
}

fn epoch_permutation(n: usize, seed: u64, epoch: usize, cycle: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (cycle as u64) << 17,
    );
    indices.shuffle(&mut rng);
    indices
}

/// Index stream that cycles through a dataset, reshuffling every full pass.
#[derive(Debug)]
struct CyclingIndices {
    n: usize,
    seed: u64,
    epoch: usize,
    cycle: usize,
    pos: usize,
    perm: Vec<usize>,
}

impl CyclingIndices {
    fn new(n: usize, seed: u64, epoch: usize) -> Self {
        CyclingIndices {
            n,
            seed,
            epoch,
            cycle: 0,
            pos: 0,
            perm: epoch_permutation(n, seed, epoch, 0),
        }
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.pos == self.n {
                self.cycle += 1;
                self.perm = epoch_permutation(self.n, self.seed, self.epoch, self.cycle);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One step of paired iteration: source indices plus one index batch per
/// target domain, all of equal length.
#[derive(Debug)]
pub struct PairedBatch {
    pub source: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
}

/// Paired iteration over a source and `n` target domains. The largest domain
/// drives the epoch and is consumed exactly once; every shorter domain cycles
/// (reshuffled per cycle).
pub struct PairedBatches {
    driver_len: usize,
    driver_perm: Vec<usize>,
    driver_is_source: bool,
    driver_target: usize,
    source: CyclingIndices,
    targets: Vec<CyclingIndices>,
    batch_size: usize,
    pos: usize,
}

impl PairedBatches {
    pub fn new(source_len: usize, target_lens: &[usize], plan: BatchPlan) -> Result<Self> {
        if plan.batch_size == 0 {
            return Err(Error::Data("batch size must be positive".into()));
        }
        if source_len == 0 || target_lens.iter().any(|&n| n == 0) {
            return Err(Error::Data("empty dataset in paired iteration".into()));
        }
        let mut driver_is_source = true;
        let mut driver_target = 0;
        let mut driver_len = source_len;
        for (i, &n) in target_lens.iter().enumerate() {
            if n > driver_len {
                driver_len = n;
                driver_is_source = false;
                driver_target = i;
            }
        }
        let driver_perm = epoch_permutation(driver_len, plan.seed, plan.epoch, 0);
        Ok(PairedBatches {
            driver_len,
            driver_perm,
            driver_is_source,
            driver_target,
            source: CyclingIndices::new(source_len, plan.seed.wrapping_add(1), plan.epoch),
            targets: target_lens
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    CyclingIndices::new(n, plan.seed.wrapping_add(2 + i as u64), plan.epoch)
                })
                .collect(),
            batch_size: plan.batch_size,
            pos: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.driver_len.div_ceil(self.batch_size)
    }
}

impl Iterator for PairedBatches {
    type Item = PairedBatch;

    fn next(&mut self) -> Option<PairedBatch> {
        if self.pos >= self.driver_len {
            return None;
        }
        let count = self.batch_size.min(self.driver_len - self.pos);
        let driver_batch = self.driver_perm[self.pos..self.pos + count].to_vec();
        self.pos += count;
        let source = if self.driver_is_source {
            driver_batch.clone()
        } else {
            self.source.take(count)
        };
        let targets = self
            .targets
            .iter_mut()
            .enumerate()
            .map(|(i, t)| {
                if !self.driver_is_source && i == self.driver_target {
                    driver_batch.clone()
                } else {
                    t.take(count)
                }
            })
            .collect();
        Some(PairedBatch { source, targets })
    }
}

/// Plain single-dataset batching (used by the single-phase baselines).
pub fn batches(n: usize, plan: BatchPlan) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 {
        return Err(Error::Data("batch size must be positive".into()));
    }
    if n == 0 {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    let perm = epoch_permutation(n, plan.seed, plan.epoch, 0);
    Ok(perm.chunks(plan.batch_size).map(|c| c.to_vec()).collect())
}
