//! Per-client key-value memory of (representation, label) pairs.
//!
//! Keys are stored in single precision, the same as the on-disk format, so a
//! save/load cycle is lossless. Distances are computed in double precision.
//! Entries are kept in ascending `insert_seq` order at all times.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::data::{largest_remainder, Sample};
use crate::error::{config_err, input_err, FedError, Result};
use crate::nn::Model;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Never updated after construction.
    Fixed,
    /// New entries replace the oldest ones once capacity is reached.
    Fifo,
    /// New entries are appended without bound.
    Concatenate,
}

impl Policy {
    fn code(self) -> u8 {
        match self {
            Policy::Fixed => 0,
            Policy::Fifo => 1,
            Policy::Concatenate => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Policy::Fixed),
            1 => Some(Policy::Fifo),
            2 => Some(Policy::Concatenate),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::Fixed => "fixed",
            Policy::Fifo => "fifo",
            Policy::Concatenate => "concatenate",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Policy::Fixed),
            "fifo" => Ok(Policy::Fifo),
            "concatenate" => Ok(Policy::Concatenate),
            other => config_err(format!("unknown datastore policy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: Vec<f32>,
    pub label: usize,
    pub insert_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Position in the store's entry (or prototype) list.
    pub index: usize,
    pub label: usize,
    pub insert_seq: u64,
    /// Euclidean distance divided by the kernel scale.
    pub distance: f64,
}

/// Nearest entries in ascending distance order, ties by `insert_seq`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Neighborhood {
    pub neighbors: Vec<Neighbor>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Anything that answers scaled-distance k-nearest-neighbor queries.
pub trait NeighborIndex: Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn knn_query(&self, query: &[f64], k: usize, sigma: f64) -> Result<Neighborhood>;
}

fn sq_dist(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - f64::from(*y);
            d * d
        })
        .sum()
}

fn check_query(dim: usize, query: &[f64], k: usize, sigma: f64) -> Result<()> {
    if query.len() != dim {
        return input_err(format!("query has dimension {}, store has {dim}", query.len()));
    }
    if k == 0 {
        return input_err("k must be at least 1");
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return input_err("sigma must be positive");
    }
    Ok(())
}

/// Exact selection over `(squared distance, seq, index)` candidates. The
/// ordering uses unscaled squared distances so `sigma` cannot change it.
fn select_nearest(mut cand: Vec<(f64, u64, usize)>, k: usize) -> Vec<(f64, u64, usize)> {
    let cmp = |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(cand.len());
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    entries: Vec<Entry>,
    capacity: Option<usize>,
    policy: Policy,
    next_seq: u64,
}

/// Embeds samples with the model's representation layer.
pub fn embed_samples(model: &Model, samples: &[Sample]) -> Result<Vec<(Vec<f64>, usize)>> {
    samples
        .par_iter()
        .map(|s| Ok((model.embed(&s.x)?, s.y)))
        .collect()
}

/// Number of entries kept for a capacity fraction of `n` samples.
pub fn retained_count(n: usize, fraction: f64) -> usize {
    // tolerance absorbs products like 0.1 * 30 = 3.0000000000000004
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

impl Datastore {
    pub fn new(dim: usize, policy: Policy, capacity: Option<usize>) -> Result<Self> {
        if dim == 0 {
            return config_err("datastore dimension must be positive");
        }
        if capacity == Some(0) {
            return config_err("capacity must be positive when set");
        }
        Ok(Datastore { dim, entries: Vec::new(), capacity, policy, next_seq: 0 })
    }

    /// One forward pass over `samples`, keeping a seeded uniform subsample
    /// of `ceil(capacity_fraction * n)` of them in their original order.
    /// `insert_seq` is the sample's position in `samples`. The subsample is a
    /// prefix of one seeded permutation, so for a fixed seed smaller
    /// capacities select subsets of larger ones.
    pub fn build(model: &Model, samples: &[Sample], capacity_fraction: f64, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return input_err("cannot build a datastore from no samples");
        }
        if !(capacity_fraction > 0.0 && capacity_fraction <= 1.0) {
            return config_err(format!("capacity fraction {capacity_fraction} outside (0, 1]"));
        }
        let n = samples.len();
        let keep = retained_count(n, capacity_fraction);
        let mut chosen: Vec<usize> = (0..n).collect();
        if keep < n {
            chosen.shuffle(&mut seed::rng(seed));
            chosen.truncate(keep);
            chosen.sort_unstable();
        }
        let picked: Vec<Sample> = chosen.iter().map(|&i| samples[i].clone()).collect();
        let embedded = embed_samples(model, &picked)?;
        let entries = embedded
            .into_iter()
            .zip(&chosen)
            .map(|((key, label), &i)| Entry {
                key: key.into_iter().map(|v| v as f32).collect(),
                label,
                insert_seq: i as u64,
            })
            .collect();
        let next_seq = chosen.last().map_or(0, |&i| i as u64 + 1);
        Ok(Datastore { dim: model.repr_dim(), entries, capacity: None, policy: Policy::Fixed, next_seq })
    }

    pub fn with_policy(mut self, policy: Policy, capacity: Option<usize>) -> Result<Self> {
        if capacity == Some(0) {
            return config_err("capacity must be positive when set");
        }
        if policy == Policy::Fifo && capacity.is_none() {
            return config_err("fifo policy requires a capacity");
        }
        self.policy = policy;
        self.capacity = capacity;
        if policy == Policy::Fifo {
            self.evict();
        }
        Ok(self)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Appends one entry regardless of policy.
    pub fn push(&mut self, key: &[f64], label: usize) -> Result<()> {
        if key.len() != self.dim {
            return input_err(format!("key has dimension {}, store has {}", key.len(), self.dim));
        }
        self.entries.push(Entry {
            key: key.iter().map(|&v| v as f32).collect(),
            label,
            insert_seq: self.next_seq,
        });
        self.next_seq += 1;
        Ok(())
    }

    fn evict(&mut self) {
        if let Some(cap) = self.capacity {
            if self.entries.len() > cap {
                let excess = self.entries.len() - cap;
                self.entries.drain(..excess);
            }
        }
    }

    /// Applies a batch of new (key, label) pairs according to the policy.
    /// The store is left untouched when the batch is rejected.
    pub fn update(&mut self, batch: &[(Vec<f64>, usize)]) -> Result<()> {
        if let Some((k, _)) = batch.iter().find(|(k, _)| k.len() != self.dim) {
            return input_err(format!("key has dimension {}, store has {}", k.len(), self.dim));
        }
        match self.policy {
            Policy::Fixed => Ok(()),
            Policy::Concatenate => {
                for (k, y) in batch {
                    self.push(k, *y)?;
                }
                Ok(())
            }
            Policy::Fifo => {
                if self.capacity.is_none() {
                    return config_err("fifo policy requires a capacity");
                }
                for (k, y) in batch {
                    self.push(k, *y)?;
                }
                self.evict();
                Ok(())
            }
        }
    }

    /// Neighbors of every query, in query order.
    pub fn knn_batch(&self, queries: &[Vec<f64>], k: usize, sigma: f64) -> Result<Vec<Neighborhood>> {
        queries.par_iter().map(|q| self.knn_query(q, k, sigma)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + self.entries.len() * (12 + 4 * self.dim));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.push(self.policy.code());
        out.extend_from_slice(&(self.capacity.unwrap_or(0) as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.insert_seq.to_le_bytes());
            out.extend_from_slice(&(e.label as u32).to_le_bytes());
            for v in &e.key {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::io::Reader::new(bytes);
        if r.take(4)? != STORE_MAGIC {
            return Err(FedError::Format("bad datastore magic".into()));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(FedError::Format(format!("unsupported datastore version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let policy = Policy::from_code(r.u8()?)
            .ok_or_else(|| FedError::Format("unknown policy code".into()))?;
        let capacity = match r.u64()? {
            0 => None,
            c => Some(c as usize),
        };
        if dim == 0 {
            return Err(FedError::Format("zero key dimension".into()));
        }
        let mut entries = Vec::with_capacity(count.min(bytes.len() / (12 + 4 * dim) + 1));
        for _ in 0..count {
            let insert_seq = r.u64()?;
            let label = r.u32()? as usize;
            let key = (0..dim).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
            entries.push(Entry { key, label, insert_seq });
        }
        r.finish()?;
        if entries.windows(2).any(|w| w[0].insert_seq >= w[1].insert_seq) {
            return Err(FedError::Format("entries are not in insertion order".into()));
        }
        let next_seq = entries.last().map_or(0, |e| e.insert_seq + 1);
        Ok(Datastore { dim, entries, capacity, policy, next_seq })
    }

    /// Prototype compression: PCA projection to `proj_dim` dimensions, then
    /// per-class k-means in the projected space. Class budgets are
    /// proportional to class counts (largest remainder).
    pub fn compress(&self, num_prototypes: usize, proj_dim: usize, seed: u64) -> Result<PrototypeStore> {
        if num_prototypes == 0 || num_prototypes > self.entries.len() {
            return config_err(format!(
                "number of prototypes must be in [1, {}], got {num_prototypes}",
                self.entries.len()
            ));
        }
        if proj_dim == 0 || proj_dim > self.dim {
            return config_err(format!("projection dimension must be in [1, {}]", self.dim));
        }
        let keys: Vec<Vec<f64>> = self
            .entries
            .iter()
            .map(|e| e.key.iter().map(|&v| f64::from(v)).collect())
            .collect();
        let (mean, components) = pca(&keys, proj_dim, seed::tagged(seed, "pca"));
        let project = |k: &[f64]| -> Vec<f64> { project_onto(&mean, &components, k) };
        let projected: Vec<Vec<f64>> = keys.iter().map(|k| project(k)).collect();

        let num_labels = self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_labels];
        for (i, e) in self.entries.iter().enumerate() {
            by_class[e.label].push(i);
        }
        let weights: Vec<f64> = by_class.iter().map(|c| c.len() as f64).collect();
        let budgets = largest_remainder(&weights, num_prototypes);

        let mut prototypes = Vec::with_capacity(num_prototypes);
        for (label, (members, budget)) in by_class.iter().zip(budgets).enumerate() {
            if budget == 0 || members.is_empty() {
                continue;
            }
            let points: Vec<&[f64]> = members.iter().map(|&i| projected[i].as_slice()).collect();
            let centroids = kmeans(&points, budget, seed::child(seed, label as u64));
            prototypes.extend(centroids.into_iter().map(|c| (c, label)));
        }
        Ok(PrototypeStore { input_dim: self.dim, mean, components, prototypes })
    }
}

impl NeighborIndex for Datastore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn knn_query(&self, query: &[f64], k: usize, sigma: f64) -> Result<Neighborhood> {
        check_query(self.dim, query, k, sigma)?;
        if self.entries.is_empty() {
            return Err(FedError::EmptyStore);
        }
        let cand: Vec<(f64, u64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (sq_dist(query, &e.key), e.insert_seq, i))
            .collect();
        let neighbors = select_nearest(cand, k)
            .into_iter()
            .map(|(d2, seq, i)| Neighbor {
                index: i,
                label: self.entries[i].label,
                insert_seq: seq,
                distance: d2.sqrt() / sigma,
            })
            .collect();
        Ok(Neighborhood { neighbors })
    }
}

const STORE_MAGIC: &[u8; 4] = b"FMDS";
const STORE_VERSION: u32 = 1;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_onto(mean: &[f64], components: &[Vec<f64>], k: &[f64]) -> Vec<f64> {
    let centered: Vec<f64> = k.iter().zip(mean).map(|(a, m)| a - m).collect();
    components.iter().map(|c| dot(c, &centered)).collect()
}

/// Top principal directions by orthogonal power iteration on the sample
/// covariance. Returns the mean and `dims` orthonormal components. Rank
/// deficient directions are filled with orthonormal complements.
fn pca(points: &[Vec<f64>], dims: usize, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = points[0].len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; p];
    for x in points {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = vec![vec![0.0; p]; p];
    for x in points {
        let c: Vec<f64> = x.iter().zip(&mean).map(|(a, m)| a - m).collect();
        for i in 0..p {
            for j in i..p {
                cov[i][j] += c[i] * c[j] / n;
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }

    let mut rng = seed::rng(seed);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(dims);
    let orthogonalize = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for _ in 0..2 {
            for b in basis {
                let d = dot(v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
    };
    let normalize = |v: &mut Vec<f64>| -> f64 {
        let norm = dot(v, v).sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        norm
    };
    for _ in 0..dims {
        let mut v: Vec<f64> = (0..p).map(|_| rng.random::<f64>() - 0.5).collect();
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        for _ in 0..500 {
            let mut w: Vec<f64> = cov.iter().map(|row| dot(row, &v)).collect();
            orthogonalize(&mut w, &components);
            if normalize(&mut w) < 1e-12 {
                // v lies in the null space; any orthonormal completion works
                break;
            }
            let converged = dot(&w, &v).abs() > 1.0 - 1e-13;
            v = w;
            if converged {
                break;
            }
        }
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        components.push(v);
    }
    (mean, components)
}

/// k-means++ seeding followed by Lloyd iterations until assignments settle.
/// Empty clusters keep their previous centroid.
fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed);
    let d2 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let k = k.min(points.len());
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut best: Vec<f64> = points.iter().map(|p| d2(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &b) in best.iter().enumerate() {
                u -= b;
                if u < 0.0 && b > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| best.iter().rposition(|&b| b > 0.0).unwrap())
        } else {
            // all remaining points coincide with a centroid
            (0..points.len()).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(d2(p, points[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].to_vec()).collect();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = (0..k)
                .min_by(|&a, &b| d2(p, &centroids[a]).total_cmp(&d2(p, &centroids[b])))
                .unwrap();
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            sums[c].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centroids
}

/// Compressed datastore: labeled centroids in a PCA-projected space.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    input_dim: usize,
    mean: Vec<f64>,
    /// `proj_dim` orthonormal rows of length `input_dim`.
    components: Vec<Vec<f64>>,
    prototypes: Vec<(Vec<f64>, usize)>,
}

impl PrototypeStore {
    pub fn proj_dim(&self) -> usize {
        self.components.len()
    }

    pub fn prototypes(&self) -> &[(Vec<f64>, usize)] {
        &self.prototypes
    }

    pub fn project(&self, key: &[f64]) -> Vec<f64> {
        project_onto(&self.mean, &self.components, key)
    }

    /// Maps a projected point back to representation space.
    pub fn reconstruct(&self, projected: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &z) in self.components.iter().zip(projected) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += z * v);
        }
        out
    }
}

impl NeighborIndex for PrototypeStore {
    fn dim(&self) -> usize {
        self.input_dim
    }

    fn len(&self) -> usize {
        self.prototypes.len()
    }

    fn knn_query(&self, query: &[f64], k: usize, sigma: f64) -> Result<Neighborhood> {
        check_query(self.input_dim, query, k, sigma)?;
        if self.prototypes.is_empty() {
            return Err(FedError::EmptyStore);
        }
        let q = self.project(query);
        let cand: Vec<(f64, u64, usize)> = self
            .prototypes
            .iter()
            .enumerate()
            .map(|(i, (c, _))| {
                let d: f64 = q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i as u64, i)
            })
            .collect();
        let neighbors = select_nearest(cand, k)
            .into_iter()
            .map(|(d2, seq, i)| Neighbor {
                index: i,
                label: self.prototypes[i].1,
                insert_seq: seq,
                distance: d2.sqrt() / sigma,
            })
            .collect();
        Ok(Neighborhood { neighbors })
    }
}
