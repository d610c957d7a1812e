//! Synthetic data, non-IID partitioning and per-client splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{config_err, FedError, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Sample { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    /// Fine label -> coarse label, when the pool has a two-level structure.
    pub coarse_of: Option<Vec<usize>>,
}

impl LabeledPool {
    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn num_coarse(&self) -> Option<usize> {
        self.coarse_of.as_ref().map(|c| c.iter().max().map_or(0, |m| m + 1))
    }

    /// Indices of the samples of each class, in pool order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.y].push(i);
        }
        out
    }
}

/// Gaussian-blob pool parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSpec {
    pub num_classes: usize,
    /// Number of coarse groups; 0 disables the coarse structure.
    pub num_coarse: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    /// Scale of the class means relative to the unit within-class noise.
    pub separation: f64,
    pub seed: u64,
}

/// Each class is an isotropic unit-variance Gaussian around a seeded mean.
/// With coarse structure, fine means are drawn around their group's center
/// (at half the spread) so fine classes of one group are closer together.
pub fn make_synthetic_pool(spec: &PoolSpec) -> Result<LabeledPool> {
    if spec.num_classes == 0 || spec.samples_per_class == 0 || spec.feature_dim == 0 {
        return config_err("pool counts must be positive");
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return config_err("separation must be finite and non-negative");
    }
    if spec.num_coarse > 0 && spec.num_classes % spec.num_coarse != 0 {
        return config_err(format!(
            "{} classes cannot be grouped into {} coarse labels",
            spec.num_classes, spec.num_coarse
        ));
    }
    let dim = spec.feature_dim;
    let mut mean_rng = seed::rng(seed::tagged(spec.seed, "means"));
    let gauss = |rng: &mut Rng, scale: f64| -> Vec<f64> {
        (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };

    let (means, coarse_of) = if spec.num_coarse > 0 {
        let per = spec.num_classes / spec.num_coarse;
        let centers: Vec<Vec<f64>> =
            (0..spec.num_coarse).map(|_| gauss(&mut mean_rng, spec.separation)).collect();
        let means = (0..spec.num_classes)
            .map(|c| {
                let off = gauss(&mut mean_rng, spec.separation * 0.5);
                centers[c / per].iter().zip(off).map(|(a, b)| a + b).collect()
            })
            .collect::<Vec<Vec<f64>>>();
        (means, Some((0..spec.num_classes).map(|c| c / per).collect()))
    } else {
        let means = (0..spec.num_classes)
            .map(|_| gauss(&mut mean_rng, spec.separation))
            .collect();
        (means, None)
    };

    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        let mut rng = seed::rng(seed::child(seed::tagged(spec.seed, "samples"), c as u64));
        for _ in 0..spec.samples_per_class {
            let x = mean
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample::new(x, c));
        }
    }
    Ok(LabeledPool { samples, num_classes: spec.num_classes, coarse_of })
}

/// Draws from a symmetric Dirichlet of the given order. Gamma variates are
/// combined in log space so very small concentrations do not underflow to
/// an all-zero vector.
pub fn sample_dirichlet(alpha: f64, order: usize, rng: &mut Rng) -> Vec<f64> {
    assert!(alpha > 0.0 && order > 0);
    let logs: Vec<f64> = if alpha >= 1.0 {
        let g = Gamma::new(alpha, 1.0).expect("valid gamma");
        (0..order).map(|_| g.sample(rng).ln()).collect()
    } else {
        // Gamma(a) = Gamma(a + 1) * U^(1/a)
        let g = Gamma::new(alpha + 1.0, 1.0).expect("valid gamma");
        (0..order)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                g.sample(rng).ln() + u.ln() / alpha
            })
            .collect()
    };
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Integer apportionment of `total` proportional to `weights`: floors first,
/// then the leftover units go to the largest fractional parts (lower index
/// wins ties). The result always sums to `total`.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        return largest_remainder(&vec![1.0; weights.len()], total);
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    // Floors can overshoot only through rounding noise; trim from the
    // smallest remainders in that case.
    if assigned > total {
        let mut extra = assigned - total;
        for &i in order.iter().rev() {
            if extra == 0 {
                break;
            }
            if counts[i] > 0 {
                counts[i] -= 1;
                extra -= 1;
            }
        }
    } else {
        for &i in order.iter().cycle().take(total - assigned) {
            counts[i] += 1;
        }
    }
    counts
}

/// Assignment of every pool sample to exactly one client.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Partition {
    /// Pool indices of each client, ascending.
    pub fn client_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clients];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn client_samples(&self, pool: &LabeledPool) -> Vec<Vec<Sample>> {
        self.client_indices()
            .into_iter()
            .map(|idx| idx.into_iter().map(|i| pool.samples[i].clone()).collect())
            .collect()
    }
}

/// Label skew: for each class, client proportions are drawn from a
/// symmetric Dirichlet and the class instances are dealt out accordingly.
pub fn dirichlet_partition(
    pool: &LabeledPool,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return config_err("number of clients must be at least 1");
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return config_err("alpha must be positive");
    }
    let mut assignment = vec![0usize; pool.samples.len()];
    for (label, mut idx) in pool.class_indices().into_iter().enumerate() {
        let mut rng = seed::rng(seed::child(seed, label as u64));
        let props = sample_dirichlet(alpha, num_clients, &mut rng);
        idx.shuffle(&mut rng);
        let counts = largest_remainder(&props, idx.len());
        let mut start = 0;
        for (client, count) in counts.into_iter().enumerate() {
            for &i in &idx[start..start + count] {
                assignment[i] = client;
            }
            start += count;
        }
    }
    Ok(Partition { assignment, num_clients, alpha, seed })
}

/// Samples proportionally to `weights`, restricted to `available` entries.
/// Falls back to uniform over the available entries when their total
/// weight is zero.
fn pick_weighted(weights: &[f64], available: &[bool], rng: &mut Rng) -> Option<usize> {
    let total: f64 = weights
        .iter()
        .zip(available)
        .filter(|(_, &a)| a)
        .map(|(w, _)| *w)
        .sum();
    let open: Vec<usize> = (0..weights.len()).filter(|&i| available[i]).collect();
    if open.is_empty() {
        return None;
    }
    if !(total > 0.0) {
        return Some(open[rng.random_range(0..open.len())]);
    }
    let mut u = rng.random::<f64>() * total;
    for &i in &open {
        u -= weights[i];
        if u < 0.0 {
            return Some(i);
        }
    }
    // rounding left u marginally positive: last open entry with weight
    open.iter().rev().copied().find(|&i| weights[i] > 0.0)
}

/// Two-level partition over coarse and fine labels. Each client gets an
/// equal share of the pool (largest remainder). Per client, a coarse
/// mixture is drawn from `Dir(alpha)` and, for each coarse label, a fine
/// mixture from `Dir(beta)`. Clients take turns drawing one sample at a
/// time, without replacement; exhausted fine classes (and coarse labels
/// with no remaining fine class) are dropped and the mixtures renormalized.
pub fn pachinko_partition(
    pool: &LabeledPool,
    num_clients: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<Partition> {
    let coarse_of = pool
        .coarse_of
        .as_ref()
        .ok_or_else(|| FedError::Config("pachinko partitioning needs coarse labels".into()))?;
    if num_clients == 0 {
        return config_err("number of clients must be at least 1");
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return config_err("alpha and beta must be positive");
    }
    let num_coarse = pool.num_coarse().unwrap_or(0);
    let fine_in: Vec<Vec<usize>> = (0..num_coarse)
        .map(|g| (0..pool.num_classes).filter(|&f| coarse_of[f] == g).collect())
        .collect();

    let mut remaining = pool.class_indices();
    let mut pool_rng = seed::rng(seed::tagged(seed, "pool"));
    for r in remaining.iter_mut() {
        r.shuffle(&mut pool_rng);
    }

    let sizes = largest_remainder(&vec![1.0; num_clients], pool.samples.len());
    let mut rngs: Vec<Rng> = (0..num_clients).map(|m| seed::rng(seed::child(seed, m as u64))).collect();
    let coarse_mix: Vec<Vec<f64>> =
        rngs.iter_mut().map(|r| sample_dirichlet(alpha, num_coarse, r)).collect();
    let fine_mix: Vec<Vec<Vec<f64>>> = rngs
        .iter_mut()
        .map(|r| fine_in.iter().map(|f| sample_dirichlet(beta, f.len(), r)).collect())
        .collect();

    let mut assignment = vec![usize::MAX; pool.samples.len()];
    let mut drawn = vec![0usize; num_clients];
    let max_size = sizes.iter().copied().max().unwrap_or(0);
    for _ in 0..max_size {
        for m in 0..num_clients {
            if drawn[m] >= sizes[m] {
                continue;
            }
            let coarse_open: Vec<bool> = fine_in
                .iter()
                .map(|f| f.iter().any(|&c| !remaining[c].is_empty()))
                .collect();
            let rng = &mut rngs[m];
            let g = pick_weighted(&coarse_mix[m], &coarse_open, rng).expect("pool not exhausted");
            let fine_open: Vec<bool> =
                fine_in[g].iter().map(|&c| !remaining[c].is_empty()).collect();
            let j = pick_weighted(&fine_mix[m][g], &fine_open, rng).expect("coarse label open");
            let idx = remaining[fine_in[g][j]].pop().expect("fine label open");
            assignment[idx] = m;
            drawn[m] += 1;
        }
    }
    debug_assert!(assignment.iter().all(|&a| a < num_clients));
    Ok(Partition { assignment, num_clients, alpha, seed })
}

/// One client's samples split into train/validation/test.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ClientDataset {
    pub fn n_total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Training plus validation samples.
    pub fn train_val(&self) -> Vec<Sample> {
        self.train.iter().chain(&self.val).cloned().collect()
    }
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

/// Split sizes for `n` samples: floor each quota, hand out the remainder by
/// largest fractional part, then make sure every split with a positive
/// ratio holds at least one sample.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let c = largest_remainder(&ratios, n);
    let mut counts = [c[0], c[1], c[2]];
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

pub fn split_client(
    client_id: usize,
    mut samples: Vec<Sample>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<ClientDataset> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return config_err("split ratios must be non-negative and sum to 1");
    }
    if samples.len() < 3 {
        return Err(FedError::DegenerateClient { client: client_id, count: samples.len() });
    }
    let [n_train, n_val, _] = split_counts(samples.len(), ratios);
    samples.shuffle(&mut seed::rng(seed));
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(ClientDataset { client_id, train: samples, val, test })
}

/// Splits every client's samples with a per-client derived seed.
pub fn split_clients(
    per_client: Vec<Vec<Sample>>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    per_client
        .into_iter()
        .enumerate()
        .map(|(m, s)| split_client(m, s, ratios, seed::child(seed, m as u64)))
        .collect()
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at
/// most one (earlier chunks are larger).
fn chunk_evenly<T: Clone>(items: &[T], parts: usize) -> Vec<Vec<T>> {
    let sizes = largest_remainder(&vec![1.0; parts], items.len());
    let mut start = 0;
    sizes
        .into_iter()
        .map(|s| {
            let chunk = items[start..start + s].to_vec();
            start += s;
            chunk
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSpec {
    pub num_clients: usize,
    pub alpha: f64,
    /// Step at which the shift happens.
    pub t0: usize,
    /// Total number of arriving batches.
    pub horizon: usize,
    pub ratios: [f64; 3],
    /// Seed of the partition defining the pre-shift datasets.
    pub seed_before: u64,
    /// Seed of the partition defining the post-shift datasets.
    pub seed_after: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftClient {
    pub client_id: usize,
    pub before: ClientDataset,
    pub after: ClientDataset,
    /// First half of the pre-shift training split, used for the initial
    /// datastore.
    pub initial: Vec<Sample>,
    /// `horizon` arriving batches: the first `t0` from the pre-shift
    /// training split, the rest from the post-shift one.
    pub batches: Vec<Vec<Sample>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftScenario {
    pub clients: Vec<DriftClient>,
    pub t0: usize,
    pub horizon: usize,
}

pub fn make_drift_scenario(pool: &LabeledPool, spec: &DriftSpec) -> Result<DriftScenario> {
    if spec.t0 == 0 || spec.t0 >= spec.horizon {
        return config_err(format!(
            "drift needs 0 < t0 < T, got t0={} T={}",
            spec.t0, spec.horizon
        ));
    }
    let first = dirichlet_partition(pool, spec.num_clients, spec.alpha, spec.seed_before)?
        .client_samples(pool);
    let second = dirichlet_partition(pool, spec.num_clients, spec.alpha, spec.seed_after)?
        .client_samples(pool);

    let mut clients = Vec::with_capacity(spec.num_clients);
    for (m, (mut s, mut s_new)) in first.into_iter().zip(second).enumerate() {
        if s.len() > s_new.len() {
            std::mem::swap(&mut s, &mut s_new);
        }
        let before =
            split_client(m, s, spec.ratios, seed::child(seed::tagged(spec.seed_before, "split"), m as u64))?;
        let after = split_client(
            m,
            s_new,
            spec.ratios,
            seed::child(seed::tagged(spec.seed_after, "split"), m as u64),
        )?;
        let half = before.train.len() / 2;
        let initial = before.train[..half].to_vec();
        let rest = &before.train[half..];
        let post = spec.horizon - spec.t0;
        if rest.len() < spec.t0 || after.train.len() < post {
            return config_err(format!(
                "client {m} has too few training samples for the drift schedule \
                 ({} pre-shift for {} batches, {} post-shift for {} batches)",
                rest.len(),
                spec.t0,
                after.train.len(),
                post
            ));
        }
        let mut batches = chunk_evenly(rest, spec.t0);
        batches.extend(chunk_evenly(&after.train, post));
        clients.push(DriftClient { client_id: m, before, after, initial, batches });
    }
    Ok(DriftScenario { clients, t0: spec.t0, horizon: spec.horizon })
}

/// Shannon entropy (nats) of the label histogram of `samples`.
pub fn label_entropy(samples: &[Sample], num_classes: usize) -> f64 {
    let mut counts = vec![0usize; num_classes];
    for s in samples {
        counts[s.y] += 1;
    }
    let n = samples.len() as f64;
    counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

const CLIENT_MAGIC: &[u8; 4] = b"FMCD";
const CLIENT_VERSION: u32 = 1;

/// Binary client file: magic `FMCD`, version, then u32 client id, train,
/// val and test counts, feature dim and number of classes, followed by one
/// row per sample (train, val, test order): u32 label then f32 features.
/// All little-endian.
pub fn encode_client(client: &ClientDataset, num_classes: usize) -> Vec<u8> {
    let dim = client
        .train
        .iter()
        .chain(&client.val)
        .chain(&client.test)
        .next()
        .map_or(0, |s| s.x.len());
    let mut out = Vec::new();
    out.extend_from_slice(CLIENT_MAGIC);
    for v in [
        CLIENT_VERSION,
        client.client_id as u32,
        client.train.len() as u32,
        client.val.len() as u32,
        client.test.len() as u32,
        dim as u32,
        num_classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in client.train.iter().chain(&client.val).chain(&client.test) {
        out.extend_from_slice(&(s.y as u32).to_le_bytes());
        for v in &s.x {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_client`]; returns the dataset and the class count.
pub fn decode_client(bytes: &[u8]) -> Result<(ClientDataset, usize)> {
    let mut r = crate::io::Reader::new(bytes);
    if r.take(4)? != CLIENT_MAGIC {
        return Err(FedError::Format("bad client file magic".into()));
    }
    let version = r.u32()?;
    if version != CLIENT_VERSION {
        return Err(FedError::Format(format!("unsupported client file version {version}")));
    }
    let id = r.u32()? as usize;
    let counts = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let mut read = |n: usize| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                let y = r.u32()? as usize;
                let x = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
                Ok(Sample::new(x, y))
            })
            .collect()
    };
    let train = read(counts[0])?;
    let val = read(counts[1])?;
    let test = read(counts[2])?;
    r.finish()?;
    Ok((ClientDataset { client_id: id, train, val, test }, classes))
}

/// Writes `client_NNNN.bin` per client plus a key=value `manifest.txt`.
pub fn export_scenario(
    dir: &Path,
    clients: &[ClientDataset],
    num_classes: usize,
    manifest: &[(String, String)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in clients {
        std::fs::write(dir.join(format!("client_{:04}.bin", c.client_id)), encode_client(c, num_classes))?;
    }
    let mut text = String::new();
    for (k, v) in manifest {
        text.push_str(&format!("{k}={v}\n"));
    }
    text.push_str(&format!("num_clients={}\n", clients.len()));
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}
