//! Personalized prediction: a kernel-weighted kNN label posterior over the
//! client's datastore, mixed with the global model's output.

use rayon::prelude::*;

use crate::data::Sample;
use crate::datastore::{NeighborIndex, Neighborhood};
use crate::error::{config_err, input_err, FedError, Result};
use crate::nn::{softmax, Model};

pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub k: usize,
    pub sigma: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { k: 10, sigma: 1.0 }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return config_err("k must be at least 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return config_err("sigma must be positive");
        }
        Ok(())
    }
}

/// `[h]_y ∝ Σ_i 1{y = y_i} exp(-d_i)`. Weights are computed relative to the
/// closest neighbor, which cancels in the normalization and keeps far
/// neighborhoods from underflowing.
pub fn knn_posterior(neighborhood: &Neighborhood, num_classes: usize) -> Result<Vec<f64>> {
    let nb = &neighborhood.neighbors;
    if nb.is_empty() {
        return Err(FedError::EmptyNeighborhood);
    }
    let d_min = nb.iter().map(|n| n.distance).fold(f64::INFINITY, f64::min);
    let mut post = vec![0.0; num_classes];
    for n in nb {
        if n.label >= num_classes {
            return input_err(format!("neighbor label {} out of range", n.label));
        }
        post[n.label] += (-(n.distance - d_min)).exp();
    }
    let total: f64 = post.iter().sum();
    post.iter_mut().for_each(|p| *p /= total);
    Ok(post)
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= -1e-6)) || (sum - 1.0).abs() > 1e-6 {
        return input_err(format!("{what} is not a probability vector"));
    }
    Ok(())
}

/// `lambda * knn + (1 - lambda) * global`.
pub fn interpolate(knn: &[f64], global: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if knn.len() != global.len() {
        return input_err("posteriors have different lengths");
    }
    if !(0.0..=1.0).contains(&lambda) {
        return input_err(format!("lambda {lambda} outside [0, 1]"));
    }
    check_simplex(knn, "kNN posterior")?;
    check_simplex(global, "global posterior")?;
    Ok(knn.iter().zip(global).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Global model plus a client datastore.
pub struct PersonalizedPredictor<'a, S: NeighborIndex + ?Sized> {
    pub model: &'a Model,
    pub store: &'a S,
    pub kernel: KernelConfig,
    pub lambda: f64,
}

impl<'a, S: NeighborIndex + ?Sized> PersonalizedPredictor<'a, S> {
    pub fn new(model: &'a Model, store: &'a S, kernel: KernelConfig, lambda: f64) -> Result<Self> {
        kernel.validate()?;
        if !(0.0..=1.0).contains(&lambda) {
            return config_err(format!("lambda {lambda} outside [0, 1]"));
        }
        if store.dim() != model.repr_dim() {
            return config_err(format!(
                "datastore keys have dimension {}, model representation has {}",
                store.dim(),
                model.repr_dim()
            ));
        }
        Ok(PersonalizedPredictor { model, store, kernel, lambda })
    }

    /// Global and kNN posteriors for `x`; the latter is `None` when the
    /// store is empty.
    pub fn posteriors(&self, x: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let f = self.model.forward(x)?;
        let global = softmax(&f.logits);
        if self.store.is_empty() {
            return Ok((global, None));
        }
        let nb = self.store.knn_query(&f.repr, self.kernel.k, self.kernel.sigma)?;
        let knn = knn_posterior(&nb, self.model.num_classes())?;
        Ok((global, Some(knn)))
    }

    /// Falls back to the global output when the store is empty.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.posteriors(x)? {
            (global, None) => Ok(global),
            (global, Some(knn)) => interpolate(&knn, &global, self.lambda),
        }
    }

    pub fn evaluate(&self, test: &[Sample]) -> Result<f64> {
        let cache = PosteriorCache::build(self, test)?;
        Ok(cache.accuracy(self.lambda))
    }
}

/// Posteriors of a fixed sample set, computed once so that many mixing
/// weights can be scored without repeating the forward pass and search.
#[derive(Debug, Clone)]
pub struct PosteriorCache {
    rows: Vec<(Vec<f64>, Option<Vec<f64>>, usize)>,
}

impl PosteriorCache {
    pub fn build<S: NeighborIndex + ?Sized>(pred: &PersonalizedPredictor<'_, S>, samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return input_err("no samples to evaluate");
        }
        let rows = samples
            .par_iter()
            .map(|s| {
                let (g, k) = pred.posteriors(&s.x)?;
                Ok((g, k, s.y))
            })
            .collect::<Result<_>>()?;
        Ok(PosteriorCache { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Accuracy of the mixture at `lambda`.
    pub fn accuracy(&self, lambda: f64) -> f64 {
        let correct = self
            .rows
            .iter()
            .filter(|(g, k, y)| {
                let pred = match k {
                    Some(k) => {
                        let mixed: Vec<f64> =
                            k.iter().zip(g).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
                        argmax(&mixed)
                    }
                    None => argmax(g),
                };
                pred == *y
            })
            .count();
        correct as f64 / self.rows.len() as f64
    }

    /// Best grid point; ties go to the smaller lambda.
    pub fn best_lambda(&self, grid: &[f64]) -> (f64, f64) {
        let mut best = (f64::INFINITY, f64::NEG_INFINITY);
        for &l in grid {
            let acc = self.accuracy(l);
            if acc > best.1 || (acc == best.1 && l < best.0) {
                best = (l, acc);
            }
        }
        best
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return config_err("lambda grid values must lie in [0, 1]");
    }
    if !grid.contains(&0.0) || !grid.contains(&1.0) {
        return config_err("lambda grid must contain 0 and 1");
    }
    Ok(())
}

/// Grid search of the mixing weight on validation data. Returns the chosen
/// lambda and its validation accuracy.
pub fn tune_lambda<S: NeighborIndex + ?Sized>(
    model: &Model,
    store: &S,
    kernel: KernelConfig,
    val: &[Sample],
    grid: &[f64],
) -> Result<(f64, f64)> {
    validate_grid(grid)?;
    if val.is_empty() {
        return input_err("empty validation set");
    }
    let pred = PersonalizedPredictor::new(model, store, kernel, 0.0)?;
    let cache = PosteriorCache::build(&pred, val)?;
    Ok(cache.best_lambda(grid))
}
