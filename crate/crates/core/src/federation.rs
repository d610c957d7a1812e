//! Simulated federated averaging and the non-memorizing baselines.
//!
//! Aggregation weighs every client by `n_m / n` over the *whole* population:
//! clients that did not participate in a round contribute the current global
//! parameters. This differs from vanilla FedAvg, which renormalizes over the
//! participants only.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::data::{ClientDataset, Sample};
use crate::error::{config_err, input_err, Result};
use crate::nn::Model;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    /// Fraction of clients sampled per round, in (0, 1].
    pub participation: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `(round, factor)`: from `round` on the learning rate is multiplied by
    /// `factor`. Factors compound.
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 100,
            participation: 1.0,
            local_epochs: 1,
            batch_size: 16,
            lr: 0.05,
            lr_schedule: Vec::new(),
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return config_err(format!("participation {} outside (0, 1]", self.participation));
        }
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return config_err("learning rate must be non-negative");
        }
        if self.lr_schedule.iter().any(|&(_, f)| !(f > 0.0)) {
            return config_err("learning-rate factors must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|&&(r, _)| round >= r)
            .fold(self.lr, |lr, &(_, f)| lr * f)
    }

    /// Learning rate after the whole schedule has been applied.
    pub fn final_lr(&self) -> f64 {
        self.lr_schedule.iter().fold(self.lr, |lr, &(_, f)| lr * f)
    }

    /// `ceil(q * M)`, at least one.
    pub fn participants_per_round(&self, num_clients: usize) -> usize {
        ((self.participation * num_clients as f64 - 1e-9).ceil() as usize).clamp(1, num_clients)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Mean training cross-entropy of the aggregated model over all clients.
    pub global_loss: f64,
}

/// `epochs` passes of mini-batch SGD over `train`, reshuffled per epoch.
pub fn local_update(
    model: &Model,
    train: &[Sample],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Model> {
    if train.is_empty() {
        return input_err("local update on an empty training set");
    }
    if batch_size == 0 {
        return config_err("batch size must be positive");
    }
    let mut model = model.clone();
    if lr == 0.0 {
        return Ok(model);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut seed::rng(seed::child(seed, epoch as u64)));
        for chunk in order.chunks(batch_size) {
            let (_, grad) = model.loss_and_grad(chunk.iter().map(|&i| &train[i]))?;
            model.sgd_step(&grad, lr)?;
        }
    }
    Ok(model)
}

/// Weighted model average where non-participants contribute the current
/// global model `w`:
///
/// * every client reporting: `sum_m n_m w_m / n`;
/// * otherwise `w + sum_{m in S} (n_m / n) (w_m - w)`, the same quantity
///   rearranged so that the empty round returns `w` untouched.
///
/// A coordinate on which every participant agrees with `w` keeps `w`'s
/// value exactly. `weights[m]` is client `m`'s sample count; `updates`
/// holds the participants' models keyed by client id.
pub fn aggregate(global: &Model, updates: &[(usize, Model)], weights: &[usize]) -> Result<Model> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return config_err("client weights sum to zero");
    }
    let mut seen = vec![false; weights.len()];
    for (m, model) in updates {
        if *m >= weights.len() {
            return config_err(format!("participant {m} is not a known client"));
        }
        if std::mem::replace(&mut seen[*m], true) {
            return config_err(format!("client {m} reported twice"));
        }
        if !model.same_layout(global) {
            return config_err(format!("client {m} model layout differs from the global model"));
        }
    }
    // One client holding every sample: the result is its model, bit for bit.
    if let [(m, model)] = updates {
        if weights[*m] == total {
            return Ok(model.clone());
        }
    }
    let mut out = global.clone();
    if updates.is_empty() {
        return Ok(out);
    }
    let base = global.params();
    let reported: usize = updates.iter().map(|(m, _)| weights[*m]).sum();
    let full = reported == total;
    for (i, o) in out.params_mut().iter_mut().enumerate() {
        let g = base[i];
        if updates.iter().all(|(_, model)| model.params()[i] == g) {
            continue;
        }
        *o = if full {
            let mut acc = 0.0;
            for (m, model) in updates {
                acc += weights[*m] as f64 * model.params()[i];
            }
            acc / total as f64
        } else {
            let mut acc = g;
            for (m, model) in updates {
                acc += weights[*m] as f64 / total as f64 * (model.params()[i] - g);
            }
            acc
        };
    }
    Ok(out)
}

fn sample_participants(num_clients: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut picked = index::sample(&mut seed::rng(seed), num_clients, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Mean cross-entropy over every client's training split.
pub fn population_loss(model: &Model, clients: &[ClientDataset]) -> Result<f64> {
    let per_client: Vec<(f64, usize)> = clients
        .par_iter()
        .filter(|c| !c.train.is_empty())
        .map(|c| Ok((model.loss(&c.train)? * c.train.len() as f64, c.train.len())))
        .collect::<Result<_>>()?;
    let n: usize = per_client.iter().map(|p| p.1).sum();
    Ok(per_client.iter().map(|p| p.0).sum::<f64>() / n as f64)
}

/// Seed of client `m`'s local update in `round`.
pub fn local_seed(cfg_seed: u64, round: usize, client: usize) -> u64 {
    seed::child(seed::child(seed::tagged(cfg_seed, "local"), round as u64), client as u64)
}

/// FedAvg over `clients`, starting from `init`. Returns the final model and
/// one log per round.
pub fn run_fedavg(clients: &[ClientDataset], init: &Model, cfg: &FedConfig) -> Result<(Model, Vec<RoundLog>)> {
    run_fedavg_with(clients, init, cfg, |_, _| Ok(()))
}

/// [`run_fedavg`] with a callback invoked after each aggregation.
pub fn run_fedavg_with<F>(
    clients: &[ClientDataset],
    init: &Model,
    cfg: &FedConfig,
    mut on_round: F,
) -> Result<(Model, Vec<RoundLog>)>
where
    F: FnMut(usize, &Model) -> Result<()>,
{
    if clients.is_empty() {
        return config_err("federation needs at least one client");
    }
    cfg.validate()?;
    let weights: Vec<usize> = clients.iter().map(|c| c.train.len()).collect();
    let count = cfg.participants_per_round(clients.len());
    let sample_seed = seed::tagged(cfg.seed, "sample");
    let mut global = init.clone();
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let participants = sample_participants(clients.len(), count, seed::child(sample_seed, round as u64));
        let lr = cfg.lr_at(round);
        let updates: Vec<(usize, Model)> = participants
            .par_iter()
            .map(|&m| {
                let seed = local_seed(cfg.seed, round, m);
                local_update(&global, &clients[m].train, cfg.local_epochs, lr, cfg.batch_size, seed)
                    .map(|model| (m, model))
            })
            .collect::<Result<_>>()?;
        global = aggregate(&global, &updates, &weights)?;
        let global_loss = population_loss(&global, clients)?;
        on_round(round, &global)?;
        logs.push(RoundLog { round, participants, global_loss });
    }
    Ok((global, logs))
}

/// FedAvg+ baseline: a few local epochs starting from the global model.
pub fn fine_tune(
    global: &Model,
    client: &ClientDataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Model> {
    local_update(global, &client.train, epochs, lr, batch_size, seed)
}

/// Local baseline: a fresh model trained on the client's data only.
pub fn train_local(
    client: &ClientDataset,
    template: &Model,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Model> {
    let init = Model::init(
        template.layers().to_vec(),
        template.repr_index(),
        seed::tagged(seed, "init"),
    )?;
    local_update(&init, &client.train, epochs, lr, batch_size, seed::tagged(seed, "sgd"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_clients, DEFAULT_SPLIT};
    use crate::nn::{Activation, Gradient, LayerSpec};

    fn scalar(v: f64) -> Model {
        // one identity layer 1 -> 1 without input: weight v, bias 0
        Model::from_params(vec![LayerSpec::new(1, 1, Activation::Identity)], 0, vec![v, 0.0]).unwrap()
    }

    #[test]
    fn participant_counts() {
        let cfg = FedConfig { participation: 0.1, ..FedConfig::default() };
        assert_eq!(cfg.participants_per_round(20), 2);
        assert_eq!(cfg.participants_per_round(5), 1);
        assert_eq!(cfg.participants_per_round(1), 1);
        let cfg = FedConfig { participation: 0.25, ..FedConfig::default() };
        assert_eq!(cfg.participants_per_round(10), 3);
    }

    #[test]
    fn lr_schedule_compounds() {
        let cfg = FedConfig { lr: 1.0, lr_schedule: vec![(100, 0.1), (150, 0.1)], ..FedConfig::default() };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert_eq!(cfg.lr_at(99), 1.0);
        assert!((cfg.lr_at(100) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(150) - 0.01).abs() < 1e-15);
        assert_eq!(cfg.final_lr(), cfg.lr_at(1000));
    }

    #[test]
    fn aggregation_examples() {
        let g = scalar(0.0);
        assert_eq!(aggregate(&g, &[], &[1, 3]).unwrap(), g);
        let out = aggregate(&g, &[(0, scalar(0.0)), (1, scalar(4.0))], &[1, 3]).unwrap();
        assert_eq!(out.params()[0], 3.0);
        let fixed = aggregate(&scalar(2.5), &[(0, scalar(2.5)), (1, scalar(2.5))], &[1, 3]).unwrap();
        assert_eq!(fixed, scalar(2.5));
        // partial participation: only client 1 (n=3 of 4) moves
        let part = aggregate(&scalar(1.0), &[(1, scalar(5.0))], &[1, 3]).unwrap();
        assert_eq!(part.params()[0], 4.0);
        // clients with no training data carry no weight
        let out = aggregate(&scalar(9.0), &[(0, scalar(0.0)), (1, scalar(4.0))], &[1, 3, 0]).unwrap();
        assert_eq!(out.params()[0], 3.0);
    }

    #[test]
    fn full_participation_is_the_weighted_mean() {
        let g = Model::mlp(&[3, 4, 2], 0).unwrap();
        let weights = [5, 1, 7];
        let updates: Vec<(usize, Model)> = (0..3).map(|m| (m, Model::mlp(&[3, 4, 2], 10 + m as u64).unwrap())).collect();
        let out = aggregate(&g, &updates, &weights).unwrap();
        for i in 0..g.num_params() {
            let expect = (5.0 * updates[0].1.params()[i] + 1.0 * updates[1].1.params()[i] + 7.0 * updates[2].1.params()[i]) / 13.0;
            assert_eq!(out.params()[i], expect);
        }
        // biases start at zero everywhere, so they stay exactly zero
        let fixed = aggregate(&g, &[(0, g.clone()), (1, g.clone()), (2, g.clone())], &weights).unwrap();
        assert_eq!(fixed, g);
    }

    #[test]
    fn aggregation_rejects_bad_input() {
        let g = scalar(0.0);
        assert!(aggregate(&g, &[(2, scalar(1.0))], &[1, 1]).is_err());
        assert!(aggregate(&g, &[(0, scalar(1.0)), (0, scalar(1.0))], &[1, 1]).is_err());
        let other = Model::mlp(&[1, 2, 1], 0).unwrap();
        assert!(aggregate(&g, &[(0, other)], &[1, 1]).is_err());
    }

    fn toy_clients(m: usize) -> Vec<ClientDataset> {
        let per: Vec<Vec<Sample>> = (0..m)
            .map(|c| {
                (0..20)
                    .map(|i| {
                        let y = (i + c) % 2;
                        let x = vec![if y == 0 { -1.0 } else { 1.0 } + 0.1 * i as f64, 0.5];
                        Sample::new(x, y)
                    })
                    .collect()
            })
            .collect();
        split_clients(per, DEFAULT_SPLIT, 3).unwrap()
    }

    #[test]
    fn local_update_no_ops() {
        let m = Model::mlp(&[2, 4, 2], 1).unwrap();
        let c = toy_clients(1);
        assert_eq!(local_update(&m, &c[0].train, 0, 0.1, 4, 1).unwrap(), m);
        assert_eq!(local_update(&m, &c[0].train, 3, 0.0, 4, 1).unwrap(), m);
        assert!(local_update(&m, &[], 1, 0.1, 4, 1).is_err());
    }

    #[test]
    fn single_full_batch_step_matches_closed_form() {
        // linear softmax model: gradient of mean CE is (p - onehot) x^T / B
        let layers = vec![LayerSpec::new(2, 2, Activation::Identity)];
        let m = Model::from_params(layers.clone(), 0, vec![0.1, -0.2, 0.3, 0.4, 0.0, 0.05]).unwrap();
        let batch = vec![Sample::new(vec![1.0, 2.0], 0), Sample::new(vec![-1.0, 0.5], 1)];
        let updated = local_update(&m, &batch, 1, 0.5, 2, 9).unwrap();

        let w = m.params();
        let mut grad = vec![0.0; 6];
        for s in &batch {
            let z = [
                w[0] * s.x[0] + w[1] * s.x[1] + w[4],
                w[2] * s.x[0] + w[3] * s.x[1] + w[5],
            ];
            let e = [z[0].exp(), z[1].exp()];
            let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            for o in 0..2 {
                let d = (p[o] - if o == s.y { 1.0 } else { 0.0 }) / 2.0;
                grad[o * 2] += d * s.x[0];
                grad[o * 2 + 1] += d * s.x[1];
                grad[4 + o] += d;
            }
        }
        for i in 0..6 {
            assert!((updated.params()[i] - (w[i] - 0.5 * grad[i])).abs() < 1e-14);
        }
        // same thing through the public step
        let mut manual = m.clone();
        manual.sgd_step(&Gradient { values: grad }, 0.5).unwrap();
        assert!(manual.params().iter().zip(updated.params()).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn fedavg_zero_rounds_and_determinism() {
        let clients = toy_clients(4);
        let init = Model::mlp(&[2, 4, 2], 1).unwrap();
        let cfg = FedConfig { rounds: 0, ..FedConfig::default() };
        let (out, logs) = run_fedavg(&clients, &init, &cfg).unwrap();
        assert_eq!(out, init);
        assert!(logs.is_empty());

        let cfg = FedConfig { rounds: 5, participation: 0.5, batch_size: 4, ..FedConfig::default() };
        let a = run_fedavg(&clients, &init, &cfg).unwrap();
        let b = run_fedavg(&clients, &init, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.1.iter().all(|l| l.participants.len() == 2));
        assert!(run_fedavg(&[], &init, &cfg).is_err());
    }

    #[test]
    fn single_client_fedavg_is_centralized_sgd() {
        let clients = toy_clients(1);
        let init = Model::mlp(&[2, 4, 2], 1).unwrap();
        let cfg = FedConfig {
            rounds: 6,
            batch_size: 3,
            lr: 0.2,
            lr_schedule: vec![(3, 0.5)],
            seed: 17,
            ..FedConfig::default()
        };
        let (fed, _) = run_fedavg(&clients, &init, &cfg).unwrap();
        let mut central = init.clone();
        for round in 0..cfg.rounds {
            central = local_update(
                &central,
                &clients[0].train,
                cfg.local_epochs,
                cfg.lr_at(round),
                cfg.batch_size,
                local_seed(cfg.seed, round, 0),
            )
            .unwrap();
        }
        assert_eq!(fed, central);
    }

    #[test]
    fn participation_frequency_matches_fraction() {
        // chi-square goodness of fit over participation counts
        let m = 10;
        let count = 3;
        let rounds = 2000;
        let mut freq = vec![0usize; m];
        for r in 0..rounds {
            let p = sample_participants(m, count, seed::child(42, r));
            let mut dedup = p.clone();
            dedup.dedup();
            assert_eq!(dedup.len(), count);
            p.into_iter().for_each(|c| freq[c] += 1);
        }
        let expected = (rounds as usize * count) as f64 / m as f64;
        let chi2: f64 = freq.iter().map(|&f| (f as f64 - expected).powi(2) / expected).sum();
        // 9 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 27.88, "chi2 {chi2}, freq {freq:?}");
    }

    #[test]
    fn single_class_memorization() {
        let per = vec![(0..30).map(|i| Sample::new(vec![i as f64 * 0.1, 1.0], 1)).collect()];
        let clients = split_clients(per, DEFAULT_SPLIT, 0).unwrap();
        let global = Model::mlp(&[2, 6, 3], 4).unwrap();
        let tuned = fine_tune(&global, &clients[0], 30, 0.1, 4, 2).unwrap();
        let local = train_local(&clients[0], &global, 30, 0.1, 4, 2).unwrap();
        for model in [&tuned, &local] {
            for s in &clients[0].train {
                assert!(model.predict_proba(&s.x).unwrap()[1] > 0.9);
            }
        }
        assert_eq!(fine_tune(&global, &clients[0], 0, 0.1, 4, 2).unwrap(), global);
        assert_eq!(tuned, fine_tune(&global, &clients[0], 30, 0.1, 4, 2).unwrap());
        assert_eq!(local, train_local(&clients[0], &global, 30, 0.1, 4, 2).unwrap());
        // zero epochs: the fresh initialization
        let fresh = train_local(&clients[0], &global, 0, 0.1, 4, 2).unwrap();
        assert_eq!(fresh, Model::init(global.layers().to_vec(), global.repr_index(), seed::tagged(2, "init")).unwrap());
    }
}
