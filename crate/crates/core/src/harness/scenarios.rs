//! Experiment scenarios. Each one derives every random choice from the
//! master seed, so a config plus a seed fixes the output.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{ExperimentConfig, Partitioner};
use super::report::{metrics, LambdaRow, MetricRow, Metrics, Report, RoundRow, TimelineRow};
use crate::data::{
    dirichlet_partition, make_drift_scenario, make_synthetic_pool, pachinko_partition, split_clients,
    ClientDataset, DriftSpec, LabeledPool, Sample,
};
use crate::datastore::{embed_samples, retained_count, Datastore, NeighborIndex, Policy};
use crate::error::{config_err, Result};
use crate::federation::{fine_tune, local_update, run_fedavg, train_local};
use crate::nn::Model;
use crate::personalize::{tune_lambda, KernelConfig, PersonalizedPredictor};
use crate::seed;

pub fn make_pool(cfg: &ExperimentConfig) -> Result<LabeledPool> {
    make_synthetic_pool(&cfg.data()?.pool_spec(seed::tagged(cfg.seed, "pool")))
}

/// Partitions and splits the pool; `alpha` overrides `[data].alpha`.
pub fn make_clients(cfg: &ExperimentConfig, pool: &LabeledPool, alpha: Option<f64>) -> Result<Vec<ClientDataset>> {
    let data = cfg.data()?;
    let alpha = alpha.unwrap_or(data.alpha);
    let part_seed = seed::tagged(cfg.seed, "partition");
    let partition = match data.partitioner {
        Partitioner::Dirichlet => dirichlet_partition(pool, data.num_clients, alpha, part_seed)?,
        Partitioner::Pachinko => pachinko_partition(pool, data.num_clients, alpha, data.beta, part_seed)?,
    };
    split_clients(partition.client_samples(pool), data.split, seed::tagged(cfg.seed, "split"))
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<Model> {
    let data = cfg.data()?;
    let mut dims = vec![data.feature_dim];
    dims.extend(&cfg.model.hidden);
    dims.push(data.num_classes);
    Model::mlp(&dims, seed::tagged(cfg.seed, "init"))
}

pub fn train_global(cfg: &ExperimentConfig, clients: &[ClientDataset], run: &str) -> Result<(Model, Vec<RoundRow>)> {
    let fed = cfg.fed()?.fed_config(seed::tagged(cfg.seed, "fed"));
    let (model, logs) = run_fedavg(clients, &init_model(cfg)?, &fed)?;
    let rows = logs.into_iter().map(|log| RoundRow { run: run.to_string(), log }).collect();
    Ok((model, rows))
}

/// Datastore keeping `fraction` of `samples`; zero yields an empty store.
pub fn build_store(model: &Model, samples: &[Sample], fraction: f64, seed: u64) -> Result<Datastore> {
    if samples.is_empty() || retained_count(samples.len(), fraction) == 0 {
        return Datastore::new(model.repr_dim(), Policy::Fixed, None);
    }
    Datastore::build(model, samples, fraction, seed)
}

fn store_seed(cfg: &ExperimentConfig, client: usize) -> u64 {
    seed::child(seed::tagged(cfg.seed, "store"), client as u64)
}

/// kNN-Per outcome on one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub client_id: usize,
    pub n_m: usize,
    pub store_size: usize,
    pub lambda: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub train_acc: Option<f64>,
}

impl ClientOutcome {
    fn lambda_row(&self) -> LambdaRow {
        LambdaRow {
            client_id: self.client_id,
            n_m: self.store_size,
            lambda_star: self.lambda,
            val_acc: self.val_acc,
            test_acc: self.test_acc,
        }
    }
}

/// Builds the client's store, tunes lambda on validation data and scores
/// the test split.
pub fn personalize_client(
    cfg: &ExperimentConfig,
    model: &Model,
    client: &ClientDataset,
    kernel: KernelConfig,
    capacity: f64,
    with_train_acc: bool,
) -> Result<ClientOutcome> {
    let p = &cfg.personalize;
    let seed = store_seed(cfg, client.client_id);
    let store = build_store(model, &client.train, capacity, seed)?;
    let (lambda, val_acc) = tune_lambda(model, &store, kernel, &client.val, &p.lambda_grid)?;
    let store = if p.retrain_on_train_val {
        build_store(model, &client.train_val(), capacity, seed)?
    } else {
        store
    };
    let pred = PersonalizedPredictor::new(model, &store, kernel, lambda)?;
    let test_acc = pred.evaluate(&client.test)?;
    let train_acc = if with_train_acc { Some(pred.evaluate(&client.train)?) } else { None };
    Ok(ClientOutcome {
        client_id: client.client_id,
        n_m: client.n_total(),
        store_size: store.len(),
        lambda,
        val_acc,
        test_acc,
        train_acc,
    })
}

fn personalize_all(
    cfg: &ExperimentConfig,
    model: &Model,
    clients: &[&ClientDataset],
    kernel: KernelConfig,
    capacity: impl Fn(&ClientDataset) -> f64 + Sync,
    with_train_acc: bool,
) -> Result<Vec<ClientOutcome>> {
    clients
        .par_iter()
        .map(|c| personalize_client(cfg, model, c, kernel, capacity(c), with_train_acc))
        .collect()
}

fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    let correct = samples
        .par_iter()
        .map(|s| Ok(usize::from(crate::personalize::argmax(&model.predict_proba(&s.x)?) == s.y)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / samples.len() as f64)
}

fn global_accuracies(model: &Model, clients: &[&ClientDataset]) -> Result<Vec<(usize, f64)>> {
    clients.par_iter().map(|c| Ok((c.n_total(), accuracy(model, &c.test)?))).collect()
}

fn outcome_metrics(outcomes: &[ClientOutcome]) -> Result<Metrics> {
    metrics(&outcomes.iter().map(|o| (o.n_m, o.test_acc)).collect::<Vec<_>>())
}

fn row(group: &str, method: &str, settings: Vec<(&'static str, String)>, metrics: Metrics) -> MetricRow {
    MetricRow { group: group.into(), method: method.into(), settings, metrics }
}

/// Local, FedAvg, FedAvg+ and kNN-Per on every client.
pub fn compare(cfg: &ExperimentConfig) -> Result<Report> {
    let fed = cfg.fed()?;
    let pool = make_pool(cfg)?;
    let clients = make_clients(cfg, &pool, None)?;
    let refs: Vec<&ClientDataset> = clients.iter().collect();
    let (model, rounds) = train_global(cfg, &clients, "fedavg")?;
    let fed_cfg = fed.fed_config(0);

    let local_seed = seed::tagged(cfg.seed, "local_baseline");
    let local: Vec<(usize, f64)> = clients
        .par_iter()
        .map(|c| {
            let m = train_local(
                c,
                &model,
                fed.local_baseline_epochs,
                fed.lr,
                fed.batch_size,
                seed::child(local_seed, c.client_id as u64),
            )?;
            Ok((c.n_total(), accuracy(&m, &c.test)?))
        })
        .collect::<Result<_>>()?;

    let ft_lr = fed.finetune_lr.unwrap_or_else(|| fed_cfg.final_lr());
    let ft_seed = seed::tagged(cfg.seed, "finetune");
    let plus: Vec<(usize, f64)> = clients
        .par_iter()
        .map(|c| {
            let m = fine_tune(
                &model,
                c,
                fed.finetune_epochs,
                ft_lr,
                fed.batch_size,
                seed::child(ft_seed, c.client_id as u64),
            )?;
            Ok((c.n_total(), accuracy(&m, &c.test)?))
        })
        .collect::<Result<_>>()?;

    let outcomes = personalize_all(cfg, &model, &refs, cfg.personalize.kernel(), |_| 1.0, false)?;
    Ok(Report {
        scenario: "compare".into(),
        metrics: vec![
            row("all", "local", vec![], metrics(&local)?),
            row("all", "fedavg", vec![], metrics(&global_accuracies(&model, &refs)?)?),
            row("all", "fedavg_plus", vec![], metrics(&plus)?),
            row("all", "knn_per", vec![], outcome_metrics(&outcomes)?),
        ],
        rounds,
        lambdas: outcomes.iter().map(ClientOutcome::lambda_row).collect(),
        timeline: Vec::new(),
    })
}

/// Seeded split of client ids into (federation members, newcomers). The
/// newcomers are block `fold` of one seeded permutation.
pub fn client_roles(cfg: &ExperimentConfig, num_clients: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if num_clients < 2 {
        return config_err("unseen-client evaluation needs at least two clients");
    }
    let (_, n_new) = cfg.unseen.group_sizes(num_clients);
    let start = cfg.unseen.fold * n_new;
    if start >= num_clients {
        return config_err(format!("fold {} has no clients", cfg.unseen.fold));
    }
    let mut ids: Vec<usize> = (0..num_clients).collect();
    ids.shuffle(&mut seed::rng(seed::tagged(cfg.seed, "roles")));
    let end = (start + n_new).min(num_clients);
    let mut newcomers: Vec<usize> = ids.drain(start..end).collect();
    ids.sort_unstable();
    newcomers.sort_unstable();
    Ok((ids, newcomers))
}

/// Trains on a subset of clients and personalizes on clients that never
/// took part in training.
pub fn unseen(cfg: &ExperimentConfig) -> Result<Report> {
    let pool = make_pool(cfg)?;
    let clients = make_clients(cfg, &pool, None)?;
    let (members, newcomers) = client_roles(cfg, clients.len())?;
    let train_set: Vec<ClientDataset> = members.iter().map(|&m| clients[m].clone()).collect();
    let (model, rounds) = train_global(cfg, &train_set, "members")?;

    let mut out = Vec::new();
    let mut lambdas = Vec::new();
    for (group, ids) in [("train", &members), ("new", &newcomers)] {
        let refs: Vec<&ClientDataset> = ids.iter().map(|&m| &clients[m]).collect();
        let outcomes = personalize_all(cfg, &model, &refs, cfg.personalize.kernel(), |_| 1.0, true)?;
        let split = |s: &str| vec![("split", s.to_string())];
        out.push(row(group, "fedavg", split("test"), metrics(&global_accuracies(&model, &refs)?)?));
        out.push(row(group, "knn_per", split("test"), outcome_metrics(&outcomes)?));
        let train: Vec<(usize, f64)> = outcomes.iter().map(|o| (o.n_m, o.train_acc.unwrap_or(f64::NAN))).collect();
        out.push(row(group, "knn_per", split("train"), metrics(&train)?));
        if group == "new" {
            lambdas.extend(outcomes.iter().map(ClientOutcome::lambda_row));
        }
    }
    Ok(Report { scenario: "unseen".into(), metrics: out, rounds, lambdas, timeline: Vec::new() })
}

/// Test accuracy against the fraction of local data kept in the store,
/// for each heterogeneity level.
pub fn capacity_sweep(cfg: &ExperimentConfig) -> Result<Report> {
    let sec = cfg.capacity.as_ref().expect("validated");
    let alphas = if sec.alphas.is_empty() { vec![cfg.data()?.alpha] } else { sec.alphas.clone() };
    let pool = make_pool(cfg)?;
    let mut report = Report { scenario: "capacity_sweep".into(), ..Default::default() };
    for &alpha in &alphas {
        let clients = make_clients(cfg, &pool, Some(alpha))?;
        let refs: Vec<&ClientDataset> = clients.iter().collect();
        let (model, rounds) = train_global(cfg, &clients, &format!("alpha={alpha}"))?;
        report.rounds.extend(rounds);
        for &cap in &sec.capacities {
            let outcomes = personalize_all(cfg, &model, &refs, cfg.personalize.kernel(), |_| cap, false)?;
            report.metrics.push(row(
                "all",
                "knn_per",
                vec![("alpha", alpha.to_string()), ("capacity", cap.to_string())],
                outcome_metrics(&outcomes)?,
            ));
            report.lambdas.extend(outcomes.iter().map(ClientOutcome::lambda_row));
        }
    }
    Ok(report)
}

/// Test accuracy over a grid of neighbor counts and kernel scales.
pub fn kernel_sweep(cfg: &ExperimentConfig) -> Result<Report> {
    let sec = cfg.kernel.as_ref().expect("validated");
    let pool = make_pool(cfg)?;
    let clients = make_clients(cfg, &pool, None)?;
    let refs: Vec<&ClientDataset> = clients.iter().collect();
    let (model, rounds) = train_global(cfg, &clients, "fedavg")?;
    let mut report = Report { scenario: "kernel_sweep".into(), rounds, ..Default::default() };
    for &k in &sec.k_grid {
        for &sigma in &sec.sigma_grid {
            let kernel = KernelConfig { k, sigma };
            let outcomes = personalize_all(cfg, &model, &refs, kernel, |_| 1.0, false)?;
            report.metrics.push(row(
                "all",
                "knn_per",
                vec![("k", k.to_string()), ("sigma", sigma.to_string())],
                outcome_metrics(&outcomes)?,
            ));
        }
    }
    Ok(report)
}

/// Snapshots of a centrally trained model: global, pure kNN and tuned
/// mixture accuracy at each checkpoint.
pub fn quality_sweep(cfg: &ExperimentConfig) -> Result<Report> {
    let sec = cfg.quality.as_ref().expect("validated");
    let fed = cfg.fed()?;
    let pool = make_pool(cfg)?;
    let clients = make_clients(cfg, &pool, None)?;
    let refs: Vec<&ClientDataset> = clients.iter().collect();
    let all_train: Vec<Sample> = clients.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let lr = sec.lr.unwrap_or(fed.lr);
    let train_seed = seed::tagged(cfg.seed, "central");
    let kernel = cfg.personalize.kernel();

    let mut report = Report { scenario: "quality_sweep".into(), ..Default::default() };
    let mut model = init_model(cfg)?;
    let mut epoch = 0;
    for &checkpoint in &sec.checkpoints {
        while epoch < checkpoint {
            model = local_update(&model, &all_train, 1, lr, fed.batch_size, seed::child(train_seed, epoch as u64))?;
            epoch += 1;
        }
        let settings = vec![("epoch", checkpoint.to_string())];
        report.metrics.push(row("all", "global", settings.clone(), metrics(&global_accuracies(&model, &refs)?)?));
        let knn: Vec<(usize, f64)> = refs
            .par_iter()
            .map(|c| {
                let store = build_store(&model, &c.train, 1.0, store_seed(cfg, c.client_id))?;
                let pred = PersonalizedPredictor::new(&model, &store, kernel, 1.0)?;
                Ok((c.n_total(), pred.evaluate(&c.test)?))
            })
            .collect::<Result<_>>()?;
        report.metrics.push(row("all", "knn", settings.clone(), metrics(&knn)?));
        let outcomes = personalize_all(cfg, &model, &refs, kernel, |_| 1.0, false)?;
        report.metrics.push(row("all", "knn_per", settings, outcome_metrics(&outcomes)?));
    }
    Ok(report)
}

/// Half the clients keep `1/2 - delta` of their data, the other half
/// `1/2 + delta`.
pub fn hw_split(cfg: &ExperimentConfig) -> Result<Report> {
    let sec = cfg.hw_split.as_ref().expect("validated");
    let pool = make_pool(cfg)?;
    let clients = make_clients(cfg, &pool, None)?;
    let (model, rounds) = train_global(cfg, &clients, "fedavg")?;

    let mut ids: Vec<usize> = (0..clients.len()).collect();
    ids.shuffle(&mut seed::rng(seed::tagged(cfg.seed, "hw_roles")));
    let mut weak = vec![false; clients.len()];
    for &m in &ids[..clients.len() / 2] {
        weak[m] = true;
    }

    let refs: Vec<&ClientDataset> = clients.iter().collect();
    let mut report = Report { scenario: "hw_split".into(), rounds, ..Default::default() };
    for &delta in &sec.delta_c {
        let cap = |c: &ClientDataset| if weak[c.client_id] { 0.5 - delta } else { (0.5 + delta).min(1.0) };
        let outcomes = personalize_all(cfg, &model, &refs, cfg.personalize.kernel(), cap, false)?;
        let settings = vec![("delta_c", delta.to_string())];
        for (group, keep) in [("weak", Some(true)), ("strong", Some(false)), ("all", None)] {
            let subset: Vec<ClientOutcome> = outcomes
                .iter()
                .filter(|o| keep.is_none_or(|w| weak[o.client_id] == w))
                .cloned()
                .collect();
            if subset.is_empty() {
                continue;
            }
            report.metrics.push(row(group, "knn_per", settings.clone(), outcome_metrics(&subset)?));
        }
        report.lambdas.extend(outcomes.iter().map(ClientOutcome::lambda_row));
    }
    Ok(report)
}

/// Datastore maintenance under a label-distribution shift at `t0`.
pub fn drift(cfg: &ExperimentConfig) -> Result<Report> {
    let sec = cfg.drift.as_ref().expect("validated");
    let data = cfg.data()?;
    let policies = sec.parsed_policies()?;
    let pool = make_pool(cfg)?;
    let seed_before = seed::tagged(cfg.seed, "partition");
    let spec = DriftSpec {
        num_clients: data.num_clients,
        alpha: data.alpha,
        t0: sec.t0,
        horizon: sec.horizon,
        ratios: data.split,
        seed_before,
        seed_after: if sec.identical_shift { seed_before } else { seed::tagged(cfg.seed, "partition_after") },
    };
    let scenario = make_drift_scenario(&pool, &spec)?;
    let before: Vec<ClientDataset> = scenario.clients.iter().map(|c| c.before.clone()).collect();
    let (model, rounds) = train_global(cfg, &before, "fedavg")?;
    let kernel = cfg.personalize.kernel();

    struct Prepared {
        initial: Datastore,
        lambda: f64,
        batches: Vec<Vec<(Vec<f64>, usize)>>,
    }
    let prepared: Vec<Prepared> = scenario
        .clients
        .par_iter()
        .map(|c| {
            let initial = build_store(&model, &c.initial, 1.0, store_seed(cfg, c.client_id))?;
            let lambda = match sec.lambda {
                Some(l) => l,
                None => tune_lambda(&model, &initial, kernel, &c.before.val, &cfg.personalize.lambda_grid)?.0,
            };
            let batches = c.batches.iter().map(|b| embed_samples(&model, b)).collect::<Result<_>>()?;
            Ok(Prepared { initial, lambda, batches })
        })
        .collect::<Result<_>>()?;

    let mut report = Report { scenario: "drift".into(), rounds, ..Default::default() };
    let last = sec.horizon - 1;
    for policy in policies {
        // per client: accuracy at every step plus store sizes
        let traces: Vec<Vec<(f64, usize)>> = scenario
            .clients
            .par_iter()
            .zip(&prepared)
            .map(|(c, p)| {
                let cap = (policy == Policy::Fifo).then(|| p.initial.len().max(1));
                let mut store = p.initial.clone().with_policy(policy, cap)?;
                let mut trace = Vec::with_capacity(sec.horizon);
                for (t, batch) in p.batches.iter().enumerate() {
                    store.update(batch)?;
                    let test = if t < sec.t0 { &c.before.test } else { &c.after.test };
                    let pred = PersonalizedPredictor::new(&model, &store, kernel, p.lambda)?;
                    trace.push((pred.evaluate(test)?, store.len()));
                }
                Ok(trace)
            })
            .collect::<Result<_>>()?;
        for t in 0..sec.horizon {
            let after = t >= sec.t0;
            let per_client: Vec<(usize, f64)> = scenario
                .clients
                .iter()
                .zip(&traces)
                .map(|(c, tr)| (if after { c.after.n_total() } else { c.before.n_total() }, tr[t].0))
                .collect();
            let m = metrics(&per_client)?;
            let mean_size = traces.iter().map(|tr| tr[t].1 as f64).sum::<f64>() / traces.len() as f64;
            report.timeline.push(TimelineRow {
                t,
                policy: policy.name().into(),
                distribution: if after { "after" } else { "before" },
                metrics: m,
                mean_store_size: mean_size,
            });
            if t == sec.t0 - 1 || t == last {
                report.metrics.push(row("all", policy.name(), vec![("t", t.to_string())], m));
            }
        }
    }
    report.lambdas = scenario
        .clients
        .iter()
        .zip(&prepared)
        .map(|(c, p)| LambdaRow {
            client_id: c.client_id,
            n_m: p.initial.len(),
            lambda_star: p.lambda,
            val_acc: f64::NAN,
            test_acc: f64::NAN,
        })
        .collect();
    for (r, (c, p)) in report.lambdas.iter_mut().zip(scenario.clients.iter().zip(&prepared)) {
        let pred = PersonalizedPredictor::new(&model, &p.initial, kernel, p.lambda)?;
        r.val_acc = pred.evaluate(&c.before.val)?;
        r.test_acc = pred.evaluate(&c.before.test)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        let base = r#"
scenario = "unseen"
[data]
samples_per_class = 10
feature_dim = 2
num_clients = 10
alpha = 1.0
[fed]
rounds = 1
lr = 0.1
"#;
        ExperimentConfig::parse(&format!("{base}{text}")).unwrap()
    }

    #[test]
    fn folds_rotate_every_client_through_the_newcomers() {
        let mut c = cfg("");
        assert_eq!(c.unseen.group_sizes(10), (8, 2));
        assert_eq!(c.unseen.num_folds(10), 5);
        let mut seen = Vec::new();
        for fold in 0..5 {
            c.unseen.fold = fold;
            let (members, new) = client_roles(&c, 10).unwrap();
            assert_eq!((members.len(), new.len()), (8, 2));
            assert!(new.iter().all(|m| !members.contains(m)));
            seen.extend(new);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        // uneven: 7 clients, 0.8 -> 6 members, 1 newcomer, 7 folds
        assert_eq!(c.unseen.group_sizes(7), (6, 1));
    }

    #[test]
    fn zero_capacity_store_is_empty() {
        let m = Model::mlp(&[2, 3, 2], 0).unwrap();
        let s = vec![Sample::new(vec![0.0, 1.0], 1); 5];
        assert!(build_store(&m, &s, 0.0, 1).unwrap().is_empty());
        assert_eq!(build_store(&m, &s, 0.5, 1).unwrap().len(), 3);
        assert!(build_store(&m, &[], 1.0, 1).unwrap().is_empty());
    }
}
