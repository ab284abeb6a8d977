use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::{ClientDataset, LabeledPool, PartitionScheme, PartitionSpec, SampleStore};
use crate::error::{Error, Result};
use crate::meanest::MeanEstProblem;
use crate::models::{Batch, Targets};
use crate::rng::{std_normal, Purpose, RngStream};

/// Hands the pool out to `spec.n_clients` clients and splits each client's
/// share into train/test. Samples are never duplicated across clients.
///
/// `stream` drives the allocation; each client's split uses
/// `stream.with_client(k)` re-tagged as [`Purpose::Split`].
pub fn partition(
    pool: &LabeledPool,
    spec: &PartitionSpec,
    stream: RngStream,
) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let m = spec.n_clients;
    if pool.len() < m * spec.min_samples.max(1) {
        return Err(Error::config_key(
            "data",
            format!(
                "pool of {} samples cannot give {} clients {} samples each",
                pool.len(),
                m,
                spec.min_samples.max(1)
            ),
        ));
    }
    let (shares, topped) = match &spec.scheme {
        PartitionScheme::ClusterLabels {
            clusters,
            labels_per_cluster,
        } => (
            cluster_shares(pool, *clusters, *labels_per_cluster, spec, stream)?,
            vec![0; m],
        ),
        PartitionScheme::Dirichlet { alpha } => dirichlet_shares(pool, *alpha, spec, stream)?,
        PartitionScheme::MeanEstimation { .. } => {
            return Err(Error::config_key(
                "data.scheme",
                "mean estimation data is generated, not partitioned from a pool",
            ))
        }
    };
    Ok(shares
        .into_iter()
        .zip(topped)
        .enumerate()
        .map(|(k, (idx, topped_up))| {
            let split_stream = stream.with_client(k as u64).with_purpose(Purpose::Split);
            let (train, test) = split_client(&idx, spec.split_ratio, split_stream);
            ClientDataset {
                train: pool.store(&train),
                test: pool.store(&test),
                split_ratio: spec.split_ratio,
                topped_up,
                n_labels: Some(pool.n_labels),
            }
        })
        .collect())
}

/// Shuffles a client's sample indices and cuts them at `round(ratio * n)`,
/// keeping at least one sample on each side when `n >= 2`.
pub fn split_client(idx: &[usize], ratio: f64, stream: RngStream) -> (Vec<usize>, Vec<usize>) {
    let mut idx = idx.to_vec();
    idx.sort_unstable();
    idx.shuffle(&mut stream.rng());
    let n = idx.len();
    let mut n_train = (ratio * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    } else {
        n_train = n;
    }
    let test = idx.split_off(n_train);
    (idx, test)
}

fn cluster_shares(
    pool: &LabeledPool,
    clusters: usize,
    labels_per_cluster: usize,
    spec: &PartitionSpec,
    stream: RngStream,
) -> Result<Vec<Vec<usize>>> {
    if clusters * labels_per_cluster > pool.n_labels {
        return Err(Error::config_key(
            "data.clusters",
            format!(
                "{clusters} clusters x {labels_per_cluster} labels exceeds the {} available labels",
                pool.n_labels
            ),
        ));
    }
    let m = spec.n_clients;
    let mut shares = vec![Vec::new(); m];
    for c in 0..clusters {
        let members: Vec<usize> = (c..m).step_by(clusters).collect();
        if members.is_empty() {
            continue;
        }
        let lo = c * labels_per_cluster;
        let hi = lo + labels_per_cluster;
        let mut idx: Vec<usize> = (0..pool.len())
            .filter(|&i| (lo..hi).contains(&pool.labels[i]))
            .collect();
        idx.shuffle(&mut stream.with_round(c as u64).rng());
        let per = idx.len() / members.len();
        let extra = idx.len() % members.len();
        if per < spec.min_samples.max(1) {
            return Err(Error::config_key(
                "data",
                format!(
                    "cluster {c} has {} samples for {} clients; need {} each",
                    idx.len(),
                    members.len(),
                    spec.min_samples.max(1)
                ),
            ));
        }
        let mut start = 0;
        for (j, &k) in members.iter().enumerate() {
            let len = per + usize::from(j < extra);
            shares[k] = idx[start..start + len].to_vec();
            start += len;
        }
    }
    Ok(shares)
}

/// Integer counts summing to `total` that follow `props` (largest remainder).
pub(crate) fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    // largest fractional part first, lowest index on ties
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet_shares(
    pool: &LabeledPool,
    alpha: f64,
    spec: &PartitionSpec,
    stream: RngStream,
) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let m = spec.n_clients;
    let target = pool.len() / m;
    let n_labels = pool.n_labels;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for (i, &l) in pool.labels.iter().enumerate() {
        buckets[l].push(i);
    }
    let mut rng = stream.rng();
    for b in &mut buckets {
        b.shuffle(&mut rng);
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::config_key("data.alpha", e.to_string()))?;

    let mut shares: Vec<Vec<usize>> = Vec::with_capacity(m);
    for _ in 0..m {
        let mut props: Vec<f64> = (0..n_labels).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = props.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            props.iter_mut().for_each(|p| *p /= sum);
        } else {
            // every gamma draw underflowed: put all mass on one label
            let hot = rng.random_range(0..n_labels);
            props = (0..n_labels).map(|l| f64::from(u8::from(l == hot))).collect();
        }
        let counts = largest_remainder(&props, target);
        let mut mine = Vec::with_capacity(target);
        for (l, c) in counts.into_iter().enumerate() {
            let take = c.min(buckets[l].len());
            let at = buckets[l].len() - take;
            mine.extend(buckets[l].drain(at..));
        }
        shares.push(mine);
    }

    // Uniform top-up from whatever is left so every client reaches `target`.
    let mut rest: Vec<usize> = buckets.into_iter().flatten().collect();
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let mut topped = vec![0; m];
    for (k, share) in shares.iter_mut().enumerate() {
        while share.len() < target {
            match rest.pop() {
                Some(i) => {
                    share.push(i);
                    topped[k] += 1;
                }
                None => break,
            }
        }
    }
    if let Some(k) = shares.iter().position(|s| s.len() < spec.min_samples.max(1)) {
        return Err(Error::config_key(
            "data",
            format!("client {k} received fewer than {} samples", spec.min_samples),
        ));
    }
    Ok((shares, topped))
}

/// Remaps the labels of `ceil(fraction * M)` uniformly chosen clients by
/// `y -> (y + 1) mod n_labels` on both splits. Returns the chosen client
/// indices in ascending order.
pub fn flip_labels(
    datasets: &mut [ClientDataset],
    fraction: f64,
    stream: RngStream,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config_key("data.flip_fraction", "must lie in [0, 1]"));
    }
    let m = datasets.len();
    // guard against 0.3 * 100 = 30.000000000000004
    let count = ((fraction * m as f64) - 1e-9).ceil().max(0.0) as usize;
    let count = count.min(m);
    let mut chosen = index::sample(&mut stream.rng(), m, count).into_vec();
    chosen.sort_unstable();
    for &k in &chosen {
        let ds = &mut datasets[k];
        let n = ds
            .n_labels
            .ok_or_else(|| Error::config("label flipping needs classification data"))?;
        for store in [&mut ds.train, &mut ds.test] {
            if let Targets::Labels(ls) = &mut store.batch.targets {
                for l in ls {
                    *l = (*l + 1) % n;
                }
            }
        }
    }
    Ok(chosen)
}

/// One client per entry of `theta`, each with `n_per_client` training samples
/// `~ N(theta_k, nu2)` and an independent held-out set of the same size.
pub fn make_mean_estimation(
    theta: &[f64],
    nu2: f64,
    n_per_client: usize,
    stream: RngStream,
) -> Result<(Vec<ClientDataset>, MeanEstProblem)> {
    let (datasets, theta_hat) = mean_estimation_datasets(theta, nu2, n_per_client, stream)?;
    let problem = MeanEstProblem::new(theta.to_vec(), theta_hat, nu2 / n_per_client as f64)?;
    Ok((datasets, problem))
}

/// Same data as [`make_mean_estimation`] for any number of clients, with the
/// empirical means instead of a two/three-client problem.
pub fn mean_estimation_datasets(
    theta: &[f64],
    nu2: f64,
    n_per_client: usize,
    stream: RngStream,
) -> Result<(Vec<ClientDataset>, Vec<f64>)> {
    if !(nu2 > 0.0) {
        return Err(Error::config_key("data.nu2", "must be positive"));
    }
    if n_per_client == 0 {
        return Err(Error::config_key("data.n_per_client", "must be at least 1"));
    }
    let sd = nu2.sqrt();
    let mut datasets = Vec::with_capacity(theta.len());
    let mut theta_hat = Vec::with_capacity(theta.len());
    let mut next_id = 0u64;
    for (k, &t) in theta.iter().enumerate() {
        let mut rng = stream.with_client(k as u64).rng();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| t + sd * std_normal(&mut rng)).collect() };
        let train = draw(n_per_client);
        let test = draw(n_per_client);
        theta_hat.push(train.iter().sum::<f64>() / n_per_client as f64);
        let mut store = |v: Vec<f64>| {
            let ids = (next_id..next_id + v.len() as u64).collect();
            next_id += v.len() as u64;
            SampleStore {
                batch: Batch::scalar(v),
                ids,
            }
        };
        datasets.push(ClientDataset {
            train: store(train),
            test: store(test),
            split_ratio: 0.5,
            topped_up: 0,
            n_labels: None,
        });
    }
    Ok((datasets, theta_hat))
}
