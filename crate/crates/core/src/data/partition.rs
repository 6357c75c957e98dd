use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

use super::dataset::DatasetHandle;
use crate::error::{Error, Result};

/// Re-draw budget when a scheme hands some client an empty shard.
pub const MAX_PARTITION_RETRIES: usize = 100;

const DEFAULT_LABEL_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Dirichlet,
    ClassCount,
    LognormalAmount,
}

/// Which scheme to use and its parameters. Only the fields of the selected
/// scheme are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes_per_client: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Dirichlet concentration of per-client label mixes under
    /// `lognormal_amount`; defaults to 0.1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_alpha: Option<f64>,
    pub num_clients: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionSpec {
    pub fn dirichlet(alpha: f64, num_clients: usize, seed: u64) -> Self {
        Self {
            scheme: PartitionScheme::Dirichlet,
            alpha: Some(alpha),
            classes_per_client: None,
            sigma: None,
            label_alpha: None,
            num_clients,
            seed,
        }
    }

    pub fn class_count(classes_per_client: usize, num_clients: usize, seed: u64) -> Self {
        Self {
            scheme: PartitionScheme::ClassCount,
            classes_per_client: Some(classes_per_client),
            ..Self::dirichlet(1.0, num_clients, seed)
        }
        .without_alpha()
    }

    pub fn lognormal(sigma: f64, num_clients: usize, seed: u64) -> Self {
        Self {
            scheme: PartitionScheme::LognormalAmount,
            sigma: Some(sigma),
            ..Self::dirichlet(1.0, num_clients, seed)
        }
        .without_alpha()
    }

    fn without_alpha(mut self) -> Self {
        self.alpha = None;
        self
    }

    /// Short human-readable label, e.g. `Dir(0.1)`.
    pub fn label(&self) -> String {
        match self.scheme {
            PartitionScheme::Dirichlet => format!("Dir({})", self.alpha.unwrap_or(f64::NAN)),
            PartitionScheme::ClassCount => format!("C={}", self.classes_per_client.unwrap_or(0)),
            PartitionScheme::LognormalAmount => format!("LogN(sigma={})", self.sigma.unwrap_or(f64::NAN)),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidPartition("num_clients must be positive".into()));
        }
        let positive = |name: &str, v: Option<f64>| match v {
            Some(x) if x > 0.0 && x.is_finite() => Ok(x),
            Some(x) => Err(Error::InvalidPartition(format!("{name} must be positive, got {x}"))),
            None => Err(Error::InvalidPartition(format!("{name} is required for this scheme"))),
        };
        match self.scheme {
            PartitionScheme::Dirichlet => positive("alpha", self.alpha).map(|_| ()),
            PartitionScheme::LognormalAmount => {
                positive("sigma", self.sigma)?;
                positive("label_alpha", Some(self.label_alpha.unwrap_or(DEFAULT_LABEL_ALPHA))).map(|_| ())
            }
            PartitionScheme::ClassCount => match self.classes_per_client {
                Some(c) if c > 0 => Ok(()),
                _ => Err(Error::InvalidPartition("classes_per_client must be a positive integer".into())),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    /// Sorted train-example indices.
    pub indices: Vec<usize>,
    pub class_histogram: Vec<usize>,
}

impl ClientShard {
    fn new(client_id: usize, mut indices: Vec<usize>, labels: &[usize], num_classes: usize) -> Self {
        indices.sort_unstable();
        let mut class_histogram = vec![0; num_classes];
        for &i in &indices {
            class_histogram[labels[i]] += 1;
        }
        Self {
            client_id,
            indices,
            class_histogram,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Dispatches on `spec.scheme`.
pub fn partition(handle: &DatasetHandle, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    partition_labels(handle.train.labels(), handle.num_classes, spec)
}

pub fn partition_dirichlet(handle: &DatasetHandle, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    expect_scheme(spec, PartitionScheme::Dirichlet)?;
    partition(handle, spec)
}

pub fn partition_class_count(handle: &DatasetHandle, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    expect_scheme(spec, PartitionScheme::ClassCount)?;
    partition(handle, spec)
}

pub fn partition_lognormal(handle: &DatasetHandle, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    expect_scheme(spec, PartitionScheme::LognormalAmount)?;
    partition(handle, spec)
}

fn expect_scheme(spec: &PartitionSpec, scheme: PartitionScheme) -> Result<()> {
    if spec.scheme != scheme {
        return Err(Error::InvalidPartition(format!(
            "expected scheme {scheme:?}, got {:?}",
            spec.scheme
        )));
    }
    Ok(())
}

/// Partitions a label vector; the work behind every `partition_*` entry point.
pub fn partition_labels(labels: &[usize], num_classes: usize, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidPartition(format!("label {bad} outside {num_classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_clients;
    let by_class = indices_by_class(labels, num_classes);

    let assignment = match spec.scheme {
        PartitionScheme::Dirichlet => {
            let alpha = spec.alpha.expect("validated");
            retry_nonempty(|| Ok(dirichlet_assign(&by_class, n, alpha, &mut rng)))?
        }
        PartitionScheme::ClassCount => {
            class_count_assign(&by_class, n, spec.classes_per_client.expect("validated"), &mut rng)?
        }
        PartitionScheme::LognormalAmount => {
            let sigma = spec.sigma.expect("validated");
            let label_alpha = spec.label_alpha.unwrap_or(DEFAULT_LABEL_ALPHA);
            retry_nonempty(|| lognormal_assign(&by_class, n, sigma, label_alpha, &mut rng))?
        }
    };

    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(k, idx)| ClientShard::new(k, idx, labels, num_classes))
        .collect())
}

fn indices_by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

fn retry_nonempty(mut draw: impl FnMut() -> Result<Vec<Vec<usize>>>) -> Result<Vec<Vec<usize>>> {
    for _ in 0..MAX_PARTITION_RETRIES {
        let assignment = draw()?;
        if assignment.iter().all(|s| !s.is_empty()) {
            return Ok(assignment);
        }
    }
    Err(Error::RetryBudgetExhausted {
        retries: MAX_PARTITION_RETRIES,
    })
}

/// Symmetric Dirichlet draw via normalized Gamma variates. Very small alphas
/// can underflow every variate to zero; those draws are repeated.
pub(crate) fn sample_dirichlet<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Integer counts summing to `total`, proportional to `weights`, using
/// largest-remainder rounding (ties go to the lower index).
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Per class: shuffle its indices, draw client proportions from Dir(alpha)
/// and split contiguously.
fn dirichlet_assign<R: Rng>(by_class: &[Vec<usize>], n: usize, alpha: f64, rng: &mut R) -> Vec<Vec<usize>> {
    let mut shards = vec![Vec::new(); n];
    for class_indices in by_class {
        let mut idx = class_indices.clone();
        idx.shuffle(rng);
        let proportions = sample_dirichlet(alpha, n, rng);
        let counts = largest_remainder(&proportions, idx.len());
        let mut start = 0;
        for (shard, c) in shards.iter_mut().zip(counts) {
            shard.extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    shards
}

/// Each client takes `c` consecutive classes from a shuffled class list,
/// round-robin; each class is split evenly among its holders.
fn class_count_assign<R: Rng>(by_class: &[Vec<usize>], n: usize, c: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let k = by_class.len();
    if c > k {
        return Err(Error::InvalidPartition(format!(
            "classes_per_client {c} exceeds the {k} available classes"
        )));
    }
    if n * c < k {
        return Err(Error::InvalidPartition(format!(
            "{n} clients with {c} classes each cannot cover {k} classes"
        )));
    }
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(rng);
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); k];
    for client in 0..n {
        for j in 0..c {
            holders[classes[(client * c + j) % k]].push(client);
        }
    }
    let mut shards = vec![Vec::new(); n];
    for (class, owners) in holders.iter().enumerate() {
        let mut idx = by_class[class].clone();
        idx.shuffle(rng);
        let counts = largest_remainder(&vec![1.0; owners.len()], idx.len());
        let mut start = 0;
        for (&owner, cnt) in owners.iter().zip(counts) {
            shards[owner].extend_from_slice(&idx[start..start + cnt]);
            start += cnt;
        }
    }
    if shards.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidPartition("a client received no samples".into()));
    }
    Ok(shards)
}

/// Client sizes from LogNormal(0, sigma^2); each client then fills its quota
/// slot by slot from its own Dir(label_alpha) label mix, restricted to the
/// classes that still have unassigned samples.
fn lognormal_assign<R: Rng>(
    by_class: &[Vec<usize>],
    n: usize,
    sigma: f64,
    label_alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let total: usize = by_class.iter().map(Vec::len).sum();
    let lognormal = LogNormal::new(0.0, sigma).map_err(|e| Error::InvalidPartition(e.to_string()))?;
    let raw: Vec<f64> = (0..n).map(|_| lognormal.sample(rng)).collect();
    let quotas = largest_remainder(&raw, total);

    let mut pools: Vec<Vec<usize>> = by_class.to_vec();
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    let mut shards = vec![Vec::new(); n];
    for (client, &quota) in quotas.iter().enumerate() {
        let mix = sample_dirichlet(label_alpha, pools.len(), rng);
        for _ in 0..quota {
            let mass: f64 = mix
                .iter()
                .zip(&pools)
                .filter(|(_, p)| !p.is_empty())
                .map(|(m, _)| m)
                .sum();
            let class = if mass > 0.0 {
                let mut target = rng.random::<f64>() * mass;
                let mut chosen = None;
                for (cls, (m, p)) in mix.iter().zip(&pools).enumerate() {
                    if p.is_empty() {
                        continue;
                    }
                    chosen = Some(cls);
                    if target < *m {
                        break;
                    }
                    target -= m;
                }
                chosen.expect("some pool is nonempty")
            } else {
                // the mix puts no mass on any remaining class
                pools.iter().position(|p| !p.is_empty()).expect("quota never exceeds supply")
            };
            shards[client].push(pools[class].pop().expect("nonempty pool"));
        }
    }
    Ok(shards)
}

/// Serializable record of a partition for exact replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionDocument {
    pub scheme: PartitionScheme,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
    pub shards: Vec<ShardIndices>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardIndices {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl PartitionDocument {
    pub fn new(spec: &PartitionSpec, shards: &[ClientShard]) -> Self {
        let mut params = BTreeMap::new();
        params.insert("num_clients".to_string(), spec.num_clients as f64);
        match spec.scheme {
            PartitionScheme::Dirichlet => {
                params.insert("alpha".into(), spec.alpha.unwrap_or(f64::NAN));
            }
            PartitionScheme::ClassCount => {
                params.insert("classes_per_client".into(), spec.classes_per_client.unwrap_or(0) as f64);
            }
            PartitionScheme::LognormalAmount => {
                params.insert("sigma".into(), spec.sigma.unwrap_or(f64::NAN));
                params.insert("label_alpha".into(), spec.label_alpha.unwrap_or(DEFAULT_LABEL_ALPHA));
            }
        }
        Self {
            scheme: spec.scheme,
            params,
            seed: spec.seed,
            shards: shards
                .iter()
                .map(|s| ShardIndices {
                    client_id: s.client_id,
                    indices: s.indices.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Rebuilds shards (with histograms) against the dataset they came from.
    pub fn replay(&self, handle: &DatasetHandle) -> Result<Vec<ClientShard>> {
        let labels = handle.train.labels();
        let mut seen = vec![false; labels.len()];
        self.shards
            .iter()
            .map(|s| {
                for &i in &s.indices {
                    if i >= labels.len() || std::mem::replace(&mut seen[i], true) {
                        return Err(Error::InvalidPartition(format!(
                            "index {i} is out of range or assigned twice"
                        )));
                    }
                }
                Ok(ClientShard::new(s.client_id, s.indices.clone(), labels, handle.num_classes))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;
    use std::collections::HashSet;
    use std::path::Path;

    fn blobs() -> DatasetHandle {
        load_dataset("synthetic_blobs", Path::new(".")).unwrap()
    }

    fn assert_exact_cover(shards: &[ClientShard], total: usize) {
        let mut seen = HashSet::new();
        for s in shards {
            for &i in &s.indices {
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
        assert_eq!(seen.len(), total);
    }

    #[test]
    fn single_client_gets_everything() {
        let h = blobs();
        let shards = partition_dirichlet(&h, &PartitionSpec::dirichlet(0.5, 1, 3)).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].indices, (0..2000).collect::<Vec<_>>());
    }

    #[test]
    fn huge_alpha_splits_evenly() {
        let h = blobs();
        let shards = partition_dirichlet(&h, &PartitionSpec::dirichlet(1e6, 2, 11)).unwrap();
        for class in 0..10 {
            let a = shards[0].class_histogram[class] as f64;
            let b = shards[1].class_histogram[class] as f64;
            assert!((a / (a + b) - 0.5).abs() < 0.02, "class {class}: {a} vs {b}");
        }
    }

    #[test]
    fn direct_dirichlet_sampling_concentrates() {
        // oracle: the sampler alone, without the allocation logic
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = sample_dirichlet(1e6, 2, &mut rng);
            assert!((p[0] - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn skewed_dirichlet_is_an_exact_cover() {
        let h = blobs();
        let shards = partition_dirichlet(&h, &PartitionSpec::dirichlet(0.1, 10, 42)).unwrap();
        assert_eq!(shards.len(), 10);
        assert_exact_cover(&shards, 2000);
        assert!(shards.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn impossible_dirichlet_exhausts_retries() {
        let labels = vec![0usize; 3];
        let err = partition_labels(&labels, 1, &PartitionSpec::dirichlet(0.01, 10, 0)).unwrap_err();
        assert!(matches!(err, Error::RetryBudgetExhausted { .. }));
    }

    #[test]
    fn class_count_all_classes_is_iid() {
        let h = blobs();
        let shards = partition_class_count(&h, &PartitionSpec::class_count(10, 4, 1)).unwrap();
        for s in &shards {
            assert!(s.class_histogram.iter().all(|&c| c == 50));
        }
    }

    #[test]
    fn class_count_two_classes_each() {
        let h = blobs();
        let shards = partition_class_count(&h, &PartitionSpec::class_count(2, 10, 9)).unwrap();
        for s in &shards {
            assert_eq!(s.class_histogram.iter().filter(|&&c| c > 0).count(), 2);
        }
        assert_exact_cover(&shards, 2000);
    }

    #[test]
    fn class_count_three_holders_per_class() {
        let h = blobs();
        let shards = partition_class_count(&h, &PartitionSpec::class_count(3, 10, 77)).unwrap();
        // counting oracle over the histograms
        for class in 0..10 {
            let holders = shards.iter().filter(|s| s.class_histogram[class] > 0).count();
            assert_eq!(holders, 3);
        }
    }

    #[test]
    fn class_count_rejects_infeasible() {
        let h = blobs();
        assert!(partition_class_count(&h, &PartitionSpec::class_count(11, 10, 0)).is_err());
        assert!(partition_class_count(&h, &PartitionSpec::class_count(2, 3, 0)).is_err());
    }

    #[test]
    fn degenerate_lognormal_is_even() {
        let h = blobs();
        let shards = partition_lognormal(&h, &PartitionSpec::lognormal(1e-6, 4, 8)).unwrap();
        for s in &shards {
            assert!(s.len().abs_diff(500) <= 1);
        }
        assert_exact_cover(&shards, 2000);
    }

    #[test]
    fn wide_lognormal_is_unbalanced() {
        let h = blobs();
        // Monte-Carlo oracle on the raw lognormal draw
        let lognormal = LogNormal::new(0.0, 1.2).unwrap();
        let mut raw_hits = 0;
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let v: Vec<f64> = (0..10).map(|_| lognormal.sample(&mut rng)).collect();
            let (mx, mn) = v.iter().fold((0.0f64, f64::MAX), |(a, b), &x| (a.max(x), b.min(x)));
            raw_hits += usize::from(mx / mn > 3.0);
        }
        assert!(raw_hits as f64 / 200.0 > 0.9);

        let mut hits = 0;
        for seed in 0..30 {
            let shards = partition_lognormal(&h, &PartitionSpec::lognormal(1.2, 10, seed)).unwrap();
            let sizes: Vec<usize> = shards.iter().map(ClientShard::len).collect();
            assert_eq!(sizes.iter().sum::<usize>(), 2000);
            let ratio = *sizes.iter().max().unwrap() as f64 / *sizes.iter().min().unwrap() as f64;
            hits += usize::from(ratio > 3.0);
        }
        assert!(hits as f64 / 30.0 > 0.9, "{hits}/30");
    }

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.25, 0.75], 7).iter().sum::<usize>(), 7);
    }

    #[test]
    fn document_round_trip_replays() {
        let h = blobs();
        let spec = PartitionSpec::dirichlet(0.3, 5, 4);
        let shards = partition(&h, &spec).unwrap();
        let doc = PartitionDocument::new(&spec, &shards);
        let back = PartitionDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back.replay(&h).unwrap(), shards);
        assert_eq!(back.params["alpha"], 0.3);
    }

    #[test]
    fn missing_scheme_parameter_is_rejected() {
        let h = blobs();
        let mut spec = PartitionSpec::dirichlet(0.3, 5, 4);
        spec.alpha = None;
        assert!(partition(&h, &spec).is_err());
    }
}
