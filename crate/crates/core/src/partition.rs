//! Synthetic data and Dirichlet non-IID partitioning.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::Sample;
use crate::rng::StreamKey;

/// Full partition attempts before [`dirichlet_partition`] gives up.
pub const MAX_PARTITION_ATTEMPTS: u32 = 100;

/// Samples split across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub clients: Vec<Vec<Sample>>,
    pub num_classes: Option<usize>,
    pub alpha: Option<f64>,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn total_samples(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    pub fn min_client_size(&self) -> usize {
        self.clients.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// Per-client class counts, `clients × classes`.
    pub fn class_histograms(&self) -> Option<Vec<Vec<usize>>> {
        let c = self.num_classes?;
        Some(
            self.clients
                .iter()
                .map(|samples| {
                    let mut h = vec![0; c];
                    for s in samples {
                        if let Some(k) = s.class() {
                            h[k] += 1;
                        }
                    }
                    h
                })
                .collect(),
        )
    }
}

/// Draws `p ~ Dir(α·1_n)` by normalising independent Gamma(α, 1) draws.
/// Returns `None` when every draw underflows to zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Result<Option<Vec<f64>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("gamma({alpha}): {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Ok(None);
    }
    Ok(Some(draws.into_iter().map(|g| g / total).collect()))
}

/// Splits labelled samples across `num_clients` clients.
///
/// For every class a proportion vector `p_c ~ Dir(α·1_N)` is drawn and each
/// sample of that class is assigned to client `i` with probability `p_c[i]`.
/// If any client ends up with fewer than `min_per_client` samples the whole
/// partition is redrawn, up to [`MAX_PARTITION_ATTEMPTS`] times.
pub fn dirichlet_partition(
    samples: &[Sample],
    num_classes: usize,
    num_clients: usize,
    alpha: f64,
    min_per_client: usize,
    key: StreamKey,
) -> Result<FederatedDataset> {
    if num_clients < 2 {
        return config_err("dirichlet partition needs at least 2 clients");
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return config_err(format!("dirichlet alpha must be positive, got {alpha}"));
    }
    let min_per_client = min_per_client.max(1);
    if samples.len() < num_clients * min_per_client {
        return config_err(format!(
            "{} samples cannot give {num_clients} clients {min_per_client} samples each",
            samples.len()
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (idx, s) in samples.iter().enumerate() {
        match s.class() {
            Some(c) if c < num_classes => by_class[c].push(idx),
            _ => return Err(Error::Contract(format!("sample {idx} has no valid class label"))),
        }
    }

    let mut rng = key.rng();
    for _attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        let mut degenerate = false;
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let Some(p) = sample_dirichlet(alpha, num_clients, &mut rng)? else {
                degenerate = true;
                break;
            };
            let dist = WeightedIndex::new(&p).map_err(|e| Error::Config(e.to_string()))?;
            for &idx in members {
                assignment[dist.sample(&mut rng)].push(idx);
            }
        }
        if degenerate || assignment.iter().any(|a| a.len() < min_per_client) {
            continue;
        }
        let clients = assignment
            .into_iter()
            .map(|mut idxs| {
                idxs.sort_unstable();
                idxs.into_iter().map(|i| samples[i].clone()).collect()
            })
            .collect();
        return Ok(FederatedDataset {
            clients,
            num_classes: Some(num_classes),
            alpha: Some(alpha),
        });
    }
    config_err(format!(
        "dirichlet partition (alpha={alpha}) left a client below {min_per_client} samples after {MAX_PARTITION_ATTEMPTS} attempts"
    ))
}

/// Gaussian class blobs: class means drawn from `N(0, separation² I)`,
/// samples from `N(mean_c, I)`, classes assigned round-robin.
pub fn gauss_classes(features: usize, classes: usize, num_samples: usize, separation: f64, key: StreamKey) -> Result<Vec<Sample>> {
    if features == 0 || classes < 2 || num_samples < classes {
        return config_err("gauss_classes needs features >= 1, classes >= 2, samples >= classes");
    }
    let mut rng = key.rng();
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..features).map(|_| separation * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    Ok((0..num_samples)
        .map(|n| {
            let c = n % classes;
            let x = means[c]
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            Sample::classified(x, c)
        })
        .collect())
}

/// Per-client quadratic data: centers `a_i = ā + h·u_i` with `ā, u_i ~ N(0, I)`
/// and `samples_per_client` points `a_i + noise·z` per client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientQuadratics {
    pub centers: Vec<Vec<f64>>,
    pub dataset: FederatedDataset,
}

impl ClientQuadratics {
    /// Mean squared distance of the centers from their average; with unit
    /// curvature this is the gradient dissimilarity `σ_g²`.
    pub fn dissimilarity(&self) -> f64 {
        let n = self.centers.len() as f64;
        let d = self.centers[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|j| self.centers.iter().map(|c| c[j]).sum::<f64>() / n)
            .collect();
        self.centers
            .iter()
            .map(|c| c.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum::<f64>()
            / n
    }
}

pub fn client_quadratics(
    dim: usize,
    num_clients: usize,
    heterogeneity: f64,
    samples_per_client: usize,
    sample_noise: f64,
    key: StreamKey,
) -> Result<ClientQuadratics> {
    if dim == 0 || num_clients == 0 || samples_per_client == 0 {
        return config_err("client_quadratics needs dim, clients and samples >= 1");
    }
    if !(heterogeneity >= 0.0) || !(sample_noise >= 0.0) {
        return config_err("heterogeneity and sample noise must be >= 0");
    }
    let mut rng = key.rng();
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };
    let center: Vec<f64> = (0..dim).map(|_| normal()).collect();
    let offsets: Vec<Vec<f64>> = (0..num_clients)
        .map(|_| (0..dim).map(|_| normal()).collect())
        .collect();
    let centers: Vec<Vec<f64>> = offsets
        .iter()
        .map(|u| center.iter().zip(u).map(|(c, x)| c + heterogeneity * x).collect())
        .collect();
    let clients = centers
        .iter()
        .map(|a| {
            (0..samples_per_client)
                .map(|_| Sample::point(a.iter().map(|x| x + sample_noise * normal()).collect()))
                .collect()
        })
        .collect();
    Ok(ClientQuadratics {
        centers,
        dataset: FederatedDataset {
            clients,
            num_classes: None,
            alpha: None,
        },
    })
}

/// Reads `f1,…,fp,label` CSV rows with a mandatory header. Returns the
/// samples and the class count (max label + 1).
pub fn read_csv(path: &Path) -> Result<(Vec<Sample>, usize)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let p = headers.len().checked_sub(1).filter(|&p| p > 0).ok_or_else(|| {
        Error::Config(format!("{}: need at least one feature column and a label", path.display()))
    })?;
    if headers.get(p).map(str::trim) != Some("label") {
        return config_err(format!("{}: last column must be 'label'", path.display()));
    }
    let mut samples = Vec::new();
    let mut classes = 0;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("row {}: '{s}': {e}", line + 2)))
        };
        let features = (0..p).map(|j| parse(&rec[j])).collect::<Result<Vec<_>>>()?;
        let label: usize = rec[p]
            .trim()
            .parse()
            .map_err(|e| Error::Config(format!("row {}: label: {e}", line + 2)))?;
        classes = classes.max(label + 1);
        samples.push(Sample::classified(features, label));
    }
    if samples.is_empty() {
        return config_err(format!("{}: no data rows", path.display()));
    }
    Ok((samples, classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn key(seed: u64) -> StreamKey {
        StreamKey::new(seed, Purpose::Partition)
    }

    fn blobs(n: usize, seed: u64) -> Vec<Sample> {
        gauss_classes(4, 10, n, 3.0, StreamKey::new(seed, Purpose::Synthetic)).unwrap()
    }

    #[test]
    fn partition_is_exact() {
        let samples = blobs(2000, 1);
        let ds = dirichlet_partition(&samples, 10, 8, 0.3, 1, key(2)).unwrap();
        assert_eq!(ds.total_samples(), samples.len());
        let mut seen: Vec<Vec<f64>> = ds.clients.iter().flatten().map(|s| s.features.clone()).collect();
        let mut all: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
        let cmp = |a: &Vec<f64>, b: &Vec<f64>| a.partial_cmp(b).unwrap();
        seen.sort_by(cmp);
        all.sort_by(cmp);
        assert_eq!(seen, all);
        assert!(ds.clients.iter().all(|c| !c.is_empty()));
    }

    #[test]
    fn partition_is_deterministic() {
        let samples = blobs(500, 3);
        let a = dirichlet_partition(&samples, 10, 5, 0.5, 1, key(9)).unwrap();
        let b = dirichlet_partition(&samples, 10, 5, 0.5, 1, key(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_alpha_is_near_iid() {
        let samples = blobs(100_000, 4);
        let ds = dirichlet_partition(&samples, 10, 10, 1e6, 1, key(5)).unwrap();
        for h in ds.class_histograms().unwrap() {
            let n: usize = h.iter().sum();
            let tv: f64 = h.iter().map(|&c| (c as f64 / n as f64 - 0.1).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.05, "tv {tv}");
        }
    }

    #[test]
    fn partition_errors() {
        let samples = blobs(50, 1);
        assert!(dirichlet_partition(&samples, 10, 1, 0.5, 1, key(0)).is_err());
        assert!(dirichlet_partition(&samples, 10, 5, 0.0, 1, key(0)).is_err());
        assert!(dirichlet_partition(&samples, 10, 60, 0.5, 1, key(0)).is_err());
        // impossible minimum size exhausts retries
        let err = dirichlet_partition(&samples, 10, 5, 0.01, 10, key(0)).unwrap_err();
        assert!(err.to_string().contains("attempts"));
    }

    #[test]
    fn quadratic_centers() {
        let iid = client_quadratics(5, 4, 0.0, 3, 0.1, StreamKey::new(1, Purpose::Synthetic)).unwrap();
        assert!(iid.centers.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(iid.dissimilarity(), 0.0);
        let a = client_quadratics(5, 4, 1.0, 3, 0.1, StreamKey::new(1, Purpose::Synthetic)).unwrap();
        let b = client_quadratics(5, 4, 1.0, 3, 0.1, StreamKey::new(1, Purpose::Synthetic)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.total_samples(), 12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "f1,f2,label\n0.5,1.5,0\n-1,2,2\n").unwrap();
        let (samples, classes) = read_csv(&path).unwrap();
        assert_eq!(classes, 3);
        assert_eq!(samples[1], Sample::classified(vec![-1.0, 2.0], 2));

        std::fs::write(&path, "f1,f2,target\n0.5,1.5,0\n").unwrap();
        assert!(read_csv(&path).is_err());
        std::fs::write(&path, "f1,label\nx,0\n").unwrap();
        assert!(read_csv(&path).is_err());
    }
}
