//! Datasets: synthesis, CSV ingestion, client partitioning and label
//! corruption.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Where a client's labels came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Clean,
    /// Linear label noise with re-assignment probability `p`; `reassigned`
    /// counts the samples that were redrawn (a redraw may reproduce the
    /// original label).
    LabelNoise {
        p: f64,
        reassigned: usize,
    },
    LabelFlipped,
}

/// Row-major feature matrix with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    pub provenance: Provenance,
}

/// One client's local data.
pub type ClientDataset = Dataset;

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("feature dimension must be >= 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dimension(format!(
                "{} feature values for {} rows of dimension {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dimension(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self { features, labels, dim, classes, provenance: Provenance::Clean })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels, dim: self.dim, classes: self.classes, provenance: self.provenance.clone() }
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Split off the first `n_head` rows; returns `(head, tail)`.
    pub fn split_at(&self, n_head: usize) -> (Dataset, Dataset) {
        let n_head = n_head.min(self.len());
        let head: Vec<usize> = (0..n_head).collect();
        let tail: Vec<usize> = (n_head..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// A seeded random subset holding `ceil(fraction * n)` rows (at least one).
    pub fn sample_fraction(&self, fraction: f64, rng: &mut impl Rng) -> Dataset {
        let take = ((fraction * self.len() as f64).ceil() as usize).clamp(1, self.len().max(1));
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(take);
        idx.sort_unstable();
        self.subset(&idx)
    }

    pub(crate) fn set_labels(&mut self, labels: Vec<usize>) {
        debug_assert_eq!(labels.len(), self.labels.len());
        self.labels = labels;
    }
}

/// C Gaussian clusters with unit covariance. Class `c` is centred at
/// `separation * (1 + c / d) * e_{c mod d}`, so with `C <= d` every mean
/// sits on its own coordinate axis. Class counts differ by at most one and
/// rows are shuffled.
pub fn generate_synthetic(n: usize, dim: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    if dim == 0 {
        return Err(Error::config("dim", "feature dimension must be >= 1"));
    }
    if n < classes {
        return Err(Error::config("n", format!("n = {n} is smaller than class count {classes}")));
    }
    let mut rng = rng::stream(seed, domain::DATA, 0, 0);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let count = n / classes + usize::from(c < n % classes);
        labels.extend(std::iter::repeat_n(c, count));
    }
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * dim);
    for &y in &labels {
        let axis = y % dim;
        let scale = separation * (1 + y / dim) as f64;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(if j == axis { z + scale } else { z });
        }
    }
    Dataset::new(features, labels, dim, classes)
}

/// IID split: shuffle, then contiguous chunks whose sizes differ by at most one.
pub fn iid_partition_indices(n: usize, clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || n < clients {
        return Err(Error::config("clients", format!("cannot split {n} samples across {clients} clients")));
    }
    let mut rng = rng::stream(seed, domain::PARTITION, 0, 0);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut out = Vec::with_capacity(clients);
    let mut start = 0;
    for k in 0..clients {
        let size = n / clients + usize::from(k < n % clients);
        let mut part = idx[start..start + size].to_vec();
        part.sort_unstable();
        out.push(part);
        start += size;
    }
    Ok(out)
}

/// Integer split of `total` by `weights` with largest-remainder rounding.
/// Ties on the fractional part go to the lowest index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let k = weights.len();
    if k == 0 {
        return Vec::new();
    }
    if !(sum > 0.0) || !sum.is_finite() {
        let mut out = vec![total / k; k];
        for slot in out.iter_mut().take(total % k) {
            *slot += 1;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

const DIRICHLET_RETRIES: usize = 100;

/// Draw one `Dirichlet(alpha * 1_K)` vector by normalising Gamma draws.
pub(crate) fn draw_dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.iter().map(|g| g / sum).collect()
    } else {
        draws
    }
}

/// Per-class Dirichlet label skew. Returns per-client row indices into
/// `labels`, each sorted ascending.
///
/// Proportions for every class are drawn class by class (K Gamma draws per
/// class) and rounded with [`largest_remainder`]. The whole draw is repeated
/// up to 100 times until every client is nonempty; after that, each empty
/// client takes one sample from the currently largest client. Only once the
/// counts are fixed are the class members shuffled and dealt out.
pub fn dirichlet_partition_indices(
    labels: &[usize],
    classes: usize,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if clients < 2 {
        return Err(Error::config("clients", "dirichlet partition needs at least 2 clients"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config("alpha", "dirichlet alpha must be > 0"));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    if let Some(c) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::Empty(format!("class {c} has no samples")));
    }
    if labels.len() < clients {
        return Err(Error::Empty(format!("{} samples cannot fill {} nonempty clients", labels.len(), clients)));
    }

    let mut rng = rng::stream(seed, domain::PARTITION, 1, 0);
    // counts[c][k]
    let mut counts: Vec<Vec<usize>> = Vec::new();
    let mut ok = false;
    for _ in 0..DIRICHLET_RETRIES {
        counts = members
            .iter()
            .map(|m| {
                let p = draw_dirichlet(alpha, clients, &mut rng);
                largest_remainder(m.len(), &p)
            })
            .collect();
        if (0..clients).all(|k| counts.iter().any(|row| row[k] > 0)) {
            ok = true;
            break;
        }
    }
    if !ok {
        for k in 0..clients {
            let total = |counts: &Vec<Vec<usize>>, j: usize| counts.iter().map(|r| r[j]).sum::<usize>();
            if total(&counts, k) > 0 {
                continue;
            }
            let donor = (0..clients)
                .max_by(|&a, &b| total(&counts, a).cmp(&total(&counts, b)).then(b.cmp(&a)))
                .expect("clients >= 2");
            if total(&counts, donor) < 2 {
                return Err(Error::Empty("cannot make every client nonempty".into()));
            }
            let c = (0..classes)
                .max_by(|&a, &b| counts[a][donor].cmp(&counts[b][donor]).then(b.cmp(&a)))
                .expect("classes >= 1");
            counts[c][donor] -= 1;
            counts[c][k] += 1;
        }
    }

    let mut out: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (c, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut rng);
        let mut start = 0;
        for k in 0..clients {
            let take = counts[c][k];
            out[k].extend_from_slice(&m[start..start + take]);
            start += take;
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Dirichlet label-skew partition of `full` into `clients` datasets.
pub fn dirichlet_partition(full: &Dataset, clients: usize, alpha: f64, seed: u64) -> Result<Vec<ClientDataset>> {
    let parts = dirichlet_partition_indices(full.labels(), full.classes(), clients, alpha, seed)?;
    Ok(parts.iter().map(|p| full.subset(p)).collect())
}

/// IID partition of `full` into `clients` datasets.
pub fn iid_partition(full: &Dataset, clients: usize, seed: u64) -> Result<Vec<ClientDataset>> {
    let parts = iid_partition_indices(full.len(), clients, seed)?;
    Ok(parts.iter().map(|p| full.subset(p)).collect())
}

/// Re-assignment probability of client `k` (0-based) among `clients`.
pub fn linear_noise_level(k: usize, clients: usize) -> f64 {
    k as f64 / (clients - 1) as f64
}

/// Client `k` (0-based) has each label redrawn uniformly over all classes
/// with probability `k / (K - 1)`. The first client is untouched and the
/// last is fully randomised.
pub fn inject_linear_label_noise(clients: &[ClientDataset], seed: u64) -> Result<Vec<ClientDataset>> {
    let k_total = clients.len();
    if k_total < 2 {
        return Err(Error::config("noise", "linear label noise needs at least 2 clients"));
    }
    Ok(clients
        .iter()
        .enumerate()
        .map(|(k, data)| {
            let p = linear_noise_level(k, k_total);
            let mut rng = rng::stream(seed, domain::NOISE, k as u64, 0);
            let mut reassigned = 0;
            let labels = data
                .labels()
                .iter()
                .map(|&y| {
                    if rng.random::<f64>() < p {
                        reassigned += 1;
                        rng.random_range(0..data.classes())
                    } else {
                        y
                    }
                })
                .collect();
            let mut out = data.clone();
            out.set_labels(labels);
            out.provenance = Provenance::LabelNoise { p, reassigned };
            out
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Zscore,
    None,
}

enum ColumnKind {
    Numeric,
    /// Sorted distinct category values.
    Categorical(Vec<String>),
}

/// Load a headered, comma-delimited CSV. Columns whose values mostly parse as
/// numbers are numeric (any unparseable cell in them is an error naming the
/// row); other columns are one-hot encoded over their sorted distinct values.
/// Feature order follows the header, with one-hot blocks expanded in place.
/// Label classes are the sorted distinct values of `label_column`.
pub fn load_csv(path: &Path, label_column: &str, normalization: Normalization) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, label_column, normalization)
}

pub fn load_csv_reader(
    reader: impl std::io::Read,
    label_column: &str,
    normalization: Normalization,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv { row: 0, reason: e.to_string() })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::config("label_column", format!("column `{label_column}` not in header")))?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv { row: i + 1, reason: e.to_string() })?;
        rows.push(rec.iter().map(|s| s.trim().to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::Empty("csv has no data rows".into()));
    }

    let kinds: Vec<ColumnKind> = (0..header.len())
        .map(|j| {
            let parsed = rows.iter().filter(|r| r[j].parse::<f64>().is_ok()).count();
            if j != label_idx && 2 * parsed > rows.len() {
                ColumnKind::Numeric
            } else {
                let mut cats: Vec<String> = rows.iter().map(|r| r[j].clone()).collect();
                cats.sort();
                cats.dedup();
                ColumnKind::Categorical(cats)
            }
        })
        .collect();

    let mut dim = 0;
    for (j, kind) in kinds.iter().enumerate() {
        if j == label_idx {
            continue;
        }
        dim += match kind {
            ColumnKind::Numeric => 1,
            ColumnKind::Categorical(c) => c.len(),
        };
    }
    if dim == 0 {
        return Err(Error::Dimension("csv has no feature columns".into()));
    }

    let label_cats = match &kinds[label_idx] {
        ColumnKind::Categorical(c) => c.clone(),
        ColumnKind::Numeric => unreachable!("label column is always categorical"),
    };
    let label_of: BTreeMap<&str, usize> = label_cats.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut features = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    let mut numeric_cols = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let mut col = 0;
        for (j, kind) in kinds.iter().enumerate() {
            if j == label_idx {
                continue;
            }
            match kind {
                ColumnKind::Numeric => {
                    let v: f64 = row[j].parse().map_err(|_| Error::Csv {
                        row: i + 1,
                        reason: format!("column `{}`: `{}` is not numeric", header[j], row[j]),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Csv {
                            row: i + 1,
                            reason: format!("column `{}`: non-finite value", header[j]),
                        });
                    }
                    features.push(v);
                    if i == 0 {
                        numeric_cols.push(col);
                    }
                    col += 1;
                }
                ColumnKind::Categorical(cats) => {
                    let hit = cats.binary_search(&row[j]).expect("category collected from rows");
                    for c in 0..cats.len() {
                        features.push(if c == hit { 1.0 } else { 0.0 });
                    }
                    col += cats.len();
                }
            }
        }
        labels.push(label_of[row[label_idx].as_str()]);
    }

    if normalization == Normalization::Zscore {
        let n = rows.len() as f64;
        for &c in &numeric_cols {
            let mean = (0..rows.len()).map(|i| features[i * dim + c]).sum::<f64>() / n;
            let var = (0..rows.len()).map(|i| (features[i * dim + c] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            for i in 0..rows.len() {
                let v = &mut features[i * dim + c];
                *v = if sd > 0.0 { (*v - mean) / sd } else { *v - mean };
            }
        }
    }

    Dataset::new(features, labels, dim, label_cats.len().max(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_split_gives_one_sample_per_class() {
        let d = generate_synthetic(10, 3, 10, 2.0, 9).unwrap();
        assert_eq!(d.class_histogram(), vec![1; 10]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(50, 4, 3, 3.0, 11).unwrap();
        let b = generate_synthetic(50, 4, 3, 3.0, 11).unwrap();
        let bits = |d: &Dataset| d.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn synthetic_rejects_too_few_samples() {
        assert!(matches!(generate_synthetic(3, 2, 4, 1.0, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn largest_remainder_conserves_total() {
        assert_eq!(largest_remainder(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(largest_remainder(7, &[1.0, 1.0, 1.0]), vec![3, 2, 2]);
        assert_eq!(largest_remainder(5, &[0.0, 0.0]), vec![3, 2]);
    }

    #[test]
    fn dirichlet_with_huge_alpha_matches_global_histogram() {
        let full = generate_synthetic(2000, 2, 2, 1.0, 3).unwrap();
        let parts = dirichlet_partition(&full, 5, 1e6, 3).unwrap();
        for p in &parts {
            let h = p.class_histogram();
            let share = h[0] as f64 / p.len() as f64;
            assert!((share - 0.5).abs() < 0.05, "share {share}");
        }
    }

    #[test]
    fn partition_conserves_samples() {
        let full = generate_synthetic(301, 3, 3, 1.0, 5).unwrap();
        for alpha in [0.05, 0.1, 1.0, 100.0] {
            let parts = dirichlet_partition_indices(full.labels(), 3, 5, alpha, 17).unwrap();
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..301).collect::<Vec<_>>());
            assert!(parts.iter().all(|p| !p.is_empty()));
        }
    }

    #[test]
    fn dirichlet_forces_nonempty_clients_on_tiny_input() {
        // 6 samples, 5 clients, tiny alpha: retries are unlikely to succeed,
        // the fallback must still give everyone a sample.
        let labels = vec![0, 0, 0, 1, 1, 1];
        let parts = dirichlet_partition_indices(&labels, 2, 5, 1e-3, 1).unwrap();
        assert!(parts.iter().all(|p| !p.is_empty()));
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 6);
    }

    #[test]
    fn dirichlet_errors() {
        assert!(dirichlet_partition_indices(&[0, 1], 2, 5, 1.0, 0).is_err());
        assert!(dirichlet_partition_indices(&[0, 0, 0], 2, 2, 1.0, 0).is_err());
        assert!(dirichlet_partition_indices(&[0, 1, 0], 2, 2, 0.0, 0).is_err());
    }

    #[test]
    fn linear_noise_endpoints() {
        let full = generate_synthetic(40, 2, 2, 1.0, 1).unwrap();
        let parts = iid_partition(&full, 2, 1).unwrap();
        let noisy = inject_linear_label_noise(&parts, 4).unwrap();
        assert_eq!(noisy[0].labels(), parts[0].labels());
        match noisy[0].provenance {
            Provenance::LabelNoise { p, reassigned } => {
                assert_eq!(p, 0.0);
                assert_eq!(reassigned, 0);
            }
            _ => panic!("wrong provenance"),
        }
        match noisy[1].provenance {
            Provenance::LabelNoise { p, reassigned } => {
                assert_eq!(p, 1.0);
                assert_eq!(reassigned, parts[1].len());
            }
            _ => panic!("wrong provenance"),
        }
        assert!(inject_linear_label_noise(&parts[..1], 4).is_err());
    }

    #[test]
    fn csv_one_hot_dimension() {
        let text = "age,color,label\n1.5,red,a\n2.5,blue,b\n3.0,red,a\n";
        let d = load_csv_reader(text.as_bytes(), "label", Normalization::None).unwrap();
        assert_eq!(d.dim(), 3);
        assert_eq!(d.len(), 3);
        // color categories sorted: blue, red
        assert_eq!(d.row(0), &[1.5, 0.0, 1.0]);
        assert_eq!(d.row(1), &[2.5, 1.0, 0.0]);
        assert_eq!(d.labels(), &[0, 1, 0]);
    }

    #[test]
    fn csv_zscore() {
        let text = "x,y,label\n1,10,a\n2,20,b\n3,35,a\n4,-7,b\n";
        let d = load_csv_reader(text.as_bytes(), "label", Normalization::Zscore).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..d.len()).map(|i| d.row(i)[c]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_junk_in_numeric_column_names_row() {
        let text = "x,label\n1.0,a\n2.0,b\noops,a\n4.0,b\n";
        let err = load_csv_reader(text.as_bytes(), "label", Normalization::None).unwrap_err();
        assert_eq!(err, Error::Csv { row: 3, reason: "column `x`: `oops` is not numeric".into() });
        assert!(err.to_string().contains("row 3"));
    }

    #[test]
    fn csv_unknown_label_column() {
        let text = "x,label\n1.0,a\n";
        assert!(matches!(load_csv_reader(text.as_bytes(), "target", Normalization::None), Err(Error::Config { .. })));
    }

    #[test]
    fn csv_quoted_fields() {
        let text = "x,\"kind, long\",label\n1.0,\"a, b\",yes\n2.0,c,no\n";
        let d = load_csv_reader(text.as_bytes(), "label", Normalization::None).unwrap();
        assert_eq!(d.dim(), 3);
        assert_eq!(d.labels(), &[1, 0]);
    }
}
