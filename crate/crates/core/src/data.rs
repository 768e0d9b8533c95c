//! Datasets, non-IID partitioners and per-client train/test splits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// Features with integer class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::invalid("features must be an [n × input_dim] matrix"));
        }
        if labels.len() != features.rows() {
            return Err(Error::ShapeMismatch {
                op: "LabeledDataset::new",
                expected: vec![features.rows()],
                actual: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        features.ensure_finite("dataset features")?;
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            features,
            labels,
            num_classes: self.num_classes,
        })
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Dataset indices grouped by label, each group ascending.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

/// Class-conditional Gaussian clusters: each class gets a center with
/// standard-normal coordinates, and samples scatter around it with standard
/// deviation `spread`. Samples are stored class by class.
pub fn generate_synthetic(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut problems = Vec::new();
    if num_classes < 2 {
        problems.push(format!("need at least 2 classes, got {num_classes}"));
    }
    if input_dim == 0 {
        problems.push("input_dim must be positive".to_string());
    }
    if per_class < 10 {
        problems.push(format!("per_class must be ≥ 10, got {per_class}"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        problems.push(format!("spread must be finite and ≥ 0, got {spread}"));
    }
    if !problems.is_empty() {
        return Err(Error::invalid(problems.join("; ")));
    }

    let mut rng = rng_from_seed(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..input_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|&m| m + spread * rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, input_dim], data)?, labels, num_classes)
}

/// Label-skew partition where every client receives samples of exactly
/// `classes_per_client` distinct labels.
///
/// Each class is cut into `ceil(N·k / C)` equal shards (leftovers go to the
/// last shard). Shards are laid out class by class in a seed-permuted class
/// order and dealt with stride `N`: client `j` receives shards `j, j + N, …`.
/// Since a class occupies at most `N` consecutive shards, the dealt shards of
/// one client always come from distinct classes. Undealt shards stay unused.
pub fn pathological_partition(
    data: &LabeledDataset,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let classes = data.num_classes();
    if num_clients == 0 {
        return Err(Error::invalid("number of clients must be positive"));
    }
    if classes_per_client == 0 || classes_per_client > classes {
        return Err(Error::invalid(format!(
            "classes_per_client must be in [1, {classes}], got {classes_per_client}"
        )));
    }
    let shards_per_class = (num_clients * classes_per_client).div_ceil(classes);
    let mut by_class = data.indices_by_class();
    for (c, group) in by_class.iter().enumerate() {
        if group.len() < shards_per_class {
            return Err(Error::InfeasiblePartition(format!(
                "class {c} has {} samples but {shards_per_class} shards are required",
                group.len()
            )));
        }
    }

    let mut rng = rng_from_seed(seed);
    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut rng);
    for group in by_class.iter_mut() {
        group.shuffle(&mut rng);
    }

    let mut shards: Vec<&[usize]> = Vec::with_capacity(classes * shards_per_class);
    for &c in &class_order {
        let group = &by_class[c];
        let size = group.len() / shards_per_class;
        for s in 0..shards_per_class {
            let end = if s + 1 == shards_per_class { group.len() } else { (s + 1) * size };
            shards.push(&group[s * size..end]);
        }
    }

    Ok((0..num_clients)
        .map(|j| {
            (0..classes_per_client)
                .flat_map(|m| shards[j + m * num_clients].iter().copied())
                .collect()
        })
        .collect())
}

/// Splits `total` into integer counts proportional to `weights`, rounding by
/// largest remainder (ties to the lower index) so the counts sum to `total`.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// For each class, draws client proportions from `Dirichlet(γ·1_N)` and deals
/// the (shuffled) class samples out in those proportions.
pub fn dirichlet_partition(
    data: &LabeledDataset,
    num_clients: usize,
    gamma: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if num_clients == 0 {
        return Err(Error::invalid("number of clients must be positive"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("Dirichlet concentration must be > 0, got {gamma}")));
    }
    let gamma_dist = Gamma::new(gamma, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let mut parts = vec![Vec::new(); num_clients];
    for mut group in data.indices_by_class() {
        group.shuffle(&mut rng);
        let mut weights: Vec<f64> = (0..num_clients).map(|_| gamma_dist.sample(&mut rng)).collect();
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            // every draw underflowed: all mass on one client
            weights = vec![0.0; num_clients];
            weights[rng.random_range(0..num_clients)] = 1.0;
        }
        let counts = largest_remainder(&weights, group.len());
        let mut offset = 0;
        for (client, count) in counts.into_iter().enumerate() {
            parts[client].extend_from_slice(&group[offset..offset + count]);
            offset += count;
        }
    }
    Ok(parts)
}

/// One client's local data, split into disjoint train and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSplit {
    pub client_id: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn split_impl(
    data: &LabeledDataset,
    client_id: usize,
    indices: &[usize],
    ratio: f64,
    seed: u64,
    strict: bool,
) -> Result<ClientSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("train ratio must be in (0, 1), got {ratio}")));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        if i >= data.len() {
            return Err(Error::invalid(format!("index {i} out of range for {} samples", data.len())));
        }
        groups.entry(data.labels()[i]).or_default().push(i);
    }
    if strict {
        if let Some((label, g)) = groups.iter().find(|(_, g)| g.len() < 5) {
            return Err(Error::invalid(format!(
                "client {client_id}: label {label} has {} samples, at least 5 are needed for a train/test split",
                g.len()
            )));
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut cuts: Vec<(Vec<usize>, usize)> = groups
        .into_values()
        .map(|mut group| {
            group.sort_unstable();
            group.shuffle(&mut rng);
            let n_train = ((ratio * group.len() as f64) - 1e-9).ceil() as usize;
            (group, n_train)
        })
        .collect();
    // Sparse labels all round into train; hold out one sample of the largest
    // label (lowest label on ties) so the test set is never empty.
    if !strict && indices.len() >= 2 && cuts.iter().all(|(g, n)| *n == g.len()) {
        let largest = (0..cuts.len()).fold(0, |best, i| if cuts[i].0.len() > cuts[best].0.len() { i } else { best });
        cuts[largest].1 -= 1;
    }
    let (mut train_indices, mut test_indices) = (Vec::new(), Vec::new());
    for (group, n_train) in &cuts {
        train_indices.extend_from_slice(&group[..*n_train]);
        test_indices.extend_from_slice(&group[*n_train..]);
    }
    if train_indices.is_empty() || test_indices.is_empty() {
        return Err(Error::invalid(format!(
            "client {client_id}: too few samples ({}) for a train/test split",
            indices.len()
        )));
    }
    Ok(ClientSplit {
        client_id,
        train: data.subset(&train_indices)?,
        test: data.subset(&test_indices)?,
        train_indices,
        test_indices,
    })
}

/// Stratified split: per label, `ceil(ratio · n)` samples go to train and the
/// rest to test. Every present label needs at least 5 samples.
pub fn split_train_test(
    data: &LabeledDataset,
    client_id: usize,
    indices: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<ClientSplit> {
    split_impl(data, client_id, indices, ratio, seed, true)
}

/// Same rounding as [`split_train_test`] but accepts sparse labels, which then
/// land entirely in train. Used for Dirichlet partitions, where a client can
/// hold only a handful of samples of some label. If that leaves the test set
/// empty, one sample of the most frequent label moves to test. Fails only for
/// clients with fewer than 2 samples.
pub fn split_train_test_lenient(
    data: &LabeledDataset,
    client_id: usize,
    indices: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<ClientSplit> {
    split_impl(data, client_id, indices, ratio, seed, false)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExternalFormat {
    /// Header-less rows `f1,...,fd,label`.
    Csv,
    /// IDX image file (the loaded path) plus its companion label file.
    Idx { labels: PathBuf },
}

/// Loads a dataset from disk. Features end up in `[0, 1]`; see
/// [`load_csv`] and [`load_idx`] for the per-format rules.
pub fn load_external(
    path: &Path,
    format: &ExternalFormat,
    expected_dim: Option<usize>,
    num_classes: Option<usize>,
) -> Result<LabeledDataset> {
    let ds = match format {
        ExternalFormat::Csv => load_csv(path, num_classes)?,
        ExternalFormat::Idx { labels } => load_idx(path, labels, num_classes)?,
    };
    if let Some(dim) = expected_dim {
        if ds.input_dim() != dim {
            return Err(Error::format(
                path,
                format!("feature dimension {} does not match configured input_dim {dim}", ds.input_dim()),
            ));
        }
    }
    Ok(ds)
}

fn infer_classes(path: &Path, labels: &[usize], num_classes: Option<usize>) -> Result<usize> {
    let max = labels.iter().copied().max().unwrap_or(0);
    match num_classes {
        Some(c) if max >= c => Err(Error::format(path, format!("label {max} out of range for {c} classes"))),
        Some(c) => Ok(c),
        None => Ok((max + 1).max(2)),
    }
}

/// Reads header-less CSV rows `f1,...,fd,label`.
///
/// Features already inside `[0, 1]` are kept verbatim; otherwise every column
/// is min-max scaled to `[0, 1]` (constant columns become 0).
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 1;
        if record.len() < 2 {
            return Err(Error::format(path, format!("line {line}: need at least one feature and a label")));
        }
        let d = record.len() - 1;
        if *width.get_or_insert(d) != d {
            return Err(Error::format(path, format!("line {line}: expected {} features, found {d}", width.unwrap())));
        }
        for field in record.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {line}: malformed feature {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::format(path, format!("line {line}: non-finite feature")));
            }
            data.push(v);
        }
        let raw = record[d].trim();
        let label: usize = raw
            .parse()
            .map_err(|_| Error::format(path, format!("line {line}: malformed label {raw:?}")))?;
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::format(path, "no rows"))?;
    let n = labels.len();
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        for col in 0..width {
            let column = data.iter().skip(col).step_by(width);
            let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let range = hi - lo;
            for v in data.iter_mut().skip(col).step_by(width) {
                *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
            }
        }
    }
    let classes = infer_classes(path, &labels, num_classes)?;
    LabeledDataset::new(Tensor::new(vec![n, width], data)?, labels, classes)
}

pub fn export_csv(data: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (i, &label) in data.labels().iter().enumerate() {
        for v in data.features().row(i) {
            write!(out, "{v},")?;
        }
        writeln!(out, "{label}")?;
    }
    out.flush()?;
    Ok(())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(Error::format(path, "file too short for an IDX header"));
    }
    let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if found != magic {
        return Err(Error::format(
            path,
            format!("IDX magic number mismatch: expected {magic:#010x}, found {found:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::format(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    let body = bytes.split_off(header);
    if body.len() != expected {
        return Err(Error::format(path, format!("IDX body has {} bytes, header implies {expected}", body.len())));
    }
    Ok((dims, body))
}

/// Reads an unsigned-byte IDX image file and its label file. Pixels are
/// divided by 255.
pub fn load_idx(images: &Path, labels_path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let (dims, pixels) = read_idx(images, IDX_IMAGES_MAGIC)?;
    let (ldims, raw_labels) = read_idx(labels_path, IDX_LABELS_MAGIC)?;
    if dims[0] != ldims[0] {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} images", ldims[0], dims[0]),
        ));
    }
    if dims[0] == 0 || dims[1] * dims[2] == 0 {
        return Err(Error::format(images, "empty IDX image file"));
    }
    let n = dims[0];
    let width = dims[1] * dims[2];
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = infer_classes(labels_path, &labels, num_classes)?;
    LabeledDataset::new(Tensor::new(vec![n, width], data)?, labels, classes)
}

/// Writes `data` as IDX images of shape `rows × cols` (features scaled by 255
/// and rounded) plus the label file.
pub fn export_idx(data: &LabeledDataset, rows: usize, cols: usize, images: &Path, labels: &Path) -> Result<()> {
    if rows * cols != data.input_dim() {
        return Err(Error::invalid(format!(
            "{rows}×{cols} images do not match {} features",
            data.input_dim()
        )));
    }
    if data.num_classes() > 256 {
        return Err(Error::invalid("IDX labels are single bytes"));
    }
    let mut img = BufWriter::new(File::create(images)?);
    img.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for d in [data.len(), rows, cols] {
        img.write_all(&(d as u32).to_be_bytes())?;
    }
    let bytes: Vec<u8> = data
        .features()
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    img.write_all(&bytes)?;
    img.flush()?;

    let mut lab = BufWriter::new(File::create(labels)?);
    lab.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lab.write_all(&(data.len() as u32).to_be_bytes())?;
    lab.write_all(&data.labels().iter().map(|&l| l as u8).collect::<Vec<_>>())?;
    lab.flush()?;
    Ok(())
}

/// Mean over clients of the Shannon entropy (nats) of their label histogram.
pub fn mean_label_entropy(data: &LabeledDataset, parts: &[Vec<usize>]) -> f64 {
    let entropies: Vec<f64> = parts
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| {
            let mut counts = vec![0usize; data.num_classes()];
            for &i in p {
                counts[data.labels()[i]] += 1;
            }
            let n = p.len() as f64;
            counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let q = c as f64 / n;
                    -q * q.ln()
                })
                .sum()
        })
        .collect();
    entropies.iter().sum::<f64>() / entropies.len().max(1) as f64
}
