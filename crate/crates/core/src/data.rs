//! Vector datasets: a seeded Gaussian-mixture generator, stochastic views,
//! CSV import/export, minibatching and labeled-subset selection.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CrlcError, Result};

/// Label value of an unlabeled sample.
pub const UNLABELED: i64 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<i64>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<i64>, class_count: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(invalid("dataset needs at least one sample"));
        }
        if labels.len() != features.nrows() {
            return Err(CrlcError::DimensionMismatch {
                expected: features.nrows(),
                actual: labels.len(),
                context: "label count",
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l < UNLABELED || l >= class_count as i64) {
            return Err(invalid(format!("label {bad} outside -1..{class_count}")));
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Ground-truth labels as cluster indices, if every sample is labeled.
    pub fn truth(&self) -> Option<Vec<usize>> {
        self.labels.iter().map(|&l| usize::try_from(l).ok()).collect()
    }
}

/// Balanced Gaussian mixture: `classes` means drawn uniformly on the sphere of
/// radius `separation`, unit isotropic noise around each. Samples are grouped
/// by class.
pub fn gen_mixture(classes: usize, dim: usize, n_per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < 2 || n_per_class < 1 {
        return Err(invalid(format!(
            "mixture needs classes >= 2, dim >= 2, n_per_class >= 1 (got {classes}, {dim}, {n_per_class})"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(invalid(format!("separation must be > 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = mixture_means(classes, dim, separation, &mut rng);
    let n = classes * n_per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in features.outer_iter_mut().enumerate() {
        let class = i / n_per_class;
        for (v, &m) in row.iter_mut().zip(means.row(class)) {
            *v = m + rng.sample::<f64, _>(StandardNormal);
        }
        labels.push(class as i64);
    }
    Dataset::new(features, labels, classes)
}

/// The class means used by [`gen_mixture`] for the same arguments.
pub fn mixture_means_for(classes: usize, dim: usize, separation: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mixture_means(classes, dim, separation, &mut rng)
}

fn mixture_means(classes: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut means = Array2::zeros((classes, dim));
    for mut row in means.outer_iter_mut() {
        loop {
            row.iter_mut().for_each(|v: &mut f64| *v = rng.sample(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row *= separation / norm;
                break;
            }
        }
    }
    means
}

/// Vector-domain augmentation: additive Gaussian noise, independent
/// coordinate masking and a global scale jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub scale_jitter: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self { noise_sigma: 0.5, mask_prob: 0.1, scale_jitter: 0.2 }
    }
}

impl ViewConfig {
    pub const IDENTITY: ViewConfig = ViewConfig { noise_sigma: 0.0, mask_prob: 0.0, scale_jitter: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(invalid(format!("mask probability must lie in [0, 1), got {}", self.mask_prob)));
        }
        if !(self.scale_jitter >= 0.0 && self.scale_jitter.is_finite()) {
            return Err(invalid(format!("scale jitter must be >= 0, got {}", self.scale_jitter)));
        }
        Ok(())
    }

    /// One stochastic transform of `x`.
    pub fn apply(&self, x: ArrayView1<'_, f64>, rng: &mut impl Rng) -> Array1<f64> {
        let scale = if self.scale_jitter > 0.0 {
            1.0 + rng.gen_range(-self.scale_jitter..=self.scale_jitter)
        } else {
            1.0
        };
        let mut out = x.mapv(|v| {
            if self.noise_sigma > 0.0 {
                v * scale + self.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                v * scale
            }
        });
        if self.mask_prob > 0.0 {
            let keep: Vec<bool> = (0..out.len()).map(|_| rng.gen::<f64>() >= self.mask_prob).collect();
            // a view with every coordinate masked carries no signal; leave it unmasked
            if keep.iter().any(|&k| k) {
                out.iter_mut().zip(&keep).filter(|(_, &k)| !k).for_each(|(v, _)| *v = 0.0);
            }
        }
        out
    }

    /// Applies [`ViewConfig::apply`] to every row.
    pub fn apply_rows(&self, x: ArrayView2<'_, f64>, rng: &mut impl Rng) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&self.apply(src, rng));
        }
        out
    }
}

/// Two independent views of `x` drawn from the stream seeded by `step_seed`.
pub fn make_views(x: ArrayView1<'_, f64>, cfg: &ViewConfig, step_seed: u64) -> Result<(Array1<f64>, Array1<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let a = cfg.apply(x, &mut rng);
    let b = cfg.apply(x, &mut rng);
    Ok((a, b))
}

/// Reads `f0,...,f{D-1},label` rows. The class count is one more than the
/// largest label (at least 2), unless `classes` overrides it.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(std::io::BufReader::new(file));
    let parse_err = |line: usize, message: String| CrlcError::Parse { path: path.to_path_buf(), line, message };

    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let width = header.len();
    if width < 2 || header.get(width - 1) != Some("label") {
        return Err(CrlcError::Schema(format!(
            "{}: header must be f0,...,f{{D-1}},label",
            path.display()
        )));
    }
    for (i, name) in header.iter().take(width - 1).enumerate() {
        if name != format!("f{i}") {
            return Err(CrlcError::Schema(format!("{}: header column {i} is `{name}`, expected `f{i}`", path.display())));
        }
    }
    let dim = width - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            match e.kind() {
                csv::ErrorKind::UnequalLengths { .. } => {
                    CrlcError::Schema(format!("{}:{line}: row width differs from header", path.display()))
                }
                _ => parse_err(line, e.to_string()),
            }
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line() as usize);
        for field in record.iter().take(dim) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric feature `{field}`")))?;
            values.push(v);
        }
        let label_field = record.get(dim).unwrap_or_default();
        let label: i64 = label_field
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("non-integer label `{label_field}`")))?;
        labels.push(label);
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, dim), values).expect("row widths checked");
    let inferred = labels.iter().copied().max().map_or(0, |m| (m + 1).max(2) as usize);
    Dataset::new(features, labels, classes.unwrap_or(inferred.max(2)))
}

/// Writes the CSV layout read by [`load_csv`]; floats use the shortest
/// representation that parses back to the same bits.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    write_csv_to(ds, &mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn write_csv_to(ds: &Dataset, w: &mut impl Write) -> std::io::Result<()> {
    let header: Vec<String> = (0..ds.dim()).map(|i| format!("f{i}")).chain(["label".to_string()]).collect();
    writeln!(w, "{}", header.join(","))?;
    for (row, label) in ds.features.outer_iter().zip(&ds.labels) {
        for v in row {
            write!(w, "{v:?},")?;
        }
        writeln!(w, "{label}")?;
    }
    Ok(())
}

/// Exactly `n_per_class` labeled indices per class, chosen uniformly without
/// replacement; returned grouped by class, ascending within a class.
pub fn sample_labeled(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_class * ds.class_count);
    for class in 0..ds.class_count {
        let pool: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class as i64).collect();
        if pool.len() < n_per_class {
            return Err(invalid(format!(
                "class {class} has {} labeled samples, {n_per_class} requested",
                pool.len()
            )));
        }
        let mut chosen: Vec<usize> = pool.choose_multiple(&mut rng, n_per_class).copied().collect();
        chosen.sort_unstable();
        out.extend(chosen);
    }
    Ok(out)
}

/// Shuffled minibatches of exactly `batch` indices; the short tail is dropped.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}
