//! Synthetic benchmark data.
//!
//! `gen_blobs` draws class-conditional Gaussians whose means sit on
//! orthogonal axes of a low-variance signal subspace, embedded in a cloud of
//! high-variance nuisance dimensions, then applies one global affine rescale
//! into the unit cube. The single global scale is deliberate: rescaling per
//! coordinate would equalize the axes and destroy the property that class
//! boundaries are much closer than the nearest neighbor, which is the regime
//! where small adversarial perturbations exist at all.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Model training and statistic fitting.
    Train,
    /// Threshold calibration and meta-classifier training.
    Calibration,
    /// Reported detection rates.
    Holdout,
    /// Reported accuracies and attack-strength tuning.
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Calibration, Split::Holdout, Split::Test];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Holdout => "holdout",
            Split::Test => "test",
        }
    }
}

const SPLIT_FRACTIONS: [(Split, f64); 4] = [
    (Split::Train, 0.50),
    (Split::Calibration, 0.20),
    (Split::Holdout, 0.15),
    (Split::Test, 0.15),
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobParams {
    pub classes: usize,
    pub dim: usize,
    pub count: usize,
    /// Distance between a class mean and the origin of the signal subspace,
    /// in units of the within-class signal deviation.
    pub separation: f64,
    /// Nuisance-to-signal standard deviation ratio.
    pub nuisance_spread: f64,
    pub seed: u64,
}

impl BlobParams {
    pub fn new(classes: usize, dim: usize, count: usize, separation: f64, seed: u64) -> Self {
        BlobParams {
            classes,
            dim,
            count,
            separation,
            nuisance_spread: 8.0,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetMeta {
    Blobs(BlobParams),
    External { source: String },
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: BTreeMap<Split, Vec<usize>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Clones out one split as (inputs, labels).
    pub fn gather(&self, split: Split) -> (Vec<Tensor>, Vec<usize>) {
        let idx = self.split_indices(split);
        (
            idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Reinterprets every input under a new shape (e.g. [h*w] -> [1, h, w]).
    pub fn with_input_shape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        for input in &mut self.inputs {
            if input.len() != expected {
                return Err(Error::shape(
                    "Dataset::with_input_shape",
                    format!("input has {} elements, shape {:?} needs {}", input.len(), shape, expected),
                ));
            }
            *input = Tensor::new(shape.to_vec(), input.data().to_vec())?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::EmptyDataset("no samples".into()));
        }
        if self.inputs.len() != self.labels.len() {
            return Err(Error::InvalidParameter(format!(
                "{} inputs vs {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                num_classes: self.num_classes,
            });
        }
        let mut seen = vec![false; self.inputs.len()];
        for indices in self.splits.values() {
            for &i in indices {
                if i >= self.inputs.len() || seen[i] {
                    return Err(Error::InvalidParameter(
                        "splits must partition the sample indices".into(),
                    ));
                }
                seen[i] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidParameter(
                "splits must cover every sample".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded Fisher-Yates shuffle.
fn shuffle(indices: &mut [usize], rng: &mut ChaCha12Rng) {
    use rand::Rng;
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

fn assign_splits(count: usize, rng: &mut ChaCha12Rng) -> BTreeMap<Split, Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    shuffle(&mut order, rng);
    let mut splits = BTreeMap::new();
    let mut start = 0usize;
    for (i, (split, fraction)) in SPLIT_FRACTIONS.iter().enumerate() {
        let end = if i + 1 == SPLIT_FRACTIONS.len() {
            count
        } else {
            start + ((count as f64) * fraction).round() as usize
        };
        let end = end.min(count);
        splits.insert(*split, order[start..end].to_vec());
        start = end;
    }
    splits
}

/// Orthonormal rows via Gram-Schmidt on a seeded Gaussian matrix.
fn random_rotation(dim: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        for prev in &rows {
            let proj: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= proj * pi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially impossible; redraw
        }
        for vi in &mut v {
            *vi /= norm;
        }
        rows.push(v);
    }
    rows
}

/// Class-balanced anisotropic Gaussian blobs in the unit cube.
pub fn gen_blobs(params: &BlobParams) -> Result<Dataset> {
    let BlobParams {
        classes,
        dim,
        count,
        separation,
        nuisance_spread,
        seed,
    } = *params;
    if classes < 2 {
        return Err(Error::InvalidParameter("need at least two classes".into()));
    }
    if dim < classes {
        return Err(Error::InvalidParameter(format!(
            "dim {dim} must be at least the class count {classes} (class means sit on orthogonal axes)"
        )));
    }
    if count < classes {
        return Err(Error::EmptyDataset(format!(
            "count {count} cannot cover {classes} classes"
        )));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if !(nuisance_spread.is_finite() && nuisance_spread >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "nuisance_spread must be >= 1, got {nuisance_spread}"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let rotation = random_rotation(dim, &mut rng);

    // Balanced labels in round-robin order; the splits reshuffle anyway.
    let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();

    let mut latent: Vec<Vec<f64>> = Vec::with_capacity(count);
    for &label in &labels {
        let mut z: Vec<f64> = (0..dim)
            .map(|d| {
                let g: f64 = StandardNormal.sample(&mut rng);
                if d < classes {
                    g // unit signal deviation
                } else {
                    g * nuisance_spread
                }
            })
            .collect();
        z[label] += separation;
        latent.push(z);
    }

    // Rotate, then one global affine map into [0, 1].
    let mut rotated: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for z in &latent {
        let v: Vec<f64> = rotation
            .iter()
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        for &c in &v {
            lo = lo.min(c);
            hi = hi.max(c);
        }
        rotated.push(v);
    }
    let scale = hi - lo;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::DegenerateStatistics(
            "generated cloud has zero extent".into(),
        ));
    }
    let inputs: Vec<Tensor> = rotated
        .into_iter()
        .map(|v| {
            Tensor::new(
                vec![dim],
                v.into_iter()
                    .map(|c| ((c - lo) / scale).clamp(0.0, 1.0))
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;

    let splits = assign_splits(count, &mut rng);
    let dataset = Dataset {
        inputs,
        labels,
        num_classes: classes,
        splits,
        meta: DatasetMeta::Blobs(params.clone()),
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BlobParams {
        BlobParams::new(4, 12, 400, 6.0, 1)
    }

    #[test]
    fn blobs_are_balanced_in_unit_cube() {
        let ds = gen_blobs(&small()).unwrap();
        assert_eq!(ds.len(), 400);
        let mut per_class = vec![0usize; 4];
        for &l in &ds.labels {
            per_class[l] += 1;
        }
        assert_eq!(per_class, vec![100; 4]);
        for x in &ds.inputs {
            assert_eq!(x.shape(), &[12]);
            assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn splits_partition_the_samples() {
        let ds = gen_blobs(&small()).unwrap();
        let total: usize = Split::ALL.iter().map(|s| ds.split_indices(*s).len()).sum();
        assert_eq!(total, ds.len());
        assert_eq!(ds.split_indices(Split::Train).len(), 200);
        assert_eq!(ds.split_indices(Split::Calibration).len(), 80);
        ds.validate().unwrap();
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = gen_blobs(&small()).unwrap();
        let b = gen_blobs(&small()).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.splits, b.splits);
        let mut other = small();
        other.seed = 2;
        let c = gen_blobs(&other).unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn classes_are_separable_by_centroids() {
        // Nearest-centroid needs more samples than `small` to average the
        // nuisance dimensions out of the centroid estimates.
        let ds = gen_blobs(&BlobParams::new(4, 12, 2000, 6.0, 1)).unwrap();
        let dim = 12;
        let mut centroids = vec![vec![0.0; dim]; 4];
        let mut counts = vec![0usize; 4];
        for (x, &l) in ds.inputs.iter().zip(&ds.labels) {
            counts[l] += 1;
            for (c, v) in centroids[l].iter_mut().zip(x.data()) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        let mut hits = 0;
        for (x, &l) in ds.inputs.iter().zip(&ds.labels) {
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(x.data())
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(x.data())
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            hits += usize::from(best == l);
        }
        let acc = hits as f64 / ds.len() as f64;
        assert!(acc > 0.95, "centroid accuracy {acc}");
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(gen_blobs(&BlobParams::new(1, 12, 100, 6.0, 0)).is_err());
        assert!(gen_blobs(&BlobParams::new(4, 3, 100, 6.0, 0)).is_err());
        assert!(gen_blobs(&BlobParams::new(4, 12, 2, 6.0, 0)).is_err());
        assert!(gen_blobs(&BlobParams::new(4, 12, 100, -1.0, 0)).is_err());
    }
}
