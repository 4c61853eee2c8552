//! Noise sources used to probe the log-odds landscape around an input.
//!
//! Draws are counter-based: every (seed, draw_index) pair maps to one stream
//! of a seeded ChaCha generator, so any draw can be regenerated in isolation
//! and results never depend on evaluation order or worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSource {
    /// Coordinates drawn i.i.d. from U(-magnitude, magnitude).
    Uniform,
    /// Coordinates drawn i.i.d. from N(0, magnitude^2).
    Gaussian,
    /// Coordinates drawn i.i.d. from {-magnitude, +magnitude} with equal odds.
    BernoulliSign,
}

impl NoiseSource {
    pub const ALL: [NoiseSource; 3] = [
        NoiseSource::Uniform,
        NoiseSource::Gaussian,
        NoiseSource::BernoulliSign,
    ];

    pub fn label(self) -> &'static str {
        match self {
            NoiseSource::Uniform => "uniform",
            NoiseSource::Gaussian => "gaussian",
            NoiseSource::BernoulliSign => "bernoulli_sign",
        }
    }
}

/// One cell of the noise grid: a source at a fixed magnitude with its own
/// seed and a number of draws per probed point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub source: NoiseSource,
    pub magnitude: f64,
    pub samples_per_point: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(
        source: NoiseSource,
        magnitude: f64,
        samples_per_point: usize,
        seed: u64,
    ) -> Result<Self> {
        if !magnitude.is_finite() || magnitude < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise magnitude must be finite and >= 0, got {magnitude}"
            )));
        }
        if samples_per_point == 0 {
            return Err(Error::InvalidParameter(
                "samples_per_point must be positive".into(),
            ));
        }
        Ok(NoiseSpec {
            source,
            magnitude,
            samples_per_point,
            seed,
        })
    }

    /// Deterministic draw: the same (seed, draw_index) always yields the same
    /// tensor, independent of any other draws.
    pub fn sample(&self, shape: &[usize], draw_index: u64) -> Tensor {
        let len: usize = shape.iter().product();
        if self.magnitude == 0.0 {
            // Exact zeros; avoids -0.0 artifacts from scaling signs.
            return Tensor::zeros(shape);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(draw_index);
        let data: Vec<f64> = match self.source {
            NoiseSource::Uniform => (0..len)
                .map(|_| rng.random_range(-self.magnitude..=self.magnitude))
                .collect(),
            NoiseSource::Gaussian => (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * self.magnitude
                })
                .collect(),
            NoiseSource::BernoulliSign => (0..len)
                .map(|_| {
                    if rng.random::<bool>() {
                        self.magnitude
                    } else {
                        -self.magnitude
                    }
                })
                .collect(),
        };
        Tensor::from_raw(shape.to_vec(), data)
    }
}

/// Grid of noise cells: every source crossed with a shared ladder of
/// magnitudes. Cell order is fixed (sources in `NoiseSource::ALL` order,
/// magnitudes ascending) and all downstream statistics index cells by this
/// order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseGrid {
    pub cells: Vec<NoiseSpec>,
}

pub const MAGNITUDE_LADDER: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Derives an independent stream seed from a master seed and a salt.
pub fn mix_seed(master: u64, salt: u64) -> u64 {
    // splitmix64 finalizer; cheap, well-dispersed, stable across platforms.
    let mut z = master.wrapping_add(salt.wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl NoiseGrid {
    /// Default grid: all three sources, five magnitudes per source spanning
    /// base/4 .. 4*base with ratio 2. Each cell gets its own derived seed so
    /// no two cells share draw streams.
    pub fn default_grid(base_magnitude: f64, samples_per_point: usize, seed: u64) -> Result<Self> {
        if !(base_magnitude.is_finite() && base_magnitude > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "base magnitude must be positive, got {base_magnitude}"
            )));
        }
        let mut cells = Vec::with_capacity(15);
        for source in NoiseSource::ALL {
            for factor in MAGNITUDE_LADDER {
                let idx = cells.len() as u64;
                cells.push(NoiseSpec::new(
                    source,
                    base_magnitude * factor,
                    samples_per_point,
                    mix_seed(seed, idx),
                )?);
            }
        }
        NoiseGrid::new(cells)
    }

    /// Validates cell ordering: per source, magnitudes must be strictly
    /// increasing, and cells of one source must be contiguous.
    pub fn new(cells: Vec<NoiseSpec>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidParameter("noise grid has no cells".into()));
        }
        let mut seen: Vec<NoiseSource> = Vec::new();
        let mut i = 0;
        while i < cells.len() {
            let source = cells[i].source;
            if seen.contains(&source) {
                return Err(Error::InvalidParameter(format!(
                    "noise grid cells for source {} are not contiguous",
                    source.label()
                )));
            }
            seen.push(source);
            let mut last = cells[i].magnitude;
            i += 1;
            while i < cells.len() && cells[i].source == source {
                if cells[i].magnitude <= last {
                    return Err(Error::InvalidParameter(format!(
                        "magnitudes for source {} must be strictly increasing",
                        source.label()
                    )));
                }
                last = cells[i].magnitude;
                i += 1;
            }
        }
        Ok(NoiseGrid { cells })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Distinct sources in grid order, each with the indices of its cells.
    pub fn sources(&self) -> Vec<(NoiseSource, Vec<usize>)> {
        let mut out: Vec<(NoiseSource, Vec<usize>)> = Vec::new();
        for (idx, cell) in self.cells.iter().enumerate() {
            match out.last_mut() {
                Some((source, indices)) if *source == cell.source => indices.push(idx),
                _ => out.push((cell.source, vec![idx])),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_reproducible_and_independent_of_order() {
        for source in NoiseSource::ALL {
            let spec = NoiseSpec::new(source, 0.3, 4, 99).unwrap();
            let late = spec.sample(&[6], 17);
            let early = spec.sample(&[6], 3);
            let late_again = spec.sample(&[6], 17);
            assert_eq!(late, late_again);
            assert_ne!(late, early);
        }
    }

    #[test]
    fn magnitudes_bound_the_draws() {
        let spec = NoiseSpec::new(NoiseSource::Uniform, 0.1, 1, 5).unwrap();
        let t = spec.sample(&[100], 0);
        assert!(t.linf_norm() <= 0.1);

        let signs = NoiseSpec::new(NoiseSource::BernoulliSign, 0.2, 1, 5).unwrap();
        let s = signs.sample(&[100], 0);
        assert!(s.data().iter().all(|v| v.abs() == 0.2));
        assert!(s.data().iter().any(|v| *v > 0.0));
        assert!(s.data().iter().any(|v| *v < 0.0));
    }

    #[test]
    fn zero_magnitude_is_exactly_zero() {
        for source in NoiseSource::ALL {
            let spec = NoiseSpec::new(source, 0.0, 1, 1).unwrap();
            let t = spec.sample(&[8], 12);
            assert!(t.data().iter().all(|v| v.to_bits() == 0));
        }
    }

    #[test]
    fn gaussian_moments_concentrate() {
        let spec = NoiseSpec::new(NoiseSource::Gaussian, 0.5, 1, 7).unwrap();
        let n = 20_000;
        let t = spec.sample(&[n], 0);
        let mean = t.data().iter().sum::<f64>() / n as f64;
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 0.25).abs() < 0.02, "var {var}");
    }

    #[test]
    fn default_grid_shape_and_ladder() {
        let grid = NoiseGrid::default_grid(0.08, 16, 3).unwrap();
        assert_eq!(grid.len(), 15);
        let sources = grid.sources();
        assert_eq!(sources.len(), 3);
        for (_, indices) in &sources {
            assert_eq!(indices.len(), 5);
        }
        let mags: Vec<f64> = grid.cells[..5].iter().map(|c| c.magnitude).collect();
        assert_eq!(mags, vec![0.02, 0.04, 0.08, 0.16, 0.32]);
        // Distinct streams per cell.
        let seeds: std::collections::BTreeSet<u64> =
            grid.cells.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 15);
    }

    #[test]
    fn grid_rejects_non_monotone_magnitudes() {
        let cells = vec![
            NoiseSpec::new(NoiseSource::Uniform, 0.2, 1, 0).unwrap(),
            NoiseSpec::new(NoiseSource::Uniform, 0.1, 1, 1).unwrap(),
        ];
        assert!(NoiseGrid::new(cells).is_err());
    }
}
