//! The noise-perturbed log-odds test.
//!
//! For a point x predicted as class y, the statistic for a candidate class z
//! is g(x, eta) = [f_z - f_y](clip(x + eta)) - [f_z - f_y](x): how much a
//! random nudge moves the log-odds toward z. On natural inputs these
//! responses are small and symmetric; adversarial inputs sit in pockets where
//! noise systematically restores the original class, producing large positive
//! outliers. Statistics (mu, sigma) are fitted per (y, z) pair and per noise
//! cell on correctly classified training data; test points are standardized
//! against them and thresholded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::Classifier;
use crate::noise::NoiseGrid;
use crate::tensor::Tensor;

/// Square per-class-pair matrix. JSON form tags non-finite entries as
/// strings, since thresholds legitimately hold -inf when every point should
/// be flagged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PairMatrixRepr", try_from = "PairMatrixRepr")]
pub struct PairMatrix {
    classes: usize,
    data: Vec<f64>,
}

impl PairMatrix {
    pub fn filled(classes: usize, value: f64) -> Self {
        PairMatrix {
            classes,
            data: vec![value; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, y: usize, z: usize) -> f64 {
        self.data[y * self.classes + z]
    }

    pub fn set(&mut self, y: usize, z: usize, value: f64) {
        assert!(!value.is_nan(), "pair matrix entries must not be NaN");
        self.data[y * self.classes + z] = value;
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonF64 {
    Finite(f64),
    Tagged(String),
}

#[derive(Serialize, Deserialize)]
struct PairMatrixRepr {
    classes: usize,
    rows: Vec<Vec<JsonF64>>,
}

impl From<PairMatrix> for PairMatrixRepr {
    fn from(m: PairMatrix) -> Self {
        let rows = (0..m.classes)
            .map(|y| {
                (0..m.classes)
                    .map(|z| {
                        let v = m.get(y, z);
                        if v.is_finite() {
                            JsonF64::Finite(v)
                        } else if v == f64::NEG_INFINITY {
                            JsonF64::Tagged("-inf".to_string())
                        } else {
                            JsonF64::Tagged("inf".to_string())
                        }
                    })
                    .collect()
            })
            .collect();
        PairMatrixRepr {
            classes: m.classes,
            rows,
        }
    }
}

impl TryFrom<PairMatrixRepr> for PairMatrix {
    type Error = String;

    fn try_from(repr: PairMatrixRepr) -> std::result::Result<Self, String> {
        if repr.rows.len() != repr.classes
            || repr.rows.iter().any(|r| r.len() != repr.classes)
        {
            return Err("pair matrix rows do not match class count".to_string());
        }
        let mut data = Vec::with_capacity(repr.classes * repr.classes);
        for row in repr.rows {
            for item in row {
                let v = match item {
                    JsonF64::Finite(v) if v.is_nan() => {
                        return Err("NaN entry in pair matrix".to_string())
                    }
                    JsonF64::Finite(v) => v,
                    JsonF64::Tagged(s) => match s.as_str() {
                        "-inf" => f64::NEG_INFINITY,
                        "inf" => f64::INFINITY,
                        other => return Err(format!("unknown tagged value '{other}'")),
                    },
                };
                data.push(v);
            }
        }
        Ok(PairMatrix {
            classes: repr.classes,
            data,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellAggregation {
    /// Standardized scores averaged over all grid cells; detection votes per
    /// noise source.
    Average,
    /// Calibration picks the single cell with the best detection rate and
    /// uses only it.
    BestCell,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OddsConfig {
    /// Minimum number of correctly classified fitting samples per class.
    pub min_per_class: usize,
    pub aggregation: CellAggregation,
}

impl Default for OddsConfig {
    fn default() -> Self {
        OddsConfig {
            min_per_class: 10,
            aggregation: CellAggregation::Average,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: PairMatrix,
    pub target_fpr: f64,
    /// Per-pair quantile level after the Sidak-style correction across the
    /// K-1 candidate pairs.
    pub sidak_alpha: f64,
    /// Pairs that had no clean calibration scores and fell back to the
    /// pooled global quantile.
    pub fallback_pairs: Vec<(usize, usize)>,
    /// Chosen cell index under BestCell aggregation.
    pub best_cell: Option<usize>,
    /// Rates realized on the calibration records themselves.
    pub calibration_fpr: f64,
    pub calibration_tpr: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OddsStatistics {
    pub num_classes: usize,
    pub grid: NoiseGrid,
    /// Indexed by grid cell.
    pub mu: Vec<PairMatrix>,
    pub sigma: Vec<PairMatrix>,
    /// (sample, draw) pair counts behind each (y, z) estimate, per cell.
    pub counts: Vec<Vec<Vec<u64>>>,
    pub model_checksum: String,
    pub aggregation: CellAggregation,
    pub calibration: Option<Calibration>,
}

impl OddsStatistics {
    pub fn tau(&self) -> Result<&PairMatrix> {
        self.calibration
            .as_ref()
            .map(|c| &c.tau)
            .ok_or(Error::Uncalibrated)
    }

    fn check_model(&self, model: &Classifier) -> Result<()> {
        let actual = model.checksum();
        if actual != self.model_checksum {
            return Err(Error::ModelMismatch {
                expected: self.model_checksum.clone(),
                actual,
            });
        }
        Ok(())
    }
}

/// Raw perturbed log-odds g_{y,z}(x, eta).
pub fn perturbed_log_odds(
    model: &Classifier,
    x: &Tensor,
    y: usize,
    z: usize,
    eta: &Tensor,
) -> Result<f64> {
    let clean = model.logits(x)?;
    if y >= clean.len() || z >= clean.len() {
        return Err(Error::ClassOutOfRange {
            class: y.max(z),
            num_classes: clean.len(),
        });
    }
    let noisy = model.logits(&x.add(eta)?.clamp01())?;
    Ok((noisy[z] - noisy[y]) - (clean[z] - clean[y]))
}

struct SamplePartial {
    class: usize,
    draws: u64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

/// Per-draw raw log-odds responses of one sample under one cell, relative to
/// the supplied clean logits. Draw j uses draw_index = id * N + j.
fn raw_cell_draws(
    model: &Classifier,
    x: &Tensor,
    clean: &[f64],
    y: usize,
    id: u64,
    spec: &crate::noise::NoiseSpec,
) -> Result<Vec<Vec<f64>>> {
    let n = spec.samples_per_point as u64;
    let mut out = Vec::with_capacity(spec.samples_per_point);
    for j in 0..n {
        let eta = spec.sample(x.shape(), id * n + j);
        let noisy = model.logits(&x.add(&eta)?.clamp01())?;
        let g: Vec<f64> = (0..clean.len())
            .map(|z| (noisy[z] - noisy[y]) - (clean[z] - clean[y]))
            .collect();
        out.push(g);
    }
    Ok(out)
}

/// Fits per-(class pair, noise cell) means and deviations on the correctly
/// classified subset of the given samples.
pub fn fit_statistics(
    model: &Classifier,
    inputs: &[Tensor],
    labels: &[usize],
    grid: &NoiseGrid,
    config: &OddsConfig,
) -> Result<OddsStatistics> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset("no samples to fit statistics".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} inputs vs {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let classes = model.num_classes();

    // Clean logits and the correctly classified subset, with original
    // positions kept for draw-index derivation.
    let clean: Vec<(usize, Vec<f64>)> =
        exec::try_map_indexed(inputs, |_, x| {
            let logits = model.logits(x)?;
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate().skip(1) {
                if v > logits[best] {
                    best = i;
                }
            }
            Ok((best, logits))
        })?;
    let kept: Vec<usize> = (0..inputs.len())
        .filter(|&i| clean[i].0 == labels[i])
        .collect();

    let mut per_class = vec![0usize; classes];
    for &i in &kept {
        per_class[labels[i]] += 1;
    }
    let minimum = config.min_per_class.max(1);

    let mut n = vec![vec![0u64; classes]; grid.len()];
    let mut sum = vec![vec![vec![0.0f64; classes]; classes]; grid.len()];
    let mut sum_sq = vec![vec![vec![0.0f64; classes]; classes]; grid.len()];
    for (ci, cell) in grid.cells.iter().enumerate() {
        let partials: Vec<SamplePartial> = exec::try_map_indexed(&kept, |_, &i| {
            let y = labels[i];
            let draws = raw_cell_draws(model, &inputs[i], &clean[i].1, y, i as u64, cell)?;
            let mut sum = vec![0.0; classes];
            let mut sum_sq = vec![0.0; classes];
            for g in &draws {
                for z in 0..classes {
                    sum[z] += g[z];
                    sum_sq[z] += g[z] * g[z];
                }
            }
            Ok(SamplePartial {
                class: y,
                draws: draws.len() as u64,
                sum,
                sum_sq,
            })
        })?;

        // Sequential reduction in sample order keeps sums bit-stable for any
        // worker count.
        for p in &partials {
            n[ci][p.class] += p.draws;
            for z in 0..classes {
                sum[ci][p.class][z] += p.sum[z];
                sum_sq[ci][p.class][z] += p.sum_sq[z];
            }
        }
    }

    // Checks run class by class: a class with too few correct samples is
    // reported before its cells are inspected, but a lower class that fits
    // and turns out variance-free surfaces as the degenerate model it is.
    let mut mu = vec![PairMatrix::filled(classes, 0.0); grid.len()];
    let mut sigma = vec![PairMatrix::filled(classes, 1.0); grid.len()];
    let mut counts = vec![vec![vec![0u64; classes]; classes]; grid.len()];
    for y in 0..classes {
        if per_class[y] < minimum {
            return Err(Error::InsufficientClassSamples {
                class: y,
                count: per_class[y],
                minimum,
            });
        }
        for (ci, cell) in grid.cells.iter().enumerate() {
            for z in 0..classes {
                if z == y {
                    continue;
                }
                let count = n[ci][y];
                counts[ci][y][z] = count;
                let mean = sum[ci][y][z] / count as f64;
                let var = (sum_sq[ci][y][z] / count as f64 - mean * mean).max(0.0);
                if var < 1e-18 {
                    return Err(Error::DegenerateStatistics(format!(
                        "cell {ci} ({} @ {}), pair ({y}, {z}): zero variance",
                        cell.source.label(),
                        cell.magnitude
                    )));
                }
                mu[ci].set(y, z, mean);
                sigma[ci].set(y, z, var.sqrt());
            }
        }
    }

    Ok(OddsStatistics {
        num_classes: classes,
        grid: grid.clone(),
        mu,
        sigma,
        counts,
        model_checksum: model.checksum(),
        aggregation: config.aggregation,
        calibration: None,
    })
}

/// One scored sample: standardized responses per candidate class, averaged
/// over draws, at cell / source / overall granularity. Entry `predicted` is
/// fixed at zero on every level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZScoreRecord {
    pub id: u64,
    pub predicted: usize,
    pub combined: Vec<f64>,
    pub per_source: Vec<Vec<f64>>,
    pub per_cell: Vec<Vec<f64>>,
}

/// Standardized per-draw scores of one sample under one grid cell (verifies
/// the model matches the statistics).
pub fn standardized_draws(
    model: &Classifier,
    x: &Tensor,
    id: u64,
    stats: &OddsStatistics,
    cell: usize,
) -> Result<Vec<Vec<f64>>> {
    stats.check_model(model)?;
    if cell >= stats.grid.len() {
        return Err(Error::InvalidParameter(format!(
            "cell index {cell} out of range for grid of {}",
            stats.grid.len()
        )));
    }
    let clean = model.logits(x)?;
    let mut best = 0;
    for (i, &v) in clean.iter().enumerate().skip(1) {
        if v > clean[best] {
            best = i;
        }
    }
    standardized_draws_inner(model, x, &clean, best, id, stats, cell)
}

fn standardized_draws_inner(
    model: &Classifier,
    x: &Tensor,
    clean: &[f64],
    y: usize,
    id: u64,
    stats: &OddsStatistics,
    cell: usize,
) -> Result<Vec<Vec<f64>>> {
    let raw = raw_cell_draws(model, x, clean, y, id, &stats.grid.cells[cell])?;
    let classes = stats.num_classes;
    Ok(raw
        .into_iter()
        .map(|g| {
            (0..classes)
                .map(|z| {
                    if z == y {
                        0.0
                    } else {
                        (g[z] - stats.mu[cell].get(y, z)) / stats.sigma[cell].get(y, z)
                    }
                })
                .collect()
        })
        .collect())
}

fn z_scores_checked(
    model: &Classifier,
    x: &Tensor,
    id: u64,
    stats: &OddsStatistics,
) -> Result<ZScoreRecord> {
    let classes = stats.num_classes;
    let clean = model.logits(x)?;
    if clean.len() != classes {
        return Err(Error::InvalidParameter(format!(
            "model has {} classes, statistics {classes}",
            clean.len()
        )));
    }
    let mut y = 0;
    for (i, &v) in clean.iter().enumerate().skip(1) {
        if v > clean[y] {
            y = i;
        }
    }

    let mut per_cell = Vec::with_capacity(stats.grid.len());
    for cell in 0..stats.grid.len() {
        let draws = standardized_draws_inner(model, x, &clean, y, id, stats, cell)?;
        let n = draws.len() as f64;
        let mut avg = vec![0.0; classes];
        for g in &draws {
            for z in 0..classes {
                avg[z] += g[z];
            }
        }
        for v in &mut avg {
            *v /= n;
        }
        per_cell.push(avg);
    }

    let sources = stats.grid.sources();
    let per_source: Vec<Vec<f64>> = sources
        .iter()
        .map(|(_, cells)| {
            let mut avg = vec![0.0; classes];
            for &ci in cells {
                for z in 0..classes {
                    avg[z] += per_cell[ci][z];
                }
            }
            for v in &mut avg {
                *v /= cells.len() as f64;
            }
            avg
        })
        .collect();

    let mut combined = vec![0.0; classes];
    for cell in &per_cell {
        for z in 0..classes {
            combined[z] += cell[z];
        }
    }
    for v in &mut combined {
        *v /= per_cell.len() as f64;
    }

    Ok(ZScoreRecord {
        id,
        predicted: y,
        combined,
        per_source,
        per_cell,
    })
}

pub fn z_scores(
    model: &Classifier,
    x: &Tensor,
    id: u64,
    stats: &OddsStatistics,
) -> Result<ZScoreRecord> {
    stats.check_model(model)?;
    z_scores_checked(model, x, id, stats)
}

/// Scores a batch; sample i gets id = id_offset + i.
pub fn z_scores_batch(
    model: &Classifier,
    inputs: &[Tensor],
    id_offset: u64,
    stats: &OddsStatistics,
) -> Result<Vec<ZScoreRecord>> {
    stats.check_model(model)?;
    exec::try_map_indexed(inputs, |i, x| {
        z_scores_checked(model, x, id_offset + i as u64, stats)
    })
}

fn check_record(record: &ZScoreRecord, stats: &OddsStatistics) -> Result<()> {
    if record.combined.len() != stats.num_classes
        || record.predicted >= stats.num_classes
        || record.per_cell.len() != stats.grid.len()
    {
        return Err(Error::InvalidParameter(
            "record does not match statistics dimensions".into(),
        ));
    }
    Ok(())
}

/// Score streams that detection thresholds: one per noise source under
/// Average aggregation, exactly one under BestCell.
fn vote_streams<'a>(
    record: &'a ZScoreRecord,
    stats: &'a OddsStatistics,
) -> Result<Vec<&'a [f64]>> {
    let calibration = stats.calibration.as_ref().ok_or(Error::Uncalibrated)?;
    Ok(match stats.aggregation {
        CellAggregation::Average => record.per_source.iter().map(Vec::as_slice).collect(),
        CellAggregation::BestCell => {
            let cell = calibration.best_cell.ok_or_else(|| {
                Error::InvalidParameter("BestCell statistics missing chosen cell".into())
            })?;
            vec![record.per_cell[cell].as_slice()]
        }
    })
}

fn stream_flags(scores: &[f64], predicted: usize, tau: &PairMatrix) -> bool {
    scores
        .iter()
        .enumerate()
        .any(|(z, &s)| z != predicted && s - tau.get(predicted, z) >= 0.0)
}

/// Per-record detection outcome, one CSV report row's worth.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Verdict {
    pub flag: bool,
    /// Streams voting to flag, out of `streams`.
    pub votes: usize,
    pub streams: usize,
    /// The model's own prediction when the test keeps the sample, otherwise
    /// the candidate with the largest threshold clearance on the correction
    /// scores (never the predicted class itself).
    pub corrected: usize,
    /// Largest non-predicted standardized score on the correction stream.
    pub max_score: f64,
}

/// Majority vote across noise sources: flagged iff strictly more than half
/// the sources see some candidate class exceed its threshold.
pub fn verdict(record: &ZScoreRecord, stats: &OddsStatistics) -> Result<Verdict> {
    check_record(record, stats)?;
    let tau = stats.tau()?;
    let streams = vote_streams(record, stats)?;
    let votes = streams
        .iter()
        .filter(|s| stream_flags(s, record.predicted, tau))
        .count();
    let flag = votes * 2 > streams.len();

    let calibration = stats.calibration.as_ref().expect("tau() checked");
    let scores: &[f64] = match stats.aggregation {
        CellAggregation::Average => &record.combined,
        CellAggregation::BestCell => {
            &record.per_cell[calibration.best_cell.expect("vote_streams checked")]
        }
    };
    let y = record.predicted;
    let mut max_score = f64::NEG_INFINITY;
    let mut best: Option<(usize, f64)> = None;
    for (z, &s) in scores.iter().enumerate() {
        if z == y {
            continue;
        }
        max_score = max_score.max(s);
        let clearance = s - tau.get(y, z);
        if best.is_none_or(|(_, b)| clearance > b) {
            best = Some((z, clearance));
        }
    }
    Ok(Verdict {
        flag,
        votes,
        streams: streams.len(),
        corrected: if flag {
            best.expect("at least two classes").0
        } else {
            y
        },
        max_score,
    })
}

pub fn detect(record: &ZScoreRecord, stats: &OddsStatistics) -> Result<bool> {
    Ok(verdict(record, stats)?.flag)
}

pub fn correct_label(record: &ZScoreRecord, stats: &OddsStatistics) -> Result<usize> {
    Ok(verdict(record, stats)?.corrected)
}

pub fn detection_rate(records: &[ZScoreRecord], stats: &OddsStatistics) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("detection rate over zero records".into()));
    }
    let mut flagged = 0usize;
    for r in records {
        flagged += usize::from(detect(r, stats)?);
    }
    Ok(flagged as f64 / records.len() as f64)
}

/// Empirical threshold: the smallest value such that at most floor(alpha * n)
/// of the sorted scores reach it. alpha >= 1 yields -inf (flag everything);
/// alpha small enough yields a threshold strictly above the maximum.
fn empirical_threshold(sorted: &[f64], alpha: f64) -> f64 {
    debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    if alpha >= 1.0 {
        return f64::NEG_INFINITY;
    }
    let n = sorted.len();
    let allowed = (alpha * n as f64).floor() as usize;
    if allowed == 0 {
        sorted[n - 1].next_up()
    } else {
        sorted[n - allowed]
    }
}

fn collect_pair_scores(
    records: &[ZScoreRecord],
    stats: &OddsStatistics,
    cell_override: Option<usize>,
) -> Vec<Vec<Vec<f64>>> {
    let classes = stats.num_classes;
    let mut streams: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); classes]; classes];
    for record in records {
        let y = record.predicted;
        match cell_override {
            Some(ci) => {
                for (z, stream) in streams[y].iter_mut().enumerate() {
                    if z != y {
                        stream.push(record.per_cell[ci][z]);
                    }
                }
            }
            None => {
                for source in &record.per_source {
                    for (z, stream) in streams[y].iter_mut().enumerate() {
                        if z != y {
                            stream.push(source[z]);
                        }
                    }
                }
            }
        }
    }
    streams
}

fn thresholds_from_streams(
    streams: &[Vec<Vec<f64>>],
    classes: usize,
    alpha: f64,
) -> (PairMatrix, Vec<(usize, usize)>) {
    let mut pooled: Vec<f64> = streams
        .iter()
        .flat_map(|row| row.iter().flatten().copied())
        .collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));

    let mut tau = PairMatrix::filled(classes, 0.0);
    let mut fallback = Vec::new();
    for (y, row) in streams.iter().enumerate() {
        for (z, stream) in row.iter().enumerate() {
            if z == y {
                continue;
            }
            if stream.is_empty() {
                fallback.push((y, z));
                tau.set(y, z, empirical_threshold(&pooled, alpha));
                continue;
            }
            let mut scores = stream.clone();
            scores.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
            tau.set(y, z, empirical_threshold(&scores, alpha));
        }
    }
    (tau, fallback)
}

/// Calibrates per-pair thresholds on clean records so the overall flag rate
/// stays at or below `target_fpr`, using the per-pair empirical quantile at
/// the Sidak-corrected level alpha = 1 - (1 - fpr)^(1/(K-1)). Adversarial
/// records steer only the BestCell choice; Average-mode thresholds depend on
/// clean scores alone.
pub fn calibrate(
    stats: &OddsStatistics,
    clean: &[ZScoreRecord],
    adversarial: &[ZScoreRecord],
    target_fpr: f64,
) -> Result<OddsStatistics> {
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::InvalidParameter(format!(
            "target FPR must be in [0, 1], got {target_fpr}"
        )));
    }
    if clean.is_empty() {
        return Err(Error::EmptyDataset("no clean calibration records".into()));
    }
    for r in clean.iter().chain(adversarial) {
        check_record(r, stats)?;
    }
    let classes = stats.num_classes;
    let sidak_alpha = 1.0 - (1.0 - target_fpr).powf(1.0 / (classes - 1) as f64);

    let mut out = stats.clone();
    let (tau, fallback_pairs, best_cell) = match stats.aggregation {
        CellAggregation::Average => {
            let streams = collect_pair_scores(clean, stats, None);
            let (tau, fallback) = thresholds_from_streams(&streams, classes, sidak_alpha);
            (tau, fallback, None)
        }
        CellAggregation::BestCell => {
            // (cell, detection rate, thresholds, fallback pairs)
            type Candidate = (usize, f64, PairMatrix, Vec<(usize, usize)>);
            let mut best: Option<Candidate> = None;
            for ci in 0..stats.grid.len() {
                let streams = collect_pair_scores(clean, stats, Some(ci));
                let (tau, fallback) = thresholds_from_streams(&streams, classes, sidak_alpha);
                let mut probe = stats.clone();
                probe.calibration = Some(Calibration {
                    tau: tau.clone(),
                    target_fpr,
                    sidak_alpha,
                    fallback_pairs: fallback.clone(),
                    best_cell: Some(ci),
                    calibration_fpr: 0.0,
                    calibration_tpr: None,
                });
                let tpr = if adversarial.is_empty() {
                    0.0
                } else {
                    detection_rate(adversarial, &probe)?
                };
                if best.as_ref().is_none_or(|(_, b, _, _)| tpr > *b) {
                    best = Some((ci, tpr, tau, fallback));
                }
            }
            let (ci, _, tau, fallback) = best.expect("grid has cells");
            (tau, fallback, Some(ci))
        }
    };

    out.calibration = Some(Calibration {
        tau,
        target_fpr,
        sidak_alpha,
        fallback_pairs,
        best_cell,
        calibration_fpr: 0.0,
        calibration_tpr: None,
    });
    let fpr = detection_rate(clean, &out)?;
    let tpr = if adversarial.is_empty() {
        None
    } else {
        Some(detection_rate(adversarial, &out)?)
    };
    let calibration = out.calibration.as_mut().unwrap();
    calibration.calibration_fpr = fpr;
    calibration.calibration_tpr = tpr;
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RocPoint {
    pub target_fpr: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub corrected_clean_accuracy: f64,
    pub corrected_adversarial_accuracy: f64,
}

/// Sweeps target FPR levels, recalibrating on the same records each time.
/// Thresholds are nested in the target level, so TPR is nondecreasing by
/// construction.
pub fn roc_sweep(
    stats: &OddsStatistics,
    clean: &[ZScoreRecord],
    clean_labels: &[usize],
    adversarial: &[ZScoreRecord],
    adversarial_labels: &[usize],
    target_fprs: &[f64],
) -> Result<Vec<RocPoint>> {
    if clean.len() != clean_labels.len() || adversarial.len() != adversarial_labels.len() {
        return Err(Error::InvalidParameter(
            "records and labels must align".into(),
        ));
    }
    if adversarial.is_empty() {
        return Err(Error::EmptyDataset("ROC sweep needs adversarial records".into()));
    }
    let mut levels = target_fprs.to_vec();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
    let mut out = Vec::with_capacity(levels.len());
    for &level in &levels {
        let calibrated = calibrate(stats, clean, adversarial, level)?;
        let fpr = detection_rate(clean, &calibrated)?;
        let tpr = detection_rate(adversarial, &calibrated)?;
        let acc = |records: &[ZScoreRecord], labels: &[usize]| -> Result<f64> {
            let mut hits = 0usize;
            for (r, &l) in records.iter().zip(labels) {
                hits += usize::from(correct_label(r, &calibrated)? == l);
            }
            Ok(hits as f64 / records.len() as f64)
        };
        out.push(RocPoint {
            target_fpr: level,
            fpr,
            tpr,
            corrected_clean_accuracy: acc(clean, clean_labels)?,
            corrected_adversarial_accuracy: acc(adversarial, adversarial_labels)?,
        });
    }
    Ok(out)
}

/// Trapezoidal area under the (FPR, TPR) curve, closed at (0,0) and (1,1).
pub fn auc(points: &[RocPoint]) -> f64 {
    let mut curve: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    curve.push((0.0, 0.0));
    curve.push((1.0, 1.0));
    curve.sort_by(|a, b| a.partial_cmp(b).expect("finite curve"));
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        area += (x1 - x0) * 0.5 * (y0 + y1);
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelArch, OUTPUT_WEIGHTS};
    use crate::noise::{NoiseSource, NoiseSpec};
    use std::collections::BTreeMap;

    fn linear_model() -> Classifier {
        let arch = ModelArch::Linear {
            input_dim: 3,
            classes: 3,
        };
        let mut params = BTreeMap::new();
        params.insert(
            OUTPUT_WEIGHTS.to_string(),
            Tensor::new(
                vec![3, 3],
                vec![2.0, 0.0, 0.3, 0.0, 2.0, -0.2, -1.0, -1.0, 2.0],
            )
            .unwrap(),
        );
        Classifier::from_params(arch, params).unwrap()
    }

    fn toy_fixture() -> (Classifier, Vec<Tensor>, Vec<usize>, OddsStatistics) {
        let model = linear_model();
        // Clearly separated points per class, inside the cube.
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let offsets = [-0.06, -0.02, 0.02, 0.06];
        for (class, base) in [
            [0.9f64, 0.1, 0.5],
            [0.1, 0.9, 0.5],
            [0.1, 0.1, 0.9],
        ]
        .iter()
        .enumerate()
        {
            for d in offsets {
                for d2 in offsets {
                    inputs.push(Tensor::vector(vec![
                        (base[0] + d).clamp(0.0, 1.0),
                        (base[1] + d2).clamp(0.0, 1.0),
                        base[2],
                    ]));
                    labels.push(class);
                }
            }
        }
        let grid = NoiseGrid::default_grid(0.05, 12, 77).unwrap();
        let stats =
            fit_statistics(&model, &inputs, &labels, &grid, &OddsConfig::default()).unwrap();
        (model, inputs, labels, stats)
    }

    #[test]
    fn perturbed_log_odds_is_antisymmetric() {
        let model = linear_model();
        let x = Tensor::vector(vec![0.6, 0.3, 0.5]);
        let spec = NoiseSpec::new(NoiseSource::Gaussian, 0.1, 1, 4).unwrap();
        for draw in 0..5 {
            let eta = spec.sample(&[3], draw);
            let a = perturbed_log_odds(&model, &x, 0, 2, &eta).unwrap();
            let b = perturbed_log_odds(&model, &x, 2, 0, &eta).unwrap();
            assert_eq!(a, -b);
            assert_eq!(
                perturbed_log_odds(&model, &x, 1, 1, &eta).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn mu_matches_two_pass_oracle() {
        let (model, inputs, labels, stats) = toy_fixture();
        // Independent two-pass mean for pair (0, 1) in cell 2.
        let cell = 2;
        let spec = &stats.grid.cells[cell];
        let n = spec.samples_per_point as u64;
        let mut values = Vec::new();
        for (i, x) in inputs.iter().enumerate() {
            if labels[i] != 0 || model.predict(x).unwrap() != 0 {
                continue;
            }
            for j in 0..n {
                let eta = spec.sample(&[3], (i as u64) * n + j);
                values.push(perturbed_log_odds(&model, x, 0, 1, &eta).unwrap());
            }
        }
        let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
        let fitted = stats.mu[cell].get(0, 1);
        assert!(
            (mean - fitted).abs() < 1e-9,
            "oracle {mean} vs fitted {fitted}"
        );
        assert_eq!(stats.counts[cell][0][1], values.len() as u64);
    }

    #[test]
    fn standardized_fit_population_has_zero_mean_unit_std() {
        let (model, inputs, labels, stats) = toy_fixture();
        let cell = 7;
        let mut per_pair: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for (i, x) in inputs.iter().enumerate() {
            let y = model.predict(x).unwrap();
            if y != labels[i] {
                continue;
            }
            for draws in standardized_draws(&model, x, i as u64, &stats, cell).unwrap() {
                for (z, &v) in draws.iter().enumerate() {
                    if z != y {
                        per_pair.entry((y, z)).or_default().push(v);
                    }
                }
            }
        }
        for ((y, z), values) in per_pair {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "pair ({y},{z}) mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "pair ({y},{z}) std {}", var.sqrt());
        }
    }

    #[test]
    fn checksum_mismatch_is_rejected() {
        let (_, inputs, _, stats) = toy_fixture();
        let other = {
            let arch = ModelArch::Linear {
                input_dim: 3,
                classes: 3,
            };
            let mut params = BTreeMap::new();
            params.insert(
                OUTPUT_WEIGHTS.to_string(),
                Tensor::new(vec![3, 3], vec![1.0; 9]).unwrap(),
            );
            Classifier::from_params(arch, params).unwrap()
        };
        match z_scores(&other, &inputs[0], 0, &stats) {
            Err(Error::ModelMismatch { .. }) => {}
            other => panic!("expected model mismatch, got {other:?}"),
        }
    }

    #[test]
    fn insufficient_class_samples_error_names_the_class() {
        let model = linear_model();
        let inputs = vec![Tensor::vector(vec![0.9, 0.1, 0.5]); 20];
        let labels = vec![0usize; 20];
        let grid = NoiseGrid::default_grid(0.05, 4, 1).unwrap();
        match fit_statistics(&model, &inputs, &labels, &grid, &OddsConfig::default()) {
            Err(Error::InsufficientClassSamples { class, .. }) => assert!(class > 0),
            other => panic!("expected insufficient samples, got {other:?}"),
        }
    }

    #[test]
    fn constant_model_is_degenerate() {
        let arch = ModelArch::Linear {
            input_dim: 2,
            classes: 2,
        };
        let mut params = BTreeMap::new();
        params.insert(
            OUTPUT_WEIGHTS.to_string(),
            Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap(),
        );
        let model = Classifier::from_params(arch, params).unwrap();
        let inputs: Vec<Tensor> = (0..30)
            .map(|i| Tensor::vector(vec![0.3 + 0.01 * i as f64 % 0.4, 0.5]))
            .collect();
        let labels = vec![0usize; 30];
        let grid = NoiseGrid::default_grid(0.05, 4, 1).unwrap();
        let cfg = OddsConfig {
            min_per_class: 1,
            aggregation: CellAggregation::Average,
        };
        // All inputs predict class 0 (tie broken to 0), class 1 never seen.
        match fit_statistics(&model, &inputs, &labels, &grid, &cfg) {
            Err(Error::DegenerateStatistics(_)) => {}
            other => panic!("expected degenerate statistics, got {other:?}"),
        }
    }

    fn calibrated_fixture() -> (
        Classifier,
        OddsStatistics,
        Vec<ZScoreRecord>,
        Vec<ZScoreRecord>,
    ) {
        let (model, inputs, _, stats) = toy_fixture();
        let clean_records = z_scores_batch(&model, &inputs, 0, &stats).unwrap();
        // Synthetic "adversarial" records: strongly positive scores.
        let adversarial: Vec<ZScoreRecord> = clean_records
            .iter()
            .take(12)
            .map(|r| {
                let mut r = r.clone();
                let bump = |v: &mut Vec<f64>, y: usize| {
                    for (z, s) in v.iter_mut().enumerate() {
                        if z != y {
                            *s += 25.0;
                        }
                    }
                };
                let y = r.predicted;
                bump(&mut r.combined, y);
                for s in &mut r.per_source {
                    bump(s, y);
                }
                for c in &mut r.per_cell {
                    bump(c, y);
                }
                r
            })
            .collect();
        let calibrated = calibrate(&stats, &clean_records, &adversarial, 0.05).unwrap();
        (model, calibrated, clean_records, adversarial)
    }

    #[test]
    fn calibration_controls_fpr_and_catches_shifted_records() {
        let (_, stats, clean, adversarial) = calibrated_fixture();
        let fpr = detection_rate(&clean, &stats).unwrap();
        assert!(fpr <= 0.05, "fpr {fpr}");
        let tpr = detection_rate(&adversarial, &stats).unwrap();
        assert_eq!(tpr, 1.0);
        let cal = stats.calibration.as_ref().unwrap();
        assert!(cal.sidak_alpha < 0.05);
        assert!((cal.sidak_alpha - (1.0 - 0.95f64.powf(1.0 / 2.0))).abs() < 1e-12);
    }

    #[test]
    fn detect_and_correct_are_consistent() {
        let (_, stats, clean, adversarial) = calibrated_fixture();
        for r in clean.iter().chain(&adversarial) {
            let flagged = detect(r, &stats).unwrap();
            let corrected = correct_label(r, &stats).unwrap();
            assert_eq!(flagged, corrected != r.predicted);
        }
    }

    #[test]
    fn raising_a_threshold_never_flags_more() {
        let (_, stats, clean, _) = calibrated_fixture();
        let mut raised = stats.clone();
        {
            let cal = raised.calibration.as_mut().unwrap();
            let t = cal.tau.get(0, 1);
            cal.tau.set(0, 1, t + 0.5);
        }
        for r in &clean {
            let before = detect(r, &stats).unwrap();
            let after = detect(r, &raised).unwrap();
            assert!(!after || before, "raising tau flagged a new record");
        }
    }

    #[test]
    fn full_fpr_target_flags_everything_and_survives_json() {
        let (_, _, clean, adversarial) = calibrated_fixture();
        let (_, _, _, stats) = toy_fixture();
        let all = calibrate(&stats, &clean, &adversarial, 1.0).unwrap();
        assert_eq!(detection_rate(&clean, &all).unwrap(), 1.0);
        let tau = &all.calibration.as_ref().unwrap().tau;
        assert_eq!(tau.get(0, 1), f64::NEG_INFINITY);

        let json = serde_json::to_string(&all).unwrap();
        let back: OddsStatistics = serde_json::from_str(&json).unwrap();
        assert_eq!(
            back.calibration.as_ref().unwrap().tau.get(0, 1),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn zero_fpr_target_sits_above_all_clean_scores() {
        let (_, _, clean, adversarial) = calibrated_fixture();
        let (_, _, _, stats) = toy_fixture();
        let none = calibrate(&stats, &clean, &adversarial, 0.0).unwrap();
        assert_eq!(detection_rate(&clean, &none).unwrap(), 0.0);
        // The shifted records still clear even the strictest threshold.
        assert_eq!(detection_rate(&adversarial, &none).unwrap(), 1.0);
    }

    #[test]
    fn best_cell_aggregation_picks_a_cell() {
        let (model, inputs, labels, _) = toy_fixture();
        let grid = NoiseGrid::default_grid(0.05, 12, 77).unwrap();
        let cfg = OddsConfig {
            min_per_class: 10,
            aggregation: CellAggregation::BestCell,
        };
        let stats = fit_statistics(&model, &inputs, &labels, &grid, &cfg).unwrap();
        let clean = z_scores_batch(&model, &inputs, 0, &stats).unwrap();
        let adversarial: Vec<ZScoreRecord> = clean
            .iter()
            .take(6)
            .map(|r| {
                let mut r = r.clone();
                for c in &mut r.per_cell {
                    for (z, s) in c.iter_mut().enumerate() {
                        if z != r.predicted {
                            *s += 30.0;
                        }
                    }
                }
                r
            })
            .collect();
        let calibrated = calibrate(&stats, &clean, &adversarial, 0.05).unwrap();
        assert!(calibrated.calibration.as_ref().unwrap().best_cell.is_some());
        assert_eq!(detection_rate(&adversarial, &calibrated).unwrap(), 1.0);
    }

    #[test]
    fn roc_sweep_is_monotone_and_auc_reasonable() {
        let (_, _, clean, adversarial) = calibrated_fixture();
        let (_, _, _, stats) = toy_fixture();
        let clean_labels: Vec<usize> = clean.iter().map(|r| r.predicted).collect();
        let adv_labels: Vec<usize> = adversarial.iter().map(|r| r.predicted).collect();
        let levels: Vec<f64> = vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0];
        let points = roc_sweep(
            &stats,
            &clean,
            &clean_labels,
            &adversarial,
            &adv_labels,
            &levels,
        )
        .unwrap();
        assert_eq!(points.len(), levels.len());
        for w in points.windows(2) {
            assert!(w[1].tpr >= w[0].tpr, "TPR must be nondecreasing");
            assert!(w[1].fpr >= w[0].fpr, "FPR must be nondecreasing");
        }
        assert_eq!(points.last().unwrap().tpr, 1.0);
        assert_eq!(points.last().unwrap().fpr, 1.0);
        let area = auc(&points);
        assert!(area > 0.9, "auc {area}");
    }

    #[test]
    fn uncalibrated_statistics_refuse_to_detect() {
        let (model, inputs, _, stats) = toy_fixture();
        let record = z_scores(&model, &inputs[0], 0, &stats).unwrap();
        match detect(&record, &stats) {
            Err(Error::Uncalibrated) => {}
            other => panic!("expected Uncalibrated, got {other:?}"),
        }
    }
}
