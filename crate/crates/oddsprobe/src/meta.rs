//! Learned correction on top of the log-odds test.
//!
//! The argmax rule in [`crate::odds::correct_label`] picks the candidate with
//! the largest threshold clearance. A small multinomial logistic head per
//! predicted class, trained on the standardized score vectors of known
//! attacked samples, can do better: it sees the full per-source score layout
//! instead of a single maximum. Heads with too little training data stay
//! unfitted and fall back to the argmax rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::softmax;
use crate::odds::{self, OddsStatistics, ZScoreRecord};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Full-batch gradient steps per head.
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    /// Heads seeing fewer attacked records than this are left unfitted.
    pub min_records: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            epochs: 300,
            learning_rate: 0.5,
            l2_penalty: 1e-3,
            min_records: 20,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("meta epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "meta learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "meta l2 penalty must be nonnegative, got {}",
                self.l2_penalty
            )));
        }
        Ok(())
    }
}

/// Feature vector a head sees: combined scores, then per-source scores in
/// grid order, then a constant bias coordinate.
pub fn record_features(record: &ZScoreRecord) -> Vec<f64> {
    let mut features = record.combined.clone();
    for source in &record.per_source {
        features.extend_from_slice(source);
    }
    features.push(1.0);
    features
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaHead {
    /// One weight row per class, over [`record_features`] coordinates.
    weights: Vec<Vec<f64>>,
    pub training_records: usize,
    pub final_loss: f64,
}

impl MetaHead {
    pub fn scores(&self, features: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(features).map(|(w, f)| w * f).sum())
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaCorrector {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Indexed by predicted class.
    pub heads: Vec<Option<MetaHead>>,
    pub config: MetaConfig,
    pub model_checksum: String,
}

fn train_head(
    features: &[Vec<f64>],
    targets: &[usize],
    classes: usize,
    config: &MetaConfig,
) -> MetaHead {
    let dim = features[0].len();
    let n = features.len() as f64;
    let mut weights = vec![vec![0.0f64; dim]; classes];
    let mut final_loss = 0.0;
    for _ in 0..config.epochs {
        let mut grad = vec![vec![0.0f64; dim]; classes];
        let mut loss = 0.0;
        for (phi, &target) in features.iter().zip(targets) {
            let logits: Vec<f64> = weights
                .iter()
                .map(|row| row.iter().zip(phi).map(|(w, f)| w * f).sum())
                .collect();
            let probs = softmax(&logits);
            loss -= probs[target].max(1e-300).ln();
            for (c, p) in probs.iter().enumerate() {
                let delta = if c == target { p - 1.0 } else { *p };
                for (g, f) in grad[c].iter_mut().zip(phi) {
                    *g += delta * f / n;
                }
            }
        }
        loss /= n;
        for (row, grow) in weights.iter_mut().zip(&grad) {
            for (w, g) in row.iter_mut().zip(grow) {
                loss += 0.5 * config.l2_penalty * *w * *w;
                *w -= config.learning_rate * (g + config.l2_penalty * *w);
            }
        }
        final_loss = loss;
    }
    MetaHead {
        weights,
        training_records: features.len(),
        final_loss,
    }
}

/// Trains per-predicted-class heads. Only records whose true label differs
/// from the prediction carry correction signal; the rest are skipped.
pub fn train_meta(
    stats: &OddsStatistics,
    records: &[ZScoreRecord],
    true_labels: &[usize],
    config: &MetaConfig,
) -> Result<MetaCorrector> {
    config.validate()?;
    if records.len() != true_labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} records vs {} labels",
            records.len(),
            true_labels.len()
        )));
    }
    let classes = stats.num_classes;
    for (r, &t) in records.iter().zip(true_labels) {
        if r.combined.len() != classes || r.predicted >= classes {
            return Err(Error::InvalidParameter(
                "record does not match statistics dimensions".into(),
            ));
        }
        if t >= classes {
            return Err(Error::ClassOutOfRange {
                class: t,
                num_classes: classes,
            });
        }
    }

    let feature_dim = records
        .first()
        .map(|r| record_features(r).len())
        .unwrap_or(0);
    let mut heads = Vec::with_capacity(classes);
    for y in 0..classes {
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for (r, &t) in records.iter().zip(true_labels) {
            if r.predicted == y && t != y {
                features.push(record_features(r));
                targets.push(t);
            }
        }
        if features.len() < config.min_records {
            heads.push(None);
        } else {
            heads.push(Some(train_head(&features, &targets, classes, config)));
        }
    }

    Ok(MetaCorrector {
        num_classes: classes,
        feature_dim,
        heads,
        config: config.clone(),
        model_checksum: stats.model_checksum.clone(),
    })
}

/// Corrected label with the learned head when one exists, the argmax rule
/// otherwise. Unflagged records keep the model's prediction; flagged ones
/// never do.
pub fn meta_correct(
    corrector: &MetaCorrector,
    record: &ZScoreRecord,
    stats: &OddsStatistics,
) -> Result<usize> {
    if corrector.num_classes != stats.num_classes {
        return Err(Error::InvalidParameter(format!(
            "corrector built for {} classes, statistics have {}",
            corrector.num_classes, stats.num_classes
        )));
    }
    if corrector.model_checksum != stats.model_checksum {
        return Err(Error::ModelMismatch {
            expected: stats.model_checksum.clone(),
            actual: corrector.model_checksum.clone(),
        });
    }
    if !odds::detect(record, stats)? {
        return Ok(record.predicted);
    }
    let Some(head) = &corrector.heads[record.predicted] else {
        return odds::correct_label(record, stats);
    };
    let scores = head.scores(&record_features(record));
    let y = record.predicted;
    let mut best: Option<(usize, f64)> = None;
    for (z, &s) in scores.iter().enumerate() {
        if z == y {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((z, s));
        }
    }
    Ok(best.expect("at least two classes").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseGrid;
    use crate::odds::{CellAggregation, Calibration, PairMatrix};

    const CLASSES: usize = 3;

    fn synthetic_stats(tau_value: f64) -> OddsStatistics {
        let grid = NoiseGrid::default_grid(0.05, 2, 9).unwrap();
        let cells = grid.len();
        OddsStatistics {
            num_classes: CLASSES,
            grid,
            mu: vec![PairMatrix::filled(CLASSES, 0.0); cells],
            sigma: vec![PairMatrix::filled(CLASSES, 1.0); cells],
            counts: vec![vec![vec![100; CLASSES]; CLASSES]; cells],
            model_checksum: "synthetic".into(),
            aggregation: CellAggregation::Average,
            calibration: Some(Calibration {
                tau: PairMatrix::filled(CLASSES, tau_value),
                target_fpr: 0.01,
                sidak_alpha: 0.005,
                fallback_pairs: Vec::new(),
                best_cell: None,
                calibration_fpr: 0.0,
                calibration_tpr: None,
            }),
        }
    }

    fn record(predicted: usize, scores: [f64; CLASSES], id: u64) -> ZScoreRecord {
        let stats = synthetic_stats(0.0);
        let mut combined = scores.to_vec();
        combined[predicted] = 0.0;
        ZScoreRecord {
            id,
            predicted,
            combined: combined.clone(),
            per_source: vec![combined.clone(); 3],
            per_cell: vec![combined; stats.grid.len()],
        }
    }

    /// Attacked-looking records predicted 0 whose true class is readable from
    /// which coordinate carries the bigger score.
    fn training_set(n: usize) -> (Vec<ZScoreRecord>, Vec<usize>) {
        let mut records = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let wiggle = 0.1 * (i % 7) as f64;
            if i % 2 == 0 {
                records.push(record(0, [0.0, 6.0 + wiggle, 3.0 - wiggle], i as u64));
                labels.push(1);
            } else {
                records.push(record(0, [0.0, 3.0 - wiggle, 6.0 + wiggle], i as u64));
                labels.push(2);
            }
        }
        (records, labels)
    }

    #[test]
    fn head_learns_a_separable_rule() {
        let stats = synthetic_stats(4.0);
        let (records, labels) = training_set(60);
        let corrector = train_meta(&stats, &records, &labels, &MetaConfig::default()).unwrap();
        assert!(corrector.heads[0].is_some());
        let mut hits = 0;
        for (r, &t) in records.iter().zip(&labels) {
            let corrected = meta_correct(&corrector, r, &stats).unwrap();
            assert_ne!(corrected, r.predicted, "flagged records must move");
            hits += usize::from(corrected == t);
        }
        assert!(hits as f64 / records.len() as f64 > 0.95);
    }

    #[test]
    fn unflagged_records_keep_their_prediction() {
        let stats = synthetic_stats(100.0);
        let (records, labels) = training_set(60);
        let corrector = train_meta(&stats, &records, &labels, &MetaConfig::default()).unwrap();
        for r in &records {
            assert_eq!(meta_correct(&corrector, r, &stats).unwrap(), r.predicted);
        }
    }

    #[test]
    fn sparse_head_falls_back_to_argmax_rule() {
        let stats = synthetic_stats(1.0);
        let (records, labels) = training_set(60);
        // Everything is predicted 0; heads for classes 1 and 2 get nothing.
        let corrector = train_meta(&stats, &records, &labels, &MetaConfig::default()).unwrap();
        assert!(corrector.heads[1].is_none());
        assert!(corrector.heads[2].is_none());
        let flagged = record(1, [7.0, 0.0, 2.0], 99);
        assert_eq!(
            meta_correct(&corrector, &flagged, &stats).unwrap(),
            odds::correct_label(&flagged, &stats).unwrap()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let stats = synthetic_stats(1.0);
        let (records, labels) = training_set(40);
        let a = train_meta(&stats, &records, &labels, &MetaConfig::default()).unwrap();
        let b = train_meta(&stats, &records, &labels, &MetaConfig::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn loss_decreases_with_training() {
        let stats = synthetic_stats(1.0);
        let (records, labels) = training_set(40);
        let short = MetaConfig {
            epochs: 1,
            ..MetaConfig::default()
        };
        let long = MetaConfig {
            epochs: 400,
            ..MetaConfig::default()
        };
        let a = train_meta(&stats, &records, &labels, &short).unwrap();
        let b = train_meta(&stats, &records, &labels, &long).unwrap();
        let la = a.heads[0].as_ref().unwrap().final_loss;
        let lb = b.heads[0].as_ref().unwrap().final_loss;
        assert!(lb < la, "loss {lb} after training vs {la} at start");
    }

    #[test]
    fn checksum_mismatch_is_rejected() {
        let stats = synthetic_stats(1.0);
        let (records, labels) = training_set(40);
        let corrector = train_meta(&stats, &records, &labels, &MetaConfig::default()).unwrap();
        let mut other = synthetic_stats(1.0);
        other.model_checksum = "different".into();
        match meta_correct(&corrector, &records[0], &other) {
            Err(Error::ModelMismatch { .. }) => {}
            other => panic!("expected model mismatch, got {other:?}"),
        }
    }
}
