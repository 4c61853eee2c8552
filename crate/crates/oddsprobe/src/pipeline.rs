//! End-to-end experiment pipeline: data, training, attacks, statistics,
//! calibration, correction, and geometry diagnostics, with every artifact
//! written under one output directory.
//!
//! Split usage is fixed: `train` fits the model and the noise statistics,
//! `calibration` sets thresholds, `holdout` trains the meta corrector, and
//! `test` is only ever evaluated. All randomness comes from seeds in the
//! config, so a rerun reproduces every file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::{
    save_attack_batch, save_dataset, save_meta, save_model, save_records, save_statistics,
    write_csv, write_json, AttackBatch,
};
use crate::attack::{
    cw_attack_batch, deepfool_distance, eot_pgd_attack_batch, pgd_attack_batch, tune_epsilon,
    AttackNorm, AttackOutcome, CwSpec, DeepFoolSpec, EotSpec, EpsilonTune, PgdSpec,
};
use crate::data::{gen_blobs, BlobParams, Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{
    cone_grid, feature_ray_profile, logit_crossover, nn_distance_ratio, preimage_search,
    weight_alignment, AlignmentMode,
};
use crate::meta::{train_meta, meta_correct, MetaConfig, MetaCorrector};
use crate::model::{accuracy, Classifier, ModelArch};
use crate::noise::{mix_seed, NoiseGrid, NoiseSource, NoiseSpec};
use crate::odds::{
    auc, calibrate, correct_label, detect, fit_statistics, roc_sweep, z_scores_batch,
    CellAggregation, OddsConfig, OddsStatistics, ZScoreRecord,
};
use crate::tensor::Tensor;
use crate::train::{train, Optimizer, TrainConfig, TrainReport};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSection {
    pub arch: ModelArch,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSection {
    /// Fixed L-inf budget; when absent, the grid is searched for the
    /// smallest value reaching `tune_target` success on training samples.
    pub epsilon: Option<f64>,
    pub epsilon_grid: Vec<f64>,
    pub tune_target: f64,
    pub tune_samples: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Noise draws per gradient step of the defense-aware attack.
    pub eot_samples: usize,
    pub cw: CwSpec,
    pub deepfool: DeepFoolSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSection {
    /// Base magnitude of the grid ladder; defaults to the tuned attack
    /// budget when absent.
    pub base_magnitude: Option<f64>,
    pub samples_per_point: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OddsSection {
    pub min_per_class: usize,
    pub aggregation: CellAggregation,
    pub target_fpr: f64,
    pub roc_levels: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSection {
    /// Cap on calibration / holdout / test samples fed through attacks and
    /// scoring; None uses the full splits.
    pub max_samples: Option<usize>,
    /// Test samples behind each epsilon-sweep row.
    pub sweep_samples: usize,
    /// Test pairs behind crossover / alignment / nn-ratio / preimage rows.
    pub geometry_samples: usize,
    pub preimage_steps: usize,
    pub preimage_step_size: f64,
    pub crossover_tolerance: f64,
    /// Orthogonal noise draws averaged per cone grid point.
    pub cone_draws: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: BlobParams,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub noise: NoiseSection,
    pub odds: OddsSection,
    pub meta: MetaConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: BlobParams::new(4, 20, 4000, 6.0, 1001),
            model: ModelSection {
                arch: ModelArch::Mlp {
                    input_dim: 20,
                    hidden: vec![32, 32],
                    classes: 4,
                },
                seed: 2002,
            },
            train: TrainConfig::new(40, 32, 0.005, 3003).with_optimizer(Optimizer::RmsProp),
            attack: AttackSection {
                epsilon: None,
                epsilon_grid: vec![0.01, 0.02, 0.03, 0.05, 0.08, 0.12],
                tune_target: 0.9,
                tune_samples: 200,
                iterations: 40,
                seed: 4004,
                eot_samples: 8,
                cw: CwSpec::default(),
                deepfool: DeepFoolSpec::default(),
            },
            noise: NoiseSection {
                base_magnitude: None,
                samples_per_point: 48,
                seed: 5005,
            },
            odds: OddsSection {
                min_per_class: 10,
                aggregation: CellAggregation::Average,
                target_fpr: 0.01,
                roc_levels: vec![
                    0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.85, 1.0,
                ],
            },
            meta: MetaConfig::default(),
            eval: EvalSection {
                max_samples: None,
                sweep_samples: 120,
                geometry_samples: 60,
                preimage_steps: 30,
                preimage_step_size: 0.5,
                crossover_tolerance: 1e-4,
                cone_draws: 8,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.meta.validate()?;
        if self.attack.epsilon.is_none() && self.attack.epsilon_grid.is_empty() {
            return Err(Error::InvalidParameter(
                "either a fixed epsilon or a tuning grid is required".into(),
            ));
        }
        if !(self.attack.tune_target > 0.0 && self.attack.tune_target <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "tune_target must be in (0, 1], got {}",
                self.attack.tune_target
            )));
        }
        if self.attack.iterations == 0 || self.attack.eot_samples == 0 {
            return Err(Error::InvalidParameter(
                "attack iterations and eot_samples must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.odds.target_fpr) {
            return Err(Error::InvalidParameter(format!(
                "target_fpr must be in [0, 1], got {}",
                self.odds.target_fpr
            )));
        }
        if self.odds.roc_levels.is_empty() {
            return Err(Error::InvalidParameter("roc_levels must not be empty".into()));
        }
        if self.eval.sweep_samples == 0 || self.eval.geometry_samples == 0 {
            return Err(Error::InvalidParameter(
                "sweep_samples and geometry_samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSummary {
    pub kind: String,
    pub attempted: usize,
    pub success_rate: f64,
    /// Mean perturbation norms over successful attacks.
    pub mean_l2: f64,
    pub mean_linf: f64,
    /// Model accuracy on the full attacked batch, no defense.
    pub undefended_accuracy: f64,
    /// Flag rate over successful attacks; None when none succeeded.
    pub detection_rate: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionReport {
    pub target_fpr: f64,
    pub calibration_fpr: f64,
    pub test_fpr: f64,
    pub fallback_pairs: usize,
    pub rates: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub clean_accuracy: f64,
    /// Accuracy of the corrected decision on clean test inputs (flagged
    /// clean points get moved, so this can dip below `clean_accuracy`).
    pub clean_corrected_accuracy: f64,
    pub undefended_adversarial_accuracy: f64,
    pub argmax_adversarial_accuracy: f64,
    pub meta_adversarial_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefenseAwareReport {
    pub plain_detection: Option<f64>,
    pub eot_detection: Option<f64>,
    pub eot_success_rate: f64,
    pub test_fpr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeometryReport {
    pub pairs: usize,
    pub alignment_positive_rate: f64,
    pub mean_crossover_t: f64,
    pub nn_ratio_mean: f64,
    pub nn_ratio_median: f64,
    pub preimage_improved_fraction: f64,
    pub mean_deepfool_distance: f64,
    pub roc_auc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub success_rate: f64,
    pub undefended_accuracy: f64,
    pub detection_rate: Option<f64>,
}

/// Operating point of the reference large-scale evaluation of this defense
/// (deep convolutional models on a standard image benchmark): 1.0% false
/// positive rate at 96.1% detection. Desk-scale runs land in the same regime
/// but are not directly comparable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub fpr: f64,
    pub detection_rate: f64,
}

impl Default for ReferencePoint {
    fn default() -> Self {
        ReferencePoint {
            fpr: 0.01,
            detection_rate: 0.961,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryReport {
    pub config: ExperimentConfig,
    pub epsilon: f64,
    pub epsilon_tuning: Option<EpsilonTune>,
    pub noise_base_magnitude: f64,
    pub train_report: TrainReport,
    pub clean_train_accuracy: f64,
    pub clean_test_accuracy: f64,
    pub attacks: Vec<AttackSummary>,
    pub detection: DetectionReport,
    pub correction: CorrectionReport,
    pub defense_aware: DefenseAwareReport,
    pub geometry: GeometryReport,
    pub epsilon_sweep: Vec<SweepRow>,
    pub reference: ReferencePoint,
}

#[derive(Serialize)]
struct OutputManifest<'a> {
    version: u32,
    files: &'a [String],
}

struct Outputs {
    root: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Outputs {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, relative: &str) -> PathBuf {
        self.written.push(relative.to_string());
        let full = self.root.join(relative);
        if let Some(parent) = full.parent() {
            // A failure here re-surfaces at the actual write.
            let _ = fs::create_dir_all(parent);
        }
        full
    }

    fn dir(&mut self, relative: &str) -> PathBuf {
        self.written.push(format!("{relative}/"));
        self.root.join(relative)
    }

    fn finish(mut self) -> Result<()> {
        self.written.push("manifest.json".into());
        self.written.sort();
        let manifest = OutputManifest {
            version: crate::artifacts::ARTIFACT_VERSION,
            files: &self.written,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.root.join("manifest.json"), text)?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_else(|| "na".into())
}

fn cap<T>(mut items: Vec<T>, limit: Option<usize>) -> Vec<T> {
    if let Some(n) = limit {
        items.truncate(n);
    }
    items
}

/// Packs per-sample attack outcomes into a batch keyed by the attack kind.
pub fn batch_from_outcomes(
    kind: &str,
    params: serde_json::Value,
    outcomes: Vec<AttackOutcome>,
    labels: &[usize],
) -> AttackBatch {
    AttackBatch {
        kind: kind.to_string(),
        params,
        indices: (0..outcomes.len()).collect(),
        source_labels: labels.to_vec(),
        success: outcomes.iter().map(|o| o.success).collect(),
        adversarial: outcomes.into_iter().map(|o| o.x_adv).collect(),
    }
}

/// Mean L2 / L-inf perturbation size over the successful rows of a batch.
pub fn mean_perturbation(batch: &AttackBatch, originals: &[Tensor]) -> Result<(f64, f64)> {
    let mut l2 = 0.0;
    let mut linf = 0.0;
    let mut n = 0usize;
    for (i, adv) in batch.adversarial.iter().enumerate() {
        if !batch.success[i] {
            continue;
        }
        let delta = adv.sub(&originals[i])?;
        l2 += delta.l2_norm();
        linf += delta.linf_norm();
        n += 1;
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((l2 / n as f64, linf / n as f64))
}

/// Flag rate over the records whose mask bit is set.
pub fn masked_detection_rate(
    records: &[ZScoreRecord],
    mask: &[bool],
    stats: &OddsStatistics,
) -> Result<Option<f64>> {
    let mut total = 0usize;
    let mut flagged = 0usize;
    for (r, &keep) in records.iter().zip(mask) {
        if !keep {
            continue;
        }
        total += 1;
        flagged += usize::from(detect(r, stats)?);
    }
    Ok((total > 0).then(|| flagged as f64 / total as f64))
}

/// Accuracy of flag-then-correct over scored records.
pub fn corrected_accuracy(
    records: &[ZScoreRecord],
    labels: &[usize],
    stats: &OddsStatistics,
) -> Result<f64> {
    let mut hits = 0usize;
    for (r, &l) in records.iter().zip(labels) {
        hits += usize::from(correct_label(r, stats)? == l);
    }
    Ok(hits as f64 / records.len().max(1) as f64)
}

/// Accuracy of the meta corrector's decisions over scored records.
pub fn meta_accuracy(
    corrector: &MetaCorrector,
    records: &[ZScoreRecord],
    labels: &[usize],
    stats: &OddsStatistics,
) -> Result<f64> {
    let mut hits = 0usize;
    for (r, &l) in records.iter().zip(labels) {
        hits += usize::from(meta_correct(corrector, r, stats)? == l);
    }
    Ok(hits as f64 / records.len().max(1) as f64)
}

struct SplitData {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
}

fn gather_capped(dataset: &Dataset, split: Split, limit: Option<usize>) -> SplitData {
    let (inputs, labels) = dataset.gather(split);
    SplitData {
        inputs: cap(inputs, limit),
        labels: cap(labels, limit),
    }
}

pub fn run_pipeline(config: &ExperimentConfig, out_dir: &Path) -> Result<SummaryReport> {
    config.validate().map_err(Error::in_stage("config"))?;
    let mut out = Outputs::new(out_dir)?;
    {
        let path = out.path("config.json");
        let mut text = serde_json::to_string_pretty(config)?;
        text.push('\n');
        fs::write(path, text)?;
    }

    // Data.
    let dataset = (|| {
        let dataset = gen_blobs(&config.dataset)?;
        save_dataset(&out.dir("dataset"), &dataset)?;
        Ok(dataset)
    })()
    .map_err(Error::in_stage("dataset"))?;

    let train_split = gather_capped(&dataset, Split::Train, None);
    let calib = gather_capped(&dataset, Split::Calibration, config.eval.max_samples);
    let holdout = gather_capped(&dataset, Split::Holdout, config.eval.max_samples);
    let test = gather_capped(&dataset, Split::Test, config.eval.max_samples);

    // Model.
    let (model, train_report) = (|| {
        let init = Classifier::init(config.model.arch.clone(), config.model.seed)?;
        let (model, report) = train(&init, &train_split.inputs, &train_split.labels, &config.train)?;
        save_model(&out.dir("model"), &model)?;
        Ok((model, report))
    })()
    .map_err(Error::in_stage("train"))?;

    let clean_train_accuracy = accuracy(&model, &train_split.inputs, &train_split.labels)
        .map_err(Error::in_stage("train"))?;
    let clean_test_accuracy =
        accuracy(&model, &test.inputs, &test.labels).map_err(Error::in_stage("train"))?;

    // Attack budget.
    let template = PgdSpec::new(
        AttackNorm::LInf,
        config.attack.epsilon.unwrap_or(0.0),
        config.attack.iterations,
        config.attack.seed,
    );
    let (epsilon, epsilon_tuning) = (|| match config.attack.epsilon {
        Some(fixed) => Ok((fixed, None)),
        None => {
            let n = config.attack.tune_samples.min(train_split.inputs.len());
            let tuned = tune_epsilon(
                &model,
                &train_split.inputs[..n],
                &train_split.labels[..n],
                &template,
                &config.attack.epsilon_grid,
                config.attack.tune_target,
            )?;
            Ok((tuned.epsilon, Some(tuned)))
        }
    })()
    .map_err(Error::in_stage("tune"))?;

    let pgd = template.clone().with_epsilon(epsilon);
    let noise_base = config.noise.base_magnitude.unwrap_or(epsilon);

    // Attacks. Each batch gets a split-specific seed so draws never collide.
    let attacks = (|| {
        let linf_params = serde_json::to_value(&pgd)?;
        let run_pgd = |salt: u64, data: &SplitData| -> Result<AttackBatch> {
            let spec = pgd.clone().with_seed(mix_seed(pgd.seed, salt));
            let outcomes = pgd_attack_batch(&model, &data.inputs, &data.labels, &spec)?;
            Ok(batch_from_outcomes(
                "pgd_linf",
                linf_params.clone(),
                outcomes,
                &data.labels,
            ))
        };
        let pgd_calibration = run_pgd(1, &calib)?;
        let pgd_holdout = run_pgd(2, &holdout)?;
        let pgd_test = run_pgd(3, &test)?;

        let input_dim = dataset.inputs[0].len() as f64;
        let l2_spec = PgdSpec::new(
            AttackNorm::L2,
            epsilon * input_dim.sqrt(),
            config.attack.iterations,
            mix_seed(config.attack.seed, 4),
        );
        let l2_outcomes = pgd_attack_batch(&model, &test.inputs, &test.labels, &l2_spec)?;
        let pgd_l2_test = batch_from_outcomes(
            "pgd_l2",
            serde_json::to_value(&l2_spec)?,
            l2_outcomes,
            &test.labels,
        );

        let cw_outcomes = cw_attack_batch(&model, &test.inputs, &config.attack.cw)?;
        let cw_test = AttackBatch {
            kind: "cw".into(),
            params: serde_json::to_value(&config.attack.cw)?,
            indices: (0..cw_outcomes.len()).collect(),
            source_labels: test.labels.clone(),
            success: cw_outcomes.iter().map(|o| o.success).collect(),
            adversarial: cw_outcomes.into_iter().map(|o| o.x_adv).collect(),
        };

        let eot_spec = EotSpec {
            pgd: pgd.clone().with_seed(mix_seed(pgd.seed, 5)),
            noise: NoiseSpec::new(
                NoiseSource::Gaussian,
                noise_base,
                config.attack.eot_samples,
                mix_seed(config.noise.seed, 5),
            )?,
        };
        let eot_outcomes = eot_pgd_attack_batch(&model, &test.inputs, &test.labels, &eot_spec)?;
        let eot_test = batch_from_outcomes(
            "eot_pgd",
            serde_json::to_value(&eot_spec)?,
            eot_outcomes,
            &test.labels,
        );

        for (name, batch) in [
            ("attacks/pgd_linf_calibration", &pgd_calibration),
            ("attacks/pgd_linf_holdout", &pgd_holdout),
            ("attacks/pgd_linf_test", &pgd_test),
            ("attacks/pgd_l2_test", &pgd_l2_test),
            ("attacks/cw_test", &cw_test),
            ("attacks/eot_pgd_test", &eot_test),
        ] {
            save_attack_batch(&out.dir(name), batch)?;
        }
        Ok([pgd_calibration, pgd_holdout, pgd_test, pgd_l2_test, cw_test, eot_test])
    })()
    .map_err(Error::in_stage("attack"))?;
    let [pgd_calibration, pgd_holdout, pgd_test, pgd_l2_test, cw_test, eot_test] = attacks;

    // Noise statistics.
    let grid = NoiseGrid::default_grid(
        noise_base,
        config.noise.samples_per_point,
        config.noise.seed,
    )
    .map_err(Error::in_stage("fit"))?;
    let odds_config = OddsConfig {
        min_per_class: config.odds.min_per_class,
        aggregation: config.odds.aggregation,
    };
    let stats = fit_statistics(
        &model,
        &train_split.inputs,
        &train_split.labels,
        &grid,
        &odds_config,
    )
    .map_err(Error::in_stage("fit"))?;

    // Scores.
    let score = |inputs: &[Tensor]| z_scores_batch(&model, inputs, 0, &stats);
    let (calib_clean, calib_adv, holdout_clean, holdout_adv) = (|| {
        Ok((
            score(&calib.inputs)?,
            score(&pgd_calibration.adversarial)?,
            score(&holdout.inputs)?,
            score(&pgd_holdout.adversarial)?,
        ))
    })()
    .map_err(Error::in_stage("score"))?;

    // Calibration restricted to successful attacks: failed ones are still
    // classified correctly and are not adversarial examples.
    let calib_adv_successful: Vec<ZScoreRecord> = calib_adv
        .iter()
        .zip(&pgd_calibration.success)
        .filter(|(_, &s)| s)
        .map(|(r, _)| r.clone())
        .collect();
    let stats = calibrate(
        &stats,
        &calib_clean,
        &calib_adv_successful,
        config.odds.target_fpr,
    )
    .map_err(Error::in_stage("calibrate"))?;
    save_statistics(&out.path("stats.json"), &stats).map_err(Error::in_stage("calibrate"))?;

    // Meta corrector from holdout records; clean and attacked records mix,
    // the trainer keeps only those whose prediction moved.
    let corrector = (|| {
        let mut records = holdout_clean.clone();
        let mut labels = holdout.labels.clone();
        records.extend(holdout_adv.iter().cloned());
        labels.extend(pgd_holdout.source_labels.iter().copied());
        let corrector = train_meta(&stats, &records, &labels, &config.meta)?;
        save_meta(&out.path("meta.json"), &corrector)?;
        Ok(corrector)
    })()
    .map_err(Error::in_stage("meta"))?;

    // Test-set scoring.
    let (test_clean, test_pgd, test_l2, test_cw, test_eot) = (|| {
        let clean = score(&test.inputs)?;
        save_records(
            &out.path("records/test_clean.json"),
            &clean,
            Some(&test.labels),
        )?;
        let pgd_records = score(&pgd_test.adversarial)?;
        save_records(
            &out.path("records/test_pgd_linf.json"),
            &pgd_records,
            Some(&pgd_test.source_labels),
        )?;
        Ok((
            clean,
            pgd_records,
            score(&pgd_l2_test.adversarial)?,
            score(&cw_test.adversarial)?,
            score(&eot_test.adversarial)?,
        ))
    })()
    .map_err(Error::in_stage("score"))?;

    // Reports.
    let report = (|| {
        let fpr_mask = vec![true; test_clean.len()];
        let test_fpr = masked_detection_rate(&test_clean, &fpr_mask, &stats)?
            .unwrap_or(0.0);

        let mut attack_rows = Vec::new();
        let mut detection_rates = BTreeMap::new();
        for (batch, records) in [
            (&pgd_test, &test_pgd),
            (&pgd_l2_test, &test_l2),
            (&cw_test, &test_cw),
            (&eot_test, &test_eot),
        ] {
            let rate = masked_detection_rate(records, &batch.success, &stats)?;
            let (mean_l2, mean_linf) = mean_perturbation(batch, &test.inputs)?;
            detection_rates.insert(batch.kind.clone(), rate);
            attack_rows.push(AttackSummary {
                kind: batch.kind.clone(),
                attempted: batch.adversarial.len(),
                success_rate: batch.success_rate(),
                mean_l2,
                mean_linf,
                undefended_accuracy: accuracy(&model, &batch.adversarial, &batch.source_labels)?,
                detection_rate: rate,
            });
        }

        let calibration = stats.calibration.as_ref().expect("calibrated above");
        let detection = DetectionReport {
            target_fpr: config.odds.target_fpr,
            calibration_fpr: calibration.calibration_fpr,
            test_fpr,
            fallback_pairs: calibration.fallback_pairs.len(),
            rates: detection_rates,
        };

        let correction = CorrectionReport {
            clean_accuracy: clean_test_accuracy,
            clean_corrected_accuracy: corrected_accuracy(&test_clean, &test.labels, &stats)?,
            undefended_adversarial_accuracy: accuracy(
                &model,
                &pgd_test.adversarial,
                &pgd_test.source_labels,
            )?,
            argmax_adversarial_accuracy: corrected_accuracy(
                &test_pgd,
                &pgd_test.source_labels,
                &stats,
            )?,
            meta_adversarial_accuracy: meta_accuracy(
                &corrector,
                &test_pgd,
                &pgd_test.source_labels,
                &stats,
            )?,
        };

        let defense_aware = DefenseAwareReport {
            plain_detection: detection.rates["pgd_linf"],
            eot_detection: detection.rates["eot_pgd"],
            eot_success_rate: eot_test.success_rate(),
            test_fpr,
        };

        // Geometry over the first successful test attacks.
        let pairs: Vec<usize> = (0..pgd_test.adversarial.len())
            .filter(|&i| pgd_test.success[i])
            .take(config.eval.geometry_samples)
            .collect();
        let mut geometry_rows = Vec::new();
        let mut aligned = 0usize;
        let mut crossover_sum = 0.0;
        let mut crossovers = 0usize;
        let mut ratios = Vec::new();
        let mut improved = 0usize;
        for &i in &pairs {
            let x = &test.inputs[i];
            let x_adv = &pgd_test.adversarial[i];
            let alignment = weight_alignment(&model, x, x_adv)?;
            aligned += usize::from(alignment > 0.0);
            let crossover = match logit_crossover(&model, x, x_adv, config.eval.crossover_tolerance)
            {
                Ok(c) => {
                    crossover_sum += c.t;
                    crossovers += 1;
                    Some(c.t)
                }
                Err(Error::NoCrossover(_)) => None,
                Err(e) => return Err(e),
            };
            let ratio = nn_distance_ratio(&train_split.inputs, x, x_adv)?;
            ratios.push(ratio);
            let target = Tensor::vector(model.features(x)?);
            let preimage = preimage_search(
                &model,
                x_adv,
                &target,
                config.eval.preimage_steps,
                config.eval.preimage_step_size,
            )?;
            improved += usize::from(preimage.improvement() > 0.0);
            geometry_rows.push(vec![
                i.to_string(),
                fmt(alignment),
                fmt_opt(crossover),
                fmt(ratio),
                fmt(preimage.improvement()),
            ]);
        }
        write_csv(
            &out.path("csv/geometry.csv"),
            &["sample", "alignment", "crossover_t", "nn_ratio", "preimage_improvement"],
            &geometry_rows,
        )?;
        write_json(
            &out.path("csv/geometry.params.json"),
            &serde_json::json!({
                "attack": "pgd_linf",
                "split": "test",
                "pairs": pairs.len(),
                "alignment": "inner product of the feature displacement with the flipped pair's weight difference",
                "crossover_tolerance": config.eval.crossover_tolerance,
                "preimage_steps": config.eval.preimage_steps,
                "preimage_step_size": config.eval.preimage_step_size,
            }),
        )?;

        let mut deepfool_sum = 0.0;
        let mut deepfool_n = 0usize;
        for x in test.inputs.iter().take(config.eval.geometry_samples) {
            match deepfool_distance(&model, x, &config.attack.deepfool) {
                Ok(outcome) => {
                    deepfool_sum += outcome.distance;
                    deepfool_n += 1;
                }
                Err(Error::DeepFoolNoConvergence { .. }) => {}
                Err(e) => return Err(e),
            }
        }

        let mut sorted_ratios = ratios.clone();
        sorted_ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
        let nn_ratio_median = if sorted_ratios.is_empty() {
            0.0
        } else {
            sorted_ratios[sorted_ratios.len() / 2]
        };

        // ROC over test records, successful attacks only.
        let success_records: Vec<ZScoreRecord> = test_pgd
            .iter()
            .zip(&pgd_test.success)
            .filter(|(_, &s)| s)
            .map(|(r, _)| r.clone())
            .collect();
        let success_labels: Vec<usize> = pgd_test
            .source_labels
            .iter()
            .zip(&pgd_test.success)
            .filter(|(_, &s)| s)
            .map(|(&l, _)| l)
            .collect();
        let roc = roc_sweep(
            &stats,
            &test_clean,
            &test.labels,
            &success_records,
            &success_labels,
            &config.odds.roc_levels,
        )?;
        let roc_auc = auc(&roc);
        write_csv(
            &out.path("csv/roc.csv"),
            &["target_fpr", "fpr", "tpr", "corrected_clean", "corrected_adversarial"],
            &roc
                .iter()
                .map(|p| {
                    vec![
                        fmt(p.target_fpr),
                        fmt(p.fpr),
                        fmt(p.tpr),
                        fmt(p.corrected_clean_accuracy),
                        fmt(p.corrected_adversarial_accuracy),
                    ]
                })
                .collect::<Vec<_>>(),
        )?;
        write_json(
            &out.path("csv/roc.params.json"),
            &serde_json::json!({
                "levels": config.odds.roc_levels,
                "clean_records": test_clean.len(),
                "adversarial_records": success_records.len(),
                "adversarial_filter": "successful pgd_linf test attacks only",
            }),
        )?;

        let geometry = GeometryReport {
            pairs: pairs.len(),
            alignment_positive_rate: aligned as f64 / pairs.len().max(1) as f64,
            mean_crossover_t: crossover_sum / crossovers.max(1) as f64,
            nn_ratio_mean: ratios.iter().sum::<f64>() / ratios.len().max(1) as f64,
            nn_ratio_median,
            preimage_improved_fraction: improved as f64 / pairs.len().max(1) as f64,
            mean_deepfool_distance: deepfool_sum / deepfool_n.max(1) as f64,
            roc_auc,
        };

        // Epsilon sweep on a test prefix.
        let sweep_n = config.eval.sweep_samples.min(test.inputs.len());
        let sweep_inputs = &test.inputs[..sweep_n];
        let sweep_labels = &test.labels[..sweep_n];
        let mut epsilon_sweep = Vec::new();
        for (k, &eps) in config.attack.epsilon_grid.iter().enumerate() {
            let spec = pgd
                .clone()
                .with_epsilon(eps)
                .with_seed(mix_seed(config.attack.seed, 100 + k as u64));
            let outcomes = pgd_attack_batch(&model, sweep_inputs, sweep_labels, &spec)?;
            let batch = batch_from_outcomes("sweep", serde_json::Value::Null, outcomes, sweep_labels);
            let records = z_scores_batch(&model, &batch.adversarial, 0, &stats)?;
            epsilon_sweep.push(SweepRow {
                epsilon: eps,
                success_rate: batch.success_rate(),
                undefended_accuracy: accuracy(&model, &batch.adversarial, sweep_labels)?,
                detection_rate: masked_detection_rate(&records, &batch.success, &stats)?,
            });
        }
        write_csv(
            &out.path("csv/sweep_epsilon.csv"),
            &["epsilon", "success_rate", "undefended_accuracy", "detection_rate"],
            &epsilon_sweep
                .iter()
                .map(|row| {
                    vec![
                        fmt(row.epsilon),
                        fmt(row.success_rate),
                        fmt(row.undefended_accuracy),
                        fmt_opt(row.detection_rate),
                    ]
                })
                .collect::<Vec<_>>(),
        )?;

        // Score traces for a histogram figure: the best combined score per
        // record, clean vs attacked.
        let mut score_rows = Vec::new();
        for (set, records) in [("clean", &test_clean), ("pgd_linf", &test_pgd)] {
            for r in records.iter() {
                let best = r
                    .combined
                    .iter()
                    .enumerate()
                    .filter(|&(z, _)| z != r.predicted)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                score_rows.push(vec![set.to_string(), r.id.to_string(), fmt(best)]);
            }
        }
        write_csv(
            &out.path("csv/score_histogram.csv"),
            &["set", "id", "max_combined_score"],
            &score_rows,
        )?;

        // Detection / correction / strength tables.
        write_csv(
            &out.path("csv/detection.csv"),
            &["attack", "attempted", "success_rate", "detection_rate", "test_fpr"],
            &attack_rows
                .iter()
                .map(|a| {
                    vec![
                        a.kind.clone(),
                        a.attempted.to_string(),
                        fmt(a.success_rate),
                        fmt_opt(a.detection_rate),
                        fmt(test_fpr),
                    ]
                })
                .collect::<Vec<_>>(),
        )?;
        write_csv(
            &out.path("csv/strength.csv"),
            &["attack", "mean_l2", "mean_linf", "undefended_accuracy"],
            &attack_rows
                .iter()
                .map(|a| {
                    vec![
                        a.kind.clone(),
                        fmt(a.mean_l2),
                        fmt(a.mean_linf),
                        fmt(a.undefended_accuracy),
                    ]
                })
                .collect::<Vec<_>>(),
        )?;
        write_csv(
            &out.path("csv/correction.csv"),
            &["decision", "accuracy"],
            &[
                vec!["clean".into(), fmt(correction.clean_accuracy)],
                vec![
                    "clean_corrected".into(),
                    fmt(correction.clean_corrected_accuracy),
                ],
                vec![
                    "undefended_adversarial".into(),
                    fmt(correction.undefended_adversarial_accuracy),
                ],
                vec![
                    "argmax_adversarial".into(),
                    fmt(correction.argmax_adversarial_accuracy),
                ],
                vec![
                    "meta_adversarial".into(),
                    fmt(correction.meta_adversarial_accuracy),
                ],
            ],
        )?;

        // Ray and cone diagnostics around the first geometry pair.
        if let Some(&i) = pairs.first() {
            let x = &test.inputs[i];
            let x_adv = &pgd_test.adversarial[i];
            let direction = x_adv.sub(x)?;
            let y = model.predict(x)?;
            let z = model.predict(x_adv)?;
            let ts: Vec<f64> = (0..=20).map(|k| k as f64 * 0.1).collect();
            let profile = feature_ray_profile(
                &model,
                x,
                &direction,
                &ts,
                AlignmentMode::Pair { from: y, to: z },
            )?;
            write_csv(
                &out.path("csv/ray_profile.csv"),
                &["t", "feature_distance", "alignment", "predicted", "prob_source", "prob_adversarial"],
                &profile
                    .steps
                    .iter()
                    .map(|s| {
                        vec![
                            fmt(s.t),
                            fmt(s.feature_distance),
                            fmt(s.alignment),
                            s.predicted.to_string(),
                            fmt(s.probabilities[y]),
                            fmt(s.probabilities[z]),
                        ]
                    })
                    .collect::<Vec<_>>(),
            )?;
            write_json(
                &out.path("csv/ray_profile.params.json"),
                &serde_json::json!({
                    "sample": i,
                    "source_class": y,
                    "adversarial_class": z,
                    "direction": "x_adv - x",
                    "direction_l2": direction.l2_norm(),
                    "t_range": [0.0, 2.0],
                    "steps": ts.len(),
                    "alignment": "inner product against w_adv - w_source; comparable only at matched displacement norm",
                }),
            )?;

            // Natural-class posture around the adversarial ray, averaged over
            // orthogonal directions drawn at the delta's own norm.
            let s_grid: Vec<f64> = (0..21).map(|k| -1.0 + k as f64 * 0.1).collect();
            let t_grid: Vec<f64> = (0..22).map(|k| -1.0 + k as f64 * (3.0 / 21.0)).collect();
            let cone_seed = mix_seed(config.attack.seed, 0xC0);
            let cone = cone_grid(
                &model,
                x,
                &direction,
                &s_grid,
                &t_grid,
                config.eval.cone_draws,
                cone_seed,
            )?;
            let mut cone_rows = Vec::new();
            for (ti, &t) in cone.t_grid.iter().enumerate() {
                for (si, &s) in cone.s_grid.iter().enumerate() {
                    cone_rows.push(vec![fmt(t), fmt(s), fmt(cone.values[ti][si])]);
                }
            }
            write_csv(
                &out.path("csv/cone.csv"),
                &["t", "s", "natural_prob"],
                &cone_rows,
            )?;
            write_json(
                &out.path("csv/cone.params.json"),
                &serde_json::json!({
                    "sample": i,
                    "natural_class": cone.natural_class,
                    "delta": "x_adv - x",
                    "delta_l2": direction.l2_norm(),
                    "t_range": [t_grid[0], t_grid[t_grid.len() - 1]],
                    "s_range": [s_grid[0], s_grid[s_grid.len() - 1]],
                    "t_steps": t_grid.len(),
                    "s_steps": s_grid.len(),
                    "draws": config.eval.cone_draws,
                    "seed": cone_seed,
                    "orthogonals": "gaussian draws projected orthogonal to the delta, rescaled to its norm",
                    "value": "softmax probability of the natural class, averaged over draws",
                }),
            )?;
        }

        Ok(SummaryReport {
            config: config.clone(),
            epsilon,
            epsilon_tuning,
            noise_base_magnitude: noise_base,
            train_report,
            clean_train_accuracy,
            clean_test_accuracy,
            attacks: attack_rows,
            detection,
            correction,
            defense_aware,
            geometry,
            epsilon_sweep,
            reference: ReferencePoint::default(),
        })
    })()
    .map_err(Error::in_stage("report"))?;

    let summary_path = out.path("summary.json");
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(summary_path, text)?;
    out.finish()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Miniature end-to-end run; correctness of the numbers is covered by
    /// module tests and the acceptance suite, this exercises the plumbing.
    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig {
            dataset: BlobParams::new(3, 8, 360, 6.0, 11),
            ..ExperimentConfig::default()
        };
        config.model.arch = ModelArch::Mlp {
            input_dim: 8,
            hidden: vec![12],
            classes: 3,
        };
        config.train = TrainConfig::new(12, 16, 0.05, 12).with_optimizer(Optimizer::RmsProp);
        config.attack.epsilon = Some(0.06);
        config.attack.iterations = 15;
        config.attack.eot_samples = 3;
        config.attack.cw.search_steps = 4;
        config.attack.cw.inner_steps = 30;
        config.noise.samples_per_point = 8;
        config.odds.min_per_class = 5;
        config.odds.target_fpr = 0.05;
        config.odds.roc_levels = vec![0.0, 0.05, 0.2, 0.5, 1.0];
        config.meta.min_records = 10;
        config.eval.max_samples = Some(40);
        config.eval.sweep_samples = 12;
        config.eval.geometry_samples = 8;
        config.eval.preimage_steps = 10;
        config.attack.epsilon_grid = vec![0.03, 0.06];
        config
    }

    #[test]
    fn pipeline_runs_end_to_end_and_is_reproducible() {
        let config = tiny_config();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let report_a = run_pipeline(&config, dir_a.path()).unwrap();
        let report_b = run_pipeline(&config, dir_b.path()).unwrap();

        let summary_a = fs::read(dir_a.path().join("summary.json")).unwrap();
        let summary_b = fs::read(dir_b.path().join("summary.json")).unwrap();
        assert_eq!(summary_a, summary_b, "summaries must match byte for byte");

        assert!(report_a.clean_test_accuracy > 0.8);
        assert!(report_a.attacks.iter().any(|a| a.kind == "pgd_linf"));
        for name in [
            "manifest.json",
            "stats.json",
            "meta.json",
            "csv/roc.csv",
            "csv/detection.csv",
            "dataset/dataset.json",
            "model/model.json",
            "attacks/pgd_linf_test/attack.json",
        ] {
            assert!(dir_a.path().join(name).exists(), "{name} missing");
        }
        let _ = report_b;
    }

    #[test]
    fn invalid_config_is_rejected_in_the_config_stage() {
        let mut config = tiny_config();
        config.odds.target_fpr = 1.5;
        let dir = tempfile::tempdir().unwrap();
        match run_pipeline(&config, dir.path()) {
            Err(Error::Stage { stage: "config", .. }) => {}
            other => panic!("expected config-stage error, got {other:?}"),
        }
    }
}
