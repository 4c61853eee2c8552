//! Command-line driver. `run-all` executes the whole pipeline; the other
//! subcommands run single stages against the same artifact layout, so a run
//! can be reproduced or re-entered piecewise at any point. The JSON config
//! is authoritative; flags override individual keys.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use oddsprobe::artifacts::{
    load_attack_batch, load_dataset, load_meta, load_model, load_statistics, read_json,
    save_attack_batch, save_dataset, save_meta, save_model, save_statistics, write_csv,
    write_json, AttackBatch,
};
use oddsprobe::attack::{
    cw_attack_batch, eot_pgd_attack_batch, pgd_attack_batch, tune_epsilon, AttackNorm, EotSpec,
    EpsilonTune, PgdSpec,
};
use oddsprobe::data::{gen_blobs, Dataset, Split};
use oddsprobe::error::{Error, Result};
use oddsprobe::geometry::{
    cone_grid, feature_ray_profile, logit_crossover, nn_distance_ratio, preimage_search,
    preimage_step, AlignmentMode,
};
use oddsprobe::meta::train_meta;
use oddsprobe::model::{accuracy, Classifier, ModelArch};
use oddsprobe::noise::{mix_seed, NoiseGrid, NoiseSource, NoiseSpec};
use oddsprobe::odds::{
    auc, calibrate, fit_statistics, roc_sweep, verdict, z_scores_batch, CellAggregation,
    OddsConfig, OddsStatistics, ZScoreRecord,
};
use oddsprobe::pipeline::{
    batch_from_outcomes, corrected_accuracy, masked_detection_rate, mean_perturbation,
    meta_accuracy, run_pipeline, ExperimentConfig,
};
use oddsprobe::tensor::Tensor;
use oddsprobe::train::train;

const OUT_ENV: &str = "ODDSPROBE_OUT";

#[derive(Parser)]
#[command(
    name = "oddsprobe",
    version,
    about = "Detects and corrects adversarial examples with a noise-perturbed log-odds test"
)]
struct Cli {
    /// JSON experiment config; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output root; falls back to $ODDSPROBE_OUT, then ./oddsprobe-out.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Per-key config overrides; unset flags leave the config untouched.
#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    classes: Option<usize>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    count: Option<usize>,
    #[arg(long, global = true)]
    separation: Option<f64>,
    #[arg(long, global = true)]
    nuisance_spread: Option<f64>,
    #[arg(long, global = true)]
    data_seed: Option<u64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, global = true)]
    model_seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    train_seed: Option<u64>,
    /// Fixed L-inf budget; disables grid tuning.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    attack_seed: Option<u64>,
    #[arg(long, global = true)]
    eot_samples: Option<usize>,
    #[arg(long, global = true)]
    noise_magnitude: Option<f64>,
    #[arg(long, global = true)]
    noise_samples: Option<usize>,
    #[arg(long, global = true)]
    noise_seed: Option<u64>,
    #[arg(long, global = true)]
    min_per_class: Option<usize>,
    #[arg(long, global = true, value_enum)]
    aggregation: Option<AggregationArg>,
    #[arg(long, global = true)]
    target_fpr: Option<f64>,
    #[arg(long, global = true)]
    max_samples: Option<usize>,
    #[arg(long, global = true)]
    sweep_samples: Option<usize>,
    #[arg(long, global = true)]
    geometry_samples: Option<usize>,
    #[arg(long, global = true)]
    cone_draws: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Average,
    BestCell,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackKindArg {
    PgdLinf,
    PgdL2,
    Cw,
    EotPgd,
}

impl AttackKindArg {
    fn dir(self) -> &'static str {
        match self {
            AttackKindArg::PgdLinf => "pgd_linf",
            AttackKindArg::PgdL2 => "pgd_l2",
            AttackKindArg::Cw => "cw",
            AttackKindArg::EotPgd => "eot_pgd",
        }
    }

    fn index(self) -> u64 {
        match self {
            AttackKindArg::PgdLinf => 0,
            AttackKindArg::PgdL2 => 1,
            AttackKindArg::Cw => 2,
            AttackKindArg::EotPgd => 3,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Calibration,
    Holdout,
    Test,
}

impl SplitArg {
    fn dir(self) -> &'static str {
        match self {
            SplitArg::Calibration => "calibration",
            SplitArg::Holdout => "holdout",
            SplitArg::Test => "test",
        }
    }

    fn to_split(self) -> Split {
        match self {
            SplitArg::Calibration => Split::Calibration,
            SplitArg::Holdout => Split::Holdout,
            SplitArg::Test => Split::Test,
        }
    }

    fn index(self) -> u64 {
        match self {
            SplitArg::Calibration => 0,
            SplitArg::Holdout => 1,
            SplitArg::Test => 2,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the blob dataset under the output root.
    GenData,
    /// Train the classifier and settle the attack budget.
    Train,
    /// Run one attack on one split and store the batch.
    Attack {
        #[arg(long, value_enum, default_value = "pgd-linf")]
        kind: AttackKindArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Fit per-cell log-odds statistics on the train split.
    FitStats,
    /// Calibrate detection thresholds on the calibration split.
    Calibrate,
    /// Score a split and write one detection row per sample.
    Detect {
        /// Attack batch to score; scores the clean split when omitted.
        #[arg(long, value_enum)]
        attack: Option<AttackKindArg>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Report corrected-label accuracies on the test split.
    Correct,
    /// Train the meta corrector on holdout records.
    MetaTrain,
    /// Geometry and ROC diagnostics over the attacked test split.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
    /// Parameter sweeps.
    Sweep {
        #[command(subcommand)]
        what: SweepCmd,
    },
    /// Every stage end to end, with manifest and summary.
    RunAll,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Feature and class posture along the first adversarial ray.
    Ray,
    /// Averaged natural-class probability around the adversarial delta.
    Cone,
    /// Logit crossover points along clean-to-adversarial segments.
    Crossover,
    /// Perturbation size relative to the nearest training neighbor.
    Nnratio,
    /// Detection ROC over the calibrated thresholds.
    Roc,
    /// Feature-space preimage recovery of attacked inputs.
    Preimage,
}

#[derive(Subcommand)]
enum SweepCmd {
    /// PGD strength and detection across the configured epsilon grid.
    Epsilon,
    /// Bernoulli-thinned perturbations: keep each coordinate with prob q.
    Bernoulli {
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.25,0.5,0.75,1.0")]
        q: Vec<f64>,
    },
    /// PGD iteration counts at the tuned budget.
    Iterations {
        #[arg(long, value_delimiter = ',', default_value = "10,40,160")]
        grid: Vec<usize>,
    },
}

#[derive(Serialize, Deserialize)]
struct EpsilonDoc {
    epsilon: f64,
    tuning: Option<EpsilonTune>,
}

struct Ctx {
    config: ExperimentConfig,
    root: PathBuf,
}

impl Ctx {
    fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.root.join("dataset"))
    }

    fn model(&self) -> Result<Classifier> {
        load_model(&self.root.join("model"))
    }

    fn stats(&self) -> Result<OddsStatistics> {
        load_statistics(&self.root.join("stats.json"))
    }

    fn batch(&self, kind: AttackKindArg, split: SplitArg) -> Result<AttackBatch> {
        load_attack_batch(
            &self
                .root
                .join("attacks")
                .join(format!("{}_{}", kind.dir(), split.dir())),
        )
    }

    fn csv(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join("csv");
        fs::create_dir_all(&dir)?;
        Ok(dir.join(name))
    }

    /// Split inputs and labels, capped like the pipeline caps everything
    /// downstream of training.
    fn split_data(&self, dataset: &Dataset, split: Split) -> (Vec<Tensor>, Vec<usize>) {
        let (mut inputs, mut labels) = dataset.gather(split);
        if split != Split::Train {
            if let Some(n) = self.config.eval.max_samples {
                inputs.truncate(n);
                labels.truncate(n);
            }
        }
        (inputs, labels)
    }

    /// The attack budget: fixed by config, cached in epsilon.json, or tuned
    /// on the train split and cached for the following stages.
    fn epsilon(&self, model: &Classifier, dataset: &Dataset) -> Result<f64> {
        if let Some(fixed) = self.config.attack.epsilon {
            return Ok(fixed);
        }
        let path = self.root.join("epsilon.json");
        if path.exists() {
            let doc: EpsilonDoc = read_json(&path)?;
            return Ok(doc.epsilon);
        }
        let (inputs, labels) = dataset.gather(Split::Train);
        let n = self.config.attack.tune_samples.min(inputs.len());
        let template = PgdSpec::new(
            AttackNorm::LInf,
            0.0,
            self.config.attack.iterations,
            self.config.attack.seed,
        );
        let tuned = tune_epsilon(
            model,
            &inputs[..n],
            &labels[..n],
            &template,
            &self.config.attack.epsilon_grid,
            self.config.attack.tune_target,
        )?;
        let epsilon = tuned.epsilon;
        write_json(
            &path,
            &EpsilonDoc {
                epsilon,
                tuning: Some(tuned),
            },
        )?;
        Ok(epsilon)
    }

    fn noise_base(&self, model: &Classifier, dataset: &Dataset) -> Result<f64> {
        match self.config.noise.base_magnitude {
            Some(m) => Ok(m),
            None => self.epsilon(model, dataset),
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_else(|| "na".into())
}

fn apply_overrides(config: &mut ExperimentConfig, o: &Overrides) {
    if let Some(v) = o.classes {
        config.dataset.classes = v;
    }
    if let Some(v) = o.dim {
        config.dataset.dim = v;
    }
    if let Some(v) = o.count {
        config.dataset.count = v;
    }
    if let Some(v) = o.separation {
        config.dataset.separation = v;
    }
    if let Some(v) = o.nuisance_spread {
        config.dataset.nuisance_spread = v;
    }
    if let Some(v) = o.data_seed {
        config.dataset.seed = v;
    }
    // Keep the model head consistent with overridden data dimensions.
    if o.classes.is_some() || o.dim.is_some() {
        match &mut config.model.arch {
            ModelArch::Linear { input_dim, classes } => {
                *input_dim = config.dataset.dim;
                *classes = config.dataset.classes;
            }
            ModelArch::Mlp {
                input_dim, classes, ..
            } => {
                *input_dim = config.dataset.dim;
                *classes = config.dataset.classes;
            }
            ModelArch::ConvNet { .. } => {}
        }
    }
    if let Some(ref widths) = o.hidden {
        if let ModelArch::Mlp { hidden, .. } = &mut config.model.arch {
            *hidden = widths.clone();
        }
    }
    if let Some(v) = o.model_seed {
        config.model.seed = v;
    }
    if let Some(v) = o.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = o.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        config.train.learning_rate = v;
    }
    if let Some(v) = o.train_seed {
        config.train.seed = v;
    }
    if let Some(v) = o.epsilon {
        config.attack.epsilon = Some(v);
    }
    if let Some(v) = o.iterations {
        config.attack.iterations = v;
    }
    if let Some(v) = o.attack_seed {
        config.attack.seed = v;
    }
    if let Some(v) = o.eot_samples {
        config.attack.eot_samples = v;
    }
    if let Some(v) = o.noise_magnitude {
        config.noise.base_magnitude = Some(v);
    }
    if let Some(v) = o.noise_samples {
        config.noise.samples_per_point = v;
    }
    if let Some(v) = o.noise_seed {
        config.noise.seed = v;
    }
    if let Some(v) = o.min_per_class {
        config.odds.min_per_class = v;
    }
    if let Some(v) = o.aggregation {
        config.odds.aggregation = match v {
            AggregationArg::Average => CellAggregation::Average,
            AggregationArg::BestCell => CellAggregation::BestCell,
        };
    }
    if let Some(v) = o.target_fpr {
        config.odds.target_fpr = v;
    }
    if let Some(v) = o.max_samples {
        config.eval.max_samples = Some(v);
    }
    if let Some(v) = o.sweep_samples {
        config.eval.sweep_samples = v;
    }
    if let Some(v) = o.geometry_samples {
        config.eval.geometry_samples = v;
    }
    if let Some(v) = o.cone_draws {
        config.eval.cone_draws = v;
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => read_json(path)?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(&mut config, &cli.overrides);
    config.validate()?;
    Ok(config)
}

fn resolve_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("oddsprobe-out"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let ctx = Ctx {
        config,
        root: resolve_root(&cli),
    };
    if let Err(e) = fs::create_dir_all(&ctx.root) {
        eprintln!("config error: cannot create output root: {e}");
        return ExitCode::from(2);
    }
    match dispatch(&cli.command, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(command: &Command, ctx: &Ctx) -> Result<()> {
    match command {
        Command::GenData => gen_data(ctx).map_err(Error::in_stage("dataset")),
        Command::Train => train_stage(ctx).map_err(Error::in_stage("train")),
        Command::Attack { kind, split } => {
            attack_stage(ctx, *kind, *split).map_err(Error::in_stage("attack"))
        }
        Command::FitStats => fit_stats(ctx).map_err(Error::in_stage("fit")),
        Command::Calibrate => calibrate_stage(ctx).map_err(Error::in_stage("calibrate")),
        Command::Detect { attack, split } => {
            detect_stage(ctx, *attack, *split).map_err(Error::in_stage("detect"))
        }
        Command::Correct => correct_stage(ctx).map_err(Error::in_stage("correct")),
        Command::MetaTrain => meta_train_stage(ctx).map_err(Error::in_stage("meta")),
        Command::Analyze { what } => analyze(ctx, what).map_err(Error::in_stage("analyze")),
        Command::Sweep { what } => sweep(ctx, what).map_err(Error::in_stage("sweep")),
        Command::RunAll => run_all(ctx),
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let dataset = gen_blobs(&ctx.config.dataset)?;
    let dir = ctx.root.join("dataset");
    save_dataset(&dir, &dataset)?;
    println!(
        "dataset: {} samples, {} classes, dim {}",
        dataset.inputs.len(),
        ctx.config.dataset.classes,
        ctx.config.dataset.dim
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn train_stage(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.dataset()?;
    let (inputs, labels) = dataset.gather(Split::Train);
    let init = Classifier::init(ctx.config.model.arch.clone(), ctx.config.model.seed)?;
    let (model, report) = train(&init, &inputs, &labels, &ctx.config.train)?;
    save_model(&ctx.root.join("model"), &model)?;
    write_json(&ctx.root.join("train_report.json"), &report)?;
    let (test_inputs, test_labels) = dataset.gather(Split::Test);
    println!(
        "train accuracy {:.3}, final mean loss {:.4}",
        report.train_accuracy, report.final_mean_loss
    );
    println!(
        "test accuracy {:.3}",
        accuracy(&model, &test_inputs, &test_labels)?
    );
    let epsilon = ctx.epsilon(&model, &dataset)?;
    println!("attack budget epsilon {epsilon}");
    println!("wrote {}", ctx.root.join("model").display());
    Ok(())
}

/// Split-specific seed salts. The standard pipeline combinations reuse the
/// pipeline's values so staged runs reproduce run-all batches exactly;
/// everything else gets its own disjoint range.
fn attack_salt(kind: AttackKindArg, split: SplitArg) -> u64 {
    match (kind, split) {
        (AttackKindArg::PgdLinf, SplitArg::Calibration) => 1,
        (AttackKindArg::PgdLinf, SplitArg::Holdout) => 2,
        (AttackKindArg::PgdLinf, SplitArg::Test) => 3,
        (AttackKindArg::PgdL2, SplitArg::Test) => 4,
        (AttackKindArg::EotPgd, SplitArg::Test) => 5,
        (k, s) => 8 + 4 * k.index() + s.index(),
    }
}

fn attack_stage(ctx: &Ctx, kind: AttackKindArg, split: SplitArg) -> Result<()> {
    let dataset = ctx.dataset()?;
    let model = ctx.model()?;
    let (inputs, labels) = ctx.split_data(&dataset, split.to_split());
    if inputs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "split {} has no samples",
            split.dir()
        )));
    }
    let cfg = &ctx.config.attack;
    let epsilon = ctx.epsilon(&model, &dataset)?;
    let salt = attack_salt(kind, split);
    let batch = match kind {
        AttackKindArg::PgdLinf => {
            let base = PgdSpec::new(AttackNorm::LInf, epsilon, cfg.iterations, cfg.seed);
            let spec = base.clone().with_seed(mix_seed(cfg.seed, salt));
            let outcomes = pgd_attack_batch(&model, &inputs, &labels, &spec)?;
            batch_from_outcomes("pgd_linf", serde_json::to_value(&base)?, outcomes, &labels)
        }
        AttackKindArg::PgdL2 => {
            let dim = inputs[0].len() as f64;
            let spec = PgdSpec::new(
                AttackNorm::L2,
                epsilon * dim.sqrt(),
                cfg.iterations,
                mix_seed(cfg.seed, salt),
            );
            let outcomes = pgd_attack_batch(&model, &inputs, &labels, &spec)?;
            batch_from_outcomes("pgd_l2", serde_json::to_value(&spec)?, outcomes, &labels)
        }
        AttackKindArg::Cw => {
            let outcomes = cw_attack_batch(&model, &inputs, &cfg.cw)?;
            AttackBatch {
                kind: "cw".into(),
                params: serde_json::to_value(&cfg.cw)?,
                indices: (0..outcomes.len()).collect(),
                source_labels: labels.clone(),
                success: outcomes.iter().map(|o| o.success).collect(),
                adversarial: outcomes.into_iter().map(|o| o.x_adv).collect(),
            }
        }
        AttackKindArg::EotPgd => {
            let noise_base = ctx.noise_base(&model, &dataset)?;
            let spec = EotSpec {
                pgd: PgdSpec::new(
                    AttackNorm::LInf,
                    epsilon,
                    cfg.iterations,
                    mix_seed(cfg.seed, salt),
                ),
                noise: NoiseSpec::new(
                    NoiseSource::Gaussian,
                    noise_base,
                    cfg.eot_samples,
                    mix_seed(ctx.config.noise.seed, salt),
                )?,
            };
            let outcomes = eot_pgd_attack_batch(&model, &inputs, &labels, &spec)?;
            batch_from_outcomes("eot_pgd", serde_json::to_value(&spec)?, outcomes, &labels)
        }
    };
    let dir = ctx
        .root
        .join("attacks")
        .join(format!("{}_{}", kind.dir(), split.dir()));
    save_attack_batch(&dir, &batch)?;
    let (mean_l2, mean_linf) = mean_perturbation(&batch, &inputs)?;
    println!(
        "{} on {}: success rate {:.3} over {} samples",
        kind.dir(),
        split.dir(),
        batch.success_rate(),
        inputs.len()
    );
    println!("mean perturbation l2 {mean_l2:.4}, linf {mean_linf:.4}");
    println!(
        "undefended accuracy {:.3}",
        accuracy(&model, &batch.adversarial, &labels)?
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn fit_stats(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.dataset()?;
    let model = ctx.model()?;
    let noise_base = ctx.noise_base(&model, &dataset)?;
    let grid = NoiseGrid::default_grid(
        noise_base,
        ctx.config.noise.samples_per_point,
        ctx.config.noise.seed,
    )?;
    let odds_config = OddsConfig {
        min_per_class: ctx.config.odds.min_per_class,
        aggregation: ctx.config.odds.aggregation,
    };
    let (inputs, labels) = dataset.gather(Split::Train);
    let stats = fit_statistics(&model, &inputs, &labels, &grid, &odds_config)?;
    let path = ctx.root.join("stats.json");
    save_statistics(&path, &stats)?;
    println!(
        "fitted {} noise cells x {} classes on {} samples",
        stats.grid.cells.len(),
        stats.num_classes,
        inputs.len()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn successful_records(records: &[ZScoreRecord], success: &[bool]) -> Vec<ZScoreRecord> {
    records
        .iter()
        .zip(success)
        .filter(|(_, &s)| s)
        .map(|(r, _)| r.clone())
        .collect()
}

fn calibrate_stage(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.dataset()?;
    let model = ctx.model()?;
    let stats = ctx.stats()?;
    let batch = ctx.batch(AttackKindArg::PgdLinf, SplitArg::Calibration)?;
    let (inputs, _) = ctx.split_data(&dataset, Split::Calibration);
    let clean = z_scores_batch(&model, &inputs, 0, &stats)?;
    let adv = z_scores_batch(&model, &batch.adversarial, 0, &stats)?;
    let stats = calibrate(
        &stats,
        &clean,
        &successful_records(&adv, &batch.success),
        ctx.config.odds.target_fpr,
    )?;
    let path = ctx.root.join("stats.json");
    save_statistics(&path, &stats)?;
    let c = stats.calibration.as_ref().expect("just calibrated");
    println!(
        "target fpr {}, realized calibration fpr {}, detection {}",
        c.target_fpr,
        c.calibration_fpr,
        fmt_opt(c.calibration_tpr)
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn detect_stage(ctx: &Ctx, attack: Option<AttackKindArg>, split: SplitArg) -> Result<()> {
    let dataset = ctx.dataset()?;
    let model = ctx.model()?;
    let stats = ctx.stats()?;
    let (subject, inputs, success) = match attack {
        None => {
            let (inputs, _) = ctx.split_data(&dataset, split.to_split());
            ("clean", inputs, None)
        }
        Some(kind) => {
            let batch = ctx.batch(kind, split)?;
            (kind.dir(), batch.adversarial, Some(batch.success))
        }
    };
    let records = z_scores_batch(&model, &inputs, 0, &stats)?;
    let mut rows = Vec::with_capacity(records.len());
    let mut flagged = 0usize;
    for r in &records {
        let v = verdict(r, &stats)?;
        flagged += usize::from(v.flag);
        rows.push(vec![
            r.id.to_string(),
            r.predicted.to_string(),
            u8::from(v.flag).to_string(),
            v.corrected.to_string(),
            fmt(v.max_score),
            v.votes.to_string(),
        ]);
    }
    let path = ctx.csv(&format!("detect_{}_{}.csv", subject, split.dir()))?;
    write_csv(&path, &["id", "y", "flag", "corrected", "max_z", "votes"], &rows)?;
    println!(
        "flag rate {:.3} over {} records",
        flagged as f64 / records.len().max(1) as f64,
        records.len()
    );
    if let Some(success) = success {
        let rate = masked_detection_rate(&records, &success, &stats)?;
        println!("detection rate on successful attacks {}", fmt_opt(rate));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn correct_stage(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.dataset()?;
    let model = ctx.model()?;
    let stats = ctx.stats()?;
    let batch = ctx.batch(AttackKindArg::PgdLinf, SplitArg::Test)?;
    let (inputs, labels) = ctx.split_data(&dataset, Split::Test);
    let clean = z_scores_batch(&model, &inputs, 0, &stats)?;
    let adv = z_scores_batch(&model, &batch.adversarial, 0, &stats)?;
    let mut rows = vec![
        ("clean", accuracy(&model, &inputs, &labels)?),
        ("clean_corrected", corrected_accuracy(&clean, &labels, &stats)?),
        (
            "undefended_adversarial",
            accuracy(&model, &batch.adversarial, &batch.source_labels)?,
        ),
        (
            "argmax_adversarial",
            corrected_accuracy(&adv, &batch.source_labels, &stats)?,
        ),
    ];
    let meta_path = ctx.root.join("meta.json");
    if meta_path.exists() {
        let corrector = load_meta(&meta_path)?;
        rows.push((
            "meta_adversarial",
            meta_accuracy(&corrector, &adv, &batch.source_labels, &stats)?,
        ));
    } else {
        println!("meta corrector absent; run meta-train for the meta row");
    }
    for (decision, acc) in &rows {
        println!("{decision}: {acc:.3}");
    }
    let path = ctx.csv("correction.csv")?;
    write_csv(
        &path,
        &["decision", "accuracy"],
        &rows
            .iter()
            .map(|(decision, acc)| vec![decision.to_string(), fmt(*acc)])
            .collect::<Vec<_>>(),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn meta_train_stage(ctx: &Ctx) -> Result<()> {
    let dataset = ctx.dataset()?;
    let model = ctx.model()?;
    let stats = ctx.stats()?;
    let batch = ctx.batch(AttackKindArg::PgdLinf, SplitArg::Holdout)?;
    let (inputs, labels) = ctx.split_data(&dataset, Split::Holdout);
    let mut records = z_scores_batch(&model, &inputs, 0, &stats)?;
    let mut all_labels = labels;
    records.extend(z_scores_batch(&model, &batch.adversarial, 0, &stats)?);
    all_labels.extend(batch.source_labels.iter().copied());
    let corrector = train_meta(&stats, &records, &all_labels, &ctx.config.meta)?;
    let path = ctx.root.join("meta.json");
    save_meta(&path, &corrector)?;
    println!(
        "heads trained for {} of {} classes",
        corrector.heads.iter().filter(|h| h.is_some()).count(),
        corrector.num_classes
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Successful-attack pairs shared by the geometry analyses.
struct GeometrySubjects {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    batch: AttackBatch,
    pairs: Vec<usize>,
}

fn geometry_subjects(ctx: &Ctx, dataset: &Dataset) -> Result<GeometrySubjects> {
    let batch = ctx.batch(AttackKindArg::PgdLinf, SplitArg::Test)?;
    let (inputs, labels) = ctx.split_data(dataset, Split::Test);
    let pairs: Vec<usize> = (0..batch.adversarial.len())
        .filter(|&i| batch.success[i])
        .take(ctx.config.eval.geometry_samples)
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(
            "no successful test attacks to analyze".into(),
        ));
    }
    Ok(GeometrySubjects {
        inputs,
        labels,
        batch,
        pairs,
    })
}

fn analyze(ctx: &Ctx, what: &AnalyzeCmd) -> Result<()> {
    let dataset = ctx.dataset()?;
    let model = ctx.model()?;
    let subjects = geometry_subjects(ctx, &dataset)?;
    match what {
        AnalyzeCmd::Ray => analyze_ray(ctx, &model, &subjects),
        AnalyzeCmd::Cone => analyze_cone(ctx, &model, &subjects),
        AnalyzeCmd::Crossover => analyze_crossover(ctx, &model, &subjects),
        AnalyzeCmd::Nnratio => analyze_nnratio(ctx, &dataset, &subjects),
        AnalyzeCmd::Roc => analyze_roc(ctx, &model, &subjects),
        AnalyzeCmd::Preimage => analyze_preimage(ctx, &model, &subjects),
    }
}

fn analyze_ray(ctx: &Ctx, model: &Classifier, subjects: &GeometrySubjects) -> Result<()> {
    let i = subjects.pairs[0];
    let x = &subjects.inputs[i];
    let x_adv = &subjects.batch.adversarial[i];
    let direction = x_adv.sub(x)?;
    let y = model.predict(x)?;
    let z = model.predict(x_adv)?;
    let ts: Vec<f64> = (0..=20).map(|k| k as f64 * 0.1).collect();
    let profile = feature_ray_profile(model, x, &direction, &ts, AlignmentMode::Pair {
        from: y,
        to: z,
    })?;
    let path = ctx.csv("ray_profile.csv")?;
    write_csv(
        &path,
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
        &ctx.csv("ray_profile.params.json")?,
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
    println!("sample {i}: class {y} -> {z}, direction l2 {:.4}", direction.l2_norm());
    println!("wrote {}", path.display());
    Ok(())
}

fn analyze_cone(ctx: &Ctx, model: &Classifier, subjects: &GeometrySubjects) -> Result<()> {
    let i = subjects.pairs[0];
    let x = &subjects.inputs[i];
    let delta = subjects.batch.adversarial[i].sub(x)?;
    let s_grid: Vec<f64> = (0..21).map(|k| -1.0 + k as f64 * 0.1).collect();
    let t_grid: Vec<f64> = (0..22).map(|k| -1.0 + k as f64 * (3.0 / 21.0)).collect();
    let seed = mix_seed(ctx.config.attack.seed, 0xC0);
    let cone = cone_grid(
        model,
        x,
        &delta,
        &s_grid,
        &t_grid,
        ctx.config.eval.cone_draws,
        seed,
    )?;
    let mut rows = Vec::new();
    for (ti, &t) in cone.t_grid.iter().enumerate() {
        for (si, &s) in cone.s_grid.iter().enumerate() {
            rows.push(vec![fmt(t), fmt(s), fmt(cone.values[ti][si])]);
        }
    }
    let path = ctx.csv("cone.csv")?;
    write_csv(&path, &["t", "s", "natural_prob"], &rows)?;
    write_json(
        &ctx.csv("cone.params.json")?,
        &serde_json::json!({
            "sample": i,
            "natural_class": cone.natural_class,
            "delta": "x_adv - x",
            "delta_l2": delta.l2_norm(),
            "t_range": [t_grid[0], t_grid[t_grid.len() - 1]],
            "s_range": [s_grid[0], s_grid[s_grid.len() - 1]],
            "t_steps": t_grid.len(),
            "s_steps": s_grid.len(),
            "draws": ctx.config.eval.cone_draws,
            "seed": seed,
            "orthogonals": "gaussian draws projected orthogonal to the delta, rescaled to its norm",
            "value": "softmax probability of the natural class, averaged over draws",
        }),
    )?;
    println!(
        "sample {i}: natural class {}, {} draws at delta l2 {:.4}",
        cone.natural_class,
        cone.draws,
        delta.l2_norm()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn analyze_crossover(ctx: &Ctx, model: &Classifier, subjects: &GeometrySubjects) -> Result<()> {
    let mut rows = Vec::new();
    let mut sum = 0.0;
    let mut found = 0usize;
    for &i in &subjects.pairs {
        let t = match logit_crossover(
            model,
            &subjects.inputs[i],
            &subjects.batch.adversarial[i],
            ctx.config.eval.crossover_tolerance,
        ) {
            Ok(c) => {
                sum += c.t;
                found += 1;
                Some(c.t)
            }
            Err(Error::NoCrossover(_)) => None,
            Err(e) => return Err(e),
        };
        rows.push(vec![i.to_string(), fmt_opt(t)]);
    }
    let path = ctx.csv("crossover.csv")?;
    write_csv(&path, &["sample", "t"], &rows)?;
    write_json(
        &ctx.csv("crossover.params.json")?,
        &serde_json::json!({
            "pairs": subjects.pairs.len(),
            "tolerance": ctx.config.eval.crossover_tolerance,
            "segment": "x + t * (x_adv - x), t in [0, 1]",
        }),
    )?;
    println!(
        "crossover found on {} of {} pairs, mean t {:.4}",
        found,
        subjects.pairs.len(),
        sum / found.max(1) as f64
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn analyze_nnratio(ctx: &Ctx, dataset: &Dataset, subjects: &GeometrySubjects) -> Result<()> {
    let (train_inputs, _) = dataset.gather(Split::Train);
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for &i in &subjects.pairs {
        let ratio = nn_distance_ratio(&train_inputs, &subjects.inputs[i], &subjects.batch.adversarial[i])?;
        ratios.push(ratio);
        rows.push(vec![i.to_string(), fmt(ratio)]);
    }
    let path = ctx.csv("nn_ratio.csv")?;
    write_csv(&path, &["sample", "ratio"], &rows)?;
    write_json(
        &ctx.csv("nn_ratio.params.json")?,
        &serde_json::json!({
            "pairs": subjects.pairs.len(),
            "reference": "nearest training input to the clean sample",
        }),
    )?;
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    println!(
        "nn ratio mean {:.4}, median {:.4} over {} pairs",
        mean,
        sorted[sorted.len() / 2],
        ratios.len()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn analyze_roc(ctx: &Ctx, model: &Classifier, subjects: &GeometrySubjects) -> Result<()> {
    let stats = ctx.stats()?;
    let clean = z_scores_batch(model, &subjects.inputs, 0, &stats)?;
    let adv = z_scores_batch(model, &subjects.batch.adversarial, 0, &stats)?;
    let adv_successful = successful_records(&adv, &subjects.batch.success);
    let adv_labels: Vec<usize> = subjects
        .batch
        .source_labels
        .iter()
        .zip(&subjects.batch.success)
        .filter(|(_, &s)| s)
        .map(|(&l, _)| l)
        .collect();
    let roc = roc_sweep(
        &stats,
        &clean,
        &subjects.labels,
        &adv_successful,
        &adv_labels,
        &ctx.config.odds.roc_levels,
    )?;
    let path = ctx.csv("roc.csv")?;
    write_csv(
        &path,
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
        &ctx.csv("roc.params.json")?,
        &serde_json::json!({
            "levels": ctx.config.odds.roc_levels,
            "clean_records": clean.len(),
            "adversarial_records": adv_successful.len(),
            "adversarial_filter": "successful pgd_linf test attacks only",
        }),
    )?;
    println!("roc auc {:.4} over {} levels", auc(&roc), roc.len());
    println!("wrote {}", path.display());
    Ok(())
}

fn analyze_preimage(ctx: &Ctx, model: &Classifier, subjects: &GeometrySubjects) -> Result<()> {
    let mut rows = Vec::new();
    let mut improved = 0usize;
    for &i in &subjects.pairs {
        let x = &subjects.inputs[i];
        let x_adv = &subjects.batch.adversarial[i];
        let target = Tensor::vector(model.features(x)?);
        let search = preimage_search(
            model,
            x_adv,
            &target,
            ctx.config.eval.preimage_steps,
            ctx.config.eval.preimage_step_size,
        )?;
        let delta_phi = target.sub(&Tensor::vector(model.features(x_adv)?))?;
        let step = preimage_step(model, x_adv, &delta_phi, ctx.config.eval.preimage_step_size)?;
        improved += usize::from(step.improvement > 0.0);
        rows.push(vec![
            i.to_string(),
            fmt(search.improvement()),
            fmt(step.improvement),
            u8::from(step.zero_gradient).to_string(),
        ]);
    }
    let path = ctx.csv("preimage.csv")?;
    write_csv(
        &path,
        &["sample", "search_improvement", "step_improvement", "zero_gradient"],
        &rows,
    )?;
    write_json(
        &ctx.csv("preimage.params.json")?,
        &serde_json::json!({
            "pairs": subjects.pairs.len(),
            "steps": ctx.config.eval.preimage_steps,
            "step_size": ctx.config.eval.preimage_step_size,
            "target": "features of the clean counterpart",
        }),
    )?;
    println!(
        "single-step improvement positive on {} of {} pairs",
        improved,
        subjects.pairs.len()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep(ctx: &Ctx, what: &SweepCmd) -> Result<()> {
    let dataset = ctx.dataset()?;
    let model = ctx.model()?;
    match what {
        SweepCmd::Epsilon => sweep_epsilon(ctx, &dataset, &model),
        SweepCmd::Bernoulli { q } => sweep_bernoulli(ctx, &dataset, &model, q),
        SweepCmd::Iterations { grid } => sweep_iterations(ctx, &dataset, &model, grid),
    }
}

fn sweep_slice(ctx: &Ctx, dataset: &Dataset) -> (Vec<Tensor>, Vec<usize>) {
    let (mut inputs, mut labels) = ctx.split_data(dataset, Split::Test);
    inputs.truncate(ctx.config.eval.sweep_samples);
    labels.truncate(ctx.config.eval.sweep_samples);
    (inputs, labels)
}

fn sweep_epsilon(ctx: &Ctx, dataset: &Dataset, model: &Classifier) -> Result<()> {
    let stats = ctx.stats()?;
    let (inputs, labels) = sweep_slice(ctx, dataset);
    let cfg = &ctx.config.attack;
    let mut rows = Vec::new();
    for (k, &eps) in cfg.epsilon_grid.iter().enumerate() {
        let spec = PgdSpec::new(
            AttackNorm::LInf,
            eps,
            cfg.iterations,
            mix_seed(cfg.seed, 100 + k as u64),
        );
        let outcomes = pgd_attack_batch(model, &inputs, &labels, &spec)?;
        let batch = batch_from_outcomes("pgd_linf", serde_json::to_value(&spec)?, outcomes, &labels);
        let records = z_scores_batch(model, &batch.adversarial, 0, &stats)?;
        let detection = masked_detection_rate(&records, &batch.success, &stats)?;
        println!(
            "epsilon {eps}: success {:.3}, undefended accuracy {:.3}, detection {}",
            batch.success_rate(),
            accuracy(model, &batch.adversarial, &labels)?,
            fmt_opt(detection)
        );
        rows.push(vec![
            fmt(eps),
            fmt(batch.success_rate()),
            fmt(accuracy(model, &batch.adversarial, &labels)?),
            fmt_opt(detection),
        ]);
    }
    let path = ctx.csv("sweep_epsilon.csv")?;
    write_csv(
        &path,
        &["epsilon", "success_rate", "undefended_accuracy", "detection_rate"],
        &rows,
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep_bernoulli(ctx: &Ctx, dataset: &Dataset, model: &Classifier, qs: &[f64]) -> Result<()> {
    let stats = ctx.stats()?;
    let batch = ctx.batch(AttackKindArg::PgdLinf, SplitArg::Test)?;
    let (inputs, labels) = ctx.split_data(dataset, Split::Test);
    let n = ctx
        .config
        .eval
        .sweep_samples
        .min(batch.adversarial.len())
        .min(inputs.len());
    let mut rows = Vec::new();
    for (k, &q) in qs.iter().enumerate() {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidParameter(format!(
                "bernoulli q must be in [0, 1], got {q}"
            )));
        }
        let mut rng =
            ChaCha12Rng::seed_from_u64(mix_seed(mix_seed(ctx.config.attack.seed, 0xBE), k as u64));
        let mut thinned = Vec::with_capacity(n);
        for (x, adv) in inputs.iter().zip(&batch.adversarial).take(n) {
            // Exact endpoints: q=0 is the clean input, q=1 the full attack.
            let point = if q <= 0.0 {
                x.clone()
            } else if q >= 1.0 {
                adv.clone()
            } else {
                let delta = adv.sub(x)?;
                let kept: Vec<f64> = delta
                    .data()
                    .iter()
                    .map(|&d| if rng.random::<f64>() < q { d } else { 0.0 })
                    .collect();
                x.add(&Tensor::new(x.shape().to_vec(), kept)?)?
            };
            thinned.push(point);
        }
        let success: Vec<bool> = thinned
            .iter()
            .zip(&labels)
            .map(|(p, &l)| model.predict(p).map(|pred| pred != l))
            .collect::<Result<_>>()?;
        let records = z_scores_batch(model, &thinned, 0, &stats)?;
        let success_rate =
            success.iter().filter(|&&s| s).count() as f64 / success.len().max(1) as f64;
        let detection = masked_detection_rate(&records, &success, &stats)?;
        let corrected = corrected_accuracy(&records, &labels[..n], &stats)?;
        println!(
            "q {q}: success {success_rate:.3}, detection {}, corrected accuracy {corrected:.3}",
            fmt_opt(detection)
        );
        rows.push(vec![
            fmt(q),
            fmt(success_rate),
            fmt_opt(detection),
            fmt(corrected),
        ]);
    }
    let path = ctx.csv("sweep_bernoulli.csv")?;
    write_csv(
        &path,
        &["q", "success_rate", "detection_rate", "corrected_accuracy"],
        &rows,
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep_iterations(
    ctx: &Ctx,
    dataset: &Dataset,
    model: &Classifier,
    grid: &[usize],
) -> Result<()> {
    let stats = ctx.stats()?;
    let (inputs, labels) = sweep_slice(ctx, dataset);
    let epsilon = ctx.epsilon(model, dataset)?;
    let cfg = &ctx.config.attack;
    let mut rows = Vec::new();
    for &iterations in grid {
        if iterations == 0 {
            return Err(Error::InvalidParameter(
                "iteration counts must be positive".into(),
            ));
        }
        let spec = PgdSpec::new(
            AttackNorm::LInf,
            epsilon,
            iterations,
            mix_seed(cfg.seed, 3),
        );
        let outcomes = pgd_attack_batch(model, &inputs, &labels, &spec)?;
        let batch = batch_from_outcomes("pgd_linf", serde_json::to_value(&spec)?, outcomes, &labels);
        let records = z_scores_batch(model, &batch.adversarial, 0, &stats)?;
        let detection = masked_detection_rate(&records, &batch.success, &stats)?;
        println!(
            "iterations {iterations}: success {:.3}, detection {}",
            batch.success_rate(),
            fmt_opt(detection)
        );
        rows.push(vec![
            iterations.to_string(),
            fmt(batch.success_rate()),
            fmt_opt(detection),
        ]);
    }
    let path = ctx.csv("sweep_iterations.csv")?;
    write_csv(&path, &["iterations", "success_rate", "detection_rate"], &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_all(ctx: &Ctx) -> Result<()> {
    let report = run_pipeline(&ctx.config, &ctx.root)?;
    println!(
        "epsilon {}, clean test accuracy {:.3}",
        report.epsilon, report.clean_test_accuracy
    );
    for a in &report.attacks {
        println!(
            "{}: success {:.3}, undefended accuracy {:.3}, detection {}",
            a.kind,
            a.success_rate,
            a.undefended_accuracy,
            fmt_opt(a.detection_rate)
        );
    }
    println!(
        "target fpr {} -> test fpr {}",
        report.detection.target_fpr, report.detection.test_fpr
    );
    println!(
        "corrected adversarial accuracy: argmax {:.3}, meta {:.3}",
        report.correction.argmax_adversarial_accuracy,
        report.correction.meta_adversarial_accuracy
    );
    println!("wrote {}", ctx.root.join("summary.json").display());
    Ok(())
}
