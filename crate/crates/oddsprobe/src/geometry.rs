//! Feature-space geometry diagnostics.
//!
//! These probe the classifier as a function on all of R^d — points along
//! rays and grid planes are evaluated as-is, without clamping to the input
//! cube, so the profiles describe the decision geometry rather than the
//! data domain. The one exception is preimage search, whose iterates are
//! clamped because its result must be a feasible input.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::{l2_distance, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Alignment against w_to - w_from for a fixed class pair; the natural
    /// choice when the ray follows a known adversarial flip.
    Pair { from: usize, to: usize },
    /// Largest alignment over all candidate classes z != origin class; the
    /// fair yardstick for arbitrary (e.g. random) directions.
    MaxAny,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RayStep {
    pub t: f64,
    /// L2 distance of features from the origin's features.
    pub feature_distance: f64,
    /// Inner product of the feature displacement with the weight-difference
    /// vector; because the logit layer is exactly linear this is the induced
    /// log-odds change, so it is comparable across directions only at
    /// matched displacement norm.
    pub alignment: f64,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RayProfile {
    pub mode: AlignmentMode,
    pub origin_class: usize,
    pub steps: Vec<RayStep>,
}

/// Profiles features, alignment, and class posture along origin + t * direction.
pub fn feature_ray_profile(
    model: &Classifier,
    origin: &Tensor,
    direction: &Tensor,
    ts: &[f64],
    mode: AlignmentMode,
) -> Result<RayProfile> {
    if direction.shape() != origin.shape() {
        return Err(Error::shape(
            "ray direction",
            format!("{:?} vs origin {:?}", direction.shape(), origin.shape()),
        ));
    }
    if ts.is_empty() {
        return Err(Error::InvalidParameter("ray needs at least one step".into()));
    }
    let classes = model.num_classes();
    if let AlignmentMode::Pair { from, to } = mode {
        if from >= classes || to >= classes {
            return Err(Error::ClassOutOfRange {
                class: from.max(to),
                num_classes: classes,
            });
        }
    }
    let origin_features = Tensor::vector(model.features(origin)?);
    let origin_class = model.predict(origin)?;

    let mut steps = Vec::with_capacity(ts.len());
    for &t in ts {
        let point = origin.add_scaled(direction, t)?;
        let (logits, features) = model.logits_and_features(&point)?;
        let displacement = Tensor::vector(features).sub(&origin_features)?;
        let alignment = match mode {
            AlignmentMode::Pair { from, to } => {
                displacement.dot(&Tensor::vector(model.weight_diff(from, to)?))?
            }
            AlignmentMode::MaxAny => {
                let mut best = f64::NEG_INFINITY;
                for z in 0..classes {
                    if z == origin_class {
                        continue;
                    }
                    let diff = Tensor::vector(model.weight_diff(origin_class, z)?);
                    best = best.max(displacement.dot(&diff)?);
                }
                best
            }
        };
        let mut predicted = 0;
        for (i, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[predicted] {
                predicted = i;
            }
        }
        steps.push(RayStep {
            t,
            feature_distance: displacement.l2_norm(),
            alignment,
            predicted,
            probabilities: crate::graph::softmax(&logits),
        });
    }
    Ok(RayProfile {
        mode,
        origin_class,
        steps,
    })
}

/// Inner product between the feature displacement of an attack and the
/// weight-difference row it exploited: <w_z - w_y, phi(x_adv) - phi(x)> with
/// y predicted at x and z at x_adv. Because the last layer is exactly
/// linear, this equals the log-odds change, so it must be positive whenever
/// the prediction actually flipped.
pub fn weight_alignment(model: &Classifier, x: &Tensor, x_adv: &Tensor) -> Result<f64> {
    let y = model.predict(x)?;
    let z = model.predict(x_adv)?;
    let displacement =
        Tensor::vector(model.features(x_adv)?).sub(&Tensor::vector(model.features(x)?))?;
    Tensor::vector(model.weight_diff(y, z)?).dot(&displacement)
}

/// Softmax rows along origin + t * direction; a view of the full profile for
/// callers that only need class posture.
pub fn softmax_ray(
    model: &Classifier,
    origin: &Tensor,
    direction: &Tensor,
    ts: &[f64],
) -> Result<RayProfile> {
    feature_ray_profile(model, origin, direction, ts, AlignmentMode::MaxAny)
}

#[derive(Clone, Debug)]
pub struct ConeGrid {
    pub natural_class: usize,
    /// Coordinates along the sampled orthogonal axis.
    pub s_grid: Vec<f64>,
    /// Coordinates along the adversarial delta.
    pub t_grid: Vec<f64>,
    /// values[ti][si] = softmax probability of the natural class at
    /// origin + t * delta + s * n, averaged over the orthogonal draws n.
    pub values: Vec<Vec<f64>>,
    pub draws: usize,
    /// The sampled orthogonal vectors, each rescaled to the delta's norm.
    pub orthogonals: Vec<Tensor>,
}

/// Averaged natural-class posture on the plane spanned by an adversarial
/// delta and random orthogonal directions: gaussian vectors are projected
/// orthogonal to the delta, rescaled to its norm, and the softmax of the
/// origin's class is averaged over those draws at every (t, s) grid point.
pub fn cone_grid(
    model: &Classifier,
    origin: &Tensor,
    delta: &Tensor,
    s_grid: &[f64],
    t_grid: &[f64],
    draws: usize,
    seed: u64,
) -> Result<ConeGrid> {
    if delta.shape() != origin.shape() {
        return Err(Error::shape(
            "cone delta",
            "delta shape must match the origin",
        ));
    }
    let delta_norm = delta.l2_norm();
    if delta_norm == 0.0 {
        return Err(Error::InvalidParameter("cone delta must be nonzero".into()));
    }
    if draws == 0 {
        return Err(Error::InvalidParameter("cone grid needs at least one draw".into()));
    }
    if s_grid.is_empty() || t_grid.is_empty() {
        return Err(Error::InvalidParameter("cone grids must not be empty".into()));
    }
    let natural_class = model.predict(origin)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut orthogonals = Vec::with_capacity(draws);
    while orthogonals.len() < draws {
        let raw: Vec<f64> = (0..origin.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut n = Tensor::vector(raw);
        let coeff = n.dot(delta)? / (delta_norm * delta_norm);
        n = n.add_scaled(delta, -coeff)?;
        let norm = n.l2_norm();
        if norm < 1e-9 {
            continue; // essentially impossible; redraw
        }
        orthogonals.push(n.scale(delta_norm / norm));
    }

    let mut values = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let row_base = origin.add_scaled(delta, t)?;
        let mut row = Vec::with_capacity(s_grid.len());
        for &s in s_grid {
            let mut total = 0.0;
            for n in &orthogonals {
                let point = row_base.add_scaled(n, s)?;
                let probs = crate::graph::softmax(&model.logits(&point)?);
                total += probs[natural_class];
            }
            row.push(total / draws as f64);
        }
        values.push(row);
    }
    Ok(ConeGrid {
        natural_class,
        s_grid: s_grid.to_vec(),
        t_grid: t_grid.to_vec(),
        values,
        draws,
        orthogonals,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Crossover {
    /// Interpolation parameter in [0, 1] where the origin class loses.
    pub t: f64,
    pub iterations: usize,
}

/// Bisects along the segment x -> x_adv for the point where the prediction
/// first leaves the origin's class, down to a window of width `tol`.
pub fn logit_crossover(
    model: &Classifier,
    x: &Tensor,
    x_adv: &Tensor,
    tol: f64,
) -> Result<Crossover> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "bisection tolerance must be in (0, 1), got {tol}"
        )));
    }
    let y = model.predict(x)?;
    let margin = |t: f64| -> Result<f64> {
        let point = x.add_scaled(&x_adv.sub(x)?, t)?;
        let logits = model.logits(&point)?;
        let mut best_other = f64::NEG_INFINITY;
        for (i, &l) in logits.iter().enumerate() {
            if i != y {
                best_other = best_other.max(l);
            }
        }
        Ok(logits[y] - best_other)
    };
    if margin(1.0)? > 0.0 {
        return Err(Error::NoCrossover(format!(
            "both endpoints are classified {y}"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut iterations = 0;
    while hi - lo > tol && iterations < 200 {
        let mid = 0.5 * (lo + hi);
        if margin(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    Ok(Crossover {
        t: 0.5 * (lo + hi),
        iterations,
    })
}

/// d(x, x_adv) / d(x, nearest training point), both in input L2.
pub fn nn_distance_ratio(train: &[Tensor], x: &Tensor, x_adv: &Tensor) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("nearest-neighbour ratio needs training points".into()));
    }
    let mut nearest = f64::INFINITY;
    let mut nearest_index = 0;
    for (i, t) in train.iter().enumerate() {
        let d = l2_distance(x, t)?;
        if d < nearest {
            nearest = d;
            nearest_index = i;
        }
    }
    if nearest == 0.0 {
        return Err(Error::ZeroNnDistance {
            index: nearest_index,
        });
    }
    Ok(l2_distance(x, x_adv)? / nearest)
}

#[derive(Clone, Debug)]
pub struct PreimageResult {
    pub x: Tensor,
    /// 0.5 * ||phi(x) - target||^2 per accepted iterate, starting point first.
    pub objective: Vec<f64>,
}

impl PreimageResult {
    pub fn improvement(&self) -> f64 {
        self.objective[0] - *self.objective.last().expect("nonempty trace")
    }
}

/// Gradient descent in input space toward a feature-space target, with
/// step halving (5 tries per iteration) and clamped iterates. Stops early
/// once no halved step improves the objective.
pub fn preimage_search(
    model: &Classifier,
    start: &Tensor,
    target_features: &Tensor,
    steps: usize,
    initial_step: f64,
) -> Result<PreimageResult> {
    if !(initial_step > 0.0 && initial_step.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "preimage step must be positive, got {initial_step}"
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("preimage search needs steps".into()));
    }
    let objective_of = |x: &Tensor| -> Result<(f64, Tensor)> {
        let residual = Tensor::vector(model.features(x)?).sub(target_features)?;
        Ok((0.5 * residual.dot(&residual)?, residual))
    };
    let mut x = start.clamp01();
    let (mut objective, mut residual) = objective_of(&x)?;
    let mut trace = vec![objective];
    'outer: for _ in 0..steps {
        let (_, grad) = model.feature_proj_grad_input(&x, &residual)?;
        let mut step = initial_step;
        for _ in 0..5 {
            let candidate = x.add_scaled(&grad, -step)?.clamp01();
            let (cand_obj, cand_res) = objective_of(&candidate)?;
            if cand_obj < objective {
                x = candidate;
                objective = cand_obj;
                residual = cand_res;
                trace.push(objective);
                continue 'outer;
            }
            step *= 0.5;
        }
        break;
    }
    Ok(PreimageResult {
        x,
        objective: trace,
    })
}

#[derive(Clone, Debug)]
pub struct PreimageStep {
    pub x: Tensor,
    /// How much of the requested feature move one step realized:
    /// ||delta_phi|| - ||phi(x) + delta_phi - phi(x')||.
    pub improvement: f64,
    pub zero_gradient: bool,
}

/// One unclamped pullback step x' = x + step * J^T delta_phi toward a
/// requested feature displacement. A vanishing pullback (features constant
/// at x) is reported via the flag, with x returned unchanged.
pub fn preimage_step(
    model: &Classifier,
    x: &Tensor,
    delta_phi: &Tensor,
    step: f64,
) -> Result<PreimageStep> {
    if !(step >= 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "preimage step must be nonnegative, got {step}"
        )));
    }
    let (_, grad) = model.feature_proj_grad_input(x, delta_phi)?;
    if grad.l2_norm() == 0.0 {
        return Ok(PreimageStep {
            x: x.clone(),
            improvement: 0.0,
            zero_gradient: true,
        });
    }
    let target = Tensor::vector(model.features(x)?).add(delta_phi)?;
    let stepped = x.add_scaled(&grad, step)?;
    let achieved = Tensor::vector(model.features(&stepped)?);
    let improvement = delta_phi.l2_norm() - l2_distance(&achieved, &target)?;
    Ok(PreimageStep {
        x: stepped,
        improvement,
        zero_gradient: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelArch, OUTPUT_WEIGHTS};
    use std::collections::BTreeMap;

    fn two_class_linear() -> Classifier {
        let arch = ModelArch::Linear {
            input_dim: 2,
            classes: 2,
        };
        let mut params = BTreeMap::new();
        params.insert(
            OUTPUT_WEIGHTS.to_string(),
            Tensor::new(vec![2, 2], vec![3.0, -1.0, -3.0, 1.0]).unwrap(),
        );
        Classifier::from_params(arch, params).unwrap()
    }

    fn mlp() -> Classifier {
        Classifier::init(
            ModelArch::Mlp {
                input_dim: 4,
                hidden: vec![8, 8],
                classes: 3,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn crossover_matches_linear_closed_form() {
        let model = two_class_linear();
        let x = Tensor::vector(vec![0.9, 0.1]);
        let x_adv = Tensor::vector(vec![0.1, 0.9]);
        // Margin f_0 - f_1 = 6 x0 - 2 x1 interpolates linearly from g0 to g1;
        // the zero sits at t* = g0 / (g0 - g1).
        let g = |p: &Tensor| 6.0 * p.data()[0] - 2.0 * p.data()[1];
        let expected = g(&x) / (g(&x) - g(&x_adv));
        let found = logit_crossover(&model, &x, &x_adv, 1e-4).unwrap();
        assert!(
            (found.t - expected).abs() <= 1e-4,
            "bisection {} vs closed form {expected}",
            found.t
        );
    }

    #[test]
    fn crossover_requires_a_flip() {
        let model = two_class_linear();
        let x = Tensor::vector(vec![0.9, 0.1]);
        let near = Tensor::vector(vec![0.8, 0.15]);
        match logit_crossover(&model, &x, &near, 1e-4) {
            Err(Error::NoCrossover(_)) => {}
            other => panic!("expected NoCrossover, got {other:?}"),
        }
    }

    #[test]
    fn alignment_is_positive_exactly_when_prediction_flips() {
        let model = two_class_linear();
        let x = Tensor::vector(vec![0.9, 0.1]);
        let x_adv = Tensor::vector(vec![0.1, 0.9]);
        assert_ne!(model.predict(&x).unwrap(), model.predict(&x_adv).unwrap());
        let a = weight_alignment(&model, &x, &x_adv).unwrap();
        assert!(a > 0.0, "alignment {a}");
        // Identity features: the inner product is exactly the log-odds change.
        let by_hand = (6.0f64 * 0.1 - 2.0 * 0.9) - (6.0 * 0.9 - 2.0 * 0.1);
        assert!((a - -by_hand).abs() < 1e-12);
    }

    #[test]
    fn ray_profile_is_linear_for_identity_features() {
        let model = two_class_linear();
        let origin = Tensor::vector(vec![0.5, 0.5]);
        let direction = Tensor::vector(vec![0.3, -0.4]);
        let profile = feature_ray_profile(
            &model,
            &origin,
            &direction,
            &[0.0, 0.5, 1.0, 2.0],
            AlignmentMode::MaxAny,
        )
        .unwrap();
        assert_eq!(profile.steps.len(), 4);
        assert_eq!(profile.steps[0].feature_distance, 0.0);
        let d1 = profile.steps[1].feature_distance;
        let d2 = profile.steps[2].feature_distance;
        let d4 = profile.steps[3].feature_distance;
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
        assert!((d4 - 4.0 * d1).abs() < 1e-12);
        for step in &profile.steps {
            let total: f64 = step.probabilities.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cone_grid_center_matches_plain_softmax() {
        let model = mlp();
        let origin = Tensor::vector(vec![0.4, 0.6, 0.2, 0.8]);
        let delta = Tensor::vector(vec![0.2, -0.1, 0.15, -0.05]);
        let s_grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let t_grid = [-1.0, 0.0, 1.0, 2.0];
        let grid = cone_grid(&model, &origin, &delta, &s_grid, &t_grid, 6, 7).unwrap();
        assert_eq!(grid.values.len(), t_grid.len());
        assert_eq!(grid.values[0].len(), s_grid.len());
        let y = model.predict(&origin).unwrap();
        assert_eq!(grid.natural_class, y);
        // At s = 0 every draw collapses onto the ray, so the average is the
        // plain softmax there.
        let probs = crate::graph::softmax(&model.logits(&origin).unwrap());
        assert!((grid.values[1][2] - probs[y]).abs() < 1e-12);
        for row in &grid.values {
            for &v in row {
                assert!((0.0..=1.0).contains(&v), "probability {v} out of range");
            }
        }
    }

    #[test]
    fn cone_draws_are_orthogonal_and_norm_matched() {
        let model = mlp();
        let origin = Tensor::vector(vec![0.4, 0.6, 0.2, 0.8]);
        let delta = Tensor::vector(vec![0.2, -0.1, 0.15, -0.05]);
        let grid = cone_grid(&model, &origin, &delta, &[0.0], &[0.0], 8, 21).unwrap();
        assert_eq!(grid.orthogonals.len(), 8);
        let dn = delta.l2_norm();
        for n in &grid.orthogonals {
            assert!((n.l2_norm() - dn).abs() < 1e-9 * dn);
            let residual = n.dot(&delta).unwrap().abs() / (dn * dn);
            assert!(residual < 1e-6, "orthogonality residual {residual}");
        }
    }

    #[test]
    fn softmax_ray_starts_at_the_origin_posture() {
        let model = mlp();
        let origin = Tensor::vector(vec![0.3, 0.7, 0.5, 0.2]);
        let direction = Tensor::vector(vec![0.5, -0.2, 0.1, 0.4]);
        let ray = softmax_ray(&model, &origin, &direction, &[0.0, 0.5, 1.0]).unwrap();
        let probs = crate::graph::softmax(&model.logits(&origin).unwrap());
        for (a, b) in ray.steps[0].probabilities.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12);
        }
        for step in &ray.steps {
            let total: f64 = step.probabilities.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nn_ratio_matches_hand_distances() {
        let train = vec![
            Tensor::vector(vec![0.5, 0.5]),
            Tensor::vector(vec![0.9, 0.9]),
        ];
        let x = Tensor::vector(vec![0.45, 0.5]);
        let x_adv = Tensor::vector(vec![0.45, 0.51]);
        let ratio = nn_distance_ratio(&train, &x, &x_adv).unwrap();
        assert!((ratio - 0.01 / 0.05).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn nn_ratio_rejects_duplicate_of_training_point() {
        let train = vec![Tensor::vector(vec![0.5, 0.5])];
        let x = Tensor::vector(vec![0.5, 0.5]);
        match nn_distance_ratio(&train, &x, &x) {
            Err(Error::ZeroNnDistance { index: 0 }) => {}
            other => panic!("expected ZeroNnDistance, got {other:?}"),
        }
    }

    #[test]
    fn preimage_search_reduces_feature_distance() {
        let model = mlp();
        let clean = Tensor::vector(vec![0.3, 0.7, 0.5, 0.2]);
        let perturbed = Tensor::vector(vec![0.45, 0.55, 0.65, 0.05]);
        let target = Tensor::vector(model.features(&clean).unwrap());
        let result = preimage_search(&model, &perturbed, &target, 40, 0.5).unwrap();
        assert!(result.improvement() > 0.0);
        for w in result.objective.windows(2) {
            assert!(w[1] < w[0], "objective must strictly decrease");
        }
        let feat = |p: &Tensor| Tensor::vector(model.features(p).unwrap());
        let before = l2_distance(&feat(&perturbed), &target).unwrap();
        let after = l2_distance(&feat(&result.x), &target).unwrap();
        assert!(after < before);
    }

    #[test]
    fn preimage_search_stops_at_a_perfect_start() {
        let model = mlp();
        let start = Tensor::vector(vec![0.3, 0.7, 0.5, 0.2]);
        let target = Tensor::vector(model.features(&start).unwrap());
        let result = preimage_search(&model, &start, &target, 20, 0.5).unwrap();
        assert_eq!(result.objective[0], 0.0);
        assert_eq!(result.improvement(), 0.0);
    }

    #[test]
    fn preimage_step_is_exact_for_identity_features() {
        let model = two_class_linear();
        let x = Tensor::vector(vec![0.4, 0.6]);
        let delta_phi = Tensor::vector(vec![0.3, -0.2]);
        for &step in &[0.0, 0.25, 0.5, 1.0] {
            let out = preimage_step(&model, &x, &delta_phi, step).unwrap();
            assert!(!out.zero_gradient);
            // phi is the identity here, so the step moves x by step * delta_phi
            // and closes exactly that share of the requested distance.
            let expect = x.add_scaled(&delta_phi, step).unwrap();
            for (a, b) in out.x.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(
                (out.improvement - step * delta_phi.l2_norm()).abs() < 1e-12,
                "step {step}: improvement {}",
                out.improvement
            );
        }
    }

    #[test]
    fn preimage_step_flags_a_constant_feature_map() {
        let arch = ModelArch::Mlp {
            input_dim: 2,
            hidden: vec![3],
            classes: 2,
        };
        let mut params = BTreeMap::new();
        params.insert("w0".to_string(), Tensor::new(vec![3, 3], vec![0.0; 9]).unwrap());
        params.insert(
            OUTPUT_WEIGHTS.to_string(),
            Tensor::new(vec![2, 4], vec![0.1; 8]).unwrap(),
        );
        let model = Classifier::from_params(arch, params).unwrap();
        let x = Tensor::vector(vec![0.4, 0.6]);
        let delta_phi = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]);
        let out = preimage_step(&model, &x, &delta_phi, 0.5).unwrap();
        assert!(out.zero_gradient);
        assert_eq!(out.improvement, 0.0);
        assert_eq!(out.x.data(), x.data());
    }
}
