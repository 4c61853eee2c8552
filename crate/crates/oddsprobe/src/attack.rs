//! Gradient attacks against a classifier.
//!
//! All attacks operate inside the input domain [0,1]^D. PGD variants stay in
//! an epsilon-ball around the clean input; CW trades L2 distortion against a
//! hinge on the logit margin; DeepFool estimates the distance to the nearest
//! decision boundary. Per-sample randomness is derived from (spec seed,
//! sample index), so batch results do not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::graph::Graph;
use crate::model::{Classifier, INPUT_X};
use crate::noise::{mix_seed, NoiseSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackNorm {
    LInf,
    L2,
}

impl AttackNorm {
    pub fn label(self) -> &'static str {
        match self {
            AttackNorm::LInf => "linf",
            AttackNorm::L2 => "l2",
        }
    }
}

/// Projection onto the epsilon-ball around `center` intersected with
/// [0,1]^D. `center` itself must lie in the domain. Projecting onto the ball
/// first and the box second lands in both sets (clamping toward a box that
/// contains the center never grows any coordinate distance), and the
/// composition is idempotent.
pub fn project_ball(point: &Tensor, center: &Tensor, epsilon: f64, norm: AttackNorm) -> Result<Tensor> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "projection radius must be positive, got {epsilon}"
        )));
    }
    if point.shape() != center.shape() {
        return Err(Error::shape(
            "project_ball",
            format!("{:?} vs {:?}", point.shape(), center.shape()),
        ));
    }
    debug_assert!(center.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let data = match norm {
        AttackNorm::LInf => point
            .data()
            .iter()
            .zip(center.data())
            .map(|(&p, &c)| p.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0))
            .collect(),
        AttackNorm::L2 => {
            let delta = point.sub(center)?;
            let dist = delta.l2_norm();
            let factor = if dist > epsilon {
                // Shrink a hair below the boundary so re-projection is a
                // bitwise no-op.
                (epsilon / dist) * (1.0 - 1e-12)
            } else {
                1.0
            };
            center
                .data()
                .iter()
                .zip(delta.data())
                .map(|(&c, &d)| (c + factor * d).clamp(0.0, 1.0))
                .collect()
        }
    };
    Tensor::new(point.shape().to_vec(), data)
}

/// PGD configuration. `alpha: None` uses the conventional 2.5 * epsilon /
/// iterations step so the ball can be traversed a few times over.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PgdSpec {
    pub norm: AttackNorm,
    pub epsilon: f64,
    pub iterations: usize,
    pub alpha: Option<f64>,
    pub random_init: bool,
    /// None: untargeted, ascend the loss of the model's own prediction.
    /// Some(t): descend the loss toward class t.
    pub targeted: Option<usize>,
    pub seed: u64,
}

impl PgdSpec {
    pub fn new(norm: AttackNorm, epsilon: f64, iterations: usize, seed: u64) -> Self {
        PgdSpec {
            norm,
            epsilon,
            iterations,
            alpha: None,
            random_init: true,
            targeted: None,
            seed,
        }
    }

    pub fn effective_alpha(&self) -> f64 {
        self.alpha
            .unwrap_or(2.5 * self.epsilon / self.iterations.max(1) as f64)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "attack epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter(
                "attack needs at least one iteration".into(),
            ));
        }
        if let Some(alpha) = self.alpha {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "attack alpha must be positive, got {alpha}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub x_adv: Tensor,
    pub success: bool,
    /// The loss gradient vanished identically at some iterate; the attack
    /// stopped there (gradient masking diagnostic, not an error).
    pub degenerate_gradient: bool,
}

fn sign_step(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn random_init_point(
    x: &Tensor,
    spec: &PgdSpec,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let len = x.len();
    let raw: Vec<f64> = match spec.norm {
        AttackNorm::LInf => x
            .data()
            .iter()
            .map(|&v| v + rng.random_range(-spec.epsilon..=spec.epsilon))
            .collect(),
        AttackNorm::L2 => {
            let dir: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
            let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let radius = spec.epsilon * rng.random::<f64>().powf(1.0 / len as f64);
            let factor = if norm > 0.0 { radius / norm } else { 0.0 };
            x.data()
                .iter()
                .zip(&dir)
                .map(|(&v, &d)| v + factor * d)
                .collect()
        }
    };
    project_ball(
        &Tensor::new(shape, raw).map_err(|_| Error::NonFinite("pgd random init".into()))?,
        x,
        spec.epsilon,
        spec.norm,
    )
}

/// Shared PGD loop over an arbitrary loss-gradient oracle.
fn pgd_core(
    x: &Tensor,
    spec: &PgdSpec,
    ascend: bool,
    grad_fn: &(dyn Fn(&Tensor) -> Result<Tensor> + Sync),
) -> Result<(Tensor, bool)> {
    spec.validate()?;
    let alpha = spec.effective_alpha();
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut current = if spec.random_init {
        random_init_point(x, spec, &mut rng)?
    } else {
        x.clone()
    };
    let direction = if ascend { 1.0 } else { -1.0 };
    let mut degenerate = false;
    for _ in 0..spec.iterations {
        let grad = grad_fn(&current)?;
        if grad.data().iter().all(|&g| g == 0.0) {
            degenerate = true;
            break;
        }
        let stepped = match spec.norm {
            AttackNorm::LInf => {
                current.map_with(&grad, |v, g| v + direction * alpha * sign_step(g))?
            }
            AttackNorm::L2 => {
                let norm = grad.l2_norm();
                current.add_scaled(&grad, direction * alpha / norm)?
            }
        };
        current = project_ball(&stepped, x, spec.epsilon, spec.norm)?;
    }
    Ok((current, degenerate))
}

fn pgd_success(model: &Classifier, x_adv: &Tensor, label: usize, spec: &PgdSpec) -> Result<bool> {
    let predicted = model.predict(x_adv)?;
    Ok(match spec.targeted {
        Some(target) => predicted == target,
        None => predicted != label,
    })
}

/// Projected gradient descent. `label` is only used to judge success; the
/// untargeted loss always ascends the model's own prediction at the clean
/// point, so the attack does not need ground truth.
pub fn pgd_attack(
    model: &Classifier,
    x: &Tensor,
    label: usize,
    spec: &PgdSpec,
) -> Result<AttackOutcome> {
    let loss_label = match spec.targeted {
        Some(target) => target,
        None => model.predict(x)?,
    };
    let ascend = spec.targeted.is_none();
    let grad_fn = |point: &Tensor| -> Result<Tensor> {
        let (_, grad) = model.loss_grad_input(point, loss_label)?;
        Ok(grad)
    };
    let (x_adv, degenerate_gradient) = pgd_core(x, spec, ascend, &grad_fn)?;
    Ok(AttackOutcome {
        success: pgd_success(model, &x_adv, label, spec)?,
        x_adv,
        degenerate_gradient,
    })
}

/// Expectation-over-transformation PGD: each step averages the loss gradient
/// over draws of the defender's noise applied through the domain clamp. With
/// one draw of zero noise this reduces bitwise to plain PGD under the same
/// seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EotSpec {
    pub pgd: PgdSpec,
    /// Noise model being anticipated; `samples_per_point` is the number of
    /// draws averaged per gradient step.
    pub noise: NoiseSpec,
}

pub fn eot_pgd_attack(
    model: &Classifier,
    x: &Tensor,
    label: usize,
    spec: &EotSpec,
) -> Result<AttackOutcome> {
    let loss_label = match spec.pgd.targeted {
        Some(target) => target,
        None => model.predict(x)?,
    };
    let ascend = spec.pgd.targeted.is_none();
    let draws = spec.noise.samples_per_point as u64;
    let step_counter = std::sync::atomic::AtomicU64::new(0);
    let grad_fn = |point: &Tensor| -> Result<Tensor> {
        let step = step_counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let mut acc = vec![0.0; point.len()];
        for k in 0..draws {
            let eta = spec.noise.sample(point.shape(), step * draws + k);
            let raw = point.add(&eta)?;
            let noisy = raw.clamp01();
            let (_, grad) = model.loss_grad_input(&noisy, loss_label)?;
            // Chain rule through the clamp: saturated coordinates pass no
            // gradient.
            for ((a, &g), &r) in acc.iter_mut().zip(grad.data()).zip(raw.data()) {
                if (0.0..=1.0).contains(&r) {
                    *a += g;
                }
            }
        }
        let scale = 1.0 / draws as f64;
        Tensor::new(
            point.shape().to_vec(),
            acc.into_iter().map(|v| v * scale).collect(),
        )
    };
    let (x_adv, degenerate_gradient) = pgd_core(x, &spec.pgd, ascend, &grad_fn)?;
    Ok(AttackOutcome {
        success: pgd_success(model, &x_adv, label, &spec.pgd)?,
        x_adv,
        degenerate_gradient,
    })
}

/// Runs PGD over a batch; sample i uses seed mix(spec.seed, i).
pub fn pgd_attack_batch(
    model: &Classifier,
    inputs: &[Tensor],
    labels: &[usize],
    spec: &PgdSpec,
) -> Result<Vec<AttackOutcome>> {
    exec::try_map_indexed(inputs, |i, x| {
        pgd_attack(model, x, labels[i], &spec.clone().with_seed(mix_seed(spec.seed, i as u64)))
    })
}

pub fn eot_pgd_attack_batch(
    model: &Classifier,
    inputs: &[Tensor],
    labels: &[usize],
    spec: &EotSpec,
) -> Result<Vec<AttackOutcome>> {
    exec::try_map_indexed(inputs, |i, x| {
        let mut per_sample = spec.clone();
        per_sample.pgd.seed = mix_seed(spec.pgd.seed, i as u64);
        per_sample.noise.seed = mix_seed(spec.noise.seed, i as u64);
        eot_pgd_attack(model, x, labels[i], &per_sample)
    })
}

/// Margin used by the CW objective: max over other classes of f_z - f_y,
/// floored at -kappa when a confidence gap is requested. Non-positive means
/// the model still prefers y.
pub fn cw_margin(logits: &[f64], y: usize, kappa: f64) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::ClassOutOfRange {
            class: y,
            num_classes: logits.len(),
        });
    }
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let gap = best_other - logits[y];
    Ok(if kappa > 0.0 { gap.max(-kappa) } else { gap })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CwSpec {
    /// Required logit gap before an escape counts.
    pub kappa: f64,
    pub c_lo: f64,
    pub c_hi: f64,
    pub search_steps: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
}

impl Default for CwSpec {
    fn default() -> Self {
        CwSpec {
            kappa: 0.0,
            c_lo: 1e-3,
            c_hi: 1e2,
            search_steps: 10,
            inner_steps: 100,
            inner_lr: 0.01,
        }
    }
}

impl CwSpec {
    fn validate(&self) -> Result<()> {
        if !(self.c_lo > 0.0 && self.c_hi > self.c_lo) {
            return Err(Error::InvalidParameter(format!(
                "CW trade-off range must satisfy 0 < lo < hi, got [{}, {}]",
                self.c_lo, self.c_hi
            )));
        }
        if self.kappa < 0.0 || !self.kappa.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "kappa must be finite and >= 0, got {}",
                self.kappa
            )));
        }
        if self.search_steps == 0 || self.inner_steps == 0 {
            return Err(Error::InvalidParameter(
                "CW needs at least one search and one inner step".into(),
            ));
        }
        if !(self.inner_lr.is_finite() && self.inner_lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "CW inner learning rate must be positive, got {}",
                self.inner_lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CwOutcome {
    pub x_adv: Tensor,
    pub success: bool,
    /// Smallest trade-off constant whose inner optimization produced the
    /// returned perturbation; None when no search point succeeded.
    pub c: Option<f64>,
    pub l2: f64,
}

/// Extends the model graph with the CW objective
/// ||x - origin||^2 + c * max(f_y - max_{z != y} f_z, -kappa).
fn cw_graph(model: &Classifier, y: usize, kappa: f64) -> Result<(Graph, Tensor, Tensor)> {
    let classes = model.num_classes();
    let mut g = model.graph().clone();
    let x = g_input_id(&g, INPUT_X)?;
    let origin = g.input("cw_origin", &model.input_shape())?;
    let c = g.input("cw_c", &[])?;
    let mask = g.input("cw_mask", &[classes])?;
    let onehot = g.input("cw_onehot", &[classes])?;

    let delta = g.sub(x, origin)?;
    let flat_len: usize = model.input_shape().iter().product();
    let flat = g.reshape(delta, &[flat_len])?;
    let dist = g.dot(flat, flat)?;

    let logits = g_output_id(&g, "logits")?;
    let fy = g.dot(logits, onehot)?;
    let masked = g.add(logits, mask)?;
    let best_other = g.max_reduce(masked)?;
    let margin = g.sub(fy, best_other)?;
    let floored = g.clamp_min(margin, -kappa)?;
    let weighted = g.mul(floored, c)?;
    let objective = g.add(dist, weighted)?;
    g.mark_output("cw_objective", objective)?;

    let mut mask_data = vec![0.0; classes];
    mask_data[y] = -1e9;
    let mask_t = Tensor::vector(mask_data);
    let onehot_t = Tensor::one_hot(classes, y)?;
    Ok((g, mask_t, onehot_t))
}

fn g_input_id(g: &Graph, name: &str) -> Result<crate::graph::NodeId> {
    g.input_node(name)
        .ok_or_else(|| Error::UnboundInput(name.to_string()))
}

fn g_output_id(g: &Graph, name: &str) -> Result<crate::graph::NodeId> {
    g.output_node(name)
        .ok_or_else(|| Error::UnknownOutput(name.to_string()))
}

/// Carlini-Wagner style L2 attack, escaping the given source class (defaults
/// to the model's own prediction). Plain gradient steps with domain clipping
/// inside a log-space binary search over the trade-off constant.
pub fn cw_attack(
    model: &Classifier,
    x: &Tensor,
    source: Option<usize>,
    spec: &CwSpec,
) -> Result<CwOutcome> {
    spec.validate()?;
    let y = match source {
        Some(class) => class,
        None => model.predict(x)?,
    };
    if y >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            class: y,
            num_classes: model.num_classes(),
        });
    }
    let (graph, mask, onehot) = cw_graph(model, y, spec.kappa)?;

    let succeeded = |logits: &[f64]| -> bool {
        let margin = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max)
            - logits[y];
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = i;
            }
        }
        margin >= spec.kappa && best != y
    };

    let mut best: Option<(f64, f64, Tensor)> = None; // (l2, c, point)
    let consider = |candidate: &Tensor, c: f64, best: &mut Option<(f64, f64, Tensor)>| {
        let l2 = candidate
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let better = match best {
            None => true,
            Some((bl2, bc, _)) => l2 < *bl2 || (l2 == *bl2 && c < *bc),
        };
        if better {
            *best = Some((l2, c, candidate.clone()));
        }
    };

    let (mut lo, mut hi) = (spec.c_lo, spec.c_hi);
    for _ in 0..spec.search_steps {
        let c = (lo * hi).sqrt();
        let c_t = Tensor::scalar(c);
        let mut current = x.clone();
        let mut found_here = false;
        for step in 0..=spec.inner_steps {
            let bindings = model.bindings(&[
                (INPUT_X, &current),
                ("cw_origin", x),
                ("cw_c", &c_t),
                ("cw_mask", &mask),
                ("cw_onehot", &onehot),
            ]);
            let (_, mut grads, extra) =
                graph.backward(&bindings, "cw_objective", &[INPUT_X], &["logits"])?;
            if succeeded(extra[0].data()) {
                consider(&current, c, &mut best);
                found_here = true;
            }
            if step == spec.inner_steps {
                break;
            }
            let grad = grads.pop().unwrap();
            current = current.add_scaled(&grad, -spec.inner_lr)?.clamp01();
        }
        if found_here {
            hi = c;
        } else {
            lo = c;
        }
    }

    Ok(match best {
        Some((l2, c, x_adv)) => CwOutcome {
            x_adv,
            success: true,
            c: Some(c),
            l2,
        },
        None => CwOutcome {
            x_adv: x.clone(),
            success: false,
            c: None,
            l2: 0.0,
        },
    })
}

pub fn cw_attack_batch(
    model: &Classifier,
    inputs: &[Tensor],
    spec: &CwSpec,
) -> Result<Vec<CwOutcome>> {
    exec::try_map_indexed(inputs, |_, x| cw_attack(model, x, None, spec))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeepFoolSpec {
    pub max_iterations: usize,
    pub overshoot: f64,
    /// Bisection stops when the winning logit gap falls below this.
    pub gap_tolerance: f64,
}

impl Default for DeepFoolSpec {
    fn default() -> Self {
        DeepFoolSpec {
            max_iterations: 50,
            overshoot: 1.02,
            gap_tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeepFoolOutcome {
    /// L2 distance from the input to the located boundary point.
    pub distance: f64,
    pub boundary_point: Tensor,
    pub iterations: usize,
}

/// Minimal-perturbation boundary search via iterated linearization. The
/// search is unconstrained (no domain clipping): it measures the intrinsic
/// distance to the decision boundary, not an attack.
pub fn deepfool_distance(
    model: &Classifier,
    x: &Tensor,
    spec: &DeepFoolSpec,
) -> Result<DeepFoolOutcome> {
    if spec.max_iterations == 0 || spec.overshoot < 1.0 {
        return Err(Error::InvalidParameter(
            "DeepFool needs max_iterations >= 1 and overshoot >= 1".into(),
        ));
    }
    let classes = model.num_classes();
    let y0 = model.predict(x)?;
    let mut current = x.clone();

    for iteration in 1..=spec.max_iterations {
        let logits = model.logits(&current)?;
        let (_, grad_y0) = model.logit_grad_input(&current, y0)?;

        // Closest linearized boundary among the other classes.
        let mut step: Option<(f64, Tensor, f64)> = None; // (ratio, w_diff, f_diff)
        for k in 0..classes {
            if k == y0 {
                continue;
            }
            let (_, grad_k) = model.logit_grad_input(&current, k)?;
            let w = grad_k.sub(&grad_y0)?;
            let w_norm = w.l2_norm();
            if w_norm == 0.0 {
                continue;
            }
            let f_diff = logits[k] - logits[y0];
            let ratio = f_diff.abs() / w_norm;
            if step.as_ref().is_none_or(|(best, _, _)| ratio < *best) {
                step = Some((ratio, w, f_diff));
            }
        }
        let Some((_, w, f_diff)) = step else {
            return Err(Error::DeepFoolNoConvergence {
                iterations: iteration,
                partial_distance: current.sub(x)?.l2_norm(),
            });
        };
        let w_norm_sq = w.dot(&w)?;
        let magnitude = (-f_diff) / w_norm_sq; // sign moves f_k - f_y0 toward zero and past it
        let candidate = current.add_scaled(&w, spec.overshoot * magnitude.abs() * magnitude.signum())?;
        current = candidate;

        if model.predict(&current)? != y0 {
            // Refine along [x, current] to the requested logit-gap tolerance.
            let boundary = bisect_boundary(model, x, &current, y0, spec.gap_tolerance)?;
            return Ok(DeepFoolOutcome {
                distance: boundary.sub(x)?.l2_norm(),
                boundary_point: boundary,
                iterations: iteration,
            });
        }
    }
    Err(Error::DeepFoolNoConvergence {
        iterations: spec.max_iterations,
        partial_distance: current.sub(x)?.l2_norm(),
    })
}

/// Bisects t in [0,1] between inside (class y0 at t=0) and outside (t=1)
/// until the gap between y0's logit and the best other logit is below tol;
/// returns the first point past the boundary.
fn bisect_boundary(
    model: &Classifier,
    inside: &Tensor,
    outside: &Tensor,
    y0: usize,
    tol: f64,
) -> Result<Tensor> {
    let point_at = |t: f64| -> Result<Tensor> {
        inside.add_scaled(&outside.sub(inside)?, t)
    };
    let gap = |point: &Tensor| -> Result<f64> {
        let logits = model.logits(point)?;
        let best_other = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y0)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(best_other - logits[y0])
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut hi_point = outside.clone();
    for _ in 0..200 {
        if gap(&hi_point)?.abs() < tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let mid_point = point_at(mid)?;
        if model.predict(&mid_point)? != y0 {
            hi = mid;
            hi_point = mid_point;
        } else {
            lo = mid;
        }
    }
    Ok(hi_point)
}

/// Keeps each coordinate of `delta` with probability q (independently,
/// seeded), zeroing the rest. q = 1 reproduces delta exactly.
pub fn bernoulli_thin(delta: &Tensor, q: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParameter(format!(
            "thinning probability must be in [0, 1], got {q}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data = delta
        .data()
        .iter()
        .map(|&v| if rng.random::<f64>() < q { v } else { 0.0 })
        .collect();
    Tensor::new(delta.shape().to_vec(), data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsilonTune {
    pub epsilon: f64,
    pub success_rate: f64,
    /// Whether any grid point reached the target rate; when false, `epsilon`
    /// is the largest grid value.
    pub achieved: bool,
    pub per_epsilon: Vec<(f64, f64)>,
}

/// Picks the smallest epsilon on the grid whose PGD success rate (among
/// initially correctly classified samples) reaches `target_success`.
pub fn tune_epsilon(
    model: &Classifier,
    inputs: &[Tensor],
    labels: &[usize],
    template: &PgdSpec,
    grid: &[f64],
    target_success: f64,
) -> Result<EpsilonTune> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty epsilon grid".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));

    let keep: Vec<usize> = (0..inputs.len())
        .filter(|&i| {
            model
                .predict(&inputs[i])
                .map(|p| p == labels[i])
                .unwrap_or(false)
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset(
            "no correctly classified samples to tune against".into(),
        ));
    }
    let kept_inputs: Vec<Tensor> = keep.iter().map(|&i| inputs[i].clone()).collect();
    let kept_labels: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();

    let mut per_epsilon = Vec::with_capacity(sorted.len());
    let mut chosen: Option<(f64, f64)> = None;
    for &epsilon in &sorted {
        let spec = template.clone().with_epsilon(epsilon);
        let outcomes = pgd_attack_batch(model, &kept_inputs, &kept_labels, &spec)?;
        let rate =
            outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64;
        per_epsilon.push((epsilon, rate));
        if chosen.is_none() && rate >= target_success {
            chosen = Some((epsilon, rate));
        }
    }
    let (epsilon, success_rate) = chosen.unwrap_or_else(|| *per_epsilon.last().unwrap());
    Ok(EpsilonTune {
        epsilon,
        success_rate,
        achieved: chosen.is_some(),
        per_epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelArch, OUTPUT_WEIGHTS};
    use std::collections::BTreeMap;

    fn identity_model(classes: usize, dim: usize, rows: Vec<f64>) -> Classifier {
        let arch = ModelArch::Linear {
            input_dim: dim,
            classes,
        };
        let mut params = BTreeMap::new();
        params.insert(
            OUTPUT_WEIGHTS.to_string(),
            Tensor::new(vec![classes, dim], rows).unwrap(),
        );
        Classifier::from_params(arch, params).unwrap()
    }

    #[test]
    fn project_ball_linf_by_hand() {
        let center = Tensor::vector(vec![0.5, 0.5, 0.95]);
        let point = Tensor::vector(vec![0.75, 0.42, 1.4]);
        let out = project_ball(&point, &center, 0.1, AttackNorm::LInf).unwrap();
        assert_eq!(out.data(), &[0.6, 0.42, 1.0]);
    }

    #[test]
    fn project_ball_l2_rescales_onto_sphere() {
        let center = Tensor::vector(vec![0.5, 0.5]);
        let point = Tensor::vector(vec![0.9, 0.5]);
        let out = project_ball(&point, &center, 0.1, AttackNorm::L2).unwrap();
        let dist = out.sub(&center).unwrap().l2_norm();
        assert!(dist <= 0.1 && dist > 0.0999);
        // Direction preserved.
        assert_eq!(out.data()[1], 0.5);
        assert!(out.data()[0] > 0.5);
    }

    #[test]
    fn one_step_pgd_matches_closed_form_fgsm() {
        // Identity weights, logits = x. At x = (0.6, 0.5), label 0:
        // grad loss = softmax(x) - e_0, signs (-1, +1), one step of size
        // alpha moves to (0.6 - a, 0.5 + a).
        let model = identity_model(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::vector(vec![0.6, 0.5]);
        let mut spec = PgdSpec::new(AttackNorm::LInf, 0.1, 1, 0);
        spec.random_init = false;
        spec.alpha = Some(0.1);
        let out = pgd_attack(&model, &x, 0, &spec).unwrap();
        assert_eq!(out.x_adv.data(), &[0.5, 0.6]);
        assert!(out.success);
        assert!(!out.degenerate_gradient);
    }

    #[test]
    fn pgd_respects_the_ball_and_domain() {
        let model = identity_model(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::vector(vec![0.98, 0.02]);
        let spec = PgdSpec::new(AttackNorm::LInf, 0.05, 8, 3);
        let out = pgd_attack(&model, &x, 0, &spec).unwrap();
        let delta = out.x_adv.sub(&x).unwrap();
        assert!(delta.linf_norm() <= 0.05 + 1e-12);
        assert!(out.x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn constant_model_flags_degenerate_gradient() {
        let model = identity_model(2, 2, vec![0.0; 4]);
        let x = Tensor::vector(vec![0.3, 0.7]);
        let mut spec = PgdSpec::new(AttackNorm::LInf, 0.1, 5, 1);
        spec.random_init = false;
        let out = pgd_attack(&model, &x, 0, &spec).unwrap();
        assert!(out.degenerate_gradient);
        assert_eq!(out.x_adv, x);
    }

    #[test]
    fn eot_with_one_zero_draw_equals_plain_pgd() {
        let model = identity_model(3, 3, vec![1.0, 0.0, 0.2, 0.0, 1.0, -0.3, 0.5, 0.5, 0.0]);
        let x = Tensor::vector(vec![0.4, 0.35, 0.6]);
        let spec = PgdSpec::new(AttackNorm::LInf, 0.08, 10, 42);
        let plain = pgd_attack(&model, &x, 0, &spec).unwrap();
        let eot = EotSpec {
            pgd: spec,
            noise: NoiseSpec::new(crate::noise::NoiseSource::Gaussian, 0.0, 1, 9).unwrap(),
        };
        let averaged = eot_pgd_attack(&model, &x, 0, &eot).unwrap();
        assert_eq!(plain.x_adv, averaged.x_adv);
        assert_eq!(plain.success, averaged.success);
    }

    #[test]
    fn cw_margin_by_hand() {
        assert_eq!(cw_margin(&[5.0, 1.0], 0, 0.0).unwrap(), -4.0);
        assert_eq!(cw_margin(&[5.0, 1.0], 0, 2.0).unwrap(), -2.0);
        assert_eq!(cw_margin(&[1.0, 5.0], 0, 0.0).unwrap(), 4.0);
        assert!(cw_margin(&[1.0, 5.0], 3, 0.0).is_err());
    }

    #[test]
    fn cw_accepts_zero_perturbation_when_already_escaped() {
        let model = identity_model(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        // Predicted class is 1; escaping class 0 needs no perturbation.
        let x = Tensor::vector(vec![0.2, 0.8]);
        let spec = CwSpec::default();
        let out = cw_attack(&model, &x, Some(0), &spec).unwrap();
        assert!(out.success);
        assert_eq!(out.l2, 0.0);
        assert_eq!(out.x_adv, x);
        // Every bisection step succeeds, so hi collapses toward c_lo.
        let c = out.c.unwrap();
        assert!(c < spec.c_lo * 2.0, "c = {c}");
    }

    #[test]
    fn cw_crosses_a_linear_boundary_with_small_l2() {
        let model = identity_model(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        // Boundary is the diagonal; distance from (0.6, 0.4) is 0.2/sqrt(2).
        let x = Tensor::vector(vec![0.6, 0.4]);
        let spec = CwSpec {
            inner_lr: 0.05,
            ..CwSpec::default()
        };
        let out = cw_attack(&model, &x, None, &spec).unwrap();
        assert!(out.success);
        assert_eq!(model.predict(&out.x_adv).unwrap(), 1);
        let analytic = 0.2 / 2.0f64.sqrt();
        assert!(
            out.l2 < 2.5 * analytic,
            "l2 {} vs analytic {analytic}",
            out.l2
        );
    }

    #[test]
    fn deepfool_recovers_linear_hyperplane_distance() {
        // f0 - f1 = x_0, boundary at x_0 = 0: distance from (0.3, 0.7) is 0.3.
        let model = identity_model(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let x = Tensor::vector(vec![0.3, 0.7]);
        let out = deepfool_distance(&model, &x, &DeepFoolSpec::default()).unwrap();
        assert!(
            (out.distance - 0.3).abs() < 1e-6,
            "distance {}",
            out.distance
        );
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn deepfool_reports_non_convergence() {
        let model = identity_model(2, 2, vec![0.0; 4]);
        let x = Tensor::vector(vec![0.5, 0.5]);
        match deepfool_distance(&model, &x, &DeepFoolSpec::default()) {
            Err(Error::DeepFoolNoConvergence { .. }) => {}
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn bernoulli_thinning_endpoints_are_exact() {
        let delta = Tensor::vector((0..64).map(|i| i as f64 * 0.01 - 0.3).collect());
        let kept = bernoulli_thin(&delta, 1.0, 5).unwrap();
        assert_eq!(kept, delta);
        let zeroed = bernoulli_thin(&delta, 0.0, 5).unwrap();
        assert!(zeroed.data().iter().all(|&v| v == 0.0));
        let half = bernoulli_thin(&delta, 0.5, 5).unwrap();
        let surviving = half.data().iter().filter(|&&v| v != 0.0).count();
        assert!((20..=44).contains(&surviving), "kept {surviving}");
        // Determinism.
        assert_eq!(half, bernoulli_thin(&delta, 0.5, 5).unwrap());
    }

    #[test]
    fn tune_epsilon_picks_smallest_sufficient_radius() {
        // Class 1 sits far from (0.8, 0.2): flipping needs ~0.3 per coord.
        let model = identity_model(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let inputs = vec![
            Tensor::vector(vec![0.8, 0.2]),
            Tensor::vector(vec![0.75, 0.25]),
        ];
        let labels = vec![0, 0];
        let template = PgdSpec::new(AttackNorm::LInf, 0.1, 20, 7);
        let tuned = tune_epsilon(&model, &inputs, &labels, &template, &[0.05, 0.1, 0.4], 0.95)
            .unwrap();
        assert!(tuned.achieved);
        assert_eq!(tuned.epsilon, 0.4);
        assert_eq!(tuned.per_epsilon.len(), 3);
        assert!(tuned.per_epsilon[0].1 < 0.95);
    }
}
