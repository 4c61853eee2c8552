//! Small classifiers with an exactly-linear last layer.
//!
//! Every architecture exposes a feature map `phi` and a weight matrix such
//! that `logits = W phi(x)` holds to the last bit: hidden and conv biases are
//! absorbed by appending a constant-1 coordinate to the activations, and the
//! output layer has no separate bias. The log-odds machinery relies on this
//! identity.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bundle::sha256_hex;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph};
use crate::tensor::Tensor;

pub const CONV_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArch {
    /// logits = W x; features are the identity map. No bias anywhere, which
    /// keeps the geometry of this model fully analytic.
    Linear { input_dim: usize, classes: usize },
    /// ReLU stack; layer biases are absorbed via appended constant-1
    /// coordinates, including one on the final feature vector.
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// Two 3x3 valid conv layers, each ReLU + 2x2 max-pool, then flatten and
    /// append the constant-1 coordinate.
    ConvNet {
        height: usize,
        width: usize,
        channels: [usize; 2],
        classes: usize,
    },
}

impl ModelArch {
    pub fn classes(&self) -> usize {
        match *self {
            ModelArch::Linear { classes, .. }
            | ModelArch::Mlp { classes, .. }
            | ModelArch::ConvNet { classes, .. } => classes,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            ModelArch::Linear { input_dim, .. } | ModelArch::Mlp { input_dim, .. } => {
                vec![input_dim]
            }
            ModelArch::ConvNet { height, width, .. } => vec![1, height, width],
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    /// Spatial size after one conv(3x3 valid) + pool(2x2) stage.
    fn stage(dim: usize) -> Result<usize> {
        let after_conv = dim
            .checked_sub(CONV_KERNEL - 1)
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::InvalidParameter(format!("spatial dim {dim} too small")))?;
        if after_conv % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "spatial dim {dim} leaves odd size {after_conv} before pooling"
            )));
        }
        Ok(after_conv / 2)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        match self {
            ModelArch::Linear { input_dim, .. } => Ok(*input_dim),
            ModelArch::Mlp { hidden, input_dim, .. } => {
                Ok(*hidden.last().unwrap_or(input_dim) + 1)
            }
            ModelArch::ConvNet {
                height,
                width,
                channels,
                ..
            } => {
                let h = Self::stage(Self::stage(*height)?)?;
                let w = Self::stage(Self::stage(*width)?)?;
                Ok(channels[1] * h * w + 1)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(Error::InvalidParameter(
                "a classifier needs at least two classes".into(),
            ));
        }
        match self {
            ModelArch::Linear { input_dim, .. } if *input_dim == 0 => {
                Err(Error::InvalidParameter("input_dim must be positive".into()))
            }
            ModelArch::Mlp {
                input_dim, hidden, ..
            } => {
                if *input_dim == 0 || hidden.contains(&0) {
                    return Err(Error::InvalidParameter(
                        "layer widths must be positive".into(),
                    ));
                }
                Ok(())
            }
            ModelArch::ConvNet { channels, .. } => {
                if channels.contains(&0) {
                    return Err(Error::InvalidParameter(
                        "channel counts must be positive".into(),
                    ));
                }
                self.feature_dim().map(|_| ())
            }
            _ => Ok(()),
        }
    }
}

/// Graph input names reserved for per-call data (everything else is a
/// trainable parameter).
pub const INPUT_X: &str = "x";
pub const INPUT_TARGET: &str = "target";
pub const INPUT_CLASS_ONEHOT: &str = "class_onehot";
pub const INPUT_FEATURE_PROBE: &str = "feature_probe";
pub const OUTPUT_WEIGHTS: &str = "w_out";

#[derive(Clone, Debug)]
pub struct Classifier {
    arch: ModelArch,
    graph: Graph,
    params: BTreeMap<String, Tensor>,
}

/// Parameter names with their shapes, in graph construction order.
type ParamShapes = Vec<(String, Vec<usize>)>;

fn build_graph(arch: &ModelArch) -> Result<(Graph, ParamShapes)> {
    let mut g = Graph::new();
    let classes = arch.classes();
    let x = g.input(INPUT_X, &arch.input_shape())?;
    let mut param_shapes: Vec<(String, Vec<usize>)> = Vec::new();

    let features = match arch {
        ModelArch::Linear { .. } => x,
        ModelArch::Mlp {
            input_dim, hidden, ..
        } => {
            let mut prev = x;
            let mut prev_dim = *input_dim;
            for (i, &width) in hidden.iter().enumerate() {
                let name = format!("w{i}");
                let shape = vec![width, prev_dim + 1];
                let w = g.input(&name, &shape)?;
                param_shapes.push((name, shape));
                let aug = g.append_one(prev)?;
                let lin = g.matvec(w, aug)?;
                prev = g.relu(lin)?;
                prev_dim = width;
            }
            g.append_one(prev)?
        }
        ModelArch::ConvNet {
            height,
            width,
            channels,
            ..
        } => {
            let mut prev = x;
            let mut in_ch = 1;
            let (mut h, mut w) = (*height, *width);
            for (i, &out_ch) in channels.iter().enumerate() {
                let kname = format!("k{i}");
                let kshape = vec![out_ch, in_ch, CONV_KERNEL, CONV_KERNEL];
                let kernel = g.input(&kname, &kshape)?;
                param_shapes.push((kname, kshape));
                let bname = format!("b{i}");
                let bias = g.input(&bname, &[out_ch])?;
                param_shapes.push((bname, vec![out_ch]));
                let conv = g.conv2d(prev, kernel, bias)?;
                let act = g.relu(conv)?;
                prev = g.max_pool2(act)?;
                in_ch = out_ch;
                h = ModelArch::stage(h)?;
                w = ModelArch::stage(w)?;
            }
            let flat = g.reshape(prev, &[in_ch * h * w])?;
            g.append_one(flat)?
        }
    };

    let feature_dim = arch.feature_dim()?;
    let w_out_shape = vec![classes, feature_dim];
    let w_out = g.input(OUTPUT_WEIGHTS, &w_out_shape)?;
    param_shapes.push((OUTPUT_WEIGHTS.to_string(), w_out_shape));
    let logits = g.matvec(w_out, features)?;

    let target = g.input(INPUT_TARGET, &[classes])?;
    let lse = g.log_sum_exp_node(logits)?;
    let picked = g.dot(logits, target)?;
    let loss = g.sub(lse, picked)?;

    let onehot = g.input(INPUT_CLASS_ONEHOT, &[classes])?;
    let logit_proj = g.dot(logits, onehot)?;

    let probe = g.input(INPUT_FEATURE_PROBE, &[feature_dim])?;
    let feature_proj = g.dot(features, probe)?;

    let probs = g.softmax_node(logits)?;

    g.mark_output("features", features)?;
    g.mark_output("logits", logits)?;
    g.mark_output("probs", probs)?;
    g.mark_output("loss", loss)?;
    g.mark_output("logit_proj", logit_proj)?;
    g.mark_output("feature_proj", feature_proj)?;
    Ok((g, param_shapes))
}

impl Classifier {
    /// Fresh classifier with seeded He-style initialization.
    pub fn init(arch: ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (graph, param_shapes) = build_graph(&arch)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        // Generation order is the fixed layer order, not map order, so the
        // draw sequence is stable for a given architecture.
        for (name, shape) in &param_shapes {
            let fan_in = if shape.len() == 1 {
                1
            } else {
                shape[1..].iter().product::<usize>()
            };
            let std = if shape.len() == 1 {
                0.0 // conv biases start at zero
            } else if name == OUTPUT_WEIGHTS {
                1.0 / (fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            params.insert(name.clone(), Tensor::new(shape.clone(), data)?);
        }
        Ok(Classifier {
            arch,
            graph,
            params,
        })
    }

    /// Rebuilds a classifier from stored parameters, validating names and
    /// shapes against the architecture.
    pub fn from_params(arch: ModelArch, params: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let (graph, param_shapes) = build_graph(&arch)?;
        if params.len() != param_shapes.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameters, got {}",
                param_shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &param_shapes {
            let tensor = params.get(name).ok_or_else(|| {
                Error::InvalidParameter(format!("missing parameter '{name}'"))
            })?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::shape(
                    format!("parameter '{name}'"),
                    format!("expected {:?}, got {:?}", shape, tensor.shape()),
                ));
            }
        }
        Ok(Classifier {
            arch,
            graph,
            params,
        })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.arch.input_shape()
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim().expect("validated at construction")
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).collect()
    }

    pub(crate) fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Parameter bindings plus any per-call extras.
    pub fn bindings<'a>(&'a self, extras: &[(&'a str, &'a Tensor)]) -> Bindings<'a> {
        let mut b: Bindings<'a> = self
            .params
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        for (name, tensor) in extras {
            b.insert(name, tensor);
        }
        b
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::ClassOutOfRange {
                class,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let b = self.bindings(&[(INPUT_X, x)]);
        let out = self.graph.evaluate_subset(&b, &["logits"])?;
        Ok(out.into_iter().next().unwrap().into_data())
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<f64>> {
        let b = self.bindings(&[(INPUT_X, x)]);
        let out = self.graph.evaluate_subset(&b, &["features"])?;
        Ok(out.into_iter().next().unwrap().into_data())
    }

    pub fn logits_and_features(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let b = self.bindings(&[(INPUT_X, x)]);
        let mut out = self
            .graph
            .evaluate_subset(&b, &["logits", "features"])?
            .into_iter();
        let logits = out.next().unwrap().into_data();
        let features = out.next().unwrap().into_data();
        Ok((logits, features))
    }

    pub fn probs(&self, x: &Tensor) -> Result<Vec<f64>> {
        let b = self.bindings(&[(INPUT_X, x)]);
        let out = self.graph.evaluate_subset(&b, &["probs"])?;
        Ok(out.into_iter().next().unwrap().into_data())
    }

    /// Argmax of the logits; ties break to the smallest class index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let logits = self.logits(x)?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Log-odds f_z(x) - f_y(x); with softmax outputs this equals
    /// log p_z - log p_y.
    pub fn log_odds(&self, x: &Tensor, y: usize, z: usize) -> Result<f64> {
        self.check_class(y)?;
        self.check_class(z)?;
        let logits = self.logits(x)?;
        Ok(logits[z] - logits[y])
    }

    pub fn loss(&self, x: &Tensor, label: usize) -> Result<f64> {
        self.check_class(label)?;
        let target = Tensor::one_hot(self.num_classes(), label)?;
        let b = self.bindings(&[(INPUT_X, x), (INPUT_TARGET, &target)]);
        self.graph.evaluate_subset(&b, &["loss"])?[0].item()
    }

    /// Cross-entropy loss and its gradient with respect to the input.
    pub fn loss_grad_input(&self, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
        self.check_class(label)?;
        let target = Tensor::one_hot(self.num_classes(), label)?;
        let b = self.bindings(&[(INPUT_X, x), (INPUT_TARGET, &target)]);
        let (loss, mut grads, _) = self.graph.backward(&b, "loss", &[INPUT_X], &[])?;
        Ok((loss, grads.pop().unwrap()))
    }

    /// Cross-entropy loss and parameter gradients, in `param_names` order.
    pub fn loss_grad_params(&self, x: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>)> {
        self.check_class(label)?;
        let target = Tensor::one_hot(self.num_classes(), label)?;
        let b = self.bindings(&[(INPUT_X, x), (INPUT_TARGET, &target)]);
        let names = self.param_names();
        let (loss, grads, _) = self.graph.backward(&b, "loss", &names, &[])?;
        Ok((loss, grads))
    }

    /// Gradient of a single logit with respect to the input.
    pub fn logit_grad_input(&self, x: &Tensor, class: usize) -> Result<(f64, Tensor)> {
        self.check_class(class)?;
        let onehot = Tensor::one_hot(self.num_classes(), class)?;
        let b = self.bindings(&[(INPUT_X, x), (INPUT_CLASS_ONEHOT, &onehot)]);
        let (value, mut grads, _) = self.graph.backward(&b, "logit_proj", &[INPUT_X], &[])?;
        Ok((value, grads.pop().unwrap()))
    }

    /// Value and input-gradient of <probe, phi(x)>.
    pub fn feature_proj_grad_input(&self, x: &Tensor, probe: &Tensor) -> Result<(f64, Tensor)> {
        let b = self.bindings(&[(INPUT_X, x), (INPUT_FEATURE_PROBE, probe)]);
        let (value, mut grads, _) = self.graph.backward(&b, "feature_proj", &[INPUT_X], &[])?;
        Ok((value, grads.pop().unwrap()))
    }

    /// Row w_class of the output weight matrix.
    pub fn weight_row(&self, class: usize) -> Result<Vec<f64>> {
        self.check_class(class)?;
        let w = &self.params[OUTPUT_WEIGHTS];
        let d = self.feature_dim();
        Ok(w.data()[class * d..(class + 1) * d].to_vec())
    }

    /// w_z - w_y, the direction whose inner product with a feature
    /// perturbation moves log-odds from class y toward class z.
    pub fn weight_diff(&self, y: usize, z: usize) -> Result<Vec<f64>> {
        let wy = self.weight_row(y)?;
        let wz = self.weight_row(z)?;
        Ok(wz.iter().zip(&wy).map(|(a, b)| a - b).collect())
    }

    /// SHA-256 over the architecture and all parameter bytes; identifies the
    /// exact model that statistics were fitted against.
    pub fn checksum(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.arch).expect("arch serializes");
        for (name, tensor) in &self.params {
            bytes.extend_from_slice(name.as_bytes());
            for dim in tensor.shape() {
                bytes.extend_from_slice(&(*dim as u64).to_le_bytes());
            }
            for v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

/// Fraction of samples the model labels correctly.
pub fn accuracy(model: &Classifier, inputs: &[Tensor], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset("accuracy over zero samples".into()));
    }
    let hits = crate::exec::try_map_indexed(inputs, |i, x| {
        Ok(usize::from(model.predict(x)? == labels[i]))
    })?;
    Ok(hits.iter().sum::<usize>() as f64 / inputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_by_hand() -> Classifier {
        let arch = ModelArch::Linear {
            input_dim: 2,
            classes: 3,
        };
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap();
        let mut params = BTreeMap::new();
        params.insert(OUTPUT_WEIGHTS.to_string(), w);
        Classifier::from_params(arch, params).unwrap()
    }

    #[test]
    fn linear_logits_by_hand() {
        let model = linear_by_hand();
        let x = Tensor::vector(vec![2.0, -0.5]);
        assert_eq!(model.logits(&x).unwrap(), vec![2.0, -0.5, -1.5]);
        assert_eq!(model.predict(&x).unwrap(), 0);
        assert_eq!(model.log_odds(&x, 0, 1).unwrap(), -2.5);
        assert_eq!(model.features(&x).unwrap(), vec![2.0, -0.5]);
    }

    #[test]
    fn argmax_tie_breaks_to_smallest_class() {
        let model = linear_by_hand();
        // x = 0 gives logits [0, 0, 0].
        let x = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(model.predict(&x).unwrap(), 0);
    }

    #[test]
    fn logits_are_exactly_linear_in_features() {
        let arch = ModelArch::Mlp {
            input_dim: 4,
            hidden: vec![6, 5],
            classes: 3,
        };
        let model = Classifier::init(arch, 11).unwrap();
        let x = Tensor::vector(vec![0.2, -0.7, 0.4, 0.9]);
        let (logits, phi) = model.logits_and_features(&x).unwrap();
        assert_eq!(phi.len(), model.feature_dim());
        assert_eq!(*phi.last().unwrap(), 1.0);
        for (class, &logit) in logits.iter().enumerate() {
            let row = model.weight_row(class).unwrap();
            let manual: f64 = row.iter().zip(&phi).map(|(a, b)| a * b).sum();
            assert_eq!(logit, manual);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let arch = ModelArch::Mlp {
            input_dim: 3,
            hidden: vec![4],
            classes: 3,
        };
        let model = Classifier::init(arch, 5).unwrap();
        let x = Tensor::vector(vec![0.3, 0.6, -0.1]);
        let (_, grad) = model.loss_grad_input(&x, 1).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut plus = x.clone();
            plus.data_mut()[j] += h;
            let mut minus = x.clone();
            minus.data_mut()[j] -= h;
            let numeric =
                (model.loss(&plus, 1).unwrap() - model.loss(&minus, 1).unwrap()) / (2.0 * h);
            assert!(
                (numeric - grad.data()[j]).abs() < 1e-6,
                "coord {j}: numeric {numeric} vs analytic {}",
                grad.data()[j]
            );
        }
    }

    #[test]
    fn logit_grad_matches_weight_row_for_linear() {
        let model = linear_by_hand();
        let x = Tensor::vector(vec![0.4, 0.6]);
        let (value, grad) = model.logit_grad_input(&x, 2).unwrap();
        assert_eq!(value, -1.0);
        assert_eq!(grad.data(), &[-1.0, -1.0]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let arch = ModelArch::Mlp {
            input_dim: 3,
            hidden: vec![4],
            classes: 2,
        };
        let a = Classifier::init(arch.clone(), 7).unwrap();
        let b = Classifier::init(arch.clone(), 7).unwrap();
        let c = Classifier::init(arch, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn convnet_shapes_are_validated() {
        // 12x12 -> conv 10 -> pool 5, which cannot be pooled again.
        let bad = ModelArch::ConvNet {
            height: 12,
            width: 12,
            channels: [2, 3],
            classes: 2,
        };
        assert!(Classifier::init(bad, 0).is_err());

        let good = ModelArch::ConvNet {
            height: 10,
            width: 10,
            channels: [2, 3],
            classes: 2,
        };
        let model = Classifier::init(good, 0).unwrap();
        assert_eq!(model.feature_dim(), 3 + 1);
        let x = Tensor::zeros(&[1, 10, 10]);
        assert_eq!(model.logits(&x).unwrap().len(), 2);
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let arch = ModelArch::Linear {
            input_dim: 2,
            classes: 2,
        };
        let mut params = BTreeMap::new();
        params.insert(
            OUTPUT_WEIGHTS.to_string(),
            Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap(),
        );
        assert!(Classifier::from_params(arch, params).is_err());
    }
}
