//! Small declarative classifiers: MLPs and shallow CNNs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{self, Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::XorShift64Star;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu,
    Flatten,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
            } => write!(f, "conv({out_channels},{kernel},{stride})"),
            Layer::Dense { out_features } => write!(f, "dense({out_features})"),
            Layer::Relu => f.write_str("relu"),
            Layer::Flatten => f.write_str("flatten"),
        }
    }
}

/// Architecture of a classifier: per-item input shape, layer stack and class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub classes: usize,
}

/// A parameter tensor together with its stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            input_shape,
            layers,
            classes,
        };
        spec.check()?;
        Ok(spec)
    }

    /// Walks the layer stack and returns the output shape of every layer.
    pub fn check(&self) -> Result<Vec<Vec<usize>>> {
        let invalid = |layer: usize, reason: String| {
            let name = self
                .layers
                .get(layer)
                .map(|l| l.to_string())
                .unwrap_or_else(|| "input".into());
            Error::InvalidSpec {
                layer,
                name,
                reason,
            }
        };
        if self.classes < 2 {
            return Err(invalid(0, format!("need at least 2 classes, got {}", self.classes)));
        }
        if !matches!(self.input_shape.len(), 1 | 3) || self.input_shape.contains(&0) {
            return Err(invalid(0, format!("unsupported input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape.as_slice()) {
                (
                    Layer::Conv {
                        out_channels,
                        kernel,
                        stride,
                    },
                    &[_, h, w],
                ) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(invalid(i, "sizes must be positive".into()));
                    }
                    if kernel > h || kernel > w {
                        return Err(invalid(i, format!("kernel {kernel} exceeds {h}x{w} input")));
                    }
                    vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                (Layer::Conv { .. }, s) => {
                    return Err(invalid(i, format!("conv needs [C,H,W] input, got {s:?}")))
                }
                (Layer::Dense { out_features }, &[_]) => {
                    if out_features == 0 {
                        return Err(invalid(i, "sizes must be positive".into()));
                    }
                    vec![out_features]
                }
                (Layer::Dense { .. }, s) => {
                    return Err(invalid(i, format!("dense needs flat input, got {s:?}")))
                }
                (Layer::Relu, s) => s.to_vec(),
                (Layer::Flatten, s) => vec![s.iter().product()],
            };
            shapes.push(shape.clone());
        }
        let last = self.layers.len().saturating_sub(1);
        if shape != [self.classes] {
            return Err(invalid(
                last,
                format!("final output {shape:?} is not {} logits", self.classes),
            ));
        }
        Ok(shapes)
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.check()?;
        let mut out = Vec::new();
        let mut input = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((
                        format!("layer{i}.weight"),
                        vec![out_channels, input[0], kernel, kernel],
                    ));
                    out.push((format!("layer{i}.bias"), vec![out_channels]));
                }
                Layer::Dense { out_features } => {
                    out.push((format!("layer{i}.weight"), vec![input[0], out_features]));
                    out.push((format!("layer{i}.bias"), vec![out_features]));
                }
                Layer::Relu | Layer::Flatten => {}
            }
            input = shapes[i].clone();
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        write!(f, "input={}", dims.join("x"))?;
        for layer in &self.layers {
            write!(f, ";{layer}")?;
        }
        write!(f, ";classes={}", self.classes)
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    /// Parses the descriptor produced by `Display`, e.g.
    /// `input=1x16x16;conv(4,3,2);relu;flatten;dense(10);classes=10`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |detail: String| Error::Malformed {
            what: "model descriptor",
            detail,
        };
        let parse_num = |t: &str| t.trim().parse::<usize>().map_err(|e| bad(format!("`{t}`: {e}")));
        let mut parts = s.split(';');
        let input = parts
            .next()
            .and_then(|p| p.strip_prefix("input="))
            .ok_or_else(|| bad("missing input=".into()))?;
        let input_shape = input.split('x').map(parse_num).collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::new();
        let mut classes = None;
        for part in parts {
            if let Some(k) = part.strip_prefix("classes=") {
                classes = Some(parse_num(k)?);
            } else if part == "relu" {
                layers.push(Layer::Relu);
            } else if part == "flatten" {
                layers.push(Layer::Flatten);
            } else if let Some(args) = part.strip_prefix("conv(").and_then(|r| r.strip_suffix(')')) {
                let v = args.split(',').map(parse_num).collect::<Result<Vec<_>>>()?;
                let [out_channels, kernel, stride] = v[..] else {
                    return Err(bad(format!("conv takes 3 arguments: `{part}`")));
                };
                layers.push(Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                });
            } else if let Some(arg) = part.strip_prefix("dense(").and_then(|r| r.strip_suffix(')')) {
                layers.push(Layer::Dense {
                    out_features: parse_num(arg)?,
                });
            } else {
                return Err(bad(format!("unknown layer `{part}`")));
            }
        }
        let classes = classes.ok_or_else(|| bad("missing classes=".into()))?;
        ModelSpec::new(input_shape, layers, classes)
    }
}

/// A model's architecture plus its learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
    pub seed: u64,
}

/// He-uniform weights (bound `√(6/fan_in)`), zero biases, drawn in parameter
/// order from one generator seeded with `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    let mut rng = XorShift64Star::new(seed);
    let params = spec
        .param_shapes()?
        .into_iter()
        .map(|(name, shape)| {
            let value = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                // dense weights are [in×out]; conv weights are [out×in×k×k]
                let fan_in: usize = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
                Tensor::from_vec(&shape, data)
            };
            Param { name, value }
        })
        .collect();
    Ok(ModelState {
        spec: spec.clone(),
        params,
        seed,
    })
}

impl ModelState {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Checks that `batch` is `[B, ...input_shape]`.
    pub fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch {:?} does not match input shape {:?}",
                    s, self.spec.input_shape
                ),
            ));
        }
        Ok(s[0])
    }

    /// Registers every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Records the forward pass of `input` (a `[B, ...input_shape]` node) and
    /// returns the `[B×K]` logits node.
    pub fn forward_on_tape(&self, tape: &mut Tape, input: Var, params: &[Var]) -> Result<Var> {
        let batch = self.check_batch(tape.value(input))?;
        let mut x = input;
        let mut p = params.iter();
        for layer in &self.spec.layers {
            x = match *layer {
                Layer::Conv { stride, .. } => {
                    let (k, b) = (*p.next().unwrap(), *p.next().unwrap());
                    tape.conv2d(x, k, b, stride)?
                }
                Layer::Dense { .. } => {
                    let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
                    let h = tape.matmul(x, w)?;
                    tape.add_bias(h, b)?
                }
                Layer::Relu => tape.relu(x),
                Layer::Flatten => {
                    let n = tape.value(x).row_len();
                    tape.reshape(x, &[batch, n])?
                }
            };
        }
        Ok(x)
    }

    /// Pre-softmax scores `[B×K]` for a batch, without recording gradients.
    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut p = self.params.iter();
        for layer in &self.spec.layers {
            x = match *layer {
                Layer::Conv { stride, .. } => {
                    let (k, b) = (p.next().unwrap(), p.next().unwrap());
                    autodiff::conv2d(&x, &k.value, &b.value, stride)?
                }
                Layer::Dense { .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    autodiff::add_bias(&autodiff::matmul(&x, &w.value)?, &b.value)?
                }
                Layer::Relu => autodiff::relu(&x),
                Layer::Flatten => {
                    let len = x.row_len();
                    x.reshape(&[n, len])?
                }
            };
        }
        Ok(x)
    }

    /// Probability rows at temperature `t`.
    pub fn predict_proba(&self, batch: &Tensor, t: f64) -> Result<Tensor> {
        autodiff::softmax_with_temperature(&self.forward_logits(batch)?, t)
    }
}

/// Gradient of `cross_entropy(softmax(logits/T), y_true)` with respect to a
/// single input `x` (shape `input_shape`), parameters held fixed.
pub fn input_gradient(model: &ModelState, x: &Tensor, y_true: usize, t: f64) -> Result<Tensor> {
    if x.shape() != model.spec.input_shape.as_slice() {
        return Err(Error::shape(
            "input_gradient",
            format!("{:?} vs {:?}", x.shape(), model.spec.input_shape),
        ));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = x.reshape(&shape)?;
    input_gradients(model, &batch, &[y_true], t)?.reshape(x.shape())
}

/// Row-wise input gradients for a batch: row `b` is the gradient of item
/// `b`'s own loss.
pub fn input_gradients(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    t: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let input = tape.param(batch.clone());
    let logits = model.forward_on_tape(&mut tape, input, &params)?;
    let probs = tape.softmax(logits, t)?;
    let loss = tape.cross_entropy(probs, labels, Reduction::Sum)?;
    let mut grads = tape.backward(loss)?;
    Ok(grads
        .take(input)
        .unwrap_or_else(|| Tensor::zeros(batch.shape())))
}

/// Desk-scale stand-ins for the teacher, student and a plain MLP, for a given
/// per-item input shape and class count.
///
/// Convolutional specs require an image-shaped `[C,H,W]` input.
pub fn reference_specs(input_shape: &[usize], classes: usize) -> Result<BTreeMap<String, ModelSpec>> {
    let conv = |out_channels, kernel, stride| Layer::Conv {
        out_channels,
        kernel,
        stride,
    };
    let dense = |out_features| Layer::Dense { out_features };
    let mut specs = BTreeMap::new();
    specs.insert(
        "teacher-cnn".to_string(),
        ModelSpec::new(
            input_shape.to_vec(),
            vec![
                conv(8, 3, 1),
                Layer::Relu,
                conv(16, 3, 2),
                Layer::Relu,
                Layer::Flatten,
                dense(64),
                Layer::Relu,
                dense(classes),
            ],
            classes,
        )?,
    );
    specs.insert(
        "student-cnn".to_string(),
        ModelSpec::new(
            input_shape.to_vec(),
            vec![
                conv(4, 3, 2),
                Layer::Relu,
                Layer::Flatten,
                dense(32),
                Layer::Relu,
                dense(classes),
            ],
            classes,
        )?,
    );
    specs.insert(
        "mlp".to_string(),
        ModelSpec::new(
            input_shape.to_vec(),
            vec![Layer::Flatten, dense(64), Layer::Relu, dense(classes)],
            classes,
        )?,
    );
    Ok(specs)
}

/// Looks up one of [`reference_specs`] by name.
pub fn reference_spec(name: &str, input_shape: &[usize], classes: usize) -> Result<ModelSpec> {
    reference_specs(input_shape, classes)?
        .remove(name)
        .ok_or_else(|| Error::Config(format!("unknown model `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(input: usize, hidden: usize, classes: usize) -> ModelSpec {
        ModelSpec::new(
            vec![input],
            vec![
                Layer::Dense {
                    out_features: hidden,
                },
                Layer::Relu,
                Layer::Dense {
                    out_features: classes,
                },
            ],
            classes,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = reference_spec("student-cnn", &[1, 16, 16], 10).unwrap();
        let a = init_params(&spec, 42).unwrap();
        let b = init_params(&spec, 42).unwrap();
        assert_eq!(a, b);
        for p in a.params.iter().filter(|p| p.name.ends_with(".bias")) {
            assert!(p.value.data().iter().all(|&v| v == 0.0));
        }
        assert_ne!(a, init_params(&spec, 43).unwrap());
    }

    #[test]
    fn he_uniform_moments() {
        // 784·64 weights in the first layer; U(−b, b) has σ = b/√3.
        let spec = mlp(784, 64, 10);
        let state = init_params(&spec, 9).unwrap();
        let w = state.param("layer0.weight").unwrap();
        let n = w.len() as f64;
        let bound = (6.0f64 / 784.0).sqrt();
        let sigma = bound / 3f64.sqrt();
        let mean = w.data().iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - sigma).abs() < 0.02 * sigma);
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn invalid_spec_names_first_bad_layer() {
        let err = ModelSpec::new(
            vec![1, 8, 8],
            vec![
                Layer::Conv {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                },
                Layer::Dense { out_features: 4 },
            ],
            4,
        )
        .unwrap_err();
        match err {
            Error::InvalidSpec { layer, name, .. } => {
                assert_eq!(layer, 1);
                assert_eq!(name, "dense(4)");
            }
            other => panic!("unexpected {other:?}"),
        }

        let err = ModelSpec::new(vec![5], vec![Layer::Dense { out_features: 3 }], 4).unwrap_err();
        assert!(matches!(err, Error::InvalidSpec { layer: 0, .. }));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = reference_spec("student-cnn", &[1, 16, 16], 10).unwrap();
        let mut state = init_params(&spec, 1).unwrap();
        for p in &mut state.params {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = Tensor::full(&[3, 1, 16, 16], 0.7);
        let z = state.forward_logits(&batch).unwrap();
        assert_eq!(z.shape(), &[3, 10]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let spec = reference_spec("teacher-cnn", &[1, 16, 16], 10).unwrap();
        let state = init_params(&spec, 3).unwrap();
        let mut rng = XorShift64Star::new(5);
        let img: Vec<f64> = (0..256).map(|_| rng.next_f64()).collect();
        let batch = Tensor::from_vec(&[4, 1, 16, 16], img.repeat(4));
        let z = state.forward_logits(&batch).unwrap();
        for r in 1..4 {
            assert_eq!(z.row(r), z.row(0));
        }
    }

    #[test]
    fn single_dense_layer_is_matmul_plus_bias() {
        let spec = ModelSpec::new(vec![3], vec![Layer::Dense { out_features: 2 }], 2).unwrap();
        let mut state = init_params(&spec, 11).unwrap();
        state.params[1].value = Tensor::from_vec(&[2], vec![0.25, -0.5]);
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let z = state.forward_logits(&x).unwrap();
        let expected = autodiff::matmul(&x, &state.params[0].value).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(z.row(r)[c], expected.row(r)[c] + [0.25, -0.5][c]);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let spec = mlp(4, 3, 2);
        let state = init_params(&spec, 0).unwrap();
        assert!(state.forward_logits(&Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn reference_specs_contract() {
        for input in [[1, 16, 16], [1, 28, 28]] {
            for k in [6, 10] {
                let specs = reference_specs(&input, k).unwrap();
                let teacher = specs["teacher-cnn"].param_count().unwrap();
                let student = specs["student-cnn"].param_count().unwrap();
                assert!(teacher >= 30_000, "{teacher}");
                assert!(2 * student <= teacher);
                for spec in specs.values() {
                    assert_eq!(spec.check().unwrap().last().unwrap(), &vec![k]);
                }
                assert!(specs.contains_key("mlp"));
            }
        }
    }

    #[test]
    fn descriptor_round_trips() {
        for spec in reference_specs(&[1, 16, 16], 10).unwrap().values() {
            let text = spec.to_string();
            assert_eq!(&text.parse::<ModelSpec>().unwrap(), spec);
        }
        assert_eq!(
            mlp(4, 3, 2).to_string(),
            "input=4;dense(3);relu;dense(2);classes=2"
        );
        assert!("input=4;dense(3);bogus;classes=3".parse::<ModelSpec>().is_err());
    }

    #[test]
    fn logistic_input_gradient_matches_hand_derivation() {
        // Z = [w·x, −w·x] with w = [1, −1]. dL/dZ = [p0 − 1, p1] and
        // p1 = 1 − p0, so dL/dx = (p0 − 1)·w − p1·w = 2(p0 − 1)·w.
        let spec = ModelSpec::new(vec![2], vec![Layer::Dense { out_features: 2 }], 2).unwrap();
        let mut state = init_params(&spec, 0).unwrap();
        state.params[0].value = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, -1.0, 1.0]);
        let x = Tensor::from_vec(&[2], vec![0.5, 0.5]);
        let g = input_gradient(&state, &x, 0, 1.0).unwrap();
        // w·x = 0 → p0 = 1/2
        let p0 = 0.5;
        assert_eq!(g.data(), &[2.0 * (p0 - 1.0), -2.0 * (p0 - 1.0)]);
    }

    #[test]
    fn logit_shift_leaves_input_gradient_unchanged() {
        let spec = mlp(4, 5, 3);
        let mut state = init_params(&spec, 2).unwrap();
        let x = Tensor::from_vec(&[4], vec![0.1, 0.9, 0.4, 0.3]);
        let g0 = input_gradient(&state, &x, 1, 1.0).unwrap();
        state.params[3].value.data_mut().iter_mut().for_each(|b| *b += 2.5);
        let g1 = input_gradient(&state, &x, 1, 1.0).unwrap();
        for (a, b) in g0.data().iter().zip(g1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
