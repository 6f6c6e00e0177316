//! Adam, reduce-on-plateau scheduling and the mini-batch training loop.

use crate::autodiff::{Reduction, Tape, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{ModelState, Param};
use crate::rng::XorShift64Star;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

pub const PLATEAU_FACTOR: f64 = 0.1;
pub const PLATEAU_PATIENCE: usize = 3;
pub const PLATEAU_MIN_LR: f64 = 1e-4;
/// A validation loss counts as an improvement only if it beats the best so
/// far by more than this.
pub const PLATEAU_THRESHOLD: f64 = 1e-8;

/// Adam with bias correction. Moments are zero-initialized and mirror the
/// parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Param], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter. Fails before touching anything if a
    /// gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: {:?} vs {:?}", p.name, p.value.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }
}

/// Reduce-on-plateau in "min" mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: f64,
    pub stall: usize,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        PlateauScheduler {
            factor: PLATEAU_FACTOR,
            patience: PLATEAU_PATIENCE,
            min_lr: PLATEAU_MIN_LR,
            best: f64::INFINITY,
            stall: 0,
        }
    }
}

impl PlateauScheduler {
    /// Feeds one epoch's validation loss and returns the learning rate to use
    /// next. The rate is cut once the loss has failed to improve for more than
    /// `patience` consecutive calls; it never rises and never falls below
    /// `min_lr` through a cut.
    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - PLATEAU_THRESHOLD {
            self.best = val_loss;
            self.stall = 0;
            return lr;
        }
        self.stall += 1;
        if self.stall > self.patience {
            self.stall = 0;
            return (lr * self.factor).max(self.min_lr).min(lr);
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Softmax temperature inside the training loss. Never stored in the model.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Which dataset a batch was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A training loss over a batch of logits.
pub trait Objective {
    /// `indices` are positions in the dataset named by `split`; `labels` are
    /// the matching true classes. Must return a scalar mean over the batch.
    fn loss(
        &self,
        tape: &mut Tape,
        logits: Var,
        split: Split,
        indices: &[usize],
        labels: &[usize],
    ) -> Result<Var>;
}

/// Mean cross-entropy through a softmax at a fixed temperature.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropyObjective {
    pub temperature: f64,
}

impl Objective for CrossEntropyObjective {
    fn loss(&self, tape: &mut Tape, logits: Var, _: Split, _: &[usize], labels: &[usize]) -> Result<Var> {
        let probs = tape.softmax(logits, self.temperature)?;
        tape.cross_entropy(probs, labels, Reduction::Mean)
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub lr: Vec<f64>,
}

fn check_compatible(model: &ModelState, ds: &LabeledDataset) -> Result<()> {
    if ds.item_shape() != model.spec.input_shape.as_slice() {
        return Err(Error::shape(
            "train",
            format!(
                "dataset items {:?} vs model input {:?}",
                ds.item_shape(),
                model.spec.input_shape
            ),
        ));
    }
    if ds.classes > model.spec.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model emits {}",
            ds.classes, model.spec.classes
        )));
    }
    Ok(())
}

/// Loss and parameter gradients for one batch.
pub fn batch_gradients(
    model: &ModelState,
    objective: &dyn Objective,
    images: &Tensor,
    split: Split,
    indices: &[usize],
    labels: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let input = tape.constant(images.clone());
    let logits = model.forward_on_tape(&mut tape, input, &params)?;
    let loss = objective.loss(&mut tape, logits, split, indices, labels)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok((value, grads))
}

/// Mean objective value over a dataset, evaluated in batches.
pub fn dataset_loss(
    model: &ModelState,
    objective: &dyn Objective,
    ds: &LabeledDataset,
    split: Split,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let input = tape.constant(ds.images.select_rows(chunk));
        let logits = model.forward_on_tape(&mut tape, input, &params)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
        let loss = objective.loss(&mut tape, logits, split, chunk, &labels)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Trains with mean cross-entropy at `cfg.temperature`.
pub fn train(
    model: &ModelState,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(ModelState, History)> {
    let objective = CrossEntropyObjective {
        temperature: cfg.temperature,
    };
    train_with(model, train_set, val_set, cfg, &objective)
}

/// The training loop: per epoch, a seeded reshuffle, one Adam step per
/// mini-batch on the objective's batch mean, then one scheduler step on the
/// mean validation loss.
pub fn train_with(
    model: &ModelState,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &TrainConfig,
    objective: &dyn Objective,
) -> Result<(ModelState, History)> {
    cfg.validate()?;
    check_compatible(model, train_set)?;
    check_compatible(model, val_set)?;
    let mut state = model.clone();
    let mut adam = AdamState::new(&state.params, cfg.lr);
    let mut scheduler = PlateauScheduler::default();
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let order = XorShift64Star::derived(cfg.seed, epoch as u64).permutation(train_set.len());
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let images = train_set.images.select_rows(chunk);
            let wrap = |e: Error| Error::Training {
                epoch,
                batch: batch_no,
                source: Box::new(e),
            };
            let (loss, grads) =
                batch_gradients(&state, objective, &images, Split::Train, chunk, &labels).map_err(wrap)?;
            adam.step(&mut state.params, &grads).map_err(wrap)?;
            epoch_loss += loss * chunk.len() as f64;
        }
        history.train_loss.push(epoch_loss / train_set.len() as f64);
        history.lr.push(adam.lr);
        let val_loss = dataset_loss(&state, objective, val_set, Split::Val, cfg.batch_size)?;
        history.val_loss.push(val_loss);
        adam.lr = scheduler.step(val_loss, adam.lr);
    }
    Ok((state, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Layer, ModelSpec};

    fn params(values: &[f64]) -> Vec<Param> {
        vec![Param {
            name: "w".into(),
            value: Tensor::from_vec(&[values.len()], values.to_vec()),
        }]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params(&[0.5, -2.0]);
        let mut adam = AdamState::new(&p, 0.1);
        for _ in 0..3 {
            adam.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p[0].value.data(), &[0.5, -2.0]);
        assert_eq!(adam.t, 3);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = g and v̂ = g², so the first update is lr·g/(|g| + eps).
        let lr = 0.01;
        let g = [3.0, -0.5, 1e-3];
        let mut p = params(&[0.0; 3]);
        let mut adam = AdamState::new(&p, lr);
        adam.step(&mut p, &[Tensor::from_vec(&[3], g.to_vec())]).unwrap();
        for (w, gi) in p[0].value.data().iter().zip(g) {
            let closed_form = -lr * gi / (gi.abs() + ADAM_EPS);
            assert!((w - closed_form).abs() < 1e-15);
            assert!((w + lr * gi.signum()).abs() < lr * 1e-5);
        }
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut p = params(&[1.0]);
        let mut adam = AdamState::new(&p, 0.1);
        let err = adam.step(&mut p, &[Tensor::from_vec(&[1], vec![f64::NAN])]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(p[0].value.data(), &[1.0]);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn plateau_hand_trace() {
        let mut s = PlateauScheduler::default();
        let mut lr = 0.01;
        let mut trace = Vec::new();
        for loss in [1.0, 0.9, 0.95, 0.96, 0.97, 0.98] {
            lr = s.step(loss, lr);
            trace.push(lr);
        }
        assert_eq!(trace, vec![0.01, 0.01, 0.01, 0.01, 0.01, 0.001]);
        assert_eq!(s.stall, 0);
    }

    #[test]
    fn plateau_respects_floor_and_decreasing_losses() {
        let mut s = PlateauScheduler::default();
        let mut lr = 1e-4;
        for _ in 0..20 {
            lr = s.step(1.0, lr);
            assert_eq!(lr, 1e-4);
        }
        let mut s = PlateauScheduler::default();
        let mut lr = 0.05;
        for i in 0..50 {
            lr = s.step(10.0 - i as f64 * 0.1, lr);
        }
        assert_eq!(lr, 0.05);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let ds = crate::data::generate_synthetic(6, 4, 8, 3).unwrap();
        let spec = ModelSpec::new(
            vec![1, 8, 8],
            vec![Layer::Flatten, Layer::Dense { out_features: 6 }],
            6,
        )
        .unwrap();
        let model = init_params(&spec, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let (trained, history) = train(&model, &ds, &ds, &cfg).unwrap();
        assert_eq!(trained.params, model.params);
        assert_eq!(history.train_loss.len(), 2);
        assert_eq!(history.val_loss.len(), 2);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            temperature: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
