//! FGSM, the CW-L2 optimization attack, and ε-sweeps over a test set.
//!
//! Both attacks keep adversarial pixels inside `[0, 1]`. FGSM takes a single
//! signed-gradient step of size ε. CW minimizes `‖δ‖₂² + c·f(x+δ)` with Adam on
//! δ, projecting `x + δ` back onto the box after each step, where `f` is the
//! clipped logit margin (see [`Tape::margin`]).

use rayon::prelude::*;

use crate::autodiff::{sign, MarginGoal, Tape};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{self, AttackKind, SweepRecord};
use crate::nn::{input_gradients, ModelState, Param};
use crate::tensor::Tensor;
use crate::train::AdamState;

/// Items per gradient batch in FGSM.
const FGSM_CHUNK: usize = 128;

/// ε from 1% to 10% in steps of 1%.
pub fn fgsm_epsilon_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 100.0).collect()
}

/// The distillation comparison grid: 0%, 0.7%, 1%, 2%, 3%, 5%, 10%, 20%, 30%.
pub fn distill_epsilon_grid() -> Vec<f64> {
    vec![0.0, 0.007, 0.01, 0.02, 0.03, 0.05, 0.10, 0.20, 0.30]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgsmConfig {
    /// Step size as a fraction of the pixel range.
    pub epsilon: f64,
    /// Softmax temperature of the loss whose gradient is followed.
    pub temperature: f64,
}

impl FgsmConfig {
    pub fn new(epsilon: f64) -> Self {
        FgsmConfig {
            epsilon,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CwTarget {
    Untargeted,
    Targeted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwConfig {
    pub c: f64,
    pub kappa: f64,
    pub max_iterations: usize,
    /// Adam learning rate on δ.
    pub step_size: f64,
    pub target: CwTarget,
    /// Optional elementwise clamp of the final δ to `[−cap, cap]`.
    pub epsilon_cap: Option<f64>,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            c: 1.0,
            kappa: 0.0,
            max_iterations: 500,
            step_size: 0.01,
            target: CwTarget::Untargeted,
            epsilon_cap: None,
        }
    }
}

impl CwConfig {
    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::Config(format!("CW constant c must be positive, got {}", self.c)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Config(format!("kappa must be ≥ 0, got {}", self.kappa)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("CW needs at least one iteration".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("CW step size must be positive".into()));
        }
        if let Some(cap) = self.epsilon_cap {
            check_epsilon(cap)?;
        }
        Ok(())
    }
}

/// Outcome of attacking a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// Same shape as the input batch, every pixel in `[0, 1]`.
    pub adversarial: Tensor,
    /// Prediction differs from the true label (or equals the target).
    pub success: Vec<bool>,
    pub l2: Vec<f64>,
    pub linf: Vec<f64>,
    /// Optimization steps taken per item.
    pub iterations: Vec<usize>,
}

impl AttackResult {
    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }

    pub fn mean_l2(&self) -> f64 {
        self.l2.iter().sum::<f64>() / self.l2.len() as f64
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    Ok(())
}

fn check_inputs(model: &ModelState, x: &Tensor, labels: &[usize]) -> Result<usize> {
    let n = model.check_batch(x)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.spec.classes) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            classes: model.spec.classes,
        });
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("attack inputs must lie in [0, 1]".into()));
    }
    Ok(n)
}

fn perturbation_norms(x: &Tensor, adv: &Tensor) -> (Vec<f64>, Vec<f64>) {
    (0..x.rows())
        .map(|i| {
            let (mut sq, mut max) = (0.0f64, 0.0f64);
            for (a, b) in adv.row(i).iter().zip(x.row(i)) {
                let d = a - b;
                sq += d * d;
                max = max.max(d.abs());
            }
            (sq.sqrt(), max)
        })
        .unzip()
}

/// `x_adv = clamp(x + ε·sign(∇ₓ L), 0, 1)` with `sign(0) = 0`.
pub fn fgsm_attack(model: &ModelState, x: &Tensor, labels: &[usize], cfg: &FgsmConfig) -> Result<AttackResult> {
    check_epsilon(cfg.epsilon)?;
    let n = check_inputs(model, x, labels)?;
    let adversarial = if cfg.epsilon == 0.0 {
        x.clone()
    } else {
        let starts: Vec<usize> = (0..n).step_by(FGSM_CHUNK).collect();
        let grads = starts
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + FGSM_CHUNK).min(n)).collect();
                input_gradients(model, &x.select_rows(&idx), &labels[s..s + idx.len()], cfg.temperature)
            })
            .collect::<Result<Vec<_>>>()?;
        let data = x
            .data()
            .iter()
            .zip(grads.iter().flat_map(|g| g.data()))
            .map(|(&xv, &g)| (xv + cfg.epsilon * sign(g)).clamp(0.0, 1.0))
            .collect();
        Tensor::new(x.shape().to_vec(), data)?
    };
    let preds = metrics::predictions(model, &adversarial)?;
    let success = preds.iter().zip(labels).map(|(p, y)| p != y).collect();
    let (l2, linf) = perturbation_norms(x, &adversarial);
    Ok(AttackResult {
        adversarial,
        success,
        l2,
        linf,
        iterations: vec![1; n],
    })
}

/// Result of optimizing one item.
#[derive(Debug, Clone)]
struct CwItem {
    delta: Vec<f64>,
    success: bool,
    iterations: usize,
}

fn goal_met(logits: &[f64], label: usize, target: CwTarget) -> bool {
    let pred = metrics::argmax(logits);
    match target {
        CwTarget::Untargeted => pred != label,
        CwTarget::Targeted(t) => pred == t,
    }
}

fn cw_item(model: &ModelState, x: &[f64], label: usize, cfg: &CwConfig) -> Result<CwItem> {
    let mut shape = vec![1];
    shape.extend_from_slice(&model.spec.input_shape);
    let x_t = Tensor::new(shape.clone(), x.to_vec())?;
    let goal = match cfg.target {
        CwTarget::Untargeted => MarginGoal::Untargeted(vec![label]),
        CwTarget::Targeted(t) => MarginGoal::Targeted(vec![t]),
    };
    let mut delta = vec![Param {
        name: "delta".into(),
        value: Tensor::zeros(&shape),
    }];
    let mut adam = AdamState::new(&delta, cfg.step_size);
    let mut best: Option<(f64, Vec<f64>)> = None;

    // Evaluates the current iterate; returns the gradient of the objective.
    let evaluate = |delta: &Tensor, best: &mut Option<(f64, Vec<f64>)>| -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let xv = tape.constant(x_t.clone());
        let dv = tape.param(delta.clone());
        let input = tape.add(xv, dv)?;
        let logits = model.forward_on_tape(&mut tape, input, &params)?;
        let f = tape.margin(logits, goal.clone(), cfg.kappa)?;
        let dist = tape.sum_squares(dv);
        let scaled = tape.scale(f, cfg.c);
        let objective = tape.add(dist, scaled)?;
        let value = tape.value(objective).item();
        if goal_met(tape.value(logits).data(), label, cfg.target)
            && best.as_ref().map_or(true, |(b, _)| value < *b)
        {
            *best = Some((value, delta.data().to_vec()));
        }
        let mut grads = tape.backward(objective)?;
        Ok(grads.take(dv).expect("delta is a parameter"))
    };

    for _ in 0..cfg.max_iterations {
        let grad = evaluate(&delta[0].value, &mut best)?;
        adam.step(&mut delta, &[grad])?;
        for (d, &xv) in delta[0].value.data_mut().iter_mut().zip(x) {
            *d = (xv + *d).clamp(0.0, 1.0) - xv;
        }
    }
    evaluate(&delta[0].value, &mut best)?;

    Ok(match best {
        Some((_, d)) => CwItem {
            delta: d,
            success: true,
            iterations: cfg.max_iterations,
        },
        None => CwItem {
            delta: delta[0].value.data().to_vec(),
            success: false,
            iterations: cfg.max_iterations,
        },
    })
}

fn apply_cap(x: &[f64], delta: &[f64], cap: Option<f64>) -> Vec<f64> {
    x.iter()
        .zip(delta)
        .map(|(&xv, &d)| {
            let d = match cap {
                Some(c) => d.clamp(-c, c),
                None => d,
            };
            (xv + d).clamp(0.0, 1.0)
        })
        .collect()
}

/// Uncapped CW solutions for a batch, ready to be capped at any ε.
#[derive(Debug, Clone)]
pub struct CwRun {
    items: Vec<CwItem>,
    target: CwTarget,
}

/// Runs the per-item optimizations, in parallel, ignoring `epsilon_cap`.
pub fn cw_optimize(model: &ModelState, x: &Tensor, labels: &[usize], cfg: &CwConfig) -> Result<CwRun> {
    cfg.validate()?;
    check_inputs(model, x, labels)?;
    if let CwTarget::Targeted(t) = cfg.target {
        if t >= model.spec.classes {
            return Err(Error::IndexOutOfRange {
                index: t,
                classes: model.spec.classes,
            });
        }
    }
    let items = (0..labels.len())
        .into_par_iter()
        .map(|i| cw_item(model, x.row(i), labels[i], cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(CwRun {
        items,
        target: cfg.target,
    })
}

impl CwRun {
    /// The attack result with δ clamped to `[−cap, cap]`; with a cap, success
    /// is re-evaluated on the clamped images.
    pub fn with_cap(
        &self,
        model: &ModelState,
        x: &Tensor,
        labels: &[usize],
        cap: Option<f64>,
    ) -> Result<AttackResult> {
        if let Some(c) = cap {
            check_epsilon(c)?;
        }
        let data: Vec<f64> = self
            .items
            .iter()
            .enumerate()
            .flat_map(|(i, item)| apply_cap(x.row(i), &item.delta, cap))
            .collect();
        let adversarial = Tensor::new(x.shape().to_vec(), data)?;
        let success = if cap.is_some() {
            let z = metrics::logits_for(model, &adversarial)?;
            (0..labels.len())
                .map(|i| goal_met(z.row(i), labels[i], self.target))
                .collect()
        } else {
            self.items.iter().map(|it| it.success).collect()
        };
        let (l2, linf) = perturbation_norms(x, &adversarial);
        Ok(AttackResult {
            adversarial,
            success,
            l2,
            linf,
            iterations: self.items.iter().map(|it| it.iterations).collect(),
        })
    }
}

/// CW-L2: per item, minimize `‖δ‖₂² + c·f(x+δ)` subject to `x+δ ∈ [0,1]ⁿ`.
///
/// Returns the lowest-objective iterate that met the goal, or the final
/// iterate with `success = false`. With `epsilon_cap` set, that δ is then
/// clamped to `[−cap, cap]` and success is re-evaluated.
pub fn cw_attack(model: &ModelState, x: &Tensor, labels: &[usize], cfg: &CwConfig) -> Result<AttackResult> {
    cw_optimize(model, x, labels, cfg)?.with_cap(model, x, labels, cfg.epsilon_cap)
}

/// Which attack a sweep runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepAttack {
    Fgsm { temperature: f64 },
    /// ε becomes the CW `epsilon_cap`; the config's own cap is ignored.
    Cw(CwConfig),
}

impl SweepAttack {
    pub fn kind(&self) -> AttackKind {
        match self {
            SweepAttack::Fgsm { .. } => AttackKind::Fgsm,
            SweepAttack::Cw(_) => AttackKind::Cw,
        }
    }
}

fn record(model: &ModelState, test: &LabeledDataset, epsilon: f64, kind: AttackKind, r: &AttackResult) -> Result<SweepRecord> {
    let (top1_error, top5_error) = metrics::top1_top5(model, &r.adversarial, &test.labels)?;
    Ok(SweepRecord {
        epsilon,
        top1_error,
        top5_error,
        mean_l2: r.mean_l2(),
        success_rate: r.success_rate(),
        attack: kind,
    })
}

/// Attacks the whole test set at each ε and records top-1/top-5 error on
/// the adversarial images.
///
/// For CW the expensive optimization does not depend on the cap, so it runs
/// once and each ε only re-applies the cap; the records equal those of
/// separate [`cw_attack`] calls with `epsilon_cap = Some(ε)`.
pub fn epsilon_sweep(
    model: &ModelState,
    test: &LabeledDataset,
    attack: &SweepAttack,
    epsilons: &[f64],
) -> Result<Vec<SweepRecord>> {
    if epsilons.is_empty() {
        return Err(Error::Empty("epsilon list"));
    }
    for &e in epsilons {
        check_epsilon(e).map_err(|source| Error::Sweep {
            epsilon: e,
            source: Box::new(source),
        })?;
    }
    let kind = attack.kind();
    match attack {
        SweepAttack::Fgsm { temperature } => epsilons
            .iter()
            .map(|&epsilon| {
                let cfg = FgsmConfig {
                    epsilon,
                    temperature: *temperature,
                };
                fgsm_attack(model, &test.images, &test.labels, &cfg)
                    .and_then(|r| record(model, test, epsilon, kind, &r))
                    .map_err(|source| Error::Sweep {
                        epsilon,
                        source: Box::new(source),
                    })
            })
            .collect(),
        SweepAttack::Cw(base) => {
            let run = cw_optimize(model, &test.images, &test.labels, base).map_err(|source| Error::Sweep {
                epsilon: epsilons[0],
                source: Box::new(source),
            })?;
            sweep_cw_run(model, test, &run, epsilons)
        }
    }
}

/// Sweep records for an existing CW run, one per ε cap.
pub fn sweep_cw_run(
    model: &ModelState,
    test: &LabeledDataset,
    run: &CwRun,
    epsilons: &[f64],
) -> Result<Vec<SweepRecord>> {
    epsilons
        .iter()
        .map(|&epsilon| {
            run.with_cap(model, &test.images, &test.labels, Some(epsilon))
                .and_then(|r| record(model, test, epsilon, AttackKind::Cw, &r))
                .map_err(|source| Error::Sweep {
                    epsilon,
                    source: Box::new(source),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Layer, ModelSpec};

    /// Two logits `[w·x, −w·x]` over a flat input.
    fn logistic(w: &[f64]) -> ModelState {
        let spec = ModelSpec::new(vec![w.len()], vec![Layer::Dense { out_features: 2 }], 2).unwrap();
        let mut m = init_params(&spec, 0).unwrap();
        let mut data = Vec::new();
        for &wi in w {
            data.extend_from_slice(&[wi, -wi]);
        }
        m.params[0].value = Tensor::from_vec(&[w.len(), 2], data);
        m
    }

    #[test]
    fn epsilon_grids() {
        let f = fgsm_epsilon_grid();
        assert_eq!(f.len(), 10);
        assert_eq!(f[0], 0.01);
        assert_eq!(f[9], 0.1);
        for (i, e) in f.iter().enumerate() {
            assert!((e - 0.01 * (i + 1) as f64).abs() < 1e-15);
        }
        assert_eq!(
            distill_epsilon_grid(),
            vec![0.0, 0.007, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.3]
        );
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let m = logistic(&[1.0, -1.0, 0.5]);
        let x = Tensor::from_vec(&[2, 3], vec![0.1, 0.9, 0.0, 1.0, 0.5, 0.3]);
        let r = fgsm_attack(&m, &x, &[0, 1], &FgsmConfig::new(0.0)).unwrap();
        assert_eq!(r.adversarial, x);
        let preds = metrics::predictions(&m, &x).unwrap();
        let baseline: Vec<bool> = preds.iter().zip([0, 1]).map(|(&p, y)| p != y).collect();
        assert_eq!(r.success, baseline);
    }

    #[test]
    fn fgsm_logistic_hand_computation() {
        // dL/dx = 2(p0 − 1)·w for y = 0; p0 < 1 so the sign is −sign(w).
        let w = [1.0, -1.0, 0.0, 2.0];
        let m = logistic(&w);
        let x = Tensor::from_vec(&[1, 4], vec![0.5, 0.5, 0.5, 0.95]);
        let r = fgsm_attack(&m, &x, &[0], &FgsmConfig::new(0.1)).unwrap();
        let expected = [0.4, 0.6, 0.5, 0.85];
        for (a, e) in r.adversarial.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
        assert!((r.linf[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fgsm_clamps_to_box() {
        let m = logistic(&[1.0, -1.0]);
        // y = 1 → ascend toward class 0: x0 up, x1 down
        let x = Tensor::from_vec(&[1, 2], vec![0.97, 0.02]);
        let r = fgsm_attack(&m, &x, &[1], &FgsmConfig::new(0.05)).unwrap();
        assert_eq!(r.adversarial.data(), &[1.0, 0.0]);
        assert!(r.linf[0] <= 0.05 + 1e-9);
    }

    #[test]
    fn fgsm_rejects_bad_epsilon_and_inputs() {
        let m = logistic(&[1.0]);
        let x = Tensor::from_vec(&[1, 1], vec![0.5]);
        assert!(fgsm_attack(&m, &x, &[0], &FgsmConfig::new(1.5)).is_err());
        assert!(fgsm_attack(&m, &x, &[0, 1], &FgsmConfig::new(0.1)).is_err());
        let outside = Tensor::from_vec(&[1, 1], vec![1.5]);
        assert!(fgsm_attack(&m, &outside, &[0], &FgsmConfig::new(0.1)).is_err());
    }

    #[test]
    fn cw_misclassified_input_keeps_zero_delta() {
        let m = logistic(&[2.0]);
        // Z = [2x, −2x] with x = 0.3 → class 0, so y = 1 is already wrong.
        let x = Tensor::from_vec(&[1, 1], vec![0.3]);
        let r = cw_attack(&m, &x, &[1], &CwConfig::default()).unwrap();
        assert!(r.success[0]);
        assert_eq!(r.adversarial, x);
        assert_eq!(r.l2[0], 0.0);
    }

    #[test]
    fn cw_budget_exhaustion() {
        let m = logistic(&[4.0]);
        let x = Tensor::from_vec(&[1, 1], vec![0.9]);
        let cfg = CwConfig {
            max_iterations: 1,
            ..CwConfig::default()
        };
        let r = cw_attack(&m, &x, &[0], &cfg).unwrap();
        assert!(!r.success[0]);
        assert!(r.l2[0] <= 0.011);
        assert_eq!(r.iterations, vec![1]);
    }

    #[test]
    fn cw_targeted_reaches_target() {
        let spec = ModelSpec::new(vec![3], vec![Layer::Dense { out_features: 3 }], 3).unwrap();
        let mut m = init_params(&spec, 0).unwrap();
        m.params[0].value = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = Tensor::from_vec(&[1, 3], vec![0.6, 0.4, 0.2]);
        let cfg = CwConfig {
            target: CwTarget::Targeted(2),
            ..CwConfig::default()
        };
        let r = cw_attack(&m, &x, &[0], &cfg).unwrap();
        assert!(r.success[0]);
        let z = m.forward_logits(&r.adversarial).unwrap();
        assert_eq!(metrics::argmax(z.row(0)), 2);
    }

    #[test]
    fn cw_cap_bounds_linf_and_reevaluates() {
        let m = logistic(&[3.0, 3.0]);
        let x = Tensor::from_vec(&[1, 2], vec![0.6, 0.6]);
        let cfg = CwConfig {
            epsilon_cap: Some(0.01),
            ..CwConfig::default()
        };
        let r = cw_attack(&m, &x, &[0], &cfg).unwrap();
        assert!(r.linf[0] <= 0.01 + 1e-12);
        // a 0.01 cap cannot move w·x = 3.6 across zero
        assert!(!r.success[0]);
    }
}
