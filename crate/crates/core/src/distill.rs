//! Defensive distillation: a teacher trained at temperature `T`, its softened
//! outputs, and a smaller student trained on
//! `cross_entropy(student at 1, y) + λ·KL(soft labels ‖ student at T)`.
//!
//! Students are always evaluated and attacked at temperature 1.

use crate::attacks::{self, CwConfig, SweepAttack};
use crate::autodiff::{self, Reduction, Tape, Var};
use crate::data::{self, LabeledDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, SweepRecord};
use crate::nn::{init_params, reference_spec, ModelSpec, ModelState};
use crate::tensor::Tensor;
use crate::train::{self, History, Objective, Split, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub teacher: ModelSpec,
    pub student: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub split: SplitSpec,
    /// Grid for the FGSM and capped-CW comparisons.
    pub epsilons: Vec<f64>,
    /// CW settings for the comparison; its `epsilon_cap` is ignored.
    pub cw: CwConfig,
    /// Only the first `cw_items` test images are attacked with CW.
    pub cw_items: usize,
}

impl DistillConfig {
    /// T = 100, λ = 1, 10 epochs, teacher-cnn → student-cnn, on a 2000/400/600
    /// split of the default synthetic set, with Adam at lr 5e-3 on batches of 16.
    pub fn desk_default(input_shape: &[usize], classes: usize, seed: u64) -> Result<Self> {
        Ok(DistillConfig {
            temperature: 100.0,
            lambda: 1.0,
            teacher: reference_spec("teacher-cnn", input_shape, classes)?,
            student: reference_spec("student-cnn", input_shape, classes)?,
            epochs: 10,
            batch_size: 16,
            lr: 5e-3,
            seed,
            split: SplitSpec {
                train: 2000,
                val: 400,
                test: 600,
                seed,
            },
            epsilons: attacks::distill_epsilon_grid(),
            cw: CwConfig::default(),
            cw_items: 200,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        let (t, s) = (self.teacher.param_count()?, self.student.param_count()?);
        if s >= t {
            return Err(Error::Config(format!(
                "student ({s} parameters) must be smaller than teacher ({t})"
            )));
        }
        Ok(())
    }

    fn train_config(&self, temperature: f64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            temperature,
            seed: self.seed,
        }
    }
}

/// Trains the teacher with cross-entropy through a softmax at `cfg.temperature`.
pub fn train_teacher(
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &DistillConfig,
) -> Result<(ModelState, History)> {
    cfg.validate()?;
    let teacher = init_params(&cfg.teacher, cfg.seed)?;
    train::train(&teacher, train_set, val_set, &cfg.train_config(cfg.temperature))
}

/// Teacher probabilities at temperature `t`, one row per item.
pub fn soften_labels(teacher: &ModelState, ds: &LabeledDataset, t: f64) -> Result<Tensor> {
    autodiff::softmax_with_temperature(&metrics::logits_for(teacher, &ds.images)?, t)
}

/// `cross_entropy(student_at_1, y) + λ·KL(soft ‖ student_at_t)` for one item.
pub fn distillation_total_loss(
    student_at_t: &Tensor,
    soft_labels: &Tensor,
    student_at_1: &Tensor,
    y_true: usize,
    lambda: f64,
) -> Result<f64> {
    if student_at_t.len() != student_at_1.len() {
        return Err(Error::shape(
            "distillation_total_loss",
            format!("lengths {} and {}", student_at_t.len(), student_at_1.len()),
        ));
    }
    let ce = autodiff::cross_entropy(student_at_1, y_true)?;
    let kl = autodiff::kl_divergence(soft_labels, student_at_t)?;
    Ok(ce + lambda * kl)
}

/// The distillation loss as a training [`Objective`], batch-mean over items.
#[derive(Debug, Clone)]
pub struct DistillationObjective {
    pub temperature: f64,
    pub lambda: f64,
    pub soft_train: Tensor,
    pub soft_val: Tensor,
}

impl Objective for DistillationObjective {
    fn loss(
        &self,
        tape: &mut Tape,
        logits: Var,
        split: Split,
        indices: &[usize],
        labels: &[usize],
    ) -> Result<Var> {
        let soft = match split {
            Split::Train => &self.soft_train,
            Split::Val => &self.soft_val,
        };
        let target = soft.select_rows(indices);
        let p1 = tape.softmax(logits, 1.0)?;
        let ce = tape.cross_entropy(p1, labels, Reduction::Mean)?;
        let pt = tape.softmax(logits, self.temperature)?;
        let kl = tape.kl_divergence(&target, pt, Reduction::Mean)?;
        let weighted = tape.scale(kl, self.lambda);
        tape.add(ce, weighted)
    }
}

/// Trains the student from `init` on the distillation objective.
pub fn train_distilled_student(
    teacher: &ModelState,
    init: &ModelState,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &DistillConfig,
) -> Result<(ModelState, History)> {
    let objective = DistillationObjective {
        temperature: cfg.temperature,
        lambda: cfg.lambda,
        soft_train: soften_labels(teacher, train_set, cfg.temperature)?,
        soft_val: soften_labels(teacher, val_set, cfg.temperature)?,
    };
    train::train_with(init, train_set, val_set, &cfg.train_config(1.0), &objective)
}

/// Robustness of one student.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentEvaluation {
    pub clean_accuracy: f64,
    pub fgsm: Vec<SweepRecord>,
    /// CW with each ε as an L∞ cap, over the first `cw_items` test images.
    pub cw: Vec<SweepRecord>,
    /// Uncapped CW success rate over the same images.
    pub cw_success_rate: f64,
    /// Uncapped CW success rate over those of them the student classifies
    /// correctly.
    pub cw_success_rate_on_correct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub teacher_accuracy: f64,
    pub baseline: StudentEvaluation,
    pub distilled: StudentEvaluation,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub teacher: ModelState,
    pub distilled: ModelState,
    pub baseline: ModelState,
    pub teacher_history: History,
    pub distilled_history: History,
    pub baseline_history: History,
    pub report: DistillReport,
}

pub fn evaluate_student(model: &ModelState, test: &LabeledDataset, cfg: &DistillConfig) -> Result<StudentEvaluation> {
    let clean_accuracy = metrics::accuracy(model, test)?;
    let fgsm = attacks::epsilon_sweep(model, test, &SweepAttack::Fgsm { temperature: 1.0 }, &cfg.epsilons)?;
    let n = cfg.cw_items.min(test.len()).max(1);
    let idx: Vec<usize> = (0..n).collect();
    let cw_set = test.subset(&idx, format!("{}/cw", test.name)).expect("nonempty");
    let run = attacks::cw_optimize(model, &cw_set.images, &cw_set.labels, &cfg.cw)?;
    let uncapped = run.with_cap(model, &cw_set.images, &cw_set.labels, None)?;
    let preds = metrics::predictions(model, &cw_set.images)?;
    let correct: Vec<usize> = (0..n).filter(|&i| preds[i] == cw_set.labels[i]).collect();
    let on_correct = if correct.is_empty() {
        0.0
    } else {
        correct.iter().filter(|&&i| uncapped.success[i]).count() as f64 / correct.len() as f64
    };
    Ok(StudentEvaluation {
        clean_accuracy,
        fgsm,
        cw: attacks::sweep_cw_run(model, &cw_set, &run, &cfg.epsilons)?,
        cw_success_rate: uncapped.success_rate(),
        cw_success_rate_on_correct: on_correct,
    })
}

/// Splits `ds`, trains teacher, distilled student and an identically
/// initialized baseline student, then evaluates both students clean and
/// under FGSM and CW.
pub fn distill_pipeline(ds: &LabeledDataset, cfg: &DistillConfig) -> Result<DistillOutcome> {
    cfg.validate()?;
    let (train_set, val_set, test_set) = data::split(ds, &cfg.split)?;
    let missing = |part| Error::Config(format!("distillation needs a nonempty {part} split"));
    let train_set = train_set.ok_or_else(|| missing("train"))?;
    let val_set = val_set.ok_or_else(|| missing("validation"))?;
    let test_set = test_set.ok_or_else(|| missing("test"))?;

    let (teacher, teacher_history) = train_teacher(&train_set, &val_set, cfg)?;
    let student_init = init_params(&cfg.student, cfg.seed.wrapping_add(1))?;
    let (distilled, distilled_history) =
        train_distilled_student(&teacher, &student_init, &train_set, &val_set, cfg)?;
    let (baseline, baseline_history) =
        train::train(&student_init, &train_set, &val_set, &cfg.train_config(1.0))?;

    let report = DistillReport {
        teacher_accuracy: metrics::accuracy(&teacher, &test_set)?,
        baseline: evaluate_student(&baseline, &test_set, cfg)?,
        distilled: evaluate_student(&distilled, &test_set, cfg)?,
    };
    Ok(DistillOutcome {
        teacher,
        distilled,
        baseline,
        teacher_history,
        distilled_history,
        baseline_history,
        report,
    })
}
