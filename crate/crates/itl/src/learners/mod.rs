//! Training procedures: specialist training with replay, tangent learning
//! on the buffer, projected distillation, buffer fine-tuning, and the
//! final-layer reset, plus the shared SGD optimizer, hyperparameter set,
//! and stage log.

mod generalist;
mod specialist;

pub use generalist::{
    buffer_ce, buffer_logit_mse, finetune_on_buffer, projected_distill, train_tangent,
    FinetuneScope, TangentObjective,
};
pub use specialist::{
    specialist_grads, train_specialist, OnlineBufferMode, ReplayStyle, ReplayTerm,
    SpecialistLossTerms, SpecialistStep,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::tangent::LayerMask;

/// Hyperparameters for one continual run. Every stage reads only the fields
/// it needs, so baseline variants ignore the tangent-specific knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_specialist: f64,
    pub lr_tangent: f64,
    pub lr_distill: f64,
    pub lr_finetune: f64,
    /// Momentum for specialist, distillation, and fine-tune stages.
    pub momentum: f64,
    /// Momentum for tangent learning; kept separate and defaulted to 0.
    pub momentum_tangent: f64,
    pub batch_size: usize,
    pub epochs_specialist: usize,
    pub epochs_tangent: usize,
    pub epochs_distill: usize,
    pub epochs_finetune: usize,
    /// L2 weight on the tangent direction.
    pub lambda_tg: f64,
    /// L2 weight on the distilled parameters.
    pub lambda_pd: f64,
    /// Weight of the frozen-logit matching term in logit-replay specialist
    /// training.
    pub alpha: f64,
    /// Weight of the buffer cross-entropy term in logit-replay specialist
    /// training.
    pub beta: f64,
    /// Weight of the logit-matching term in tangent learning.
    pub alpha_tg: f64,
    /// Weight of the cross-entropy term in logit-and-class tangent learning.
    pub beta_tg: f64,
    /// Which layers span the tangent direction.
    pub mask: LayerMask,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_specialist: 0.03,
            lr_tangent: 0.001,
            lr_distill: 0.005,
            lr_finetune: 0.03,
            momentum: 0.0,
            momentum_tangent: 0.0,
            batch_size: 32,
            epochs_specialist: 50,
            epochs_tangent: 50,
            epochs_distill: 50,
            epochs_finetune: 50,
            lambda_tg: 1e-5,
            lambda_pd: 1e-5,
            alpha: 0.2,
            beta: 0.5,
            alpha_tg: 1.0,
            beta_tg: 1.0,
            mask: LayerMask::FinalTwo,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [
            ("lr_specialist", self.lr_specialist),
            ("lr_tangent", self.lr_tangent),
            ("lr_distill", self.lr_distill),
            ("lr_finetune", self.lr_finetune),
        ];
        for (name, lr) in lrs {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{} must be positive, got {}", name, lr)));
            }
        }
        for (name, m) in [("momentum", self.momentum), ("momentum_tangent", self.momentum_tangent)]
        {
            if !(m.is_finite() && (0.0..1.0).contains(&m)) {
                return Err(Error::Config(format!("{} must lie in [0, 1), got {}", name, m)));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let epochs = [
            ("epochs_specialist", self.epochs_specialist),
            ("epochs_tangent", self.epochs_tangent),
            ("epochs_distill", self.epochs_distill),
            ("epochs_finetune", self.epochs_finetune),
        ];
        for (name, e) in epochs {
            if e == 0 {
                return Err(Error::Config(format!("{} must be at least 1", name)));
            }
        }
        let weights = [
            ("lambda_tg", self.lambda_tg),
            ("lambda_pd", self.lambda_pd),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha_tg", self.alpha_tg),
            ("beta_tg", self.beta_tg),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{} must be non-negative, got {}", name, w)));
            }
        }
        Ok(())
    }
}

/// Plain SGD with optional classical momentum: `v <- mu v + g`,
/// `p <- p - lr v`. Velocity slots are created on first sight of a
/// parameter name, so one optimizer can drive any parameter subset.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    lr: f64,
    momentum: f64,
    velocity: ParamSet<F>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", lr)));
        }
        if !(momentum.is_finite() && (0.0..1.0).contains(&momentum)) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", momentum)));
        }
        Ok(Sgd { lr, momentum, velocity: ParamSet::new() })
    }

    /// Applies one step to every parameter named in `grads`. Parameters not
    /// named are untouched, which is how masked training works.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>) -> Result<()> {
        let neg_lr = F::from_f64(-self.lr);
        let mu = F::from_f64(self.momentum);
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter '{}'", name)))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd step",
                    format!("param '{}' is {:?}, gradient {:?}", name, p.shape(), g.shape()),
                ));
            }
            if self.momentum == 0.0 {
                p.add_scaled_assign(g, neg_lr);
            } else {
                if self.velocity.get(name).is_none() {
                    self.velocity.set(name.to_string(), crate::Tensor::zeros(g.shape()));
                }
                let v = self.velocity.get_mut(name).unwrap();
                v.scale_assign(mu);
                v.add_assign(g);
                p.add_scaled_assign(v, neg_lr);
            }
            if !p.all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter '{}' became non-finite after an SGD step",
                    name
                )));
            }
        }
        Ok(())
    }
}

/// Pipeline stage names as they appear in the stage log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Specialist,
    Halfpipe,
    Tangent,
    Distill,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Specialist => "specialist",
            Stage::Halfpipe => "halfpipe",
            Stage::Tangent => "tangent",
            Stage::Distill => "distill",
            Stage::Finetune => "finetune",
        };
        f.write_str(s)
    }
}

/// One stage-log row. Step rows carry the training loss; evaluation rows
/// additionally carry accuracies averaged over the tasks seen so far.
#[derive(Clone, Debug)]
pub struct StageRecord {
    pub task: usize,
    pub stage: Stage,
    pub step: u64,
    pub loss: f64,
    pub class_il: Option<f64>,
    pub task_il: Option<f64>,
}

/// Append-only training trace behind per-stage accuracy plots.
#[derive(Clone, Debug, Default)]
pub struct StageLog {
    records: Vec<StageRecord>,
}

impl StageLog {
    pub fn new() -> Self {
        StageLog::default()
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    pub fn log_step(&mut self, task: usize, stage: Stage, step: u64, loss: f64) {
        self.records.push(StageRecord { task, stage, step, loss, class_il: None, task_il: None });
    }

    pub fn log_eval(
        &mut self,
        task: usize,
        stage: Stage,
        step: u64,
        loss: f64,
        class_il: f64,
        task_il: f64,
    ) {
        self.records.push(StageRecord {
            task,
            stage,
            step,
            loss,
            class_il: Some(class_il),
            task_il: Some(task_il),
        })
    }

    /// Number of step rows recorded for one (task, stage) pair.
    pub fn steps_in(&self, task: usize, stage: Stage) -> u64 {
        self.records
            .iter()
            .filter(|r| r.task == task && r.stage == stage && r.class_il.is_none())
            .count() as u64
    }

    /// The evaluation row for one (task, stage) pair, if logged.
    pub fn eval_row(&self, task: usize, stage: Stage) -> Option<&StageRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| r.task == task && r.stage == stage && r.class_il.is_some())
    }

    /// Losses of the step rows for one (task, stage) pair, in order.
    pub fn step_losses(&self, task: usize, stage: Stage) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.task == task && r.stage == stage && r.class_il.is_none())
            .map(|r| r.loss)
            .collect()
    }

    /// Comma-delimited text rendering. Accuracy fields are empty on step
    /// rows. Float formatting is shortest-round-trip, so equal runs produce
    /// equal bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,stage,step,loss,class_il,task_il\n");
        for r in &self.records {
            let c = r.class_il.map(|v| v.to_string()).unwrap_or_default();
            let t = r.task_il.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{}\n", r.task, r.stage, r.step, r.loss, c, t));
        }
        out
    }
}

/// Resets the final fully-connected layer to a fresh random draw, leaving
/// every other weight untouched. The deterioration this causes on purpose
/// is the launch point for tangent learning.
pub fn halfpipe<F: Scalar>(model: &mut Model<F>, seed: u64) {
    model.reset_final_layer(seed);
}
