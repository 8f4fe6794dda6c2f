//! Task streams, pipeline variants, and incremental-learning evaluation.
//!
//! [`run`] executes one variant over a class-incremental stream: per task it
//! trains a specialist with replay, optionally resets the final layer,
//! updates the buffer under the configured strategy, runs the variant's
//! consolidation stage (buffer fine-tuning, or tangent learning followed by
//! projected distillation), and evaluates after every stage and at every
//! task boundary.

use serde::{Deserialize, Serialize};

use crate::buffer::MemoryBuffer;
use crate::data::{generate_blobs, split_classes, BlobSpec, Dataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::learners::{
    buffer_ce, finetune_on_buffer, halfpipe, projected_distill, train_specialist, train_tangent,
    FinetuneScope, OnlineBufferMode, ReplayStyle, Stage, StageLog, TangentObjective, TrainConfig,
};
use crate::models::{argmax_rows, argmax_rows_restricted, ArchSpec, LogitFn, Model};
use crate::scalar::Scalar;
use crate::tangent::TangentModel;
use crate::WeightedReservoir;

/// One task: train and test splits plus the classes it introduces.
#[derive(Clone, Debug)]
pub struct TaskData<F> {
    pub train: Dataset<F>,
    pub test: Dataset<F>,
    pub classes: Vec<usize>,
}

/// An ordered class-incremental stream with pairwise-disjoint class sets.
#[derive(Clone, Debug)]
pub struct TaskStream<F> {
    tasks: Vec<TaskData<F>>,
    total_classes: usize,
    seed: u64,
}

impl<F: Scalar> TaskStream<F> {
    pub fn new(mut tasks: Vec<TaskData<F>>, total_classes: usize, seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("a task stream needs at least one task".into()));
        }
        if total_classes < 2 {
            return Err(Error::Config("a stream needs at least two classes".into()));
        }
        let mut seen = vec![false; total_classes];
        for (t, task) in tasks.iter_mut().enumerate() {
            if task.classes.is_empty() {
                return Err(Error::Config(format!("task {} declares no classes", t)));
            }
            task.classes.sort_unstable();
            if task.classes.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Config(format!("task {} repeats a class", t)));
            }
            for &c in &task.classes {
                if c >= total_classes {
                    return Err(Error::Config(format!(
                        "task {} claims class {} outside 0..{}",
                        t, c, total_classes
                    )));
                }
                if seen[c] {
                    return Err(Error::Config(format!(
                        "class {} appears in more than one task",
                        c
                    )));
                }
                seen[c] = true;
            }
            if task.train.is_empty() || task.test.is_empty() {
                return Err(Error::Data(format!("task {} has an empty split", t)));
            }
            for split in [&task.train, &task.test] {
                if split.num_classes() != total_classes {
                    return Err(Error::Data(format!(
                        "task {} split labels {} classes, stream has {}",
                        t,
                        split.num_classes(),
                        total_classes
                    )));
                }
                if split.labels().iter().any(|y| !task.classes.contains(y)) {
                    return Err(Error::Data(format!(
                        "task {} contains labels outside its class set",
                        t
                    )));
                }
            }
        }
        Ok(TaskStream { tasks, total_classes, seed })
    }

    /// The synthetic circular-Gaussian stream: `num_tasks` contiguous class
    /// groups of equal size.
    pub fn seq_blobs(spec: &BlobSpec, num_tasks: usize) -> Result<Self> {
        let groups = split_classes(spec.num_classes, num_tasks)?;
        let (train, test) = generate_blobs::<F>(spec)?;
        let tasks = groups
            .into_iter()
            .map(|classes| TaskData {
                train: train.filter_classes(&classes),
                test: test.filter_classes(&classes),
                classes,
            })
            .collect();
        TaskStream::new(tasks, spec.num_classes, spec.seed)
    }

    /// Splits one (train, test) pair into tasks along explicit class groups.
    pub fn from_splits(
        train: &Dataset<F>,
        test: &Dataset<F>,
        groups: Vec<Vec<usize>>,
        seed: u64,
    ) -> Result<Self> {
        let total = train.num_classes();
        let tasks = groups
            .into_iter()
            .map(|classes| TaskData {
                train: train.filter_classes(&classes),
                test: test.filter_classes(&classes),
                classes,
            })
            .collect();
        TaskStream::new(tasks, total, seed)
    }

    pub fn tasks(&self) -> &[TaskData<F>] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// The pipeline ladder. Every variant trains the same replay specialist;
/// they differ in what happens at the task boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Specialist only.
    B,
    /// Plus full fine-tuning on the buffer.
    BFf,
    /// Plus final-layer fine-tuning on the buffer.
    BLf,
    /// Final-layer reset, then final-layer fine-tuning.
    BHpLf,
    /// Final-layer reset, full fine-tuning on a clone, distillation back.
    BHpFfPd,
    /// Final-layer reset, tangent learning, projected distillation.
    Itl,
    /// As ITL, with a streaming logit buffer and the logit-matching losses.
    ItlL,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::B,
        Variant::BFf,
        Variant::BLf,
        Variant::BHpLf,
        Variant::BHpFfPd,
        Variant::Itl,
        Variant::ItlL,
    ];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::B => "B",
            Variant::BFf => "B+FF",
            Variant::BLf => "B+LF",
            Variant::BHpLf => "B+HP+LF",
            Variant::BHpFfPd => "B+HP+FF+PD",
            Variant::Itl => "ITL",
            Variant::ItlL => "ITL-L",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(Variant::B),
            "B+FF" => Ok(Variant::BFf),
            "B+LF" => Ok(Variant::BLf),
            "B+HP+LF" => Ok(Variant::BHpLf),
            "B+HP+FF+PD" => Ok(Variant::BHpFfPd),
            "ITL" => Ok(Variant::Itl),
            "ITL-L" => Ok(Variant::ItlL),
            other => Err(Error::Config(format!(
                "unknown variant '{}' (expected one of B, B+FF, B+LF, B+HP+LF, B+HP+FF+PD, ITL, ITL-L)",
                other
            ))),
        }
    }
}

/// How the replay buffer is maintained for the merge-based variants.
/// ITL-L always streams through the plain reservoir, as its losses are
/// defined on the dynamically updated buffer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BufferStrategy {
    /// Rebalancing merge with the task data at each task boundary.
    Stratified,
    /// Plain streaming reservoir during specialist training, no merge.
    Reservoir,
    /// Entropy-weighted per-task candidate pool, merged at the boundary.
    Entropy { temperature: f64 },
}

impl Default for BufferStrategy {
    fn default() -> Self {
        BufferStrategy::Stratified
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BufferConfig {
    pub capacity: usize,
    pub strategy: BufferStrategy,
}

/// Class-incremental (argmax over every class) or task-incremental (argmax
/// restricted to the task's classes) scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    ClassIl,
    TaskIl,
}

/// Accuracy of `model` on the test split of every task `0..=upto`.
pub fn evaluate<F: Scalar>(
    model: &dyn LogitFn<F>,
    stream: &TaskStream<F>,
    upto: usize,
    mode: EvalMode,
) -> Result<Vec<f64>> {
    if upto >= stream.num_tasks() {
        return Err(Error::Config(format!(
            "evaluation up to task {} in a {}-task stream",
            upto,
            stream.num_tasks()
        )));
    }
    let mut accs = Vec::with_capacity(upto + 1);
    for task in &stream.tasks()[..=upto] {
        let logits = model.logits(task.test.x())?;
        let preds = match mode {
            EvalMode::ClassIl => argmax_rows(&logits),
            EvalMode::TaskIl => argmax_rows_restricted(&logits, &task.classes),
        };
        let correct = preds.iter().zip(task.test.labels()).filter(|(p, y)| p == y).count();
        accs.push(correct as f64 / task.test.len() as f64);
    }
    Ok(accs)
}

/// Result metrics of one run: the lower-triangular accuracy matrices
/// (row `t` holds accuracies on tasks `0..=t` after finishing task `t`),
/// their final-row means, and per-task forgetting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub variant: String,
    pub seed: u64,
    pub num_tasks: usize,
    pub acc_class_il: Vec<Vec<f64>>,
    pub acc_task_il: Vec<Vec<f64>>,
    pub class_il_final: f64,
    pub task_il_final: f64,
    /// Per earlier task: best accuracy it ever had at a boundary minus its
    /// final accuracy (class-incremental). The last task's entry is zero by
    /// definition.
    pub forgetting: Vec<f64>,
    pub avg_forgetting: f64,
}

impl Metrics {
    fn from_matrices(
        variant: Variant,
        seed: u64,
        acc_class_il: Vec<Vec<f64>>,
        acc_task_il: Vec<Vec<f64>>,
    ) -> Self {
        let num_tasks = acc_class_il.len();
        let last = &acc_class_il[num_tasks - 1];
        let class_il_final = mean(last);
        let task_il_final = mean(&acc_task_il[num_tasks - 1]);
        let forgetting: Vec<f64> = (0..num_tasks)
            .map(|tau| {
                let best = (tau..num_tasks)
                    .map(|t| acc_class_il[t][tau])
                    .fold(f64::NEG_INFINITY, f64::max);
                best - last[tau]
            })
            .collect();
        let avg_forgetting = if num_tasks > 1 {
            mean(&forgetting[..num_tasks - 1])
        } else {
            0.0
        };
        Metrics {
            variant: variant.to_string(),
            seed,
            num_tasks,
            acc_class_il,
            acc_task_il,
            class_il_final,
            task_il_final,
            forgetting,
            avg_forgetting,
        }
    }

    /// Delimited rendering of both accuracy matrices, one row per
    /// (boundary, evaluated task) pair. Shortest-round-trip float formatting
    /// makes this lossless.
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("after_task,eval_task,class_il,task_il\n");
        for (t, row) in self.acc_class_il.iter().enumerate() {
            for (tau, c) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", t, tau, c, self.acc_task_il[t][tau]));
            }
        }
        out
    }

    /// Parses [`Metrics::accuracy_csv`] output back into the two matrices.
    pub fn parse_accuracy_csv(text: &str) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut class: Vec<Vec<f64>> = Vec::new();
        let mut task: Vec<Vec<f64>> = Vec::new();
        let bad = |line: &str| Error::Data(format!("bad accuracy row '{}'", line));
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "after_task,eval_task,class_il,task_il" {
                    return Err(Error::Data(format!("bad accuracy header '{}'", line)));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(bad(line));
            }
            let t: usize = parts[0].parse().map_err(|_| bad(line))?;
            let tau: usize = parts[1].parse().map_err(|_| bad(line))?;
            let c: f64 = parts[2].parse().map_err(|_| bad(line))?;
            let ti: f64 = parts[3].parse().map_err(|_| bad(line))?;
            if t == class.len() && tau == 0 {
                class.push(Vec::new());
                task.push(Vec::new());
            }
            if t + 1 != class.len() || tau != class[t].len() {
                return Err(bad(line));
            }
            class[t].push(c);
            task[t].push(ti);
        }
        if class.is_empty() {
            return Err(Error::Data("accuracy matrix is empty".into()));
        }
        Ok((class, task))
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Everything a finished run produces.
pub struct RunOutput<F> {
    pub metrics: Metrics,
    pub log: StageLog,
    pub model: Model<F>,
    pub buffer: MemoryBuffer<F>,
}

// Buffer cross-entropy when the buffer has content, current-task train
// cross-entropy before the first boundary fills it.
fn stage_loss<F: Scalar>(
    model: &dyn LogitFn<F>,
    buf: &MemoryBuffer<F>,
    task: &TaskData<F>,
) -> Result<f64> {
    if !buf.is_empty() {
        return buffer_ce(model, buf);
    }
    let logits = model.logits(task.train.x())?;
    let y = crate::Tensor::new(
        vec![task.train.len()],
        task.train.labels().iter().map(|&c| F::from_f64(c as f64)).collect(),
    )?;
    let labels = crate::autodiff::label_indices(&logits, &y)?;
    Ok(crate::autodiff::cross_entropy_value(&logits, &labels).to_f64())
}

/// Executes `variant` over the stream and returns metrics, the stage log,
/// the final model, and the final buffer. Fully deterministic in
/// (stream, variant, configs): all randomness is derived from `cfg.seed`.
pub fn run<F: Scalar>(
    stream: &TaskStream<F>,
    variant: Variant,
    arch: &ArchSpec,
    bcfg: &BufferConfig,
    cfg: &TrainConfig,
) -> Result<RunOutput<F>> {
    cfg.validate()?;
    if arch.num_classes != stream.total_classes() {
        return Err(Error::Config(format!(
            "model head has {} classes, stream has {}",
            arch.num_classes,
            stream.total_classes()
        )));
    }

    let mut model = Model::<F>::init(arch.clone(), derive_seed(cfg.seed, "model-init"))?;
    let mut buf = MemoryBuffer::<F>::new(bcfg.capacity, derive_seed(cfg.seed, "buffer"))?;
    let mut log = StageLog::new();
    let mut acc_class: Vec<Vec<f64>> = Vec::new();
    let mut acc_task: Vec<Vec<f64>> = Vec::new();

    for (t, task) in stream.tasks().iter().enumerate() {
        // Specialist training, with buffer dynamics per variant/strategy.
        let replay = match variant {
            Variant::ItlL => ReplayStyle::Logit { alpha: cfg.alpha, beta: cfg.beta },
            _ => ReplayStyle::Class,
        };
        let mut candidates = match (variant, bcfg.strategy) {
            (Variant::ItlL, _) => None,
            (_, BufferStrategy::Entropy { .. }) => Some(WeightedReservoir::<F>::new(
                bcfg.capacity,
                derive_seed(cfg.seed, &format!("candidates/{}", t)),
            )?),
            _ => None,
        };
        {
            let online = match (variant, bcfg.strategy) {
                (Variant::ItlL, _) => OnlineBufferMode::Reservoir,
                (_, BufferStrategy::Stratified) => OnlineBufferMode::Static,
                (_, BufferStrategy::Reservoir) => OnlineBufferMode::Reservoir,
                (_, BufferStrategy::Entropy { temperature }) => {
                    OnlineBufferMode::EntropyCandidates {
                        pool: candidates.as_mut().expect("pool built above"),
                        temperature,
                    }
                }
            };
            train_specialist(&mut model, &task.train, &mut buf, replay, online, cfg, t, &mut log)?;
        }
        log_stage_eval(&model, stream, t, Stage::Specialist, &buf, task, &mut log)?;

        // Final-layer reset for the half-pipe variants.
        if matches!(variant, Variant::BHpLf | Variant::BHpFfPd | Variant::Itl | Variant::ItlL) {
            halfpipe(&mut model, derive_seed(cfg.seed, &format!("halfpipe/{}", t)));
            log_stage_eval(&model, stream, t, Stage::Halfpipe, &buf, task, &mut log)?;
        }

        // Buffer update at the boundary. ITL-L already streamed.
        if variant != Variant::ItlL {
            match bcfg.strategy {
                BufferStrategy::Stratified => {
                    buf.stratified_merge(&task.train, t, derive_seed(cfg.seed, &format!("merge/{}", t)))?;
                }
                BufferStrategy::Entropy { .. } => {
                    let pool = candidates.take().expect("pool built above");
                    buf.merge_stratified_entries(
                        pool.drain(),
                        derive_seed(cfg.seed, &format!("merge/{}", t)),
                    )?;
                }
                BufferStrategy::Reservoir => {}
            }
        }

        // Consolidation.
        match variant {
            Variant::B => {}
            Variant::BFf | Variant::BLf | Variant::BHpLf => {
                let scope = if variant == Variant::BFf {
                    FinetuneScope::All
                } else {
                    FinetuneScope::FinalLayer
                };
                finetune_on_buffer(&mut model, &buf, scope, cfg, t, &mut log)?;
                log_stage_eval(&model, stream, t, Stage::Finetune, &buf, task, &mut log)?;
            }
            Variant::BHpFfPd => {
                let mut teacher = model.clone();
                finetune_on_buffer(&mut teacher, &buf, FinetuneScope::All, cfg, t, &mut log)?;
                log_stage_eval(&teacher, stream, t, Stage::Finetune, &buf, task, &mut log)?;
                projected_distill(&mut model, &teacher, &buf, cfg, t, &mut log)?;
                log_stage_eval(&model, stream, t, Stage::Distill, &buf, task, &mut log)?;
            }
            Variant::Itl | Variant::ItlL => {
                let objective = if variant == Variant::Itl {
                    TangentObjective::ClassOnly
                } else {
                    TangentObjective::LogitAndClass
                };
                let mut tm = TangentModel::new(&model, &cfg.mask)?;
                train_tangent(&mut tm, &buf, objective, cfg, t, &mut log)?;
                log_stage_eval(&tm, stream, t, Stage::Tangent, &buf, task, &mut log)?;
                projected_distill(&mut model, &tm, &buf, cfg, t, &mut log)?;
                log_stage_eval(&model, stream, t, Stage::Distill, &buf, task, &mut log)?;
            }
        }

        // Task-boundary evaluation into the accuracy matrices.
        acc_class.push(evaluate(&model, stream, t, EvalMode::ClassIl)?);
        acc_task.push(evaluate(&model, stream, t, EvalMode::TaskIl)?);
    }

    let metrics = Metrics::from_matrices(variant, cfg.seed, acc_class, acc_task);
    Ok(RunOutput { metrics, log, model, buffer: buf })
}

#[allow(clippy::too_many_arguments)]
fn log_stage_eval<F: Scalar>(
    model: &dyn LogitFn<F>,
    stream: &TaskStream<F>,
    t: usize,
    stage: Stage,
    buf: &MemoryBuffer<F>,
    task: &TaskData<F>,
    log: &mut StageLog,
) -> Result<()> {
    let loss = stage_loss(model, buf, task)?;
    let class = mean(&evaluate(model, stream, t, EvalMode::ClassIl)?);
    let task_il = mean(&evaluate(model, stream, t, EvalMode::TaskIl)?);
    let step = log.steps_in(t, stage);
    log.log_eval(t, stage, step, loss, class, task_il);
    Ok(())
}
