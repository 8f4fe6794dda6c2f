//! Generalist training on the buffer: convex tangent learning, projected
//! distillation back to a single parameter set, and plain buffer
//! fine-tuning for the baseline ladder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ComputeGraph, ParamSet, Tensor};
use crate::buffer::{gather_entries, BufferEntry, MemoryBuffer};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::models::{LogitFn, Model};
use crate::scalar::Scalar;
use crate::tangent::{TangentLossWeights, TangentModel};

use super::{Sgd, Stage, StageLog, TrainConfig};

/// Objective for tangent learning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TangentObjective {
    /// Cross-entropy over buffer labels plus the L2 term.
    ClassOnly,
    /// Frozen-logit matching plus cross-entropy plus the L2 term; needs a
    /// buffer whose entries carry logits.
    LogitAndClass,
}

/// Which parameters a buffer fine-tune updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FinetuneScope {
    All,
    FinalLayer,
}

/// Trains the tangent direction `w` on the buffer by SGD over the convex
/// objective. The anchor weights are verified bitwise-unchanged at the end.
pub fn train_tangent<F: Scalar>(
    tm: &mut TangentModel<F>,
    buf: &MemoryBuffer<F>,
    objective: TangentObjective,
    cfg: &TrainConfig,
    task_id: usize,
    log: &mut StageLog,
) -> Result<()> {
    if buf.is_empty() {
        return Err(Error::Data("tangent learning needs a non-empty buffer".into()));
    }
    cfg.validate()?;
    let weights = match objective {
        TangentObjective::ClassOnly => {
            TangentLossWeights { ce: 1.0, logit_mse: 0.0, l2: cfg.lambda_tg }
        }
        TangentObjective::LogitAndClass => {
            TangentLossWeights { ce: cfg.beta_tg, logit_mse: cfg.alpha_tg, l2: cfg.lambda_tg }
        }
    };
    let needs_logits = weights.logit_mse != 0.0;
    let mut sgd = Sgd::new(cfg.lr_tangent, cfg.momentum_tangent)?;
    let seed0 = derive_seed(cfg.seed, &format!("tangent/{}", task_id));
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs_tangent {
        let mut idx: Vec<usize> = (0..buf.len()).collect();
        let mut erng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed0, &format!("shuffle/{}", epoch)));
        idx.shuffle(&mut erng);

        for chunk in idx.chunks(cfg.batch_size) {
            let refs: Vec<&BufferEntry<F>> = chunk.iter().map(|&i| &buf.entries()[i]).collect();
            let (x, y, stored) = gather_entries(&refs)?;
            if needs_logits && stored.is_none() {
                return Err(Error::Data(
                    "logit-and-class tangent objective needs stored logits in the buffer".into(),
                ));
            }
            let frozen = if needs_logits { stored.as_ref() } else { None };
            let (terms, grads) = tm.grad_w(&x, &y, frozen, &weights)?;
            sgd.step(tm.w_mut(), &grads)?;
            log.log_step(task_id, Stage::Tangent, step, terms.total);
            step += 1;
        }
    }
    tm.verify_anchor()
}

/// Distills a frozen teacher into the student's single parameter set by
/// minimizing `mean-row ||p(theta'; x) - teacher(x)||^2 + lambda_pd
/// ||theta'||^2` over the buffer. Teacher targets are computed once up
/// front and never refreshed.
pub fn projected_distill<F: Scalar>(
    student: &mut Model<F>,
    teacher: &dyn LogitFn<F>,
    buf: &MemoryBuffer<F>,
    cfg: &TrainConfig,
    task_id: usize,
    log: &mut StageLog,
) -> Result<()> {
    if buf.is_empty() {
        return Err(Error::Data("distillation needs a non-empty buffer".into()));
    }
    cfg.validate()?;
    let all: Vec<&BufferEntry<F>> = buf.entries().iter().collect();
    let (x_all, _, _) = gather_entries(&all)?;
    let targets = teacher.logits(&x_all)?;
    let classes = targets.cols();

    // One graph for the whole stage: distillation MSE plus the scaled sum
    // of squares of every student parameter.
    let mut g = ComputeGraph::new();
    let x = g.input("x");
    let logits = student.arch().logits_into(&mut g, x);
    let t = g.input("t");
    let mse = g.mse_rows(logits, t);
    let loss = if cfg.lambda_pd > 0.0 {
        let mut reg = None;
        for name in student.all_param_names() {
            let p = g.param(&name);
            let sq = g.sum_sq(p);
            reg = Some(match reg {
                None => sq,
                Some(acc) => g.add(acc, sq),
            });
        }
        let scaled = g.scale(reg.expect("models always have parameters"), cfg.lambda_pd);
        g.add(mse, scaled)
    } else {
        mse
    };

    let mut sgd = Sgd::new(cfg.lr_distill, cfg.momentum)?;
    let seed0 = derive_seed(cfg.seed, &format!("distill/{}", task_id));
    let sample_elems: usize = x_all.shape()[1..].iter().product();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs_distill {
        let mut idx: Vec<usize> = (0..buf.len()).collect();
        let mut erng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed0, &format!("shuffle/{}", epoch)));
        idx.shuffle(&mut erng);

        for chunk in idx.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(chunk.len() * sample_elems);
            let mut tb = Vec::with_capacity(chunk.len() * classes);
            for &i in chunk {
                xb.extend_from_slice(&x_all.data()[i * sample_elems..(i + 1) * sample_elems]);
                tb.extend_from_slice(targets.row(i));
            }
            let mut xshape = vec![chunk.len()];
            xshape.extend_from_slice(&x_all.shape()[1..]);
            let xt = Tensor::new(xshape, xb)?;
            let tt = Tensor::new(vec![chunk.len(), classes], tb)?;

            let eval = g.forward(student.params(), &[("x", &xt), ("t", &tt)])?;
            let grads = g.backward(&eval, loss)?;
            sgd.step(student.params_mut(), &grads)?;
            log.log_step(task_id, Stage::Distill, step, eval.value(loss).item().to_f64());
            step += 1;
        }
    }
    Ok(())
}

/// Mean squared logit distance between two models over the buffer, the
/// fidelity number distillation is judged by.
pub fn buffer_logit_mse<F: Scalar>(
    a: &dyn LogitFn<F>,
    b: &dyn LogitFn<F>,
    buf: &MemoryBuffer<F>,
) -> Result<f64> {
    if buf.is_empty() {
        return Err(Error::Data("logit comparison over an empty buffer".into()));
    }
    let all: Vec<&BufferEntry<F>> = buf.entries().iter().collect();
    let (x, _, _) = gather_entries(&all)?;
    let la = a.logits(&x)?;
    let lb = b.logits(&x)?;
    let diff = la.zip_map(&lb, |u, v| u - v);
    Ok(diff.l2_sq().to_f64() / diff.data().len() as f64)
}

/// Cross-entropy fine-tuning on the buffer, over all parameters or only the
/// final layer.
pub fn finetune_on_buffer<F: Scalar>(
    model: &mut Model<F>,
    buf: &MemoryBuffer<F>,
    scope: FinetuneScope,
    cfg: &TrainConfig,
    task_id: usize,
    log: &mut StageLog,
) -> Result<()> {
    if buf.is_empty() {
        return Err(Error::Data("fine-tuning needs a non-empty buffer".into()));
    }
    cfg.validate()?;
    let trained: Vec<String> = match scope {
        FinetuneScope::All => model.all_param_names(),
        FinetuneScope::FinalLayer => model.final_layer_param_names(),
    };

    let mut g = ComputeGraph::new();
    let x = g.input("x");
    let logits = model.arch().logits_into(&mut g, x);
    let y = g.input("y");
    let loss = g.cross_entropy(logits, y);

    let mut sgd = Sgd::new(cfg.lr_finetune, cfg.momentum)?;
    let seed0 = derive_seed(cfg.seed, &format!("finetune/{}", task_id));
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs_finetune {
        let mut idx: Vec<usize> = (0..buf.len()).collect();
        let mut erng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed0, &format!("shuffle/{}", epoch)));
        idx.shuffle(&mut erng);

        for chunk in idx.chunks(cfg.batch_size) {
            let refs: Vec<&BufferEntry<F>> = chunk.iter().map(|&i| &buf.entries()[i]).collect();
            let (xb, yb, _) = gather_entries(&refs)?;
            let eval = g.forward(model.params(), &[("x", &xb), ("y", &yb)])?;
            let full = g.backward(&eval, loss)?;
            let mut grads = ParamSet::new();
            for name in &trained {
                if let Some(t) = full.get(name) {
                    grads.set(name.clone(), t.clone());
                }
            }
            sgd.step(model.params_mut(), &grads)?;
            log.log_step(task_id, Stage::Finetune, step, eval.value(loss).item().to_f64());
            step += 1;
        }
    }
    Ok(())
}

/// Mean cross-entropy of a model over the whole buffer; the loss value
/// reported for the reset and used to measure how far up the half-pipe the
/// reset carried the model.
pub fn buffer_ce<F: Scalar>(model: &dyn LogitFn<F>, buf: &MemoryBuffer<F>) -> Result<f64> {
    if buf.is_empty() {
        return Err(Error::Data("cross-entropy over an empty buffer".into()));
    }
    let all: Vec<&BufferEntry<F>> = buf.entries().iter().collect();
    let (x, y, _) = gather_entries(&all)?;
    let logits = model.logits(&x)?;
    let labels = crate::autodiff::label_indices(&logits, &y)?;
    Ok(crate::autodiff::cross_entropy_value(&logits, &labels).to_f64())
}
