//! Specialist training: the current task's cross-entropy plus a replay term
//! over the memory buffer, stepped by SGD at a constant learning rate.
//!
//! Two replay styles:
//! * class replay: `CE(task batch) + CE(buffer batch)`;
//! * logit replay: `CE(task batch) + alpha * mean-row ||p(theta;x) - b||^2
//!   + beta * CE(second buffer batch)`, where `b` are the logits frozen
//!   when the sample entered the buffer.
//!
//! An empty buffer (first task) degenerates to plain cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ComputeGraph, ParamSet, Tensor};
use crate::buffer::{gather_entries, BufferEntry, MemoryBuffer, WeightedReservoir};
use crate::data::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::scalar::Scalar;

use super::{Sgd, Stage, StageLog, TrainConfig};

/// Which replay loss the specialist trains with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReplayStyle {
    /// Plain cross-entropy over a replayed batch.
    Class,
    /// Frozen-logit matching plus cross-entropy, each over its own batch.
    Logit { alpha: f64, beta: f64 },
}

/// How the buffer evolves while the specialist trains.
pub enum OnlineBufferMode<'a, F: Scalar> {
    /// Buffer content is fixed for the whole stage (merge happens at task
    /// end, outside this procedure).
    Static,
    /// Every task sample streams through the classic reservoir with its
    /// current logits attached; no end-of-task merge follows.
    Reservoir,
    /// Task samples are offered to a per-task candidate pool weighted by
    /// prediction entropy; the pool is merged at task end.
    EntropyCandidates { pool: &'a mut WeightedReservoir<F>, temperature: f64 },
}

/// One replay contribution to a single training step, borrowing prepared
/// batch tensors.
pub enum ReplayTerm<'a, F> {
    None,
    Class {
        x: &'a Tensor<F>,
        y: &'a Tensor<F>,
    },
    Logit {
        x_match: &'a Tensor<F>,
        frozen: &'a Tensor<F>,
        x_ce: &'a Tensor<F>,
        y_ce: &'a Tensor<F>,
        alpha: f64,
        beta: f64,
    },
}

/// Unweighted loss terms of one specialist step plus the weighted total.
/// `total = task_ce + alpha * replay_logit_mse + beta * replay_ce` in logit
/// replay, `task_ce + replay_ce` in class replay.
#[derive(Clone, Copy, Debug)]
pub struct SpecialistLossTerms {
    pub task_ce: f64,
    pub replay_ce: f64,
    pub replay_logit_mse: f64,
    pub total: f64,
}

/// Everything produced by one specialist step: loss terms, the task batch's
/// logits from the same forward pass (pre-update, the values frozen into
/// the buffer when streaming), and the parameter gradients.
pub struct SpecialistStep<F> {
    pub terms: SpecialistLossTerms,
    pub task_logits: Tensor<F>,
    pub grads: ParamSet<F>,
}

/// Builds the composite loss for one batch and returns its terms and exact
/// gradients. Heads share one parameter set, so replay gradients accumulate
/// into the same tensors as the task gradients.
pub fn specialist_grads<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    y: &Tensor<F>,
    replay: &ReplayTerm<'_, F>,
) -> Result<SpecialistStep<F>> {
    let mut g = ComputeGraph::new();
    let xt = g.input("x");
    let logits_t = model.arch().logits_into(&mut g, xt);
    let yt = g.input("y");
    let ce_t = g.cross_entropy(logits_t, yt);

    let mut bindings: Vec<(&str, &Tensor<F>)> = vec![("x", x), ("y", y)];
    let mut ce_r_node = None;
    let mut mse_node = None;
    let loss = match replay {
        ReplayTerm::None => ce_t,
        ReplayTerm::Class { x: xb, y: yb } => {
            let xr = g.input("xr");
            let logits_r = model.arch().logits_into(&mut g, xr);
            let yr = g.input("yr");
            let ce_r = g.cross_entropy(logits_r, yr);
            bindings.push(("xr", xb));
            bindings.push(("yr", yb));
            ce_r_node = Some(ce_r);
            g.add(ce_t, ce_r)
        }
        ReplayTerm::Logit { x_match, frozen, x_ce, y_ce, alpha, beta } => {
            let xm = g.input("xm");
            let logits_m = model.arch().logits_into(&mut g, xm);
            let bm = g.input("bm");
            let mse = g.mse_rows(logits_m, bm);
            let xr = g.input("xr");
            let logits_r = model.arch().logits_into(&mut g, xr);
            let yr = g.input("yr");
            let ce_r = g.cross_entropy(logits_r, yr);
            bindings.push(("xm", x_match));
            bindings.push(("bm", frozen));
            bindings.push(("xr", x_ce));
            bindings.push(("yr", y_ce));
            mse_node = Some(mse);
            ce_r_node = Some(ce_r);
            let scaled_mse = g.scale(mse, *alpha);
            let scaled_ce = g.scale(ce_r, *beta);
            let partial = g.add(ce_t, scaled_mse);
            g.add(partial, scaled_ce)
        }
    };

    let eval = g.forward(model.params(), &bindings)?;
    let terms = SpecialistLossTerms {
        task_ce: eval.value(ce_t).item().to_f64(),
        replay_ce: ce_r_node.map(|n| eval.value(n).item().to_f64()).unwrap_or(0.0),
        replay_logit_mse: mse_node.map(|n| eval.value(n).item().to_f64()).unwrap_or(0.0),
        total: eval.value(loss).item().to_f64(),
    };
    let task_logits = eval.value(logits_t).clone();
    let grads = g.backward(&eval, loss)?;
    Ok(SpecialistStep { terms, task_logits, grads })
}

// Owned replay batches for one step; `ReplayTerm` borrows from this.
enum PreparedReplay<F> {
    None,
    Class(Tensor<F>, Tensor<F>),
    Logit(Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>, f64, f64),
}

/// Trains the specialist in place over the task with replay from `buf`.
/// Steps are logged per batch; evaluation rows are the caller's concern.
#[allow(clippy::too_many_arguments)]
pub fn train_specialist<F: Scalar>(
    model: &mut Model<F>,
    task: &Dataset<F>,
    buf: &mut MemoryBuffer<F>,
    replay: ReplayStyle,
    mut online: OnlineBufferMode<'_, F>,
    cfg: &TrainConfig,
    task_id: usize,
    log: &mut StageLog,
) -> Result<()> {
    if task.is_empty() {
        return Err(Error::Data("specialist training on an empty task".into()));
    }
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg.lr_specialist, cfg.momentum)?;
    let seed0 = derive_seed(cfg.seed, &format!("specialist/{}", task_id));
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs_specialist {
        let mut idx: Vec<usize> = (0..task.len()).collect();
        let mut erng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed0, &format!("shuffle/{}", epoch)));
        idx.shuffle(&mut erng);

        for chunk in idx.chunks(cfg.batch_size) {
            let (x, y) = task.gather(chunk);

            let prepared = if buf.is_empty() {
                PreparedReplay::None
            } else {
                match replay {
                    ReplayStyle::Class => {
                        let batch = buf
                            .sample_batch(cfg.batch_size, derive_seed(seed0, &format!("replay/{}", step)));
                        let (xb, yb, _) = gather_entries(&batch)?;
                        PreparedReplay::Class(xb, yb)
                    }
                    ReplayStyle::Logit { alpha, beta } => {
                        let b1 = buf.sample_batch(
                            cfg.batch_size,
                            derive_seed(seed0, &format!("replay-match/{}", step)),
                        );
                        let (xm, _, lm) = gather_entries(&b1)?;
                        let frozen = lm.ok_or_else(|| {
                            Error::Data("logit replay needs stored logits in the buffer".into())
                        })?;
                        let b2 = buf.sample_batch(
                            cfg.batch_size,
                            derive_seed(seed0, &format!("replay-ce/{}", step)),
                        );
                        let (xc, yc, _) = gather_entries(&b2)?;
                        PreparedReplay::Logit(xm, frozen, xc, yc, alpha, beta)
                    }
                }
            };
            let term = match &prepared {
                PreparedReplay::None => ReplayTerm::None,
                PreparedReplay::Class(xb, yb) => ReplayTerm::Class { x: xb, y: yb },
                PreparedReplay::Logit(xm, bm, xc, yc, a, b) => ReplayTerm::Logit {
                    x_match: xm,
                    frozen: bm,
                    x_ce: xc,
                    y_ce: yc,
                    alpha: *a,
                    beta: *b,
                },
            };

            let out = specialist_grads(model, &x, &y, &term)?;
            sgd.step(model.params_mut(), &out.grads)?;
            log.log_step(task_id, Stage::Specialist, step, out.terms.total);

            match &mut online {
                OnlineBufferMode::Static => {}
                OnlineBufferMode::Reservoir => {
                    for (k, &i) in chunk.iter().enumerate() {
                        let row = out.task_logits.row(k).to_vec();
                        let logits = Tensor::new(vec![row.len()], row)?;
                        buf.reservoir_update(BufferEntry {
                            x: task.sample(i),
                            y: task.labels()[i],
                            logits: Some(logits),
                            task_id,
                        });
                    }
                }
                OnlineBufferMode::EntropyCandidates { pool, temperature } => {
                    let entries: Vec<BufferEntry<F>> = chunk
                        .iter()
                        .map(|&i| BufferEntry {
                            x: task.sample(i),
                            y: task.labels()[i],
                            logits: None,
                            task_id,
                        })
                        .collect();
                    pool.offer_batch(entries, &out.task_logits, *temperature)?;
                }
            }
            step += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobSpec};
    use crate::models::{argmax_rows, ArchSpec, LogitFn};

    fn tiny_model(classes: usize) -> Model<f64> {
        Model::init(ArchSpec::mlp(2, &[16], classes), 3).unwrap()
    }

    fn filled_buffer(with_logits: bool) -> MemoryBuffer<f64> {
        let mut buf = MemoryBuffer::new(8, 0).unwrap();
        for i in 0..8 {
            let logits = with_logits
                .then(|| Tensor::new(vec![2], vec![0.3 * i as f64, -0.1 * i as f64]).unwrap());
            buf.reservoir_update(BufferEntry {
                x: Tensor::new(vec![2], vec![i as f64 * 0.5 - 2.0, 1.0 - i as f64 * 0.3]).unwrap(),
                y: i % 2,
                logits,
                task_id: 0,
            });
        }
        buf
    }

    #[test]
    fn class_replay_total_is_sum_of_term_values() {
        let model = tiny_model(2);
        let x = Tensor::new(vec![2, 2], vec![0.5, -0.5, 1.0, 0.2]).unwrap();
        let y = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let xb = Tensor::new(vec![2, 2], vec![-1.0, 0.3, 0.8, -0.2]).unwrap();
        let yb = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();

        let solo = specialist_grads(&model, &x, &y, &ReplayTerm::None).unwrap();
        assert_eq!(solo.terms.total, solo.terms.task_ce);
        assert_eq!(solo.terms.replay_ce, 0.0);

        let joint =
            specialist_grads(&model, &x, &y, &ReplayTerm::Class { x: &xb, y: &yb }).unwrap();
        assert_eq!(joint.terms.total, joint.terms.task_ce + joint.terms.replay_ce);
        assert_eq!(joint.terms.task_ce, solo.terms.task_ce);
    }

    #[test]
    fn logit_replay_with_alpha0_beta1_equals_class_replay() {
        let model = tiny_model(2);
        let x = Tensor::new(vec![2, 2], vec![0.5, -0.5, 1.0, 0.2]).unwrap();
        let y = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let xb = Tensor::new(vec![2, 2], vec![-1.0, 0.3, 0.8, -0.2]).unwrap();
        let yb = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let frozen = Tensor::new(vec![2, 2], vec![0.0, 0.1, 0.2, -0.1]).unwrap();

        let er = specialist_grads(&model, &x, &y, &ReplayTerm::Class { x: &xb, y: &yb }).unwrap();
        let der = specialist_grads(
            &model,
            &x,
            &y,
            &ReplayTerm::Logit {
                x_match: &xb,
                frozen: &frozen,
                x_ce: &xb,
                y_ce: &yb,
                alpha: 0.0,
                beta: 1.0,
            },
        )
        .unwrap();
        assert_eq!(der.terms.total, er.terms.total);
        assert_eq!(der.terms.task_ce, er.terms.task_ce);
        assert_eq!(der.terms.replay_ce, er.terms.replay_ce);
        for (name, g) in er.grads.iter() {
            let d = der.grads.get(name).unwrap();
            for (a, b) in g.data().iter().zip(d.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_replay_matching_frozen_logits_zeroes_the_mse_term() {
        let model = tiny_model(2);
        let x = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let y = Tensor::new(vec![1], vec![0.0]).unwrap();
        let xb = Tensor::new(vec![1, 2], vec![-1.0, 0.3]).unwrap();
        let yb = Tensor::new(vec![1], vec![1.0]).unwrap();
        let frozen = model.logits(&xb).unwrap();

        let out = specialist_grads(
            &model,
            &x,
            &y,
            &ReplayTerm::Logit {
                x_match: &xb,
                frozen: &frozen,
                x_ce: &xb,
                y_ce: &yb,
                alpha: 1.0,
                beta: 1.0,
            },
        )
        .unwrap();
        assert_eq!(out.terms.replay_logit_mse, 0.0);
    }

    #[test]
    fn pure_ce_training_separates_two_gaussians() {
        let spec = BlobSpec {
            num_classes: 2,
            train_per_class: 50,
            test_per_class: 10,
            sigma: 0.5,
            ..BlobSpec::default()
        };
        let (train, _) = generate_blobs::<f64>(&spec).unwrap();
        let mut model = tiny_model(2);
        let mut buf = MemoryBuffer::new(4, 0).unwrap();
        let cfg = TrainConfig {
            lr_specialist: 0.05,
            epochs_specialist: 15,
            ..TrainConfig::default()
        };
        let mut log = StageLog::new();
        train_specialist(
            &mut model,
            &train,
            &mut buf,
            ReplayStyle::Class,
            OnlineBufferMode::Static,
            &cfg,
            0,
            &mut log,
        )
        .unwrap();

        let preds = argmax_rows(&model.logits(train.x()).unwrap());
        let correct = preds.iter().zip(train.labels()).filter(|(p, y)| p == y).count();
        let acc = correct as f64 / train.len() as f64;
        assert!(acc > 0.99, "training accuracy {}", acc);
        assert!(buf.is_empty(), "static mode must not touch the buffer");
        assert_eq!(log.steps_in(0, Stage::Specialist), 15 * 4);
    }

    #[test]
    fn reservoir_mode_streams_samples_with_frozen_logits() {
        let spec = BlobSpec {
            num_classes: 2,
            train_per_class: 20,
            test_per_class: 5,
            ..BlobSpec::default()
        };
        let (train, _) = generate_blobs::<f64>(&spec).unwrap();
        let mut model = tiny_model(2);
        let mut buf = MemoryBuffer::new(10, 7).unwrap();
        let cfg = TrainConfig { epochs_specialist: 1, ..TrainConfig::default() };
        let mut log = StageLog::new();
        train_specialist(
            &mut model,
            &train,
            &mut buf,
            ReplayStyle::Logit { alpha: 0.2, beta: 0.5 },
            OnlineBufferMode::Reservoir,
            &cfg,
            0,
            &mut log,
        )
        .unwrap();
        assert_eq!(buf.len(), 10);
        assert_eq!(buf.seen_count(), train.len() as u64);
        assert!(buf.entries().iter().all(|e| e.logits.is_some()));
    }

    #[test]
    fn logit_replay_without_stored_logits_is_a_data_error() {
        let spec = BlobSpec {
            num_classes: 2,
            train_per_class: 10,
            test_per_class: 5,
            ..BlobSpec::default()
        };
        let (train, _) = generate_blobs::<f64>(&spec).unwrap();
        let mut model = tiny_model(2);
        let mut buf = filled_buffer(false);
        let cfg = TrainConfig { epochs_specialist: 1, ..TrainConfig::default() };
        let mut log = StageLog::new();
        let err = train_specialist(
            &mut model,
            &train,
            &mut buf,
            ReplayStyle::Logit { alpha: 1.0, beta: 1.0 },
            OnlineBufferMode::Static,
            &cfg,
            0,
            &mut log,
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn empty_task_is_rejected() {
        let mut model = tiny_model(2);
        let mut buf = filled_buffer(true);
        let empty = Dataset::new(Tensor::new(vec![0, 2], vec![]).unwrap(), vec![], 2).unwrap();
        let mut log = StageLog::new();
        let err = train_specialist(
            &mut model,
            &empty,
            &mut buf,
            ReplayStyle::Class,
            OnlineBufferMode::Static,
            &TrainConfig::default(),
            0,
            &mut log,
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
