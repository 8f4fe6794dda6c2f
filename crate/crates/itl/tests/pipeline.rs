//! End-to-end pipeline checks: full variant runs in both element widths,
//! the binary formats round-tripping the exact artifacts a run produces,
//! per-stage evaluation coverage in the log, and real learning on an easy
//! stream.

mod common;

use common::*;
use itl::buffer::MemoryBuffer;
use itl::continual::{run, BufferConfig, BufferStrategy, TaskStream, Variant};
use itl::data::{read_dataset, write_dataset};
use itl::learners::{Stage, TrainConfig};
use itl::models::{ArchSpec, LogitFn, Model};

fn tiny_stream<F: itl::scalar::Scalar>(tasks: usize, per_class: usize, sigma: f64, seed: u64) -> TaskStream<F> {
    let spec = itl::data::BlobSpec {
        num_classes: tasks * 2,
        train_per_class: per_class,
        test_per_class: per_class.div_ceil(2),
        sigma,
        seed,
        ..itl::data::BlobSpec::default()
    };
    TaskStream::seq_blobs(&spec, tasks).unwrap()
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_specialist: 3,
        epochs_tangent: 5,
        epochs_distill: 5,
        epochs_finetune: 3,
        seed,
        ..TrainConfig::default()
    }
}

fn stratified(capacity: usize) -> BufferConfig {
    BufferConfig { capacity, strategy: BufferStrategy::Stratified }
}

#[test]
fn every_variant_completes_in_f32() {
    let stream = tiny_stream::<f32>(2, 12, 1.0, 3);
    let arch = ArchSpec::mlp(2, &[10], 4);
    for v in Variant::ALL {
        let out = run(&stream, v, &arch, &stratified(8), &quick_cfg(5)).unwrap();
        assert!(out.model.params().all_finite(), "variant {} left non-finite weights", v);
        for row in &out.metrics.acc_class_il {
            for &a in row {
                assert!((0.0..=1.0).contains(&a), "variant {}: accuracy {}", v, a);
            }
        }
        assert_eq!(out.metrics.acc_class_il.len(), 2);
        assert_eq!(out.buffer.len(), 8, "variant {} did not fill the buffer", v);
    }
}

#[test]
fn checkpoint_round_trip_preserves_the_run_model() {
    let stream = tiny_stream::<f64>(2, 10, 1.0, 4);
    let out = run(
        &stream,
        Variant::Itl,
        &ArchSpec::mlp(2, &[10], 4),
        &stratified(8),
        &quick_cfg(6),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    out.model.save(&path, Some("cfgdeadbeef seed=6")).unwrap();
    let loaded = Model::<f64>::load(&path).unwrap();

    assert!(loaded.params().bitwise_eq(out.model.params()), "weights changed across io");
    assert_eq!(loaded.arch(), out.model.arch());
    assert_eq!(loaded.seed(), out.model.seed());

    let x = stream.tasks()[1].test.x();
    let a = out.model.logits(x).unwrap();
    let b = loaded.logits(x).unwrap();
    assert!(a.bitwise_eq(&b), "loaded model computes different logits");
}

#[test]
fn checkpoint_rejects_wrong_width_and_corrupt_magic() {
    let model = mlp_f64(2, &[6], 3, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    model.save(&path, None).unwrap();

    assert!(Model::<f32>::load(&path).is_err(), "f32 load of an f64 checkpoint succeeded");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    let bad = dir.path().join("corrupt.bin");
    std::fs::write(&bad, bytes).unwrap();
    assert!(Model::<f64>::load(&bad).is_err(), "corrupt magic was accepted");

    let mut truncated = std::fs::read(&path).unwrap();
    truncated.truncate(truncated.len() - 3);
    let short = dir.path().join("short.bin");
    std::fs::write(&short, truncated).unwrap();
    assert!(Model::<f64>::load(&short).is_err(), "truncated checkpoint was accepted");
}

#[test]
fn dataset_files_round_trip_bitwise_and_deterministically() {
    let (train, _) = blob_data(4, 15, 1.0, 11);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    write_dataset(&a, &train).unwrap();
    write_dataset(&b, &train).unwrap();
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "two writes of one dataset produced different bytes"
    );

    let back = read_dataset::<f64>(&a).unwrap();
    assert!(back.x().bitwise_eq(train.x()));
    assert_eq!(back.labels(), train.labels());
    assert_eq!(back.num_classes(), train.num_classes());

    // Width conversion on load is value-level, not an error.
    let narrow = read_dataset::<f32>(&a).unwrap();
    assert_eq!(narrow.len(), train.len());
    for (w, n) in train.x().data().iter().zip(narrow.x().data()) {
        assert!((*w as f32 - *n).abs() <= f32::EPSILON * w.abs() as f32 * 4.0);
    }

    let mut bytes = std::fs::read(&a).unwrap();
    bytes.truncate(bytes.len() - 1);
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, bytes).unwrap();
    assert!(read_dataset::<f64>(&bad).is_err(), "truncated dataset was accepted");
}

#[test]
fn streamed_buffer_round_trips_with_its_digest() {
    let stream = tiny_stream::<f64>(2, 12, 1.0, 7);
    let out = run(
        &stream,
        Variant::ItlL,
        &ArchSpec::mlp(2, &[10], 4),
        &stratified(10),
        &quick_cfg(8),
    )
    .unwrap();
    assert!(
        out.buffer.entries().iter().all(|e| e.logits.is_some()),
        "the streaming variant must store logits with every entry"
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("buffer.bin");
    out.buffer.save(&path, Some("streamed")).unwrap();
    let loaded = MemoryBuffer::<f64>::load(&path, 0).unwrap();
    assert_eq!(loaded.len(), out.buffer.len());
    assert_eq!(loaded.logits_digest(), out.buffer.logits_digest());
}

#[test]
fn every_pipeline_stage_logs_an_evaluation_row() {
    let stream = tiny_stream::<f64>(2, 10, 1.0, 9);
    let out = run(
        &stream,
        Variant::Itl,
        &ArchSpec::mlp(2, &[10], 4),
        &stratified(8),
        &quick_cfg(10),
    )
    .unwrap();
    for t in 0..2 {
        for stage in [Stage::Specialist, Stage::Halfpipe, Stage::Tangent, Stage::Distill] {
            let row = out
                .log
                .eval_row(t, stage)
                .unwrap_or_else(|| panic!("no evaluation row for task {} stage {}", t, stage));
            assert!(row.loss.is_finite());
            let c = row.class_il.unwrap();
            let ti = row.task_il.unwrap();
            assert!((0.0..=1.0).contains(&c) && (0.0..=1.0).contains(&ti));
            assert!(ti >= c, "task-IL {} below class-IL {}", ti, c);
        }
    }
}

#[test]
fn tangent_pipeline_learns_an_easy_stream() {
    let stream = tiny_stream::<f64>(2, 30, 0.5, 12);
    let cfg = TrainConfig {
        epochs_specialist: 15,
        epochs_tangent: 200,
        epochs_distill: 300,
        batch_size: 16,
        seed: 13,
        ..TrainConfig::default()
    };
    let out = run(
        &stream,
        Variant::Itl,
        &ArchSpec::mlp(2, &[16], 4),
        &stratified(24),
        &cfg,
    )
    .unwrap();
    assert!(
        out.metrics.class_il_final >= 0.75,
        "final class-IL {} on a sigma-0.5 stream",
        out.metrics.class_il_final
    );
    assert!(
        out.metrics.task_il_final >= out.metrics.class_il_final,
        "task-IL mean fell below class-IL mean"
    );
}
