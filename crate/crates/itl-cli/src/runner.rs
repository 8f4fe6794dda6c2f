//! The `gen` and `run` subcommands: dataset materialization and experiment
//! execution with provenance-stamped artifacts.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use itl::data::{read_dataset, write_dataset};
use itl::{
    generate_blobs, split_classes, ArchSpec, BufferConfig, Dtype, Error, Metrics, Result, Scalar,
    TaskStream, TrainConfig, Variant,
};

use crate::config::{hash_value, ArchKind, DataSection, ExperimentConfig, ModelSection};
use crate::report::mean_std;
use crate::{apply_overrides, out_root, GenArgs, RunArgs};

/// One run's metrics plus the provenance needed to aggregate it later.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub buffer_capacity: usize,
    pub precision: Dtype,
    pub metrics: Metrics,
}

/// Sidecar manifest written next to generated dataset files.
#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    config_hash: String,
    seed: u64,
    classes: usize,
    dim: usize,
    radius: f64,
    sigma: f64,
    train_records: usize,
    test_records: usize,
    precision: Dtype,
}

pub fn gen(args: GenArgs) -> Result<()> {
    let mut section = match &args.config {
        Some(path) => ExperimentConfig::from_path(path)?.data,
        None => DataSection::default(),
    };
    if let Some(v) = args.classes {
        section.classes = v;
    }
    if let Some(v) = args.dim {
        section.dim = v;
    }
    if let Some(v) = args.train_per_class {
        section.train_per_class = v;
    }
    if let Some(v) = args.test_per_class {
        section.test_per_class = v;
    }
    if let Some(v) = args.radius {
        section.radius = v;
    }
    if let Some(v) = args.sigma {
        section.sigma = v;
    }
    if let Some(v) = args.seed {
        section.seed = v;
    }
    section.train = None;
    section.test = None;

    let precision = parse_precision(&args.precision)?;
    let spec = section.blob_spec();
    spec.validate()?;

    let dir = args.out.unwrap_or_else(|| out_root(None, None).join("dataset"));
    fs::create_dir_all(&dir)?;
    let (train_records, test_records) = match precision {
        Dtype::F32 => write_blobs::<f32>(&spec, &dir)?,
        Dtype::F64 => write_blobs::<f64>(&spec, &dir)?,
    };
    let manifest = DatasetManifest {
        config_hash: hash_value(&section)?,
        seed: section.seed,
        classes: section.classes,
        dim: section.dim,
        radius: section.radius,
        sigma: section.sigma,
        train_records,
        test_records,
        precision,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest encode: {}", e)))?;
    fs::write(dir.join("manifest.json"), json)?;
    println!(
        "wrote {} train / {} test records to {}",
        train_records,
        test_records,
        dir.display()
    );
    Ok(())
}

fn write_blobs<F: Scalar>(spec: &itl::BlobSpec, dir: &Path) -> Result<(usize, usize)> {
    let (train, test) = generate_blobs::<F>(spec)?;
    write_dataset(&dir.join("train.bin"), &train)?;
    write_dataset(&dir.join("test.bin"), &test)?;
    Ok((train.len(), test.len()))
}

fn parse_precision(s: &str) -> Result<Dtype> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(Error::Config(format!("unknown precision '{}'", other))),
    }
}

pub fn run(args: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    apply_overrides(&mut cfg, &args);
    cfg.validate()?;

    let stem = args
        .config
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("experiment")
        .to_string();
    match cfg.train.precision {
        Dtype::F32 => execute::<f32>(&cfg, &stem),
        Dtype::F64 => execute::<f64>(&cfg, &stem),
    }
}

fn execute<F: Scalar>(cfg: &ExperimentConfig, stem: &str) -> Result<()> {
    // Resolve everything fallible before the first directory is created, so
    // a bad config leaves no artifacts behind.
    let stream = build_stream::<F>(cfg)?;
    let arch = resolve_arch(&cfg.model, &stream)?;
    let bcfg = BufferConfig { capacity: cfg.buffer.capacity, strategy: cfg.buffer.strategy() };
    let variants = cfg.variants();
    let hash = cfg.hash()?;

    let run_dir = out_root(None, cfg.run.out_dir.clone()).join(format!("{}-{}", stem, hash));
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;

    let pairs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| cfg.run.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<RunRecord>> = pairs
        .par_iter()
        .map(|&(variant, seed)| {
            let dir = run_dir.join(variant.to_string()).join(format!("seed{}", seed));
            one_run::<F>(&stream, variant, &arch, &bcfg, &cfg.train.train, seed, &dir, &hash)
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }

    let table = summarize(&records, &variants, &cfg.run.seeds);
    fs::write(run_dir.join("summary.txt"), format!("# config_hash={}\n{}", hash, table))?;
    fs::write(run_dir.join("summary.csv"), summary_csv(&records, &variants, &hash))?;
    print!("{}", table);
    println!("artifacts: {}", run_dir.display());
    Ok(())
}

fn build_stream<F: Scalar>(cfg: &ExperimentConfig) -> Result<TaskStream<F>> {
    if cfg.data.is_file_based()? {
        let train = read_dataset::<F>(cfg.data.train.as_ref().expect("checked"))?;
        let test = read_dataset::<F>(cfg.data.test.as_ref().expect("checked"))?;
        let groups = split_classes(train.num_classes(), cfg.stream.tasks)?;
        TaskStream::from_splits(&train, &test, groups, cfg.data.seed)
    } else {
        TaskStream::seq_blobs(&cfg.data.blob_spec(), cfg.stream.tasks)
    }
}

fn resolve_arch<F: Scalar>(model: &ModelSection, stream: &TaskStream<F>) -> Result<ArchSpec> {
    let shape = stream.tasks()[0].train.sample_shape();
    match model.arch {
        ArchKind::Mlp => {
            if shape.len() != 1 {
                return Err(Error::Config(format!(
                    "mlp expects flat samples, dataset has shape {:?}",
                    shape
                )));
            }
            Ok(ArchSpec::mlp(shape[0], &model.hidden, stream.total_classes()))
        }
        ArchKind::Cnn => {
            if shape.len() != 3 {
                return Err(Error::Config(format!(
                    "cnn expects [channels, height, width] samples, dataset has shape {:?}",
                    shape
                )));
            }
            Ok(ArchSpec::small_cnn(
                [shape[0], shape[1], shape[2]],
                model.channels,
                stream.total_classes(),
            ))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn one_run<F: Scalar>(
    stream: &TaskStream<F>,
    variant: Variant,
    arch: &ArchSpec,
    bcfg: &BufferConfig,
    base: &TrainConfig,
    seed: u64,
    dir: &Path,
    hash: &str,
) -> Result<RunRecord> {
    let mut tc = base.clone();
    tc.seed = seed;
    let out = itl::continual::run(stream, variant, arch, bcfg, &tc)?;

    fs::create_dir_all(dir)?;
    let prov = format!("config_hash={} seed={}", hash, seed);
    let record = RunRecord {
        config_hash: hash.to_string(),
        variant: variant.to_string(),
        seed,
        buffer_capacity: bcfg.capacity,
        precision: F::DTYPE,
        metrics: out.metrics,
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Data(format!("metrics encode: {}", e)))?;
    fs::write(dir.join("metrics.json"), json)?;
    fs::write(
        dir.join("metrics.csv"),
        format!("# {}\n{}", prov, record.metrics.accuracy_csv()),
    )?;
    fs::write(dir.join("stage_log.csv"), format!("# {}\n{}", prov, out.log.to_csv()))?;
    out.model.save(&dir.join("checkpoint.bin"), Some(&prov))?;
    out.buffer.save(&dir.join("buffer.bin"), Some(&prov))?;
    Ok(record)
}

fn per_variant<'a>(records: &'a [RunRecord], variant: Variant) -> Vec<&'a RunRecord> {
    let name = variant.to_string();
    records.iter().filter(|r| r.variant == name).collect()
}

/// Human-readable mean-over-seeds table, accuracies in percent.
fn summarize(records: &[RunRecord], variants: &[Variant], seeds: &[u64]) -> String {
    let mut out = format!(
        "{:<12} {:>5} {:>16} {:>16} {:>16}\n",
        "variant", "seeds", "class-IL %", "task-IL %", "forgetting %"
    );
    for &v in variants {
        let group = per_variant(records, v);
        let (cm, cs) = mean_std(&group.iter().map(|r| r.metrics.class_il_final * 100.0).collect::<Vec<_>>());
        let (tm, ts) = mean_std(&group.iter().map(|r| r.metrics.task_il_final * 100.0).collect::<Vec<_>>());
        let (fm, fs) = mean_std(&group.iter().map(|r| r.metrics.avg_forgetting * 100.0).collect::<Vec<_>>());
        out.push_str(&format!(
            "{:<12} {:>5} {:>9.2} \u{b1} {:<4.2} {:>9.2} \u{b1} {:<4.2} {:>9.2} \u{b1} {:<4.2}\n",
            v.to_string(),
            seeds.len(),
            cm,
            cs,
            tm,
            ts,
            fm,
            fs
        ));
    }
    out
}

fn summary_csv(records: &[RunRecord], variants: &[Variant], hash: &str) -> String {
    let mut out = format!("# config_hash={}\n", hash);
    out.push_str(
        "variant,seeds,class_il_mean,class_il_std,task_il_mean,task_il_std,forgetting_mean,forgetting_std\n",
    );
    for &v in variants {
        let group = per_variant(records, v);
        let (cm, cs) = mean_std(&group.iter().map(|r| r.metrics.class_il_final).collect::<Vec<_>>());
        let (tm, ts) = mean_std(&group.iter().map(|r| r.metrics.task_il_final).collect::<Vec<_>>());
        let (fm, fs) = mean_std(&group.iter().map(|r| r.metrics.avg_forgetting).collect::<Vec<_>>());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            v,
            group.len(),
            cm,
            cs,
            tm,
            ts,
            fm,
            fs
        ));
    }
    out
}
