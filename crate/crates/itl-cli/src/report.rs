//! The `report` subcommand: aggregates per-run metrics files into
//! variant/capacity comparison tables and per-task / per-stage series.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use itl::{Error, Result, Variant};

use crate::runner::RunRecord;
use crate::ReportArgs;

/// Sample mean and standard deviation (n-1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

struct Located {
    record: RunRecord,
    /// Directory holding metrics.json, searched for the stage log.
    dir: PathBuf,
}

pub fn report(args: ReportArgs) -> Result<()> {
    let mut located = Vec::new();
    for path in &args.paths {
        collect(path, &mut located)?;
    }
    if located.is_empty() {
        return Err(Error::Data("no metrics.json files found under the given paths".into()));
    }

    let variants = ordered_variants(&located);
    let capacities: Vec<usize> = located
        .iter()
        .map(|l| l.record.buffer_capacity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    print!("{}", final_table(&located, &variants, &capacities, |r| r.metrics.class_il_final, "class-IL %"));
    print!("{}", final_table(&located, &variants, &capacities, |r| r.metrics.task_il_final, "task-IL %"));
    println!("{} runs aggregated", located.len());

    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report_final.csv"), final_csv(&located, &variants, &capacities))?;
        fs::write(
            out.join("report_accuracy.csv"),
            accuracy_series_csv(&located, &variants, &capacities)?,
        )?;
        fs::write(
            out.join("report_stages.csv"),
            stage_series_csv(&located, &variants, &capacities)?,
        )?;
        println!("series written to {}", out.display());
    }
    Ok(())
}

fn collect(path: &Path, out: &mut Vec<Located>) -> Result<()> {
    if path.is_dir() {
        let mut stack = vec![path.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let mut children: Vec<PathBuf> =
                fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            children.sort();
            for child in children {
                if child.is_dir() {
                    stack.push(child);
                } else if child.file_name().is_some_and(|n| n == "metrics.json") {
                    out.push(load_record(&child)?);
                }
            }
        }
        Ok(())
    } else if path.is_file() {
        out.push(load_record(path)?);
        Ok(())
    } else {
        Err(Error::Data(format!("{}: no such file or directory", path.display())))
    }
}

fn load_record(path: &Path) -> Result<Located> {
    let text = fs::read_to_string(path)?;
    let record: RunRecord = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: incompatible metrics schema: {}", path.display(), e)))?;
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok(Located { record, dir })
}

/// Variant names present, pipeline-ladder order first, unknown names after.
fn ordered_variants(located: &[Located]) -> Vec<String> {
    let names: BTreeSet<&str> = located.iter().map(|l| l.record.variant.as_str()).collect();
    let mut keyed: Vec<(usize, String)> = names
        .into_iter()
        .map(|n| {
            let pos = Variant::ALL
                .iter()
                .position(|v| v.to_string() == n)
                .unwrap_or(Variant::ALL.len());
            (pos, n.to_string())
        })
        .collect();
    keyed.sort();
    keyed.into_iter().map(|(_, n)| n).collect()
}

fn group<'a>(located: &'a [Located], variant: &str, capacity: usize) -> Vec<&'a Located> {
    located
        .iter()
        .filter(|l| l.record.variant == variant && l.record.buffer_capacity == capacity)
        .collect()
}

fn final_table(
    located: &[Located],
    variants: &[String],
    capacities: &[usize],
    value: fn(&RunRecord) -> f64,
    title: &str,
) -> String {
    let mut out = format!("{:<12}", title);
    for cap in capacities {
        out.push_str(&format!(" {:>20}", format!("buffer {}", cap)));
    }
    out.push('\n');
    for v in variants {
        out.push_str(&format!("{:<12}", v));
        for &cap in capacities {
            let g = group(located, v, cap);
            if g.is_empty() {
                out.push_str(&format!(" {:>20}", "-"));
            } else {
                let (m, s) =
                    mean_std(&g.iter().map(|l| value(&l.record) * 100.0).collect::<Vec<_>>());
                out.push_str(&format!(" {:>20}", format!("{:.2} \u{b1} {:.2} ({})", m, s, g.len())));
            }
        }
        out.push('\n');
    }
    out.push('\n');
    out
}

fn final_csv(located: &[Located], variants: &[String], capacities: &[usize]) -> String {
    let mut out = String::from(
        "variant,capacity,seeds,class_il_mean,class_il_std,task_il_mean,task_il_std,forgetting_mean,forgetting_std\n",
    );
    for v in variants {
        for &cap in capacities {
            let g = group(located, v, cap);
            if g.is_empty() {
                continue;
            }
            let (cm, cs) =
                mean_std(&g.iter().map(|l| l.record.metrics.class_il_final).collect::<Vec<_>>());
            let (tm, ts) =
                mean_std(&g.iter().map(|l| l.record.metrics.task_il_final).collect::<Vec<_>>());
            let (fm, fs) =
                mean_std(&g.iter().map(|l| l.record.metrics.avg_forgetting).collect::<Vec<_>>());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                v,
                cap,
                g.len(),
                cm,
                cs,
                tm,
                ts,
                fm,
                fs
            ));
        }
    }
    out
}

/// Accuracy-over-time series: the accuracy matrices averaged over seeds.
fn accuracy_series_csv(
    located: &[Located],
    variants: &[String],
    capacities: &[usize],
) -> Result<String> {
    let mut out =
        String::from("variant,capacity,after_task,eval_task,class_il_mean,task_il_mean\n");
    for v in variants {
        for &cap in capacities {
            let g = group(located, v, cap);
            if g.is_empty() {
                continue;
            }
            let tasks = g[0].record.metrics.num_tasks;
            if g.iter().any(|l| l.record.metrics.num_tasks != tasks) {
                return Err(Error::Data(format!(
                    "variant {} capacity {}: runs disagree on task count",
                    v, cap
                )));
            }
            for t in 0..tasks {
                for tau in 0..=t {
                    let (cm, _) = mean_std(
                        &g.iter().map(|l| l.record.metrics.acc_class_il[t][tau]).collect::<Vec<_>>(),
                    );
                    let (tm, _) = mean_std(
                        &g.iter().map(|l| l.record.metrics.acc_task_il[t][tau]).collect::<Vec<_>>(),
                    );
                    out.push_str(&format!("{},{},{},{},{},{}\n", v, cap, t, tau, cm, tm));
                }
            }
        }
    }
    Ok(out)
}

struct EvalRow {
    task: usize,
    stage: String,
    loss: f64,
    class_il: f64,
    task_il: f64,
}

/// Parses a stage log, keeping only the end-of-stage evaluation rows.
fn parse_stage_log(path: &Path) -> Result<Vec<EvalRow>> {
    let text = fs::read_to_string(path)?;
    let fail = |msg: String| Error::Data(format!("{}: {}", path.display(), msg));
    let mut rows = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != "task,stage,step,loss,class_il,task_il" {
                return Err(fail(format!("incompatible stage log header '{}'", line)));
            }
            saw_header = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(fail(format!("bad stage log row '{}'", line)));
        }
        if parts[4].is_empty() {
            continue;
        }
        let p = |s: &str| s.parse::<f64>().map_err(|_| fail(format!("bad number in '{}'", line)));
        rows.push(EvalRow {
            task: parts[0].parse().map_err(|_| fail(format!("bad task in '{}'", line)))?,
            stage: parts[1].to_string(),
            loss: p(parts[3])?,
            class_il: p(parts[4])?,
            task_il: p(parts[5])?,
        });
    }
    Ok(rows)
}

/// Stage-wise series from the stage logs next to each metrics file; runs
/// without a stage log are skipped.
fn stage_series_csv(
    located: &[Located],
    variants: &[String],
    capacities: &[usize],
) -> Result<String> {
    let mut out =
        String::from("variant,capacity,task,stage,loss_mean,class_il_mean,task_il_mean\n");
    for v in variants {
        for &cap in capacities {
            let g = group(located, v, cap);
            // (task, stage) -> per-seed samples, ordered by first appearance.
            let mut keys: Vec<(usize, String)> = Vec::new();
            let mut cells: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
            for l in &g {
                let log_path = l.dir.join("stage_log.csv");
                if !log_path.is_file() {
                    continue;
                }
                for row in parse_stage_log(&log_path)? {
                    let key = (row.task, row.stage.clone());
                    let idx = match keys.iter().position(|k| *k == key) {
                        Some(i) => i,
                        None => {
                            keys.push(key);
                            cells.push((Vec::new(), Vec::new(), Vec::new()));
                            keys.len() - 1
                        }
                    };
                    cells[idx].0.push(row.loss);
                    cells[idx].1.push(row.class_il);
                    cells[idx].2.push(row.task_il);
                }
            }
            for ((task, stage), (loss, class, task_il)) in keys.into_iter().zip(cells) {
                let (lm, _) = mean_std(&loss);
                let (cm, _) = mean_std(&class);
                let (tm, _) = mean_std(&task_il);
                out.push_str(&format!("{},{},{},{},{},{},{}\n", v, cap, task, stage, lm, cm, tm));
            }
        }
    }
    Ok(out)
}
