//! Report generation: scans run directories for metric traces, groups them
//! by method, and prints the two summary tables (accuracy, efficiency) with
//! per-method maxima at 4-decimal precision. Optionally exports per-epoch
//! curves as CSV.

use crate::error::AppError;
use ftlab_core::training::{MetricsTrace, Strategy};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

const BYTES_PER_MIB: f64 = (1u64 << 20) as f64;

/// Collects every trace reachable from `roots`. A root may itself be a run
/// directory (holds `trace.jsonl`) or an ancestor of several; distillation
/// `teacher/` subruns are provenance, not methods, and are skipped.
pub fn collect_traces(roots: &[PathBuf]) -> Result<Vec<MetricsTrace>, AppError> {
    let mut traces = Vec::new();
    for root in roots {
        if !root.exists() {
            return Err(AppError::usage(format!("no such directory: {}", root.display())));
        }
        scan(root, &mut traces, 0)?;
    }
    traces.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(traces)
}

fn scan(dir: &Path, traces: &mut Vec<MetricsTrace>, depth: usize) -> Result<(), AppError> {
    if depth > 4 || dir.file_name().is_some_and(|n| n == "teacher") {
        return Ok(());
    }
    if dir.join("trace.jsonl").exists() {
        let trace = MetricsTrace::load(dir)
            .map_err(|e| AppError::runtime(format!("{}: {}", dir.display(), e)))?;
        traces.push(trace);
    }
    let entries = std::fs::read_dir(dir)?;
    let mut children: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        scan(&child, traces, depth + 1)?;
    }
    Ok(())
}

#[derive(Debug, PartialEq)]
struct MethodRow {
    method: String,
    max_id_acc: f64,
    max_ood_acc: f64,
    max_iter_time_s: f64,
    max_mem_mib: f64,
}

/// Per-method maxima across every epoch of every run of that method.
fn summarize(traces: &[MetricsTrace]) -> Vec<MethodRow> {
    let mut by_method: BTreeMap<&str, Vec<&MetricsTrace>> = BTreeMap::new();
    for t in traces {
        by_method.entry(t.strategy.as_str()).or_default().push(t);
    }
    let mut rows: Vec<MethodRow> = by_method
        .into_iter()
        .map(|(method, group)| {
            let mut row = MethodRow {
                method: method.to_string(),
                max_id_acc: f64::NEG_INFINITY,
                max_ood_acc: f64::NEG_INFINITY,
                max_iter_time_s: f64::NEG_INFINITY,
                max_mem_mib: f64::NEG_INFINITY,
            };
            for t in group {
                for e in &t.epochs {
                    row.max_id_acc = row.max_id_acc.max(e.id_acc);
                    row.max_ood_acc = row.max_ood_acc.max(e.ood_acc);
                    row.max_iter_time_s = row.max_iter_time_s.max(e.iter_time_s);
                    row.max_mem_mib = row.max_mem_mib.max(e.mem_bytes as f64 / BYTES_PER_MIB);
                }
            }
            row
        })
        .collect();
    rows.sort_by_key(|r| method_rank(&r.method));
    rows
}

/// Known methods keep the conventional presentation order; anything else
/// follows alphabetically.
fn method_rank(method: &str) -> (usize, String) {
    let order = Strategy::ALL;
    match order.iter().position(|s| s.name() == method) {
        Some(i) => (i, String::new()),
        None => (order.len(), method.to_string()),
    }
}

pub fn render_tables(traces: &[MetricsTrace]) -> String {
    let rows = summarize(traces);
    let mut out = String::new();
    out.push_str("Method\tMax In-Domain\tMax Out-Domain\n");
    for r in &rows {
        out.push_str(&format!("{}\t{:.4}\t{:.4}\n", r.method, r.max_id_acc, r.max_ood_acc));
    }
    out.push('\n');
    out.push_str("Method\tMax Iteration Time (s)\tMax Memory Usage (MB)\n");
    for r in &rows {
        out.push_str(&format!("{}\t{:.4}\t{:.4}\n", r.method, r.max_iter_time_s, r.max_mem_mib));
    }
    out
}

/// Per-epoch curves for plotting, one CSV row per (run, epoch).
pub fn write_curves(traces: &[MetricsTrace], path: &Path) -> Result<(), AppError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "method,run_id,epoch,loss,id_acc,ood_acc,iter_time_s,mem_bytes")?;
    for t in traces {
        for e in &t.epochs {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                t.strategy, t.run_id, e.epoch, e.loss, e.id_acc, e.ood_acc, e.iter_time_s, e.mem_bytes
            )?;
        }
    }
    Ok(())
}

pub fn cmd_report(roots: &[PathBuf], curves: Option<&Path>) -> Result<(), AppError> {
    let traces = collect_traces(roots)?;
    if traces.is_empty() {
        return Err(AppError::runtime("no trace files found under the given directories".to_string()));
    }
    print!("{}", render_tables(&traces));
    if let Some(path) = curves {
        write_curves(&traces, path)?;
        println!("\ncurves: {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ftlab_core::training::EpochRecord;

    fn fixture(run_id: &str, strategy: &str, id_accs: &[f64]) -> MetricsTrace {
        let mut t = MetricsTrace::new(run_id, strategy, serde_json::json!({}));
        for (i, &acc) in id_accs.iter().enumerate() {
            t.epochs.push(EpochRecord {
                epoch: i,
                loss: 1.0 / (i + 1) as f64,
                id_acc: acc,
                ood_acc: acc - 0.01,
                iter_time_s: 0.5 + i as f64,
                mem_bytes: (i as u64 + 1) * (1 << 20),
            });
        }
        t
    }

    #[test]
    fn report_picks_the_maximum_epoch_values() {
        let traces = vec![fixture("vft-seed1", "vft", &[0.3, 0.8169, 0.5])];
        let text = render_tables(&traces);
        assert!(text.contains("vft\t0.8169\t0.8069\n"), "got:\n{}", text);
        // Max memory: 3 MiB exactly; max time 2.5 s.
        assert!(text.contains("vft\t2.5000\t3.0000\n"), "got:\n{}", text);
    }

    #[test]
    fn single_epoch_trace_reports_that_epoch_for_both_maxima() {
        let traces = vec![fixture("pbft-seed2", "pbft", &[0.6512])];
        let rows = summarize(&traces);
        assert_eq!(rows[0].max_id_acc, 0.6512);
        assert_eq!(rows[0].max_ood_acc, 0.6512 - 0.01);
    }

    #[test]
    fn one_row_per_method_with_names_preserved() {
        let traces = vec![
            fixture("vft-seed1", "vft", &[0.7]),
            fixture("vft-seed2", "vft", &[0.9]),
            fixture("cd-seed1", "cd", &[0.4]),
        ];
        let rows = summarize(&traces);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].method, "vft");
        assert_eq!(rows[1].method, "cd");
        assert_eq!(rows[0].max_id_acc, 0.9);
    }

    #[test]
    fn tables_have_header_plus_one_line_per_method() {
        let traces = vec![
            fixture("vft-seed1", "vft", &[0.7]),
            fixture("pbft-seed1", "pbft", &[0.6]),
        ];
        let text = render_tables(&traces);
        let blocks: Vec<&str> = text.trim_end().split("\n\n").collect();
        assert_eq!(blocks.len(), 2);
        for block in blocks {
            let lines: Vec<&str> = block.lines().collect();
            assert_eq!(lines.len(), 3);
            assert!(lines[0].starts_with("Method\t"));
            for row in &lines[1..] {
                assert_eq!(row.split('\t').count(), 3);
            }
        }
    }

    #[test]
    fn curves_export_has_one_row_per_epoch() {
        let tmp = tempfile::tempdir().unwrap();
        let traces = vec![fixture("vft-seed1", "vft", &[0.7, 0.8])];
        let path = tmp.path().join("curves.csv");
        write_curves(&traces, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("vft,vft-seed1,0,"));
    }

    #[test]
    fn teacher_subruns_are_not_counted_as_methods() {
        let tmp = tempfile::tempdir().unwrap();
        let run = tmp.path().join("cd-seed1");
        let teacher = run.join("teacher");
        std::fs::create_dir_all(&teacher).unwrap();
        fixture("cd-seed1", "cd", &[0.4]).persist(&run).unwrap();
        fixture("cd-seed1-teacher", "pbft", &[0.9]).persist(&teacher).unwrap();
        let traces = collect_traces(&[tmp.path().to_path_buf()]).unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].strategy, "cd");
    }
}
