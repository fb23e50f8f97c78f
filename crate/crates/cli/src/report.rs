//! Result files. Every number written here is read off a `SessionResult`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ldc_core::protocol::SessionResult;
use serde::Serialize;

use crate::runner::Cell;

/// One JSONL line. Wall-clock times are left out so that reruns are
/// byte-identical; they go to the timing log instead.
#[derive(Serialize)]
struct Record<'a> {
    label: &'a str,
    method: &'a str,
    seed: u64,
    accuracies: &'a [f64],
    pd: f64,
    pr: f64,
    state_bytes: &'a [usize],
}

pub fn jsonl_line(cell: &Cell, r: &SessionResult) -> String {
    let rec = Record {
        label: &cell.label,
        method: r.method.name(),
        seed: r.seed,
        accuracies: &r.accuracies,
        pd: r.pd,
        pr: r.pr,
        state_bytes: &r.state_bytes,
    };
    serde_json::to_string(&rec).expect("plain data serializes")
}

pub fn timing_line(cell: &Cell, r: &SessionResult) -> String {
    let ms: Vec<String> = r.wall_ms.iter().map(|v| format!("{v:.1}")).collect();
    format!("{} {} seed={} wall_ms={}", cell.label, r.method.name(), r.seed, ms.join(","))
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Methods as rows, sessions as columns, each cell the mean accuracy over
/// seeds, followed by mean PD and PR.
pub fn accuracy_table(results: &[SessionResult]) -> String {
    let mut by_method: BTreeMap<&str, Vec<&SessionResult>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in results {
        let name = r.method.name();
        if !by_method.contains_key(name) {
            order.push(name);
        }
        by_method.entry(name).or_default().push(r);
    }
    let sessions = results.iter().map(|r| r.accuracies.len()).max().unwrap_or(0);
    let mut out = String::from("method");
    for t in 0..sessions {
        let _ = write!(out, ",session_{t}");
    }
    out.push_str(",pd,pr\n");
    for name in order {
        let rs = &by_method[name];
        out.push_str(name);
        for t in 0..sessions {
            let _ = write!(out, ",{:.2}", mean(rs.iter().filter_map(|r| r.accuracies.get(t).copied())));
        }
        let _ = writeln!(out, ",{:.2},{:.2}", mean(rs.iter().map(|r| r.pd)), mean(rs.iter().map(|r| r.pr)));
    }
    out
}

/// One ablation row: a variant and the cells that ran under it.
pub struct AblationRow<'a> {
    pub cell: &'a Cell,
    pub results: Vec<&'a SessionResult>,
}

pub const ABLATION_HEADER: &str =
    "variant,method,shot_mode,recur_iters,divergence,n_classes,seeds,mean_final_accuracy,mean_pd,mean_pr,final_state_bytes";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for row in rows {
        let c = row.cell;
        let p = &c.bench.protocol;
        let bytes = row
            .results
            .iter()
            .filter_map(|r| r.state_bytes.last())
            .max()
            .map_or(String::new(), |b| b.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.2},{:.2},{:.2},{}",
            c.label,
            c.method.name(),
            c.bench.shot_mode,
            p.recur_iters,
            p.divergence,
            c.bench.synth.n_classes,
            row.results.len(),
            mean(row.results.iter().map(|r| r.final_accuracy())),
            mean(row.results.iter().map(|r| r.pd)),
            mean(row.results.iter().map(|r| r.pr)),
            bytes,
        );
    }
    out
}
