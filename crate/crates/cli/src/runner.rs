//! Executes independent (config, method, seed) cells and streams each
//! finished cell to a single collector.

use std::sync::mpsc;

use ldc_core::protocol::{run_cell, BaselineKind, Benchmark, SessionResult};
use rayon::prelude::*;

use crate::config::DataSource;

#[derive(Clone, Debug)]
pub struct Cell {
    /// Ablation variant, or the method name for plain runs.
    pub label: String,
    pub bench: Benchmark,
    pub method: BaselineKind,
    pub seed: u64,
}

pub type CellResult = Result<SessionResult, ldc_core::LdcError>;

fn run_one(cell: &Cell, source: &DataSource) -> CellResult {
    let episode = source.episode(&cell.bench, cell.seed)?;
    run_cell(&episode, cell.method, &cell.bench.protocol, cell.bench.shot_mode, cell.seed)
}

/// True when `LDC_DETERMINISTIC=1` is set.
pub fn deterministic() -> bool {
    std::env::var("LDC_DETERMINISTIC").is_ok_and(|v| v.trim() == "1")
}

/// Runs every cell, calling `sink` once per finished cell in completion
/// order. With one thread (or in deterministic mode) completion order is
/// cell order. Returns results indexed like `cells`.
pub fn execute<E>(
    cells: &[Cell],
    source: &DataSource,
    threads: usize,
    mut sink: impl FnMut(&Cell, &CellResult) -> Result<(), E>,
) -> Result<Vec<CellResult>, E> {
    let mut out: Vec<Option<CellResult>> = (0..cells.len()).map(|_| None).collect();
    if threads <= 1 || deterministic() {
        for (i, cell) in cells.iter().enumerate() {
            let r = run_one(cell, source);
            sink(cell, &r)?;
            out[i] = Some(r);
        }
    } else {
        let (tx, rx) = mpsc::channel();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        std::thread::scope(|s| -> Result<(), E> {
            s.spawn(move || {
                pool.install(|| {
                    cells.par_iter().enumerate().for_each_with(tx, |tx, (i, cell)| {
                        // the collector only stops early on a sink error
                        let _ = tx.send((i, run_one(cell, source)));
                    })
                })
            });
            for (i, r) in rx {
                sink(&cells[i], &r)?;
                out[i] = Some(r);
            }
            Ok(())
        })?;
    }
    Ok(out.into_iter().map(|r| r.expect("every cell reported")).collect())
}
