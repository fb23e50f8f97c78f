use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ldc_core::dataio::{read_embedding_file, ShotMode};
use ldc_core::gradcheck::{run_suite, GradCheckReport};
use ldc_core::linstats::DivergenceKind;
use ldc_core::project::pca2;
use ldc_core::protocol::{run_base_session, BaselineKind, SessionResult};
use ldc_core::SampleSet;

use crate::config::{ConfigError, DataSource, ExperimentConfig};
use crate::report::{ablation_csv, accuracy_table, jsonl_line, timing_line, AblationRow};
use crate::runner::{execute, Cell, CellResult};

pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
    #[error("{0} gradient check(s) failed")]
    CheckFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ldc_core::LdcError> for CliError {
    fn from(e: ldc_core::LdcError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Flags shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seeds: Option<String>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = crate::config::parse_seeds("--seeds", s)?;
        }
        Ok(cfg)
    }

    pub fn threads(&self) -> usize {
        self.threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }
}

/// Streams JSONL and timing lines as cells finish.
struct Collector {
    jsonl: BufWriter<File>,
    timings: BufWriter<File>,
    failures: Vec<String>,
}

impl Collector {
    fn create(dir: &Path, stem: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            jsonl: BufWriter::new(File::create(dir.join(format!("{stem}.jsonl")))?),
            timings: BufWriter::new(File::create(dir.join(format!("{stem}.timings.log")))?),
            failures: Vec::new(),
        })
    }

    fn accept(&mut self, cell: &Cell, r: &CellResult) -> std::io::Result<()> {
        match r {
            Ok(res) => {
                writeln!(self.jsonl, "{}", jsonl_line(cell, res))?;
                writeln!(self.timings, "{}", timing_line(cell, res))?;
                self.jsonl.flush()?;
                self.timings.flush()?;
                log::info!("{} {} seed {}: final {:.2}", cell.label, cell.method, cell.seed, res.final_accuracy());
            }
            Err(e) => {
                log::error!("{} {} seed {}: {e}", cell.label, cell.method, cell.seed);
                self.failures.push(format!("{} {} seed {}: {e}", cell.label, cell.method, cell.seed));
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        if self.failures.is_empty() {
            Ok(())
        } else {
            Err(CliError::Runtime(format!("{} cell(s) failed: {}", self.failures.len(), self.failures.join("; "))))
        }
    }
}

fn run_cells(cells: &[Cell], source: &DataSource, dir: &Path, stem: &str, threads: usize) -> Result<Vec<CellResult>, CliError> {
    let mut collector = Collector::create(dir, stem)?;
    let results = execute(cells, source, threads, |c, r| collector.accept(c, r))?;
    collector.finish()?;
    Ok(results)
}

/// Paths written by `run`.
#[derive(Debug)]
pub struct RunOutput {
    pub jsonl: PathBuf,
    pub table: PathBuf,
    pub results: Vec<SessionResult>,
}

pub fn cmd_run(cfg: &ExperimentConfig, threads: usize) -> Result<RunOutput, CliError> {
    let source = cfg.source()?;
    let cells: Vec<Cell> = cfg
        .methods
        .iter()
        .flat_map(|&m| {
            cfg.seeds.iter().map(move |&seed| Cell { label: m.name().into(), bench: cfg.bench.clone(), method: m, seed })
        })
        .collect();
    let results: Vec<SessionResult> = run_cells(&cells, &source, &cfg.out_dir, "results", threads)?
        .into_iter()
        .collect::<Result<_, _>>()?;
    let table = cfg.out_dir.join("accuracy.csv");
    fs::write(&table, accuracy_table(&results))?;
    Ok(RunOutput { jsonl: cfg.out_dir.join("results.jsonl"), table, results })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Sampler,
    Recurrent,
    Divergence,
    Outlier,
    Memory,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::Sampler, Self::Recurrent, Self::Divergence, Self::Outlier, Self::Memory];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sampler => "sampler",
            Self::Recurrent => "recurrent",
            Self::Divergence => "divergence",
            Self::Outlier => "outlier",
            Self::Memory => "memory",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}; expected one of sampler, recurrent, divergence, outlier, memory"))
    }
}

/// Class counts swept by the memory ablation.
pub const MEMORY_SWEEP: [usize; 4] = [10, 20, 40, 100];

/// One representative cell per ablation row; seeds are filled in later.
fn ablation_variants(which: Ablation, cfg: &ExperimentConfig) -> Vec<Cell> {
    let base = &cfg.bench;
    let variant = |label: String, method: BaselineKind, edit: &dyn Fn(&mut ldc_core::protocol::Benchmark)| {
        let mut bench = base.clone();
        edit(&mut bench);
        Cell { label, bench, method, seed: 0 }
    };
    let r_star = base.protocol.recur_iters;
    match which {
        Ablation::Sampler => vec![
            variant("sampler_off".into(), BaselineKind::PrototypeOnly, &|_| {}),
            variant("sampler_on".into(), BaselineKind::Ldc, &|b| b.protocol.recur_iters = 0),
        ],
        Ablation::Recurrent => [0, r_star]
            .into_iter()
            .map(|r| variant(format!("r{r}"), BaselineKind::Ldc, &move |b| b.protocol.recur_iters = r))
            .collect(),
        Ablation::Divergence => DivergenceKind::ALL
            .into_iter()
            .map(|k| variant(k.name().into(), BaselineKind::Ldc, &move |b| b.protocol.divergence = k))
            .collect(),
        Ablation::Outlier => [BaselineKind::Ldc, BaselineKind::EmpiricalCalib]
            .into_iter()
            .flat_map(|m| {
                [ShotMode::Normal, ShotMode::Outlier]
                    .into_iter()
                    .map(move |mode| (m, mode))
            })
            .map(|(m, mode)| variant(format!("{}_{mode}", m.name()), m, &move |b| b.shot_mode = mode))
            .collect(),
        Ablation::Memory => MEMORY_SWEEP
            .into_iter()
            .flat_map(|n| [BaselineKind::Ldc, BaselineKind::EmpiricalCalib].into_iter().map(move |m| (n, m)))
            .map(|(n, m)| {
                variant(format!("n{n}_{}", m.name()), m, &move |b| {
                    b.synth.n_classes = n;
                    b.n_base = n / 2;
                    b.n_way = n / 10;
                })
            })
            .collect(),
    }
}

pub fn cmd_ablate(which: Ablation, cfg: &ExperimentConfig, threads: usize) -> Result<PathBuf, CliError> {
    let source = cfg.source()?;
    if which == Ablation::Memory && !matches!(source, DataSource::Synthetic) {
        return Err(ConfigError::Invalid("the memory ablation sweeps synthetic class counts".into()).into());
    }
    let variants = ablation_variants(which, cfg);
    for v in &variants {
        v.bench.validate().map_err(|e| ConfigError::Invalid(format!("{}: {e}", v.label)))?;
    }
    // state size depends only on the class count, so one seed suffices
    let seeds: &[u64] = if which == Ablation::Memory { &cfg.seeds[..1] } else { &cfg.seeds };
    let cells: Vec<Cell> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&seed| Cell { seed, ..v.clone() }))
        .collect();
    let stem = format!("ablation_{which}");
    let results = run_cells(&cells, &source, &cfg.out_dir, &stem, threads)?;
    let rows: Vec<AblationRow> = variants
        .iter()
        .map(|v| AblationRow {
            cell: v,
            results: cells
                .iter()
                .zip(&results)
                .filter(|(c, _)| c.label == v.label)
                .filter_map(|(_, r)| r.as_ref().ok())
                .collect(),
        })
        .collect();
    let path = cfg.out_dir.join(format!("{stem}.csv"));
    fs::write(&path, ablation_csv(&rows))?;
    Ok(path)
}

/// Named sample sets stacked for projection.
pub fn projection_csv(sets: &[(String, SampleSet)]) -> Result<(String, f64), CliError> {
    let mut pooled: Option<ldc_core::Matrix> = None;
    for (_, s) in sets {
        pooled = Some(match pooled {
            None => s.features.clone(),
            Some(p) => p.vstack(&s.features)?,
        });
    }
    let pooled = pooled.ok_or(ldc_core::LdcError::EmptyInput)?;
    let proj = pca2(&pooled)?;
    let mut out = String::from("set,class,pc1,pc2\n");
    let mut row = 0;
    for (name, s) in sets {
        for &label in &s.labels {
            out.push_str(&format!("{name},{label},{:?},{:?}\n", proj.coords[(row, 0)], proj.coords[(row, 1)]));
            row += 1;
        }
    }
    Ok((out, proj.variance_fraction))
}

/// Real, biased and calibrated base-class features of the first seed, or
/// the given embedding files tagged by file stem.
pub fn cmd_project(cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<(PathBuf, f64), CliError> {
    let sets: Vec<(String, SampleSet)> = if inputs.is_empty() {
        let seed = cfg.seeds[0];
        let episode = cfg.source()?.episode(&cfg.bench, seed)?;
        let real = episode.base_train();
        let base = run_base_session(&real, &episode.test_after(0), cfg.bench.k_shot, &cfg.bench.protocol, true, seed)?;
        let pcu = base.pcu.expect("trained with a unit");
        let classes = real.classes();
        let biased = pcu.sample_biased(&base.classifier, &classes, seed)?;
        let calibrated = pcu.calibrate(&biased)?;
        vec![("real".into(), real), ("biased".into(), biased), ("calibrated".into(), calibrated)]
    } else {
        inputs
            .iter()
            .map(|p| {
                let name = p.file_stem().map_or("set".into(), |s| s.to_string_lossy().into_owned());
                read_embedding_file(p)
                    .map(|s| (name, s))
                    .map_err(|e| CliError::Config(ConfigError::Invalid(format!("{}: {e}", p.display()))))
            })
            .collect::<Result<_, _>>()?
    };
    let (csv, fraction) = projection_csv(&sets)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("projection.csv");
    fs::write(&path, csv)?;
    Ok((path, fraction))
}

pub fn cmd_gradcheck(seed: u64) -> Result<Vec<GradCheckReport>, CliError> {
    let reports = run_suite(seed)?;
    let failed = reports.iter().filter(|r| !r.ok()).count();
    for r in &reports {
        println!("{r}");
    }
    if failed > 0 {
        return Err(CliError::CheckFailed(failed));
    }
    Ok(reports)
}
