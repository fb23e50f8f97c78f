//! The session engine: class splits, base training, incremental sessions
//! for LDC and the two comparators, and the accuracy/PD/PR metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{init_prototypes, train_classifier, ClassifierState, TrainOptions, TrainableRows, DEFAULT_SCALE};
use crate::codec::ByteWriter;
use crate::dataio::{sample_few_shot, synth_generate, ShotMode, SynthData, SynthSpec};
use crate::error::{LdcError, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::linstats::{
    estimate_mean_cov, sample_gaussian, update_shared_cov, DivergenceKind, GaussianStats, SampleSet,
    SharedCovariance,
};
use crate::pcu::{train_pcu_base, PcuState, PcuTrainOptions, DEFAULT_RECUR_ITERS, DEFAULT_SAMPLES_PER_CLASS};
use crate::seeds::child_seed;

const SCOPE_PLAN: u64 = 0x91A;
const SCOPE_SYNTH: u64 = 0x5E7;
const SCOPE_SPLIT: u64 = 0x5B1;
const SCOPE_SHOTS: u64 = 0x540;
const SCOPE_BASE_CLS: u64 = 0xBC1;
const SCOPE_PCU_INIT: u64 = 0x9C1;
const SCOPE_PCU_TRAIN: u64 = 0x9C2;
const SCOPE_INC_SAMPLE: u64 = 0x1C5;
const SCOPE_INC_TRAIN: u64 = 0x1C7;

const MEMORY_MAGIC: &[u8; 4] = b"LDCM";

/// Class-disjoint schedule. Class ids refer to the source dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionPlan {
    pub base_classes: Vec<usize>,
    pub sessions: Vec<Vec<usize>>,
    pub shots_per_class: usize,
}

impl SessionPlan {
    /// Base classes followed by every session's classes. Position in this
    /// list is the class's classifier row.
    pub fn order(&self) -> Vec<usize> {
        let mut out = self.base_classes.clone();
        self.sessions.iter().for_each(|s| out.extend(s));
        out
    }

    pub fn n_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn n_classes(&self) -> usize {
        self.base_classes.len() + self.sessions.iter().map(Vec::len).sum::<usize>()
    }

    /// Classes seen after session `t` (0 = base).
    pub fn seen_after(&self, t: usize) -> usize {
        self.base_classes.len() + self.sessions.iter().take(t).map(Vec::len).sum::<usize>()
    }
}

/// Shuffles `0..n_classes` with `seed`, takes the first `n_base` as base
/// classes and cuts the rest into sessions of `n_way`.
pub fn make_plan(n_classes: usize, n_base: usize, n_way: usize, k_shot: usize, seed: u64) -> Result<SessionPlan> {
    if n_base == 0 || n_way == 0 || k_shot == 0 {
        return Err(LdcError::BadSplit("n_base, n_way and k_shot must be positive".into()));
    }
    if n_classes <= n_base {
        return Err(LdcError::BadSplit(format!(
            "{n_classes} classes leave no incremental classes after {n_base} base classes"
        )));
    }
    let rest = n_classes - n_base;
    if rest % n_way != 0 {
        return Err(LdcError::BadSplit(format!(
            "{rest} incremental classes do not divide into sessions of {n_way}"
        )));
    }
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SessionPlan {
        base_classes: order[..n_base].to_vec(),
        sessions: order[n_base..].chunks(n_way).map(<[usize]>::to_vec).collect(),
        shots_per_class: k_shot,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaselineKind {
    Ldc,
    PrototypeOnly,
    EmpiricalCalib,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [Self::Ldc, Self::PrototypeOnly, Self::EmpiricalCalib];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ldc => "ldc",
            Self::PrototypeOnly => "prototype_only",
            Self::EmpiricalCalib => "empirical_calib",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = LdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ldc" => Ok(Self::Ldc),
            "prototype_only" | "prototype" | "prototypeonly" => Ok(Self::PrototypeOnly),
            "empirical_calib" | "empirical" | "empiricalcalib" => Ok(Self::EmpiricalCalib),
            other => Err(LdcError::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

/// Hyperparameters shared by every method.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub scale: f64,
    pub batch_size: usize,
    pub base_epochs: usize,
    pub base_lr: f64,
    pub inc_epochs: usize,
    pub inc_lr: f64,
    pub trainable: TrainableRows,
    pub samples_per_class: usize,
    pub recur_iters: usize,
    pub pcu_epochs: usize,
    pub pcu_lr: f64,
    pub matching_weight: f64,
    pub divergence: DivergenceKind,
    pub test_fraction: f64,
    /// Nearest base classes averaged by the empirical comparator.
    pub empirical_k: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_SCALE,
            batch_size: 32,
            base_epochs: 100,
            base_lr: 0.1,
            inc_epochs: 100,
            inc_lr: 0.01,
            trainable: TrainableRows::All,
            samples_per_class: DEFAULT_SAMPLES_PER_CLASS,
            recur_iters: DEFAULT_RECUR_ITERS,
            pcu_epochs: 400,
            pcu_lr: 0.005,
            matching_weight: 1.0,
            divergence: DivergenceKind::Kl,
            test_fraction: 0.2,
            empirical_k: 2,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LdcError::InvalidParameter(m));
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale must be positive".into());
        }
        for (name, v) in [("base_lr", self.base_lr), ("inc_lr", self.inc_lr), ("pcu_lr", self.pcu_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number"));
            }
        }
        if !(self.matching_weight >= 0.0 && self.matching_weight.is_finite()) {
            return bad("matching_weight must be nonnegative".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)".into());
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be at least 2".into());
        }
        if self.batch_size == 0 || self.empirical_k == 0 {
            return bad("batch_size and empirical_k must be positive".into());
        }
        Ok(())
    }
}

/// A dataset split for one run, relabelled so that class ids are positions
/// in [`SessionPlan::order`].
#[derive(Clone, Debug)]
pub struct Episode {
    pub plan: SessionPlan,
    pub train: SampleSet<f64>,
    pub test: SampleSet<f64>,
    /// Ground-truth distributions in relabelled order, when known.
    pub truth: Option<Vec<GaussianStats<f64>>>,
}

impl Episode {
    pub fn new(data: &SampleSet<f64>, truth: Option<&[GaussianStats<f64>]>, plan: SessionPlan, test_fraction: f64, seed: u64) -> Result<Self> {
        let order = plan.order();
        let position: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if data.classes() != position.keys().copied().collect::<Vec<_>>() {
            return Err(LdcError::ClassMismatch);
        }
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for &c in &order {
            let mut idx = data.indices_of(c);
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(child_seed(seed, SCOPE_SPLIT, c as u64)));
            let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
            if idx.len() < 2 {
                return Err(LdcError::InsufficientSamples { available: idx.len(), required: 2 });
            }
            test_idx.extend_from_slice(&idx[..n_test]);
            train_idx.extend_from_slice(&idx[n_test..]);
        }
        let relabel = |s: SampleSet<f64>| SampleSet::new(s.features, s.labels.iter().map(|l| position[l]).collect());
        let truth = match truth {
            Some(t) => Some(order.iter().map(|&c| t.get(c).cloned().ok_or(LdcError::UnknownClass(c))).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        Ok(Self {
            train: relabel(data.select(&train_idx))?,
            test: relabel(data.select(&test_idx))?,
            plan,
            truth,
        })
    }

    /// Training rows of the base classes.
    pub fn base_train(&self) -> SampleSet<f64> {
        self.seen_subset(&self.train, self.plan.seen_after(0))
    }

    /// Test rows of every class seen after session `t`.
    pub fn test_after(&self, t: usize) -> SampleSet<f64> {
        self.seen_subset(&self.test, self.plan.seen_after(t))
    }

    fn seen_subset(&self, set: &SampleSet<f64>, seen: usize) -> SampleSet<f64> {
        let idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] < seen).collect();
        set.select(&idx)
    }

    /// The `K` training shots of every class in session `t ≥ 1`.
    pub fn session_shots(&self, t: usize, mode: ShotMode, seed: u64) -> Result<SampleSet<f64>> {
        let (lo, hi) = (self.plan.seen_after(t - 1), self.plan.seen_after(t));
        let k = self.plan.shots_per_class;
        let mut picked = Vec::with_capacity((hi - lo) * k);
        for c in lo..hi {
            let idx = self.train.indices_of(c);
            let rows = self.train.features.select_rows(&idx);
            let reference = self.truth.as_ref().map(|t| &t[c]);
            let chosen = sample_few_shot(&rows, k, mode, reference, child_seed(seed, SCOPE_SHOTS, c as u64))?;
            picked.extend(chosen.into_iter().map(|i| idx[i]));
        }
        Ok(self.train.select(&picked))
    }
}

/// Per-class mean and covariance records kept by the empirical comparator.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMemory {
    pub records: Vec<GaussianStats<f64>>,
    /// The first `n_base` records are base classes, the calibration pool.
    pub n_base: usize,
}

impl EmpiricalMemory {
    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, GaussianStats::dim)
    }

    /// Mean is the average of the prototype and the `k` base means most
    /// cosine-similar to it; covariance is the average of their covariances.
    pub fn calibrate(&self, prototype: &[f64], k: usize) -> Result<GaussianStats<f64>> {
        if self.n_base == 0 {
            return Err(LdcError::EmptyInput);
        }
        let np = norm(prototype);
        let mut scored: Vec<(f64, usize)> = self.records[..self.n_base]
            .iter()
            .enumerate()
            .map(|(i, r)| (dot(prototype, &r.mean) / (np * norm(&r.mean)).max(f64::MIN_POSITIVE), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let k = k.min(self.n_base);
        let d = prototype.len();
        let mut mean = prototype.to_vec();
        let mut cov = Matrix::zeros(d, d);
        for &(_, i) in &scored[..k] {
            let r = &self.records[i];
            mean.iter_mut().zip(&r.mean).for_each(|(m, v)| *m += v);
            cov.axpy(1.0, &r.cov)?;
        }
        mean.iter_mut().for_each(|m| *m /= (k + 1) as f64);
        GaussianStats::new(mean, cov.scale(1.0 / k as f64))
    }

    /// `LDCM`, version, d, record count, then mean and row-major covariance
    /// of every record.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.magic(MEMORY_MAGIC);
        w.u32(1);
        w.u32(self.dim() as u32);
        w.u32(self.records.len() as u32);
        for r in &self.records {
            w.f64s(r.mean.iter().copied());
            w.f64s(r.cov.as_slice().iter().copied());
        }
        w.buf
    }

    pub fn record_bytes(&self) -> usize {
        let d = self.dim();
        8 * (d + d * d)
    }
}

/// Everything a method carries between sessions.
#[derive(Clone, Debug)]
pub struct LearnerState {
    pub method: BaselineKind,
    pub classifier: ClassifierState<f64>,
    pub pcu: Option<PcuState>,
    pub memory: Option<EmpiricalMemory>,
    pub shots_per_class: usize,
}

impl LearnerState {
    /// Size of the calibration state the method must keep: the serialized
    /// PCU for LDC, the statistics memory for the empirical comparator and
    /// nothing for prototype-only.
    pub fn state_bytes(&self) -> usize {
        match self.method {
            BaselineKind::Ldc => self.pcu.as_ref().map_or(0, PcuState::stored_bytes),
            BaselineKind::PrototypeOnly => 0,
            BaselineKind::EmpiricalCalib => self.memory.as_ref().map_or(0, |m| m.to_bytes().len()),
        }
    }

    pub fn n_seen(&self) -> usize {
        self.classifier.n_classes()
    }
}

/// Output of base training shared by all methods of one seed.
#[derive(Clone, Debug)]
pub struct BaseOutcome {
    pub classifier: ClassifierState<f64>,
    pub class_stats: Vec<GaussianStats<f64>>,
    pub shared: SharedCovariance<f64>,
    pub pcu: Option<PcuState>,
    pub pcu_trace: Vec<f64>,
    pub accuracy: f64,
}

impl BaseOutcome {
    pub fn learner(&self, method: BaselineKind, shots_per_class: usize) -> Result<LearnerState> {
        let pcu = match method {
            BaselineKind::Ldc => Some(self.pcu.clone().ok_or_else(|| {
                LdcError::InvalidParameter("base session ran without PCU training".into())
            })?),
            _ => None,
        };
        let memory = (method == BaselineKind::EmpiricalCalib).then(|| EmpiricalMemory {
            records: self.class_stats.clone(),
            n_base: self.class_stats.len(),
        });
        Ok(LearnerState {
            method,
            classifier: self.classifier.clone(),
            pcu,
            memory,
            shots_per_class,
        })
    }
}

fn per_class_rows(set: &SampleSet<f64>, classes: std::ops::Range<usize>) -> Vec<Matrix<f64>> {
    classes.map(|c| set.class_rows(c)).collect()
}

/// Base session: prototype initialization, classifier training, `Σ^(0)`
/// from the per-class base covariances, optional PCU training, and
/// accuracy on the base test split. Labels must be `0..n_base`.
pub fn run_base_session(
    base_train: &SampleSet<f64>,
    base_test: &SampleSet<f64>,
    k_shot: usize,
    cfg: &ProtocolConfig,
    train_pcu: bool,
    seed: u64,
) -> Result<BaseOutcome> {
    let classes = base_train.classes();
    let n_base = classes.len();
    if n_base == 0 {
        return Err(LdcError::EmptyInput);
    }
    if classes != (0..n_base).collect::<Vec<_>>() {
        return Err(LdcError::ClassMismatch);
    }
    let rows = per_class_rows(base_train, 0..n_base);
    for r in &rows {
        if r.rows() < 2 * k_shot.max(1) {
            return Err(LdcError::InsufficientSamples { available: r.rows(), required: 2 * k_shot.max(1) });
        }
    }
    let init = ClassifierState::new(init_prototypes(&rows)?, cfg.scale)?;
    let opts = TrainOptions {
        epochs: cfg.base_epochs,
        lr: cfg.base_lr,
        batch_size: cfg.batch_size,
        trainable: TrainableRows::All,
        seed: child_seed(seed, SCOPE_BASE_CLS, 0),
    };
    let (classifier, _) = train_classifier(&init, base_train, &opts)?;
    let shared = update_shared_cov(&SharedCovariance::empty(base_train.dim()), &rows)?;
    let class_stats = rows.iter().map(estimate_mean_cov).collect::<Result<Vec<_>>>()?;
    let (pcu, pcu_trace) = if train_pcu {
        let fresh = PcuState::new(shared.clone(), cfg.samples_per_class, cfg.recur_iters, child_seed(seed, SCOPE_PCU_INIT, 0))?;
        let opts = PcuTrainOptions {
            epochs: cfg.pcu_epochs,
            lr: cfg.pcu_lr,
            divergence: cfg.divergence,
            matching_weight: cfg.matching_weight,
            seed: child_seed(seed, SCOPE_PCU_TRAIN, 0),
            ..PcuTrainOptions::default()
        };
        let (p, trace) = train_pcu_base(&fresh, &classifier, base_train, &opts)?;
        (Some(p), trace)
    } else {
        (None, Vec::new())
    };
    let accuracy = evaluate(&classifier, base_test)?;
    Ok(BaseOutcome {
        classifier,
        class_stats,
        shared,
        pcu,
        pcu_trace,
        accuracy,
    })
}

fn check_session_data(state: &LearnerState, shots: &SampleSet<f64>) -> Result<usize> {
    let n_seen = state.n_seen();
    let classes = shots.classes();
    if let Some(&c) = classes.iter().find(|&&c| c < n_seen) {
        return Err(LdcError::ClassCollision(c));
    }
    if let Some((_, &c)) = classes.iter().enumerate().find(|&(i, &c)| c != n_seen + i) {
        return Err(LdcError::UnknownClass(c));
    }
    for &c in &classes {
        let found = shots.indices_of(c).len();
        if found != state.shots_per_class {
            return Err(LdcError::ShotCountMismatch { class: c, expected: state.shots_per_class, found });
        }
    }
    Ok(classes.len())
}

/// One incremental session. Expands the classifier with the few-shot
/// prototypes, builds the method's synthetic features for all seen classes,
/// trains the classifier on shots plus synthetic features, and returns the
/// accuracy on `test_seen`.
pub fn run_incremental_session(
    state: &mut LearnerState,
    shots: &SampleSet<f64>,
    test_seen: &SampleSet<f64>,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<f64> {
    let n_new = check_session_data(state, shots)?;
    let n_seen = state.n_seen();
    let rows = per_class_rows(shots, n_seen..n_seen + n_new);
    let protos = init_prototypes(&rows)?;
    state.classifier = state.classifier.expand(&protos)?;
    let all: Vec<usize> = (0..state.n_seen()).collect();
    let sample_seed = child_seed(seed, SCOPE_INC_SAMPLE, 0);
    let synthetic = match state.method {
        BaselineKind::PrototypeOnly => None,
        BaselineKind::Ldc => {
            let pcu = state.pcu.as_mut().expect("LDC state holds a PCU");
            pcu.shared = update_shared_cov(&pcu.shared, &rows)?;
            let biased = pcu.sample_biased(&state.classifier, &all, sample_seed)?;
            Some(pcu.calibrate(&biased)?)
        }
        BaselineKind::EmpiricalCalib => {
            let memory = state.memory.as_mut().expect("empirical state holds a memory");
            for p in protos.row_iter() {
                let stats = memory.calibrate(p, cfg.empirical_k)?;
                memory.records.push(stats);
            }
            let mut set = SampleSet::empty(shots.dim());
            for (c, stats) in memory.records.iter().enumerate() {
                let drawn = sample_gaussian(stats, cfg.samples_per_class, c, child_seed(sample_seed, c as u64, 1))?;
                set = set.concat(&drawn)?;
            }
            Some(set)
        }
    };
    let train = match synthetic {
        Some(s) => shots.concat(&s)?,
        None => shots.clone(),
    };
    let opts = TrainOptions {
        epochs: cfg.inc_epochs,
        lr: cfg.inc_lr,
        batch_size: cfg.batch_size,
        trainable: match cfg.trainable {
            TrainableRows::All => TrainableRows::All,
            TrainableRows::From(_) => TrainableRows::From(n_seen),
        },
        seed: child_seed(seed, SCOPE_INC_TRAIN, 0),
    };
    state.classifier = train_classifier(&state.classifier, &train, &opts)?.0;
    evaluate(&state.classifier, test_seen)
}

/// Percentage of correctly classified test rows.
pub fn evaluate(classifier: &ClassifierState<f64>, test: &SampleSet<f64>) -> Result<f64> {
    if let Some(&l) = test.labels.iter().find(|&&l| l >= classifier.n_classes()) {
        return Err(LdcError::UnseenLabel(l));
    }
    classifier.accuracy(test)
}

/// Performance drop `acc(0) − acc(T)` and retention `100·acc(T)/acc(0)`.
pub fn compute_pd_pr(accuracies: &[f64]) -> Result<(f64, f64)> {
    let (&first, &last) = match (accuracies.first(), accuracies.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(LdcError::EmptyList),
    };
    if accuracies.iter().any(|a| !(0.0..=100.0).contains(a)) {
        return Err(LdcError::InvalidParameter("accuracies must lie in [0, 100]".into()));
    }
    if first == 0.0 {
        return Err(LdcError::InvalidParameter("retention is undefined when acc(0) = 0".into()));
    }
    Ok((first - last, 100.0 * last / first))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionResult {
    pub method: BaselineKind,
    pub seed: u64,
    /// Accuracy after every session, base first.
    pub accuracies: Vec<f64>,
    pub pd: f64,
    pub pr: f64,
    pub state_bytes: Vec<usize>,
    pub wall_ms: Vec<f64>,
}

impl SessionResult {
    pub fn final_accuracy(&self) -> f64 {
        *self.accuracies.last().expect("at least the base session")
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs every incremental session from a finished base session.
pub fn run_sessions(
    episode: &Episode,
    base: &BaseOutcome,
    base_ms: f64,
    method: BaselineKind,
    cfg: &ProtocolConfig,
    mode: ShotMode,
    seed: u64,
) -> Result<SessionResult> {
    let mut state = base.learner(method, episode.plan.shots_per_class)?;
    let mut accuracies = vec![base.accuracy];
    let mut state_bytes = vec![state.state_bytes()];
    let mut wall_ms = vec![base_ms];
    for t in 1..=episode.plan.n_sessions() {
        let start = Instant::now();
        let shots = episode.session_shots(t, mode, seed)?;
        let test = episode.test_after(t);
        let acc = run_incremental_session(&mut state, &shots, &test, cfg, child_seed(seed, 0x5E55, t as u64))?;
        accuracies.push(acc);
        state_bytes.push(state.state_bytes());
        wall_ms.push(elapsed_ms(start));
    }
    let (pd, pr) = compute_pd_pr(&accuracies)?;
    Ok(SessionResult { method, seed, accuracies, pd, pr, state_bytes, wall_ms })
}

/// Base session plus all incremental sessions for one method.
pub fn run_cell(episode: &Episode, method: BaselineKind, cfg: &ProtocolConfig, mode: ShotMode, seed: u64) -> Result<SessionResult> {
    cfg.validate()?;
    let start = Instant::now();
    let base = run_base_session(
        &episode.base_train(),
        &episode.test_after(0),
        episode.plan.shots_per_class,
        cfg,
        method == BaselineKind::Ldc,
        seed,
    )?;
    run_sessions(episode, &base, elapsed_ms(start), method, cfg, mode, seed)
}

/// A synthetic benchmark: data generator, class split and protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub synth: SynthSpec,
    pub n_base: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub shot_mode: ShotMode,
    pub protocol: ProtocolConfig,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            n_base: 12,
            n_way: 2,
            k_shot: 5,
            shot_mode: ShotMode::Normal,
            protocol: ProtocolConfig::default(),
        }
    }
}

impl Benchmark {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.protocol.validate()?;
        make_plan(self.synth.n_classes, self.n_base, self.n_way, self.k_shot, 0)?;
        Ok(())
    }

    /// Data, plan and split for `seed`; identical for every method.
    pub fn episode(&self, seed: u64) -> Result<Episode> {
        let spec = SynthSpec { seed: child_seed(seed, SCOPE_SYNTH, 0), ..self.synth.clone() };
        let SynthData { samples, truth } = synth_generate(&spec)?;
        self.episode_from(&samples, Some(&truth), seed)
    }

    /// Plan and split of existing data whose labels are `0..n`.
    pub fn episode_from(&self, samples: &SampleSet<f64>, truth: Option<&[GaussianStats<f64>]>, seed: u64) -> Result<Episode> {
        let n = samples.classes().len();
        let plan = make_plan(n, self.n_base, self.n_way, self.k_shot, child_seed(seed, SCOPE_PLAN, 0))?;
        Episode::new(samples, truth, plan, self.protocol.test_fraction, child_seed(seed, SCOPE_SPLIT, 0))
    }

    pub fn run(&self, method: BaselineKind, seed: u64) -> Result<SessionResult> {
        run_cell(&self.episode(seed)?, method, &self.protocol, self.shot_mode, seed)
    }
}
