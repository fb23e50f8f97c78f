//! Synthetic class distributions, few-shot selection and the embedding
//! file formats (binary `LDCE` and CSV).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{LdcError, Result};
use crate::linalg::{forward_substitute, norm, sym_eigen, Matrix};
use crate::linstats::{
    cholesky_psd, estimate_mean_cov, sample_gaussian, GaussianStats, SampleSet, DEFAULT_JITTER,
};
use crate::seeds::child_seed;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Outlier-mode rows come from the top fifth by Mahalanobis distance.
pub const OUTLIER_FRACTION: f64 = 0.2;

const EMBED_MAGIC: &[u8; 4] = b"LDCE";
const EMBED_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Minimum pairwise distance between class means.
    pub mean_separation: f64,
    /// Largest eigenvalue of every class covariance.
    pub cov_scale: f64,
    /// Ratio of largest to smallest eigenvalue.
    pub cov_anisotropy: f64,
    /// How independently the class covariances are oriented: 0 gives every
    /// class the same eigenbasis, 1 an independent uniformly random one.
    pub rotation_spread: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 20,
            dim: 16,
            samples_per_class: 200,
            mean_separation: 3.0,
            cov_scale: 1.0,
            cov_anisotropy: 10.0,
            rotation_spread: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LdcError::InvalidParameter(m.into()));
        if self.n_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return bad("n_classes, dim and samples_per_class must be at least 1");
        }
        if !(self.mean_separation > 0.0 && self.mean_separation.is_finite()) {
            return bad("mean_separation must be positive");
        }
        if !(self.cov_scale > 0.0 && self.cov_scale.is_finite()) {
            return bad("cov_scale must be positive");
        }
        if !(self.cov_anisotropy >= 1.0 && self.cov_anisotropy.is_finite()) {
            return bad("cov_anisotropy must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.rotation_spread) {
            return bad("rotation_spread must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Generated samples together with the distributions they were drawn from.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub samples: SampleSet<f64>,
    pub truth: Vec<GaussianStats<f64>>,
}

fn symmetric_gaussian(d: usize, rng: &mut ChaCha8Rng) -> Result<Matrix<f64>> {
    let a = Matrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    a.add(&a.transpose())
}

/// Eigenbasis (ascending) of `(1 − spread)·shared + spread·G` with `G` a
/// fresh symmetric Gaussian matrix. At spread 1 this is Haar distributed.
fn class_rotation(shared: &Matrix<f64>, spread: f64, rng: &mut ChaCha8Rng) -> Result<Matrix<f64>> {
    let own = symmetric_gaussian(shared.rows(), rng)?;
    let mix = Matrix::from_fn(shared.rows(), shared.cols(), |i, j| {
        (1.0 - spread) * shared[(i, j)] + spread * own[(i, j)]
    });
    Ok(sym_eigen(&mix)?.vectors)
}

fn place_means(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let radius = spec.mean_separation;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    let mut attempts = 0;
    while means.len() < spec.n_classes {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            return Err(LdcError::PlacementFailure(attempts));
        }
        attempts += 1;
        let mut v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x *= radius / n);
        let far = means.iter().all(|m| {
            let d2: f64 = m.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= spec.mean_separation
        });
        if far {
            means.push(v);
        }
    }
    Ok(means)
}

/// Draws class means on the sphere of radius `mean_separation`, rejecting
/// any that land closer than `mean_separation` to an earlier one, and gives
/// each class a randomly rotated covariance with spectrum in
/// `[cov_scale / cov_anisotropy, cov_scale]`. With `rotation_spread < 1`
/// the rotations share a common component, so classes have similar shapes.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(spec.seed, 0xD47A, 0));
    let means = place_means(spec, &mut rng)?;
    let lo = spec.cov_scale / spec.cov_anisotropy;
    let d = spec.dim;
    let mut truth = Vec::with_capacity(spec.n_classes);
    let mut samples = SampleSet::empty(d);
    let shared = symmetric_gaussian(d, &mut rng)?;
    for (c, mean) in means.into_iter().enumerate() {
        let q = class_rotation(&shared, spec.rotation_spread, &mut rng)?;
        let mut spectrum: Vec<f64> = (0..d)
            .map(|_| if lo < spec.cov_scale { rng.random_range(lo..=spec.cov_scale) } else { lo })
            .collect();
        // eigenvectors come in ascending order; pair them with a sorted
        // spectrum so shared bases give shared shapes
        spectrum.sort_by(f64::total_cmp);
        let scaled = Matrix::from_fn(d, d, |i, j| q[(i, j)] * spectrum[j]);
        let cov = scaled.matmul_t(&q)?.symmetrize();
        let stats = GaussianStats::new(mean, cov)?;
        let drawn = sample_gaussian(&stats, spec.samples_per_class, c, child_seed(spec.seed, 0x5A3, c as u64))?;
        samples = samples.concat(&drawn)?;
        truth.push(stats);
    }
    Ok(SynthData { samples, truth })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShotMode {
    #[default]
    Normal,
    Outlier,
}

impl fmt::Display for ShotMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShotMode::Normal => "normal",
            ShotMode::Outlier => "outlier",
        })
    }
}

impl FromStr for ShotMode {
    type Err = LdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(ShotMode::Normal),
            "outlier" => Ok(ShotMode::Outlier),
            other => Err(LdcError::InvalidParameter(format!("unknown few-shot mode {other:?}"))),
        }
    }
}

/// Mahalanobis distance of every row to `stats`.
pub fn mahalanobis(rows: &Matrix<f64>, stats: &GaussianStats<f64>) -> Result<Vec<f64>> {
    if rows.cols() != stats.dim() {
        return Err(LdcError::DimensionMismatch {
            expected: stats.dim(),
            found: rows.cols(),
        });
    }
    let l = cholesky_psd(&stats.cov, DEFAULT_JITTER)?.factor;
    let mut centered = vec![0.0; stats.dim()];
    Ok(rows
        .row_iter()
        .map(|r| {
            for ((c, &x), &m) in centered.iter_mut().zip(r).zip(&stats.mean) {
                *c = x - m;
            }
            norm(&forward_substitute(&l, &centered))
        })
        .collect())
}

/// Picks `k` row indices of `class_samples`. Normal mode draws uniformly
/// without replacement; outlier mode draws uniformly among the rows in the
/// top [`OUTLIER_FRACTION`] by Mahalanobis distance to `reference`, or to
/// the rows' own fit when no reference is given.
pub fn sample_few_shot(
    class_samples: &Matrix<f64>,
    k: usize,
    mode: ShotMode,
    reference: Option<&GaussianStats<f64>>,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = class_samples.rows();
    let required = match mode {
        ShotMode::Normal => k,
        ShotMode::Outlier => 5 * k,
    };
    if n < required || k == 0 {
        return Err(LdcError::InsufficientSamples {
            available: n,
            required: required.max(1),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        ShotMode::Normal => Ok(sample(&mut rng, n, k).into_vec()),
        ShotMode::Outlier => {
            let fitted;
            let stats = match reference {
                Some(s) => s,
                None => {
                    fitted = estimate_mean_cov(class_samples)?;
                    &fitted
                }
            };
            let dist = mahalanobis(class_samples, stats)?;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            let tail = ((n as f64 * OUTLIER_FRACTION).ceil() as usize).clamp(k, n);
            Ok(sample(&mut rng, tail, k).into_iter().map(|i| order[i]).collect())
        }
    }
}

/// Binary `LDCE` encoding: magic, version, `n`, `d`, `n` u32 labels and the
/// row-major f64 features, all little-endian.
pub fn encode_embeddings(set: &SampleSet<f64>) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.magic(EMBED_MAGIC);
    w.u32(EMBED_VERSION);
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| LdcError::InvalidParameter(format!("{v} exceeds u32")))
    };
    w.u32(to_u32(set.len())?);
    w.u32(to_u32(set.dim())?);
    for &l in &set.labels {
        w.u32(to_u32(l)?);
    }
    w.f64s(set.features.as_slice().iter().copied());
    Ok(w.buf)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<SampleSet<f64>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(EMBED_MAGIC, "LDCE")?;
    let version = r.u32()?;
    if version != EMBED_VERSION {
        return Err(LdcError::BadVersion(version));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let payload = n
        .checked_mul(4)
        .and_then(|l| n.checked_mul(d)?.checked_mul(8)?.checked_add(l))
        .ok_or(LdcError::TruncatedFile)?;
    if r.remaining() < payload {
        return Err(LdcError::TruncatedFile);
    }
    let labels = (0..n).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
    let features = Matrix::from_vec(n, d, r.f64s(n * d)?)?;
    if r.remaining() != 0 {
        return Err(LdcError::InvalidParameter("trailing bytes after embedding payload".into()));
    }
    SampleSet::new(features, labels)
}

/// CSV with a one-line header followed by `label,f1,...,fd` rows. Features
/// are written with shortest round-trip formatting.
pub fn encode_csv(set: &SampleSet<f64>) -> String {
    let mut out = String::from("label");
    for j in 1..=set.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (row, label) in set.features.row_iter().zip(&set.labels) {
        out.push_str(&label.to_string());
        for v in row {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn decode_csv(text: &str) -> Result<SampleSet<f64>> {
    let mut lines = text.lines().enumerate();
    lines.next().ok_or(LdcError::EmptyInput)?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || width.is_some_and(|w| w != fields.len()) {
            return Err(LdcError::RaggedCsv(line_no));
        }
        width = Some(fields.len());
        let bad = |f: &str| LdcError::BadCsvValue {
            line: line_no,
            field: f.to_string(),
        };
        labels.push(fields[0].parse::<usize>().map_err(|_| bad(fields[0]))?);
        for f in &fields[1..] {
            data.push(f.parse::<f64>().map_err(|_| bad(f))?);
        }
    }
    let d = width.map_or(0, |w| w - 1);
    SampleSet::new(Matrix::from_vec(labels.len(), d, data)?, labels)
}

/// Reads either format, chosen by the leading magic bytes.
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<SampleSet<f64>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(EMBED_MAGIC) {
        decode_embeddings(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| LdcError::BadMagic { expected: "LDCE" })?;
        decode_csv(&text)
    }
}

/// Writes CSV when the extension is `.csv`, the binary format otherwise.
pub fn write_embedding_file(path: impl AsRef<Path>, set: &SampleSet<f64>) -> Result<()> {
    let path = path.as_ref();
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        fs::write(path, encode_csv(set))?;
    } else {
        fs::write(path, encode_embeddings(set)?)?;
    }
    Ok(())
}
