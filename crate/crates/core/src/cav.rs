//! Concept activation vectors.
//!
//! A CAV is the unit normal of a logistic-regression hyperplane separating
//! embeddings that contain a concept from embeddings that do not (or that
//! contain an opposing concept). Training is deterministic full-batch
//! gradient descent from the origin, so a given input always yields the same
//! direction bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{l2_norm, Corpus, ImageRecord, Tier};

/// Labeled examples per class used when training from a corpus.
pub const DEFAULT_LABELED_POOL: usize = 100;
pub const DEFAULT_STABILITY_N: [usize; 5] = [5, 10, 20, 40, 80];
pub const DEFAULT_STABILITY_TRIALS: usize = 20;

/// A weight vector shorter than this is treated as "no separating direction".
const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            l2: 0.1,
            learning_rate: 0.1,
            tolerance: 1e-6,
            max_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeMode {
    #[serde(rename = "RANDOM")]
    Random,
    #[serde(rename = "OPPOSING")]
    Opposing(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub name: String,
    pub direction: Vec<f64>,
    pub n_positive: usize,
    pub n_negative: usize,
    pub negative_mode: NegativeMode,
    pub seed: u64,
    pub hyperparameters: TrainerConfig,
}

impl ConceptVector {
    pub fn dimension(&self) -> usize {
        self.direction.len()
    }
}

/// Fitted logistic-regression parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticFit {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }
}

/// Row-major design matrix with 0/1 labels.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    dim: usize,
    rows: Vec<f64>,
    labels: Vec<f64>,
}

impl LabeledSet {
    pub fn new<P, N>(positives: &[P], negatives: &[N]) -> Result<Self>
    where
        P: AsRef<[f64]>,
        N: AsRef<[f64]>,
    {
        let dim = positives
            .first()
            .map(|p| p.as_ref().len())
            .or_else(|| negatives.first().map(|n| n.as_ref().len()))
            .unwrap_or(0);
        let n = positives.len() + negatives.len();
        let mut rows = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        let pos = positives.iter().map(|p| (p.as_ref(), 1.0));
        let neg = negatives.iter().map(|x| (x.as_ref(), 0.0));
        for (x, y) in pos.chain(neg) {
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: x.len(),
                });
            }
            rows.extend_from_slice(x);
            labels.push(y);
        }
        Ok(Self { dim, rows, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.rows
            .chunks_exact(self.dim.max(1))
            .zip(self.labels.iter().copied())
    }

    /// Mean log-loss plus `l2 / 2 * |w|^2`.
    pub fn loss(&self, weights: &[f64], bias: f64, l2: f64) -> f64 {
        let n = self.len() as f64;
        let data: f64 = self
            .rows()
            .map(|(x, y)| {
                let z = dot(weights, x) + bias;
                softplus(z) - y * z
            })
            .sum();
        data / n + 0.5 * l2 * dot(weights, weights)
    }

    /// Analytic gradient of [`loss`](Self::loss) with respect to `(weights, bias)`.
    pub fn gradient(&self, weights: &[f64], bias: f64, l2: f64) -> (Vec<f64>, f64) {
        let mut gw = vec![0.0; self.dim];
        let mut gb = 0.0;
        for (x, y) in self.rows() {
            let r = sigmoid(dot(weights, x) + bias) - y;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += r * xi;
            }
            gb += r;
        }
        let n = self.len() as f64;
        for (g, w) in gw.iter_mut().zip(weights) {
            *g = *g / n + l2 * w;
        }
        (gw, gb / n)
    }

    /// Full-batch gradient descent from `w = 0, b = 0`.
    pub fn fit(&self, cfg: &TrainerConfig) -> LogisticFit {
        let mut w = vec![0.0; self.dim];
        let mut b = 0.0;
        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.max_iterations {
            let (gw, gb) = self.gradient(&w, b, cfg.l2);
            let gnorm = (dot(&gw, &gw) + gb * gb).sqrt();
            if gnorm < cfg.tolerance {
                converged = true;
                break;
            }
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= cfg.learning_rate * gi;
            }
            b -= cfg.learning_rate * gb;
            iterations += 1;
        }
        LogisticFit {
            weights: w,
            bias: b,
            iterations,
            converged,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Trains a CAV from explicit example sets.
pub fn train_cav<P, N>(
    name: &str,
    positives: &[P],
    negatives: &[N],
    negative_mode: NegativeMode,
    hyper: &TrainerConfig,
    seed: u64,
) -> Result<ConceptVector>
where
    P: AsRef<[f64]>,
    N: AsRef<[f64]>,
{
    if positives.len() < 2 || negatives.len() < 2 {
        return Err(Error::InsufficientExamples {
            concept: name.to_owned(),
            needed: 2,
            available: positives.len().min(negatives.len()),
        });
    }
    let set = LabeledSet::new(positives, negatives)?;
    if set.dim() == 0 {
        return Err(Error::TrainingFailure("zero-dimensional embeddings".into()));
    }
    let fit = set.fit(hyper);
    let norm = l2_norm(&fit.weights);
    if !norm.is_finite() || norm < DEGENERATE_NORM {
        return Err(Error::TrainingFailure(format!(
            "classes of {name:?} are not separable (|w| = {norm:e})"
        )));
    }
    Ok(ConceptVector {
        name: name.to_owned(),
        direction: fit.weights.iter().map(|w| w / norm).collect(),
        n_positive: positives.len(),
        n_negative: negatives.len(),
        negative_mode,
        seed,
        hyperparameters: *hyper,
    })
}

/// FULL-tier records labeled positive for `concept`, in corpus order.
pub fn labeled_positives<'a>(corpus: &'a Corpus, concept: &str) -> Vec<&'a ImageRecord> {
    corpus
        .tier_records(Tier::Full)
        .filter(|r| r.has_concept(concept))
        .collect()
}

/// FULL-tier records not labeled positive for `concept`, in corpus order.
pub fn unlabeled_for<'a>(corpus: &'a Corpus, concept: &str) -> Vec<&'a ImageRecord> {
    corpus
        .tier_records(Tier::Full)
        .filter(|r| !r.has_concept(concept))
        .collect()
}

fn require_concept(corpus: &Corpus, concept: &str) -> Result<()> {
    if corpus.has_concept(concept) {
        Ok(())
    } else {
        Err(Error::UnknownConcept(concept.to_owned()))
    }
}

/// Picks `n` of `len` indices with a seeded RNG, returned in ascending order.
fn sample_sorted(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    let mut idx = index::sample(rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

fn embeddings<'a>(records: &[&'a ImageRecord], picks: &[usize]) -> Vec<&'a [f64]> {
    picks
        .iter()
        .map(|&i| records[i].embedding.as_slice())
        .collect()
}

/// Trains a CAV for `concept` against a random subset of records not labeled
/// with it, matched 1:1 in count. At most `pool` positives are used
/// (seeded subsample) when `pool` is given.
pub fn train_random_cav(
    corpus: &Corpus,
    concept: &str,
    pool: Option<usize>,
    hyper: &TrainerConfig,
    seed: u64,
) -> Result<ConceptVector> {
    require_concept(corpus, concept)?;
    let positives = labeled_positives(corpus, concept);
    let others = unlabeled_for(corpus, concept);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = pool.map_or(positives.len(), |p| p.min(positives.len()));
    if n_pos < 2 {
        return Err(Error::InsufficientExamples {
            concept: concept.to_owned(),
            needed: 2,
            available: n_pos,
        });
    }
    if others.len() < n_pos {
        return Err(Error::InsufficientExamples {
            concept: format!("not-{concept}"),
            needed: n_pos,
            available: others.len(),
        });
    }
    let pos_pick = sample_sorted(&mut rng, positives.len(), n_pos);
    let neg_pick = sample_sorted(&mut rng, others.len(), n_pos);
    train_cav(
        concept,
        &embeddings(&positives, &pos_pick),
        &embeddings(&others, &neg_pick),
        NegativeMode::Random,
        hyper,
        seed,
    )
}

/// Trains a relative CAV: records labeled `concept` against records labeled `opposing`.
pub fn train_relative_cav(
    corpus: &Corpus,
    concept: &str,
    opposing: &str,
    hyper: &TrainerConfig,
    seed: u64,
) -> Result<ConceptVector> {
    require_concept(corpus, concept)?;
    require_concept(corpus, opposing)?;
    if concept == opposing {
        return Err(Error::TrainingFailure(format!(
            "{concept:?} cannot oppose itself: identical classes"
        )));
    }
    let pos: Vec<&[f64]> = labeled_positives(corpus, concept)
        .iter()
        .map(|r| r.embedding.as_slice())
        .collect();
    let neg: Vec<&[f64]> = labeled_positives(corpus, opposing)
        .iter()
        .map(|r| r.embedding.as_slice())
        .collect();
    for (name, set) in [(concept, &pos), (opposing, &neg)] {
        if set.len() < 2 {
            return Err(Error::InsufficientExamples {
                concept: name.to_owned(),
                needed: 2,
                available: set.len(),
            });
        }
    }
    train_cav(
        concept,
        &pos,
        &neg,
        NegativeMode::Opposing(opposing.to_owned()),
        hyper,
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityPoint {
    pub n: usize,
    pub median_cosine: f64,
    pub q1_cosine: f64,
    pub q3_cosine: f64,
    pub cosines: Vec<f64>,
}

impl StabilityPoint {
    pub fn iqr(&self) -> f64 {
        self.q3_cosine - self.q1_cosine
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCurve {
    pub concept: String,
    pub n_positive_available: usize,
    pub trials: usize,
    pub seed: u64,
    pub points: Vec<StabilityPoint>,
}

impl StabilityCurve {
    pub fn median_at(&self, n: usize) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.n == n)
            .map(|p| p.median_cosine)
    }
}

fn trial_seed(seed: u64, n: usize, trial: usize) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (trial as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Cosine similarity between CAVs trained on `n` positives (and `n`
/// negatives) and the CAV trained on every labeled positive.
///
/// The reference CAV uses all FULL-tier positives and an equal-sized seeded
/// draw of negatives; each trial subsamples both sets. Trials run in
/// parallel with per-trial seeds, so the output is schedule independent.
pub fn stability_curve(
    corpus: &Corpus,
    concept: &str,
    n_values: &[usize],
    trials: usize,
    hyper: &TrainerConfig,
    seed: u64,
) -> Result<StabilityCurve> {
    require_concept(corpus, concept)?;
    if trials == 0 || n_values.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one n value and one trial".into(),
        ));
    }
    let positives = labeled_positives(corpus, concept);
    let others = unlabeled_for(corpus, concept);
    let total = positives.len();
    let max_n = n_values.iter().copied().max().unwrap_or(0);
    if max_n > total || n_values.iter().any(|&n| n < 2) {
        return Err(Error::InsufficientExamples {
            concept: concept.to_owned(),
            needed: max_n.max(2),
            available: total,
        });
    }
    if others.len() < total {
        return Err(Error::InsufficientExamples {
            concept: format!("not-{concept}"),
            needed: total,
            available: others.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let neg_pool: Vec<&ImageRecord> = sample_sorted(&mut rng, others.len(), total)
        .into_iter()
        .map(|i| others[i])
        .collect();
    let all: Vec<usize> = (0..total).collect();
    let reference = train_cav(
        concept,
        &embeddings(&positives, &all),
        &embeddings(&neg_pool, &all),
        NegativeMode::Random,
        hyper,
        seed,
    )?;

    let jobs: Vec<(usize, usize)> = n_values
        .iter()
        .flat_map(|&n| (0..trials).map(move |t| (n, t)))
        .collect();
    let cosines: Vec<f64> = jobs
        .par_iter()
        .map(|&(n, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, n, t));
            let pos = sample_sorted(&mut rng, total, n);
            let neg = sample_sorted(&mut rng, total, n);
            let cav = train_cav(
                concept,
                &embeddings(&positives, &pos),
                &embeddings(&neg_pool, &neg),
                NegativeMode::Random,
                hyper,
                seed,
            )?;
            Ok(dot(&cav.direction, &reference.direction))
        })
        .collect::<Result<_>>()?;

    let points = n_values
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let cos = cosines[i * trials..(i + 1) * trials].to_vec();
            let mut sorted = cos.clone();
            sorted.sort_by(f64::total_cmp);
            StabilityPoint {
                n,
                median_cosine: quantile(&sorted, 0.5),
                q1_cosine: quantile(&sorted, 0.25),
                q3_cosine: quantile(&sorted, 0.75),
                cosines: cos,
            }
        })
        .collect();

    Ok(StabilityCurve {
        concept: concept.to_owned(),
        n_positive_available: total,
        trials,
        seed,
        points,
    })
}

/// Named CAVs available to sliders. Serialized as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CavRegistry {
    cavs: BTreeMap<String, ConceptVector>,
}

impl CavRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the CAV registered under `cav.name`.
    pub fn insert(&mut self, cav: ConceptVector) -> Option<ConceptVector> {
        self.cavs.insert(cav.name.clone(), cav)
    }

    pub fn get(&self, name: &str) -> Option<&ConceptVector> {
        self.cavs.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.cavs.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.cavs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cavs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConceptVector> {
        self.cavs.values()
    }

    /// Checks every CAV against the corpus dimension.
    pub fn check_dimension(&self, dimension: usize) -> Result<()> {
        match self.cavs.values().find(|c| c.dimension() != dimension) {
            Some(c) => Err(Error::InvalidArgument(format!(
                "CAV {:?} has dimension {}, corpus has {dimension}",
                c.name,
                c.dimension()
            ))),
            None => Ok(()),
        }
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut reg = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<cav registry>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let cav: ConceptVector = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                line: n + 1,
                what: "CAV",
                message: e.to_string(),
            })?;
            let norm = l2_norm(&cav.direction);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Malformed {
                    line: n + 1,
                    what: "CAV",
                    message: format!("direction of {:?} has norm {norm}", cav.name),
                });
            }
            reg.insert(cav);
        }
        Ok(reg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file))
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for cav in self.cavs.values() {
            serde_json::to_writer(&mut *out, cav)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }
}

impl FromIterator<ConceptVector> for CavRegistry {
    fn from_iter<I: IntoIterator<Item = ConceptVector>>(iter: I) -> Self {
        let mut reg = Self::new();
        for cav in iter {
            reg.insert(cav);
        }
        reg
    }
}
