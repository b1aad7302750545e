//! Synthetic corpora with planted concept directions.
//!
//! Each FULL image draws intensities `z_c ~ U[0, 1)` for every concept and
//! embeds as `sum_c z_c * u_c + eps`, `eps ~ N(0, sigma^2 I)`, over seeded
//! orthonormal directions `u_c`. Crops copy their parent's intensities but
//! re-draw the local concept, so region refinement has something to find.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Corpus, CorpusHeader, ImageRecord, ImageSize, Rect, Tier};

/// Side length of generated FULL images, in pixels.
pub const IMAGE_SIDE: f64 = 300.0;
/// Four quarter tiles plus eight eighth tiles.
pub const MAX_CROPS_PER_IMAGE: usize = 12;
pub const CATEGORIES: [&str; 3] = ["grade1", "grade2", "grade3"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub dimension: usize,
    pub n_full_images: usize,
    pub crops_per_image: usize,
    pub n_concepts: usize,
    pub noise_sigma: f64,
    pub label_threshold: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dimension: 128,
            n_full_images: 1000,
            crops_per_image: MAX_CROPS_PER_IMAGE,
            n_concepts: 4,
            noise_sigma: 0.05,
            label_threshold: 0.7,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_concepts == 0 {
            return bad("need at least one concept".into());
        }
        if self.dimension < self.n_concepts {
            return bad(format!(
                "dimension {} is smaller than concept count {}",
                self.dimension, self.n_concepts
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise sigma {} must be nonnegative",
                self.noise_sigma
            ));
        }
        if !(self.label_threshold > 0.0 && self.label_threshold < 1.0) {
            return bad(format!(
                "label threshold {} must lie in (0, 1)",
                self.label_threshold
            ));
        }
        if self.crops_per_image > MAX_CROPS_PER_IMAGE {
            return bad(format!(
                "at most {MAX_CROPS_PER_IMAGE} crops per image, got {}",
                self.crops_per_image
            ));
        }
        Ok(())
    }

    pub fn concept_names(&self) -> Vec<String> {
        (0..self.n_concepts).map(concept_name).collect()
    }

    /// Concept whose intensity bins into the diagnosis category.
    pub fn grading_concept(&self) -> String {
        concept_name(0)
    }

    /// Concept re-drawn per crop.
    pub fn local_concept(&self) -> String {
        concept_name(self.n_concepts - 1)
    }
}

pub fn concept_name(i: usize) -> String {
    format!("concept_{i}")
}

/// Orthonormal concept directions `u_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedDirections {
    pub directions: Vec<Vec<f64>>,
}

impl PlantedDirections {
    /// Gram-Schmidt (two passes) over seeded Gaussian vectors.
    pub fn draw<R: Rng>(rng: &mut R, dimension: usize, count: usize) -> Result<Self> {
        if count > dimension {
            return Err(Error::InvalidSpec(format!(
                "cannot plant {count} orthonormal directions in dimension {dimension}"
            )));
        }
        let mut directions: Vec<Vec<f64>> = Vec::with_capacity(count);
        while directions.len() < count {
            let mut v: Vec<f64> = (0..dimension).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..2 {
                for u in &directions {
                    let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                directions.push(v);
            }
        }
        Ok(Self { directions })
    }

    pub fn dimension(&self) -> usize {
        self.directions.first().map_or(0, Vec::len)
    }

    /// `sum_c z_c * u_c`.
    pub fn embed(&self, intensities: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension()];
        for (z, u) in intensities.iter().zip(&self.directions) {
            for (o, ui) in out.iter_mut().zip(u) {
                *o += z * ui;
            }
        }
        out
    }
}

/// A generated corpus together with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub corpus: Corpus,
    pub directions: PlantedDirections,
}

impl SyntheticCorpus {
    pub fn direction(&self, concept: &str) -> Option<&[f64]> {
        let i = self
            .spec
            .concept_names()
            .iter()
            .position(|c| c == concept)?;
        Some(&self.directions.directions[i])
    }
}

fn crop_layout(j: usize) -> (Tier, Rect) {
    let half = IMAGE_SIDE / 2.0;
    let quarter = IMAGE_SIDE / 4.0;
    if j < 4 {
        let (col, row) = ((j % 2) as f64, (j / 2) as f64);
        (Tier::Quarter, Rect::new(col * half, row * half, half, half))
    } else {
        let k = j - 4;
        let (col, row) = ((k % 4) as f64, (k / 4) as f64);
        (
            Tier::Eighth,
            Rect::new(col * quarter, row * half, quarter, half),
        )
    }
}

fn diagnosis_for(grading_intensity: f64) -> &'static str {
    let bin = ((grading_intensity * CATEGORIES.len() as f64) as usize).min(CATEGORIES.len() - 1);
    CATEGORIES[bin]
}

/// Generates a corpus per `spec`. Fully determined by `spec.seed`.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let directions = PlantedDirections::draw(&mut rng, spec.dimension, spec.n_concepts)?;
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let names = spec.concept_names();
    let local = spec.n_concepts - 1;
    let size = ImageSize {
        width: IMAGE_SIDE,
        height: IMAGE_SIDE,
    };

    let make = |z: &[f64], rng: &mut ChaCha8Rng| -> ImageParts {
        let mut embedding = directions.embed(z);
        if spec.noise_sigma > 0.0 {
            embedding.iter_mut().for_each(|e| *e += noise.sample(rng));
        }
        let labels = names
            .iter()
            .zip(z)
            .map(|(n, &v)| (n.clone(), v > spec.label_threshold))
            .collect();
        let intensities = names.iter().cloned().zip(z.iter().copied()).collect();
        ImageParts {
            embedding,
            labels,
            intensities,
        }
    };

    let mut records = Vec::with_capacity(spec.n_full_images * (1 + spec.crops_per_image));
    for i in 0..spec.n_full_images {
        let z: Vec<f64> = (0..spec.n_concepts).map(|_| rng.random::<f64>()).collect();
        let id = format!("img_{i:05}");
        let diagnosis = diagnosis_for(z[0]).to_owned();
        let parts = make(&z, &mut rng);
        records.push(parts.into_record(
            id.clone(),
            Tier::Full,
            None,
            None,
            Some(size),
            diagnosis.clone(),
        ));

        for j in 0..spec.crops_per_image {
            let (tier, region) = crop_layout(j);
            let mut zc = z.clone();
            zc[local] = rng.random::<f64>();
            let parts = make(&zc, &mut rng);
            let tag = if tier == Tier::Quarter { 'q' } else { 'e' };
            records.push(parts.into_record(
                format!("{id}_{tag}{j:02}"),
                tier,
                Some(id.clone()),
                Some(region),
                None,
                diagnosis.clone(),
            ));
        }
    }

    let header = CorpusHeader::new(
        spec.dimension,
        CATEGORIES.iter().map(|c| c.to_string()).collect(),
        names,
    );
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        corpus: Corpus::new(header, records)?,
        directions,
    })
}

struct ImageParts {
    embedding: Vec<f64>,
    labels: BTreeMap<String, bool>,
    intensities: BTreeMap<String, f64>,
}

impl ImageParts {
    fn into_record(
        self,
        id: String,
        tier: Tier,
        parent_id: Option<String>,
        region: Option<Rect>,
        size: Option<ImageSize>,
        diagnosis: String,
    ) -> ImageRecord {
        ImageRecord {
            id,
            source_uri: String::new(),
            tier,
            parent_id,
            region,
            size,
            diagnosis,
            concept_labels: Some(self.labels),
            oracle_intensities: Some(self.intensities),
            embedding: self.embedding,
        }
    }
}

/// Ground-truth intensity of `concept` in `record`.
pub fn oracle_presence(record: &ImageRecord, concept: &str) -> Result<f64> {
    record
        .oracle_intensity(concept)
        .ok_or_else(|| Error::OracleUnavailable {
            id: record.id.clone(),
            concept: concept.to_owned(),
        })
}
