//! Pairwise with/without-refinement evaluation against an intensity oracle.

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cav::{
    train_random_cav, CavRegistry, ConceptVector, TrainerConfig, DEFAULT_LABELED_POOL,
};
use crate::error::{Error, Result};
use crate::knn::{search, RankedResult, DEFAULT_PAGE_SIZE};
use crate::refinement::{snap_crop, QueryState};
use crate::store::{Corpus, ImageRecord, Tier};
use crate::synth::{oracle_presence, SyntheticSpec};

/// |refined - baseline| below this counts as a tie.
pub const TIE_TOLERANCE: f64 = 1e-9;
/// Examples pinned by the EXAMPLE tool.
pub const PINNED_EXAMPLES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tool {
    Region,
    Example,
    Concept,
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tool::Region => "REGION",
            Tool::Example => "EXAMPLE",
            Tool::Concept => "CONCEPT",
        })
    }
}

impl std::str::FromStr for Tool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "region" => Ok(Tool::Region),
            "example" => Ok(Tool::Example),
            "concept" => Ok(Tool::Concept),
            _ => Err(Error::InvalidArgument(format!("unknown tool {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub target_concept: String,
    pub n_queries: usize,
    pub seed: u64,
    /// Results scored per query.
    pub top_k: usize,
    /// CAV for the CONCEPT tool; trained from corpus labels when absent.
    pub cav: Option<ConceptVector>,
    pub trainer: TrainerConfig,
    /// Overrides the corpus median norm as slider scale.
    pub slider_scale: Option<f64>,
}

impl EvalConfig {
    pub fn new(target_concept: impl Into<String>, n_queries: usize, seed: u64) -> Self {
        Self {
            target_concept: target_concept.into(),
            n_queries,
            seed,
            top_k: DEFAULT_PAGE_SIZE,
            cav: None,
            trainer: TrainerConfig::default(),
            slider_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub baseline: f64,
    pub refined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool: Tool,
    pub target_concept: String,
    pub query_count: usize,
    pub seed: u64,
    pub top_k: usize,
    pub mean_with_refinement: f64,
    pub mean_without_refinement: f64,
    pub fraction_improved: f64,
    pub fraction_tied: f64,
    pub fraction_worsened: f64,
    /// Refined results that fell outside the tier the refinement selected.
    pub off_tier_results: usize,
    /// Generator parameters when the corpus is synthetic and known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
    pub outcomes: Vec<QueryOutcome>,
}

impl EvalReport {
    /// Aligned plain-text summary.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let rows: [(&str, String); 9] = [
            ("tool", self.tool.to_string()),
            ("target concept", self.target_concept.clone()),
            ("queries", self.query_count.to_string()),
            ("seed", self.seed.to_string()),
            (
                "mean presence (refined)",
                format!("{:.4}", self.mean_with_refinement),
            ),
            (
                "mean presence (baseline)",
                format!("{:.4}", self.mean_without_refinement),
            ),
            (
                "fraction improved",
                format!("{:.3}", self.fraction_improved),
            ),
            ("fraction tied", format!("{:.3}", self.fraction_tied)),
            (
                "fraction worsened",
                format!("{:.3}", self.fraction_worsened),
            ),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        if let Some(spec) = &self.spec {
            out.push_str(&format!(
                "{:<width$}  sigma={} tau={} D={} images={}\n",
                "corpus",
                spec.noise_sigma,
                spec.label_threshold,
                spec.dimension,
                spec.n_full_images
            ));
        }
        out
    }
}

fn mean_presence(corpus: &Corpus, results: &[RankedResult], concept: &str) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::ToolInapplicable("search returned no results".into()));
    }
    let mut sum = 0.0;
    for r in results {
        sum += oracle_presence(corpus.get_record(&r.image_id)?, concept)?;
    }
    Ok(sum / results.len() as f64)
}

struct Run<'a> {
    corpus: &'a Corpus,
    registry: CavRegistry,
    cfg: &'a EvalConfig,
    off_tier: usize,
}

impl Run<'_> {
    fn results(&self, state: &QueryState) -> Result<(Vec<RankedResult>, Tier)> {
        let query = state.compose(self.corpus, &self.registry)?;
        let filter = state.search_filter(self.corpus)?;
        Ok((
            search(self.corpus, &query, &filter, self.cfg.top_k)?,
            filter.tier,
        ))
    }

    fn presence(&self, results: &[RankedResult]) -> Result<f64> {
        mean_presence(self.corpus, results, &self.cfg.target_concept)
    }

    fn evaluate(&mut self, tool: Tool, base: &ImageRecord) -> Result<QueryOutcome> {
        let fresh = match self.cfg.slider_scale {
            Some(a) => QueryState::with_scale(self.corpus, &base.id, a)?,
            None => QueryState::new(self.corpus, &base.id)?,
        };
        let (baseline_results, _) = self.results(&fresh)?;
        let baseline = self.presence(&baseline_results)?;

        let mut state = fresh;
        let target = &self.cfg.target_concept;
        match tool {
            Tool::Concept => state.set_slider(&self.registry, target, 1.0)?,
            Tool::Example => {
                let mut scored = baseline_results
                    .iter()
                    .enumerate()
                    .map(|(rank, r)| {
                        let z = oracle_presence(self.corpus.get_record(&r.image_id)?, target)?;
                        Ok((z, rank, r.image_id.as_str()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                // highest intensity first, earlier rank on ties
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let pins: Vec<&str> = scored.iter().take(PINNED_EXAMPLES).map(|s| s.2).collect();
                state.refine_by_example(self.corpus, &pins)?;
            }
            Tool::Region => {
                let best = self
                    .corpus
                    .crop_children(&base.id)
                    .map(|c| Ok((oracle_presence(c, target)?, c)))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.id.cmp(&a.1.id)))
                    .map(|(_, c)| c)
                    .ok_or_else(|| {
                        Error::ToolInapplicable(format!("{} has no crop children", base.id))
                    })?;
                let region = best.region.expect("crop records carry a region");
                let snapped = snap_crop(self.corpus, &base.id, region)?;
                state.refine_by_region(self.corpus, &snapped)?;
            }
        }
        let (refined_results, tier) = self.results(&state)?;
        self.off_tier += refined_results
            .iter()
            .filter(|r| {
                self.corpus
                    .get_record(&r.image_id)
                    .map_or(true, |rec| rec.tier != tier)
            })
            .count();
        Ok(QueryOutcome {
            query_id: base.id.clone(),
            baseline,
            refined: self.presence(&refined_results)?,
        })
    }
}

/// Replays the with/without-refinement comparison for `tool` over seeded
/// random FULL-tier queries.
pub fn run_tool_eval(corpus: &Corpus, tool: Tool, cfg: &EvalConfig) -> Result<EvalReport> {
    if !corpus.has_concept(&cfg.target_concept) {
        return Err(Error::UnknownConcept(cfg.target_concept.clone()));
    }
    if cfg.n_queries == 0 || cfg.top_k == 0 {
        return Err(Error::InvalidArgument(
            "need at least one query and top_k > 0".into(),
        ));
    }

    let mut registry = CavRegistry::new();
    if tool == Tool::Concept {
        let cav = match &cfg.cav {
            Some(cav) if cav.name == cfg.target_concept => cav.clone(),
            Some(cav) => {
                return Err(Error::InvalidArgument(format!(
                    "CAV {:?} does not match target concept {:?}",
                    cav.name, cfg.target_concept
                )))
            }
            None => train_random_cav(
                corpus,
                &cfg.target_concept,
                Some(DEFAULT_LABELED_POOL),
                &cfg.trainer,
                cfg.seed,
            )?,
        };
        registry.insert(cav);
        registry.check_dimension(corpus.dimension())?;
    }

    let candidates: Vec<&ImageRecord> = corpus
        .tier_records(Tier::Full)
        .filter(|r| tool != Tool::Region || corpus.crop_children(&r.id).next().is_some())
        .collect();
    if candidates.is_empty() {
        return Err(Error::ToolInapplicable(format!(
            "no FULL-tier queries usable by {tool}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<usize> = if cfg.n_queries <= candidates.len() {
        index::sample(&mut rng, candidates.len(), cfg.n_queries).into_vec()
    } else {
        (0..cfg.n_queries).map(|i| i % candidates.len()).collect()
    };

    let mut run = Run {
        corpus,
        registry,
        cfg,
        off_tier: 0,
    };
    let outcomes = picks
        .iter()
        .map(|&i| run.evaluate(tool, candidates[i]))
        .collect::<Result<Vec<_>>>()?;

    let n = outcomes.len() as f64;
    let (mut improved, mut tied, mut worse) = (0usize, 0usize, 0usize);
    let (mut with, mut without) = (0.0, 0.0);
    for o in &outcomes {
        with += o.refined;
        without += o.baseline;
        let d = o.refined - o.baseline;
        if d.abs() < TIE_TOLERANCE {
            tied += 1;
        } else if d > 0.0 {
            improved += 1;
        } else {
            worse += 1;
        }
    }

    Ok(EvalReport {
        tool,
        target_concept: cfg.target_concept.clone(),
        query_count: outcomes.len(),
        seed: cfg.seed,
        top_k: cfg.top_k,
        mean_with_refinement: with / n,
        mean_without_refinement: without / n,
        fraction_improved: improved as f64 / n,
        fraction_tied: tied as f64 / n,
        fraction_worsened: worse as f64 / n,
        off_tier_results: run.off_tier,
        spec: None,
        outcomes,
    })
}
