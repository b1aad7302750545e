//! Per-session query state and composition of the three refinement tools.
//!
//! The effective query is `B + sum_c s_c * alpha * V_c`, where the base `B`
//! is the mean of the pinned examples if any, else the active crop, else the
//! original image.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cav::CavRegistry;
use crate::error::{Error, Result};
use crate::knn::SearchFilter;
use crate::store::{Corpus, Rect, Tier};

/// Nearest precomputed crop to a user's requested rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnappedCrop {
    pub tier: Tier,
    pub snapped_region: Rect,
    pub requested_region: Rect,
    pub matched_record_id: String,
    /// `1 - IoU(requested, snapped)`.
    pub score: f64,
}

/// Finds the crop child of `base_image_id` with the highest IoU against
/// `requested` (ties broken by id).
pub fn snap_crop(corpus: &Corpus, base_image_id: &str, requested: Rect) -> Result<SnappedCrop> {
    let base = corpus.get_record(base_image_id)?;
    if base.tier != Tier::Full {
        return Err(Error::NotFullTier(base.id.clone()));
    }
    if !requested.is_well_formed() {
        return Err(Error::InvalidArgument(
            "requested region must have positive finite extent".into(),
        ));
    }
    corpus
        .crop_children(base_image_id)
        .filter_map(|c| c.region.map(|r| (1.0 - requested.iou(&r), r, c)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.2.id.cmp(&b.2.id)))
        .map(|(score, region, rec)| SnappedCrop {
            tier: rec.tier,
            snapped_region: region,
            requested_region: requested,
            matched_record_id: rec.id.clone(),
            score,
        })
        .ok_or_else(|| Error::NoCropChildren(base_image_id.to_owned()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryState {
    base_image_id: String,
    active_crop: Option<String>,
    pinned_example_ids: Vec<String>,
    sliders: BTreeMap<String, f64>,
    category_filter: Option<BTreeSet<String>>,
    slider_scale: f64,
}

impl QueryState {
    /// Fresh state for a FULL-tier query image, with the slider scale set to
    /// the corpus median embedding norm.
    pub fn new(corpus: &Corpus, base_image_id: &str) -> Result<Self> {
        let scale = corpus.median_norm().ok_or(Error::EmptyCorpus)?;
        Self::with_scale(corpus, base_image_id, scale)
    }

    pub fn with_scale(corpus: &Corpus, base_image_id: &str, slider_scale: f64) -> Result<Self> {
        let base = corpus.get_record(base_image_id)?;
        if base.tier != Tier::Full {
            return Err(Error::NotFullTier(base.id.clone()));
        }
        if !(slider_scale.is_finite() && slider_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "slider scale must be positive, got {slider_scale}"
            )));
        }
        Ok(Self {
            base_image_id: base.id.clone(),
            active_crop: None,
            pinned_example_ids: Vec::new(),
            sliders: BTreeMap::new(),
            category_filter: None,
            slider_scale,
        })
    }

    pub fn base_image_id(&self) -> &str {
        &self.base_image_id
    }

    pub fn active_crop(&self) -> Option<&str> {
        self.active_crop.as_deref()
    }

    pub fn pinned_example_ids(&self) -> &[String] {
        &self.pinned_example_ids
    }

    pub fn sliders(&self) -> &BTreeMap<String, f64> {
        &self.sliders
    }

    pub fn slider(&self, concept: &str) -> f64 {
        self.sliders.get(concept).copied().unwrap_or(0.0)
    }

    pub fn category_filter(&self) -> Option<&BTreeSet<String>> {
        self.category_filter.as_ref()
    }

    pub fn slider_scale(&self) -> f64 {
        self.slider_scale
    }

    /// Uses the snapped crop as the query base and restricts search to its
    /// tier. Pins are cleared.
    pub fn refine_by_region(&mut self, corpus: &Corpus, snapped: &SnappedCrop) -> Result<()> {
        let crop = corpus.get_record(&snapped.matched_record_id)?;
        if crop.parent_id.as_deref() != Some(self.base_image_id.as_str()) {
            return Err(Error::ForeignCrop {
                crop: crop.id.clone(),
                base: self.base_image_id.clone(),
            });
        }
        self.active_crop = Some(crop.id.clone());
        self.pinned_example_ids.clear();
        Ok(())
    }

    pub fn clear_crop(&mut self) {
        self.active_crop = None;
    }

    /// Replaces the pinned examples. An empty list clears the pins.
    pub fn refine_by_example<S: AsRef<str>>(
        &mut self,
        corpus: &Corpus,
        example_ids: &[S],
    ) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut ids = Vec::with_capacity(example_ids.len());
        let mut tier = None;
        for id in example_ids {
            let rec = corpus.get_record(id.as_ref())?;
            match tier {
                None => tier = Some(rec.tier),
                Some(t) if t != rec.tier => return Err(Error::MixedTiers(t, rec.tier)),
                _ => {}
            }
            if seen.insert(rec.id.as_str()) {
                ids.push(rec.id.clone());
            }
        }
        self.pinned_example_ids = ids;
        Ok(())
    }

    /// Stores `value` clamped to [-1, 1] for a registered concept.
    pub fn set_slider(&mut self, registry: &CavRegistry, concept: &str, value: f64) -> Result<()> {
        if !registry.contains(concept) {
            return Err(Error::UnknownConcept(concept.to_owned()));
        }
        if value.is_nan() {
            return Err(Error::InvalidArgument("slider value is NaN".into()));
        }
        let clamped = value.clamp(-1.0, 1.0);
        if clamped == 0.0 {
            self.sliders.remove(concept);
        } else {
            self.sliders.insert(concept.to_owned(), clamped);
        }
        Ok(())
    }

    pub fn reset_sliders(&mut self) {
        self.sliders.clear();
    }

    /// Restricts results to `categories`; `None` removes the restriction.
    pub fn set_category_filter<I, S>(
        &mut self,
        corpus: &Corpus,
        categories: Option<I>,
    ) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let filter = match categories {
            None => None,
            Some(cats) => {
                let set: BTreeSet<String> = cats.into_iter().map(Into::into).collect();
                if let Some(bad) = set.iter().find(|c| !corpus.has_category(c)) {
                    return Err(Error::UnknownCategory(bad.clone()));
                }
                Some(set)
            }
        };
        self.category_filter = filter;
        Ok(())
    }

    pub fn set_slider_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "slider scale must be positive, got {scale}"
            )));
        }
        self.slider_scale = scale;
        Ok(())
    }

    /// Tier searched under the current state.
    pub fn search_tier(&self, corpus: &Corpus) -> Result<Tier> {
        if let Some(first) = self.pinned_example_ids.first() {
            return Ok(corpus.get_record(first)?.tier);
        }
        match &self.active_crop {
            Some(crop) => Ok(corpus.get_record(crop)?.tier),
            None => Ok(Tier::Full),
        }
    }

    pub fn search_filter(&self, corpus: &Corpus) -> Result<SearchFilter> {
        let mut exclude = BTreeSet::from([self.base_image_id.clone()]);
        exclude.extend(self.active_crop.iter().cloned());
        Ok(SearchFilter {
            tier: self.search_tier(corpus)?,
            allowed_categories: self.category_filter.clone(),
            exclude_ids: exclude,
        })
    }

    /// The embedding the query base resolves to before slider shifts.
    pub fn base_embedding(&self, corpus: &Corpus) -> Result<Vec<f64>> {
        if !self.pinned_example_ids.is_empty() {
            let mut sum = vec![0.0; corpus.dimension()];
            for id in &self.pinned_example_ids {
                for (acc, v) in sum.iter_mut().zip(&corpus.get_record(id)?.embedding) {
                    *acc += v;
                }
            }
            let n = self.pinned_example_ids.len() as f64;
            sum.iter_mut().for_each(|v| *v /= n);
            return Ok(sum);
        }
        let id = self.active_crop.as_deref().unwrap_or(&self.base_image_id);
        Ok(corpus.get_record(id)?.embedding.clone())
    }

    /// Effective query embedding. Pure in `self`.
    pub fn compose(&self, corpus: &Corpus, registry: &CavRegistry) -> Result<Vec<f64>> {
        let mut query = self.base_embedding(corpus)?;
        for (concept, &s) in &self.sliders {
            if s == 0.0 {
                continue;
            }
            let cav = registry
                .get(concept)
                .ok_or_else(|| Error::UnknownConcept(concept.clone()))?;
            if cav.dimension() != query.len() {
                return Err(Error::DimensionMismatch {
                    expected: query.len(),
                    actual: cav.dimension(),
                });
            }
            let step = s * self.slider_scale;
            for (q, v) in query.iter_mut().zip(&cav.direction) {
                *q += step * v;
            }
        }
        Ok(query)
    }
}

/// Free-function form of [`QueryState::compose`].
pub fn compose_query(
    state: &QueryState,
    corpus: &Corpus,
    registry: &CavRegistry,
) -> Result<Vec<f64>> {
    state.compose(corpus, registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cav::{ConceptVector, NegativeMode, TrainerConfig};
    use crate::store::{CorpusHeader, ImageRecord, ImageSize};

    fn rec(
        id: &str,
        tier: Tier,
        parent: Option<&str>,
        region: Option<Rect>,
        embedding: Vec<f64>,
    ) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            source_uri: String::new(),
            tier,
            parent_id: parent.map(Into::into),
            region,
            size: (tier == Tier::Full).then_some(ImageSize {
                width: 300.0,
                height: 300.0,
            }),
            diagnosis: "grade1".into(),
            concept_labels: None,
            oracle_intensities: None,
            embedding,
        }
    }

    fn corpus() -> Corpus {
        let header = CorpusHeader::new(
            2,
            vec!["grade1".into(), "grade3".into()],
            vec!["fused_glands".into()],
        );
        Corpus::new(
            header,
            vec![
                rec("base", Tier::Full, None, None, vec![1.0, 2.0]),
                rec("other", Tier::Full, None, None, vec![3.0, 0.0]),
                rec("lonely", Tier::Full, None, None, vec![0.0, 0.0]),
                rec(
                    "base_q0",
                    Tier::Quarter,
                    Some("base"),
                    Some(Rect::new(0.0, 0.0, 150.0, 150.0)),
                    vec![0.5, 0.5],
                ),
                rec(
                    "base_q3",
                    Tier::Quarter,
                    Some("base"),
                    Some(Rect::new(150.0, 150.0, 150.0, 150.0)),
                    vec![0.7, 0.1],
                ),
                rec(
                    "other_q0",
                    Tier::Quarter,
                    Some("other"),
                    Some(Rect::new(0.0, 0.0, 150.0, 150.0)),
                    vec![2.0, 2.0],
                ),
            ],
        )
        .unwrap()
    }

    fn registry() -> CavRegistry {
        [ConceptVector {
            name: "fused_glands".into(),
            direction: vec![0.6, 0.8],
            n_positive: 2,
            n_negative: 2,
            negative_mode: NegativeMode::Random,
            seed: 0,
            hyperparameters: TrainerConfig::default(),
        }]
        .into_iter()
        .collect()
    }

    #[test]
    fn snap_exact_region() {
        let c = corpus();
        let s = snap_crop(&c, "base", Rect::new(150.0, 150.0, 150.0, 150.0)).unwrap();
        assert_eq!(s.matched_record_id, "base_q3");
        assert_eq!(s.score, 0.0);
        assert_eq!(s.tier, Tier::Quarter);
    }

    #[test]
    fn snap_prefers_higher_iou() {
        let c = corpus();
        // IoU with (0,0,150,150) is 140^2/150^2 = 0.871; with (150,150,...) zero overlap
        let s = snap_crop(&c, "base", Rect::new(10.0, 10.0, 140.0, 140.0)).unwrap();
        assert_eq!(s.matched_record_id, "base_q0");
        assert!((s.score - (1.0 - 19600.0 / 22500.0)).abs() < 1e-12);
        assert_eq!(s.snapped_region, Rect::new(0.0, 0.0, 150.0, 150.0));
    }

    #[test]
    fn snap_single_child_always_wins() {
        let c = corpus();
        let s = snap_crop(&c, "other", Rect::new(290.0, 290.0, 5.0, 5.0)).unwrap();
        assert_eq!(s.matched_record_id, "other_q0");
    }

    #[test]
    fn snap_without_children_errors() {
        let c = corpus();
        assert!(matches!(
            snap_crop(&c, "lonely", Rect::new(0.0, 0.0, 10.0, 10.0)),
            Err(Error::NoCropChildren(_))
        ));
    }

    #[test]
    fn region_refinement_switches_tier() {
        let c = corpus();
        let mut st = QueryState::with_scale(&c, "base", 1.0).unwrap();
        st.refine_by_example(&c, &["other"]).unwrap();
        let s = snap_crop(&c, "base", Rect::new(0.0, 0.0, 150.0, 150.0)).unwrap();
        st.refine_by_region(&c, &s).unwrap();
        assert_eq!(st.search_tier(&c).unwrap(), Tier::Quarter);
        assert!(st.pinned_example_ids().is_empty());
        let f = st.search_filter(&c).unwrap();
        assert!(f.exclude_ids.contains("base_q0") && f.exclude_ids.contains("base"));

        let s2 = snap_crop(&c, "base", Rect::new(150.0, 150.0, 150.0, 150.0)).unwrap();
        st.refine_by_region(&c, &s2).unwrap();
        assert_eq!(st.active_crop(), Some("base_q3"));
        assert_eq!(st.base_embedding(&c).unwrap(), vec![0.7, 0.1]);

        st.clear_crop();
        assert_eq!(st.search_tier(&c).unwrap(), Tier::Full);
        assert_eq!(st.base_embedding(&c).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn foreign_crop_rejected() {
        let c = corpus();
        let mut st = QueryState::with_scale(&c, "base", 1.0).unwrap();
        let s = snap_crop(&c, "other", Rect::new(0.0, 0.0, 150.0, 150.0)).unwrap();
        assert!(matches!(
            st.refine_by_region(&c, &s),
            Err(Error::ForeignCrop { .. })
        ));
        assert_eq!(st.active_crop(), None);
    }

    #[test]
    fn example_pins_average() {
        let c = corpus();
        let mut st = QueryState::with_scale(&c, "base", 1.0).unwrap();
        st.refine_by_example(&c, &["other"]).unwrap();
        assert_eq!(st.base_embedding(&c).unwrap(), vec![3.0, 0.0]);
        st.refine_by_example(&c, &["other", "lonely"]).unwrap();
        assert_eq!(st.base_embedding(&c).unwrap(), vec![1.5, 0.0]);
        st.refine_by_example::<&str>(&c, &[]).unwrap();
        assert_eq!(st.base_embedding(&c).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn example_errors_leave_state() {
        let c = corpus();
        let mut st = QueryState::with_scale(&c, "base", 1.0).unwrap();
        st.refine_by_example(&c, &["other"]).unwrap();
        assert!(matches!(
            st.refine_by_example(&c, &["other", "base_q0"]),
            Err(Error::MixedTiers(..))
        ));
        assert!(matches!(
            st.refine_by_example(&c, &["nope"]),
            Err(Error::NotFound(_))
        ));
        assert_eq!(st.pinned_example_ids(), ["other".to_string()]);
    }

    #[test]
    fn slider_clamps_and_shifts() {
        let c = corpus();
        let reg = registry();
        let mut st = QueryState::with_scale(&c, "base", 1.0).unwrap();
        st.set_slider(&reg, "fused_glands", 0.5).unwrap();
        let q = st.compose(&c, &reg).unwrap();
        assert!(
            (q[0] - 1.3).abs() < 1e-15 && (q[1] - 2.4).abs() < 1e-15,
            "{q:?}"
        );

        st.set_slider(&reg, "fused_glands", 2.0).unwrap();
        assert_eq!(st.slider("fused_glands"), 1.0);
        st.set_slider(&reg, "fused_glands", 0.0).unwrap();
        assert_eq!(st.compose(&c, &reg).unwrap(), vec![1.0, 2.0]);

        assert!(matches!(
            st.set_slider(&reg, "nope", 0.5),
            Err(Error::UnknownConcept(_))
        ));
    }

    #[test]
    fn compose_requires_registered_concepts() {
        let c = corpus();
        let reg = registry();
        let mut st = QueryState::with_scale(&c, "base", 1.0).unwrap();
        st.set_slider(&reg, "fused_glands", 0.5).unwrap();
        assert!(matches!(
            st.compose(&c, &CavRegistry::new()),
            Err(Error::UnknownConcept(_))
        ));
    }

    #[test]
    fn category_filter_validated() {
        let c = corpus();
        let mut st = QueryState::with_scale(&c, "base", 1.0).unwrap();
        assert!(st.set_category_filter(&c, Some(["grade7"])).is_err());
        assert!(st.category_filter().is_none());
        st.set_category_filter(&c, Some(["grade3"])).unwrap();
        assert_eq!(
            st.search_filter(&c)
                .unwrap()
                .allowed_categories
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn base_must_be_full() {
        let c = corpus();
        assert!(matches!(
            QueryState::new(&c, "base_q0"),
            Err(Error::NotFullTier(_))
        ));
        assert!(QueryState::with_scale(&c, "base", 0.0).is_err());
    }
}
